"""IoU@0.5 evaluation of clean and attacked predictions, experiment runner and report output."""

import csv
import hashlib
import io
import json
import logging
import os
from dataclasses import asdict, dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import __version__
from .attacks import ATTACK_KINDS, EXCLUSIVE_TARGET, PerturbationBudget, craft, exclusive_targets, permuted_targets
from .boxcodec import BoundingBox, decode_tokens, encode_box, hit_at_05
from .grounder import (GrounderModel, TrainConfig, greedy_decode_batch, init_model, load_checkpoint,
                       save_checkpoint, train)
from .scenegen import SceneAnnotation, Split, generate_dataset, load_dataset

logger = logging.getLogger(__name__)

CSV_COLUMNS = ("method", "split", "metric_target", "hits", "total", "iou_at_05_pct")

METHOD_LABELS = {
    "none": "no attack",
    "image-embed": "image embedding attack",
    "textual-box": "textual bounding box attack",
    "exclusive": "exclusive",
    "permuted": "permuted",
}
GROUND_TRUTH = "ground-truth"
ALTERED_LABEL = "altered-label"
FEASIBILITY_TOL = 1e-9


class ConfigError(ValueError):
    pass


@dataclass
class ReportRow:
    method: str
    split: str
    metric_target: str
    hits: int
    total: int
    degenerate: int = 0

    @property
    def percentage(self) -> Decimal:
        if self.total == 0:
            return Decimal(0)
        return Decimal(100 * int(self.hits)) / Decimal(int(self.total))

    def rendered_pct(self) -> str:
        return str(self.percentage.quantize(Decimal("0.01"), rounding=ROUND_HALF_UP))


@dataclass
class EvalReport:
    rows: List[ReportRow] = field(default_factory=list)
    provenance: Dict = field(default_factory=dict)


@dataclass
class FeasibilityStats:
    checked: int = 0
    violations: int = 0
    max_linf: float = 0.0

    def update(self, x_clean: np.ndarray, x_adv: np.ndarray, epsilon: float) -> None:
        for clean, adv in zip(x_clean, x_adv):
            linf = float(np.max(np.abs(adv - clean)))
            self.checked += 1
            self.max_linf = max(self.max_linf, linf)
            if linf > epsilon + FEASIBILITY_TOL or adv.min() < 0.0 or adv.max() > 1.0:
                self.violations += 1


def _score(model, images, scenes, targets):
    """Hit and degenerate counts of greedy predictions against per-expression target boxes."""
    index = [k for k, s in enumerate(scenes) for _ in s.objects]
    prompts = [o.prompt for s in scenes for o in s.objects]
    preds = greedy_decode_batch(model, images, index, prompts)
    hits = degenerate = 0
    for tokens, target in zip(preds, (t for per_scene in targets for t in per_scene)):
        box = decode_tokens(tokens)
        if box is None:
            degenerate += 1
            logger.debug("degenerate decode %s", tokens.tolist())
        hits += int(hit_at_05(box, target))
    return hits, degenerate


def _target_boxes(kind, scenes, target):
    if kind == "exclusive":
        return [[target] * len(s.objects) for s in scenes]
    if kind == "permuted":
        permuted_targets(scenes)
        return [[s.objects[(i + 1) % len(s.objects)].box for i in range(len(s.objects))] for s in scenes]
    return [s.boxes for s in scenes]


def evaluate(model: GrounderModel, split: Split, kind: str, budget: Optional[PerturbationBudget] = None,
             target: BoundingBox = EXCLUSIVE_TARGET, batch_size: int = 50,
             feasibility: Optional[FeasibilityStats] = None) -> List[ReportRow]:
    """Clean baseline row plus, for an attack kind, the attacked row.

    Untargeted kinds score against ground truth; targeted kinds score the
    clean and attacked predictions against the altered labels.
    """
    if kind not in ATTACK_KINDS:
        raise ConfigError(f"unknown attack kind {kind!r}")
    scenes = list(split.scenes)
    if not scenes:
        raise ConfigError(f"split {split.name!r} is empty")
    targeted = kind in ("exclusive", "permuted")
    if kind != "none" and budget is None:
        budget = PerturbationBudget()
    metric = ALTERED_LABEL if targeted else GROUND_TRUTH
    clean_label = f"{METHOD_LABELS[kind]} (no attack)" if targeted else METHOD_LABELS["none"]
    counters = {"clean": [0, 0], "attack": [0, 0]}
    total = 0
    for start in range(0, len(scenes), batch_size):
        chunk = scenes[start:start + batch_size]
        images = np.stack([s.image for s in chunk])
        boxes = _target_boxes(kind, chunk, target)
        total += sum(len(s.objects) for s in chunk)
        for key, imgs in [("clean", images)] + ([] if kind == "none" else [("attack", None)]):
            if imgs is None:
                result = craft(kind, model, chunk, budget, target, seed=start)
                imgs = result.x_adv
                if feasibility is not None:
                    feasibility.update(images, imgs, budget.epsilon)
            hits, degenerate = _score(model, imgs, chunk, boxes)
            counters[key][0] += hits
            counters[key][1] += degenerate
    rows = [ReportRow(clean_label, split.name, metric, counters["clean"][0], total, counters["clean"][1])]
    if kind != "none":
        rows.append(ReportRow(METHOD_LABELS[kind], split.name, metric,
                              counters["attack"][0], total, counters["attack"][1]))
    return rows


# -- rendering -------------------------------------------------------------

def render_report(report: EvalReport, fmt: str = "csv") -> str:
    records = [(r.method, r.split, r.metric_target, str(r.hits), str(r.total), r.rendered_pct())
               for r in report.rows]
    if fmt == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        writer.writerows(records)
        return buf.getvalue()
    if fmt == "markdown":
        lines = ["| " + " | ".join(CSV_COLUMNS) + " |",
                 "|" + "|".join("---" for _ in CSV_COLUMNS) + "|"]
        lines += ["| " + " | ".join(rec) + " |" for rec in records]
        return "\n".join(lines) + "\n"
    raise ConfigError(f"unknown report format {fmt!r}")


def split_means(rows: Sequence[ReportRow]) -> Dict[str, str]:
    """Unweighted mean percentage across splits for each (method, metric target)."""
    groups: Dict[str, List[Decimal]] = {}
    for r in rows:
        groups.setdefault(f"{r.method} / {r.metric_target}", []).append(r.percentage)
    return {k: str((sum(v) / len(v)).quantize(Decimal("0.01"), rounding=ROUND_HALF_UP))
            for k, v in groups.items()}


# -- experiments -----------------------------------------------------------

@dataclass
class ExperimentConfig:
    attack: str = "none"
    seed: int = 0
    train_count: int = 48000
    eval_count: int = 100
    dataset_path: Optional[str] = None
    checkpoint: Optional[str] = None
    train_model: bool = False
    train_config: TrainConfig = field(default_factory=TrainConfig)
    epsilon: float = 16.0
    alpha: float = 1.0
    iters: int = 100
    target: tuple = EXCLUSIVE_TARGET.as_tuple()
    out: str = "report.csv"
    fmt: str = "csv"

    def budget(self) -> PerturbationBudget:
        return PerturbationBudget.from_pixels(self.epsilon, self.alpha, self.iters)

    def identity(self) -> Dict:
        """Everything that determines the report's numbers."""
        d = asdict(self)
        for key in ("out", "fmt"):
            d.pop(key)
        if self.attack == "none":
            for key in ("epsilon", "alpha", "iters", "target"):
                d.pop(key)
        d["target"] = list(d["target"]) if "target" in d else None
        return d

    def config_hash(self) -> str:
        blob = json.dumps(self.identity(), sort_keys=True).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()


def derive_seeds(master: int) -> Dict[str, int]:
    state = np.random.SeedSequence(master).generate_state(3, dtype=np.uint32)
    return {"dataset": int(state[0]), "model_init": int(state[1]), "train_shuffle": int(state[2])}


def validate_config(cfg: ExperimentConfig) -> None:
    if cfg.attack not in ATTACK_KINDS:
        raise ConfigError(f"unknown attack kind {cfg.attack!r}; choose from {', '.join(ATTACK_KINDS)}")
    if cfg.fmt not in ("csv", "markdown"):
        raise ConfigError(f"unknown report format {cfg.fmt!r}")
    try:
        cfg.budget()
        BoundingBox(*cfg.target)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    if cfg.eval_count < 1 or (cfg.train_model and cfg.train_count < 1):
        raise ConfigError("dataset sizes must be >= 1")
    if not cfg.train_model:
        if cfg.checkpoint is None:
            raise ConfigError("need either a checkpoint or training enabled")
        if not Path(cfg.checkpoint).is_file():
            raise FileNotFoundError(f"checkpoint not found: {cfg.checkpoint}")
    if cfg.dataset_path is not None and not Path(cfg.dataset_path).is_file():
        raise FileNotFoundError(f"dataset not found: {cfg.dataset_path}")
    out_dir = Path(cfg.out).resolve().parent
    if not out_dir.is_dir() or not os.access(out_dir, os.W_OK):
        raise PermissionError(f"output directory not writable: {out_dir}")


def provenance_path(out) -> Path:
    out = Path(out)
    return out.with_name(out.stem + ".provenance.json")


def run_experiment(cfg: ExperimentConfig, model: Optional[GrounderModel] = None) -> EvalReport:
    """Data, victim, evaluation and report files, all derived from ``cfg.seed``.

    Validation (including checkpoint and output checks) happens before any
    training or attack work.
    """
    if model is None:
        validate_config(cfg)
    seeds = derive_seeds(cfg.seed)
    loaded = None if cfg.dataset_path is None else load_dataset(cfg.dataset_path)
    if cfg.attack == "permuted" and loaded is not None and any(len(s.objects) < 2 for s in loaded):
        raise ConfigError("permuted attack requires every scene to have at least 2 objects")
    train_split, eval_split = generate_dataset(seeds["dataset"], max(cfg.train_count, 1), cfg.eval_count)
    if loaded is not None:
        eval_split = loaded

    if model is None:
        if cfg.train_model:
            tcfg = TrainConfig(**{**asdict(cfg.train_config), "seed": seeds["train_shuffle"]})
            model = train(init_model(seeds["model_init"]), train_split.scenes, tcfg).model
            if cfg.checkpoint:
                save_checkpoint(model, cfg.checkpoint)
        else:
            model = load_checkpoint(cfg.checkpoint)

    feas = FeasibilityStats()
    budget = None if cfg.attack == "none" else cfg.budget()
    rows = evaluate(model, eval_split, cfg.attack, budget, BoundingBox(*cfg.target), feasibility=feas)
    report = EvalReport(rows=rows, provenance={
        "package_version": __version__,
        "config_hash": cfg.config_hash(),
        "config": cfg.identity(),
        "seeds": {"master": cfg.seed, **seeds},
        "rows": [{**asdict(r), "iou_at_05_pct": r.rendered_pct()} for r in rows],
        "split_means_unweighted": split_means(rows),
        "feasibility": asdict(feas),
    })
    write_report(report, cfg.out, cfg.fmt)
    return report


def write_report(report: EvalReport, out, fmt: str = "csv") -> None:
    out = Path(out)
    out.write_text(render_report(report, fmt), encoding="utf-8")
    provenance_path(out).write_text(json.dumps(report.provenance, indent=2, sort_keys=True) + "\n",
                                    encoding="utf-8")
