"""Synthetic referring-expression scenes and their on-disk format.

Scenes are 3x32x32 RGB canvases with 2-4 filled shapes on a gray
background, placed at sub-pixel offsets and rendered with area-sampled
edges.  Each shape is referred to by a two-word prompt (color, shape); colors
are distinct within a scene.
"""

import json
import os
from collections.abc import Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np

from .boxcodec import BoundingBox, BoxError
from .tensorio import FormatError, load_tensor, save_tensor

CANVAS = 32
CHANNELS = 3
IMAGE_SHAPE = (CHANNELS, CANVAS, CANVAS)
BACKGROUND = 0.5

COLORS = {
    "red": (0.9, 0.1, 0.1),
    "green": (0.1, 0.8, 0.1),
    "blue": (0.1, 0.2, 0.9),
    "yellow": (0.9, 0.9, 0.1),
    "magenta": (0.9, 0.1, 0.9),
    "cyan": (0.1, 0.9, 0.9),
}
SHAPES = ("square", "circle", "triangle")
PROMPT_VOCAB = tuple(COLORS) + SHAPES
PROMPT_LEN = 2

MIN_OBJECTS, MAX_OBJECTS = 2, 4
MIN_SIDE, MAX_SIDE = 5, 12
SUPERSAMPLE = 8

DATASET_FORMAT = "recattack-dataset"
DATASET_VERSION = 1


@dataclass(frozen=True)
class SceneObject:
    prompt: Tuple[int, int]
    box: BoundingBox


@dataclass(eq=False)
class SceneAnnotation:
    image: np.ndarray
    objects: Tuple[SceneObject, ...]
    seed: Optional[int] = None

    def __post_init__(self):
        self.objects = tuple(self.objects)
        if not self.objects:
            raise ValueError("a scene needs at least one object")
        if self.image.shape != IMAGE_SHAPE:
            raise ValueError(f"image shape {self.image.shape} != {IMAGE_SHAPE}")
        prompts = [o.prompt for o in self.objects]
        if len(set(prompts)) != len(prompts):
            raise ValueError("prompts within a scene must be distinct")
        for p in prompts:
            check_prompt(p)

    def __eq__(self, other):
        if not isinstance(other, SceneAnnotation):
            return NotImplemented
        return (self.seed == other.seed and self.objects == other.objects
                and np.array_equal(self.image, other.image))

    @property
    def prompts(self) -> List[Tuple[int, int]]:
        return [o.prompt for o in self.objects]

    @property
    def boxes(self) -> List[BoundingBox]:
        return [o.box for o in self.objects]


class LazyScenes(Sequence):
    """Scenes rendered on access from their seeds; nothing is held in memory."""

    def __init__(self, seeds: Sequence[int]):
        self.seeds = list(seeds)

    def __len__(self):
        return len(self.seeds)

    def __getitem__(self, i):
        if isinstance(i, slice):
            return [scene_from_seed(s) for s in self.seeds[i]]
        return scene_from_seed(self.seeds[i])


@dataclass
class Split:
    name: str
    scenes: Sequence[SceneAnnotation] = field(default_factory=list)

    def __len__(self):
        return len(self.scenes)

    def __iter__(self):
        return iter(self.scenes)

    @property
    def num_expressions(self) -> int:
        return sum(len(s.objects) for s in self.scenes)


def check_prompt(prompt) -> None:
    if len(prompt) != PROMPT_LEN:
        raise ValueError(f"prompt must have {PROMPT_LEN} tokens, got {prompt!r}")
    color, shape = prompt
    if not (0 <= color < len(COLORS) and len(COLORS) <= shape < len(PROMPT_VOCAB)):
        raise ValueError(f"prompt ids {prompt!r} outside the vocabulary")


def prompt_text(prompt) -> str:
    return " ".join(PROMPT_VOCAB[t] for t in prompt)


def shape_mask(shape: str, side: int) -> np.ndarray:
    """Boolean side x side footprint of a shape."""
    rr, cc = np.mgrid[0:side, 0:side] + 0.5
    if shape == "square":
        return np.ones((side, side), dtype=bool)
    if shape == "circle":
        r = side / 2.0
        return (rr - r) ** 2 + (cc - r) ** 2 <= r * r
    if shape == "triangle":
        half = rr / side * (side / 2.0)
        return np.abs(cc - side / 2.0) <= half + 0.25
    raise ValueError(f"unknown shape {shape!r}")


def _disjoint(a, b, gap) -> bool:
    return a[2] + gap <= b[0] or b[2] + gap <= a[0] or a[3] + gap <= b[1] or b[3] + gap <= a[1]


def _coverage(shape: str, top: int, left: int, side: int):
    """Pixel coverage of a shape placed on the supersampled grid.

    Returns (row0, col0, coverage) where coverage spans the pixels the shape
    touches, plus the shape's tight extent in supersampled units.
    """
    s = SUPERSAMPLE
    r0, c0 = top // s, left // s
    r1, c1 = -(-(top + side) // s), -(-(left + side) // s)
    fine = np.zeros(((r1 - r0) * s, (c1 - c0) * s))
    mask = shape_mask(shape, side)
    fine[top - r0 * s:top - r0 * s + side, left - c0 * s:left - c0 * s + side] = mask
    cov = fine.reshape(r1 - r0, s, c1 - c0, s).mean(axis=(1, 3))
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    extent = (left + int(cols[0]), top + int(rows[0]), left + int(cols[-1]) + 1, top + int(rows[-1]) + 1)
    return r0, c0, cov, extent


def generate_scene(seed: int, num_objects: int) -> SceneAnnotation:
    """Render shapes at sub-pixel positions with area-sampled edges.

    Geometry lives on a grid SUPERSAMPLE times finer than the canvas, so box
    coordinates are not tied to the pixel lattice.  Footprints keep a gap of
    at least one pixel, hence boxes never overlap.
    """
    if not MIN_OBJECTS <= num_objects <= MAX_OBJECTS:
        raise ValueError(f"num_objects must be in [{MIN_OBJECTS}, {MAX_OBJECTS}], got {num_objects}")
    rng = np.random.default_rng(seed)
    colors = rng.choice(len(COLORS), size=num_objects, replace=False)
    shapes = rng.integers(0, len(SHAPES), size=num_objects)
    s, fine = SUPERSAMPLE, CANVAS * SUPERSAMPLE

    while True:
        placed = []
        for _ in range(num_objects):
            for _attempt in range(200):
                side = int(rng.integers(MIN_SIDE * s, MAX_SIDE * s + 1))
                top = int(rng.integers(0, fine - side + 1))
                left = int(rng.integers(0, fine - side + 1))
                rect = (left, top, left + side, top + side)
                if all(_disjoint(rect, p, s) for p in placed):
                    placed.append(rect)
                    break
            else:
                break
        if len(placed) == num_objects:
            break

    image = np.full(IMAGE_SHAPE, BACKGROUND)
    objects = []
    for color, shape, (left, top, right, _) in zip(colors.tolist(), shapes.tolist(), placed):
        r0, c0, cov, (x1, y1, x2, y2) = _coverage(SHAPES[shape], top, left, right - left)
        rgb = COLORS[PROMPT_VOCAB[color]]
        h, w = cov.shape
        for ch in range(CHANNELS):
            region = image[ch, r0:r0 + h, c0:c0 + w]
            region[...] = region * (1.0 - cov) + rgb[ch] * cov
        box = BoundingBox(x1 / fine, y1 / fine, x2 / fine, y2 / fine)
        objects.append(SceneObject((color, len(COLORS) + shape), box))
    # float32-representable pixels so the on-disk payload roundtrips exactly
    image = image.astype(np.float32).astype(np.float64)
    return SceneAnnotation(image=image, objects=tuple(objects), seed=int(seed))


def scene_seeds(seed: int, count: int) -> List[int]:
    rng = np.random.default_rng(seed)
    seen, out = set(), []
    while len(out) < count:
        s = int(rng.integers(0, 2**63))
        if s not in seen:
            seen.add(s)
            out.append(s)
    return out


def scene_from_seed(seed: int) -> SceneAnnotation:
    return generate_scene(seed, MIN_OBJECTS + seed % (MAX_OBJECTS - MIN_OBJECTS + 1))


def generate_dataset(seed: int, train_count: int, val_count: int) -> Tuple[Split, Split]:
    if train_count < 1 or val_count < 1:
        raise ValueError("split sizes must be >= 1")
    seeds = scene_seeds(seed, train_count + val_count)
    return Split("train", LazyScenes(seeds[:train_count])), Split("val", LazyScenes(seeds[train_count:]))


# -- persistence -----------------------------------------------------------

def _image_dir(path: Path) -> Path:
    return path.with_name(path.stem + "_images")


def save_dataset(split: Split, path) -> None:
    """Write ``path`` (JSON lines manifest) plus a sibling ``<stem>_images/`` directory."""
    path = Path(path)
    img_dir = _image_dir(path)
    img_dir.mkdir(parents=True, exist_ok=True)
    lines = [json.dumps({"format": DATASET_FORMAT, "version": DATASET_VERSION,
                         "split": split.name, "count": len(split.scenes)})]
    for i, scene in enumerate(split.scenes):
        rel = f"{img_dir.name}/{i:06d}.bin"
        save_tensor(path.parent / rel, scene.image, dtype="<f4")
        lines.append(json.dumps({
            "index": i,
            "seed": scene.seed,
            "image": rel,
            "objects": [{"prompt": list(o.prompt), "box": list(o.box.as_tuple())}
                        for o in scene.objects],
        }))
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text("\n".join(lines) + "\n", encoding="utf-8")
    os.replace(tmp, path)


def _parse_record(rec, lineno: int, root: Path) -> SceneAnnotation:
    where = f"line {lineno} (record {rec.get('index', '?')})"
    try:
        objects = []
        for j, obj in enumerate(rec["objects"]):
            try:
                box = BoundingBox(*(float(v) for v in obj["box"]))
            except (BoxError, TypeError) as exc:
                raise FormatError(f"{where}: object {j} field 'box': {exc}") from None
            prompt = tuple(int(t) for t in obj["prompt"])
            try:
                check_prompt(prompt)
            except ValueError as exc:
                raise FormatError(f"{where}: object {j} field 'prompt': {exc}") from None
            objects.append(SceneObject(prompt, box))
        try:
            image = load_tensor(root / rec["image"])
        except (OSError, FormatError) as exc:
            raise FormatError(f"{where}: field 'image': {exc}") from None
        if image.shape != IMAGE_SHAPE or image.min() < 0.0 or image.max() > 1.0:
            raise FormatError(f"{where}: field 'image' has bad shape or range")
        seed = rec["seed"]
        return SceneAnnotation(image=image, objects=tuple(objects),
                               seed=None if seed is None else int(seed))
    except KeyError as exc:
        raise FormatError(f"{where}: missing field {exc}") from None
    except (OSError, ValueError) as exc:
        if isinstance(exc, FormatError):
            raise
        raise FormatError(f"{where}: {exc}") from None


def load_dataset(path) -> Split:
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    if not text.endswith("\n"):
        raise FormatError(f"{path}: truncated (no trailing newline)")
    lines = text.split("\n")[:-1]
    if not lines:
        raise FormatError(f"{path}: empty file")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: line 1: bad header: {exc}") from None
    if header.get("format") != DATASET_FORMAT:
        raise FormatError(f"{path}: line 1: not a {DATASET_FORMAT} file")
    if header.get("version") != DATASET_VERSION:
        raise FormatError(f"{path}: unsupported version {header.get('version')!r}")
    if len(lines) - 1 != header.get("count"):
        raise FormatError(f"{path}: header declares {header.get('count')} records, found {len(lines) - 1}")
    scenes = []
    for lineno, line in enumerate(lines[1:], start=2):
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}: line {lineno}: {exc}") from None
        scenes.append(_parse_record(rec, lineno, path.parent))
    return Split(header.get("split", path.stem), scenes)
