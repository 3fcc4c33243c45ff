"""Attack objectives on the grounder and the l-inf PGD driver that maximizes them.

Every objective takes the adversarial image as a graph node, either a single
3x32x32 image with one scene or a stacked batch with a matching list of
scenes.  Objectives are summed over all prompts of a scene and over scenes;
scenes share no terms, so one batched gradient equals the per-scene gradients.
"""

from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Union

import numpy as np

from . import gradcore as gc
from .boxcodec import BoundingBox, encode_box
from .grounder import GrounderModel, batch_nll, encode_images, flatten_scenes
from .scenegen import IMAGE_SHAPE, SceneAnnotation

PIXEL_SCALE = 255.0
EXCLUSIVE_TARGET = BoundingBox(0.0, 0.0, 0.2, 0.2)

ATTACK_KINDS = ("none", "image-embed", "textual-box", "exclusive", "permuted")

Scenes = Union[SceneAnnotation, Sequence[SceneAnnotation]]


@dataclass(frozen=True)
class PerturbationBudget:
    """l-inf radius and step size on the [0, 1] pixel scale, plus iteration count."""

    epsilon: float = 16 / PIXEL_SCALE
    alpha: float = 1 / PIXEL_SCALE
    iters: int = 100

    def __post_init__(self):
        if not (0 < self.alpha <= self.epsilon <= 1) or self.iters < 1:
            raise ValueError(f"invalid budget {self}")

    @classmethod
    def from_pixels(cls, epsilon: float = 16, alpha: float = 1, iters: int = 100):
        """Budget given on the 0-255 scale."""
        return cls(epsilon / PIXEL_SCALE, alpha / PIXEL_SCALE, int(iters))


@dataclass
class AttackResult:
    x_adv: np.ndarray
    trace: List[float] = field(default_factory=list)
    linf: float = 0.0


def pgd_ascent(objective: Callable[[gc.Node], gc.Node], x, budget: PerturbationBudget,
               start: Optional[np.ndarray] = None) -> AttackResult:
    """Signed-gradient ascent from x, projected onto the eps-ball and [0, 1] after each step.

    ``trace[t]`` is the objective at the t-th iterate, before its update.
    ``start`` overrides the initial iterate (projected first); default is x itself.
    """
    x = np.asarray(x, dtype=np.float64)
    x_adv = x.copy() if start is None else np.clip(np.clip(start, x - budget.epsilon, x + budget.epsilon), 0, 1)
    trace = []
    for step in range(budget.iters):
        node = gc.leaf(x_adv)
        value = objective(node)
        (g,) = gc.backward(value, wrt=[node])
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient at PGD step {step}")
        trace.append(float(value.value))
        x_adv = x_adv + budget.alpha * np.sign(g)
        x_adv = np.clip(x_adv, x - budget.epsilon, x + budget.epsilon)
        x_adv = np.clip(x_adv, 0.0, 1.0)
    linf = float(np.max(np.abs(x_adv - x))) if x.size else 0.0
    return AttackResult(x_adv, trace, linf)


def _scene_list(scenes: Scenes) -> List[SceneAnnotation]:
    return [scenes] if isinstance(scenes, SceneAnnotation) else list(scenes)


def _targeted_nll(m: GrounderModel, x_adv: gc.Node, scenes, targets) -> gc.Node:
    _, index, prompts, tokens = flatten_scenes(scenes, targets)
    return batch_nll(m, encode_images(m, x_adv), index, prompts, tokens)


def image_embedding_objective(m: GrounderModel, x_clean, x_adv: gc.Node) -> gc.Node:
    """||f(x_adv) - f(x_clean)||^2, with the clean embedding held constant."""
    clean = encode_images(m, gc.constant(x_clean)).value
    return gc.l2_squared_distance(encode_images(m, x_adv), gc.constant(clean))


def untargeted_textual_objective(m: GrounderModel, x_adv: gc.Node, scenes: Scenes) -> gc.Node:
    """Sum of ground-truth box NLLs over every prompt (to be maximized)."""
    return _targeted_nll(m, x_adv, _scene_list(scenes), None)


def exclusive_targets(scenes: Scenes, target: BoundingBox = EXCLUSIVE_TARGET):
    tokens = encode_box(target)
    return [[tokens] * len(s.objects) for s in _scene_list(scenes)]


def permuted_targets(scenes: Scenes):
    """Object i of each scene targets the box of object (i + 1) mod N."""
    out = []
    for s in _scene_list(scenes):
        n = len(s.objects)
        if n < 2:
            raise ValueError("permuted attack needs at least two objects per scene")
        out.append([encode_box(s.objects[(i + 1) % n].box) for i in range(n)])
    return out


def exclusive_targeted_objective(m: GrounderModel, x_adv: gc.Node, scenes: Scenes,
                                 target: BoundingBox = EXCLUSIVE_TARGET) -> gc.Node:
    """Negated sum of NLLs of the shared target box over every prompt."""
    scenes = _scene_list(scenes)
    return gc.scale(_targeted_nll(m, x_adv, scenes, exclusive_targets(scenes, target)), -1.0)


def permuted_targeted_objective(m: GrounderModel, x_adv: gc.Node, scenes: Scenes) -> gc.Node:
    """Negated sum of NLLs of each prompt's cyclically shifted box."""
    scenes = _scene_list(scenes)
    return gc.scale(_targeted_nll(m, x_adv, scenes, permuted_targets(scenes)), -1.0)


def build_objective(kind: str, m: GrounderModel, scenes: Sequence[SceneAnnotation], x_clean,
                    target: BoundingBox = EXCLUSIVE_TARGET) -> Callable[[gc.Node], gc.Node]:
    if kind == "image-embed":
        clean = gc.constant(encode_images(m, x_clean).value)
        return lambda node: gc.l2_squared_distance(encode_images(m, node), clean)
    if kind == "textual-box":
        return lambda node: untargeted_textual_objective(m, node, scenes)
    if kind == "exclusive":
        return lambda node: exclusive_targeted_objective(m, node, scenes, target)
    if kind == "permuted":
        permuted_targets(scenes)  # fail before any iteration
        return lambda node: permuted_targeted_objective(m, node, scenes)
    raise ValueError(f"unknown attack kind {kind!r}")


def random_start(x: np.ndarray, budget: PerturbationBudget, seed: int) -> np.ndarray:
    """Uniform draw from the eps-ball around x, clipped to [0, 1]."""
    rng = np.random.default_rng(seed)
    return np.clip(x + rng.uniform(-budget.epsilon, budget.epsilon, size=x.shape), 0.0, 1.0)


def craft(kind: str, m: GrounderModel, scenes: Scenes, budget: PerturbationBudget,
          target: BoundingBox = EXCLUSIVE_TARGET, seed: int = 0) -> AttackResult:
    """One adversarial image per scene, crafted jointly for all of its prompts.

    The embedding-distance objective has an exactly zero gradient at x (its
    minimum), so signed ascent from x would never move; that attack starts
    from a seeded uniform point in the ball instead.  All others start at x.
    """
    scenes = _scene_list(scenes)
    x = np.stack([s.image for s in scenes]).reshape((len(scenes),) + IMAGE_SHAPE)
    start = random_start(x, budget, seed) if kind == "image-embed" else None
    return pgd_ascent(build_objective(kind, m, scenes, x, target), x, budget, start)
