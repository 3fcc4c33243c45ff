"""Boxes, their coordinate-token serialization, and IoU scoring."""

import math
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

NUM_BINS = 100
SEQ_LEN = 4


class BoxError(ValueError):
    pass


@dataclass(frozen=True)
class BoundingBox:
    """Normalized corner box, (x1, y1) top-left."""

    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        if not (0.0 <= self.x1 < self.x2 <= 1.0 and 0.0 <= self.y1 < self.y2 <= 1.0):
            raise BoxError(f"invalid box {self.as_tuple()}")

    def as_tuple(self) -> Tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)

    @property
    def area(self) -> float:
        return (self.x2 - self.x1) * (self.y2 - self.y1)


def quantize_coord(v: float, bins: int = NUM_BINS) -> int:
    if bins < 2:
        raise BoxError(f"need at least 2 bins, got {bins}")
    if not 0.0 <= v <= 1.0:
        raise BoxError(f"coordinate {v} outside [0, 1]")
    return min(int(math.floor(v * bins)), bins - 1)


def dequantize(token: int, bins: int = NUM_BINS) -> float:
    if not 0 <= token < bins:
        raise BoxError(f"token {token} outside [0, {bins - 1}]")
    return (token + 0.5) / bins


def encode_box(box: BoundingBox, bins: int = NUM_BINS) -> Tuple[int, ...]:
    """Token order is x1, y1, x2, y2."""
    return tuple(quantize_coord(v, bins) for v in box.as_tuple())


def decode_tokens(tokens: Sequence[int], bins: int = NUM_BINS) -> Optional[BoundingBox]:
    """Dequantize a token sequence; returns None for a degenerate box."""
    if len(tokens) != SEQ_LEN:
        raise BoxError(f"expected {SEQ_LEN} tokens, got {len(tokens)}")
    x1, y1, x2, y2 = (dequantize(int(t), bins) for t in tokens)
    if x2 <= x1 or y2 <= y1:
        return None
    return BoundingBox(x1, y1, x2, y2)


def iou(a: BoundingBox, b: BoundingBox) -> float:
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def hit_at_05(pred: Optional[BoundingBox], gt: BoundingBox) -> bool:
    """Strictly greater than 0.5; a degenerate prediction (None) is a miss."""
    return pred is not None and iou(pred, gt) > 0.5
