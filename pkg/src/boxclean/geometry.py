"""Axis-aligned rectangle arithmetic underlying all matching and threshold rules.

Boxes are stored as (x, y, w, h) with continuous coordinates and no +1 pixel
inclusivity correction, so results are bit-exact reproducible. Degenerate
boxes are rejected at construction, never re-checked per operation.
"""

from __future__ import annotations

from dataclasses import dataclass

from .errors import DataFormatError


@dataclass(frozen=True)
class Box:
    """Rectangle given by its top-left corner and positive size, in pixels."""

    x: float
    y: float
    w: float
    h: float

    def __post_init__(self) -> None:
        if not (self.w > 0 and self.h > 0):
            raise DataFormatError(
                f"box dimensions must be positive, got w={self.w!r} h={self.h!r}"
            )

    @property
    def area(self) -> float:
        return self.w * self.h

    @property
    def x2(self) -> float:
        return self.x + self.w

    @property
    def y2(self) -> float:
        return self.y + self.h

    @property
    def cx(self) -> float:
        return self.x + self.w / 2.0

    @property
    def cy(self) -> float:
        return self.y + self.h / 2.0

    def as_xywh(self) -> tuple[float, float, float, float]:
        return (self.x, self.y, self.w, self.h)


def intersection_area(a: Box, b: Box) -> float:
    """Area of ``a ∩ b``; 0 when disjoint. Symmetric.

    Clamped to min(area(a), area(b)): the coordinate differences used here can
    round a hair above the product w*h used for areas, and the downstream
    threshold rules rely on fractions never exceeding 1.
    """
    iw = min(a.x2, b.x2) - max(a.x, b.x)
    if iw <= 0:
        return 0.0
    ih = min(a.y2, b.y2) - max(a.y, b.y)
    if ih <= 0:
        return 0.0
    return min(iw * ih, a.area, b.area)


def iou(a: Box, b: Box) -> float:
    """Intersection over union, in [0, 1]. Symmetric; 1 iff the boxes coincide."""
    inter = intersection_area(a, b)
    if inter == 0.0:
        return 0.0
    return inter / (a.area + b.area - inter)


def overlap_fraction(numerator_box: Box, denominator_box: Box) -> float:
    """Fraction of ``denominator_box`` covered by ``numerator_box``.

    Not symmetric: returns 1 exactly when the denominator box lies inside the
    numerator box. This is the quantity the consensus and box-in-box threshold
    rules compare against their cutoffs.
    """
    return intersection_area(numerator_box, denominator_box) / denominator_box.area


def hull(a: Box, b: Box) -> Box:
    """Smallest box containing both inputs."""
    x = min(a.x, b.x)
    y = min(a.y, b.y)
    return Box(x, y, max(a.x2, b.x2) - x, max(a.y2, b.y2) - y)


def edge_gap(a: Box, b: Box) -> float:
    """Separation between two boxes: 0 if they touch or overlap.

    Measured as the larger of the horizontal and vertical gaps between the
    closest edges.
    """
    gx = max(a.x, b.x) - min(a.x2, b.x2)
    gy = max(a.y, b.y) - min(a.y2, b.y2)
    return max(0.0, gx, gy)
