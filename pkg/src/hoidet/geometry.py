"""Box representations, overlap metrics, and relative spatial configurations.

Scalar ops work on :class:`Box` values (annotation and evaluation paths);
the ``*_t`` variants operate on ``(N, 4)`` torch tensors and stay
differentiable (loss path).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch


@dataclass(frozen=True)
class Box:
    """Axis-aligned rectangle in normalized corner form, x2 > x1 and y2 > y1."""

    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        if not (0.0 <= self.x1 < self.x2 <= 1.0 and 0.0 <= self.y1 < self.y2 <= 1.0):
            raise ValueError(f"degenerate or out-of-range box: {self}")

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height

    def to_cxcywh(self) -> tuple[float, float, float, float]:
        return (
            (self.x1 + self.x2) / 2.0,
            (self.y1 + self.y2) / 2.0,
            self.width,
            self.height,
        )

    @classmethod
    def from_cxcywh(cls, cx: float, cy: float, w: float, h: float) -> "Box":
        return cls(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)

    def to_tlwh(self) -> tuple[float, float, float, float]:
        return (self.x1, self.y1, self.width, self.height)

    @classmethod
    def from_tlwh(cls, x: float, y: float, w: float, h: float) -> "Box":
        return cls(x, y, x + w, y + h)

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)


@dataclass(frozen=True)
class RSC:
    """Object placement relative to a human box: offset ratios and log size ratios."""

    dx: float
    dy: float
    dw: float
    dh: float

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.dx, self.dy, self.dw, self.dh)


def iou(a: Box, b: Box) -> float:
    """Intersection over union; 0 for disjoint boxes."""
    ix = min(a.x2, b.x2) - max(a.x1, b.x1)
    iy = min(a.y2, b.y2) - max(a.y1, b.y1)
    if ix <= 0.0 or iy <= 0.0:
        return 0.0
    inter = ix * iy
    return inter / (a.area + b.area - inter)


def giou(a: Box, b: Box) -> float:
    """Generalized IoU in (-1, 1]: IoU minus the enclosing-box penalty."""
    ix = max(0.0, min(a.x2, b.x2) - max(a.x1, b.x1))
    iy = max(0.0, min(a.y2, b.y2) - max(a.y1, b.y1))
    inter = ix * iy
    union = a.area + b.area - inter
    ex = max(a.x2, b.x2) - min(a.x1, b.x1)
    ey = max(a.y2, b.y2) - min(a.y1, b.y1)
    enclosing = ex * ey
    return inter / union - (enclosing - union) / enclosing


def rsc(human: Box, obj: Box) -> RSC:
    """Relative spatial configuration of ``obj`` w.r.t. ``human``.

    Computed on the top-left + size parameterization: the top-left offset is
    scaled by the human's size, width/height enter as natural-log ratios.
    """
    xh, yh, wh, hh = human.to_tlwh()
    xo, yo, wo, ho = obj.to_tlwh()
    return RSC(
        dx=(xo - xh) / wh,
        dy=(yo - yh) / hh,
        dw=math.log(wo / wh),
        dh=math.log(ho / hh),
    )


def apply_rsc(human: Box, r: RSC) -> tuple[float, float, float, float]:
    """Inverse of :func:`rsc`: place an object box relative to ``human``.

    Returns raw (x1, y1, x2, y2) corners, deliberately unclamped — the exact
    inverse can land outside the unit square; callers pass the result through
    :func:`clamp_box` when a valid box is required.
    """
    xh, yh, wh, hh = human.to_tlwh()
    wo = wh * math.exp(r.dw)
    ho = hh * math.exp(r.dh)
    xo = xh + r.dx * wh
    yo = yh + r.dy * hh
    return (xo, yo, xo + wo, yo + ho)


def clamp_box(x1: float, y1: float, x2: float, y2: float, min_side: float = 1e-6) -> Box:
    """Clamp raw corners into [0, 1], enforcing a minimum side length.

    Guarantees a valid :class:`Box` for any finite input as long as
    ``min_side`` <= 1.
    """
    x1 = min(max(x1, 0.0), 1.0 - min_side)
    y1 = min(max(y1, 0.0), 1.0 - min_side)
    x2 = min(max(x2, x1 + min_side), 1.0)
    y2 = min(max(y2, y1 + min_side), 1.0)
    return Box(x1, y1, x2, y2)


# Tensor variants, DETR-style. Boxes are (N, 4) in corner form unless noted.


def box_cxcywh_to_xyxy_t(boxes: torch.Tensor) -> torch.Tensor:
    cx, cy, w, h = boxes.unbind(-1)
    return torch.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], dim=-1)


def box_xyxy_to_cxcywh_t(boxes: torch.Tensor) -> torch.Tensor:
    x1, y1, x2, y2 = boxes.unbind(-1)
    return torch.stack([(x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1], dim=-1)


def box_iou_t(a: torch.Tensor, b: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Pairwise IoU and union for corner-form boxes, shapes (N, 4) x (M, 4) -> (N, M)."""
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    lt = torch.max(a[:, None, :2], b[None, :, :2])
    rb = torch.min(a[:, None, 2:], b[None, :, 2:])
    wh = (rb - lt).clamp(min=0)
    inter = wh[..., 0] * wh[..., 1]
    union = area_a[:, None] + area_b[None, :] - inter
    return inter / union, union


def generalized_box_iou_t(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Pairwise GIoU for corner-form boxes, (N, 4) x (M, 4) -> (N, M)."""
    iou_nm, union = box_iou_t(a, b)
    lt = torch.min(a[:, None, :2], b[None, :, :2])
    rb = torch.max(a[:, None, 2:], b[None, :, 2:])
    wh = (rb - lt).clamp(min=0)
    enclosing = wh[..., 0] * wh[..., 1]
    return iou_nm - (enclosing - union) / enclosing
