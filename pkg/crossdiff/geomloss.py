"""
Box and point-mask geometry: IoU and Dice losses and the conversions that
link the two prediction heads.

Boxes are axis aligned and travel through the network as a 6-vector
``[x_min, y_min, z_min, x_max, y_max, z_max]``.
"""

import logging
from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np

from . import tensor as T
from .errors import EmptyMaskError, ShapeError
from .tensor import Tensor

logger = logging.getLogger(__name__)

DEFAULT_SHARPNESS = 20.0
DEFAULT_THRESHOLD = 0.5


@dataclass
class Box3D:
    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        self.lo = np.asarray(self.lo, dtype=np.float64).reshape(3)
        self.hi = np.asarray(self.hi, dtype=np.float64).reshape(3)
        if np.any(self.lo > self.hi):
            raise ShapeError(f"Box min corner {self.lo.tolist()} exceeds max corner {self.hi.tolist()}")

    @classmethod
    def from_corners(cls, corners: Union[Tensor, Sequence[float], np.ndarray]) -> "Box3D":
        values = corners.data if isinstance(corners, Tensor) else np.asarray(corners, dtype=np.float64)
        values = values.reshape(6)
        return cls(values[:3], values[3:])

    @classmethod
    def bounding(cls, points: np.ndarray) -> "Box3D":
        return cls(points.min(axis=0), points.max(axis=0))

    def corners(self) -> np.ndarray:
        return np.concatenate([self.lo, self.hi])

    def as_tensor(self, requires_grad: bool = False) -> Tensor:
        return Tensor(self.corners(), requires_grad=requires_grad)

    @property
    def extent(self) -> np.ndarray:
        return self.hi - self.lo

    @property
    def volume(self) -> float:
        return float(np.prod(self.extent))

    @property
    def center(self) -> np.ndarray:
        return (self.lo + self.hi) / 2.0

    def contains(self, points: np.ndarray) -> np.ndarray:
        return np.all((points >= self.lo) & (points <= self.hi), axis=1)

    def intersects(self, other: "Box3D") -> bool:
        """True when the two volumes overlap with positive volume."""
        return bool(np.all(np.minimum(self.hi, other.hi) > np.maximum(self.lo, other.lo)))

    def to_dict(self):
        return {"min": self.lo.tolist(), "max": self.hi.tolist()}

    @classmethod
    def from_dict(cls, data) -> "Box3D":
        return cls(data["min"], data["max"])


@dataclass
class PointMask:
    """Per-point probabilities in [0, 1] with the threshold used to binarize them."""

    values: np.ndarray
    threshold: float = DEFAULT_THRESHOLD

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64).reshape(-1)
        if np.any(self.values < 0) or np.any(self.values > 1):
            raise ValueError("Mask probabilities must lie in [0, 1]")

    def binary(self) -> np.ndarray:
        return self.values > self.threshold

    def __len__(self) -> int:
        return self.values.shape[0]


MaskLike = Union[PointMask, Tensor, np.ndarray, Sequence[float]]
BoxLike = Union[Box3D, Tensor, np.ndarray, Sequence[float]]


def _mask_values(mask: MaskLike) -> np.ndarray:
    if isinstance(mask, PointMask):
        return mask.values
    if isinstance(mask, Tensor):
        return mask.data.reshape(-1)
    return np.asarray(mask, dtype=np.float64).reshape(-1)


def _box_tensor(box: BoxLike) -> Tensor:
    if isinstance(box, Tensor):
        if box.shape != (6,):
            raise ShapeError(f"Box tensor must have shape (6,), got {box.shape}")
        return box
    if isinstance(box, Box3D):
        return box.as_tensor()
    return Tensor(np.asarray(box, dtype=np.float64).reshape(6))


def iou3d(a: Box3D, b: Box3D) -> float:
    """Intersection over union of two boxes; 0 when the union is empty."""
    inter = np.clip(np.minimum(a.hi, b.hi) - np.maximum(a.lo, b.lo), 0.0, None)
    inter_vol = float(np.prod(inter))
    union = a.volume + b.volume - inter_vol
    return inter_vol / union if union > 0 else 0.0


def _volume(lo: Tensor, hi: Tensor) -> Tensor:
    ext = T.relu(hi - lo)
    return ext[0] * ext[1] * ext[2]


def iou_loss(a: BoxLike, b: BoxLike) -> Tensor:
    """``1 - IoU`` with clamped intersection extents, differentiable in both corner vectors."""
    a, b = _box_tensor(a), _box_tensor(b)
    a_lo, a_hi, b_lo, b_hi = a[0:3], a[3:6], b[0:3], b[3:6]
    inter = _volume(T.maximum(a_lo, b_lo), T.minimum(a_hi, b_hi))
    union = _volume(a_lo, a_hi) + _volume(b_lo, b_hi) - inter
    if union.item() <= 0:
        return Tensor(1.0)
    return 1.0 - inter / union


def dice_loss(pred: Union[Tensor, MaskLike], target: MaskLike, eps: float = 1e-6) -> Tensor:
    """``1 - (2 sum(p t) + eps) / (sum(p) + sum(t) + eps)``."""
    p = pred if isinstance(pred, Tensor) else Tensor(_mask_values(pred))
    t = target if isinstance(target, Tensor) else Tensor(_mask_values(target))
    if p.shape != t.shape:
        raise ShapeError(f"dice_loss: mask lengths differ ({p.shape} vs {t.shape})")
    return 1.0 - (2.0 * T.sum(p * t) + eps) / (T.sum(p) + T.sum(t) + eps)


def box_from_mask(mask: MaskLike, points: np.ndarray, thresh: float = DEFAULT_THRESHOLD) -> Box3D:
    """
    Tight axis-aligned box around the points whose probability exceeds ``thresh``.

    Raises:
        EmptyMaskError: no point exceeds the threshold.
    """
    values = _mask_values(mask)
    xyz = points.data if isinstance(points, Tensor) else np.asarray(points, dtype=np.float64)
    if values.shape[0] != xyz.shape[0]:
        raise ShapeError(f"box_from_mask: {values.shape[0]} mask values for {xyz.shape[0]} points")
    selected = xyz[values > thresh]
    if selected.shape[0] == 0:
        raise EmptyMaskError(f"No point has mask probability above {thresh}")
    return Box3D.bounding(selected)


def mask_from_box(box: BoxLike, points: np.ndarray, k: float = DEFAULT_SHARPNESS) -> Tensor:
    """
    Soft containment ``sigmoid(k * margin)`` where ``margin`` is the signed
    distance to the nearest box face (positive inside).
    """
    corners = _box_tensor(box)
    xyz = Tensor(points.data if isinstance(points, Tensor) else np.asarray(points, dtype=np.float64))
    lo, hi = corners[0:3], corners[3:6]
    per_axis = T.minimum(xyz - lo, hi - xyz)
    margin = T.minimum(T.minimum(per_axis[:, 0], per_axis[:, 1]), per_axis[:, 2])
    return T.sigmoid(margin * k)


def mask_iou(pred: MaskLike, target: MaskLike, thresh: float = DEFAULT_THRESHOLD) -> float:
    """Point-set IoU of two masks binarized at ``thresh``; an empty union scores 0."""
    p = _mask_values(pred) > thresh
    t = _mask_values(target) > thresh
    if p.shape != t.shape:
        raise ShapeError(f"mask_iou: mask lengths differ ({p.shape} vs {t.shape})")
    union = np.logical_or(p, t).sum()
    return float(np.logical_and(p, t).sum() / union) if union else 0.0
