"""
Dual-geometry task-harmonized loss.

The total objective is

    L = sum_i w_i L_i (detection) + sum_j w_j L_j (segmentation) + P + L_geom

with floored weights ``w_i = max(exp(-v_i), lambda_i)``, a gradient-conflict
penalty ``P`` gated by a linearly decaying ``eta(t)``, and a box/mask
consistency term ``L_geom`` gated by a linear warm-up ``zeta(t)``.

Gradient snapshots enter ``P`` as constants, so ``P`` shifts the loss
value but contributes no gradient of its own.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from . import tensor as T
from .errors import EmptyMaskError, NonFiniteError
from .geomloss import DEFAULT_SHARPNESS, DEFAULT_THRESHOLD, box_from_mask, dice_loss, iou_loss, \
    mask_from_box
from .tensor import Tensor

logger = logging.getLogger(__name__)

DET_TASKS = ("box_l1", "box_iou", "token_ce")
SEG_TASKS = ("mask_bce", "mask_dice")
ZERO_NORM = 1e-12
BCE_EPS = 1e-7


@dataclass
class GradSnapshot:
    """Flattened gradient of one task (or task group) over the shared parameters."""

    task: str
    group: str
    vector: np.ndarray


@dataclass
class DgtlState:
    det_tasks: Tuple[str, ...] = DET_TASKS
    seg_tasks: Tuple[str, ...] = SEG_TASKS
    lambda_floor: float = 0.1
    tau: float = 0.5
    rho: float = 1.0
    rho_pairs: Dict[Tuple[str, str], float] = field(default_factory=dict)
    step: int = 0
    total_steps: int = 1
    t_warm_frac: float = 0.2
    t_decay_frac: float = 1.0
    eta_min: float = 0.0
    enabled: bool = True
    v: Dict[str, Tensor] = field(default_factory=dict)
    floors: Dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 < self.tau < 1.0:
            raise ValueError(f"tau must lie in (0, 1), got {self.tau}")
        if self.rho < 0 or any(r < 0 for r in self.rho_pairs.values()):
            raise ValueError("Task correlations rho must be non-negative")
        for task in self.tasks:
            if task not in self.v:
                self.v[task] = Tensor(0.0, requires_grad=True, name=f"dgtl.v.{task}")
            self.floors.setdefault(task, self.lambda_floor)

    @classmethod
    def from_config(cls, config, total_steps: int) -> "DgtlState":
        return cls(
            lambda_floor=config.get("loss.lambda_floor"),
            tau=config.get("loss.tau"),
            rho=config.get("loss.rho"),
            total_steps=total_steps,
            t_warm_frac=config.get("loss.t_warm_frac"),
            t_decay_frac=config.get("loss.t_decay_frac"),
            eta_min=config.get("loss.eta_min"),
            enabled=config.get("loss.dgtl_enabled"),
        )

    @property
    def tasks(self) -> Tuple[str, ...]:
        return tuple(self.det_tasks) + tuple(self.seg_tasks)

    def parameters(self) -> List[Tensor]:
        return [self.v[task] for task in self.tasks]

    def zeta(self, t: Optional[int] = None) -> float:
        """Linear warm-up ``min(t / T_warm, 1)``."""
        t = self.step if t is None else t
        t_warm = self.t_warm_frac * self.total_steps
        if t_warm <= 0:
            return 1.0
        return float(np.clip(t / t_warm, 0.0, 1.0))

    def eta(self, t: Optional[int] = None) -> float:
        """Linear decay ``max(1 - t / T_decay, eta_min)``."""
        t = self.step if t is None else t
        t_decay = self.t_decay_frac * self.total_steps
        if t_decay <= 0:
            return 1.0
        return float(np.clip(max(1.0 - t / t_decay, self.eta_min), 0.0, 1.0))

    def correlation(self, det_task: str, seg_task: str) -> float:
        return self.rho_pairs.get((det_task, seg_task), self.rho)

    def advance(self):
        self.step += 1


def task_weight(state: DgtlState, task: str) -> Tensor:
    """``max(exp(-v_i), lambda_i)``; the floor branch carries no gradient to ``v_i``."""
    return T.maximum(T.exp(-state.v[task]), state.floors[task])


def grad_cosine(gi: np.ndarray, gj: np.ndarray) -> float:
    """Cosine similarity of two flattened gradients; 1 when either norm vanishes."""
    gi = np.asarray(gi, dtype=np.float64).reshape(-1)
    gj = np.asarray(gj, dtype=np.float64).reshape(-1)
    if gi.shape != gj.shape:
        raise ValueError(f"Gradient snapshots differ in length ({gi.size} vs {gj.size})")
    ni, nj = np.linalg.norm(gi), np.linalg.norm(gj)
    if ni < ZERO_NORM or nj < ZERO_NORM:
        return 1.0
    return float(np.clip(np.dot(gi, gj) / (ni * nj), -1.0, 1.0))


def pair_cosines(snaps: Sequence[GradSnapshot]) -> Dict[Tuple[str, str], float]:
    det = [s for s in snaps if s.group == "det"]
    seg = [s for s in snaps if s.group == "seg"]
    return {(i.task, j.task): grad_cosine(i.vector, j.vector) for i in det for j in seg}


def conflict_penalty(state: DgtlState, snaps: Sequence[GradSnapshot]) -> float:
    """``eta(t) * sum rho_ij * 1[cos < tau] * (tau - cos)`` over detection/segmentation pairs."""
    total = 0.0
    for (i, j), cos in pair_cosines(snaps).items():
        if cos < state.tau:
            total += state.correlation(i, j) * (state.tau - cos)
    return state.eta() * total


@dataclass
class GeomInputs:
    box: Tensor
    mask: Tensor
    points: np.ndarray
    sharpness: float = DEFAULT_SHARPNESS
    threshold: float = DEFAULT_THRESHOLD
    dice_eps: float = 1e-6


def geom_consistency(state: DgtlState, inputs: GeomInputs) -> Tensor:
    """
    ``zeta(t) * [IoU loss(box, box of mask) + Dice(mask, mask of box)]``.

    Raises:
        EmptyMaskError: the mask selects no point (only while ``zeta > 0``).
    """
    zeta = state.zeta()
    if zeta == 0.0:
        return Tensor(0.0)
    mask_box = box_from_mask(inputs.mask, inputs.points, inputs.threshold)
    box_mask = mask_from_box(inputs.box, inputs.points, inputs.sharpness)
    term = iou_loss(inputs.box, mask_box) + dice_loss(inputs.mask, box_mask, inputs.dice_eps)
    return term * zeta


# Base task losses

def box_l1(pred: Tensor, target: Tensor) -> Tensor:
    return T.mean(T.abs(pred - target))


def token_ce(logits: Tensor, target: int) -> Tensor:
    """Cross entropy of one target index under a logit vector."""
    return -T.log_softmax(logits)[int(target)]


def mask_bce(pred: Tensor, target: Tensor, eps: float = BCE_EPS) -> Tensor:
    p = T.clamp(pred, eps, 1.0 - eps)
    return -T.mean(target * T.log(p) + (1.0 - target) * T.log(1.0 - p))


@dataclass
class DgtlResult:
    total: Tensor
    losses: Dict[str, float]
    weights: Dict[str, float]
    penalty: float
    geom: float
    cosines: Dict[Tuple[str, str], float]
    zeta: float
    eta: float

    def telemetry(self) -> Dict[str, object]:
        return {
            "loss": self.total.item(),
            "losses": dict(self.losses),
            "weights": dict(self.weights),
            "penalty": self.penalty,
            "geom": self.geom,
            "zeta": self.zeta,
            "eta": self.eta,
            "cos": {f"{i}|{j}": c for (i, j), c in self.cosines.items()},
        }


def dgtl_total(state: DgtlState, det_losses: Mapping[str, Tensor], seg_losses: Mapping[str, Tensor],
               snaps: Sequence[GradSnapshot] = (),
               geom_inputs: Union[GeomInputs, Sequence[GeomInputs], None] = None) -> DgtlResult:
    """
    Assemble the total loss.

    A sequence of geometry inputs (one per batch sample) contributes the
    mean of its terms; samples whose mask is empty contribute zero.

    With ``state.enabled`` false the result is the plain sum of the task
    losses: unit weights, no penalty and no geometry term.

    Raises:
        NonFiniteError: a task loss is not finite.
    """
    losses = {**det_losses, **seg_losses}
    for name, value in losses.items():
        if not np.all(np.isfinite(value.data)):
            raise NonFiniteError("dgtl_total", [name], "task loss is not finite")

    if not state.enabled:
        total = None
        for value in losses.values():
            total = value if total is None else total + value
        return DgtlResult(total if total is not None else Tensor(0.0),
                          {k: v.item() for k, v in losses.items()},
                          {k: 1.0 for k in losses}, 0.0, 0.0, {}, state.zeta(), state.eta())

    weights = {name: task_weight(state, name) for name in losses}
    total = None
    for name, value in losses.items():
        term = weights[name] * value
        total = term if total is None else total + term
    if total is None:
        total = Tensor(0.0)

    cosines = pair_cosines(snaps)
    penalty = conflict_penalty(state, snaps)
    total = total + penalty

    geom_value = 0.0
    if geom_inputs is not None:
        samples = [geom_inputs] if isinstance(geom_inputs, GeomInputs) else list(geom_inputs)
        for inputs in samples:
            try:
                geom = geom_consistency(state, inputs) / len(samples)
            except EmptyMaskError as e:
                logger.warning("Geometry consistency skipped at step %d: %s", state.step, e)
                continue
            geom_value += geom.item()
            total = total + geom

    return DgtlResult(total, {k: v.item() for k, v in losses.items()},
                      {k: w.item() for k, w in weights.items()}, penalty, geom_value,
                      cosines, state.zeta(), state.eta())
