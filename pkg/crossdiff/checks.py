"""
Gradient-check matrix.

Each check builds a small random instance from a seed, evaluates a scalar
objective and compares tape gradients with central differences. Objectives
weight their outputs with fixed random coefficients so that no gradient
vanishes by symmetry (a plain sum over a softmax row is constant).
"""

import logging
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from . import tensor as T
from .clda import CldaParams, LdaParams, clda_forward, lda_block
from .dgtl import DgtlState, GeomInputs, box_l1, dgtl_total, geom_consistency, mask_bce, token_ce
from .diffattn import DiffAttnParams, diff_attention
from .geomloss import dice_loss, iou_loss
from .layers import ParamFactory
from .model import GroundingModel, ModelConfig
from .scenes import SceneConfig, build_vocabulary, generate_expression, generate_scene
from .tensor import GradCheckReport, Tensor, grad_check

logger = logging.getLogger(__name__)

Check = Callable[[int, float, float], GradCheckReport]


@dataclass
class CheckResult:
    name: str
    seed: int
    passed: bool
    max_error: float
    failures: List[str]

    def to_dict(self):
        return {"name": self.name, "seed": self.seed, "passed": self.passed,
                "max_error": self.max_error, "failures": list(self.failures)}


def _leaf(rng: np.random.Generator, shape, name: str, scale: float = 1.0) -> Tensor:
    return Tensor(rng.normal(0.0, scale, size=shape), requires_grad=True, name=name)


def _weights(rng: np.random.Generator, shape) -> Tensor:
    return Tensor(rng.normal(size=shape))


def check_kernel(seed: int, step: float, tol: float) -> GradCheckReport:
    rng = np.random.default_rng(seed)
    a, b = _leaf(rng, (5, 7), "a"), _leaf(rng, (7, 3), "b")
    gain, bias = _leaf(rng, (3,), "gain"), _leaf(rng, (3,), "bias")
    x = _leaf(rng, (4, 3), "x")
    w1, w2 = _weights(rng, (5, 3)), _weights(rng, (4, 3))

    def f():
        h = T.layer_norm(T.softmax_rows(T.matmul(a, b)), gain, bias)
        g = T.sigmoid(x) * T.exp(T.clamp(x, -3.0, 3.0)) + T.log_softmax(x)
        return T.sum(h * w1) + T.sum(g * w2) + T.sum(T.max_rows(x) * gain)

    return grad_check(f, [a, b, gain, bias, x], step, tol)


def _attn_instance(rng: np.random.Generator, seed: int):
    d_model, n_heads = 8, 2
    m, n = int(rng.integers(1, 7)), int(rng.integers(1, 7))
    p = DiffAttnParams.create(ParamFactory(seed=seed, prefix="attn"), d_model, n_heads)
    q = _leaf(rng, (m, d_model), "query")
    kv = _leaf(rng, (n, d_model), "kv")
    return p, q, kv


def check_diffattn(seed: int, step: float, tol: float) -> GradCheckReport:
    rng = np.random.default_rng(seed)
    p, q, kv = _attn_instance(rng, seed)
    w = _weights(rng, (q.shape[0], p.d_model))
    return grad_check(lambda: T.sum(diff_attention(q, kv, p)[0] * w), p.parameters() + [q, kv], step, tol)


def check_lda_block(seed: int, step: float, tol: float) -> GradCheckReport:
    rng = np.random.default_rng(seed)
    p = LdaParams.create(ParamFactory(seed=seed, prefix="lda"), 8, 2, with_mlp=True)
    q, kv = _leaf(rng, (3, 8), "query"), _leaf(rng, (2, 8), "kv")
    w = _weights(rng, (3, 8))
    return grad_check(lambda: T.sum(lda_block(q, kv, p)[0] * w), p.parameters() + [q, kv], step, tol)


def check_clda(seed: int, step: float, tol: float) -> GradCheckReport:
    rng = np.random.default_rng(seed)
    p = CldaParams.create(ParamFactory(seed=seed, prefix="clda"), 8, 2, n_clust=2, k_graph=1)
    xyz = rng.uniform(0.0, 1.0, size=(8, 3))
    v, t = _leaf(rng, (8, 8), "visual"), _leaf(rng, (3, 8), "text")
    wv, wt = _weights(rng, (8, 8)), _weights(rng, (3, 8))

    def f():
        out = clda_forward(v, t, xyz, p)
        return T.sum(out.visual * wv) + T.sum(out.text * wt)

    return grad_check(f, p.parameters() + [v, t], step, tol)


def check_dice(seed: int, step: float, tol: float) -> GradCheckReport:
    rng = np.random.default_rng(seed)
    z = _leaf(rng, (12,), "logits")
    target = Tensor((rng.random(12) > 0.5).astype(float))
    return grad_check(lambda: dice_loss(T.sigmoid(z), target), [z], step, tol)


def _box_pair(rng: np.random.Generator):
    lo_a = rng.uniform(0.0, 0.2, size=3)
    lo_b = lo_a + rng.uniform(0.2, 0.4, size=3)
    a = Tensor(np.concatenate([lo_a, lo_a + rng.uniform(0.8, 1.2, size=3)]), requires_grad=True, name="box_a")
    b = Tensor(np.concatenate([lo_b, lo_b + rng.uniform(0.8, 1.2, size=3)]), requires_grad=True, name="box_b")
    return a, b


def check_iou(seed: int, step: float, tol: float) -> GradCheckReport:
    a, b = _box_pair(np.random.default_rng(seed))
    return grad_check(lambda: iou_loss(a, b), [a, b], step, tol)


def check_geom(seed: int, step: float, tol: float) -> GradCheckReport:
    rng = np.random.default_rng(seed)
    box, _ = _box_pair(rng)
    points = rng.uniform(-0.2, 1.6, size=(20, 3))
    # logits kept away from 0 so the hard threshold cannot flip under the step
    z_init = rng.choice([-1.0, 1.0], size=20) * rng.uniform(0.5, 2.0, size=20)
    z_init[0] = 1.5
    z = Tensor(z_init, requires_grad=True, name="mask_logits")
    state = DgtlState(total_steps=10, step=10)
    return grad_check(lambda: geom_consistency(state, GeomInputs(box, T.sigmoid(z), points)), [box, z], step, tol)


def check_task_losses(seed: int, step: float, tol: float) -> GradCheckReport:
    rng = np.random.default_rng(seed)
    pred = _leaf(rng, (6,), "box")
    target = Tensor(pred.data + rng.choice([-1.0, 1.0], size=6) * rng.uniform(0.1, 0.5, size=6))
    logits = _leaf(rng, (5,), "token_logits")
    z = _leaf(rng, (10,), "mask_logits")
    mask_target = Tensor((rng.random(10) > 0.5).astype(float))
    target_token = int(rng.integers(5))

    def f():
        return box_l1(pred, target) + token_ce(logits, target_token) + mask_bce(T.sigmoid(z), mask_target)

    return grad_check(f, [pred, logits, z], step, tol)


def _tiny_model(seed: int) -> GroundingModel:
    return GroundingModel(ModelConfig(vocab_size=len(build_vocabulary()), d_model=8, d_sem=8, d2=4, d3=8,
                                      plda_heads=2, clda_heads=2, n_clust=4, k_graph=2, seed=seed))


def check_model(seed: int, step: float, tol: float) -> GradCheckReport:
    """Weighted task sum of the tiny model on one scene; a seeded subset of tensors is perturbed."""
    rng = np.random.default_rng(seed)
    model = _tiny_model(seed)
    scene = generate_scene(seed, SceneConfig(n_points=16, n_objects=2, n_distractors=1))
    expr = generate_expression(scene, seed)
    state = DgtlState(total_steps=10)
    gt_box = scene.object(expr.target).box.as_tensor()
    gt_mask = Tensor(scene.target_mask(expr.target))

    def f():
        out = model(scene, expr)
        det = {"box_l1": box_l1(out.box, gt_box), "box_iou": iou_loss(out.box, gt_box),
               "token_ce": token_ce(out.logits, expr.target_token)}
        seg = {"mask_bce": mask_bce(out.mask, gt_mask), "mask_dice": dice_loss(out.mask, gt_mask)}
        return dgtl_total(state, det, seg).total

    tensors = [t for t in model.parameters() if t.size <= 32]
    picked = sorted(rng.choice(len(tensors), size=min(3, len(tensors)), replace=False))
    return grad_check(f, [tensors[i] for i in picked] + state.parameters(), step, tol)


CHECKS: Dict[str, Check] = {
    "kernel": check_kernel,
    "diffattn": check_diffattn,
    "lda_block": check_lda_block,
    "clda": check_clda,
    "dice": check_dice,
    "iou": check_iou,
    "geom": check_geom,
    "losses": check_task_losses,
    "model": check_model,
}


def run_checks(seeds: int, step: float, tol: float, only: Optional[Sequence[str]] = None) -> List[CheckResult]:
    """
    Run every selected check for seeds ``0 .. seeds-1``.

    Raises:
        ValueError: ``only`` names an unknown check.
    """
    names = list(only) if only else list(CHECKS)
    unknown = [n for n in names if n not in CHECKS]
    if unknown:
        raise ValueError(f"Unknown check(s): {', '.join(unknown)}; available: {', '.join(CHECKS)}")
    results = []
    for name in names:
        for seed in range(seeds):
            report = CHECKS[name](seed, step, tol)
            results.append(CheckResult(name, seed, report.passed, report.max_error, report.failures()))
            logger.debug("%s seed %d: max error %.3e", name, seed, report.max_error)
    return results
