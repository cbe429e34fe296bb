"""
Optimization, evaluation, checkpoints and run directories.
"""

import hashlib
import json
import logging
import shutil
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import psutil

from .dgtl import GeomInputs, GradSnapshot, DgtlResult, DgtlState, box_l1, dgtl_total, mask_bce, token_ce
from .errors import NonFiniteError, RunExistsError
from .geomloss import Box3D, dice_loss, iou3d, iou_loss, mask_iou
from .model import GroundingModel, ModelConfig
from .scenes import Expression, SampleResult, Scene, subset_report
from .tensor import GradTape, Tensor, read_tensor, save_tensor, write_tensor

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"PCXDCKPT"
CHECKPOINT_VERSION = 1
COMPLETE_MARKER = "COMPLETE"

Sample = Tuple[Scene, Expression]


@dataclass
class ParamGroup:
    params: List[Tensor]
    lr: float


class Adam:
    """Adam with per-group learning rates; moments are keyed by parameter identity."""

    def __init__(self, groups: Sequence[ParamGroup], betas: Tuple[float, float] = (0.9, 0.999),
                 eps: float = 1e-8):
        self.groups = list(groups)
        self.betas = betas
        self.eps = eps
        self.t = 0
        self._m: Dict[int, np.ndarray] = {}
        self._v: Dict[int, np.ndarray] = {}

    def parameters(self) -> List[Tensor]:
        return [p for g in self.groups for p in g.params]

    def step(self, grads: Sequence[np.ndarray]):
        """Apply one update; ``grads`` follows the order of ``parameters()``."""
        self.t += 1
        b1, b2 = self.betas
        it = iter(grads)
        for group in self.groups:
            for p in group.params:
                g = next(it)
                key = id(p)
                m = self._m.get(key, np.zeros_like(g)) * b1 + (1 - b1) * g
                v = self._v.get(key, np.zeros_like(g)) * b2 + (1 - b2) * g * g
                self._m[key], self._v[key] = m, v
                m_hat = m / (1 - b1 ** self.t)
                v_hat = v / (1 - b2 ** self.t)
                p.assign(p.data - group.lr * m_hat / (np.sqrt(v_hat) + self.eps))


def build_optimizer(model: GroundingModel, state: DgtlState, config) -> Adam:
    """Two learning-rate groups: the visual/text encoders and everything else (DGTL ``v`` included)."""
    encoder = model.encoder_parameters()
    encoder_ids = {id(p) for p in encoder}
    rest = [p for p in model.parameters() if id(p) not in encoder_ids] + state.parameters()
    return Adam([ParamGroup(encoder, config.get("train.lr_encoder")), ParamGroup(rest, config.get("train.lr"))],
                betas=(config.get("train.beta1"), config.get("train.beta2")), eps=config.get("train.eps"))


def _flatten(grads: Sequence[np.ndarray]) -> np.ndarray:
    return np.concatenate([g.reshape(-1) for g in grads]) if grads else np.zeros(0)


@dataclass
class LossSettings:
    mask_k: float = 20.0
    mask_thresh: float = 0.5
    dice_eps: float = 1e-6
    snapshot_mode: str = "per_task"

    @classmethod
    def from_config(cls, config) -> "LossSettings":
        return cls(config.get("loss.mask_k"), config.get("loss.mask_thresh"),
                   config.get("loss.dice_eps"), config.get("loss.snapshot_mode"))


class Trainer:
    """Owns the model, the DGTL state and the optimizer of one training run."""

    def __init__(self, model: GroundingModel, state: DgtlState, optimizer: Adam,
                 settings: Optional[LossSettings] = None, run_dir: Optional[Path] = None):
        self.model = model
        self.state = state
        self.optimizer = optimizer
        self.settings = settings or LossSettings()
        self.run_dir = Path(run_dir) if run_dir is not None else None

    def task_losses(self, batch: Sequence[Sample]):
        det: Dict[str, Tensor] = {}
        seg: Dict[str, Tensor] = {}
        geom: List[GeomInputs] = []
        scale = 1.0 / len(batch)
        for scene, expr in batch:
            out = self.model(scene, expr)
            gt_box = scene.object(expr.target).box.as_tensor()
            gt_mask = Tensor(scene.target_mask(expr.target))
            terms = {
                "box_l1": box_l1(out.box, gt_box),
                "box_iou": iou_loss(out.box, gt_box),
                "token_ce": token_ce(out.logits, expr.target_token),
                "mask_bce": mask_bce(out.mask, gt_mask),
                "mask_dice": dice_loss(out.mask, gt_mask, self.settings.dice_eps),
            }
            for name, value in terms.items():
                bucket = det if name in self.state.det_tasks else seg
                bucket[name] = bucket[name] + value * scale if name in bucket else value * scale
            geom.append(GeomInputs(out.box, out.mask, scene.points, self.settings.mask_k,
                                   self.settings.mask_thresh, self.settings.dice_eps))
        return det, seg, geom

    def snapshots(self, tape: GradTape, det: Dict[str, Tensor], seg: Dict[str, Tensor]) -> List[GradSnapshot]:
        shared = self.model.shared_parameters()
        if self.settings.snapshot_mode == "grouped":
            det_sum = sum(det.values(), Tensor(0.0))
            seg_sum = sum(seg.values(), Tensor(0.0))
            return [GradSnapshot("det", "det", _flatten(tape.gradient(det_sum, shared))),
                    GradSnapshot("seg", "seg", _flatten(tape.gradient(seg_sum, shared)))]
        snaps = [GradSnapshot(name, "det", _flatten(tape.gradient(loss, shared))) for name, loss in det.items()]
        snaps += [GradSnapshot(name, "seg", _flatten(tape.gradient(loss, shared))) for name, loss in seg.items()]
        return snaps

    def train_step(self, batch: Sequence[Sample]) -> Dict[str, object]:
        """
        One optimizer step on the DGTL objective of ``batch``.

        Raises:
            NonFiniteError: the loss became non-finite; the parameters are
                dumped to ``nonfinite_dump.pcxd`` in the run directory first.
        """
        params = self.optimizer.parameters()
        try:
            with GradTape() as tape:
                det, seg, geom = self.task_losses(batch)
                snaps = self.snapshots(tape, det, seg) if self.state.enabled else []
                result: DgtlResult = dgtl_total(self.state, det, seg, snaps, geom)
            grads = tape.gradient(result.total, params)
        except NonFiniteError as e:
            self._dump_nonfinite(e)
            raise
        self.optimizer.step(grads)
        record = {"step": self.state.step, **result.telemetry()}
        self.state.advance()
        return record

    def _dump_nonfinite(self, error: NonFiniteError):
        logger.error("Aborting step %d: %s", self.state.step, error)
        if self.run_dir is None:
            return
        path = self.run_dir / "nonfinite_dump.pcxd"
        save_checkpoint(path, self.model.params, self.state.step)
        logger.error("Parameters at the failing step written to %s", path)


def evaluate(model: GroundingModel, samples: Sequence[Sample]) -> Dict[str, object]:
    """Box and mask IoU per sample, summarized overall and per subset tag."""
    results = []
    for scene, expr in samples:
        out = model(scene, expr)
        box = Box3D.from_corners(np.concatenate([np.minimum(out.box.data[:3], out.box.data[3:]),
                                                 np.maximum(out.box.data[:3], out.box.data[3:])]))
        results.append(SampleResult(box_iou=iou3d(box, scene.object(expr.target).box),
                                    mask_iou=mask_iou(out.mask, scene.target_mask(expr.target)),
                                    tags=list(expr.tags)))
    return {"samples": len(results), "subsets": subset_report(results)}


def evaluate_predictions(samples: Sequence[Sample], predictions: Sequence[Dict[str, object]]) -> Dict[str, object]:
    """
    Score stored predictions, one ``{"box": {"min", "max"}, "mask": [...]}``
    record per sample in corpus order.
    """
    if len(predictions) != len(samples):
        raise ValueError(f"{len(predictions)} predictions for {len(samples)} samples")
    results = []
    for (scene, expr), pred in zip(samples, predictions):
        results.append(SampleResult(box_iou=iou3d(Box3D.from_dict(pred["box"]), scene.object(expr.target).box),
                                    mask_iou=mask_iou(pred["mask"], scene.target_mask(expr.target)),
                                    tags=list(expr.tags)))
    return {"samples": len(results), "subsets": subset_report(results)}


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(path: Union[str, Path], params: Dict[str, Tensor], step: int):
    """Header, then ``u32 name length | utf-8 name | tensor dump`` per parameter in registry order."""
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<III", CHECKPOINT_VERSION, step, len(params)))
        for name, tensor in params.items():
            encoded = name.encode("utf-8")
            f.write(struct.pack("<I", len(encoded)))
            f.write(encoded)
            write_tensor(f, tensor)


def load_checkpoint(path: Union[str, Path]) -> Tuple[int, Dict[str, np.ndarray]]:
    with open(path, "rb") as f:
        if f.read(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
            raise ValueError(f"{path} is not a crossdiff checkpoint")
        version, step, count = struct.unpack("<III", f.read(12))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"Unsupported checkpoint version {version}")
        params = {}
        for _ in range(count):
            (length,) = struct.unpack("<I", f.read(4))
            name = f.read(length).decode("utf-8")
            params[name] = read_tensor(f).numpy()
    return step, params


def restore(model: GroundingModel, values: Dict[str, np.ndarray]):
    missing = [name for name in model.params if name not in values]
    if missing:
        raise ValueError(f"Checkpoint lacks parameters: {', '.join(missing[:5])}")
    for name, tensor in model.params.items():
        tensor.assign(values[name])


# ---------------------------------------------------------------------------
# Run directories
# ---------------------------------------------------------------------------

@dataclass
class RunDirectory:
    path: Path
    records: int = field(default=0)

    @classmethod
    def create(cls, base: Union[str, Path], command: str, config, force: bool = False,
               inputs: Sequence[str] = ()) -> "RunDirectory":
        """
        Create ``<base>/<command>-<hash>`` and echo the config into it.

        The hash covers the config and the ``inputs`` (paths of corpora,
        checkpoints or prediction files the command reads).

        Raises:
            RunExistsError: the directory holds a completed run and ``force`` is false.
        """
        digest = config.hash()
        if inputs:
            digest = hashlib.sha256("|".join([digest, *map(str, inputs)]).encode("utf-8")).hexdigest()
        path = Path(base) / f"{command}-{digest[:12]}"
        if (path / COMPLETE_MARKER).exists():
            if not force:
                raise RunExistsError(f"{path} already holds a completed run (use --force to overwrite)")
            logger.warning("Overwriting completed run %s", path)
        if path.exists():
            shutil.rmtree(path)
        path.mkdir(parents=True)
        with open(path / "config.toml", "w") as f:
            f.write(config.dump())
        return cls(path)

    def log_metrics(self, record: Dict[str, object]):
        with open(self.path / "metrics.jsonl", "a") as f:
            f.write(json.dumps(record, sort_keys=True) + "\n")
        self.records += 1

    def write_json(self, name: str, payload: Dict[str, object]):
        with open(self.path / name, "w") as f:
            json.dump(payload, f, indent=2, sort_keys=True)

    def complete(self):
        (self.path / COMPLETE_MARKER).write_text("")


def resource_usage() -> Dict[str, float]:
    proc = psutil.Process()
    cpu = proc.cpu_times()
    return {"cpu_seconds": cpu.user + cpu.system, "rss_bytes": float(proc.memory_info().rss)}


def dump_traces(model: GroundingModel, sample: Sample, directory: Union[str, Path]) -> List[Path]:
    """Write ``A_1``, ``A_2`` and lambda of every attention layer on ``sample`` as tensor dumps."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    written = []
    for key, trace in model(*sample).traces.items():
        for part, value in (("A_1", trace.A_1), ("A_2", trace.A_2), ("lambda", trace.lambda_value)):
            if value is None:
                continue
            path = directory / f"{key}.{part}.pcxd"
            save_tensor(path, value)
            written.append(path)
    logger.info("Wrote %d attention traces to %s", len(written), directory)
    return written


def batches(samples: Sequence[Sample], batch_size: int, step: int) -> List[Sample]:
    """Deterministic cyclic batching: step ``t`` takes samples ``t*B .. t*B+B-1`` modulo the corpus."""
    n = len(samples)
    return [samples[(step * batch_size + k) % n] for k in range(min(batch_size, n))]


def train(config, samples: Sequence[Sample], run: Optional[RunDirectory] = None,
          model: Optional[GroundingModel] = None) -> Tuple[GroundingModel, Dict[str, object]]:
    """
    Train a model on ``samples`` for ``train.steps`` steps and evaluate it on the same samples.

    Returns:
        The trained model and the summary written to ``summary.json``.
    """
    if not samples:
        raise ValueError("Training needs at least one sample")
    steps = config.get("train.steps")
    model = model or GroundingModel(ModelConfig.from_config(config))
    state = DgtlState.from_config(config, total_steps=steps)
    trainer = Trainer(model, state, build_optimizer(model, state, config), LossSettings.from_config(config),
                      run.path if run else None)

    history = []
    for step in range(steps):
        record = trainer.train_step(batches(samples, config.get("train.batch_size"), step))
        history.append(record["loss"])
        if run:
            run.log_metrics(record)
        if step % max(config.get("train.log_every"), 1) == 0:
            logger.info("step %d loss %.6f", step, record["loss"])

    report = evaluate(model, samples)
    summary = {"steps": steps, "final_loss": history[-1] if history else None,
               "initial_loss": history[0] if history else None, "eval": report,
               "plda_parameters": model.plda_parameter_count(), "parameters": model.parameter_count()}
    if run:
        save_checkpoint(run.path / "checkpoint.pcxd", model.params, steps)
        if config.get("debug.trace_dump"):
            dump_traces(model, samples[0], run.path / "traces")
        run.write_json("summary.json", {**summary, "resources": resource_usage()})
        run.complete()
    return model, summary
