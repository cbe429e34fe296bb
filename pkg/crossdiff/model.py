"""
Toy end-to-end grounding network.

    points ──► pointwise encoder ──► FPS hierarchy (F_v2, F_v3, F_v4)
    tokens ──► embeddings + positions ──► F_t
    (F_v4, F_t) ──► PLDA ──► multiscale fusion ──► F'_v
                               Max block ──► F'_t
    (F'_v, F'_t, xyz) ──► CLDA ──► decoder ──► box / mask / token heads
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import tensor as T
from .clda import CldaParams, clda_forward, fps
from .diffattn import AttnParams, AttnTrace, create_attention, multihead_attention
from .errors import ShapeError
from .geomloss import Box3D
from .layers import LinearParams, MLPParams, NormParams, ParamFactory, unique_parameters
from .plda import MAX_BLOCK_SOURCES, FusionParams, PldaOutput, fuse_multiscale, max_block_input, \
    max_pool_text, plda_forward
from .scenes import Expression, Scene, build_vocabulary
from .tensor import Tensor

logger = logging.getLogger(__name__)

SIZE_CLAMP = (-6.0, 3.0)


@dataclass
class ModelConfig:
    vocab_size: int
    d_model: int = 32
    d_sem: int = 32
    d2: int = 16
    d3: int = 32
    ratio3: int = 4
    ratio4: int = 4
    max_tokens: int = 16
    n_decoder_layers: int = 1
    plda_enabled: bool = True
    plda_heads: int = 2
    head_ln: bool = True
    max_block_source: str = "kt2v"
    clda_enabled: bool = True
    clda_heads: int = 2
    n_clust: int = 16
    k_graph: int = 8
    fps_random_start: bool = False
    attention_kind: str = "diff"
    seed: int = 0

    @classmethod
    def from_config(cls, config, vocab_size: Optional[int] = None) -> "ModelConfig":
        if vocab_size is None:
            vocab_size = len(build_vocabulary(tuple(config.get("scenes.classes"))))
        return cls(
            vocab_size=vocab_size,
            d_model=config.get("model.d_model"),
            d_sem=config.get("model.d_sem"),
            d2=config.get("model.d2"),
            d3=config.get("model.d3"),
            ratio3=config.get("model.ratio3"),
            ratio4=config.get("model.ratio4"),
            max_tokens=config.get("model.max_tokens"),
            n_decoder_layers=config.get("model.n_decoder_layers"),
            plda_enabled=config.get("plda.enabled"),
            plda_heads=config.get("plda.n_heads"),
            head_ln=config.get("plda.head_ln"),
            max_block_source=config.get("plda.max_block_source"),
            clda_enabled=config.get("clda.enabled"),
            clda_heads=config.get("clda.n_heads"),
            n_clust=config.get("clda.n_clust"),
            k_graph=config.get("clda.k_graph"),
            fps_random_start=config.get("clda.fps_random_start"),
            attention_kind=config.get("attention.kind"),
            seed=config.get("seed"),
        )


@dataclass
class Hierarchy:
    """FPS levels and nearest-parent maps (``parent2[i]`` indexes level 3, ``parent3[j]`` level 4)."""

    idx3: List[int]
    idx4: List[int]
    parent2: List[int]
    parent3: List[int]

    @property
    def groups3(self) -> List[List[int]]:
        return _children(self.parent2, len(self.idx3))

    @property
    def groups4(self) -> List[List[int]]:
        return _children(self.parent3, len(self.idx4))


def _children(parent: Sequence[int], n_parent: int) -> List[List[int]]:
    groups: List[List[int]] = [[] for _ in range(n_parent)]
    for child, p in enumerate(parent):
        groups[p].append(child)
    return groups


def _nearest_parent(xyz: np.ndarray, parents: Sequence[int]) -> List[int]:
    """Map every point to the nearest sampled point; each sampled point owns itself."""
    centres = xyz[list(parents)]
    d = ((xyz[:, None, :] - centres[None, :, :]) ** 2).sum(axis=2)
    owner = [int(j) for j in np.argmin(d, axis=1)]
    for j, i in enumerate(parents):
        owner[i] = j
    return owner


def build_hierarchy(xyz: np.ndarray, ratio3: int, ratio4: int) -> Hierarchy:
    n_p = xyz.shape[0]
    n3 = max(n_p // ratio3, 1)
    idx3 = fps(xyz, n3)
    xyz3 = xyz[idx3]
    n4 = max(n3 // ratio4, 1)
    idx4 = fps(xyz3, n4)
    return Hierarchy(idx3, idx4, _nearest_parent(xyz, idx3), _nearest_parent(xyz3, idx4))


@dataclass
class ForwardOutput:
    box: Tensor
    mask: Tensor
    logits: Tensor
    traces: Dict[str, AttnTrace] = field(default_factory=dict)

    def box3d(self) -> Box3D:
        return Box3D.from_corners(self.box)


class GroundingModel:
    """
    Parameter container plus forward pass.

    Every trainable tensor is registered exactly once in ``self.params``
    under its dotted name; the prefix decides the optimizer group
    (``encoder.*``) and whether the tensor is shared by all tasks
    (everything except ``heads.*``).
    """

    def __init__(self, cfg: ModelConfig):
        if cfg.max_block_source not in MAX_BLOCK_SOURCES:
            raise ValueError(f"Unknown max block source '{cfg.max_block_source}'")
        self.cfg = cfg
        self.rng = np.random.default_rng(cfg.seed)
        root = ParamFactory(seed=cfg.seed)
        d, d_sem = cfg.d_model, cfg.d_sem

        enc = root.scope("encoder")
        self.point_mlp = MLPParams.create(enc.scope("point"), (6, cfg.d2, cfg.d2))
        self.level3 = MLPParams.create(enc.scope("level3"), (cfg.d2, cfg.d3))
        self.level4 = MLPParams.create(enc.scope("level4"), (cfg.d3, d_sem))
        self.embedding = enc.normal("embedding", (cfg.vocab_size, d_sem), 1.0 / math.sqrt(d_sem))
        self.positions = enc.normal("positions", (cfg.max_tokens, d_sem), 0.02)

        plda = root.scope("plda")
        self.p_v2t = create_attention(plda.scope("v2t"), d_sem, cfg.plda_heads, cfg.attention_kind, cfg.head_ln)
        self.p_t2v = create_attention(plda.scope("t2v"), d_sem, cfg.plda_heads, cfg.attention_kind, cfg.head_ln)
        self.fusion = FusionParams.create(root.scope("fusion"), d_sem, cfg.d3, cfg.d2, d)

        self.clda = CldaParams.create(root.scope("clda"), d, cfg.clda_heads, cfg.n_clust, cfg.k_graph,
                                      cfg.attention_kind, cfg.head_ln)

        dec = root.scope("decoder")
        self.query_proj = LinearParams.create(dec.scope("query"), d, d)
        self.decoder = [(AttnParams.create(dec.scope(f"layer{i}.attn"), d, cfg.clda_heads),
                         NormParams.create(dec.scope(f"layer{i}.norm"), d))
                        for i in range(cfg.n_decoder_layers)]

        heads = root.scope("heads")
        self.mask_proj = heads.weight("mask.weight", d, d)
        self.mask_bias = heads.zeros("mask.bias", (1,))
        self.box_proj = heads.weight("box.weight", d, d)
        self.center_mlp = MLPParams.create(heads.scope("center"), (d, d, 3))
        self.size_mlp = MLPParams.create(heads.scope("size"), (d, d, 3))
        self.token_head = LinearParams.create(heads.scope("token"), d, 1)

        self.params = unique_parameters(self._groups())
        logger.debug("GroundingModel: %d tensors, %d scalars", len(self.params), self.parameter_count())

    def _groups(self):
        yield "encoder", (self.point_mlp.parameters() + self.level3.parameters() + self.level4.parameters()
                          + [self.embedding, self.positions])
        yield "plda", self.p_v2t.parameters() + self.p_t2v.parameters()
        yield "fusion", self.fusion.parameters()
        yield "clda", self.clda.parameters()
        yield "decoder", self.query_proj.parameters() + [p for a, n in self.decoder
                                                         for p in a.parameters() + n.parameters()]
        yield "heads", ([self.mask_proj, self.mask_bias, self.box_proj] + self.center_mlp.parameters()
                        + self.size_mlp.parameters() + self.token_head.parameters())

    def parameters(self) -> List[Tensor]:
        return list(self.params.values())

    def encoder_parameters(self) -> List[Tensor]:
        return [p for name, p in self.params.items() if name.startswith("encoder.")]

    def shared_parameters(self) -> List[Tensor]:
        return [p for name, p in self.params.items() if not name.startswith("heads.")]

    def parameter_count(self) -> int:
        return sum(p.size for p in self.params.values())

    def plda_parameter_count(self) -> int:
        return self.p_v2t.parameter_count() + self.p_t2v.parameter_count()

    # ------------------------------------------------------------------

    def encode_text(self, tokens: Sequence[int]) -> Tensor:
        if not tokens:
            raise ShapeError("An expression needs at least one token")
        if len(tokens) > self.cfg.max_tokens:
            raise ShapeError(f"Expression has {len(tokens)} tokens, model.max_tokens is {self.cfg.max_tokens}")
        return T.gather_rows(self.embedding, list(tokens)) + self.positions[0:len(tokens)]

    def forward_arrays(self, xyz: np.ndarray, rgb: np.ndarray, tokens: Sequence[int]) -> ForwardOutput:
        cfg = self.cfg
        n_p = xyz.shape[0]
        if cfg.clda_enabled and n_p % cfg.n_clust != 0:
            raise ShapeError(f"n_p={n_p} is not divisible by N_clust={cfg.n_clust}")
        traces: Dict[str, AttnTrace] = {}

        hier = build_hierarchy(xyz, cfg.ratio3, cfg.ratio4)
        F_v2 = self.point_mlp(Tensor(np.concatenate([xyz, rgb], axis=1)))
        F_v3 = self.level3(T.segment_max(F_v2, hier.groups3))
        F_v4 = self.level4(T.segment_max(F_v3, hier.groups4))
        F_t = self.encode_text(tokens)

        if cfg.plda_enabled:
            out = plda_forward(F_v4, F_t, self.p_v2t, self.p_t2v)
            traces["plda.v2t"], traces["plda.t2v"] = out.trace_v2t, out.trace_t2v
        else:
            out = PldaOutput(F_v4, F_t)

        fused_v = fuse_multiscale(out.K_v2t, F_v3, F_v2, hier.parent3, hier.parent2, self.fusion)
        pooled = max_pool_text(max_block_input(cfg.max_block_source, F_v4, F_t, out), self.fusion)
        fused_t = self.fusion.text_proj(F_t) + pooled

        if cfg.clda_enabled:
            start = int(self.rng.integers(n_p)) if cfg.fps_random_start else 0
            clda = clda_forward(fused_v, fused_t, xyz, self.clda, start=start)
            visual, text = clda.visual, clda.text
            traces["clda.visual"], traces["clda.text"] = clda.traces
        else:
            visual, text = fused_v, fused_t

        query = self.query_proj(T.reshape(T.max_rows(text), (1, cfg.d_model)))
        for i, (attn, norm) in enumerate(self.decoder):
            attended, trace = multihead_attention(query, visual, attn)
            query = norm(query + attended)
            traces[f"decoder.{i}"] = trace

        scale = 1.0 / math.sqrt(cfg.d_model)
        mask_logits = T.matmul(T.matmul(visual, self.mask_proj), query.T) * scale + self.mask_bias
        mask = T.sigmoid(T.reshape(mask_logits, (n_p,)))

        box_scores = T.matmul(query, T.matmul(visual, self.box_proj).T) * scale
        weights = T.softmax_rows(box_scores)
        center = T.matmul(weights, Tensor(xyz)) + self.center_mlp(query)
        size = T.exp(T.clamp(self.size_mlp(query), *SIZE_CLAMP))
        half = size * 0.5
        box = T.reshape(T.concat_cols([center - half, center + half]), (6,))

        logits = T.reshape(self.token_head(text), (len(tokens),))
        return ForwardOutput(box, mask, logits, traces)

    def forward(self, scene: Scene, expression: Expression) -> ForwardOutput:
        return self.forward_arrays(scene.points, scene.colors, expression.tokens)

    __call__ = forward
