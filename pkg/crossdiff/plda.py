"""
Point-level differential attention.

A single bidirectional pass: visual tokens attend over text tokens
(``K_v2t``, one row per visual token) and text tokens attend over visual
tokens (``K_t2v``, one row per text token). The visual result is then
upsampled through the point hierarchy and fused with the intermediate
visual features; a max-pooled summary (the Max block) is produced for the
text branch entering CLDA.
"""

import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence, Union

from . import tensor as T
from .diffattn import AttnParams, AttnTrace, DiffAttnParams, cross_attention
from .errors import ShapeError
from .layers import LinearParams, ParamFactory
from .tensor import Tensor

logger = logging.getLogger(__name__)

MAX_BLOCK_SOURCES = ("fv4", "kt2v", "ft", "kv2t")

Attention = Union[DiffAttnParams, AttnParams]


@dataclass
class PldaOutput:
    K_v2t: Tensor
    K_t2v: Tensor
    trace_v2t: Optional[AttnTrace] = None
    trace_t2v: Optional[AttnTrace] = None


@dataclass
class FusionParams:
    """
    Projections that bring every stream to the aligned width ``d_mod``.

    ``proj3`` maps ``[upsampled K_v2t ; F_v3]`` and ``proj2`` maps
    ``[upsampled stage-3 output ; F_v2]``. ``pool_proj`` projects the Max
    block summary and ``text_proj`` aligns the token features.
    """

    proj3: LinearParams
    proj2: LinearParams
    pool_proj: LinearParams
    text_proj: LinearParams

    @classmethod
    def create(cls, factory: ParamFactory, d_sem: int, d3: int, d2: int, d_mod: int) -> "FusionParams":
        return cls(
            proj3=LinearParams.create(factory.scope("proj3"), d_sem + d3, d_mod),
            proj2=LinearParams.create(factory.scope("proj2"), d_mod + d2, d_mod),
            pool_proj=LinearParams.create(factory.scope("pool_proj"), d_sem, d_mod),
            text_proj=LinearParams.create(factory.scope("text_proj"), d_sem, d_mod),
        )

    @property
    def d_mod(self) -> int:
        return self.proj2.weight.shape[1]

    def parameters(self) -> List[Tensor]:
        return (self.proj3.parameters() + self.proj2.parameters()
                + self.pool_proj.parameters() + self.text_proj.parameters())


def plda_forward(F_v4: Tensor, F_t: Tensor, p_v2t: Attention, p_t2v: Attention) -> PldaOutput:
    """
    Run both attention directions with independent parameter sets.

    Args:
        F_v4: Coarsest visual tokens ``[n_sem x d_sem]``.
        F_t: Text tokens ``[l_t x d_sem]``.
        p_v2t: Parameters of the visual-queried direction.
        p_t2v: Parameters of the text-queried direction.
    """
    if F_v4.ndim != 2 or F_t.ndim != 2 or F_v4.shape[1] != F_t.shape[1]:
        raise ShapeError(f"PLDA needs a shared width, got visual {F_v4.shape} and text {F_t.shape}")
    if p_v2t is p_t2v:
        raise ValueError("PLDA directions must use independent parameter sets")
    K_v2t, trace_v2t = cross_attention(F_v4, F_t, p_v2t)
    K_t2v, trace_t2v = cross_attention(F_t, F_v4, p_t2v)
    return PldaOutput(K_v2t, K_t2v, trace_v2t, trace_t2v)


def _check_map(index: Sequence[int], n_parent: int, n_child: int, label: str):
    if len(index) != n_child:
        raise ShapeError(f"{label}: index map has {len(index)} entries for {n_child} points")
    for i in index:
        if i < 0 or i >= n_parent:
            raise ShapeError(f"{label}: parent index {i} outside [0, {n_parent})")


def fuse_multiscale(K_v2t: Tensor, F_v3: Tensor, F_v2: Tensor,
                    parent3: Sequence[int], parent2: Sequence[int], fp: FusionParams) -> Tensor:
    """
    Upsample ``K_v2t`` to every fine point by nearest-parent gathers.

    ``parent3[j]`` names the coarse token owning stage-3 point ``j`` and
    ``parent2[i]`` the stage-3 point owning fine point ``i``. At each scale
    the gathered rows are concatenated with that scale's features and
    projected to ``d_mod``.

    Returns:
        Fused visual features ``[n_p x d_mod]``.
    """
    _check_map(parent3, K_v2t.shape[0], F_v3.shape[0], "fuse_multiscale stage 3")
    up3 = T.gather_rows(K_v2t, parent3)
    h3 = fp.proj3(T.concat_cols([up3, F_v3]))

    _check_map(parent2, h3.shape[0], F_v2.shape[0], "fuse_multiscale stage 2")
    up2 = T.gather_rows(h3, parent2)
    return fp.proj2(T.concat_cols([up2, F_v2]))


def max_pool_text(tokens: Tensor, fp: FusionParams) -> Tensor:
    """Column-wise max over rows followed by ``pool_proj``; returns a ``[d_mod]`` vector."""
    if tokens.ndim != 2 or tokens.shape[0] == 0:
        raise ShapeError("max_pool_text needs at least one token")
    pooled = T.reshape(T.max_rows(tokens), (1, tokens.shape[1]))
    return T.reshape(fp.pool_proj(pooled), (fp.d_mod,))


def max_block_input(source: str, F_v4: Tensor, F_t: Tensor, plda: PldaOutput) -> Tensor:
    """Pick the rows feeding the Max block: ``fv4``, ``kt2v``, ``ft`` or ``kv2t``."""
    if source == "fv4":
        return F_v4
    if source == "kt2v":
        return plda.K_t2v
    if source == "ft":
        return F_t
    if source == "kv2t":
        return plda.K_v2t
    raise ValueError(f"Unknown max block source '{source}', expected one of {MAX_BLOCK_SOURCES}")


def plda_parameter_formula(d_model: int, n_heads: int) -> int:
    """Analytic parameter count of one differential attention direction."""
    d_h = d_model // (2 * n_heads)
    return 4 * d_model * d_model + 4 * d_h * n_heads + 2 * (2 * d_h) * n_heads
