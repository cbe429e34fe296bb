"""
Cross-modal differential attention.

One layer maps a query sequence ``[m x d_model]`` and a key/value sequence
``[n x d_model]`` to ``[m x d_model]``. Queries and keys are split into
``2 * N_h`` heads of width ``d_h = d_model / (2 * N_h)``; heads ``2i`` and
``2i + 1`` form the two channels of logical head ``i``, whose value head is
``2 * d_h`` wide. Each logical head computes

    (softmax(Q1 K1^T / sqrt(d_h)) - lambda_i * softmax(Q2 K2^T / sqrt(d_h))) V_i

followed by a layer norm over its ``2 * d_h`` channels; the heads are then
concatenated and projected by ``W_O``.

The module also carries conventional multi-head attention, used for
self-attention refinement and as the drop-in replacement when differential
attention is switched off.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional, Tuple, Union

import numpy as np

from . import tensor as T
from .errors import ShapeError
from .layers import ParamFactory
from .tensor import Tensor

logger = logging.getLogger(__name__)

LAMBDA_CLAMP = 50.0
LAMBDA_INIT_STD = 0.1


@dataclass
class DiffAttnParams:
    """
    Parameters of one differential attention layer.

    The four lambda tensors are ``[N_h x d_h]``: row ``h`` is the learnable
    vector of logical head ``h``. The per-head layer-norm gain and bias are
    ``[N_h x 2 d_h]``.
    """

    W_Q: Tensor
    W_K: Tensor
    W_V: Tensor
    W_O: Tensor
    lambda_q1: Tensor
    lambda_k1: Tensor
    lambda_q2: Tensor
    lambda_k2: Tensor
    ln_gain: Tensor
    ln_bias: Tensor
    n_heads: int
    head_ln: bool = True

    @classmethod
    def create(cls, factory: ParamFactory, d_model: int, n_heads: int,
               head_ln: bool = True, lambda_std: float = LAMBDA_INIT_STD) -> "DiffAttnParams":
        if n_heads < 1 or d_model % (2 * n_heads) != 0:
            raise ShapeError(f"d_model={d_model} is not divisible by 2*N_h={2 * n_heads}")
        d_h = d_model // (2 * n_heads)
        return cls(
            W_Q=factory.weight("W_Q", d_model, d_model),
            W_K=factory.weight("W_K", d_model, d_model),
            W_V=factory.weight("W_V", d_model, d_model),
            W_O=factory.weight("W_O", d_model, d_model),
            lambda_q1=factory.normal("lambda_q1", (n_heads, d_h), lambda_std),
            lambda_k1=factory.normal("lambda_k1", (n_heads, d_h), lambda_std),
            lambda_q2=factory.normal("lambda_q2", (n_heads, d_h), lambda_std),
            lambda_k2=factory.normal("lambda_k2", (n_heads, d_h), lambda_std),
            ln_gain=factory.ones("ln_gain", (n_heads, 2 * d_h)),
            ln_bias=factory.zeros("ln_bias", (n_heads, 2 * d_h)),
            n_heads=n_heads,
            head_ln=head_ln,
        )

    @property
    def d_model(self) -> int:
        return self.W_Q.shape[0]

    @property
    def d_h(self) -> int:
        return self.d_model // (2 * self.n_heads)

    def lambda_vectors(self) -> List[Tensor]:
        return [self.lambda_q1, self.lambda_k1, self.lambda_q2, self.lambda_k2]

    def parameters(self) -> List[Tensor]:
        return [self.W_Q, self.W_K, self.W_V, self.W_O, *self.lambda_vectors(), self.ln_gain, self.ln_bias]

    def parameter_count(self) -> int:
        return sum(p.size for p in self.parameters())


@dataclass
class AttnParams:
    """Conventional multi-head attention: N_h heads of width d_model / N_h."""

    W_Q: Tensor
    W_K: Tensor
    W_V: Tensor
    W_O: Tensor
    n_heads: int

    @classmethod
    def create(cls, factory: ParamFactory, d_model: int, n_heads: int) -> "AttnParams":
        if n_heads < 1 or d_model % n_heads != 0:
            raise ShapeError(f"d_model={d_model} is not divisible by N_h={n_heads}")
        return cls(factory.weight("W_Q", d_model, d_model), factory.weight("W_K", d_model, d_model),
                   factory.weight("W_V", d_model, d_model), factory.weight("W_O", d_model, d_model),
                   n_heads)

    @property
    def d_model(self) -> int:
        return self.W_Q.shape[0]

    def parameters(self) -> List[Tensor]:
        return [self.W_Q, self.W_K, self.W_V, self.W_O]

    def parameter_count(self) -> int:
        return sum(p.size for p in self.parameters())


@dataclass
class AttnTrace:
    """Attention maps of one layer; ``A_2`` and ``lambda_value`` are absent for standard attention."""

    A_1: Tensor
    A_2: Optional[Tensor] = None
    lambda_value: Optional[Tensor] = None
    head_outputs: List[Tensor] = field(default_factory=list)


@dataclass
class SplitHeads:
    q1: List[Tensor]
    q2: List[Tensor]
    k1: List[Tensor]
    k2: List[Tensor]
    v: List[Tensor]


def project_qkv(query_src: Tensor, kv_src: Tensor,
                p: Union[DiffAttnParams, AttnParams]) -> Tuple[Tensor, Tensor, Tensor]:
    """Q = query_src W_Q, K = kv_src W_K, V = kv_src W_V."""
    if query_src.ndim != 2 or kv_src.ndim != 2:
        raise ShapeError("Attention inputs must be matrices")
    if query_src.shape[1] != p.d_model or kv_src.shape[1] != p.d_model:
        raise ShapeError(f"Attention width mismatch: query {query_src.shape}, "
                         f"key/value {kv_src.shape}, d_model {p.d_model}")
    return T.matmul(query_src, p.W_Q), T.matmul(kv_src, p.W_K), T.matmul(kv_src, p.W_V)


def split_heads(Q: Tensor, K: Tensor, V: Tensor, p: DiffAttnParams) -> SplitHeads:
    """Pair query/key heads (2i, 2i+1) into channels 1 and 2 of logical head i."""
    d_model = Q.shape[1]
    if d_model != 2 * p.n_heads * p.d_h:
        raise ShapeError(f"d_model={d_model} is not 2*N_h*d_h for N_h={p.n_heads}")
    d_h = p.d_h
    heads = SplitHeads([], [], [], [], [])
    for i in range(p.n_heads):
        c1 = slice(2 * i * d_h, (2 * i + 1) * d_h)
        c2 = slice((2 * i + 1) * d_h, (2 * i + 2) * d_h)
        heads.q1.append(Q[:, c1])
        heads.q2.append(Q[:, c2])
        heads.k1.append(K[:, c1])
        heads.k2.append(K[:, c2])
        heads.v.append(V[:, 2 * i * d_h:(2 * i + 2) * d_h])
    return heads


def merge_heads(heads: List[Tensor]) -> Tensor:
    return T.concat_cols(heads)


def _row_dot(a: Tensor, b: Tensor) -> Tensor:
    ones = Tensor(np.ones((a.shape[1], 1)))
    return T.reshape(T.matmul(a * b, ones), (a.shape[0],))


def lambda_value(p: DiffAttnParams) -> Tensor:
    """Per-head lambda = exp(sum(lq1*lk1)) - exp(sum(lq2*lk2)), dot products clamped to +-50."""
    s1 = T.clamp(_row_dot(p.lambda_q1, p.lambda_k1), -LAMBDA_CLAMP, LAMBDA_CLAMP)
    s2 = T.clamp(_row_dot(p.lambda_q2, p.lambda_k2), -LAMBDA_CLAMP, LAMBDA_CLAMP)
    return T.exp(s1) - T.exp(s2)


def _head_norm(heads: List[Tensor], p: DiffAttnParams) -> Tensor:
    if p.head_ln:
        normed = [T.layer_norm(h, p.ln_gain[i], p.ln_bias[i]) for i, h in enumerate(heads)]
        return merge_heads(normed)
    width = p.n_heads * 2 * p.d_h
    return T.layer_norm(merge_heads(heads), T.reshape(p.ln_gain, (width,)), T.reshape(p.ln_bias, (width,)))


def diff_attention(query_src: Tensor, kv_src: Tensor, p: DiffAttnParams) -> Tuple[Tensor, AttnTrace]:
    """Differential cross attention of ``query_src`` over ``kv_src``."""
    Q, K, V = project_qkv(query_src, kv_src, p)
    heads = split_heads(Q, K, V, p)
    lam = lambda_value(p)
    scale = 1.0 / math.sqrt(p.d_h)

    maps_1, maps_2, outputs = [], [], []
    for i in range(p.n_heads):
        a1 = T.softmax_rows(T.matmul(heads.q1[i], heads.k1[i].T) * scale)
        a2 = T.softmax_rows(T.matmul(heads.q2[i], heads.k2[i].T) * scale)
        outputs.append(T.matmul(a1 - lam[i] * a2, heads.v[i]))
        maps_1.append(a1)
        maps_2.append(a2)

    out = T.matmul(_head_norm(outputs, p), p.W_O)
    return out, AttnTrace(T.stack(maps_1), T.stack(maps_2), lam, outputs)


def reference_attention(query_src: Tensor, kv_src: Tensor, p: DiffAttnParams) -> Tensor:
    """Single-channel softmax attention using only the channel-1 query/key heads of ``p``."""
    Q, K, V = project_qkv(query_src, kv_src, p)
    heads = split_heads(Q, K, V, p)
    scale = 1.0 / math.sqrt(p.d_h)
    outputs = [T.matmul(T.softmax_rows(T.matmul(heads.q1[i], heads.k1[i].T) * scale), heads.v[i])
               for i in range(p.n_heads)]
    return T.matmul(_head_norm(outputs, p), p.W_O)


def multihead_attention(query_src: Tensor, kv_src: Tensor, p: AttnParams) -> Tuple[Tensor, AttnTrace]:
    """Conventional multi-head attention, softmax(Q K^T / sqrt(d)) V per head, then W_O."""
    Q, K, V = project_qkv(query_src, kv_src, p)
    width = p.d_model // p.n_heads
    scale = 1.0 / math.sqrt(width)
    maps, outputs = [], []
    for i in range(p.n_heads):
        cols = slice(i * width, (i + 1) * width)
        a = T.softmax_rows(T.matmul(Q[:, cols], K[:, cols].T) * scale)
        outputs.append(T.matmul(a, V[:, cols]))
        maps.append(a)
    return T.matmul(T.concat_cols(outputs), p.W_O), AttnTrace(T.stack(maps), head_outputs=outputs)


def cross_attention(query_src: Tensor, kv_src: Tensor,
                    p: Union[DiffAttnParams, AttnParams]) -> Tuple[Tensor, AttnTrace]:
    """Dispatch on the parameter type: differential or conventional attention."""
    if isinstance(p, DiffAttnParams):
        return diff_attention(query_src, kv_src, p)
    return multihead_attention(query_src, kv_src, p)


def create_attention(factory: ParamFactory, d_model: int, n_heads: int, kind: str = "diff",
                     head_ln: bool = True) -> Union[DiffAttnParams, AttnParams]:
    """Build differential (``kind='diff'``) or conventional (``kind='standard'``) attention parameters."""
    if kind == "diff":
        return DiffAttnParams.create(factory, d_model, n_heads, head_ln=head_ln)
    if kind == "standard":
        return AttnParams.create(factory, d_model, n_heads)
    raise ValueError(f"Unknown attention kind '{kind}'")
