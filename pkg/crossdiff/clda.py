"""
Cluster-level differential attention.

Spatial relation modeling (SRM) groups the scene into ``N_clust`` clusters
of ``S_clust = n_p / N_clust`` points around farthest-point-sampled
centroids, encodes each cluster relative to its centroid, relates the
clusters to each other with EdgeConv over the centroid kNN graph, and
projects the centroid coordinates. Two localization-aware blocks then
filter the visual stream against the inter-cluster features and the text
stream against the centroid features.

Cluster selection is discrete: coordinates enter SRM as constants and no
gradient flows through FPS or the kNN grouping.
"""

import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from . import tensor as T
from .diffattn import AttnParams, AttnTrace, DiffAttnParams, create_attention, cross_attention, \
    multihead_attention
from .errors import ShapeError
from .layers import LinearParams, MLPParams, NormParams, ParamFactory
from .tensor import Tensor

logger = logging.getLogger(__name__)

Coords = Union[Tensor, np.ndarray]


def _coords(points: Coords) -> np.ndarray:
    arr = points.data if isinstance(points, Tensor) else np.asarray(points, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise ShapeError(f"Expected an [n x 3] coordinate array, got shape {arr.shape}")
    return arr


def fps(points: Coords, m: int, start: int = 0) -> List[int]:
    """
    Greedy farthest point sampling.

    Each step adds the unselected point with the largest squared distance to
    its nearest selected point; ties go to the lowest index.
    """
    xyz = _coords(points)
    n = xyz.shape[0]
    if m < 1 or m > n:
        raise ShapeError(f"fps: cannot sample {m} of {n} points")
    if not 0 <= start < n:
        raise ShapeError(f"fps: start index {start} outside [0, {n})")
    selected = [start]
    min_dist = ((xyz - xyz[start]) ** 2).sum(axis=1)
    min_dist[start] = -1.0
    while len(selected) < m:
        nxt = int(np.argmax(min_dist))
        selected.append(nxt)
        d = ((xyz - xyz[nxt]) ** 2).sum(axis=1)
        min_dist = np.where(min_dist < 0, min_dist, np.minimum(min_dist, d))
        min_dist[nxt] = -1.0
    return selected


@dataclass
class ClusterAssignment:
    centroid_indices: List[int]
    members: List[List[int]]
    centroids: Tensor

    @property
    def n_clust(self) -> int:
        return len(self.centroid_indices)

    @property
    def s_clust(self) -> int:
        return len(self.members[0]) if self.members else 0


def knn_partition(points: Coords, centroid_indices: Sequence[int], s_clust: int) -> ClusterAssignment:
    """Assign to every centroid its ``s_clust`` nearest points (stable order, ties to the lower index)."""
    xyz = _coords(points)
    if s_clust < 1 or s_clust > xyz.shape[0]:
        raise ShapeError(f"knn_partition: cluster size {s_clust} invalid for {xyz.shape[0]} points")
    members = []
    for c in centroid_indices:
        d = ((xyz - xyz[c]) ** 2).sum(axis=1)
        members.append([int(i) for i in np.argsort(d, kind="stable")[:s_clust]])
    centroids = Tensor(xyz[list(centroid_indices)]) if len(centroid_indices) else Tensor(np.zeros((0, 3)))
    return ClusterAssignment(list(centroid_indices), members, centroids)


@dataclass
class SrmOutput:
    F_iRel: Tensor
    F_oRel: Tensor
    F_ctr: Tensor
    O: Tensor


def intra_encoder(points: Coords, assign: ClusterAssignment, mlp: MLPParams) -> Tensor:
    """Per-cluster max-pool of ``mlp(p - o)`` over the members; ``[N_clust x d_mod]``."""
    xyz = _coords(points)
    O = assign.centroids.data
    rel = np.concatenate([xyz[members] - O[c] for c, members in enumerate(assign.members)], axis=0)
    h = mlp(Tensor(rel))
    s = assign.s_clust
    groups = [range(c * s, (c + 1) * s) for c in range(assign.n_clust)]
    return T.segment_max(h, groups)


def centroid_knn(O: Coords, k: int) -> List[List[int]]:
    """``k`` nearest other centroids of each centroid, nearest first, ties to the lower index."""
    xyz = _coords(O)
    n = xyz.shape[0]
    if k < 1 or k >= n:
        raise ShapeError(f"edgeconv: k_graph={k} must satisfy 1 <= k < N_clust={n}")
    neighbours = []
    for i in range(n):
        d = ((xyz - xyz[i]) ** 2).sum(axis=1)
        d[i] = np.inf
        neighbours.append([int(j) for j in np.argsort(d, kind="stable")[:k]])
    return neighbours


def edgeconv(F_iRel: Tensor, O: Coords, k_graph: int, mlp: MLPParams) -> Tensor:
    """EdgeConv over the centroid kNN graph: max over ``j`` of ``mlp([f_i ; f_j - f_i])``."""
    neighbours = centroid_knn(O, k_graph)
    n = len(neighbours)
    if F_iRel.shape[0] != n:
        raise ShapeError(f"edgeconv: {F_iRel.shape[0]} feature rows for {n} centroids")
    centre = [i for i in range(n) for _ in range(k_graph)]
    other = [j for row in neighbours for j in row]
    f_i = T.gather_rows(F_iRel, centre)
    f_j = T.gather_rows(F_iRel, other)
    h = mlp(T.concat_cols([f_i, f_j - f_i]))
    groups = [range(i * k_graph, (i + 1) * k_graph) for i in range(n)]
    return T.segment_max(h, groups)


def centroid_project(O: Coords, proj: LinearParams) -> Tensor:
    if proj.weight.shape[0] != 3:
        raise ShapeError(f"centroid_project: W_o must have 3 input rows, got {proj.weight.shape}")
    centroids = O if isinstance(O, Tensor) else Tensor(_coords(O))
    return proj(centroids)


@dataclass
class LdaParams:
    """Filter-then-enhance block; ``mlp`` is ``None`` for the text branch."""

    attn: Union[DiffAttnParams, AttnParams]
    self_attn: AttnParams
    mlp: Optional[MLPParams] = None

    @classmethod
    def create(cls, factory: ParamFactory, d_mod: int, n_heads: int, with_mlp: bool,
               kind: str = "diff", head_ln: bool = True) -> "LdaParams":
        return cls(
            attn=create_attention(factory.scope("attn"), d_mod, n_heads, kind=kind, head_ln=head_ln),
            self_attn=AttnParams.create(factory.scope("self_attn"), d_mod, n_heads),
            mlp=MLPParams.create(factory.scope("mlp"), (d_mod, d_mod, d_mod)) if with_mlp else None,
        )

    def parameters(self) -> List[Tensor]:
        params = self.attn.parameters() + self.self_attn.parameters()
        return params + (self.mlp.parameters() if self.mlp is not None else [])


def lda_block(query_feats: Tensor, kv_feats: Tensor, p: LdaParams) -> Tuple[Tensor, AttnTrace]:
    """
    Stage 1 filters ``query_feats`` against ``kv_feats`` with cross attention.
    Stage 2 forms the residual ``X = query + MLP(d)`` (``query + d`` without
    an MLP) and refines it as ``X + SelfAttn(X)``.
    """
    if query_feats.shape[-1] != kv_feats.shape[-1]:
        raise ShapeError(f"lda_block: width mismatch {query_feats.shape} vs {kv_feats.shape}")
    d, trace = cross_attention(query_feats, kv_feats, p.attn)
    x = query_feats + (p.mlp(d) if p.mlp is not None else d)
    refined, _ = multihead_attention(x, x, p.self_attn)
    return x + refined, trace


@dataclass
class CldaParams:
    n_clust: int
    k_graph: int
    intra: MLPParams
    edge: MLPParams
    ctr: LinearParams
    lda_v: LdaParams
    lda_t: LdaParams
    ffn_v: MLPParams
    ffn_t: MLPParams
    norm_v: NormParams
    norm_t: NormParams

    @classmethod
    def create(cls, factory: ParamFactory, d_mod: int, n_heads: int, n_clust: int, k_graph: int,
               kind: str = "diff", head_ln: bool = True) -> "CldaParams":
        if k_graph >= n_clust:
            raise ShapeError(f"k_graph={k_graph} must be smaller than N_clust={n_clust}")
        half = max(d_mod // 2, 1)
        return cls(
            n_clust=n_clust,
            k_graph=k_graph,
            intra=MLPParams.create(factory.scope("intra"), (3, half, d_mod)),
            edge=MLPParams.create(factory.scope("edge"), (2 * d_mod, d_mod, d_mod)),
            ctr=LinearParams.create(factory.scope("ctr"), 3, d_mod),
            lda_v=LdaParams.create(factory.scope("lda_v"), d_mod, n_heads, True, kind, head_ln),
            lda_t=LdaParams.create(factory.scope("lda_t"), d_mod, n_heads, False, kind, head_ln),
            ffn_v=MLPParams.create(factory.scope("ffn_v"), (d_mod, 2 * d_mod, d_mod)),
            ffn_t=MLPParams.create(factory.scope("ffn_t"), (d_mod, 2 * d_mod, d_mod)),
            norm_v=NormParams.create(factory.scope("norm_v"), d_mod),
            norm_t=NormParams.create(factory.scope("norm_t"), d_mod),
        )

    def parameters(self) -> List[Tensor]:
        groups = [self.intra, self.edge, self.ctr, self.lda_v, self.lda_t,
                  self.ffn_v, self.ffn_t, self.norm_v, self.norm_t]
        return [p for g in groups for p in g.parameters()]


@dataclass
class CldaOutput:
    visual: Tensor
    text: Tensor
    srm: SrmOutput
    assignment: ClusterAssignment
    traces: List[AttnTrace] = field(default_factory=list)


def spatial_relations(F_xyz: Coords, p: CldaParams, start: int = 0) -> Tuple[SrmOutput, ClusterAssignment]:
    xyz = _coords(F_xyz)
    n_p = xyz.shape[0]
    if n_p % p.n_clust != 0:
        raise ShapeError(f"n_p={n_p} is not divisible by N_clust={p.n_clust}")
    centres = fps(xyz, p.n_clust, start=start)
    assign = knn_partition(xyz, centres, n_p // p.n_clust)
    F_iRel = intra_encoder(xyz, assign, p.intra)
    F_oRel = edgeconv(F_iRel, assign.centroids, p.k_graph, p.edge)
    F_ctr = centroid_project(assign.centroids, p.ctr)
    logger.debug("SRM: %d clusters of %d points", assign.n_clust, assign.s_clust)
    return SrmOutput(F_iRel, F_oRel, F_ctr, assign.centroids), assign


def clda_forward(F_v: Tensor, F_t: Tensor, F_xyz: Coords, p: CldaParams, start: int = 0) -> CldaOutput:
    """
    Enhance fused visual features ``[n_p x d_mod]`` and aligned text features
    ``[l_t x d_mod]``; both keep their row counts.
    """
    xyz = _coords(F_xyz)
    if xyz.shape[0] != F_v.shape[0]:
        raise ShapeError(f"clda_forward: {xyz.shape[0]} coordinates for {F_v.shape[0]} visual rows")
    srm, assign = spatial_relations(xyz, p, start=start)
    v, trace_v = lda_block(F_v, srm.F_oRel, p.lda_v)
    t, trace_t = lda_block(F_t, srm.F_ctr, p.lda_t)
    v = p.norm_v(v + p.ffn_v(v))
    t = p.norm_t(t + p.ffn_t(t))
    return CldaOutput(v, t, srm, assign, [trace_v, trace_t])
