"""Tests for spatial relation modeling and cluster-level attention."""

import numpy as np
import pytest

from crossdiff import tensor as T
from crossdiff.clda import (CldaParams, LdaParams, centroid_knn, clda_forward, edgeconv, fps, knn_partition,
                            lda_block, spatial_relations)
from crossdiff.errors import ShapeError
from crossdiff.layers import MLPParams, ParamFactory
from crossdiff.tensor import Tensor, grad_check

from . import oracles


def _cloud(seed, n):
    return np.random.default_rng(seed).uniform(-1.0, 1.0, size=(n, 3))


class TestSampling:
    """Test farthest point sampling and kNN grouping against exhaustive search."""

    def test_fps_matches_oracle(self):
        for seed in range(200):
            rng = np.random.default_rng(seed)
            n = int(rng.integers(2, 65))
            m = int(rng.integers(1, n + 1))
            start = int(rng.integers(0, n))
            points = _cloud(seed, n)
            assert fps(points, m, start) == oracles.fps(points.tolist(), m, start)

    def test_fps_ties_go_to_lowest_index(self):
        points = np.array([[0.0, 0, 0], [1.0, 0, 0], [-1.0, 0, 0], [0.0, 0.5, 0]])
        assert fps(points, 2) == [0, 1]

    def test_fps_rejects_bad_sizes(self):
        with pytest.raises(ShapeError):
            fps(_cloud(0, 4), 5)
        with pytest.raises(ShapeError):
            fps(_cloud(0, 4), 2, start=4)

    def test_knn_partition_matches_oracle(self):
        for seed in range(200):
            rng = np.random.default_rng(1000 + seed)
            n = int(rng.integers(2, 65))
            m = int(rng.integers(1, min(n, 8) + 1))
            s = int(rng.integers(1, n + 1))
            points = _cloud(100 + seed, n)
            centres = fps(points, m, int(rng.integers(0, n)))
            assign = knn_partition(points, centres, s)
            for c, members in zip(centres, assign.members):
                assert members == oracles.knn(points.tolist(), c, s)
            assert assign.s_clust == s
            np.testing.assert_array_equal(assign.centroids.data, points[centres])

    def test_centroid_knn_excludes_self(self):
        O = _cloud(3, 6)
        for i, row in enumerate(centroid_knn(O, 3)):
            assert i not in row
            assert row == oracles.knn(O.tolist(), i, 3, exclude_self=True)

    def test_centroid_knn_needs_fewer_neighbours_than_centroids(self):
        with pytest.raises(ShapeError):
            centroid_knn(_cloud(0, 4), 4)


class TestEdgeConv:
    """Test inter-cluster relations."""

    def test_matches_oracle(self):
        mlp = MLPParams.create(ParamFactory(seed=5), (8, 6, 4))
        features = np.random.default_rng(2).normal(size=(6, 4))
        O = _cloud(4, 6)
        out = edgeconv(Tensor(features), O, 3, mlp)
        layers = [(l.weight.data.tolist(), l.bias.data.tolist()) for l in mlp.layers]
        expected = oracles.edgeconv(features.tolist(), O.tolist(), 3, layers)
        np.testing.assert_allclose(out.data, np.array(expected), atol=1e-10)

    def test_row_count_mismatch(self):
        mlp = MLPParams.create(ParamFactory(), (8, 4))
        with pytest.raises(ShapeError):
            edgeconv(Tensor(np.ones((5, 4))), _cloud(0, 6), 2, mlp)


class TestClda:
    """Test the full cluster-level block."""

    def setup_method(self):
        self.p = CldaParams.create(ParamFactory(seed=11), d_mod=8, n_heads=2, n_clust=4, k_graph=2)
        rng = np.random.default_rng(6)
        self.xyz = _cloud(6, 16)
        self.F_v = Tensor(rng.normal(size=(16, 8)))
        self.F_t = Tensor(rng.normal(size=(3, 8)))

    def test_k_graph_must_be_below_cluster_count(self):
        with pytest.raises(ShapeError):
            CldaParams.create(ParamFactory(), 8, 2, n_clust=4, k_graph=4)

    def test_shapes_preserved(self):
        out = clda_forward(self.F_v, self.F_t, self.xyz, self.p)
        assert out.visual.shape == (16, 8)
        assert out.text.shape == (3, 8)
        assert out.srm.F_oRel.shape == (4, 8)
        assert out.srm.F_ctr.shape == (4, 8)
        assert len(out.traces) == 2
        assert out.traces[0].A_1.shape == (2, 16, 4)

    def test_indivisible_point_count(self):
        with pytest.raises(ShapeError):
            spatial_relations(_cloud(0, 15), self.p)

    def test_coordinate_row_mismatch(self):
        with pytest.raises(ShapeError):
            clda_forward(self.F_v, self.F_t, _cloud(0, 8), self.p)

    def test_relation_features_are_translation_invariant(self):
        """Test that shifting the cloud leaves cluster-relative features unchanged and moves F_ctr by delta W_o."""
        delta = np.array([3.0, -2.0, 0.5])
        srm, assign = spatial_relations(self.xyz, self.p)
        shifted, assign_shifted = spatial_relations(self.xyz + delta, self.p)
        assert assign.members == assign_shifted.members
        np.testing.assert_allclose(srm.F_iRel.data, shifted.F_iRel.data, atol=1e-9)
        np.testing.assert_allclose(srm.F_oRel.data, shifted.F_oRel.data, atol=1e-9)
        expected = np.tile(delta @ self.p.ctr.weight.data, (self.p.n_clust, 1))
        np.testing.assert_allclose(shifted.F_ctr.data - srm.F_ctr.data, expected, rtol=0, atol=1e-12)

    def test_lda_block_without_mlp(self):
        p = LdaParams.create(ParamFactory(seed=2), 8, 2, with_mlp=False)
        out, trace = lda_block(self.F_t, self.F_v, p)
        assert out.shape == (3, 8)
        assert trace.A_1.shape == (2, 3, 16)
        with pytest.raises(ShapeError):
            lda_block(self.F_t, Tensor(np.ones((2, 6))), p)

    def test_gradients(self):
        F_v = Tensor(self.F_v.data, requires_grad=True, name="F_v")
        F_t = Tensor(self.F_t.data, requires_grad=True, name="F_t")
        w_v = Tensor(np.random.default_rng(9).normal(size=(16, 8)))

        def loss():
            out = clda_forward(F_v, F_t, self.xyz, self.p)
            return T.sum(out.visual * w_v) + T.sum(out.text)

        params = [F_v, F_t] + self.p.lda_v.attn.parameters() + self.p.ctr.parameters()
        report = grad_check(loss, params)
        assert report.passed, report.failures()
