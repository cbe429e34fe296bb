"""Tests for point-level differential attention and multi-scale fusion."""

import numpy as np
import pytest

from crossdiff.diffattn import AttnParams, DiffAttnParams
from crossdiff.errors import ShapeError
from crossdiff.layers import ParamFactory
from crossdiff.plda import (FusionParams, fuse_multiscale, max_block_input, max_pool_text, plda_forward,
                            plda_parameter_formula)
from crossdiff.tensor import Tensor


class TestPldaForward:
    """Test the bidirectional pass."""

    def setup_method(self):
        factory = ParamFactory(seed=7)
        self.p_v2t = DiffAttnParams.create(factory.scope("v2t"), 8, 2)
        self.p_t2v = DiffAttnParams.create(factory.scope("t2v"), 8, 2)
        rng = np.random.default_rng(0)
        self.F_v4 = Tensor(rng.normal(size=(6, 8)))
        self.F_t = Tensor(rng.normal(size=(4, 8)))

    def test_output_rows_follow_queries(self):
        out = plda_forward(self.F_v4, self.F_t, self.p_v2t, self.p_t2v)
        assert out.K_v2t.shape == (6, 8)
        assert out.K_t2v.shape == (4, 8)
        assert out.trace_v2t.A_1.shape == (2, 6, 4)
        assert out.trace_t2v.A_1.shape == (2, 4, 6)

    def test_shared_parameters_rejected(self):
        """Test that both directions must own their parameters."""
        with pytest.raises(ValueError):
            plda_forward(self.F_v4, self.F_t, self.p_v2t, self.p_v2t)

    def test_width_mismatch_rejected(self):
        with pytest.raises(ShapeError):
            plda_forward(self.F_v4, Tensor(np.ones((4, 6))), self.p_v2t, self.p_t2v)

    def test_standard_attention_directions(self):
        factory = ParamFactory(seed=8)
        out = plda_forward(self.F_v4, self.F_t, AttnParams.create(factory.scope("a"), 8, 2),
                           AttnParams.create(factory.scope("b"), 8, 2))
        assert out.trace_v2t.A_2 is None
        assert out.K_v2t.shape == (6, 8)


class TestFusion:
    """Test upsampling, the Max block and parameter accounting."""

    def setup_method(self):
        self.fp = FusionParams.create(ParamFactory(seed=3), d_sem=8, d3=4, d2=2, d_mod=6)
        rng = np.random.default_rng(1)
        self.K = Tensor(rng.normal(size=(2, 8)))
        self.F_v3 = Tensor(rng.normal(size=(4, 4)))
        self.F_v2 = Tensor(rng.normal(size=(8, 2)))

    def test_fused_shape(self):
        out = fuse_multiscale(self.K, self.F_v3, self.F_v2, [0, 0, 1, 1], [0, 0, 1, 1, 2, 2, 3, 3], self.fp)
        assert out.shape == (8, 6)

    def test_points_sharing_parents_and_features_match(self):
        """Test that fine points with the same parent and inputs get the same rows."""
        F_v2 = Tensor(np.ones((8, 2)))
        out = fuse_multiscale(self.K, self.F_v3, F_v2, [0, 0, 1, 1], [0, 0, 1, 1, 2, 2, 3, 3], self.fp).data
        np.testing.assert_array_equal(out[0], out[1])
        np.testing.assert_array_equal(out[6], out[7])

    def test_bad_index_maps_rejected(self):
        with pytest.raises(ShapeError):
            fuse_multiscale(self.K, self.F_v3, self.F_v2, [0, 0, 1], [0] * 8, self.fp)
        with pytest.raises(ShapeError):
            fuse_multiscale(self.K, self.F_v3, self.F_v2, [0, 0, 1, 2], [0] * 8, self.fp)
        with pytest.raises(ShapeError):
            fuse_multiscale(self.K, self.F_v3, self.F_v2, [0, 0, 1, 1], [4] * 8, self.fp)

    def test_max_pool_text(self):
        tokens = Tensor([[1.0] * 8, [3.0] * 8])
        pooled = max_pool_text(tokens, self.fp)
        assert pooled.shape == (6,)
        expected = np.full((1, 8), 3.0) @ self.fp.pool_proj.weight.data + self.fp.pool_proj.bias.data
        np.testing.assert_allclose(pooled.data, expected[0])
        with pytest.raises(ShapeError):
            max_pool_text(Tensor(np.zeros((0, 8))), self.fp)

    def test_max_block_sources(self):
        factory = ParamFactory(seed=9)
        F_v4, F_t = Tensor(np.ones((3, 8))), Tensor(np.zeros((2, 8)))
        out = plda_forward(F_v4, F_t, DiffAttnParams.create(factory.scope("a"), 8, 2),
                           DiffAttnParams.create(factory.scope("b"), 8, 2))
        assert max_block_input("fv4", F_v4, F_t, out) is F_v4
        assert max_block_input("ft", F_v4, F_t, out) is F_t
        assert max_block_input("kt2v", F_v4, F_t, out) is out.K_t2v
        assert max_block_input("kv2t", F_v4, F_t, out) is out.K_v2t
        with pytest.raises(ValueError):
            max_block_input("mean", F_v4, F_t, out)

    def test_parameter_formula(self):
        assert plda_parameter_formula(32, 2) == 4 * 32 * 32 + 4 * 8 * 2 + 2 * 16 * 2
        p = DiffAttnParams.create(ParamFactory(), 32, 4)
        assert p.parameter_count() == plda_parameter_formula(32, 4)
