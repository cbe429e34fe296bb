"""Tests for the toy grounding network."""

import numpy as np
import pytest

from crossdiff.config import RunConfig
from crossdiff.diffattn import AttnParams
from crossdiff.errors import ShapeError
from crossdiff.model import GroundingModel, ModelConfig, build_hierarchy
from crossdiff.scenes import SceneConfig, build_vocabulary, generate_expression, generate_scene


def tiny_config(**overrides):
    values = dict(vocab_size=len(build_vocabulary()), d_model=8, d_sem=8, d2=4, d3=8, n_clust=4, k_graph=2,
                  plda_heads=2, clda_heads=2, seed=1)
    values.update(overrides)
    return ModelConfig(**values)


class TestHierarchy:
    """Test the FPS point hierarchy."""

    def test_levels_and_parent_maps(self):
        xyz = np.random.default_rng(0).uniform(size=(32, 3))
        hier = build_hierarchy(xyz, 4, 4)
        assert len(hier.idx3) == 8
        assert len(hier.idx4) == 2
        assert len(hier.parent2) == 32
        assert len(hier.parent3) == 8
        for j, i in enumerate(hier.idx3):
            assert hier.parent2[i] == j
        assert sorted(c for g in hier.groups3 for c in g) == list(range(32))
        assert all(hier.groups4)


class TestGroundingModel:
    """Test parameters and the forward pass."""

    def setup_method(self):
        self.scene = generate_scene(3, SceneConfig(n_points=32, n_objects=2, n_distractors=1))
        self.expr = generate_expression(self.scene, 0, {"explicit": 1.0})
        self.model = GroundingModel(tiny_config())

    def test_output_shapes(self):
        out = self.model(self.scene, self.expr)
        assert out.box.shape == (6,)
        assert out.mask.shape == (32,)
        assert out.logits.shape == (len(self.expr.tokens),)
        assert np.all((out.mask.data >= 0) & (out.mask.data <= 1))
        box = out.box3d()
        assert np.all(box.hi >= box.lo)

    def test_trace_keys(self):
        out = self.model(self.scene, self.expr)
        assert set(out.traces) == {"plda.v2t", "plda.t2v", "clda.visual", "clda.text", "decoder.0"}
        assert out.traces["plda.v2t"].A_2 is not None

    def test_disabled_modules_drop_traces(self):
        model = GroundingModel(tiny_config(plda_enabled=False, clda_enabled=False))
        out = model(self.scene, self.expr)
        assert set(out.traces) == {"decoder.0"}
        assert out.box.shape == (6,)

    def test_same_seed_same_output(self):
        a = GroundingModel(tiny_config())(self.scene, self.expr)
        b = GroundingModel(tiny_config())(self.scene, self.expr)
        np.testing.assert_array_equal(a.box.data, b.box.data)
        np.testing.assert_array_equal(a.mask.data, b.mask.data)

    def test_parameter_registry(self):
        names = list(self.model.params)
        assert len(names) == len(set(names))
        assert all(p.requires_grad for p in self.model.parameters())
        encoder = {id(p) for p in self.model.encoder_parameters()}
        assert encoder == {id(p) for n, p in self.model.params.items() if n.startswith("encoder.")}
        assert id(self.model.embedding) in encoder
        shared = {id(p) for p in self.model.shared_parameters()}
        assert id(self.model.mask_proj) not in shared
        assert id(self.model.embedding) in shared
        assert self.model.parameter_count() == sum(p.size for p in self.model.parameters())

    def test_plda_parameter_count(self):
        d, heads = 8, 2
        d_h = d // (2 * heads)
        per_direction = 4 * d * d + 4 * d_h * heads + 2 * 2 * d_h * heads
        assert self.model.plda_parameter_count() == 2 * per_direction

    def test_standard_attention_variant(self):
        model = GroundingModel(tiny_config(attention_kind="standard"))
        assert isinstance(model.p_v2t, AttnParams)
        assert model.plda_parameter_count() == 2 * 4 * 8 * 8
        assert model(self.scene, self.expr).traces["plda.v2t"].A_2 is None

    def test_indivisible_cluster_count(self):
        model = GroundingModel(tiny_config(n_clust=5, k_graph=2))
        with pytest.raises(ShapeError):
            model(self.scene, self.expr)

    def test_too_many_tokens(self):
        model = GroundingModel(tiny_config(max_tokens=2))
        with pytest.raises(ShapeError):
            model(self.scene, self.expr)

    def test_unknown_max_block_source(self):
        with pytest.raises(ValueError):
            GroundingModel(tiny_config(max_block_source="mean"))

    def test_from_run_config(self):
        config = RunConfig.load(None, ["model.d_model=16", "clda.n_clust=8", "clda.k_graph=4"])
        cfg = ModelConfig.from_config(config)
        assert cfg.d_model == 16
        assert cfg.n_clust == 8
        assert cfg.vocab_size == len(build_vocabulary(tuple(config.get("scenes.classes"))))
