"""Tests for ablation grids."""

import pytest

from crossdiff.ablation import grid_variants, run_ablation
from crossdiff.config import RunConfig

TINY = ["model.d_model=8", "model.d_sem=8", "model.d2=4", "model.d3=8", "clda.n_clust=4", "clda.k_graph=2",
        "scenes.n_points=32", "scenes.n_objects=2", "train.n_scenes=1", "train.batch_size=1",
        "ablate.seeds=1", "ablate.steps=1", "eval.n_scenes=1"]


class TestGridVariants:
    """Test grid construction."""

    def test_components(self):
        variants = dict(grid_variants(RunConfig()))
        assert len(variants) == 8
        assert variants["full"] == {"plda.enabled": True, "clda.enabled": True, "loss.dgtl_enabled": True}
        assert variants["no-PLDA-CLDA"]["loss.dgtl_enabled"] is True
        assert "no-PLDA-CLDA-DGTL" in variants

    def test_clusters_respect_divisibility(self):
        config = RunConfig.load(None, ["ablate.grid=clusters", "scenes.n_points=48",
                                       "ablate.n_clust_values=[4, 8, 16, 32]"])
        variants = dict(grid_variants(config))
        assert sorted(variants) == ["n_clust=16", "n_clust=4", "n_clust=8"]
        assert variants["n_clust=4"]["clda.k_graph"] == 3

    def test_routing_and_attention(self):
        routing = grid_variants(RunConfig.load(None, ["ablate.grid=routing"]))
        assert [name for name, _ in routing] == ["max<-fv4", "max<-kt2v", "max<-ft", "max<-kv2t"]
        attention = grid_variants(RunConfig.load(None, ["ablate.grid=attention"]))
        assert [o["attention.kind"] for _, o in attention] == ["diff", "standard"]


class TestRunAblation:
    """Test a miniature grid end to end."""

    def test_attention_grid(self):
        config = RunConfig.load(None, TINY + ["ablate.grid=attention"])
        report = run_ablation(config)
        assert report["kind"] == "ablation"
        assert [v["name"] for v in report["variants"]] == ["diff", "standard"]
        for variant in report["variants"]:
            assert variant["overall"]["count"] >= 1
            assert 0.0 <= variant["overall"]["miou"] <= 1.0
        assert report["orderings"] == []

    @pytest.mark.slow
    def test_components_grid_orderings(self):
        config = RunConfig.load(None, TINY)
        report = run_ablation(config)
        assert len(report["variants"]) == 8
        assert len(report["orderings"]) == 2
