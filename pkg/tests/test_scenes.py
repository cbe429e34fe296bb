"""Tests for synthetic scenes, expressions and grounding metrics."""

from collections import Counter

import numpy as np
import pytest

from crossdiff.errors import PackingError, ShapeError, TemplateError
from crossdiff.geomloss import Box3D
from crossdiff.scenes import (BACKGROUND, Corpus, SampleResult, SceneConfig, SplitMix64, acc_at_iou,
                              build_vocabulary, generate_corpus, generate_expression, generate_scene,
                              load_corpus, miou, save_corpus, subset_report, tokenize)


class TestSplitMix64:
    """Test the portable generator."""

    def test_reference_sequence(self):
        rng = SplitMix64(0)
        assert rng.next_u64() == 0xE220A8397B1DCDAF
        assert rng.next_u64() == 0x6E789E6AA1B965F4
        assert rng.next_u64() == 0x06C45D188009454F

    def test_random_in_unit_interval(self):
        rng = SplitMix64(42)
        values = [rng.random() for _ in range(1000)]
        assert min(values) >= 0.0
        assert max(values) < 1.0

    def test_weighted_choice_rejects_zero_total(self):
        with pytest.raises(ValueError):
            SplitMix64(1).weighted_choice(["a"], [0.0])


class TestScenes:
    """Test scene generation."""

    def setup_method(self):
        self.cfg = SceneConfig(n_points=256, n_objects=4, n_distractors=1)

    def test_same_seed_same_scene(self):
        a, b = generate_scene(5, self.cfg), generate_scene(5, self.cfg)
        np.testing.assert_array_equal(a.points, b.points)
        np.testing.assert_array_equal(a.instance_id, b.instance_id)
        assert [o.cls for o in a.objects] == [o.cls for o in b.objects]

    def test_different_seeds_differ(self):
        assert not np.array_equal(generate_scene(1, self.cfg).points, generate_scene(2, self.cfg).points)

    def test_point_budget(self):
        scene = generate_scene(3, self.cfg)
        assert scene.n_points == 256
        per_object = int(256 * 0.75) // 4
        for obj in scene.objects:
            assert int((scene.instance_id == obj.instance_id).sum()) == per_object
        assert int((scene.instance_id == BACKGROUND).sum()) == 256 - 4 * per_object

    def test_objects_do_not_overlap(self):
        for seed in range(20):
            scene = generate_scene(seed, self.cfg)
            for i, a in enumerate(scene.objects):
                for b in scene.objects[i + 1:]:
                    assert not a.box.intersects(b.box)

    def test_object_points_inside_their_box(self):
        scene = generate_scene(4, self.cfg)
        for obj in scene.objects:
            pts = scene.points[scene.instance_id == obj.instance_id]
            assert obj.box.contains(pts).all()

    def test_distractors_share_the_first_class(self):
        scene = generate_scene(6, SceneConfig(n_objects=4, n_distractors=2))
        assert scene.same_class_count(0) >= 3

    def test_overcrowded_room_raises(self):
        with pytest.raises(PackingError):
            generate_scene(0, SceneConfig(n_objects=40, room_size=2.0, max_retries=20))

    def test_unknown_class_rejected(self):
        with pytest.raises(ValueError):
            generate_scene(0, SceneConfig(classes=("piano",)))

    def test_features_and_dict_round_trip(self):
        scene = generate_scene(7, self.cfg)
        assert scene.features().shape == (256, 6)
        again = type(scene).from_dict(scene.to_dict())
        np.testing.assert_array_equal(again.points, scene.points)
        np.testing.assert_array_equal(again.instance_id, scene.instance_id)


class TestExpressions:
    """Test template filling."""

    def setup_method(self):
        self.scene = generate_scene(11, SceneConfig(n_objects=4, n_distractors=1))
        self.vocab = build_vocabulary()

    def test_attribute_template(self):
        expr = generate_expression(self.scene, 0, {"attribute": 1.0}, target=2, vocab=self.vocab)
        obj = self.scene.object(2)
        assert expr.text == f"the {obj.color} {obj.cls}"
        assert expr.family == "attribute"
        assert expr.target_token == 2
        assert expr.anchor is None

    def test_implicit_template_tags(self):
        expr = generate_expression(self.scene, 1, {"implicit": 1.0}, target=0, vocab=self.vocab)
        assert "implicit" in expr.tags
        assert "multiple" in expr.tags
        assert expr.category in ("physical", "functional", "contextual")
        assert expr.text.startswith(f"the {self.scene.object(0).cls} ")

    def test_tokens_use_vocabulary(self):
        expr = generate_expression(self.scene, 2, vocab=self.vocab)
        assert expr.tokens == tokenize(expr.text, self.vocab)
        assert self.vocab["<unk>"] not in expr.tokens

    def test_no_positive_weight(self):
        with pytest.raises(TemplateError):
            generate_expression(self.scene, 0, {"attribute": 0.0})

    def test_single_object_falls_back_to_attribute(self):
        scene = generate_scene(2, SceneConfig(n_objects=1, n_distractors=0))
        expr = generate_expression(scene, 0, {"attribute": 0.1, "explicit": 1.0})
        assert expr.family == "attribute"
        with pytest.raises(TemplateError):
            generate_expression(scene, 0, {"explicit": 1.0})

    def test_template_distribution(self):
        """Test that sampled families follow the configured weights within 3%."""
        weights = {"attribute": 0.5, "explicit": 0.3, "implicit": 0.2}
        n = 5000
        counts = Counter(generate_expression(self.scene, seed, weights, vocab=self.vocab).family
                         for seed in range(n))
        for family, w in weights.items():
            assert abs(counts[family] / n - w) < 0.03

    def test_unknown_words_map_to_unk(self):
        assert tokenize("the purple chair", self.vocab) == [self.vocab["the"], self.vocab["<unk>"],
                                                            self.vocab["chair"]]


class TestCorpus:
    """Test corpus generation and persistence."""

    def test_deterministic(self):
        a = generate_corpus(3, 3, expressions_per_scene=2)
        b = generate_corpus(3, 3, expressions_per_scene=2)
        assert [e.text for e in a.expressions] == [e.text for e in b.expressions]
        assert len(a.samples()) == 6

    def test_split_label(self):
        corpus = generate_corpus(0, 2, split="val")
        assert {e.split for e in corpus.expressions} == {"val"}

    def test_save_and_load(self, tmp_path):
        corpus = generate_corpus(9, 2, expressions_per_scene=2)
        save_corpus(tmp_path / "corpus.json", corpus)
        loaded = load_corpus(tmp_path / "corpus.json")
        assert isinstance(loaded, Corpus)
        assert [e.to_dict() for e in loaded.expressions] == [e.to_dict() for e in corpus.expressions]
        np.testing.assert_array_equal(loaded.scenes[1].points, corpus.scenes[1].points)


class TestMetrics:
    """Test accuracy, mIoU and subset reports."""

    def test_acc_at_iou_with_boxes(self):
        gt = [Box3D([0, 0, 0], [1, 1, 1])] * 2
        preds = [Box3D([0, 0, 0], [1, 1, 1]), Box3D([0, 0, 0], [1, 1, 0.2])]
        assert acc_at_iou(preds, gt, 0.25) == 0.5
        assert acc_at_iou(preds, gt, 0.1) == 1.0

    def test_acc_at_iou_with_masks(self):
        assert acc_at_iou([[1, 1, 0, 0]], [[1, 0, 0, 0]], 0.5) == 1.0
        assert acc_at_iou([], [], 0.5) == 0.0
        with pytest.raises(ShapeError):
            acc_at_iou([[1]], [], 0.5)

    def test_miou(self):
        assert miou([[1, 1, 0], [0, 0, 1]], [[1, 0, 0], [0, 0, 1]]) == pytest.approx(0.75)

    def test_subset_report(self):
        results = [SampleResult(0.6, 0.3, ["unique"]), SampleResult(0.2, 0.6, ["implicit", "multiple"]),
                   SampleResult(0.3, 0.1, ["multiple"])]
        report = subset_report(results)
        assert set(report) == {"overall", "unique", "multiple", "implicit"}
        assert report["overall"]["count"] == 3
        assert report["overall"]["rec_acc@0.25"] == pytest.approx(2 / 3)
        assert report["overall"]["rec_acc@0.50"] == pytest.approx(1 / 3)
        assert report["multiple"]["res_acc@0.50"] == pytest.approx(0.5)
        assert report["implicit"]["miou"] == pytest.approx(0.6)

    def test_empty_subset_is_none(self):
        report = subset_report([SampleResult(1.0, 1.0, ["unique"])])
        assert report["implicit"] is None
        assert subset_report([])["overall"] is None
