"""Tests for the gradient-check matrix."""

import pytest

from crossdiff.checks import CHECKS, CheckResult, run_checks


class TestChecks:
    """Test every check on a couple of seeds."""

    @pytest.mark.parametrize("name", sorted(set(CHECKS) - {"model"}))
    def test_check_passes(self, name):
        for seed in range(2):
            report = CHECKS[name](seed, 1e-5, 1e-4)
            assert report.passed, f"{name} seed {seed}: {report.failures()}"

    def test_model_check_passes(self):
        report = CHECKS["model"](0, 1e-5, 1e-4)
        assert report.passed, report.failures()

    def test_zero_tolerance_fails(self):
        results = run_checks(1, 1e-5, 0.0, only=["kernel"])
        assert len(results) == 1
        assert not results[0].passed
        assert results[0].failures

    def test_only_filter(self):
        results = run_checks(3, 1e-5, 1e-4, only=["dice", "iou"])
        assert [(r.name, r.seed) for r in results] == [("dice", 0), ("dice", 1), ("dice", 2),
                                                        ("iou", 0), ("iou", 1), ("iou", 2)]

    def test_unknown_check(self):
        with pytest.raises(ValueError):
            run_checks(1, 1e-5, 1e-4, only=["softmax"])

    def test_result_dict(self):
        result = CheckResult("dice", 4, True, 1e-9, [])
        assert result.to_dict() == {"name": "dice", "seed": 4, "passed": True, "max_error": 1e-9,
                                    "failures": []}
