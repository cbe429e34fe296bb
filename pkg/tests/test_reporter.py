"""Tests for report formatting."""

import json

import pytest

from crossdiff.reporter import RunReporter


def _subsets():
    metrics = {"count": 4, "rec_acc@0.25": 0.75, "rec_acc@0.50": 0.5, "res_acc@0.25": 1.0,
               "res_acc@0.50": 0.25, "miou": 0.6}
    return {"overall": metrics, "unique": metrics, "multiple": None, "implicit": None}


class TestRunReporter:
    """Test cases for RunReporter."""

    def setup_method(self):
        self.reporter = RunReporter(use_colors=False)

    def test_gradcheck_report(self):
        result = {"kind": "gradcheck", "step": 1e-5, "tol": 1e-4, "checks": [
            {"name": "dice", "seed": 0, "passed": True, "max_error": 1e-9, "failures": []},
            {"name": "iou", "seed": 0, "passed": False, "max_error": 0.3, "failures": ["pred"]},
        ]}
        report = self.reporter.generate_report(result)
        assert "Gradient Check Report" in report
        assert "FAIL" in report
        assert "seed 0: pred" in report
        assert "1 of 2 checks failed" in report

    def test_eval_report(self):
        report = self.reporter.generate_report({"kind": "eval", "samples": 4, "subsets": _subsets()})
        assert "Samples: 4" in report
        assert "75.00" in report
        assert "n/a" in report

    def test_ablation_report(self):
        result = {"kind": "ablation", "grid": "components", "seeds": 2, "steps": 10, "variants": [
            {"name": "full", "overall": _subsets()["overall"]}, {"name": "no-CLDA", "overall": None}],
            "orderings": [{"description": "full >= no-CLDA", "holds": False}]}
        report = self.reporter.generate_report(result)
        assert "Ablation Report (components)" in report
        assert "no-CLDA" in report
        assert "full >= no-CLDA" in report

    def test_implicit_report(self):
        summary = {"input": 50, "explicit_excluded": 15, "rule_accepted": 20, "llm_accepted": 1,
                   "subset": 21, "flagged": 1, "splits": {"train": 15}, "categories": {"physical": 7}}
        report = self.reporter.generate_report({"kind": "implicit", "summary": summary})
        assert "Explicit (excluded): 15" in report
        assert "Accepted by LLM: 1" in report
        assert "1 records flagged for manual review" in report

    def test_json_report(self):
        report = json.loads(self.reporter.generate_report({"kind": "eval", "samples": 1}, "json"))
        assert report["kind"] == "eval"
        assert "timestamp" in report

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            self.reporter.generate_report({"kind": "histogram"})

    def test_colors_disabled(self):
        assert all(value == '' for value in self.reporter.colors.values())
        assert RunReporter(use_colors=True).colors['fail'] != ''

    def test_export_to_file(self, tmp_path):
        path = tmp_path / "report.json"
        self.reporter.export_to_file({"kind": "eval", "samples": 2}, str(path), "json")
        assert json.loads(path.read_text())["samples"] == 2

    def test_print_summary(self, capsys):
        self.reporter.print_summary({"kind": "eval", "subsets": _subsets()})
        assert "rec_acc@0.25=75.00" in capsys.readouterr().out
