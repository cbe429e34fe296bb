"""Tests for the command-line interface."""

import json
from pathlib import Path

import pytest
from click.testing import CliRunner

from crossdiff.cli import cli
from crossdiff.scenes import load_corpus

FIXTURE = Path(__file__).parent / "fixtures" / "implicit_corpus.jsonl"

TINY = ["model.d_model=8", "model.d_sem=8", "model.d2=4", "model.d3=8", "clda.n_clust=4", "clda.k_graph=2",
        "scenes.n_points=32", "scenes.n_objects=2", "train.n_scenes=2", "train.batch_size=1"]


def _args(out, *extra, settings=()):
    args = ["--out", str(out), "--no-colors"]
    for item in TINY + list(settings):
        args += ["--set", item]
    return args + list(extra)


def _run_dir(out, command):
    (path,) = Path(out).glob(f"{command}-*")
    return path


class TestCli:
    """Test the crossdiff commands end to end."""

    def setup_method(self):
        self.runner = CliRunner()

    def test_info(self, tmp_path):
        result = self.runner.invoke(cli, _args(tmp_path, "info"))
        assert result.exit_code == 0
        assert "Total parameters" in result.output
        assert "PLDA formula per direction: 288" in result.output

    def test_show_config(self, tmp_path):
        result = self.runner.invoke(cli, _args(tmp_path, "info", "--show-config"))
        assert result.exit_code == 0
        assert "gradcheck.tol" in result.output

    def test_gradcheck_subset(self, tmp_path):
        result = self.runner.invoke(cli, _args(tmp_path, "gradcheck", "--only", "dice", "--only", "iou",
                                               settings=["gradcheck.seeds=2"]))
        assert result.exit_code == 0
        assert "All 4 checks passed" in result.output
        assert "Gradient check passed: 4 runs" in result.output

    def test_gradcheck_zero_tolerance_fails(self, tmp_path):
        result = self.runner.invoke(cli, _args(tmp_path, "gradcheck", "--only", "kernel",
                                               settings=["gradcheck.seeds=1", "gradcheck.tol=0.0"]))
        assert result.exit_code == 1
        assert "checks failed" in result.output

    def test_gradcheck_json_export(self, tmp_path):
        export = tmp_path / "gradcheck.json"
        result = self.runner.invoke(cli, ["--format", "json"] + _args(
            tmp_path, "gradcheck", "--only", "dice", "--export", str(export), settings=["gradcheck.seeds=1"]))
        assert result.exit_code == 0
        assert json.loads(export.read_text())["checks"][0]["name"] == "dice"

    def test_gen_scenes(self, tmp_path):
        result = self.runner.invoke(cli, _args(tmp_path, "gen-scenes", "--split", "val"))
        assert result.exit_code == 0
        corpus = load_corpus(_run_dir(tmp_path, "gen-scenes") / "corpus.json")
        assert len(corpus.scenes) == 2
        assert {e.split for e in corpus.expressions} == {"val"}

    def test_completed_run_needs_force(self, tmp_path):
        assert self.runner.invoke(cli, _args(tmp_path, "gen-scenes")).exit_code == 0
        again = self.runner.invoke(cli, _args(tmp_path, "gen-scenes"))
        assert again.exit_code == 1
        assert "Error:" in again.output
        forced = self.runner.invoke(cli, ["--force"] + _args(tmp_path, "gen-scenes"))
        assert forced.exit_code == 0

    def test_train_is_deterministic(self, tmp_path):
        summaries, checkpoints, streams = [], [], []
        for name in ("a", "b"):
            result = self.runner.invoke(cli, _args(tmp_path / name, "train", settings=["train.steps=2"]))
            assert result.exit_code == 0, result.output
            run = _run_dir(tmp_path / name, "train")
            assert (run / "checkpoint.pcxd").exists()
            summaries.append(json.loads((run / "summary.json").read_text()))
            checkpoints.append((run / "checkpoint.pcxd").read_bytes())
            streams.append((run / "metrics.jsonl").read_bytes())
        assert checkpoints[0] == checkpoints[1]
        assert streams[0] == streams[1]
        assert len(streams[0].splitlines()) == 2
        assert summaries[0]["final_loss"] == summaries[1]["final_loss"]
        assert summaries[0]["eval"] == summaries[1]["eval"]

    def test_eval_checkpoint(self, tmp_path):
        assert self.runner.invoke(cli, _args(tmp_path, "train", settings=["train.steps=1"])).exit_code == 0
        checkpoint = _run_dir(tmp_path, "train") / "checkpoint.pcxd"
        result = self.runner.invoke(cli, _args(tmp_path, "eval", "--checkpoint", str(checkpoint)))
        assert result.exit_code == 0, result.output
        assert "Evaluation Report" in result.output
        assert (_run_dir(tmp_path, "eval") / "eval.json").exists()

    def test_eval_ground_truth_predictions(self, tmp_path):
        assert self.runner.invoke(cli, _args(tmp_path, "gen-scenes")).exit_code == 0
        corpus_path = _run_dir(tmp_path, "gen-scenes") / "corpus.json"
        corpus = load_corpus(corpus_path)
        preds = [{"box": scene.object(expr.target).box.to_dict(), "mask": scene.target_mask(expr.target).tolist()}
                 for scene, expr in corpus.samples()]
        pred_path = tmp_path / "preds.json"
        pred_path.write_text(json.dumps(preds))
        result = self.runner.invoke(cli, _args(tmp_path, "eval", "--predictions", str(pred_path),
                                               "--corpus", str(corpus_path)))
        assert result.exit_code == 0, result.output
        report = json.loads((_run_dir(tmp_path, "eval") / "eval.json").read_text())
        assert report["subsets"]["overall"]["rec_acc@0.50"] == pytest.approx(1.0)
        assert "rec_acc@0.25=100.00" in result.output

    def test_eval_needs_exactly_one_source(self, tmp_path):
        result = self.runner.invoke(cli, _args(tmp_path, "eval"))
        assert result.exit_code == 1
        assert "exactly one" in result.output

    def test_filter_implicit(self, tmp_path):
        result = self.runner.invoke(cli, _args(tmp_path, "filter-implicit", "--input", str(FIXTURE)))
        assert result.exit_code == 0, result.output
        run = _run_dir(tmp_path, "filter-implicit")
        assert len((run / "subset.jsonl").read_text().splitlines()) == 20
        assert json.loads((run / "summary.json").read_text())["explicit_excluded"] == 15
        assert "Implicit Subset Report" in result.output

    def test_unknown_config_key(self, tmp_path):
        result = self.runner.invoke(cli, _args(tmp_path, "info", settings=["model.depth=3"]))
        assert result.exit_code == 1
        assert "Unknown configuration key" in result.output

    def test_config_file(self, tmp_path):
        config = tmp_path / "run.toml"
        config.write_text("# heads that do not divide the width\n[clda]\nn_heads = 3\n")
        result = self.runner.invoke(cli, ["--config", str(config)] + _args(tmp_path, "info"))
        assert result.exit_code == 1
        assert "model.d_model" in result.output
