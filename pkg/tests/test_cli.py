import json

import numpy as np
import pytest
from click.testing import CliRunner
from PIL import Image

from razemeter.cli import main


@pytest.fixture(scope="module")
def runner():
    return CliRunner()


@pytest.fixture(scope="module")
def synth_dir(tmp_path_factory, runner):
    out = tmp_path_factory.mktemp("cli_synth")
    result = runner.invoke(main, [
        "--seed", "7", "synth", "--disasters", "2", "--size", "320",
        "--buildings", "15", "--train-patches", "5", "-o", str(out),
    ])
    assert result.exit_code == 0, result.output
    return out


@pytest.fixture(scope="module")
def tiny_checkpoint(tmp_path_factory, runner, synth_dir):
    path = tmp_path_factory.mktemp("cli_model") / "model.sgnt"
    result = runner.invoke(main, [
        "train", "--data", str(synth_dir / "patches"), "-o", str(path),
        "--epochs", "1", "--batch-size", "2", "--channels", "2,4,6",
    ])
    assert result.exit_code == 0, result.output
    return path


class TestTopLevel:
    def test_help(self, runner):
        result = runner.invoke(main, ["--help"])
        assert result.exit_code == 0
        assert "pipeline" in result.output

    def test_unknown_command(self, runner):
        result = runner.invoke(main, ["frobnicate"])
        assert result.exit_code == 2

    def test_threads_env_fallback(self, runner, monkeypatch):
        monkeypatch.setenv("RAZEMETER_THREADS", "3")
        result = runner.invoke(main, ["--help"])
        assert result.exit_code == 0


class TestSynth:
    def test_outputs(self, synth_dir):
        assert (synth_dir / "manifest.json").exists()
        assert (synth_dir / "truth.json").exists()
        assert (synth_dir / "d000_before.png").exists()
        assert (synth_dir / "patches" / "img_0004.png").exists()
        assert (synth_dir / "patches" / "lab_0004.png").exists()

    def test_zero_disasters_is_usage_error(self, runner, tmp_path):
        result = runner.invoke(main, ["synth", "--disasters", "0",
                                      "-o", str(tmp_path / "x")])
        assert result.exit_code == 2

    def test_determinism_byte_identical(self, runner, tmp_path):
        outs = []
        for name in ("a", "b"):
            out = tmp_path / name
            result = runner.invoke(main, [
                "--seed", "3", "synth", "--disasters", "1", "--size", "320",
                "--buildings", "10", "-o", str(out),
            ])
            assert result.exit_code == 0
            outs.append(out)
        for fname in ("d000_before.png", "d000_after.png", "truth.json"):
            assert (outs[0] / fname).read_bytes() == (outs[1] / fname).read_bytes()


class TestTrain:
    def test_checkpoint_and_metrics_written(self, tiny_checkpoint):
        assert tiny_checkpoint.exists()
        metrics_path = tiny_checkpoint.with_suffix(".metrics.json")
        metrics = json.loads(metrics_path.read_text())
        assert len(metrics) == 1
        assert "pixel_accuracy" in metrics[0]

    def test_epochs_zero_still_writes_checkpoint(self, runner, synth_dir, tmp_path):
        path = tmp_path / "zero.sgnt"
        result = runner.invoke(main, [
            "train", "--data", str(synth_dir / "patches"), "-o", str(path),
            "--epochs", "0", "--channels", "2,4,6",
        ])
        assert result.exit_code == 0, result.output
        assert path.exists()
        assert json.loads(path.with_suffix(".metrics.json").read_text()) == []

    def test_empty_data_dir_is_usage_error(self, runner, tmp_path):
        empty = tmp_path / "empty"
        empty.mkdir()
        result = runner.invoke(main, ["train", "--data", str(empty),
                                      "-o", str(tmp_path / "m.sgnt")])
        assert result.exit_code == 2

    def test_all_malformed_pairs_fail(self, runner, tmp_path):
        bad = tmp_path / "bad"
        bad.mkdir()
        (bad / "img_0000.png").write_bytes(b"not a png")
        result = runner.invoke(main, ["train", "--data", str(bad),
                                      "-o", str(tmp_path / "m.sgnt")])
        assert result.exit_code == 1
        assert "warning: skipping" in result.output

    def test_malformed_pair_skipped(self, runner, synth_dir, tmp_path):
        import shutil
        data = tmp_path / "mixed"
        shutil.copytree(synth_dir / "patches", data)
        (data / "img_0000.png").write_bytes(b"junk")
        result = runner.invoke(main, [
            "train", "--data", str(data), "-o", str(tmp_path / "m.sgnt"),
            "--epochs", "0", "--channels", "2,4,6",
        ])
        assert result.exit_code == 0, result.output

    def test_bad_channels_rejected(self, runner, synth_dir, tmp_path):
        result = runner.invoke(main, [
            "train", "--data", str(synth_dir / "patches"),
            "-o", str(tmp_path / "m.sgnt"), "--channels", "8,spam",
        ])
        assert result.exit_code == 2


class TestSegmentAndRegister:
    def test_segment_writes_label_map(self, runner, synth_dir, tiny_checkpoint,
                                      tmp_path):
        out = tmp_path / "labels.png"
        mask = tmp_path / "mask.png"
        result = runner.invoke(main, [
            "segment", "--model", str(tiny_checkpoint),
            "--in", str(synth_dir / "d000_before.png"),
            "--out", str(out), "--mask", str(mask),
        ])
        assert result.exit_code == 0, result.output
        labels = np.asarray(Image.open(out))
        assert labels.shape == (320, 320)
        assert labels.max() < 6
        m = np.asarray(Image.open(mask))
        assert set(np.unique(m)) <= {0, 255}

    def test_register_prints_shift(self, runner, synth_dir):
        result = runner.invoke(main, [
            "register", "--before", str(synth_dir / "d000_before.png"),
            "--after", str(synth_dir / "d000_after.png"),
        ])
        assert result.exit_code == 0, result.output
        assert result.output.startswith("shift dx=")
        assert "pairs=" in result.output

    def test_register_missing_file(self, runner, tmp_path):
        result = runner.invoke(main, [
            "register", "--before", str(tmp_path / "nope.png"),
            "--after", str(tmp_path / "nope.png"),
        ])
        assert result.exit_code == 2  # click Path(exists=True)

    def test_match_hist_writes_tile(self, runner, synth_dir, tmp_path):
        out = tmp_path / "matched.png"
        result = runner.invoke(main, [
            "match-hist", "--before", str(synth_dir / "d000_before.png"),
            "--after", str(synth_dir / "d000_after.png"), "--out", str(out),
        ])
        assert result.exit_code == 0, result.output
        assert np.asarray(Image.open(out)).shape == (320, 320, 3)


class TestPipeline:
    def test_requires_model_or_truth(self, runner, synth_dir, tmp_path):
        result = runner.invoke(main, [
            "pipeline", "--manifest", str(synth_dir / "manifest.json"),
            "-o", str(tmp_path / "rep"),
        ])
        assert result.exit_code == 2

    def test_truth_label_run(self, runner, synth_dir, tmp_path):
        out = tmp_path / "rep"
        result = runner.invoke(main, [
            "pipeline", "--manifest", str(synth_dir / "manifest.json"),
            "-o", str(out), "--use-truth-labels",
        ])
        assert result.exit_code == 0, result.output
        csv_text = (out / "report.csv").read_text()
        assert csv_text.splitlines()[0].startswith("disaster_id,")
        assert len(csv_text.splitlines()) == 3
        doc = json.loads((out / "report.json").read_text())
        assert doc["complete"] is True

    def test_broken_manifest_paths_exit_one(self, runner, synth_dir, tmp_path):
        manifest = json.loads((synth_dir / "manifest.json").read_text())
        manifest["disasters"][0]["before"] = str(tmp_path / "gone.png")
        bad = tmp_path / "manifest.json"
        bad.write_text(json.dumps(manifest))
        result = runner.invoke(main, [
            "pipeline", "--manifest", str(bad), "-o", str(tmp_path / "rep"),
            "--use-truth-labels",
        ])
        assert result.exit_code == 1
        assert "failed at load" in result.output

    def test_garbage_manifest_is_usage_error(self, runner, tmp_path):
        bad = tmp_path / "manifest.json"
        bad.write_text("{]")
        result = runner.invoke(main, [
            "pipeline", "--manifest", str(bad), "-o", str(tmp_path / "rep"),
            "--use-truth-labels",
        ])
        assert result.exit_code == 2


class TestReport:
    def test_rebuild_from_counts(self, runner, synth_dir, tmp_path):
        truth = json.loads((synth_dir / "truth.json").read_text())
        counts = {d: [t["counts"]["before"], t["counts"]["after"]]
                  for d, t in truth.items()}
        counts_path = tmp_path / "counts.json"
        counts_path.write_text(json.dumps(counts))
        out = tmp_path / "rep"
        result = runner.invoke(main, [
            "report", "--manifest", str(synth_dir / "manifest.json"),
            "--counts", str(counts_path), "-o", str(out),
        ])
        assert result.exit_code == 0, result.output
        lines = (out / "report.csv").read_text().splitlines()
        assert len(lines) == 1 + len(counts)

    def test_missing_counts_entry_fails(self, runner, synth_dir, tmp_path):
        counts_path = tmp_path / "counts.json"
        counts_path.write_text("{}")
        result = runner.invoke(main, [
            "report", "--manifest", str(synth_dir / "manifest.json"),
            "--counts", str(counts_path), "-o", str(tmp_path / "rep"),
        ])
        assert result.exit_code == 1
