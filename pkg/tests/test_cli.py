"""CLI contract: subcommands, exit codes, resolved-config persistence, determinism."""

import json

import numpy as np
import pytest

from tsadapt import distill
from tsadapt.cli import main

SPEC_JSON = {
    "classes": 4,
    "duration": 0.4,
    "sample_rate": 16000,
}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """A small corpus, noise directory, and noisy manifest built through the CLI."""
    root = tmp_path_factory.mktemp("cli")
    spec_path = root / "spec.json"
    spec_path.write_text(json.dumps(SPEC_JSON))
    assert main(["synth", "--spec", str(spec_path), "--count", "10", "--seed", "3",
                 "--out", str(root / "corpus")]) == 0
    assert main(["noise", "--kinds", "pink,band", "--duration", "4", "--seed", "5",
                 "--out", str(root / "noise")]) == 0
    assert main(["pair", "--mode", "noisy", "--in", str(root / "corpus"),
                 "--noise", str(root / "noise"), "--snr", "5:20", "--seed", "7",
                 "--out", str(root / "pairs")]) == 0
    return root


class TestSynth:
    def test_outputs_and_config(self, workspace):
        corpus = workspace / "corpus"
        assert (corpus / "corpus.tsv").exists()
        assert (corpus / "utt00000.wav").exists()
        assert (corpus / "run-config.json").exists()
        resolved = json.loads((corpus / "run-config.json").read_text())
        assert resolved["count"] == 10 and resolved["seed"] == 3

    def test_missing_spec_usage_error(self, capsys):
        with pytest.raises(SystemExit) as e:
            main(["synth", "--count", "1", "--out", "/tmp/x"])
        assert e.value.code == 2

    def test_rerun_byte_identical(self, workspace, tmp_path):
        spec_path = workspace / "spec.json"
        for d in ("a", "b"):
            assert main(["synth", "--spec", str(spec_path), "--count", "3",
                         "--seed", "9", "--out", str(tmp_path / d)]) == 0
        for name in ("utt00000.wav", "utt00000.feat", "utt00002.feat", "corpus.tsv"):
            assert (tmp_path / "a" / name).read_bytes() == \
                (tmp_path / "b" / name).read_bytes()


class TestPair:
    def test_noisy_manifest_written(self, workspace):
        manifest = workspace / "pairs" / "manifest.tsv"
        assert manifest.exists()
        lines = [l for l in manifest.read_text().splitlines() if not l.startswith("#")]
        assert len(lines) == 10

    def test_warped_mode(self, workspace, tmp_path):
        assert main(["pair", "--mode", "warped", "--in", str(workspace / "corpus"),
                     "--alpha", "0.1", "--seed", "0", "--out", str(tmp_path)]) == 0
        lines = [l for l in (tmp_path / "manifest.tsv").read_text().splitlines()
                 if not l.startswith("#")]
        assert len(lines) == 10

    def test_invalid_alpha_is_usage_error(self, workspace, tmp_path):
        with pytest.raises(SystemExit) as e:
            main(["pair", "--mode", "warped", "--in", str(workspace / "corpus"),
                  "--alpha", "1.5", "--out", str(tmp_path)])
        assert e.value.code == 2

    def test_noisy_without_noise_dir(self, workspace, tmp_path):
        with pytest.raises(SystemExit) as e:
            main(["pair", "--mode", "noisy", "--in", str(workspace / "corpus"),
                  "--out", str(tmp_path)])
        assert e.value.code == 2


@pytest.fixture(scope="module")
def trained(workspace, tmp_path_factory):
    root = tmp_path_factory.mktemp("models")
    cfg = root / "cfg.json"
    cfg.write_text(json.dumps({"max_epochs": 2, "lr": 0.02, "batch_frames": 256}))
    assert main(["train", "--mode", "teacher", "--data", str(workspace / "corpus"),
                 "--hidden", "16", "--context", "1", "--seed", "1",
                 "--config", str(cfg), "--out", str(root / "teacher.ckpt")]) == 0
    return root, cfg


class TestTrain:
    def test_teacher_outputs(self, trained):
        root, _ = trained
        assert (root / "teacher.ckpt").exists()
        assert (root / "teacher.report.tsv").exists()
        assert (root / "teacher.ckpt.run.json").exists()
        report = distill.LossReport.load(root / "teacher.report.tsv")
        assert len(report.rows) >= 2

    def test_ts_requires_teacher(self, workspace):
        with pytest.raises(SystemExit) as e:
            main(["train", "--mode", "ts", "--data",
                  str(workspace / "pairs" / "manifest.tsv"), "--out", "/tmp/x.ckpt"])
        assert e.value.code == 2

    def test_ts_and_interp_lambda_one_agree_end_to_end(self, workspace, trained,
                                                       tmp_path):
        root, cfg = trained
        manifest = str(workspace / "pairs" / "manifest.tsv")
        assert main(["train", "--mode", "ts", "--teacher", str(root / "teacher.ckpt"),
                     "--data", manifest, "--config", str(cfg), "--seed", "2",
                     "--out", str(tmp_path / "ts.ckpt")]) == 0
        assert main(["train", "--mode", "interp", "--lambda", "1.0",
                     "--teacher", str(root / "teacher.ckpt"), "--data", manifest,
                     "--config", str(cfg), "--seed", "2",
                     "--out", str(tmp_path / "interp.ckpt")]) == 0
        r_ts = distill.LossReport.load(tmp_path / "ts.report.tsv")
        r_in = distill.LossReport.load(tmp_path / "interp.report.tsv")
        assert abs(r_ts.final_val - r_in.final_val) <= 1e-9

    def test_bad_lambda_usage_error(self, workspace, trained):
        root, _ = trained
        with pytest.raises(SystemExit) as e:
            main(["train", "--mode", "interp", "--lambda", "1.5",
                  "--teacher", str(root / "teacher.ckpt"),
                  "--data", str(workspace / "pairs" / "manifest.tsv"),
                  "--out", "/tmp/x.ckpt"])
        assert e.value.code == 2


class TestEval:
    def test_eval_corpus(self, workspace, trained, tmp_path, capsys):
        root, _ = trained
        out = tmp_path / "res.jsonl"
        assert main(["eval", "--model", str(root / "teacher.ckpt"),
                     "--data", str(workspace / "corpus" / "corpus.tsv"),
                     "--out", str(out)]) == 0
        assert out.exists()
        text = capsys.readouterr().out
        assert "frame error rate" in text

    def test_buckets_and_ref_model(self, workspace, trained, capsys):
        root, _ = trained
        assert main(["eval", "--model", str(root / "teacher.ckpt"),
                     "--data", str(workspace / "pairs" / "manifest.tsv"),
                     "--ref-model", str(root / "teacher.ckpt"), "--buckets"]) == 0
        text = capsys.readouterr().out
        assert "bucket" in text
        assert "mean KL" in text

    def test_bad_checkpoint_path(self, workspace, capsys):
        code = main(["eval", "--model", "/nonexistent/model.ckpt",
                     "--data", str(workspace / "corpus" / "corpus.tsv")])
        assert code == 1
        assert "model.ckpt" in capsys.readouterr().err


class TestPaperSuite:
    def test_smoke_single_seed_marks_insufficient(self, tmp_path, capsys):
        code = main(["paper-suite", "--scenario", "children", "--seeds", "1",
                     "--profile", "smoke", "--out", str(tmp_path)])
        text = capsys.readouterr().out
        assert code == 0
        assert "insufficient seeds" in text
        assert (tmp_path / "run-config.json").exists()

    def test_unknown_scenario_usage_error(self, tmp_path):
        with pytest.raises(SystemExit) as e:
            main(["paper-suite", "--scenario", "bogus", "--out", str(tmp_path)])
        assert e.value.code == 2
