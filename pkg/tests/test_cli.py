"""Command-line contract: exit codes, config precedence, artifact layout,
manifest bookkeeping, and idempotence of re-runs.

A module-scoped pipeline (tiny corpus -> teacher -> gated student) backs the
heavier cases so the expensive training happens once.
"""

import json
import subprocess
import sys

import pytest

from gatedkd import cli
from gatedkd import manifest as MF
from gatedkd import training as T
from gatedkd.errors import NumericError, ValidationError


# ---------------------------------------------------------------------------
# Manifest bookkeeping
# ---------------------------------------------------------------------------


def test_config_hash_ignores_key_order():
    a = {"x": 1, "y": [1, 2]}
    b = {"y": [1, 2], "x": 1}
    assert MF.config_hash(a) == MF.config_hash(b)
    assert MF.config_hash(a) != MF.config_hash({"x": 2, "y": [1, 2]})


def test_manifest_records_hashes_and_merges(tmp_path):
    f1 = tmp_path / "a.txt"
    f1.write_text("alpha")
    f2 = tmp_path / "sub" / "b.txt"
    f2.parent.mkdir()
    f2.write_text("beta")
    path = str(tmp_path / "manifest.json")

    MF.update_manifest(path, "exp", {"a": str(f1)}, {"cfg": {"k": 1}})
    MF.update_manifest(path, "exp", {"b": str(f2)})
    m = MF.load_manifest(path)
    assert set(m["artifacts"]) == {"a", "b"}
    assert m["artifacts"]["a"]["path"] == "a.txt"  # stored relative to the manifest
    assert m["artifacts"]["a"]["sha256"] == MF.file_sha256(str(f1))
    assert m["configs"]["cfg"]["hash"] == MF.config_hash({"k": 1})
    assert m["experiment"] == "exp"


def test_manifest_rewrite_is_byte_identical(tmp_path):
    f1 = tmp_path / "a.txt"
    f1.write_text("alpha")
    path = tmp_path / "manifest.json"
    MF.update_manifest(str(path), "exp", {"a": str(f1)})
    first = path.read_bytes()
    MF.update_manifest(str(path), "exp", {"a": str(f1)})
    assert path.read_bytes() == first


def test_verify_manifest_detects_tampering(tmp_path):
    f1 = tmp_path / "a.txt"
    f1.write_text("alpha")
    path = str(tmp_path / "manifest.json")
    MF.update_manifest(path, "exp", {"a": str(f1)})
    assert MF.verify_manifest(path) == {"a": True}
    f1.write_text("tampered")
    assert MF.verify_manifest(path) == {"a": False}
    f1.unlink()
    assert MF.verify_manifest(path) == {"a": False}


def test_manifest_rejects_garbage(tmp_path):
    bad = tmp_path / "manifest.json"
    bad.write_text("{not json")
    with pytest.raises(ValidationError):
        MF.load_manifest(str(bad))
    bad.write_text(json.dumps({"format_version": 99}))
    with pytest.raises(ValidationError, match="version"):
        MF.load_manifest(str(bad))


# ---------------------------------------------------------------------------
# Exit codes and usage errors (no training involved)
# ---------------------------------------------------------------------------


def test_missing_required_flag_is_usage_error(capsys):
    assert cli.main(["gen-corpus", "--out", "/tmp/x"]) == cli.EXIT_USAGE
    assert "--pairs" in capsys.readouterr().err


def test_out_of_range_ambiguity_is_usage_error(tmp_path, capsys):
    rc = cli.main(["gen-corpus", "--pairs", "20", "--ambiguity", "1.5",
                   "--out", str(tmp_path)])
    assert rc == cli.EXIT_USAGE
    assert "p_amb" in capsys.readouterr().err


def test_unknown_loss_mode_is_usage_error(capsys):
    rc = cli.main(["train-student", "--loss", "mse", "--corpus", "x", "--out", "y"])
    assert rc == cli.EXIT_USAGE


def test_missing_corpus_directory_is_io_error(tmp_path, capsys):
    rc = cli.main(["train-teacher", "--corpus", str(tmp_path / "nope"),
                   "--out", str(tmp_path / "o")])
    assert rc == cli.EXIT_IO
    assert "i/o failure" in capsys.readouterr().err


def test_missing_checkpoint_is_io_error(tmp_path, corpus_dir, capsys):
    rc = cli.main(["evaluate", "--corpus", corpus_dir,
                   "--checkpoint", str(tmp_path / "nope.ckpt"),
                   "--out", str(tmp_path / "o")])
    assert rc == cli.EXIT_IO
    assert "i/o failure" in capsys.readouterr().err


def test_numeric_failure_maps_to_exit_two(tmp_path, monkeypatch, corpus_dir, capsys):
    def boom(*a, **k):
        raise NumericError("synthetic divergence")
    monkeypatch.setattr(T, "train", boom)
    rc = cli.main(["train-student", "--loss", "ce", "--corpus", corpus_dir,
                   "--out", str(tmp_path / "o")])
    assert rc == cli.EXIT_NUMERIC
    assert "synthetic divergence" in capsys.readouterr().err


def test_help_exits_zero():
    with pytest.raises(SystemExit) as exc:
        cli.main(["--help"])
    assert exc.value.code == 0


def test_module_entry_point_propagates_exit_code():
    proc = subprocess.run(
        [sys.executable, "-m", "gatedkd.cli", "gen-corpus", "--pairs", "20",
         "--ambiguity", "2.0", "--out", "/tmp/gatedkd_cli_entry"],
        capture_output=True, text=True,
    )
    assert proc.returncode == cli.EXIT_USAGE
    assert "error:" in proc.stderr


# ---------------------------------------------------------------------------
# Pipeline fixtures
# ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    return tmp_path_factory.mktemp("pipeline")


@pytest.fixture(scope="module")
def corpus_dir(workdir):
    out = str(workdir / "data")
    rc = cli.main(["gen-corpus", "--pairs", "60", "--ambiguity", "0.8",
                   "--source-vocab", "6", "--target-vocab", "6",
                   "--min-len", "2", "--max-len", "5", "--seed", "0", "--out", out])
    assert rc == cli.EXIT_OK
    return out


@pytest.fixture(scope="module")
def teacher_ckpt(workdir, corpus_dir):
    out = workdir / "teacher"
    rc = cli.main(["train-teacher", "--corpus", corpus_dir, "--out", str(out),
                   "--epochs", "3", "--embed-dim", "16", "--ffn-dim", "24",
                   "--warmup", "4", "--seed", "1", "--max-tokens", "48"])
    assert rc == cli.EXIT_OK
    return str(out / "teacher.ckpt")


@pytest.fixture(scope="module")
def student_dir(workdir, corpus_dir, teacher_ckpt):
    out = workdir / "student"
    rc = cli.main(["train-student", "--loss", "hkd_token", "--teacher", teacher_ckpt,
                   "--corpus", corpus_dir, "--out", str(out), "--epochs", "2",
                   "--embed-dim", "16", "--ffn-dim", "24", "--warmup", "4",
                   "--seed", "2", "--max-tokens", "48"])
    assert rc == cli.EXIT_OK
    return out


# ---------------------------------------------------------------------------
# Pipeline behavior
# ---------------------------------------------------------------------------


def test_gen_corpus_layout_and_determinism(workdir, corpus_dir):
    for name in ("train.src", "train.tgt", "valid.src", "valid.tgt",
                 "test.src", "test.tgt", "vocab.json", "meta.json", "manifest.json"):
        assert (workdir / "data" / name).exists()
    again = workdir / "data_again"
    rc = cli.main(["gen-corpus", "--pairs", "60", "--ambiguity", "0.8",
                   "--source-vocab", "6", "--target-vocab", "6",
                   "--min-len", "2", "--max-len", "5", "--seed", "0", "--out", str(again)])
    assert rc == cli.EXIT_OK
    for name in ("train.src", "train.tgt", "vocab.json"):
        assert (again / name).read_bytes() == (workdir / "data" / name).read_bytes()


def test_gen_corpus_default_grammar(tmp_path):
    rc = cli.main(["gen-corpus", "--pairs", "20", "--seed", "3", "--out", str(tmp_path / "d")])
    assert rc == cli.EXIT_OK
    meta = json.loads((tmp_path / "d" / "meta.json").read_text())
    assert meta["grammar"]["p_amb"] == cli.GRAMMAR_DEFAULTS["p_amb"]
    assert meta["grammar"]["source_vocab_size"] == 50


def test_config_file_with_flag_overrides(workdir, corpus_dir):
    cfg = workdir / "override.json"
    cfg.write_text(json.dumps({"epochs": 7, "seed": 9, "embed_dim": 16, "ffn_dim": 24,
                               "warmup_steps": 4, "max_tokens": 48}))
    out = workdir / "override_run"
    rc = cli.main(["train-student", "--loss", "ce", "--corpus", corpus_dir,
                   "--out", str(out), "--config", str(cfg), "--epochs", "1"])
    assert rc == cli.EXIT_OK
    saved = json.loads((out / "student_epochs.json").read_text())
    assert saved["config"]["epochs"] == 1      # flag beats file
    assert saved["config"]["seed"] == 9        # file beats default
    assert len(saved["epochs"]) == 1


def test_kd_mode_without_teacher_fails_before_compute(corpus_dir, tmp_path, capsys):
    rc = cli.main(["train-student", "--loss", "hkd_token", "--corpus", corpus_dir,
                   "--out", str(tmp_path / "o")])
    assert rc == cli.EXIT_USAGE
    assert "--teacher" in capsys.readouterr().err
    assert not (tmp_path / "o").exists()  # nothing was trained or written


def test_ce_mode_warns_when_teacher_flags_given(corpus_dir, tmp_path, capsys):
    rc = cli.main(["train-student", "--loss", "ce", "--corpus", corpus_dir,
                   "--out", str(tmp_path / "o"), "--epochs", "1", "--embed-dim", "16",
                   "--ffn-dim", "24", "--warmup", "4", "--max-tokens", "48",
                   "--teacher-temp", "2.0"])
    assert rc == cli.EXIT_OK
    assert "ignoring" in capsys.readouterr().err


def test_student_reuses_teacher_fitted_temperature(student_dir, teacher_ckpt):
    from gatedkd.model import load_checkpoint

    _, teacher_extra = load_checkpoint(teacher_ckpt)
    _, student_extra = load_checkpoint(str(student_dir / "student.ckpt"))
    assert student_extra["teacher_temperature"] == teacher_extra["temperature"]


def test_student_logs_gate_trajectory(student_dir):
    steps = T.read_steps_csv(str(student_dir / "student_steps.csv"))
    assert steps and all(s.mode == "hkd_token" for s in steps)
    assert all(s.alpha_mean_token is not None for s in steps)


def test_calibrate_writes_summary(workdir, corpus_dir, student_dir):
    out = workdir / "calib"
    rc = cli.main(["calibrate", "--checkpoint", str(student_dir / "student.ckpt"),
                   "--corpus", corpus_dir, "--out", str(out), "--bins", "5",
                   "--grid", "0.8,1.0,2.0"])
    assert rc == cli.EXIT_OK
    payload = json.loads((out / "calibration.json").read_text())
    assert payload["best_temperature"] in (0.8, 1.0, 2.0)
    assert set(payload["nll_by_temperature"]) == {"0.8", "1.0", "2.0"}
    assert payload["split"] == "valid"
    assert 0.0 <= payload["ece_at_1"] <= 1.0


def test_evaluate_artifacts_and_idempotence(workdir, corpus_dir, student_dir):
    out = workdir / "eval"
    argv = ["evaluate", "--checkpoint", str(student_dir / "student.ckpt"),
            "--corpus", corpus_dir, "--out", str(out), "--bins", "5"]
    assert cli.main(argv) == cli.EXIT_OK
    first = (out / "metrics.json").read_bytes()
    assert cli.main(argv) == cli.EXIT_OK
    assert (out / "metrics.json").read_bytes() == first

    reliability = (out / "reliability.csv").read_text().splitlines()
    assert len(reliability) == 1 + 5  # header + one row per bin


def test_report_adds_alpha_trajectory(workdir, corpus_dir, student_dir):
    out = workdir / "report"
    rc = cli.main(["report", "--checkpoint", str(student_dir / "student.ckpt"),
                   "--corpus", corpus_dir, "--out", str(out), "--bins", "5",
                   "--runlog", str(student_dir / "student_steps.csv")])
    assert rc == cli.EXIT_OK
    lines = (out / "alpha_trajectory.csv").read_text().splitlines()
    assert lines[0] == "step,alpha_mean_token,alpha_mean_sentence"
    steps = T.read_steps_csv(str(student_dir / "student_steps.csv"))
    assert len(lines) == 1 + len(steps)  # every gated step appears


def test_shared_manifest_accumulates_stages(workdir, corpus_dir, teacher_ckpt, student_dir):
    """One manifest passed across commands indexes the whole experiment."""
    path = str(workdir / "experiment_manifest.json")
    out = workdir / "mf_eval"
    rc = cli.main(["evaluate", "--checkpoint", str(student_dir / "student.ckpt"),
                   "--corpus", corpus_dir, "--out", str(out), "--bins", "5",
                   "--manifest", path, "--name", "demo"])
    assert rc == cli.EXIT_OK
    rc = cli.main(["report", "--checkpoint", str(student_dir / "student.ckpt"),
                   "--corpus", corpus_dir, "--out", str(out), "--bins", "5",
                   "--manifest", path, "--name", "demo",
                   "--runlog", str(student_dir / "student_steps.csv")])
    assert rc == cli.EXIT_OK
    m = MF.load_manifest(path)
    assert m["experiment"] == "demo"
    assert "report:metrics" in m["artifacts"] and "report:alpha_trajectory" in m["artifacts"]
    assert all(MF.verify_manifest(path).values())
