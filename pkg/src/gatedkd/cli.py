"""Command-line pipeline: corpus generation, teacher/student training,
calibration, evaluation, and report bundling.

Every command funnels randomness through ``--seed``, reads nothing from the
environment, and records what it wrote into a shared experiment manifest.
Settings come from an optional ``--config`` JSON file with flags overriding
it (flags win), so a sweep is one file plus a handful of overrides.

Exit codes are a stable scripting contract: 0 success, 1 usage/validation
problems, 2 numeric failures (diverged loss, non-finite gradients),
3 filesystem/I-O failures.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from gatedkd import calibration as C
from gatedkd import data as D
from gatedkd import evaluation as E
from gatedkd import losses as L
from gatedkd import model as M
from gatedkd import training as T
from gatedkd.errors import CheckpointError, ConfigError, NumericError, ValidationError
from gatedkd.manifest import update_manifest

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_NUMERIC = 2
EXIT_IO = 3


class _Parser(argparse.ArgumentParser):
    """argparse that raises instead of exiting, so main() owns the exit code."""

    def error(self, message):
        raise ValidationError(message)


def _warn(message: str) -> None:
    print(f"warning: {message}", file=sys.stderr)


def _load_json(path: str) -> dict:
    with open(path, encoding="utf-8") as fh:
        try:
            payload = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ValidationError(f"{path} is not valid JSON: {exc}") from exc
    if not isinstance(payload, dict):
        raise ValidationError(f"{path} must hold a JSON object")
    return payload


def _merged(config_path: str | None, overrides: dict) -> dict:
    base = _load_json(config_path) if config_path else {}
    base.update({k: v for k, v in overrides.items() if v is not None})
    return base


def _parse_temperature(text: str) -> float | str:
    if text == "fit":
        return "fit"
    try:
        return float(text)
    except ValueError:
        raise ValidationError(f"--teacher-temp must be a number or 'fit', got {text!r}") from None


def _manifest_path(args) -> str:
    return args.manifest or os.path.join(args.out, "manifest.json")


# ---------------------------------------------------------------------------
# gen-corpus
# ---------------------------------------------------------------------------


GRAMMAR_DEFAULTS = {"source_vocab_size": 50, "target_vocab_size": 50, "p_amb": 0.7,
                    "min_len": 4, "max_len": 12, "noise_seed": 0}


def cmd_gen_corpus(args) -> int:
    overrides = {
        "source_vocab_size": args.source_vocab,
        "target_vocab_size": args.target_vocab,
        "p_amb": args.ambiguity,
        "min_len": args.min_len,
        "max_len": args.max_len,
        "noise_seed": args.noise_seed,
    }
    merged = _merged(args.config, overrides)
    for key, value in GRAMMAR_DEFAULTS.items():
        merged.setdefault(key, value)
    grammar = D.ToyGrammar.from_json(merged)
    corpus = D.generate_corpus(grammar, args.pairs, args.seed)
    written = D.save_corpus(corpus, args.out)
    artifacts = {f"corpus:{os.path.basename(p)}": p for p in written}
    update_manifest(_manifest_path(args), args.name, artifacts, {
        "grammar": grammar.to_json(),
        "generation": {"pairs": args.pairs, "seed": args.seed},
    })
    print(f"corpus: {len(corpus.train)}/{len(corpus.valid)}/{len(corpus.test)} pairs "
          f"(train/valid/test), vocabulary {len(corpus.vocabulary)} tokens -> {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# training commands
# ---------------------------------------------------------------------------


def _train_config(args, allowed_modes, default_mode: str) -> T.TrainConfig:
    overrides = {
        "loss_mode": args.loss,
        "epochs": args.epochs,
        "seed": args.seed,
        "max_tokens": args.max_tokens,
        "peak_lr": args.lr,
        "warmup_steps": args.warmup,
        "ls_epsilon": args.ls_epsilon,
        "embed_dim": args.embed_dim,
        "ffn_dim": args.ffn_dim,
        "num_layers": args.layers,
        "dropout": args.dropout,
        "num_bins": args.bins,
    }
    if hasattr(args, "alpha"):
        overrides["soft_kd_alpha"] = args.alpha
        overrides["soft_kd_tau"] = args.tau
        overrides["force_gate"] = args.force_gate
    if args.teacher_temp is not None:
        overrides["teacher_temperature"] = _parse_temperature(args.teacher_temp)
    merged = _merged(args.config, overrides)
    merged.setdefault("loss_mode", default_mode)
    config = T.TrainConfig.from_json(merged)
    if config.loss_mode not in allowed_modes:
        raise ConfigError(f"this command accepts loss modes {allowed_modes}, not {config.loss_mode!r}")
    return config


def _write_run(out_dir: str, stem: str, result: T.TrainResult, corpus, extra: dict) -> dict[str, str]:
    os.makedirs(out_dir, exist_ok=True)
    ckpt = os.path.join(out_dir, f"{stem}.ckpt")
    steps = os.path.join(out_dir, f"{stem}_steps.csv")
    epochs = os.path.join(out_dir, f"{stem}_epochs.json")
    payload = {"vocab_sha256": corpus.vocabulary.sha256(),
               "best_epoch": result.best_epoch,
               "best_valid_nll": result.best_valid_nll}
    payload.update(extra)
    M.save_checkpoint(ckpt, result.params, extra=payload)
    result.runlog.write_steps_csv(steps)
    result.runlog.write_epochs_json(epochs)
    return {f"{stem}:checkpoint": ckpt, f"{stem}:steps_csv": steps, f"{stem}:epochs_json": epochs}


def cmd_train_teacher(args) -> int:
    corpus = D.load_corpus(args.corpus)
    config = _train_config(args, T.TEACHER_MODES, default_mode="ls_uniform")
    handle, result = T.build_teacher(config, corpus)
    artifacts = _write_run(args.out, "teacher", result, corpus, {
        "temperature": handle.temperature,
        "train_config": config.to_json(),
    })
    update_manifest(_manifest_path(args), args.name, artifacts, {"teacher_config": config.to_json()})
    print(f"teacher: best epoch {result.best_epoch}, validation NLL {result.best_valid_nll:.6f}, "
          f"read-out temperature {handle.temperature}")
    return EXIT_OK


def _load_teacher(args, config: T.TrainConfig, corpus) -> L.TeacherHandle:
    params, extra = M.load_checkpoint(args.teacher)
    stamp = extra.get("vocab_sha256")
    if stamp is not None and stamp != corpus.vocabulary.sha256():
        raise CheckpointError(f"{args.teacher} was trained on a different vocabulary than {args.corpus}")
    setting = config.teacher_temperature
    if setting == "fit" and "temperature" in extra:
        # the teacher already carries the temperature fitted at build time
        return L.TeacherHandle(params=params, temperature=float(extra["temperature"]))
    valid_batches, _ = D.make_batches(corpus.valid, corpus.vocabulary, config.max_tokens, shuffle=False)
    return L.TeacherHandle(
        params=params,
        temperature=T.resolve_teacher_temperature(setting, params, valid_batches),
    )


def cmd_train_student(args) -> int:
    corpus = D.load_corpus(args.corpus)
    config = _train_config(args, T.LOSS_MODES, default_mode="ce")
    teacher = None
    if config.loss_mode in T.KD_MODES:
        if not args.teacher:
            raise ValidationError(f"--teacher is required for loss mode {config.loss_mode!r}")
        teacher = _load_teacher(args, config, corpus)
    elif args.teacher or args.teacher_temp:
        _warn(f"loss mode {config.loss_mode!r} uses neither --teacher nor --teacher-temp; ignoring them")

    result = T.train(config, corpus, teacher=teacher)
    extra = {"train_config": config.to_json()}
    if teacher is not None:
        extra["teacher_temperature"] = teacher.temperature
    artifacts = _write_run(args.out, "student", result, corpus, extra)
    update_manifest(_manifest_path(args), args.name, artifacts, {"student_config": config.to_json()})
    tail = f", teacher temperature {teacher.temperature}" if teacher is not None else ""
    print(f"student[{config.loss_mode}]: best epoch {result.best_epoch}, "
          f"validation NLL {result.best_valid_nll:.6f}{tail}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# calibrate / evaluate / report
# ---------------------------------------------------------------------------


def _parse_grid(text: str | None):
    if text is None:
        return C.DEFAULT_GRID
    try:
        grid = tuple(float(x) for x in text.split(","))
    except ValueError:
        raise ValidationError(f"--grid must be comma-separated numbers, got {text!r}") from None
    return grid


def cmd_calibrate(args) -> int:
    params, extra = M.load_checkpoint(args.checkpoint)
    corpus = D.load_corpus(args.corpus)
    if params.config.vocab_size != len(corpus.vocabulary):
        raise CheckpointError(f"{args.checkpoint} vocabulary size {params.config.vocab_size} "
                              f"does not match the corpus ({len(corpus.vocabulary)})")
    stamp = extra.get("vocab_sha256")
    if stamp is not None and stamp != corpus.vocabulary.sha256():
        raise CheckpointError(f"{args.checkpoint} was trained on a different vocabulary than {args.corpus}")
    pairs = corpus.split(args.split)
    if not pairs:
        raise ValidationError(f"the {args.split!r} split is empty")
    batches, _ = D.make_batches(pairs, corpus.vocabulary, args.max_tokens, shuffle=False)
    best, nll_by_t = C.fit_temperature(params, batches, _parse_grid(args.grid))

    payload = {"best_temperature": best, "split": args.split, "num_bins": args.bins,
               "nll_by_temperature": {repr(t): v for t, v in nll_by_t.items()}}
    for label, temperature in (("at_1", 1.0), ("at_best", best)):
        records = C.collect_next_token_records(params, batches, temperature)
        bins = C.bin_predictions(records, args.bins)
        payload[f"ece_{label}"] = C.ece(bins)
        payload[f"mce_{label}"] = C.mce(bins)
        payload["num_records"] = len(records)

    os.makedirs(args.out, exist_ok=True)
    out_path = os.path.join(args.out, "calibration.json")
    with open(out_path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True, indent=2)
        fh.write("\n")
    update_manifest(_manifest_path(args), args.name, {"calibration:summary": out_path})
    print(f"calibration: best temperature {best} on {args.split} "
          f"(ECE {payload['ece_at_1']:.4f} at 1.0 -> {payload['ece_at_best']:.4f} at best)")
    return EXIT_OK


def _run_evaluation(args) -> E.MetricsReport:
    corpus = D.load_corpus(args.corpus)
    return E.evaluate_checkpoint(args.checkpoint, corpus, args.out,
                                 num_bins=args.bins, max_tokens=args.max_tokens,
                                 split=args.split)


def _report_artifacts(report: E.MetricsReport, out_dir: str) -> dict[str, str]:
    return {
        "report:metrics": os.path.join(out_dir, "metrics.json"),
        "report:reliability": os.path.join(out_dir, report.reliability_csv),
        "report:histogram": os.path.join(out_dir, report.histogram_csv),
        "report:hypotheses": os.path.join(out_dir, report.hypotheses_path),
        "report:references": os.path.join(out_dir, report.references_path),
    }


def _print_report(report: E.MetricsReport) -> None:
    print(f"{report.split}: BLEU {report.bleu:.4f}, WER {report.wer:.4f}, "
          f"NLL {report.nll:.4f}, ECE {report.ece:.4f}, MCE {report.mce:.4f}, "
          f"accuracy {report.accuracy:.4f} ({report.num_sentences} sentences)")


def cmd_evaluate(args) -> int:
    report = _run_evaluation(args)
    update_manifest(_manifest_path(args), args.name, _report_artifacts(report, args.out))
    _print_report(report)
    return EXIT_OK


def cmd_report(args) -> int:
    report = _run_evaluation(args)
    artifacts = _report_artifacts(report, args.out)
    if args.runlog:
        steps = T.read_steps_csv(args.runlog)
        trajectory = os.path.join(args.out, "alpha_trajectory.csv")
        with open(trajectory, "w", newline="") as fh:
            fh.write("step,alpha_mean_token,alpha_mean_sentence\n")
            for s in steps:
                if s.alpha_mean_token is None and s.alpha_mean_sentence is None:
                    continue
                tok = "" if s.alpha_mean_token is None else repr(s.alpha_mean_token)
                sent = "" if s.alpha_mean_sentence is None else repr(s.alpha_mean_sentence)
                fh.write(f"{s.step},{tok},{sent}\n")
        artifacts["report:alpha_trajectory"] = trajectory
    update_manifest(_manifest_path(args), args.name, artifacts)
    _print_report(report)
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser wiring
# ---------------------------------------------------------------------------


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--name", default="experiment", help="experiment name recorded in the manifest")
    p.add_argument("--manifest", default=None, help="manifest path (default: <out>/manifest.json)")
    p.add_argument("--config", default=None, help="JSON config file; explicit flags override it")


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--corpus", required=True, help="directory written by gen-corpus")
    p.add_argument("--out", required=True, help="output directory for checkpoint and logs")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--max-tokens", type=int, default=None, help="token budget per batch")
    p.add_argument("--lr", type=float, default=None, help="peak learning rate")
    p.add_argument("--warmup", type=int, default=None, help="warmup steps")
    p.add_argument("--ls-epsilon", type=float, default=None, help="label-smoothing mass")
    p.add_argument("--embed-dim", type=int, default=None)
    p.add_argument("--ffn-dim", type=int, default=None)
    p.add_argument("--layers", type=int, default=None)
    p.add_argument("--dropout", type=float, default=None)
    p.add_argument("--bins", type=int, default=None, help="calibration bins for epoch metrics")
    p.add_argument("--teacher-temp", default=None,
                   help="teacher read-out temperature: a number, or 'fit' to select on validation NLL")


def _add_eval_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", default="test", choices=("train", "valid", "test"))
    p.add_argument("--bins", type=int, default=C.DEFAULT_BINS)
    p.add_argument("--max-tokens", type=int, default=512)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="gatedkd",
                     description="Gated distillation experiments on toy translation tasks.",
                     epilog="exit codes: 0 ok, 1 usage/validation, 2 numeric failure, 3 I/O failure")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-corpus", help="sample a synthetic parallel corpus")
    p.add_argument("--pairs", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--ambiguity", type=float, default=None, help="probability of the primary translation")
    p.add_argument("--source-vocab", type=int, default=None)
    p.add_argument("--target-vocab", type=int, default=None)
    p.add_argument("--min-len", type=int, default=None)
    p.add_argument("--max-len", type=int, default=None)
    p.add_argument("--noise-seed", type=int, default=None)
    _add_common(p)
    p.set_defaults(func=cmd_gen_corpus)

    p = sub.add_parser("train-teacher", help="train a teacher (label-based objectives only)")
    p.add_argument("--loss", default=None, choices=T.TEACHER_MODES)
    _add_train_flags(p)
    _add_common(p)
    p.set_defaults(func=cmd_train_teacher)

    p = sub.add_parser("train-student", help="train a student with any objective")
    p.add_argument("--loss", default=None, choices=T.LOSS_MODES)
    p.add_argument("--teacher", default=None, help="teacher checkpoint (required for distillation modes)")
    p.add_argument("--alpha", type=float, default=None, help="soft-blend mixing weight")
    p.add_argument("--tau", type=float, default=None, help="soft-blend temperature (both sides)")
    p.add_argument("--force-gate", type=int, default=None, choices=(0, 1),
                   help="diagnostic: pin every gate open (1) or closed (0)")
    _add_train_flags(p)
    _add_common(p)
    p.set_defaults(func=cmd_train_student)

    p = sub.add_parser("calibrate", help="fit a read-out temperature for a checkpoint")
    p.add_argument("--grid", default=None, help="comma-separated temperatures to search")
    _add_eval_flags(p)
    p.set_defaults(split="valid")
    _add_common(p)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("evaluate", help="score a checkpoint on a corpus split")
    _add_eval_flags(p)
    _add_common(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("report", help="evaluate plus plotting-ready CSV bundle")
    p.add_argument("--runlog", default=None, help="steps CSV from training; adds the gate trajectory")
    _add_eval_flags(p)
    _add_common(p)
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except ValidationError as exc:  # includes Config/Capacity/Ingestion/Checkpoint
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"i/o failure: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
