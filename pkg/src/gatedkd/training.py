"""Training loop, optimizer, schedules, and run logging.

One loop serves every objective; the loss mode only changes how the
per-step target distribution is built. For the gated modes the gates are
recomputed every step from the *current* student against the frozen
teacher — both read without gradients — so early in training most gates
stay closed (the student rarely beats the teacher) and open up as the
student improves.

Everything is deterministic for a fixed (config, corpus): parameter init,
batch composition, and dropout all derive from one seed, and the run log
serializes with repr-exact floats so re-runs are byte-identical.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from gatedkd import autodiff as ad
from gatedkd import calibration as C
from gatedkd import data as D
from gatedkd import kernels
from gatedkd import losses as L
from gatedkd import model as M
from gatedkd.errors import ConfigError, NumericError, ValidationError

LOSS_MODES = ("ce", "ls_uniform", "ls_unigram", "soft_kd", "hkd_token", "hkd_sentence")
KD_MODES = ("soft_kd", "hkd_token", "hkd_sentence")
TEACHER_MODES = ("ce", "ls_uniform", "ls_unigram")

DECODE_HEADROOM = 8  # positional-table slack beyond the longest corpus pair


@dataclass
class TrainConfig:
    loss_mode: str = "ce"
    epochs: int = 12
    seed: int = 0
    max_tokens: int = 512
    peak_lr: float = 3e-3
    warmup_steps: int = 200
    adam_beta1: float = 0.9
    adam_beta2: float = 0.98
    adam_eps: float = 1e-9
    ls_epsilon: float = 0.1
    soft_kd_alpha: float = 0.5
    soft_kd_tau: float = 2.0
    teacher_temperature: float | str = "fit"
    embed_dim: int = 64
    ffn_dim: int = 128
    num_layers: int = 1
    dropout: float = 0.0
    num_bins: int = 10
    force_gate: int | None = None

    def validate(self) -> None:
        if self.loss_mode not in LOSS_MODES:
            raise ConfigError(f"unknown loss mode {self.loss_mode!r}; pick one of {LOSS_MODES}")
        if self.epochs < 1 or self.warmup_steps < 1 or self.max_tokens < 4 or self.num_bins < 1:
            raise ConfigError("epochs, warmup_steps, max_tokens and num_bins must be positive")
        if self.peak_lr <= 0:
            raise ConfigError(f"peak_lr must be positive, got {self.peak_lr}")
        if not (0 < self.adam_beta1 < 1 and 0 < self.adam_beta2 < 1 and self.adam_eps > 0):
            raise ConfigError("adam hyperparameters out of range")
        if not 0.0 <= self.ls_epsilon <= 1.0:
            raise ConfigError(f"ls_epsilon must lie in [0, 1], got {self.ls_epsilon}")
        if not 0.0 <= self.soft_kd_alpha <= 1.0 or self.soft_kd_tau <= 0:
            raise ConfigError("soft blend hyperparameters out of range")
        if isinstance(self.teacher_temperature, str):
            if self.teacher_temperature != "fit":
                raise ConfigError(f"teacher_temperature must be a number or 'fit', got {self.teacher_temperature!r}")
        elif self.teacher_temperature <= 0:
            raise ConfigError(f"teacher_temperature must be positive, got {self.teacher_temperature}")
        if self.force_gate not in (None, 0, 1):
            raise ConfigError(f"force_gate must be 0, 1 or unset, got {self.force_gate}")
        # model geometry errors surface through ModelConfig

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, payload: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(payload) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        cfg = cls(**payload)
        cfg.validate()
        return cfg


def lr_at(step: int, peak_lr: float, warmup_steps: int) -> float:
    """Linear warmup to peak_lr, then inverse-square-root decay."""
    if step < 1:
        raise ValidationError(f"schedule steps start at 1, got {step}")
    return peak_lr * min(step / warmup_steps, math.sqrt(warmup_steps / step))


class AdamState:
    """Bias-corrected Adam moments, stepped in parameter layout order."""

    def __init__(self, params: M.ModelParams, beta1: float, beta2: float, eps: float):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {n: np.zeros_like(p.value) for n, p in params.items()}
        self.v = {n: np.zeros_like(p.value) for n, p in params.items()}


def step_optimizer(params: M.ModelParams, state: AdamState, lr: float) -> None:
    state.t += 1
    c1 = 1.0 - state.beta1 ** state.t
    c2 = 1.0 - state.beta2 ** state.t
    for name, p in params.items():
        g = p.grad
        if not np.isfinite(g).all():
            raise NumericError(f"non-finite gradient in {name} at optimizer step {state.t}")
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * np.square(g)
        p.value -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


# ---------------------------------------------------------------------------
# Run logging
# ---------------------------------------------------------------------------

_STEP_COLUMNS = ("step", "epoch", "mode", "loss", "lr", "alpha_mean_token", "alpha_mean_sentence", "valid_tokens")


@dataclass
class StepRecord:
    step: int
    epoch: int
    mode: str
    loss: float
    lr: float
    alpha_mean_token: float | None
    alpha_mean_sentence: float | None
    valid_tokens: int


@dataclass
class EpochRecord:
    epoch: int
    valid_nll: float
    valid_ece: float
    valid_accuracy: float
    is_best: bool


@dataclass
class RunLog:
    config: dict
    steps: list[StepRecord] = field(default_factory=list)
    epochs: list[EpochRecord] = field(default_factory=list)

    def write_steps_csv(self, path: str) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(_STEP_COLUMNS)
            for s in self.steps:
                w.writerow([
                    s.step, s.epoch, s.mode, repr(s.loss), repr(s.lr),
                    "" if s.alpha_mean_token is None else repr(s.alpha_mean_token),
                    "" if s.alpha_mean_sentence is None else repr(s.alpha_mean_sentence),
                    s.valid_tokens,
                ])

    def write_epochs_json(self, path: str) -> None:
        payload = {"config": self.config, "epochs": [asdict(e) for e in self.epochs]}
        with open(path, "w") as fh:
            json.dump(payload, fh, sort_keys=True, indent=2)
            fh.write("\n")


def read_steps_csv(path: str) -> list[StepRecord]:
    out = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != list(_STEP_COLUMNS):
            raise ValidationError(f"{path} is not a step log (columns {reader.fieldnames})")
        for row in reader:
            out.append(StepRecord(
                step=int(row["step"]), epoch=int(row["epoch"]), mode=row["mode"],
                loss=float(row["loss"]), lr=float(row["lr"]),
                alpha_mean_token=float(row["alpha_mean_token"]) if row["alpha_mean_token"] else None,
                alpha_mean_sentence=float(row["alpha_mean_sentence"]) if row["alpha_mean_sentence"] else None,
                valid_tokens=int(row["valid_tokens"]),
            ))
    return out


# ---------------------------------------------------------------------------
# Evaluation-side helpers shared by the loop
# ---------------------------------------------------------------------------


def mean_valid_nll(params: M.ModelParams, batches) -> float:
    """Gold-token NLL at temperature 1, pooled over every valid position."""
    total, count = 0.0, 0
    for batch in batches:
        gold = M.sentence_logprob(params, batch, 1.0)
        total += float(gold.sum())
        count += int(batch.gold_mask().sum())
    if count == 0:
        raise ValidationError("no valid positions to evaluate")
    return -total / count


def validation_metrics(params: M.ModelParams, batches, num_bins: int) -> tuple[float, float, float]:
    records = C.collect_next_token_records(params, batches)
    bins = C.bin_predictions(records, num_bins)
    return mean_valid_nll(params, batches), C.ece(bins), C.accuracy(records)


def required_max_len(corpus: D.ParallelCorpus) -> int:
    longest = 0
    for split in ("train", "valid", "test"):
        for src, tgt in corpus.split(split):
            longest = max(longest, len(src), len(tgt) + 1)  # +1: BOS-shifted input
    return longest + DECODE_HEADROOM


@dataclass
class TrainResult:
    params: M.ModelParams        # best-validation snapshot
    runlog: RunLog
    best_epoch: int
    best_valid_nll: float
    final_params: M.ModelParams  # state after the last step


def _probs(logits_value: np.ndarray, tau: float) -> np.ndarray:
    flat = kernels.active().softmax(logits_value.reshape(-1, logits_value.shape[-1]), tau)
    return flat.reshape(logits_value.shape)


def _sentence_lp(logits_value: np.ndarray, batch: M.Batch, tau: float) -> np.ndarray:
    flat = kernels.active().log_softmax(logits_value.reshape(-1, logits_value.shape[-1]), tau)
    logp = flat.reshape(logits_value.shape)
    gold = np.take_along_axis(logp, batch.gold_ids()[:, :, None], axis=-1)[:, :, 0]
    return (gold * batch.gold_mask()).sum(axis=1)


def train(config: TrainConfig, corpus: D.ParallelCorpus,
          teacher: L.TeacherHandle | None = None) -> TrainResult:
    """Run the configured objective over the corpus and keep the best-NLL state.

    Distillation modes require ``teacher``; it is read-only throughout (the
    loop checks its checksum on exit). The student always trains and is
    always evaluated at temperature 1 — only teacher readings are scaled.
    """
    config.validate()
    if config.loss_mode in KD_MODES:
        if teacher is None:
            raise ConfigError(f"loss mode {config.loss_mode!r} needs a teacher")
        if teacher.params.config.vocab_size != len(corpus.vocabulary):
            raise ConfigError(
                f"teacher vocabulary ({teacher.params.config.vocab_size}) does not match "
                f"the corpus ({len(corpus.vocabulary)})"
            )
    if not corpus.train or not corpus.valid:
        raise ValidationError("training needs nonempty train and valid splits")

    vocab = corpus.vocabulary
    model_config = M.ModelConfig(
        vocab_size=len(vocab),
        max_len=required_max_len(corpus),
        embed_dim=config.embed_dim,
        ffn_dim=config.ffn_dim,
        num_layers=config.num_layers,
        dropout=config.dropout,
    )
    seeds = np.random.SeedSequence(config.seed).generate_state(2 + config.epochs)
    params = M.ModelParams.init(model_config, int(seeds[0]))
    dropout_rng = np.random.default_rng(int(seeds[1])) if config.dropout > 0 else None
    adam = AdamState(params, config.adam_beta1, config.adam_beta2, config.adam_eps)

    unigram = D.unigram_counts(corpus.train, vocab) if config.loss_mode == "ls_unigram" else None
    valid_batches, _ = D.make_batches(corpus.valid, vocab, config.max_tokens, shuffle=False)
    teacher_checksum = teacher.checksum() if teacher is not None else None

    runlog = RunLog(config=config.to_json())
    best = TrainResult(params.copy(), runlog, best_epoch=0, best_valid_nll=math.inf, final_params=params)
    step = 0
    for epoch in range(1, config.epochs + 1):
        batches, _ = D.make_batches(corpus.train, vocab, config.max_tokens, seed=int(seeds[1 + epoch]))
        for batch in batches:
            step += 1
            lr = lr_at(step, config.peak_lr, config.warmup_steps)
            tape = ad.Tape()
            logits = M.forward(params, batch, tape, dropout_rng)
            gates = None
            if config.loss_mode in ("hkd_token", "hkd_sentence"):
                gate_mode = L.GATE_TOKEN if config.loss_mode == "hkd_token" else L.GATE_SENTENCE
                tlogits = teacher.logits(batch)
                tprobs = _probs(tlogits, teacher.temperature)
                if config.force_gate is not None:
                    gates = L.compute_gates(gate_mode, params, teacher, batch, force=config.force_gate)
                elif dropout_rng is not None:
                    # dropout noise must not leak into the comparison
                    gates = L.compute_gates(gate_mode, params, teacher, batch)
                elif gate_mode == L.GATE_TOKEN:
                    gates = L.token_gate(_probs(logits.value, 1.0), tprobs, batch)
                else:
                    gates = L.sentence_gate(
                        _sentence_lp(logits.value, batch, 1.0),
                        _sentence_lp(tlogits, batch, teacher.temperature),
                        batch,
                    )
                loss = L.hkd_loss(logits, tprobs, gates, batch, tape)
            elif config.loss_mode == "soft_kd":
                loss = L.soft_kd_loss(logits, teacher.logits(batch), batch,
                                      config.soft_kd_alpha, config.soft_kd_tau, tape)
            elif config.loss_mode == "ce":
                loss = L.ce_loss(logits, batch, tape)
            elif config.loss_mode == "ls_uniform":
                loss = L.ls_loss(logits, batch, config.ls_epsilon, "uniform", tape=tape)
            else:  # ls_unigram
                loss = L.ls_loss(logits, batch, config.ls_epsilon, "unigram", unigram, tape)

            loss_val = float(loss.value)
            if not math.isfinite(loss_val):
                raise NumericError(
                    f"loss diverged at step {step} (epoch {epoch}, mode {config.loss_mode}, "
                    f"lr {lr:.3e}): {loss_val}"
                )
            params.zero_grads()
            tape.backward(loss)
            step_optimizer(params, adam, lr)
            runlog.steps.append(StepRecord(
                step=step, epoch=epoch, mode=config.loss_mode, loss=loss_val, lr=lr,
                alpha_mean_token=gates.mean_over_tokens() if gates is not None else None,
                alpha_mean_sentence=gates.mean_over_sentences() if gates is not None else None,
                valid_tokens=int(batch.gold_mask().sum()),
            ))

        nll, ece_val, acc = validation_metrics(params, valid_batches, config.num_bins)
        is_best = nll < best.best_valid_nll
        if is_best:
            best.params = params.copy()
            best.best_epoch = epoch
            best.best_valid_nll = nll
        runlog.epochs.append(EpochRecord(epoch, nll, ece_val, acc, is_best))

    if teacher is not None and teacher.checksum() != teacher_checksum:
        raise NumericError("teacher parameters changed during training; it must stay frozen")
    best.final_params = params
    return best


def resolve_teacher_temperature(setting: float | str, params: M.ModelParams, valid_batches) -> float:
    """Turn a config temperature ('fit' or a number) into a concrete value."""
    if setting == "fit":
        fitted, _ = C.fit_temperature(params, valid_batches)
        return fitted
    value = float(setting)
    if value <= 0:
        raise ConfigError(f"teacher temperature must be positive, got {value}")
    return value


def build_teacher(config: TrainConfig, corpus: D.ParallelCorpus) -> tuple[L.TeacherHandle, TrainResult]:
    """Train a teacher (label-based modes only), freeze it, resolve its
    read-out temperature on the validation split."""
    if config.loss_mode not in TEACHER_MODES:
        raise ConfigError(f"teachers train with one of {TEACHER_MODES}, not {config.loss_mode!r}")
    result = train(config, corpus)
    valid_batches, _ = D.make_batches(corpus.valid, corpus.vocabulary, config.max_tokens, shuffle=False)
    temperature = resolve_teacher_temperature(config.teacher_temperature, result.params, valid_batches)
    return L.TeacherHandle(params=result.params, temperature=temperature), result
