"""Training objectives: cross-entropy, label smoothing, soft blending, and
confidence-gated distillation.

Every objective reduces the same way: build a per-position target
distribution ``w``, take ``-masked_mean(rowdot(log_softmax(logits), w))``
over the valid gold positions. Sharing that pipeline is deliberate — when
two objectives produce bitwise-equal targets (e.g. the gated loss with all
gates closed versus plain cross-entropy) their losses and gradients are
bitwise-equal too, because every multiply by exact 0.0/1.0 and every
reduction runs through identical code.

Gates are hard: a position (or sentence) either keeps its one-hot label or
swaps it for the temperature-scaled teacher distribution, decided by a
strict ``student > teacher`` comparison on the gold token (ties keep the
label). Only the teacher side is temperature-scaled; the student's
log-softmax always runs at temperature 1.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from gatedkd import autodiff as ad
from gatedkd import kernels
from gatedkd import model as M
from gatedkd.errors import ConfigError, NumericError, ValidationError

GATE_TOKEN = "token"
GATE_SENTENCE = "sentence"


@dataclass
class GateMask:
    """Per-position hard gates: alpha in {0, 1} on valid positions, 0 elsewhere."""

    alpha: np.ndarray  # float64 (B, T-1)
    valid: np.ndarray  # bool    (B, T-1)
    mode: str

    def __post_init__(self):
        self.alpha = np.asarray(self.alpha, dtype=np.float64)
        self.valid = np.asarray(self.valid, dtype=bool)

    def validate(self) -> None:
        if self.mode not in (GATE_TOKEN, GATE_SENTENCE):
            raise ValidationError(f"unknown gate mode {self.mode!r}")
        if self.alpha.shape != self.valid.shape or self.alpha.ndim != 2:
            raise ValidationError(f"gate shapes disagree: {self.alpha.shape} vs {self.valid.shape}")
        on = self.alpha[self.valid]
        if not np.isin(on, (0.0, 1.0)).all():
            raise ValidationError("gates must be exactly 0 or 1 on valid positions")
        if self.alpha[~self.valid].any():
            raise ValidationError("gates defined on padding positions")

    def mean_over_tokens(self) -> float:
        """Fraction of valid positions whose gate is open."""
        return float(self.alpha[self.valid].mean())

    def mean_over_sentences(self) -> float:
        """Mean over sentences of each sentence's own open-gate fraction."""
        counts = self.valid.sum(axis=1)
        return float(((self.alpha * self.valid).sum(axis=1) / counts).mean())


@dataclass
class TeacherHandle:
    """A frozen teacher plus the temperature it is read at.

    The handle never exposes gradients; all queries are evaluation-mode
    forwards. ``checksum`` lets callers assert the teacher stayed frozen.
    """

    params: M.ModelParams
    temperature: float

    def __post_init__(self):
        if self.temperature <= 0.0:
            raise ValidationError(f"teacher temperature must be positive, got {self.temperature}")

    def logits(self, batch: M.Batch) -> np.ndarray:
        return M.forward(self.params, batch).value

    def probs(self, batch: M.Batch) -> np.ndarray:
        """Temperature-scaled next-token distributions (B, T-1, V)."""
        return M.next_token_dist(self.params, batch, self.temperature)

    def sentence_logprob(self, batch: M.Batch) -> np.ndarray:
        return M.sentence_logprob(self.params, batch, self.temperature)

    def checksum(self) -> str:
        return self.params.checksum()


def gold_onehot(batch: M.Batch, vocab_size: int) -> np.ndarray:
    """One-hot gold targets (B, T-1, V); padded rows are all-zero."""
    gold = batch.gold_ids()
    oh = np.zeros((*gold.shape, vocab_size))
    np.put_along_axis(oh, gold[:, :, None], 1.0, axis=-1)
    return oh * batch.gold_mask()[:, :, None]


def _check_teacher_grid(teacher_probs: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    teacher_probs = np.asarray(teacher_probs, dtype=np.float64)
    if teacher_probs.shape != shape:
        raise ValidationError(f"teacher grid shape {teacher_probs.shape} != logits shape {shape}")
    if not np.isfinite(teacher_probs).all():
        raise NumericError("teacher probabilities contain non-finite values")
    return teacher_probs


def _target_loss(logits: ad.DualTensor, weights: np.ndarray, valid: np.ndarray,
                 tape: ad.Tape | None) -> ad.DualTensor:
    """-mean over valid positions of sum_v weights[v] * log softmax(logits)[v]."""
    logp = ad.log_softmax(logits, 1.0, tape)
    per_pos = ad.rowdot(logp, weights, tape)
    return ad.scale(ad.masked_mean(per_pos, valid, tape), -1.0, tape)


# ---------------------------------------------------------------------------
# Gates
# ---------------------------------------------------------------------------


def token_gate(student_probs: np.ndarray, teacher_probs: np.ndarray, batch: M.Batch) -> GateMask:
    """Open the gate wherever the student outscores the teacher on the gold
    token, strictly; ties and padding stay closed."""
    gold = batch.gold_ids()[:, :, None]
    s = np.take_along_axis(np.asarray(student_probs), gold, axis=-1)[:, :, 0]
    t = np.take_along_axis(np.asarray(teacher_probs), gold, axis=-1)[:, :, 0]
    valid = batch.gold_mask()
    alpha = ((s > t) & valid).astype(np.float64)
    return GateMask(alpha=alpha, valid=valid, mode=GATE_TOKEN)


def sentence_gate(student_logprob: np.ndarray, teacher_logprob: np.ndarray, batch: M.Batch) -> GateMask:
    """One gate per sentence from summed log-probabilities over the same
    token span, broadcast to every valid position of that sentence."""
    s = np.asarray(student_logprob, dtype=np.float64)
    t = np.asarray(teacher_logprob, dtype=np.float64)
    valid = batch.gold_mask()
    if s.shape != (batch.size,) or t.shape != (batch.size,):
        raise ValidationError(f"sentence scores must be ({batch.size},), got {s.shape} and {t.shape}")
    alpha = ((s > t)[:, None] & valid).astype(np.float64)
    return GateMask(alpha=alpha, valid=valid, mode=GATE_SENTENCE)


def compute_gates(mode: str, student: M.ModelParams, teacher: TeacherHandle, batch: M.Batch,
                  force: int | None = None) -> GateMask:
    """Evaluate both models without gradients and build the step's gates.

    ``force`` pins every valid position's gate to 0 or 1 (diagnostics only).
    """
    valid = batch.gold_mask()
    if force is not None:
        if force not in (0, 1):
            raise ValidationError(f"forced gate must be 0 or 1, got {force}")
        return GateMask(alpha=valid.astype(np.float64) * force, valid=valid, mode=mode)
    if mode == GATE_TOKEN:
        return token_gate(M.next_token_dist(student, batch, 1.0), teacher.probs(batch), batch)
    if mode == GATE_SENTENCE:
        return sentence_gate(M.sentence_logprob(student, batch, 1.0), teacher.sentence_logprob(batch), batch)
    raise ValidationError(f"unknown gate mode {mode!r}")


# ---------------------------------------------------------------------------
# Objectives
# ---------------------------------------------------------------------------


def ce_loss(logits: ad.DualTensor, batch: M.Batch, tape: ad.Tape | None = None) -> ad.DualTensor:
    """Token-level cross-entropy against the one-hot gold labels."""
    weights = gold_onehot(batch, logits.value.shape[-1])
    return _target_loss(logits, weights, batch.gold_mask(), tape)


def distill_ce_loss(logits: ad.DualTensor, teacher_probs: np.ndarray, batch: M.Batch,
                    tape: ad.Tape | None = None) -> ad.DualTensor:
    """Cross-entropy against the teacher's (already scaled) distributions."""
    weights = _check_teacher_grid(teacher_probs, logits.value.shape)
    return _target_loss(logits, weights, batch.gold_mask(), tape)


def hkd_loss(logits: ad.DualTensor, teacher_probs: np.ndarray, gates: GateMask, batch: M.Batch,
             tape: ad.Tape | None = None) -> ad.DualTensor:
    """Hard-gated objective: per position, follow the one-hot label where the
    gate is closed and the teacher distribution where it is open."""
    gates.validate()
    valid = batch.gold_mask()
    if gates.valid.shape != valid.shape or (gates.valid != valid).any():
        raise ValidationError("gate validity grid does not match the batch's gold positions")
    teacher_probs = _check_teacher_grid(teacher_probs, logits.value.shape)
    a = gates.alpha[:, :, None]
    weights = (1.0 - a) * gold_onehot(batch, logits.value.shape[-1]) + a * teacher_probs
    return _target_loss(logits, weights, valid, tape)


def ls_loss(logits: ad.DualTensor, batch: M.Batch, epsilon: float, prior: str = "uniform",
            unigram_counts: np.ndarray | None = None, tape: ad.Tape | None = None) -> ad.DualTensor:
    """Label smoothing: (1 - eps) on the gold token plus eps times a prior.

    ``prior`` is "uniform" or "unigram"; the latter needs target-token
    counts. eps = 0 reproduces cross-entropy exactly; eps = 1 trains against
    the bare prior.
    """
    if not 0.0 <= epsilon <= 1.0:
        raise ConfigError(f"smoothing epsilon must lie in [0, 1], got {epsilon}")
    vocab = logits.value.shape[-1]
    if prior == "uniform":
        prior_row = np.full(vocab, 1.0 / vocab)
    elif prior == "unigram":
        if unigram_counts is None:
            raise ConfigError("unigram smoothing needs target-token counts")
        counts = np.asarray(unigram_counts, dtype=np.float64)
        if counts.shape != (vocab,) or (counts < 0).any():
            raise ValidationError(f"unigram counts must be ({vocab},) nonnegative, got {counts.shape}")
        total = counts.sum()
        if total <= 0:
            raise ConfigError("unigram counts are all zero")
        prior_row = counts / total
    else:
        raise ConfigError(f"unknown smoothing prior {prior!r}")
    weights = (1.0 - epsilon) * gold_onehot(batch, vocab) + epsilon * prior_row
    weights = weights * batch.gold_mask()[:, :, None]
    return _target_loss(logits, weights, batch.gold_mask(), tape)


def soft_kd_loss(logits: ad.DualTensor, teacher_logits: np.ndarray, batch: M.Batch,
                 alpha: float, tau: float, tape: ad.Tape | None = None) -> ad.DualTensor:
    """Conventional blended distillation: (1 - alpha) * CE(one-hot, student)
    + alpha * CE(teacher at tau, student at tau).

    Unlike the gated loss, *both* sides of the distillation term are
    temperature-scaled here.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ConfigError(f"blend weight alpha must lie in [0, 1], got {alpha}")
    if tau <= 0.0:
        raise ConfigError(f"distillation temperature must be positive, got {tau}")
    teacher_logits = np.asarray(teacher_logits, dtype=np.float64)
    if teacher_logits.shape != logits.value.shape:
        raise ValidationError(f"teacher logits shape {teacher_logits.shape} != student {logits.value.shape}")
    if not np.isfinite(teacher_logits).all():
        raise NumericError("teacher logits contain non-finite values")
    vocab = logits.value.shape[-1]
    valid = batch.gold_mask()
    soft = kernels.active().softmax(teacher_logits.reshape(-1, vocab), tau).reshape(logits.value.shape)
    soft = soft * valid[:, :, None]

    ce_part = ad.rowdot(ad.log_softmax(logits, 1.0, tape), gold_onehot(batch, vocab), tape)
    kd_part = ad.rowdot(ad.log_softmax(logits, tau, tape), soft, tape)
    per_pos = ad.add(ad.scale(ce_part, 1.0 - alpha, tape), ad.scale(kd_part, alpha, tape), tape)
    return ad.scale(ad.masked_mean(per_pos, valid, tape), -1.0, tape)


# ---------------------------------------------------------------------------
# Analysis helpers
# ---------------------------------------------------------------------------


def incorrect_class_grad_sum(student_probs: np.ndarray, batch: M.Batch,
                             teacher_probs: np.ndarray | None = None,
                             gates: GateMask | None = None) -> np.ndarray:
    """Per-position sum of the loss gradient over all non-gold logits.

    For a normalized target w the per-position logit gradient is P - w, so
    the off-gold sum collapses to w_gold - P_gold: cross-entropy gives
    1 - P_gold (never negative), an open gate gives
    P_teacher_gold - P_gold (negative exactly where the gate fired).
    """
    gold = batch.gold_ids()[:, :, None]
    s = np.take_along_axis(np.asarray(student_probs), gold, axis=-1)[:, :, 0]
    if gates is None:
        return (1.0 - s) * batch.gold_mask()
    gates.validate()
    if teacher_probs is None:
        raise ValidationError("gated gradient sums need the teacher grid")
    t = np.take_along_axis(np.asarray(teacher_probs), gold, axis=-1)[:, :, 0]
    w_gold = (1.0 - gates.alpha) + gates.alpha * t
    return (w_gold - s) * batch.gold_mask()


def make_soft_target(teacher_row: np.ndarray, gold_id: int, alpha: float) -> np.ndarray:
    """Interpolated supervision row (1 - alpha) * one-hot + alpha * teacher."""
    teacher_row = np.asarray(teacher_row, dtype=np.float64)
    if not 0.0 <= alpha <= 1.0:
        raise ValidationError(f"alpha must lie in [0, 1], got {alpha}")
    if not 0 <= gold_id < teacher_row.shape[-1]:
        raise ValidationError(f"gold id {gold_id} outside vocabulary {teacher_row.shape[-1]}")
    onehot = np.zeros_like(teacher_row)
    onehot[gold_id] = 1.0
    return (1.0 - alpha) * onehot + alpha * teacher_row


def supervision_entropies(teacher_row: np.ndarray, gold_id: int, alpha: float) -> tuple[float, float, float]:
    """Entropies (teacher, interpolated target, one-hot) for one position."""
    soft = make_soft_target(teacher_row, gold_id, alpha)
    onehot = np.zeros_like(soft)
    onehot[gold_id] = 1.0
    return ad.entropy(teacher_row), ad.entropy(soft), ad.entropy(onehot)


def entropy_ordering_report(teacher_probs: np.ndarray, batch: M.Batch, alpha: float = 0.5,
                            tol: float = 1e-12) -> dict:
    """How often H(teacher) >= H(soft target) >= H(one-hot) holds, measured on
    valid positions where the teacher's argmax already matches gold.

    Returned counts feed an empirical report; the ordering is not asserted
    anywhere because adversarial rows can break it.
    """
    teacher_probs = np.asarray(teacher_probs, dtype=np.float64)
    gold = batch.gold_ids()
    sel = batch.gold_mask() & (teacher_probs.argmax(axis=-1) == gold)
    if not sel.any():
        return {"checked": 0, "ordered": 0, "fraction": float("nan")}
    rows = teacher_probs[sel]
    onehot = np.zeros_like(rows)
    onehot[np.arange(rows.shape[0]), gold[sel]] = 1.0
    soft = (1.0 - alpha) * onehot + alpha * rows
    h_teacher = ad.row_entropies(rows)
    h_soft = ad.row_entropies(soft)
    h_onehot = ad.row_entropies(onehot)
    ordered = (h_teacher >= h_soft - tol) & (h_soft >= h_onehot - tol)
    return {
        "checked": int(sel.sum()),
        "ordered": int(ordered.sum()),
        "fraction": float(ordered.mean()),
    }
