"""Confidence calibration: binning, gap summaries, temperature search.

Binning uses equal-width, right-closed intervals ((b-1)/B, b/B]: a
confidence c lands in bin ceil(c * B), except that an exact 0 goes in bin
1. Expected calibration error weights each nonempty bin's |accuracy -
confidence| gap by its share of records; the maximum version takes the
largest gap instead, so ECE can never exceed MCE.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass

import numpy as np

from gatedkd import kernels
from gatedkd import model as M
from gatedkd.errors import ValidationError

DEFAULT_GRID = (0.8, 1.0, 1.5, 2.0, 2.5)
DEFAULT_BINS = 10


@dataclass(frozen=True)
class PredictionRecord:
    """One prediction: top-class probability and whether that class was gold."""

    confidence: float
    correct: bool


@dataclass
class CalibrationBins:
    num_bins: int
    counts: np.ndarray
    conf_sums: np.ndarray
    correct_counts: np.ndarray

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def edges(self, b: int) -> tuple[float, float]:
        """(lo, hi] boundaries of 0-indexed bin b."""
        return b / self.num_bins, (b + 1) / self.num_bins


def bin_predictions(records, num_bins: int = DEFAULT_BINS) -> CalibrationBins:
    """Assign each record to its right-closed confidence bin."""
    if num_bins < 1:
        raise ValidationError(f"need at least one bin, got {num_bins}")
    records = list(records)
    if not records:
        raise ValidationError("no prediction records to bin")
    conf = np.array([r.confidence for r in records], dtype=np.float64)
    correct = np.array([r.correct for r in records], dtype=bool)
    if conf.min() < 0.0 or conf.max() > 1.0:
        raise ValidationError("confidences must lie in [0, 1]")
    idx = np.ceil(conf * num_bins).astype(np.int64)
    idx[idx == 0] = 1  # exact zeros share the first bin
    counts = np.bincount(idx - 1, minlength=num_bins)
    return CalibrationBins(
        num_bins=num_bins,
        counts=counts,
        conf_sums=np.bincount(idx - 1, weights=conf, minlength=num_bins),
        correct_counts=np.bincount(idx - 1, weights=correct.astype(np.float64), minlength=num_bins),
    )


def _gaps(bins: CalibrationBins) -> tuple[np.ndarray, np.ndarray]:
    nonempty = bins.counts > 0
    acc = bins.correct_counts[nonempty] / bins.counts[nonempty]
    conf = bins.conf_sums[nonempty] / bins.counts[nonempty]
    return np.abs(acc - conf), bins.counts[nonempty]


def ece(bins: CalibrationBins) -> float:
    """Count-weighted mean |accuracy - confidence| over nonempty bins."""
    gaps, counts = _gaps(bins)
    return float((counts / bins.total * gaps).sum())


def mce(bins: CalibrationBins) -> float:
    """Largest |accuracy - confidence| over nonempty bins."""
    gaps, _ = _gaps(bins)
    return float(gaps.max())


def accuracy(records) -> float:
    records = list(records)
    if not records:
        raise ValidationError("no prediction records")
    return float(np.mean([r.correct for r in records]))


def collect_next_token_records(params: M.ModelParams, batches, temperature: float = 1.0) -> list[PredictionRecord]:
    """Top-1 confidence/correctness for every valid gold position, in batch
    order then row-major position order."""
    out: list[PredictionRecord] = []
    for batch in batches:
        probs = M.next_token_dist(params, batch, temperature)
        conf = probs.max(axis=-1)
        correct = probs.argmax(axis=-1) == batch.gold_ids()
        valid = batch.gold_mask()
        for c, k in zip(conf[valid], correct[valid]):
            out.append(PredictionRecord(confidence=float(c), correct=bool(k)))
    return out


# ---------------------------------------------------------------------------
# Temperature fitting
# ---------------------------------------------------------------------------


def fit_temperature_on_logits(logit_cases, grid=DEFAULT_GRID) -> tuple[float, dict[float, float]]:
    """Grid-search the temperature minimizing pooled gold-token NLL.

    ``logit_cases`` is an iterable of (logits, gold_ids, gold_mask) triples.
    Ties break toward the temperature closest to 1, then toward the smaller
    value, so the search is fully deterministic.
    """
    grid = [float(t) for t in grid]
    if not grid:
        raise ValidationError("temperature grid is empty")
    if any(t <= 0 for t in grid):
        raise ValidationError("temperature grid entries must be positive")
    totals = {t: 0.0 for t in grid}
    count = 0
    for logits, gold_ids, gold_mask in logit_cases:
        logits = np.asarray(logits, dtype=np.float64)
        flat = logits.reshape(-1, logits.shape[-1])
        count += int(gold_mask.sum())
        for t in grid:
            logp = kernels.active().log_softmax(flat, t).reshape(logits.shape)
            gold = np.take_along_axis(logp, gold_ids[:, :, None], axis=-1)[:, :, 0]
            totals[t] += float(gold[gold_mask].sum())
    if count == 0:
        raise ValidationError("no valid positions to fit a temperature on")
    nll = {t: -totals[t] / count for t in grid}
    best = min(grid, key=lambda t: (nll[t], abs(t - 1.0), t))
    return best, nll


def fit_temperature(params: M.ModelParams, batches, grid=DEFAULT_GRID) -> tuple[float, dict[float, float]]:
    """Fit a read-out temperature for a trained model on held-out batches."""
    batches = list(batches)
    if not batches:
        raise ValidationError("no validation batches to fit a temperature on")

    def cases():
        for batch in batches:
            yield M.forward(params, batch).value, batch.gold_ids(), batch.gold_mask()

    return fit_temperature_on_logits(cases(), grid)


# ---------------------------------------------------------------------------
# Artifact writers (all content-deterministic: repr floats, no timestamps)
# ---------------------------------------------------------------------------


def write_reliability_csv(path: str, bins: CalibrationBins) -> None:
    """One row per bin, empty bins included with blank statistics."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["bin_lo", "bin_hi", "count", "mean_confidence", "accuracy"])
        for b in range(bins.num_bins):
            lo, hi = bins.edges(b)
            n = int(bins.counts[b])
            if n:
                w.writerow([repr(lo), repr(hi), n, repr(bins.conf_sums[b] / n), repr(bins.correct_counts[b] / n)])
            else:
                w.writerow([repr(lo), repr(hi), 0, "", ""])


def write_histogram_csv(path: str, bins: CalibrationBins) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["bin_lo", "bin_hi", "count"])
        for b in range(bins.num_bins):
            lo, hi = bins.edges(b)
            w.writerow([repr(lo), repr(hi), int(bins.counts[b])])


def write_calibration_summary(path: str, bins: CalibrationBins, extra: dict | None = None) -> None:
    payload = {
        "ece": ece(bins),
        "mce": mce(bins),
        "num_records": bins.total,
        "num_bins": bins.num_bins,
    }
    payload.update(extra or {})
    with open(path, "w") as fh:
        json.dump(payload, fh, sort_keys=True, indent=2)
        fh.write("\n")
