"""Greedy decoding, surface metrics, and checkpoint evaluation.

Decoding is plain argmax continuation — deterministic by construction, so a
frozen checkpoint always produces the same hypotheses. BLEU is pinned to one
variant (case-sensitive, token-level, corpus geometric mean of clipped
precisions for n = 1..4, add-1 smoothing applied only to orders with zero
matches, standard brevity penalty) because BLEU scores are meaningless
without saying which BLEU.
"""

from __future__ import annotations

import json
import math
import os
from collections import Counter
from dataclasses import asdict, dataclass

import numpy as np

from gatedkd import calibration as C
from gatedkd import data as D
from gatedkd import model as M
from gatedkd import training as T
from gatedkd.errors import CheckpointError, ValidationError

DECODE_BATCH = 64


@dataclass(frozen=True)
class DecodeResult:
    hypothesis_ids: tuple[int, ...]
    hypothesis: str
    reference: str


@dataclass(frozen=True)
class MetricsReport:
    """Summary of one evaluation; the four trailing fields name sibling
    files in the same directory as metrics.json, so reports stay
    byte-identical when the output directory moves."""

    split: str
    bleu: float
    wer: float
    nll: float
    ece: float
    mce: float
    accuracy: float
    num_records: int
    num_sentences: int
    temperature: float
    reliability_csv: str
    histogram_csv: str
    hypotheses_path: str
    references_path: str

    def to_json(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# Greedy decoding
# ---------------------------------------------------------------------------


def _decode_chunk(params: M.ModelParams, sources: list[list[int]], max_new: int) -> list[list[int]]:
    b = len(sources)
    s_width = max(len(s) for s in sources)
    src = np.zeros((b, s_width), dtype=np.int64)
    src_mask = np.zeros((b, s_width), dtype=np.float64)
    for i, ids in enumerate(sources):
        src[i, : len(ids)] = ids
        src_mask[i, : len(ids)] = 1.0

    prefix = np.full((b, 1), D.BOS_ID, dtype=np.int64)  # grows one column per step
    done = np.zeros(b, dtype=bool)
    hyps: list[list[int]] = [[] for _ in range(b)]
    # the decoder input is the prefix itself; the grid carries one trailing
    # slot (the position being predicted) so the batch invariants hold
    for _ in range(max_new):
        width = prefix.shape[1]
        grid = np.concatenate([prefix, np.full((b, 1), D.PAD_ID, dtype=np.int64)], axis=1)
        lengths = np.where(done, 2, width + 1)  # frozen rows keep a minimal mask
        tgt_mask = (np.arange(width + 1) < lengths[:, None]).astype(np.float64)
        batch = M.Batch(source_ids=src, source_mask=src_mask, target_ids=grid, target_mask=tgt_mask)
        logits = M.forward(params, batch).value  # (b, width, V)
        last = logits[np.arange(b), width - 1, :].copy()
        last[:, D.PAD_ID] = -np.inf
        last[:, D.BOS_ID] = -np.inf
        chosen = last.argmax(axis=1)
        for i in range(b):
            if done[i]:
                continue
            if chosen[i] == D.EOS_ID:
                done[i] = True
            else:
                hyps[i].append(int(chosen[i]))
        if done.all():
            break
        step_tokens = np.where(done, D.PAD_ID, chosen)
        prefix = np.concatenate([prefix, step_tokens[:, None]], axis=1)
        if prefix.shape[1] >= params.config.max_len:
            break
    return hyps


def greedy_decode(params: M.ModelParams, sources, max_new_tokens: int | None = None,
                  batch_size: int = DECODE_BATCH) -> list[list[int]]:
    """Argmax-decode each source; returns content token ids (no BOS/EOS/PAD).

    Generation stops at EOS or after ``max_new_tokens`` tokens (default:
    whatever the positional table allows). Sources must already be encoded
    with the model's vocabulary.
    """
    sources = [list(map(int, s)) for s in sources]
    if not sources:
        return []
    if any(len(s) == 0 for s in sources):
        raise ValidationError("cannot decode an empty source sentence")
    cap = params.config.max_len - 1
    max_new = cap if max_new_tokens is None else min(max_new_tokens, cap)
    if max_new < 1:
        raise ValidationError(f"max_new_tokens must be at least 1, got {max_new_tokens}")
    out: list[list[int]] = []
    for lo in range(0, len(sources), batch_size):
        out.extend(_decode_chunk(params, sources[lo : lo + batch_size], max_new))
    return out


def detokenize(tokens: list[str], tokenization: str) -> str:
    if tokenization not in D.TOKENIZATIONS:
        raise ValidationError(f"unknown tokenization {tokenization!r}")
    return (" " if tokenization == "whitespace" else "").join(tokens)


# ---------------------------------------------------------------------------
# Surface metrics
# ---------------------------------------------------------------------------


def _ngrams(tokens, n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def bleu(hypotheses, references, max_n: int = 4) -> float:
    """Corpus BLEU in [0, 1]; see the module docstring for the pinned variant."""
    hypotheses, references = list(hypotheses), list(references)
    if not hypotheses or len(hypotheses) != len(references):
        raise ValidationError(
            f"need aligned nonempty corpora, got {len(hypotheses)} hypotheses "
            f"and {len(references)} references"
        )
    if max_n < 1:
        raise ValidationError(f"max_n must be positive, got {max_n}")
    hyp_len = sum(len(h) for h in hypotheses)
    ref_len = sum(len(r) for r in references)
    if hyp_len == 0:
        return 0.0
    matches = [0] * max_n
    totals = [0] * max_n
    for hyp, ref in zip(hypotheses, references):
        for n in range(1, max_n + 1):
            hgrams = _ngrams(list(hyp), n)
            rgrams = _ngrams(list(ref), n)
            matches[n - 1] += sum(min(c, rgrams[g]) for g, c in hgrams.items())
            totals[n - 1] += max(len(hyp) - n + 1, 0)
    log_prec = 0.0
    for m, t in zip(matches, totals):
        if m == 0:
            m, t = m + 1, t + 1
        log_prec += math.log(m / t)
    brevity = 1.0 if hyp_len >= ref_len else math.exp(1.0 - ref_len / hyp_len)
    return brevity * math.exp(log_prec / max_n)


def edit_distance(a, b) -> int:
    """Token-level Levenshtein distance (unit insert/delete/substitute costs)."""
    a, b = list(a), list(b)
    prev = np.arange(len(b) + 1)
    for i, tok in enumerate(a, start=1):
        cur = np.empty(len(b) + 1, dtype=np.int64)
        cur[0] = i
        for j, ref_tok in enumerate(b, start=1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (tok != ref_tok))
        prev = cur
    return int(prev[-1])


def wer(hypotheses, references) -> float:
    """Total edit distance over total reference tokens; 0.0 on two empty
    corpora, inf when edits exist but the references are empty."""
    hypotheses, references = list(hypotheses), list(references)
    if len(hypotheses) != len(references):
        raise ValidationError(
            f"need aligned corpora, got {len(hypotheses)} hypotheses and {len(references)} references"
        )
    edits = sum(edit_distance(h, r) for h, r in zip(hypotheses, references))
    total = sum(len(r) for r in references)
    if total == 0:
        return 0.0 if edits == 0 else math.inf
    return edits / total


# ---------------------------------------------------------------------------
# Checkpoint evaluation
# ---------------------------------------------------------------------------


def evaluate_checkpoint(checkpoint_path: str, corpus: D.ParallelCorpus, out_dir: str,
                        num_bins: int = C.DEFAULT_BINS, max_tokens: int = 512,
                        split: str = "test") -> MetricsReport:
    """Score one frozen model on a corpus split and write every artifact.

    Produces reliability and histogram CSVs, hypothesis/reference dumps, and
    metrics.json under ``out_dir``. The model reads at temperature 1 — the
    report states the temperature so downstream comparisons stay honest.
    """
    params, extra = M.load_checkpoint(checkpoint_path)
    if params.config.vocab_size != len(corpus.vocabulary):
        raise CheckpointError(
            f"checkpoint vocabulary size {params.config.vocab_size} does not match "
            f"the corpus ({len(corpus.vocabulary)} tokens)"
        )
    stamp = extra.get("vocab_sha256")
    if stamp is not None and stamp != corpus.vocabulary.sha256():
        raise CheckpointError("checkpoint was trained with a different vocabulary than this corpus")
    pairs = corpus.split(split)
    if not pairs:
        raise ValidationError(f"the {split!r} split is empty")

    vocab = corpus.vocabulary
    batches, skipped = D.make_batches(pairs, vocab, max_tokens, shuffle=False)
    if not batches:
        raise ValidationError(f"every {split!r} pair exceeded the token budget ({skipped} skipped)")
    records = C.collect_next_token_records(params, batches)
    bins = C.bin_predictions(records, num_bins)
    nll = T.mean_valid_nll(params, batches)

    sources = [vocab.encode(src) for src, _ in pairs]
    hyp_ids = greedy_decode(params, sources)
    ref_ids = [vocab.encode(tgt) for _, tgt in pairs]
    results = [
        DecodeResult(
            hypothesis_ids=tuple(h),
            hypothesis=detokenize(vocab.decode(h), corpus.tokenization),
            reference=detokenize(tgt, corpus.tokenization),
        )
        for h, (_, tgt) in zip(hyp_ids, pairs)
    ]

    os.makedirs(out_dir, exist_ok=True)
    paths = {name: os.path.join(out_dir, name) for name in
             ("reliability.csv", "histogram.csv", "hypotheses.txt", "references.txt", "metrics.json")}
    C.write_reliability_csv(paths["reliability.csv"], bins)
    C.write_histogram_csv(paths["histogram.csv"], bins)
    with open(paths["hypotheses.txt"], "w") as fh:
        fh.writelines(r.hypothesis + "\n" for r in results)
    with open(paths["references.txt"], "w") as fh:
        fh.writelines(r.reference + "\n" for r in results)

    report = MetricsReport(
        split=split,
        bleu=bleu(hyp_ids, ref_ids),
        wer=wer(hyp_ids, ref_ids),
        nll=nll,
        ece=C.ece(bins),
        mce=C.mce(bins),
        accuracy=C.accuracy(records),
        num_records=len(records),
        num_sentences=len(pairs),
        temperature=1.0,
        reliability_csv="reliability.csv",
        histogram_csv="histogram.csv",
        hypotheses_path="hypotheses.txt",
        references_path="references.txt",
    )
    with open(paths["metrics.json"], "w") as fh:
        json.dump(report.to_json(), fh, sort_keys=True, indent=2)
        fh.write("\n")
    return report
