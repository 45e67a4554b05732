"""Synthetic translation corpora, vocabularies, batching, and corpus I/O.

The toy language pairs a source sentence with a token-aligned target drawn
from a stochastic dictionary: source token ``s<i>`` maps to its primary
translation with probability ``p_amb`` and to any other target token
uniformly otherwise. Because each position is conditionally independent
given the source token, the best achievable top-1 confidence is exactly
``p_amb`` — a known calibration reference point for everything downstream.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
from dataclasses import asdict, dataclass

import numpy as np

from gatedkd.errors import ConfigError, IngestionError, ValidationError
from gatedkd.model import Batch

log = logging.getLogger(__name__)

PAD_ID, BOS_ID, EOS_ID, UNK_ID = 0, 1, 2, 3
RESERVED = ("<pad>", "<bos>", "<eos>", "<unk>")

TOKENIZATIONS = ("whitespace", "char")


class Vocabulary:
    """Token <-> id mapping with four fixed leading ids (pad/bos/eos/unk)."""

    def __init__(self, tokens: list[str]):
        if list(tokens[:4]) != list(RESERVED):
            raise ValidationError("vocabulary must start with the reserved tokens")
        if len(set(tokens)) != len(tokens):
            raise ValidationError("vocabulary contains duplicate tokens")
        self.id_to_token = list(tokens)
        self.token_to_id = {t: i for i, t in enumerate(tokens)}

    def __len__(self) -> int:
        return len(self.id_to_token)

    @classmethod
    def from_counts(cls, counts: dict[str, int], max_tokens: int | None = None) -> "Vocabulary":
        """Order content tokens by descending frequency, ties lexicographic.

        ``max_tokens`` caps the number of *content* tokens kept; everything
        else encodes to <unk>.
        """
        items = [(t, n) for t, n in counts.items() if t not in RESERVED]
        items.sort(key=lambda kv: (-kv[1], kv[0]))
        if max_tokens is not None:
            if max_tokens < 1:
                raise ValidationError(f"max_tokens must be positive, got {max_tokens}")
            items = items[:max_tokens]
        return cls(list(RESERVED) + [t for t, _ in items])

    def encode(self, tokens: list[str]) -> list[int]:
        return [self.token_to_id.get(t, UNK_ID) for t in tokens]

    def decode(self, ids, skip_special: bool = True) -> list[str]:
        out = []
        for i in ids:
            if skip_special and i in (PAD_ID, BOS_ID, EOS_ID):
                continue
            if not 0 <= i < len(self.id_to_token):
                raise ValidationError(f"id {i} outside the vocabulary")
            out.append(self.id_to_token[i])
        return out

    def to_json(self) -> dict[str, int]:
        return dict(self.token_to_id)

    @classmethod
    def from_json(cls, mapping: dict[str, int]) -> "Vocabulary":
        if sorted(mapping.values()) != list(range(len(mapping))):
            raise IngestionError("vocabulary ids must be a dense 0..n-1 range")
        tokens = [None] * len(mapping)
        for t, i in mapping.items():
            tokens[i] = t
        return cls(tokens)

    def sha256(self) -> str:
        return hashlib.sha256("\n".join(self.id_to_token).encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class ToyGrammar:
    """Stochastic token-aligned dictionary between two closed vocabularies."""

    source_vocab_size: int
    target_vocab_size: int
    p_amb: float
    min_len: int
    max_len: int
    noise_seed: int

    def __post_init__(self):
        if self.source_vocab_size < 1 or self.target_vocab_size < 2:
            raise ConfigError(
                f"grammar needs >= 1 source and >= 2 target types, got "
                f"{self.source_vocab_size}/{self.target_vocab_size}"
            )
        if not 0.0 < self.p_amb <= 1.0:
            raise ConfigError(f"p_amb must lie in (0, 1], got {self.p_amb}")
        if not 1 <= self.min_len <= self.max_len:
            raise ConfigError(f"bad length range [{self.min_len}, {self.max_len}]")

    def primary_targets(self) -> np.ndarray:
        """Primary translation (target type index) of each source type."""
        perm = np.random.default_rng(np.random.SeedSequence(self.noise_seed)).permutation(self.target_vocab_size)
        return perm[np.arange(self.source_vocab_size) % self.target_vocab_size]

    def bayes_confidence(self) -> float:
        """Top-1 probability of the true conditional at every position."""
        other = (1.0 - self.p_amb) / (self.target_vocab_size - 1)
        return max(self.p_amb, other)

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, payload: dict) -> "ToyGrammar":
        try:
            return cls(**payload)
        except TypeError as exc:
            raise IngestionError(f"grammar file has wrong fields: {exc}") from exc


@dataclass
class ParallelCorpus:
    train: list[tuple[list[str], list[str]]]
    valid: list[tuple[list[str], list[str]]]
    test: list[tuple[list[str], list[str]]]
    vocabulary: Vocabulary
    tokenization: str = "whitespace"
    grammar: ToyGrammar | None = None

    def split(self, name: str) -> list[tuple[list[str], list[str]]]:
        if name not in ("train", "valid", "test"):
            raise ValidationError(f"unknown split {name!r}")
        return getattr(self, name)


def generate_corpus(grammar: ToyGrammar, n_pairs: int, seed: int) -> ParallelCorpus:
    """Sample aligned sentence pairs and carve deterministic 80/10/10 splits."""
    if n_pairs < 10:
        raise ValidationError(f"need at least 10 pairs for three splits, got {n_pairs}")
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    primary = grammar.primary_targets()
    vt = grammar.target_vocab_size
    pairs = []
    for _ in range(n_pairs):
        length = int(rng.integers(grammar.min_len, grammar.max_len + 1))
        src = rng.integers(0, grammar.source_vocab_size, size=length)
        tgt = primary[src].copy()
        flip = rng.random(length) >= grammar.p_amb
        if flip.any():
            alts = rng.integers(0, vt - 1, size=int(flip.sum()))
            alts += alts >= tgt[flip]  # skip over the primary choice
            tgt[flip] = alts
        pairs.append(([f"s{i}" for i in src], [f"t{j}" for j in tgt]))

    counts: dict[str, int] = {}
    for src_toks, tgt_toks in pairs:
        for t in src_toks + tgt_toks:
            counts[t] = counts.get(t, 0) + 1
    vocab = Vocabulary.from_counts(counts)

    n80, n90 = int(n_pairs * 0.8), int(n_pairs * 0.9)
    return ParallelCorpus(
        train=pairs[:n80], valid=pairs[n80:n90], test=pairs[n90:],
        vocabulary=vocab, tokenization="whitespace", grammar=grammar,
    )


def ingest_parallel_text(source_path: str, target_path: str, tokenization: str = "whitespace",
                         max_vocab: int | None = None) -> tuple[list, Vocabulary, int]:
    """Read two aligned text files into token pairs plus a shared vocabulary.

    Returns (pairs, vocabulary, skipped) where skipped counts pairs dropped
    because one side tokenized to nothing. Misaligned line counts abort.
    """
    if tokenization not in TOKENIZATIONS:
        raise ConfigError(f"unknown tokenization {tokenization!r}; pick one of {TOKENIZATIONS}")
    with open(source_path, encoding="utf-8") as fh:
        src_lines = fh.read().splitlines()
    with open(target_path, encoding="utf-8") as fh:
        tgt_lines = fh.read().splitlines()
    if len(src_lines) != len(tgt_lines):
        raise IngestionError(
            f"{source_path} has {len(src_lines)} lines but {target_path} has {len(tgt_lines)}"
        )
    pairs, skipped = [], 0
    for s, t in zip(src_lines, tgt_lines):
        s_toks = s.split() if tokenization == "whitespace" else list(s)
        t_toks = t.split() if tokenization == "whitespace" else list(t)
        if not s_toks or not t_toks:
            skipped += 1
            continue
        pairs.append((s_toks, t_toks))
    if skipped:
        log.warning("dropped %d empty pairs during ingestion", skipped)
    if not pairs:
        raise IngestionError("no usable sentence pairs after ingestion")
    counts: dict[str, int] = {}
    for s_toks, t_toks in pairs:
        for tok in s_toks + t_toks:
            counts[tok] = counts.get(tok, 0) + 1
    return pairs, Vocabulary.from_counts(counts, max_tokens=max_vocab), skipped


def unigram_counts(pairs, vocab: Vocabulary) -> np.ndarray:
    """Target-side token frequencies over gold positions (EOS included)."""
    counts = np.zeros(len(vocab))
    for _, tgt in pairs:
        for i in vocab.encode(tgt):
            counts[i] += 1.0
        counts[EOS_ID] += 1.0
    return counts


def make_batches(pairs, vocab: Vocabulary, max_tokens: int, seed: int | None = None,
                 shuffle: bool = True) -> tuple[list[Batch], int]:
    """Length-bucketed batches under a real-token budget.

    Pairs are (optionally) shuffled, stably sorted by target then source
    length so same-length pairs keep their shuffled order, and packed
    greedily until a batch's unpadded token count would pass ``max_tokens``.
    Oversized single pairs are skipped and counted, never truncated.
    """
    if max_tokens < 4:
        raise ValidationError(f"max_tokens too small to hold any pair, got {max_tokens}")
    encoded = []
    skipped = 0
    for src_toks, tgt_toks in pairs:
        src = vocab.encode(src_toks)
        tgt = [BOS_ID] + vocab.encode(tgt_toks) + [EOS_ID]
        if not src_toks or not tgt_toks:
            skipped += 1
            continue
        if len(src) + len(tgt) > max_tokens:
            skipped += 1
            continue
        encoded.append((src, tgt))
    if skipped:
        log.warning("skipped %d pairs (empty or over the %d-token budget)", skipped, max_tokens)
    if not encoded:
        return [], skipped

    order = np.arange(len(encoded))
    rng = np.random.default_rng(np.random.SeedSequence(seed)) if seed is not None else None
    if shuffle and rng is not None:
        order = rng.permutation(order)
    order = sorted(order, key=lambda i: (len(encoded[i][1]), len(encoded[i][0])))

    groups, current, budget = [], [], 0
    for i in order:
        cost = len(encoded[i][0]) + len(encoded[i][1])
        if current and budget + cost > max_tokens:
            groups.append(current)
            current, budget = [], 0
        current.append(i)
        budget += cost
    if current:
        groups.append(current)
    if shuffle and rng is not None:
        rng.shuffle(groups)

    batches = []
    for group in groups:
        srcs = [encoded[i][0] for i in group]
        tgts = [encoded[i][1] for i in group]
        s_len, t_len = max(map(len, srcs)), max(map(len, tgts))
        b = len(group)
        source_ids = np.full((b, s_len), PAD_ID, dtype=np.int64)
        target_ids = np.full((b, t_len), PAD_ID, dtype=np.int64)
        source_mask = np.zeros((b, s_len), dtype=bool)
        target_mask = np.zeros((b, t_len), dtype=bool)
        for r, (s, t) in enumerate(zip(srcs, tgts)):
            source_ids[r, : len(s)] = s
            source_mask[r, : len(s)] = True
            target_ids[r, : len(t)] = t
            target_mask[r, : len(t)] = True
        batches.append(Batch(source_ids, source_mask, target_ids, target_mask))
    return batches, skipped


# ---------------------------------------------------------------------------
# Corpus directory layout: {train,valid,test}.{src,tgt} + vocab.json + meta.json
# ---------------------------------------------------------------------------


def _join(tokens: list[str], tokenization: str) -> str:
    return " ".join(tokens) if tokenization == "whitespace" else "".join(tokens)


def save_corpus(corpus: ParallelCorpus, out_dir: str) -> list[str]:
    """Write the corpus as plain text plus JSON sidecars; returns the paths."""
    os.makedirs(out_dir, exist_ok=True)
    written = []
    for split in ("train", "valid", "test"):
        for side, col in (("src", 0), ("tgt", 1)):
            path = os.path.join(out_dir, f"{split}.{side}")
            with open(path, "w", encoding="utf-8") as fh:
                for pair in corpus.split(split):
                    fh.write(_join(pair[col], corpus.tokenization) + "\n")
            written.append(path)
    vocab_path = os.path.join(out_dir, "vocab.json")
    with open(vocab_path, "w", encoding="utf-8") as fh:
        json.dump(corpus.vocabulary.to_json(), fh, sort_keys=True, indent=2)
        fh.write("\n")
    written.append(vocab_path)
    meta_path = os.path.join(out_dir, "meta.json")
    with open(meta_path, "w", encoding="utf-8") as fh:
        meta = {
            "tokenization": corpus.tokenization,
            "grammar": corpus.grammar.to_json() if corpus.grammar else None,
            "sizes": {s: len(corpus.split(s)) for s in ("train", "valid", "test")},
        }
        json.dump(meta, fh, sort_keys=True, indent=2)
        fh.write("\n")
    written.append(meta_path)
    return written


def load_corpus(corpus_dir: str) -> ParallelCorpus:
    meta_path = os.path.join(corpus_dir, "meta.json")
    with open(meta_path, encoding="utf-8") as fh:
        try:
            meta = json.load(fh)
        except json.JSONDecodeError as exc:
            raise IngestionError(f"{meta_path} is not valid JSON: {exc}") from exc
    tokenization = meta.get("tokenization", "whitespace")
    if tokenization not in TOKENIZATIONS:
        raise IngestionError(f"{meta_path} names unknown tokenization {tokenization!r}")
    splits = {}
    for split in ("train", "valid", "test"):
        src_path = os.path.join(corpus_dir, f"{split}.src")
        tgt_path = os.path.join(corpus_dir, f"{split}.tgt")
        with open(src_path, encoding="utf-8") as fh:
            src_lines = fh.read().splitlines()
        with open(tgt_path, encoding="utf-8") as fh:
            tgt_lines = fh.read().splitlines()
        if len(src_lines) != len(tgt_lines):
            raise IngestionError(f"{split} split is misaligned: {len(src_lines)} vs {len(tgt_lines)} lines")
        pairs = []
        for s, t in zip(src_lines, tgt_lines):
            s_toks = s.split() if tokenization == "whitespace" else list(s)
            t_toks = t.split() if tokenization == "whitespace" else list(t)
            pairs.append((s_toks, t_toks))
        splits[split] = pairs
    with open(os.path.join(corpus_dir, "vocab.json"), encoding="utf-8") as fh:
        vocab = Vocabulary.from_json(json.load(fh))
    grammar = ToyGrammar.from_json(meta["grammar"]) if meta.get("grammar") else None
    return ParallelCorpus(
        train=splits["train"], valid=splits["valid"], test=splits["test"],
        vocabulary=vocab, tokenization=tokenization, grammar=grammar,
    )
