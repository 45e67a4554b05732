"""Decoding and surface-metric behavior.

BLEU gets a fully hand-computed oracle plus edge cases around smoothing and
the brevity penalty; WER is checked against an independent recursive
edit-distance oracle. The end-to-end cases train a tiny model on an
unambiguous (deterministic-mapping) corpus where the right answers are
knowable: decoding should echo the mapped source almost perfectly.
"""

import functools
import json
import math

import numpy as np
import pytest

from gatedkd import data as D
from gatedkd import evaluation as E
from gatedkd import model as M
from gatedkd import training as T
from gatedkd.errors import CheckpointError, ValidationError


# ---------------------------------------------------------------------------
# BLEU
# ---------------------------------------------------------------------------


def test_bleu_perfect_match_is_one():
    corpus = [["a", "b", "c", "d", "e"], ["x", "y"], ["q", "r", "s"]]
    assert E.bleu(corpus, corpus) == 1.0


def test_bleu_hand_computed_case():
    # hyp 3 tokens, ref 4: unigram 3/3, bigram 2/2, trigram 1/1, and the
    # 4-gram order has no hypothesis n-grams at all (0/0 -> add-1 -> 1/1),
    # so the geometric mean is 1 and only the brevity penalty e^(1-4/3) bites
    got = E.bleu([["the", "cat", "sat"]], [["the", "cat", "sat", "down"]])
    assert got == pytest.approx(math.exp(1.0 - 4.0 / 3.0), rel=1e-12)


def test_bleu_zero_overlap_is_near_zero():
    hyp = [[f"h{i}{j}" for j in range(8)] for i in range(5)]
    ref = [[f"r{i}{j}" for j in range(8)] for i in range(5)]
    score = E.bleu(hyp, ref)
    assert 0.0 < score < 0.05  # add-1 smoothing keeps it positive


def test_bleu_clipping_counts_each_reference_token_once():
    # "the the the" vs "the cat": unigram matches clip at the single
    # reference "the", so 1/3 rather than 3/3
    got = E.bleu([["the", "the", "the"]], [["the", "cat"]])
    p1 = 1 / 3
    smoothed = [(0 + 1) / (2 + 1), (0 + 1) / (1 + 1), (0 + 1) / (0 + 1)]  # n=2,3,4
    want = math.exp((math.log(p1) + sum(math.log(p) for p in smoothed)) / 4)
    assert got == pytest.approx(want, rel=1e-12)  # hyp longer than ref: no penalty


def test_bleu_no_brevity_penalty_when_hypothesis_longer():
    hyp = [["a", "b", "c", "d"]]
    ref = [["a", "b", "c"]]
    p = [3 / 4, 2 / 3, 1 / 2, (0 + 1) / (1 + 1)]
    want = math.exp(sum(math.log(x) for x in p) / 4)
    assert E.bleu(hyp, ref) == pytest.approx(want, rel=1e-12)


def test_bleu_empty_hypotheses_score_zero():
    assert E.bleu([[], []], [["a"], ["b", "c"]]) == 0.0


def test_bleu_is_invariant_under_corpus_permutation():
    rng = np.random.default_rng(0)
    hyp = [[str(t) for t in rng.integers(0, 5, size=rng.integers(1, 9))] for _ in range(12)]
    ref = [[str(t) for t in rng.integers(0, 5, size=rng.integers(1, 9))] for _ in range(12)]
    perm = rng.permutation(12)
    straight = E.bleu(hyp, ref)
    shuffled = E.bleu([hyp[i] for i in perm], [ref[i] for i in perm])
    assert straight == pytest.approx(shuffled, rel=1e-12)


def test_bleu_rejects_misaligned_or_empty_corpora():
    with pytest.raises(ValidationError):
        E.bleu([["a"]], [["a"], ["b"]])
    with pytest.raises(ValidationError):
        E.bleu([], [])


# ---------------------------------------------------------------------------
# WER / edit distance
# ---------------------------------------------------------------------------


def _oracle_distance(a: tuple, b: tuple) -> int:
    @functools.cache
    def go(i: int, j: int) -> int:
        if i == 0:
            return j
        if j == 0:
            return i
        return min(go(i - 1, j) + 1, go(i, j - 1) + 1,
                   go(i - 1, j - 1) + (a[i - 1] != b[j - 1]))
    return go(len(a), len(b))


def test_wer_identical_is_zero():
    corpus = [["a", "b"], ["c"]]
    assert E.wer(corpus, corpus) == 0.0


def test_wer_empty_hypothesis_counts_all_deletions():
    assert E.wer([[]], [["a", "b", "c", "d"]]) == 1.0


def test_wer_single_substitution():
    assert E.wer([["a", "b", "c"]], [["a", "x", "c"]]) == pytest.approx(1 / 3)


def test_edit_distance_matches_recursive_oracle():
    rng = np.random.default_rng(7)
    for _ in range(40):
        a = tuple(rng.integers(0, 4, size=rng.integers(0, 8)))
        b = tuple(rng.integers(0, 4, size=rng.integers(0, 8)))
        assert E.edit_distance(a, b) == _oracle_distance(a, b)


def test_edit_distance_triangle_inequality():
    rng = np.random.default_rng(8)
    for _ in range(30):
        a, b, c = (tuple(rng.integers(0, 3, size=rng.integers(0, 7))) for _ in range(3))
        assert E.edit_distance(a, c) <= E.edit_distance(a, b) + E.edit_distance(b, c)


def test_wer_is_additive_over_splits():
    rng = np.random.default_rng(9)
    hyp = [[str(t) for t in rng.integers(0, 4, size=rng.integers(1, 6))] for _ in range(10)]
    ref = [[str(t) for t in rng.integers(0, 4, size=rng.integers(1, 6))] for _ in range(10)]
    whole = E.wer(hyp, ref)
    e1 = sum(E.edit_distance(h, r) for h, r in zip(hyp[:4], ref[:4]))
    e2 = sum(E.edit_distance(h, r) for h, r in zip(hyp[4:], ref[4:]))
    r1 = sum(len(r) for r in ref[:4])
    r2 = sum(len(r) for r in ref[4:])
    assert whole == pytest.approx((e1 + e2) / (r1 + r2), rel=1e-12)


def test_wer_empty_reference_edge_cases():
    assert E.wer([[]], [[]]) == 0.0
    assert E.wer([["a"]], [[]]) == math.inf
    with pytest.raises(ValidationError):
        E.wer([["a"]], [["a"], ["b"]])


def test_detokenize_modes():
    assert E.detokenize(["a", "bc"], "whitespace") == "a bc"
    assert E.detokenize(["a", "b", "c"], "char") == "abc"
    with pytest.raises(ValidationError):
        E.detokenize(["a"], "bpe")


# ---------------------------------------------------------------------------
# Greedy decoding mechanics (untrained model: structural properties only)
# ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def random_model():
    config = M.ModelConfig(vocab_size=11, max_len=12, embed_dim=8, ffn_dim=12)
    return M.ModelParams.init(config, 21)


def test_decode_emits_no_reserved_tokens(random_model):
    sources = [[4, 5, 6], [7], [8, 9, 10, 4]]
    for hyp in E.greedy_decode(random_model, sources):
        assert D.PAD_ID not in hyp
        assert D.BOS_ID not in hyp
        assert D.EOS_ID not in hyp
        assert len(hyp) <= random_model.config.max_len - 1


def test_decode_is_deterministic(random_model):
    sources = [[4, 5], [6, 7, 8]]
    assert E.greedy_decode(random_model, sources) == E.greedy_decode(random_model, sources)


def test_decode_respects_token_cap(random_model):
    hyps = E.greedy_decode(random_model, [[4, 5, 6]], max_new_tokens=1)
    assert len(hyps) == 1 and len(hyps[0]) <= 1


def test_decode_chunking_does_not_change_output(random_model):
    sources = [[4, 5, 6], [7], [8, 9], [10, 4, 5, 6, 7]]
    whole = E.greedy_decode(random_model, sources, batch_size=64)
    split = E.greedy_decode(random_model, sources, batch_size=2)
    assert whole == split


def test_decode_rejects_empty_source(random_model):
    with pytest.raises(ValidationError):
        E.greedy_decode(random_model, [[4], []])
    with pytest.raises(ValidationError):
        E.greedy_decode(random_model, [[4]], max_new_tokens=0)


def test_decode_empty_corpus_is_empty(random_model):
    assert E.greedy_decode(random_model, []) == []


# ---------------------------------------------------------------------------
# End-to-end: unambiguous corpus, trained model, full report
# ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def echo_setup(tmp_path_factory):
    """Deterministic token mapping (no ambiguity): a converged model should
    translate it almost perfectly, making metric expectations sharp."""
    grammar = D.ToyGrammar(source_vocab_size=6, target_vocab_size=6, p_amb=1.0,
                           min_len=2, max_len=5, noise_seed=1)
    corpus = D.generate_corpus(grammar, n_pairs=200, seed=13)
    cfg = T.TrainConfig(loss_mode="ce", epochs=40, seed=5, max_tokens=64,
                        peak_lr=1e-2, warmup_steps=20, embed_dim=32, ffn_dim=48)
    result = T.train(cfg, corpus)
    path = str(tmp_path_factory.mktemp("ckpt") / "echo.ckpt")
    M.save_checkpoint(path, result.params,
                      extra={"vocab_sha256": corpus.vocabulary.sha256()})
    return corpus, result, path


def test_trained_model_echoes_the_mapping(echo_setup):
    corpus, result, _ = echo_setup
    mapping = corpus.grammar.primary_targets()
    sources = [corpus.vocabulary.encode(src) for src, _ in corpus.train[:12]]
    hyps = E.greedy_decode(result.params, sources)
    exact = 0
    for (src_tokens, tgt_tokens), hyp in zip(corpus.train[:12], hyps):
        want = corpus.vocabulary.encode(tgt_tokens)
        exact += hyp == want
    assert exact >= 10  # near-perfect echo on training sentences
    assert mapping.shape == (6,)


def test_evaluate_checkpoint_writes_full_report(echo_setup, tmp_path):
    corpus, _, ckpt = echo_setup
    out = tmp_path / "report"
    report = E.evaluate_checkpoint(ckpt, corpus, str(out))

    assert report.split == "test"
    assert report.bleu > 0.9
    assert report.wer < 0.1
    assert report.ece < 0.15
    assert 0.0 <= report.mce <= 1.0
    assert report.accuracy > 0.9
    assert math.isfinite(report.nll)
    assert report.num_sentences == len(corpus.test)
    assert report.temperature == 1.0

    hyp_lines = open(out / report.hypotheses_path).read().splitlines()
    ref_lines = open(out / report.references_path).read().splitlines()
    assert len(hyp_lines) == len(ref_lines) == len(corpus.test)

    payload = json.loads(open(out / "metrics.json").read())
    assert payload == report.to_json()
    assert (out / "reliability.csv").exists() and (out / "histogram.csv").exists()


def test_report_ece_matches_recomputation(echo_setup):
    """The report's ECE must equal an independent pass over the same split."""
    import gatedkd.calibration as C

    corpus, result, ckpt = echo_setup
    report = E.evaluate_checkpoint(ckpt, corpus, "/tmp/gatedkd_ece_oracle")
    batches, _ = D.make_batches(corpus.test, corpus.vocabulary, 512, shuffle=False)
    records = C.collect_next_token_records(result.params, batches)
    assert C.ece(C.bin_predictions(records, 10)) == report.ece
    assert len(records) == report.num_records


def test_evaluate_rejects_foreign_vocabulary(echo_setup, tmp_path):
    """Same vocabulary *size*, different token inventory: the fingerprint
    stamped into the checkpoint must catch the swap."""
    corpus, _, ckpt = echo_setup
    other_grammar = D.ToyGrammar(source_vocab_size=5, target_vocab_size=7, p_amb=0.5,
                                 min_len=2, max_len=5, noise_seed=2)
    other = D.generate_corpus(other_grammar, n_pairs=120, seed=14)
    assert len(other.vocabulary) == len(corpus.vocabulary)
    assert other.vocabulary.sha256() != corpus.vocabulary.sha256()
    with pytest.raises(CheckpointError, match="different vocabulary"):
        E.evaluate_checkpoint(ckpt, other, str(tmp_path / "x"))


def test_evaluate_rejects_vocab_size_mismatch(echo_setup, tmp_path):
    corpus, _, _ = echo_setup
    small = M.ModelConfig(vocab_size=5, max_len=10, embed_dim=8, ffn_dim=8)
    ckpt = str(tmp_path / "small.ckpt")
    M.save_checkpoint(ckpt, M.ModelParams.init(small, 0))
    with pytest.raises(CheckpointError, match="vocabulary size"):
        E.evaluate_checkpoint(ckpt, corpus, str(tmp_path / "y"))
