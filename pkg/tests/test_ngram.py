import itertools
import math
from collections import Counter

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from domain_ensemble.corpus import BOS_ID, EOS_ID, Vocabulary
from domain_ensemble.ngram import (log_prob_sentence, posterior_from_logprobs, read_arpa, source_task_posterior,
                                   train_ngram, write_arpa)


def naive_logprob(corpus, order, V, D, sentence):
    """Interpolated absolute discounting straight from raw counts.

    p(w | c) = max(n(c w) - D, 0) / n(c) + D * N1+(c .) / n(c) * p(w | c[1:])
    for contexts seen in training, p(w | c[1:]) otherwise, and a uniform
    floor over predictable tokens below the unigram level.
    """
    grams = Counter()
    for sent in corpus:
        padded = [BOS_ID] * (order - 1) + list(sent) + [EOS_ID]
        for j in range(order - 1, len(padded)):
            for n in range(order):
                grams[tuple(padded[j - n : j + 1])] += 1

    def prob(w, ctx):
        ctx_total = sum(c for g, c in grams.items() if len(g) == len(ctx) + 1 and g[:-1] == ctx)
        if len(ctx) == 0:
            types = sum(1 for g in grams if len(g) == 1)
            return max(grams[(w,)] - D, 0) / ctx_total + D * types / ctx_total / (V - 1)
        lower = prob(w, ctx[1:])
        if ctx_total == 0:
            return lower
        followers = sum(1 for g in grams if len(g) == len(ctx) + 1 and g[:-1] == ctx)
        return max(grams[ctx + (w,)] - D, 0) / ctx_total + D * followers / ctx_total * lower

    padded = [BOS_ID] * (order - 1) + list(sentence) + [EOS_ID]
    return sum(math.log(prob(padded[j], tuple(padded[j - order + 1 : j]))) for j in range(order - 1, len(padded)))


def random_corpus(rng, n, V, max_len=6):
    return [tuple(int(t) for t in rng.integers(3, V, size=rng.integers(1, max_len + 1))) for _ in range(n)]


def test_unsmoothed_unigram_counts_padded_stream():
    a, b = 3, 4
    lm = train_ngram([(a, a, b)], order=1, vocab_size=5, discount=0.0)
    # predicted stream "a a b </s>"; begin markers are never predicted
    assert math.exp(lm.logprob(a)) == pytest.approx(2 / 4)
    assert math.exp(lm.logprob(b)) == pytest.approx(1 / 4)
    assert math.exp(lm.logprob(EOS_ID)) == pytest.approx(1 / 4)
    assert lm.logprob(BOS_ID) == -math.inf


@pytest.mark.parametrize("order", [1, 2, 3, 4])
def test_matches_naive_backoff_walk(order):
    rng = np.random.default_rng(order)
    V = 8
    corpus = random_corpus(rng, 25, V)
    lm = train_ngram(corpus, order=order, vocab_size=V, discount=0.75)
    queries = random_corpus(rng, 15, V, max_len=8) + corpus[:5]
    for x in queries:
        assert log_prob_sentence(lm, x) == pytest.approx(naive_logprob(corpus, order, V, 0.75, x), abs=1e-9)


def test_conditional_distributions_normalize():
    rng = np.random.default_rng(7)
    V = 12
    lm = train_ngram(random_corpus(rng, 60, V), order=4, vocab_size=V)
    contexts = list(lm.contexts())
    contexts += [tuple(int(t) for t in rng.integers(0, V, size=k)) for k in (1, 2, 3) for _ in range(20)]
    idx = rng.choice(len(contexts), size=100, replace=False)
    for i in idx:
        assert lm.distribution(contexts[i]).sum() == pytest.approx(1.0, abs=1e-6)


def test_unseen_token_gets_probability():
    lm = train_ngram([(3, 4, 3)], order=3, vocab_size=8)
    assert math.isfinite(lm.logprob(7, (3, 4)))
    assert lm.logprob(7, (3, 4)) < lm.logprob(3, (3, 4))


def test_training_sentence_is_most_probable_of_its_length():
    sent = (3, 5, 4)
    lm = train_ngram([sent] * 3, order=4, vocab_size=6)
    best = max(itertools.product([3, 4, 5], repeat=3), key=lambda x: log_prob_sentence(lm, x))
    assert best == sent


def test_log_prob_is_chain_rule_sum():
    lm = train_ngram([(3, 4, 5), (4, 4, 3)], order=3, vocab_size=6)
    x = (4, 3, 5)
    padded = [BOS_ID, BOS_ID, *x, EOS_ID]
    manual = sum(lm.logprob(padded[j], padded[j - 2 : j]) for j in range(2, len(padded)))
    assert log_prob_sentence(lm, x) == pytest.approx(manual, abs=1e-12)
    assert log_prob_sentence(lm, x) < 0


def test_training_errors():
    with pytest.raises(ValueError):
        train_ngram([], order=2)
    with pytest.raises(ValueError):
        train_ngram([(3,)], order=0)


def test_order_longer_than_sentences_is_valid():
    lm = train_ngram([(3,), (4,)], order=6, vocab_size=5)
    assert math.isfinite(log_prob_sentence(lm, (3, 4, 3, 4)))


def test_posterior_forced_arithmetic():
    post, fallback = posterior_from_logprobs([-10.0, -12.0])
    e2 = math.exp(2)
    assert not fallback
    assert post == pytest.approx([e2 / (e2 + 1), 1 / (e2 + 1)], abs=1e-12)
    assert post == pytest.approx([0.881, 0.119], abs=5e-4)


def test_posterior_trivial_cases():
    lm = train_ngram([(3, 4)], order=2, vocab_size=5)
    assert source_task_posterior([lm], (3, 4)) == pytest.approx([1.0])
    assert source_task_posterior([lm, lm], (4, 4, 3)) == pytest.approx([0.5, 0.5])


def test_posterior_all_minus_inf_falls_back_to_uniform():
    post, fallback = posterior_from_logprobs([-math.inf, -math.inf, -math.inf])
    assert fallback
    assert post == pytest.approx([1 / 3] * 3)


def test_posterior_with_priors():
    post, _ = posterior_from_logprobs([0.0, 0.0], priors=[0.25, 0.75])
    assert post == pytest.approx([0.25, 0.75])
    with pytest.raises(ValueError):
        posterior_from_logprobs([0.0, 0.0], priors=[0.5, 0.6])


logps = st.lists(st.floats(-500, 0), min_size=2, max_size=5)


@given(logps, st.floats(-1000, 1000))
def test_posterior_invariant_to_common_shift(values, shift):
    a, _ = posterior_from_logprobs(values)
    b, _ = posterior_from_logprobs([v + shift for v in values])
    assert np.allclose(a, b, atol=1e-9)
    assert a.sum() == pytest.approx(1.0, abs=1e-9)


@given(logps, st.integers(0, 4), st.floats(0.01, 5))
def test_posterior_monotone_in_own_score(values, k, bump):
    k = k % len(values)
    before, _ = posterior_from_logprobs(values)
    raised = list(values)
    raised[k] += bump
    after, _ = posterior_from_logprobs(raised)
    if before[k] < 1 - 1e-12:
        assert after[k] > before[k]


def test_arpa_round_trip(tmp_path):
    rng = np.random.default_rng(3)
    V = 9
    corpus = random_corpus(rng, 40, V)
    lm = train_ngram(corpus, order=4, vocab_size=V)
    path = tmp_path / "lm.arpa"
    write_arpa(lm, path)
    back = read_arpa(path)
    assert (back.order, back.vocab_size, back.discount) == (lm.order, lm.vocab_size, lm.discount)
    for x in random_corpus(rng, 20, V, max_len=9):
        assert log_prob_sentence(back, x) == pytest.approx(log_prob_sentence(lm, x), abs=1e-8)


def test_arpa_layout_with_vocabulary(tmp_path):
    vocab = Vocabulary(["<unk>", "<s>", "</s>", "a", "b"])
    lm = train_ngram([(3, 3, 4)], order=2, vocab_size=5)
    path = tmp_path / "lm.arpa"
    write_arpa(lm, path, vocab)
    text = path.read_text()
    assert "\\data\\" in text and "\\1-grams:" in text and "\\2-grams:" in text and text.rstrip().endswith("\\end\\")
    two_grams = text.split("\\2-grams:")[1].split("\\end\\")[0].strip().splitlines()
    assert two_grams == sorted(two_grams, key=lambda r: tuple(vocab.index[t] for t in r.split("\t")[1].split()))
    for row in two_grams:
        log10p, gram = row.split("\t")[:2]
        assert len(gram.split(" ")) == 2 and float(log10p) <= 0
    back = read_arpa(path, vocab)
    assert log_prob_sentence(back, (3, 4)) == pytest.approx(log_prob_sentence(lm, (3, 4)), abs=1e-8)
