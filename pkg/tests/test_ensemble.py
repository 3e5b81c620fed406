import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from domain_ensemble.ensemble import (SCHEMES, EnsembleSpec, LambdaMatrix, TaskPosteriorState, combined_step,
                                      ensemble_weights, estimate_lambda, identity_lambda, init_posterior, logsumexp,
                                      make_spec, uniform_lambda, update_posterior)
from domain_ensemble.ngram import log_prob_sentence, source_task_posterior, train_ngram


class FixedModel:
    """Returns the same distribution at every step."""

    def __init__(self, probs):
        self.p = np.asarray(probs, dtype=float)
        self.vocab_size = len(self.p)

    def step(self, x, h):
        return self.p.copy()

    def step_batch(self, x, histories):
        return np.stack([self.p] * len(histories))


def random_lambda(rng, K, T):
    return LambdaMatrix(rng.dirichlet(np.ones(K), size=T).T)


def from_scratch_posterior(models, lam, prior, x, history):
    """p(t | h, x) proportional to p(t | x) * prod_i sum_k lam[k, t] p_k(y_i | h_i, x), in plain probabilities."""
    T = lam.shape[1]
    joint = np.array(prior, dtype=float)
    for i, y in enumerate(history):
        for t in range(T):
            joint[t] *= sum(lam[k, t] * m.step(x, history[:i])[y] for k, m in enumerate(models))
    return joint / joint.sum()


def run_history(spec, x, history):
    state = init_posterior(spec, x)
    for i, y in enumerate(history):
        probs = np.array([m.step(x, history[:i])[y] for m in spec.models])
        state = update_posterior(state, spec, probs)
    return state


def two_domain_lms():
    # domain 0 uses tokens 3..5, domain 1 uses 6..8; both share token 9
    rng = np.random.default_rng(0)
    dom0 = [tuple(int(t) for t in rng.choice([3, 4, 5, 9], size=4)) for _ in range(50)]
    dom1 = [tuple(int(t) for t in rng.choice([6, 7, 8, 9], size=4)) for _ in range(50)]
    return [train_ngram(dom0, order=3, vocab_size=10), train_ngram(dom1, order=3, vocab_size=10)], dom0, dom1


def test_logsumexp_matches_naive_and_handles_infinities():
    a = np.array([[0.5, -1.0, 2.0], [-np.inf, -np.inf, -np.inf]])
    assert logsumexp(a[0]) == pytest.approx(math.log(sum(math.exp(v) for v in a[0])), abs=1e-14)
    assert logsumexp(a[1]) == -np.inf
    assert logsumexp(np.array([1000.0, 1000.0])) == pytest.approx(1000 + math.log(2))
    assert np.allclose(logsumexp(a, axis=1)[:1], [logsumexp(a[0])])


def test_lambda_matrix_validation_and_tsv():
    with pytest.raises(ValueError):
        LambdaMatrix(np.array([[0.5, 0.5], [0.6, 0.5]]))
    with pytest.raises(ValueError):
        LambdaMatrix(np.array([[1.5], [-0.5]]))
    lam = LambdaMatrix(np.array([[0.75, 0.2], [0.25, 0.8]]), ("m1", "m2"), ("news", "bio"))
    back = LambdaMatrix.from_tsv(lam.to_tsv())
    assert np.array_equal(back.values, lam.values)
    assert back.models == ("m1", "m2") and back.tasks == ("news", "bio")


def test_identity_lambda():
    assert np.array_equal(identity_lambda(2).values, [[1, 0], [0, 1]])
    assert np.allclose(identity_lambda(4).values.sum(axis=0), 1)
    with pytest.raises(ValueError):
        identity_lambda(2, 3)


def test_estimate_lambda_trivial_cases():
    lms, dom0, dom1 = two_domain_lms()
    assert np.array_equal(estimate_lambda(lms[:1], [dom0[:5]]).values, [[1.0]])
    same = estimate_lambda([lms[0], lms[0]], [dom0[:5], dom1[:5]])
    assert np.allclose(same.values, 0.5, atol=1e-12)


def test_estimate_lambda_forced_arithmetic(monkeypatch):
    import domain_ensemble.ensemble as ens

    # stand-in LMs 0 and 1; one validation sentence per task, so G-bar is G itself
    values = {(0, 0): 0.03, (1, 0): 0.01, (0, 1): 0.02, (1, 1): 0.02}
    monkeypatch.setattr(ens, "log_prob_sentence", lambda lm, x: math.log(values[(lm, x[0])]))
    lam = estimate_lambda([0, 1], [[(0,)], [(1,)]], normalize=False)
    assert lam.values[:, 0] == pytest.approx([0.75, 0.25], abs=1e-12)
    assert lam.values[:, 1] == pytest.approx([0.5, 0.5], abs=1e-12)


def test_estimate_lambda_normalized_and_raw_modes():
    lms, dom0, dom1 = two_domain_lms()
    valid = [dom0[:20], dom1[:20]]
    for normalize in (True, False):
        lam = estimate_lambda(lms, valid, normalize=normalize)
        assert np.allclose(lam.values.sum(axis=0), 1, atol=1e-9)
        assert lam.values[0, 0] > 0.9 and lam.values[1, 1] > 0.9
    # normalized mode: sum over sentences of exp(log G / |x|)
    x_scores = [[math.exp(log_prob_sentence(lm, x) / len(x)) for x in valid[0]] for lm in lms]
    gbar = np.array([sum(s) for s in x_scores])
    assert estimate_lambda(lms, valid).values[:, 0] == pytest.approx(gbar / gbar.sum(), rel=1e-9)
    with pytest.raises(ValueError):
        estimate_lambda(lms, [dom0[:3], []])


def test_init_posterior_per_scheme():
    lms, dom0, dom1 = two_domain_lms()
    models = [FixedModel([0, 0, 0.5, 0.5]), FixedModel([0, 0, 0.2, 0.8])]
    x = dom1[0]
    lam = estimate_lambda(lms, [dom0[:10], dom1[:10]])
    lm_post = source_task_posterior(lms, x)
    for scheme in SCHEMES:
        spec = make_spec(scheme, models, lms, lam)
        post = init_posterior(spec, x).posterior
        if scheme in ("is", "bi_is"):
            assert np.allclose(post, lm_post, atol=1e-12)
        else:
            assert np.allclose(post, [0.5, 0.5], atol=1e-15)
    three = make_spec("bi", [models[0]] * 3, lam=uniform_lambda(3))
    assert np.allclose(init_posterior(three, x).posterior, [1 / 3] * 3)


def test_is_prior_on_exclusive_source():
    lms, dom0, dom1 = two_domain_lms()
    models = [FixedModel([0, 0, 0.5, 0.5])] * 2
    spec = make_spec("is", models, lms)
    x = (6, 7, 8, 6, 7)
    assert init_posterior(spec, x).posterior[1] > 0.9


def test_scheme_conformance():
    """Each scheme pairs the right prior with the right lambda and update rule."""
    lms, dom0, dom1 = two_domain_lms()
    models = [FixedModel([0, 0, 0.3, 0.7]), FixedModel([0, 0, 0.6, 0.4])]
    lam = estimate_lambda(lms, [dom0[:10], dom1[:10]])
    table = {
        # scheme: (lambda, LM prior, adaptive)
        "uniform": (np.full((2, 2), 0.5), False, False),
        "is": (np.eye(2), True, False),
        "identity_bi": (np.eye(2), False, True),
        "bi": (lam.values, False, True),
        "bi_is": (lam.values, True, True),
    }
    x = dom0[1]
    for scheme, (values, lm_prior, adaptive) in table.items():
        spec = make_spec(scheme, models, lms, lam)
        assert np.array_equal(spec.lam.values, values)
        assert spec.adaptive is adaptive
        assert (len(spec.lms) == 2) is lm_prior
        state = init_posterior(spec, x)
        after = update_posterior(state, spec, [0.3, 0.6])
        assert np.array_equal(after.posterior, state.posterior) is not adaptive


def test_spec_validation():
    models = [FixedModel([0, 0, 0.5, 0.5])] * 2
    lam = LambdaMatrix(np.array([[0.7, 0.2], [0.3, 0.8]]))
    with pytest.raises(ValueError):
        EnsembleSpec(tuple(models), lam, "uniform")
    with pytest.raises(ValueError):
        EnsembleSpec(tuple(models), lam, "identity_bi")
    with pytest.raises(ValueError):
        EnsembleSpec(tuple(models), lam, "bi_is")          # needs LMs
    with pytest.raises(ValueError):
        EnsembleSpec(tuple(models[:1]), lam, "bi")
    with pytest.raises(ValueError):
        EnsembleSpec(tuple(models), lam, "mixture")
    with pytest.raises(ValueError):
        EnsembleSpec((models[0], FixedModel([0, 0, 1.0])), lam, "bi")
    with pytest.raises(ValueError):
        make_spec("bi", models)


def test_one_step_bayes():
    models = [FixedModel([0, 0, 0.1, 0.9]), FixedModel([0, 0, 0.9, 0.1])]
    spec = make_spec("identity_bi", models)
    state = update_posterior(init_posterior(spec, (3,)), spec, [0.9, 0.1])
    assert np.allclose(state.posterior, [0.9, 0.1], atol=1e-12)
    assert np.allclose(ensemble_weights(state, spec), state.posterior, atol=0)


def test_weights_forced_arithmetic():
    lam = LambdaMatrix(np.array([[0.75, 0.25], [0.25, 0.75]]))
    spec = EnsembleSpec((FixedModel([0, 0, 1.0]),) * 2, lam, "bi")
    state = TaskPosteriorState(np.log(np.array([0.8, 0.2])))
    assert ensemble_weights(state, spec) == pytest.approx([0.65, 0.35], abs=1e-12)


def test_identical_models_keep_prior(hash_model):
    m = hash_model(6, seed=3)
    spec = make_spec("bi", [m, m], lam=LambdaMatrix(np.array([[0.8, 0.3], [0.2, 0.7]])))
    state = run_history(spec, (3, 4), (3, 5, 4, 4, 3))
    assert np.allclose(state.posterior, [0.5, 0.5], atol=1e-12)


def test_update_rejects_impossible_token():
    spec = make_spec("identity_bi", [FixedModel([0, 0, 0.5, 0.5])] * 2)
    with pytest.raises(ValueError):
        update_posterior(init_posterior(spec, (3,)), spec, [0.0, 0.0])


@pytest.mark.parametrize("K", [1, 2, 3, 4])
def test_uniform_reduction_identity(K, hash_model):
    models = [hash_model(7, seed=k) for k in range(K)]
    spec = make_spec("bi", models, lam=uniform_lambda(K))
    rng = np.random.default_rng(K)
    for _ in range(10):
        history = tuple(int(t) for t in rng.integers(2, 7, size=15))
        state = init_posterior(spec, (3, 4))
        for i, y in enumerate(history):
            assert np.max(np.abs(ensemble_weights(state, spec) - 1 / K)) <= 1e-12
            state = update_posterior(state, spec, [m.step((3, 4), history[:i])[y] for m in models])
        assert np.max(np.abs(ensemble_weights(state, spec) - 1 / K)) <= 1e-12


def test_incremental_posterior_equals_from_scratch(hash_model):
    rng = np.random.default_rng(42)
    worst = 0.0
    for case in range(50):
        K = int(rng.integers(1, 5))
        V = int(rng.integers(4, 8))
        models = [hash_model(V, seed=100 * case + k) for k in range(K)]
        lam = random_lambda(rng, K, K)
        x = tuple(int(t) for t in rng.integers(3, 9, size=3))
        history = tuple(int(t) for t in rng.integers(2, V, size=rng.integers(0, 21)))
        spec = EnsembleSpec(tuple(models), lam, "bi")
        post = run_history(spec, x, history).posterior
        oracle = from_scratch_posterior(models, lam.values, np.full(K, 1 / K), x, history)
        worst = max(worst, np.max(np.abs(post - oracle)))
    assert worst <= 1e-9


def test_combined_step_brute_force(hash_model):
    rng = np.random.default_rng(5)
    for case in range(20):
        K = T = int(rng.integers(1, 5))
        V = 6
        models = [hash_model(V, seed=case * 10 + k) for k in range(K)]
        lam = random_lambda(rng, K, T)
        spec = EnsembleSpec(tuple(models), lam, "bi")
        x, history = (3, 5), tuple(int(t) for t in rng.integers(2, V, size=4))
        state = run_history(spec, x, history)
        post = from_scratch_posterior(models, lam.values, np.full(T, 1 / T), x, history)
        expected = np.zeros(V)
        for y in range(V):
            for t in range(T):
                for k in range(K):
                    expected[y] += post[t] * lam.values[k, t] * models[k].step(x, history)[y]
        got = combined_step(spec, state, x, history)
        assert np.allclose(got, expected, atol=1e-12)
        assert got.sum() == pytest.approx(1.0, abs=1e-9)


def test_combined_step_special_cases(hash_model):
    a, b = hash_model(5, seed=1), hash_model(5, seed=2)
    single = make_spec("bi", [a], lam=uniform_lambda(1))
    assert np.allclose(combined_step(single, init_posterior(single, (3,)), (3,), (4,)), a.step((3,), (4,)))
    uni = make_spec("uniform", [a, b])
    mean = (a.step((3,), (4,)) + b.step((3,), (4,))) / 2
    assert np.allclose(combined_step(uni, init_posterior(uni, (3,)), (3,), (4,)), mean, atol=1e-15)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 4), st.integers(1, 30))
def test_posterior_and_weights_stay_normalized(seed, K, steps):
    rng = np.random.default_rng(seed)
    T = int(rng.integers(1, 5))
    spec = EnsembleSpec(tuple(FixedModel([0, 0, 0.5, 0.5]) for _ in range(K)), random_lambda(rng, K, T), "bi")
    state = init_posterior(spec, (3,))
    for _ in range(steps):
        state = update_posterior(state, spec, rng.random(K) + 1e-3)
        assert state.posterior.sum() == pytest.approx(1.0, abs=1e-9)
        assert ensemble_weights(state, spec).sum() == pytest.approx(1.0, abs=1e-9)
        assert np.all(np.isfinite(state.alpha))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 4), st.integers(2, 15))
def test_posterior_concentrates_on_best_model(seed, K, steps):
    rng = np.random.default_rng(seed)
    spec = make_spec("identity_bi", [FixedModel([0, 0, 0.5, 0.5])] * K)
    k = int(rng.integers(K))
    state = init_posterior(spec, (3,))
    last = state.posterior[k]
    for _ in range(steps):
        probs = rng.uniform(0.01, 0.5, size=K)
        probs[k] = probs.max() + rng.uniform(0.01, 0.4)
        state = update_posterior(state, spec, probs)
        assert state.posterior[k] > last
        last = state.posterior[k]
