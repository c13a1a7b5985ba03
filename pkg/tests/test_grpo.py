import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from conftest import mixed_backend, sample_groups
from ssrmt.errors import InvalidInput, UnsupportedBackend
from ssrmt.grpo import (
    GrpoConfig,
    clipped_surrogate,
    group_advantages,
    grpo_gradient,
    grpo_objective,
    kl_penalty,
    surrogate_terms,
)
from ssrmt.policy import HttpChatBackend, ToyBackend

finite = st.floats(min_value=-1e3, max_value=1e3, allow_nan=False)
rewards_st = hnp.arrays(np.float64, st.integers(1, 16), elements=finite)


def traces(draw, G, lo=-5.0):
    lengths = draw(st.lists(st.integers(1, 6), min_size=G, max_size=G))
    return [np.array(draw(st.lists(st.floats(lo, 0.0), min_size=n, max_size=n))) for n in lengths]


# advantages


def test_advantages_hand_case():
    a = group_advantages([1, 2, 3])
    np.testing.assert_allclose(a.values, [-1.224745, 0, 1.224745], atol=1e-6)
    assert a.group_mean == 2.0
    assert a.group_std == pytest.approx(np.sqrt(2 / 3))


def test_advantages_degenerate_groups():
    assert np.array_equal(group_advantages([5, 5, 5]).values, [0, 0, 0])
    assert np.array_equal(group_advantages([7]).values, [0])
    assert np.array_equal(group_advantages([1.0, 1.0 + 1e-12]).values, [0, 0])


@pytest.mark.parametrize("bad", [[], [1.0, float("nan")], [float("inf")]])
def test_advantages_reject_bad_input(bad):
    with pytest.raises(InvalidInput):
        group_advantages(bad)


@given(rewards_st)
def test_advantage_invariants(r):
    a = group_advantages(r)
    if r.std() > 1e-8:
        assert abs(a.values.mean()) <= 1e-9
        assert abs(a.values.std() - 1.0) <= 1e-9
    else:
        assert np.all(a.values == 0.0)


@given(hnp.arrays(np.float64, st.integers(2, 16), elements=st.floats(-10, 10)),
       st.floats(0.1, 10.0), st.floats(-10.0, 10.0))
def test_advantages_affine_invariant(r, scale, shift):
    if r.std() > 1e-3:
        np.testing.assert_allclose(group_advantages(scale * r + shift).values, group_advantages(r).values,
                                   atol=1e-7)


# surrogate


def test_ratio_one_gives_mean_advantage():
    adv = [-1.2247, 0.0, 1.2247]
    trace = [np.log([0.5, 0.2]), np.log([0.9]), np.log([0.3, 0.3, 0.3])]
    assert clipped_surrogate(trace, trace, adv) == pytest.approx(0.0, abs=1e-12)


def test_clip_arithmetic():
    cfg = GrpoConfig(epsilon=0.2)
    assert clipped_surrogate([[np.log(2.0)]], [[0.0]], [1.0], cfg) == pytest.approx(1.2, abs=1e-15)
    assert clipped_surrogate([[np.log(0.5)]], [[0.0]], [-1.0], cfg) == pytest.approx(-0.8, abs=1e-15)
    # the pessimistic min keeps the unclipped value on the other side
    assert clipped_surrogate([[np.log(0.5)]], [[0.0]], [1.0], cfg) == pytest.approx(0.5)
    assert clipped_surrogate([[np.log(2.0)]], [[0.0]], [-1.0], cfg) == pytest.approx(-2.0)


def test_sequence_level_ratio_uses_summed_logprobs():
    cfg = GrpoConfig(ratio_level="sequence", epsilon=10.0)
    new, old = [np.array([np.log(2.0), np.log(1.5)])], [np.zeros(2)]
    assert clipped_surrogate(new, old, [1.0], cfg) == pytest.approx(3.0)
    token = GrpoConfig(ratio_level="token", epsilon=10.0)
    assert clipped_surrogate(new, old, [1.0], token) == pytest.approx(1.75)


def test_shape_mismatch_rejected():
    with pytest.raises(InvalidInput):
        clipped_surrogate([np.zeros(2)], [np.zeros(3)], [1.0])
    with pytest.raises(InvalidInput):
        clipped_surrogate([np.zeros(2)], [np.zeros(2)], [1.0, 2.0])
    with pytest.raises(InvalidInput):
        kl_penalty([np.zeros(2)], [np.zeros(2), np.zeros(2)])


def test_kl_and_entropy_terms_need_inputs():
    t = [np.zeros(1)]
    with pytest.raises(InvalidInput):
        clipped_surrogate(t, t, [0.0], GrpoConfig(beta=0.1))
    with pytest.raises(InvalidInput):
        clipped_surrogate(t, t, [0.0], GrpoConfig(entropy_coef=0.1))
    value = clipped_surrogate(t, t, [0.0], GrpoConfig(beta=0.5, entropy_coef=0.1),
                              logp_ref=[np.array([np.log(0.25) - np.log(0.5)])], entropies=[np.array([2.0])])
    assert value == pytest.approx(-0.5 * (0.5 + np.log(2) - 1) + 0.2)


@st.composite
def trace_pair(draw):
    G = draw(st.integers(1, 5))
    new = traces(draw, G)
    old = [n + np.array(draw(st.lists(st.floats(-1.0, 1.0), min_size=len(n), max_size=len(n)))) for n in new]
    adv = draw(st.lists(st.floats(-3, 3), min_size=G, max_size=G))
    return new, old, adv


@given(trace_pair(), st.floats(0.05, 0.5))
def test_pessimism(pair, eps):
    new, old, adv = pair
    cfg = GrpoConfig(epsilon=eps)
    for term, n, o, a in zip(surrogate_terms(new, old, adv, cfg), new, old, adv):
        assert np.all(term <= np.exp(n - o) * a + 1e-12)


@given(trace_pair())
def test_clipping_inert_inside_trust_region(pair):
    new, old, adv = pair
    old = [n + np.clip(o - n, -0.1, 0.1) for n, o in zip(new, old)]
    cfg = GrpoConfig(epsilon=0.2)
    unclipped = np.mean([np.mean(np.exp(n - o) * a) for n, o, a in zip(new, old, adv)])
    assert clipped_surrogate(new, old, adv, cfg) == pytest.approx(unclipped, abs=1e-12)


# KL


def test_kl_identity_and_hand_value():
    t = [np.log([0.5, 0.1])]
    assert kl_penalty(t, t) == 0.0
    value = kl_penalty([np.array([np.log(0.5)])], [np.array([np.log(0.25)])])
    assert value == pytest.approx(0.1931, abs=1e-4)
    assert value == pytest.approx(0.5 + np.log(0.5) - np.log(0.25) - 1)


@st.composite
def kl_pair(draw):
    G = draw(st.integers(1, 4))
    theta = traces(draw, G)
    ref = [np.array(draw(st.lists(st.floats(-5.0, 0.0), min_size=len(t), max_size=len(t)))) for t in theta]
    return theta, ref


@given(kl_pair())
def test_kl_nonnegative(pair):
    theta, ref = pair
    assert kl_penalty(theta, ref) >= 0.0
    assert kl_penalty(theta, theta) == 0.0


# gradient


def test_zero_advantages_give_zero_gradient(corpus7):
    cipher, data = corpus7
    backend = mixed_backend(cipher, 0)
    groups = sample_groups(backend, data.train[:2], G=4, seed=0)
    for g in groups:
        g.advantages = group_advantages(np.ones(4))
    assert np.all(grpo_gradient(backend, groups, GrpoConfig()).to_vector() == 0.0)


def test_beta_zero_ignores_reference(corpus7):
    cipher, data = corpus7
    backend = mixed_backend(cipher, 1)
    groups = sample_groups(backend, data.train[:2], G=4, seed=1)
    other = ToyBackend(mixed_backend(cipher, 9).params, trainable=False)
    a = grpo_gradient(backend, groups, GrpoConfig()).to_vector()
    b = grpo_gradient(backend, groups, GrpoConfig(), ref_backend=other).to_vector()
    assert np.array_equal(a, b)


def _fd(backend, groups, config, ref=None, h=1e-5):
    base, x0 = backend.params, backend.params.to_vector()
    out = np.zeros_like(x0)
    for i in range(len(x0)):
        e = np.zeros_like(x0)
        e[i] = h
        backend.params = base.with_vector(x0 + e)
        jp = grpo_objective(backend, groups, config, ref)
        backend.params = base.with_vector(x0 - e)
        jm = grpo_objective(backend, groups, config, ref)
        out[i] = -(jp - jm) / (2 * h)
    backend.params = base
    return out


@pytest.mark.parametrize("config", [
    GrpoConfig(ratio_level="sequence"),
    GrpoConfig(beta=0.1, entropy_coef=0.05),
    GrpoConfig(epsilon=0.05),
])
def test_gradient_matches_finite_differences(small_corpus, config):
    cipher, data = small_corpus
    backend = mixed_backend(cipher, 3)
    groups = sample_groups(backend, data.train[:3], G=4, seed=3)
    ref = ToyBackend(backend.params.copy(), trainable=False)
    rng = np.random.default_rng(3)
    backend.params = backend.params.with_vector(backend.params.to_vector() + 0.1 * rng.standard_normal(53))
    analytic = grpo_gradient(backend, groups, config, ref).to_vector()
    numeric = _fd(backend, groups, config, ref)
    np.testing.assert_allclose(analytic, numeric, rtol=1e-4, atol=1e-9)


def test_gradient_requires_trainable_backend(corpus7):
    cipher, data = corpus7
    groups = sample_groups(mixed_backend(cipher, 0), data.train[:1], G=2, seed=0)
    with pytest.raises(UnsupportedBackend):
        grpo_gradient(HttpChatBackend("http://127.0.0.1:9"), groups, GrpoConfig())
    with pytest.raises(UnsupportedBackend):
        grpo_gradient(ToyBackend(mixed_backend(cipher, 0).params, trainable=False), groups, GrpoConfig())


def test_config_validation():
    for kw in ({"epsilon": 0}, {"beta": -1}, {"ratio_level": "word"}, {"sigma_min": 0}, {"inner_updates": 0}):
        with pytest.raises(InvalidInput):
            GrpoConfig(**kw)
    d = GrpoConfig()
    assert (d.epsilon, d.beta, d.entropy_coef, d.ratio_level, d.sigma_min, d.inner_updates) == \
        (0.2, 0.0, 0.0, "token", 1e-8, 1)
