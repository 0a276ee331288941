"""Policy networks: history buffer, causal masking, gradients, sampling."""

import math

import numpy as np
import pytest

from crossgrasp import autodiff as ad
from crossgrasp.autodiff import Tape, Tensor, backward
from crossgrasp.gradcheck import check_param_gradients
from crossgrasp.policy import (
    ActionDistribution,
    HistoryBuffer,
    RecurrentPolicy,
    RecurrentPolicyConfig,
    StudentConfig,
    StudentPolicy,
    TransformerPolicy,
    TransformerPolicyConfig,
    gaussian_entropy,
    gaussian_log_prob,
    gaussian_log_prob_np,
    sample_action,
)

SMALL_TF = TransformerPolicyConfig(history=3, layers=2, width=32, heads=2,
                                   feedforward=48, head_hidden=16,
                                   obs_dim=24, action_dim=6)
SMALL_REC = dict(layers=2, hidden=24, head_hidden=16, obs_dim=20, action_dim=5)


def rand_hist(cfg, batch, seed=0):
    rng = np.random.default_rng(seed)
    return rng.normal(size=(batch, cfg.history, cfg.obs_dim)).astype(np.float32)


# ---------------------------------------------------------------------------
# history buffer
# ---------------------------------------------------------------------------

def test_history_zero_padding_and_order():
    buf = HistoryBuffer(capacity=4, obs_dim=3)
    assert buf.snapshot().sum() == 0.0
    for k in range(1, 4):
        buf.push(np.full(3, float(k)))
        snap = buf.snapshot()
        assert buf.filled == k
        assert not snap[: 4 - k].any()                       # zeros first
        np.testing.assert_array_equal(snap[-1], np.full(3, float(k)))   # newest last
    buf.push(np.full(3, 9.0))
    buf.push(np.full(3, 10.0))
    snap = buf.snapshot()
    np.testing.assert_array_equal(snap[:, 0], [2.0, 3.0, 9.0, 10.0])


def test_history_reset():
    buf = HistoryBuffer(capacity=2, obs_dim=2)
    buf.push(np.ones(2))
    buf.reset()
    assert buf.filled == 0 and not buf.snapshot().any()


def test_history_capacity_one():
    buf = HistoryBuffer(capacity=1, obs_dim=2)
    buf.push(np.array([1.0, 2.0]))
    assert buf.snapshot().shape == (1, 2)


# ---------------------------------------------------------------------------
# transformer
# ---------------------------------------------------------------------------

def test_token_embedding_locality():
    # Before attention mixes them, tokens embed independently.
    pol = TransformerPolicy(SMALL_TF, seed=0)
    h1 = rand_hist(SMALL_TF, 2, seed=1)
    h2 = h1.copy()
    h2[:, 0, :] += 1.0                                       # oldest observation only
    pos = pol.params["pos"].data
    e1 = pol.embed(Tensor(h1)).data + pos
    e2 = pol.embed(Tensor(h2)).data + pos
    assert np.array_equal(e1[:, 1:], e2[:, 1:])
    assert not np.array_equal(e1[:, 0], e2[:, 0])


def test_encode_deterministic():
    pol = TransformerPolicy(SMALL_TF, seed=0)
    h = rand_hist(SMALL_TF, 3, seed=2)
    assert np.array_equal(pol.token_states(h).data, pol.token_states(h).data)


@pytest.mark.parametrize("k", [0, 1])
def test_causal_mask_no_leakage(k):
    pol = TransformerPolicy(SMALL_TF, seed=3)
    base = rand_hist(SMALL_TF, 4, seed=3)
    fut = base.copy()
    fut[:, k + 1:, :] = np.random.default_rng(9).normal(
        size=fut[:, k + 1:, :].shape).astype(np.float32)
    t_base = pol.token_states(base).data
    t_fut = pol.token_states(fut).data
    assert np.array_equal(t_base[:, :k + 1], t_fut[:, :k + 1])


def test_single_token_attention_ignores_qk():
    # With H = 1, the causal softmax is a 1x1 identity, so Q/K weights are inert.
    cfg = TransformerPolicyConfig(history=1, layers=1, width=16, heads=2,
                                  feedforward=16, head_hidden=8, obs_dim=10,
                                  action_dim=4)
    pol = TransformerPolicy(cfg, seed=4)
    obs = rand_hist(cfg, 3, seed=4)
    before, _ = pol.act(obs)
    state = pol.params.state_dict()
    state["block0.q.w"] = np.zeros_like(state["block0.q.w"])
    state["block0.k.w"] = np.random.default_rng(0).normal(
        size=state["block0.k.w"].shape).astype(np.float32)
    pol.params.load_state_dict(state)
    after, _ = pol.act(obs)
    np.testing.assert_array_equal(before, after)


def test_forward_shapes_and_finiteness():
    pol = TransformerPolicy(SMALL_TF, seed=5)
    mean, value = pol.act(rand_hist(SMALL_TF, 7, seed=5))
    assert mean.shape == (7, 6) and value.shape == (7,)
    assert np.isfinite(mean).all() and np.isfinite(value).all()


def test_forward_fuzz_finite():
    pol = TransformerPolicy(SMALL_TF, seed=6)
    rng = np.random.default_rng(6)
    obs = rng.uniform(-5, 5, size=(500, SMALL_TF.history, SMALL_TF.obs_dim)).astype(np.float32)
    mean, value = pol.act(obs)
    assert np.isfinite(mean).all() and np.isfinite(value).all()


def test_parameter_count_golden():
    assert TransformerPolicy(TransformerPolicyConfig(), seed=0).params.count == 483383
    assert RecurrentPolicy(RecurrentPolicyConfig(kind="gru"), seed=0).params.count == 429495
    assert RecurrentPolicy(RecurrentPolicyConfig(kind="lstm"), seed=0).params.count == 560439
    assert StudentPolicy(StudentConfig(), seed=0).params.count == 113435


def test_transformer_gradients_match_finite_differences():
    pol = TransformerPolicy(SMALL_TF, seed=7).to_double()
    hist = rand_hist(SMALL_TF, 3, seed=7).astype(np.float64)
    actions = np.random.default_rng(8).normal(size=(3, 1, 6))

    def loss_fn():
        mean, value = pol.forward(hist)
        logp = gaussian_log_prob(mean, pol.log_std, Tensor(actions, dtype=np.float64))
        return ad.add(ad.tensor_mean(logp), ad.tensor_mean(ad.mul(value, value)))

    assert check_param_gradients(pol.params, loss_fn, n_coords=25, seed=7) < 1e-4


# ---------------------------------------------------------------------------
# recurrent baselines
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("kind", ["gru", "lstm"])
def test_recurrent_zero_fixed_point(kind):
    cfg = RecurrentPolicyConfig(kind=kind, **SMALL_REC)
    pol = RecurrentPolicy(cfg, seed=0)
    zeroed = {k: np.zeros_like(v) for k, v in pol.params.state_dict().items()}
    pol.params.load_state_dict(zeroed)
    hidden = pol.init_hidden(2)
    _, _, new_hidden = pol.act(np.zeros((2, cfg.obs_dim), dtype=np.float32), hidden)
    assert not new_hidden.any()


@pytest.mark.parametrize("kind", ["gru", "lstm"])
def test_recurrent_reset_hidden_reproducible(kind):
    cfg = RecurrentPolicyConfig(kind=kind, **SMALL_REC)
    pol = RecurrentPolicy(cfg, seed=1)
    obs = np.random.default_rng(1).normal(size=(3, cfg.obs_dim)).astype(np.float32)
    m1, v1, h1 = pol.act(obs, pol.init_hidden(3))
    m2, v2, h2 = pol.act(obs, pol.init_hidden(3))
    assert np.array_equal(m1, m2) and np.array_equal(v1, v2) and np.array_equal(h1, h2)


@pytest.mark.parametrize("kind", ["gru", "lstm"])
def test_recurrent_hidden_changes_output(kind):
    cfg = RecurrentPolicyConfig(kind=kind, **SMALL_REC)
    pol = RecurrentPolicy(cfg, seed=2)
    obs = np.random.default_rng(2).normal(size=(2, cfg.obs_dim)).astype(np.float32)
    m1, _, h1 = pol.act(obs, pol.init_hidden(2))
    m2, _, _ = pol.act(obs, h1)
    assert not np.array_equal(m1, m2)


@pytest.mark.parametrize("kind", ["gru", "lstm"])
def test_recurrent_gradients_match_finite_differences(kind):
    cfg = RecurrentPolicyConfig(kind=kind, **SMALL_REC)
    pol = RecurrentPolicy(cfg, seed=3).to_double()
    rng = np.random.default_rng(3)
    obs = rng.normal(size=(2, cfg.obs_dim))
    hidden = rng.normal(size=pol.init_hidden(2).shape) * 0.5
    actions = rng.normal(size=(2, cfg.action_dim))

    def loss_fn():
        mean, value, _ = pol.forward(obs, hidden)
        logp = gaussian_log_prob(mean, pol.log_std, Tensor(actions, dtype=np.float64))
        return ad.add(ad.tensor_mean(logp), ad.tensor_mean(ad.mul(value, value)))

    assert check_param_gradients(pol.params, loss_fn, n_coords=25, seed=kind == "gru") < 1e-4


# ---------------------------------------------------------------------------
# student
# ---------------------------------------------------------------------------

def test_student_zero_weights_zero_output():
    pol = StudentPolicy(StudentConfig(obs_dim=12, hidden=(8, 8), action_dim=4), seed=0)
    pol.params.load_state_dict({k: np.zeros_like(v) for k, v in pol.params.state_dict().items()})
    out = pol.act(np.ones(12, dtype=np.float32))
    assert not out.any()


def test_student_output_width_and_input_check():
    pol = StudentPolicy(StudentConfig(), seed=1)
    assert pol.act(np.zeros(158, dtype=np.float32)).shape == (1, 27)
    with pytest.raises(ValueError):
        pol.act(np.zeros(157, dtype=np.float32))


def test_student_gradients_match_finite_differences():
    cfg = StudentConfig(obs_dim=10, hidden=(12, 12), action_dim=4)
    pol = StudentPolicy(cfg, seed=2).to_double()
    rng = np.random.default_rng(4)
    obs = rng.normal(size=(3, 10))
    target = rng.normal(size=(3, 4))

    def loss_fn():
        err = ad.sub(pol.forward(obs), Tensor(target, dtype=np.float64))
        return ad.tensor_mean(ad.mul(err, err))

    assert check_param_gradients(pol.params, loss_fn, n_coords=20, seed=5) < 1e-4


# ---------------------------------------------------------------------------
# Gaussian head
# ---------------------------------------------------------------------------

def test_log_prob_at_mean_unit_std():
    mean = np.zeros(27, dtype=np.float32)
    logp = gaussian_log_prob_np(mean, np.zeros(27, dtype=np.float32), mean)
    assert logp == pytest.approx(-27 / 2 * math.log(2 * math.pi), rel=1e-6)


def test_log_prob_np_matches_tensor_path_bitwise():
    rng = np.random.default_rng(5)
    mean = rng.normal(size=(4, 6)).astype(np.float32)
    log_std = rng.normal(size=6).astype(np.float32)
    actions = rng.normal(size=(4, 6)).astype(np.float32)
    t = gaussian_log_prob(Tensor(mean), Tensor(log_std), Tensor(actions)).data
    n = gaussian_log_prob_np(mean, log_std, actions)
    assert np.array_equal(t, n)


def test_sampling_deterministic_by_seed():
    dist = ActionDistribution(mean=np.zeros(27, dtype=np.float32),
                              log_std=np.full(27, -1.0, dtype=np.float32))
    a1, l1 = sample_action(dist, np.random.default_rng(3))
    a2, l2 = sample_action(dist, np.random.default_rng(3))
    assert np.array_equal(a1, a2) and l1 == l2
    det, _ = sample_action(dist, np.random.default_rng(3), deterministic=True)
    np.testing.assert_array_equal(det, dist.mean)


def test_clamp_floor_concentrates_samples():
    # DERIVED: at the clamp floor sigma = e^-5, so |a - mean| < 0.03 is a
    # > 4-sigma event per coordinate.
    dist = ActionDistribution(mean=np.zeros(27, dtype=np.float32),
                              log_std=np.full(27, -9.0, dtype=np.float32))
    rng = np.random.default_rng(6)
    hits = np.zeros(27)
    n = 2000
    for _ in range(n):
        a, _ = sample_action(dist, rng)
        hits += np.abs(a) < 0.03
    assert (hits / n > 0.99).all()


def test_entropy_finite_and_monotone_in_log_std():
    e_hi = gaussian_entropy(Tensor(np.zeros(27, dtype=np.float32))).data.item()
    e_lo = gaussian_entropy(Tensor(np.full(27, -2.0, dtype=np.float32))).data.item()
    e_clamped = gaussian_entropy(Tensor(np.full(27, -99.0, dtype=np.float32))).data.item()
    assert np.isfinite([e_hi, e_lo, e_clamped]).all()
    assert e_hi > e_lo > e_clamped
    # clamping pins the entropy floor
    assert e_clamped == pytest.approx(
        gaussian_entropy(Tensor(np.full(27, -5.0, dtype=np.float32))).data.item())


def test_log_prob_gradient_matches_finite_differences():
    rng = np.random.default_rng(7)
    mean64 = rng.normal(size=(2, 5))
    actions = rng.normal(size=(2, 5))

    def f(ls):
        return ad.tensor_mean(gaussian_log_prob(
            Tensor(mean64, dtype=np.float64), ls, Tensor(actions, dtype=np.float64)))

    err = ad.finite_difference_check(f, Tensor(rng.normal(size=5) * 0.5, dtype=np.float64),
                                     h=1e-4)
    assert err < 1e-4
