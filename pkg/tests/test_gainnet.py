import json

import numpy as np
import pytest

from lqgkit import autodiff as ad
from lqgkit.gainnet import (
    ArchConfig,
    GainNetParams,
    GainNetState,
    build_features,
    feature_dim,
    gain_step,
    init_params,
    param_count,
)


def run_network(params, ys, y_preds, posts, priors):
    """Step the network over given sequences; returns the list of gains."""
    B = ys.shape[1]
    state = GainNetState.zeros(B, params.m, params.n, params.arch.hidden_size)
    weights = params.unflatten()
    gains = []
    for t in range(ys.shape[0]):
        f, state = build_features(ys[t], state, y_preds[t])
        K, state = gain_step(weights, state, f, params.m, params.n)
        state = state.observed(posts[t], priors[t], ys[t])
        gains.append(K)
    return gains


def random_sequences(rng, T=8, B=3, m=2, n=2):
    return (rng.standard_normal((T, B, n)), rng.standard_normal((T, B, n)),
            rng.standard_normal((T, B, m)), rng.standard_normal((T, B, m)))


def test_init_is_deterministic():
    assert np.array_equal(init_params(2, 2, seed=3).theta, init_params(2, 2, seed=3).theta)


def test_param_count_closed_form():
    d, h1, h2, mn = 6, 40, 40, 4
    expected = (d * h1 + h1) + 3 * (h1 * h2 + h2 * h2 + 2 * h2) + (h2 * mn + mn)
    assert expected == 10284
    assert param_count(2, 2, ArchConfig(40, 40)) == expected
    assert init_params(2, 2, ArchConfig(40, 40)).theta.size == expected
    # default sizes are 10 (m + n)
    assert init_params(2, 2).arch == ArchConfig(40, 40)


def test_different_seeds_differ():
    a, b = init_params(2, 2, seed=0).theta, init_params(2, 2, seed=1).theta
    assert np.mean(a != b) >= 0.99


def test_init_bounds_follow_fan_in():
    p = init_params(2, 2, seed=0)
    blocks = p.unflatten()
    assert np.max(np.abs(blocks["embed_W"])) <= 1 / np.sqrt(6)
    assert np.max(np.abs(blocks["gru_Wh"])) <= 1 / np.sqrt(40)


def test_flatten_roundtrip():
    p = init_params(3, 2, ArchConfig(7, 5), seed=2)
    blocks = p.unflatten()
    assert np.array_equal(GainNetParams.flatten(blocks, 3, 2, p.arch), p.theta)
    assert blocks["head_W"].shape == (5, 6)


def test_feature_dimension():
    assert feature_dim(2, 2) == 6
    state = GainNetState.zeros(1, 2, 2, 4)
    f, _ = build_features(np.ones((1, 2)), state, np.zeros((1, 2)))
    assert f.shape == (1, 6)


def test_zero_inputs_give_zero_features():
    state = GainNetState.zeros(2, 2, 2, 4)
    f, state = build_features(np.zeros((2, 2)), state, np.zeros((2, 2)))
    assert np.array_equal(f, np.zeros((2, 6)))
    assert np.all(np.isfinite(f))


def test_features_normalized_by_running_rms():
    state = GainNetState.zeros(1, 1, 1, 2)
    f1, state = build_features(np.array([[2.0]]), state, np.array([[0.0]]))
    assert f1[0, 0] == pytest.approx(1.0)
    f2, state = build_features(np.array([[0.0]]), state.observed(np.zeros((1, 1)), np.zeros((1, 1)), np.array([[2.0]])),
                               np.array([[1.0]]))
    # innovation -1, running mean square (4 + 1) / 2
    assert f2[0, 0] == pytest.approx(-1.0 / np.sqrt(2.5))
    assert state.steps == 2


def test_zero_weights_give_zero_gain():
    p = init_params(2, 2, seed=0).with_theta(np.zeros(param_count(2, 2)))
    state = GainNetState.zeros(4, 2, 2, p.arch.hidden_size)
    K, _ = gain_step(p.unflatten(), state, np.random.default_rng(0).standard_normal((4, 6)), 2, 2)
    assert np.array_equal(K, np.zeros((4, 2, 2)))


def test_gain_step_deterministic():
    p = init_params(2, 2, seed=0)
    state = GainNetState.zeros(2, 2, 2, p.arch.hidden_size)
    f = np.random.default_rng(1).standard_normal((2, 6))
    K1, s1 = gain_step(p.unflatten(), state, f, 2, 2)
    K2, s2 = gain_step(p.unflatten(), state, f, 2, 2)
    assert np.array_equal(K1, K2) and np.array_equal(s1.hidden, s2.hidden)


def _reference_gru(x, h, wx, bx, wh, bh):
    """GRU step written out gate by gate."""
    k = h.shape[-1]
    sig = lambda a: 1.0 / (1.0 + np.exp(-a))
    r = sig(x @ wx[:, :k] + bx[:k] + h @ wh[:, :k] + bh[:k])
    z = sig(x @ wx[:, k:2 * k] + bx[k:2 * k] + h @ wh[:, k:2 * k] + bh[k:2 * k])
    c = np.tanh(x @ wx[:, 2 * k:] + bx[2 * k:] + r * (h @ wh[:, 2 * k:] + bh[2 * k:]))
    return (1 - z) * c + z * h


def test_fused_gru_matches_reference_and_finite_differences():
    rng = np.random.default_rng(5)
    shapes = [(3, 4), (3, 5), (4, 15), (15,), (5, 15), (15,)]
    vals = [rng.standard_normal(s) * 0.7 for s in shapes]
    assert np.allclose(ad.gru_cell(*vals), _reference_gru(*vals), atol=1e-14)

    weight = rng.standard_normal((3, 5))
    tape = ad.Tape()
    leaves = [tape.leaf(v) for v in vals]
    grads = ad.backward(ad.sum(ad.mul(ad.gru_cell(*leaves), weight)), leaves)
    for k, leaf in enumerate(leaves):
        numeric = np.zeros_like(vals[k])
        for idx in np.ndindex(*vals[k].shape):
            plus, minus = [v.copy() for v in vals], [v.copy() for v in vals]
            plus[k][idx] += 1e-6
            minus[k][idx] -= 1e-6
            numeric[idx] = (np.sum(_reference_gru(*plus) * weight) - np.sum(_reference_gru(*minus) * weight)) / 2e-6
        assert np.max(np.abs(grads[leaf.index] - numeric)) < 1e-5 * max(1.0, np.max(np.abs(numeric)))


def test_gain_gradient_matches_finite_differences():
    p = init_params(2, 2, ArchConfig(6, 5), seed=4)
    rng = np.random.default_rng(0)
    seqs = random_sequences(rng, T=5, B=2)
    weight = rng.standard_normal((2, 2, 2))

    def f(theta):
        gains = run_network(p.with_theta(theta), *seqs)
        return float(np.sum(gains[-1] * weight))

    tape = ad.Tape()
    theta = tape.leaf(p.theta)
    state = GainNetState.zeros(2, 2, 2, 5)
    weights = p.unflatten(theta)
    ys, y_preds, posts, priors = seqs
    for t in range(5):
        feat, state = build_features(ys[t], state, y_preds[t])
        K, state = gain_step(weights, state, feat, 2, 2)
        state = state.observed(posts[t], priors[t], ys[t])
    grad = ad.backward(ad.sum(ad.mul(K, weight)), [theta])[theta.index]
    d = rng.standard_normal(p.theta.size)
    d /= np.linalg.norm(d)
    numeric = (f(p.theta + 1e-6 * d) - f(p.theta - 1e-6 * d)) / 2e-6
    assert abs(grad @ d - numeric) / abs(numeric) < 1e-5


def test_causality_future_inputs_do_not_change_past_gains():
    p = init_params(2, 2, seed=0)
    rng = np.random.default_rng(2)
    seqs = random_sequences(rng, T=10)
    base = run_network(p, *seqs)
    perturbed = [s.copy() for s in seqs]
    for s in perturbed:
        s[6:] += 100.0
    changed = run_network(p, *perturbed)
    for t in range(6):
        assert np.array_equal(base[t], changed[t])
    assert not np.array_equal(base[6], changed[6])


def test_reset_makes_trajectories_independent():
    p = init_params(2, 2, seed=0)
    rng = np.random.default_rng(3)
    a = random_sequences(rng, T=6, B=1)
    b = random_sequences(rng, T=6, B=1)
    alone = run_network(p, *b)
    run_network(p, *a)  # previous trajectory, then fresh zero state
    again = run_network(p, *b)
    for x, y in zip(alone, again):
        assert np.array_equal(x, y)


def test_batch_rows_are_independent():
    p = init_params(2, 2, seed=0)
    seqs = random_sequences(np.random.default_rng(4), T=6, B=3)
    batched = run_network(p, *seqs)
    single = run_network(p, *[s[:, 1:2] for s in seqs])
    for x, y in zip(batched, single):
        assert np.allclose(x[1:2], y, rtol=1e-13, atol=1e-15)


def test_checkpoint_roundtrip(tmp_path):
    p = init_params(2, 2, ArchConfig(8, 6), seed=9)
    path = tmp_path / "net.json"
    p.save(path)
    q = GainNetParams.load(path)
    assert np.array_equal(p.theta, q.theta)
    assert (q.m, q.n, q.arch, q.seed) == (2, 2, ArchConfig(8, 6), 9)
    record = json.loads(path.read_text())
    assert record["format"] == "lqgkit-gainnet" and record["version"] == 1


def test_checkpoint_rejects_foreign_files(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps({"format": "other"}))
    with pytest.raises(ValueError):
        GainNetParams.load(path)
    path.write_text(json.dumps({"format": "lqgkit-gainnet", "version": 99}))
    with pytest.raises(ValueError, match="version"):
        GainNetParams.load(path)


def test_wrong_theta_length_rejected():
    with pytest.raises(ad.DimensionError):
        GainNetParams(2, 2, ArchConfig(), np.zeros(5))
