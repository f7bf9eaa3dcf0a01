import numpy as np
import pytest

from trajode import autodiff as ad
from trajode.errors import ConfigurationError, DataError, DivergenceError
from trajode.training import (ModelSpec, TrainConfig, batch_order, bidirectional_loss,
                              forward_loss, group_trajectory, init_params, objective_loss,
                              predict_groups, train)

from conftest import tiny_spec


def _data(n=6, seed=0):
    r = np.random.default_rng(seed)
    t = np.arange(16)[None, :, None, None]
    yy, xx = np.mgrid[0:4, 0:4]
    phase = r.uniform(0, 2 * np.pi, size=(n, 1, 1, 1))
    seq = np.sin(0.3 * t + xx + phase) + np.cos(0.2 * t - yy + phase)
    return seq.reshape(n, 4, 4, 4, 4) + 0.01 * r.normal(size=(n, 4, 4, 4, 4))


def test_group_trajectory_examples():
    frames = np.arange(1200.0)[:, None, None] * np.ones((1, 2, 2))
    g = group_trajectory(frames, 3, 4, 100).groups
    assert g.shape == (4, 100, 2, 2) and g[1, 0, 0, 0] == 300.0
    g = group_trajectory(frames[:80], 1, 4, 20).groups
    assert [g[i, 0, 0, 0] for i in range(4)] == [0, 20, 40, 60] and g[3, -1, 0, 0] == 79
    g = group_trajectory(frames[:85], 1, 4, 20).groups
    assert g.shape[:2] == (4, 20) and g[3, -1, 0, 0] == 79
    with pytest.raises(DataError, match="80"):
        group_trajectory(frames[:79], 1, 4, 20)


def test_perfect_autoencoder_zero_field_gives_zero_loss():
    spec = tiny_spec()
    p = {k: np.zeros_like(v) for k, v in init_params(spec, 0).items()}
    p["dec.s1.b"] = np.random.default_rng(0).normal(size=16)
    groups = np.broadcast_to(p["dec.s1.b"].reshape(4, 4), (4, 4, 4, 4))
    assert forward_loss(groups, p, spec).value == 0.0


def test_loss_relations():
    spec = tiny_spec()
    p = init_params(spec, 1)
    for seed in range(5):
        g = _data(1, seed)[0]
        fwd, bid = forward_loss(g, p, spec).value, bidirectional_loss(g, p, spec).value
        pred, _ = predict_groups(g[None, 0], p, spec)
        t2 = np.mean((pred.value[2, 0] - g[2]) ** 2)
        assert bid == pytest.approx(fwd - t2, rel=1e-12)
        assert 0 <= bid <= fwd


def test_bidirectional_ignores_group_two():
    spec = tiny_spec()
    p = init_params(spec, 2)
    g = _data(1, 3)[0]
    other = g.copy()
    other[2] = 100.0
    tape_a, tape_b = ad.Tape(), ad.Tape()
    la = bidirectional_loss(g, tape_a.watch_all(p), spec)
    lb = bidirectional_loss(other, tape_b.watch_all(p), spec)
    assert la.value == lb.value
    ga, gb = tape_a.gradient(la), tape_b.gradient(lb)
    assert all(np.array_equal(ga[k], gb[k]) for k in ga)


def test_bidirectional_needs_four_groups():
    spec = ModelSpec(tiny_spec().codec, tiny_spec().ode, num_groups=3)
    with pytest.raises(ConfigurationError):
        objective_loss(np.zeros((3, 4, 4, 4)), init_params(spec, 0), spec, "bidirectional")


@pytest.mark.parametrize("objective", ["forward", "bidirectional"])
@pytest.mark.parametrize("variational", [False, True])
def test_loss_gradients(objective, variational):
    spec = tiny_spec(variational=variational)
    g = _data(2, 1)
    err = ad.grad_check(lambda P: objective_loss(g, P, spec, objective, 1.0, 7), init_params(spec, 3))
    assert err < 1e-4


def test_latent_rnn_gradients():
    spec = tiny_spec(backbone="latent-rnn")
    err = ad.grad_check(lambda P: objective_loss(_data(2, 2), P, spec), init_params(spec, 4))
    assert err < 1e-4


def test_batch_order_is_pure():
    assert np.array_equal(batch_order(3, 5, 10), batch_order(3, 5, 10))
    assert not np.array_equal(batch_order(3, 5, 10), batch_order(3, 6, 10))


def test_train_is_deterministic_and_records_history():
    spec = tiny_spec()
    cfg = TrainConfig(epochs=4, batch_size=4, learning_rate=1e-2, seed=2)
    a, b = train(_data(), spec, cfg), train(_data(), spec, cfg)
    assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)
    assert a.history == b.history and len(a.history) == 4
    assert [h[1] for h in a.history] == [1, 2, 2, 2]
    assert all(np.isfinite(h[2]) for h in a.history)


def test_zero_phase_two_epochs_returns_phase_one_output():
    cfg = TrainConfig(epochs=3, phase1_epochs=3, learning_rate=1e-2)
    res = train(_data(), tiny_spec(), cfg)
    assert all(np.array_equal(res.params[k], res.phase1_params[k]) for k in res.params)
    init = init_params(tiny_spec(), cfg.seed)
    assert not np.array_equal(res.params["enc.s0.W"], init["enc.s0.W"])
    assert np.array_equal(res.params["ode.W1"], init["ode.W1"])


def test_phase_one_leaves_temporal_weights_alone():
    spec = tiny_spec()
    res = train(_data(), spec, TrainConfig(epochs=4, phase1_epochs=1, learning_rate=1e-2))
    init = init_params(spec, 0)
    assert not np.array_equal(res.params["enc.t0.W"], init["enc.t0.W"])
    assert np.array_equal(res.phase1_params["enc.t0.W"], init["enc.t0.W"])


def test_training_reduces_loss():
    res = train(_data(16), tiny_spec(), TrainConfig(epochs=60, phase1_epochs=10, batch_size=4,
                                                    learning_rate=1e-2))
    phase2 = [h[2] for h in res.history if h[1] == 2]
    assert phase2[-1] <= 0.5 * phase2[0]


@pytest.mark.filterwarnings("ignore:overflow")
def test_divergence_carries_provenance():
    spec = tiny_spec()
    p = init_params(spec, 0)
    p["ode.W2"] = np.full_like(p["ode.W2"], 1e308)
    with pytest.raises(DivergenceError, match=r"epoch 1 \(phase 2\) batch 0"):
        train(_data(), spec, TrainConfig(epochs=1, phase1_epochs=0), params=p)


def test_train_config_validation():
    with pytest.raises(ConfigurationError):
        TrainConfig(objective="sideways")
    with pytest.raises(ConfigurationError):
        TrainConfig(epochs=2, phase1_epochs=3)
    assert TrainConfig(epochs=100).phase1_epochs == 25
    with pytest.raises(ConfigurationError):
        train(_data(), tiny_spec("pure-rnn"), TrainConfig(objective="bidirectional"))


def test_pure_rnn_training_runs():
    res = train(_data(), tiny_spec("pure-rnn"), TrainConfig(epochs=3, learning_rate=1e-2))
    assert set(res.params) >= {"prnn.Wu", "enc.s0.W"} and "enc.t0.W" not in res.params
