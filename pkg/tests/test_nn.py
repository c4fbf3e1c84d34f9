import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cqlflow import nn

from conftest import numeric_grad, rel_err


def make_net(act="tanh", dropout=0.0, vib=False, seed=0):
    spec = nn.MlpSpec(5, (7, 6), 3, act, dropout_p=dropout, vib_enabled=vib, vib_dim=4 if vib else 0)
    return nn.Mlp(spec, seed=seed)


def scalar_loss(net, x, G, Gf, gk, mode):
    rec = net.forward(x, mode, np.random.default_rng(7))
    val = np.sum(rec.output * G) + np.sum(rec.features * Gf)
    if rec.vib is not None:
        val += np.sum(rec.vib.kl * gk)
    return val, rec


@pytest.mark.parametrize("act", ["tanh", "relu"])
@pytest.mark.parametrize("dropout,vib,mode", [(0.0, False, "eval"), (0.3, False, "train"),
                                              (0.0, True, "train"), (0.2, True, "train"),
                                              (0.0, True, "eval")])
def test_backward_matches_finite_differences(act, dropout, vib, mode):
    rng = np.random.default_rng(1)
    net = make_net(act, dropout, vib)
    x = rng.normal(size=(4, 5))
    G = rng.normal(size=(4, 3))
    Gf = rng.normal(size=(4, net.spec.feature_dim))
    gk = rng.random(4)
    _, rec = scalar_loss(net, x, G, Gf, gk, mode)
    grads = net.backward(rec, G, Gf, gk if vib else None)
    for name, w in net.params.items():
        num = numeric_grad(lambda: scalar_loss(net, x, G, Gf, gk, mode)[0], w)
        assert rel_err(grads[name], num) < 1e-4, name


def test_dr3_penalty_gradient():
    rng = np.random.default_rng(2)
    a, b = rng.normal(size=(6, 4)), rng.normal(size=(6, 4))
    _, ga, gb = nn.dr3_penalty(a, b)
    assert rel_err(ga, numeric_grad(lambda: nn.dr3_penalty(a, b)[0], a)) < 1e-4
    assert rel_err(gb, numeric_grad(lambda: nn.dr3_penalty(a, b)[0], b)) < 1e-4
    assert nn.dr3_penalty(np.zeros((2, 3)), np.ones((2, 3)))[1].sum() == 0.0  # subgradient 0
    with pytest.raises(ValueError):
        nn.dr3_penalty(np.zeros((2, 3)), np.zeros((2, 4)))


@pytest.mark.parametrize("kind", ["l1", "l2"])
def test_weight_penalty_gradient(kind):
    net = make_net(seed=3)
    _, grads = nn.weight_penalty(net, kind, 0.05)
    for name, w in net.params.items():
        num = numeric_grad(lambda: nn.weight_penalty(net, kind, 0.05)[0], w)
        assert rel_err(grads[name], num) < 1e-4, name
    with pytest.raises(ValueError):
        nn.weight_penalty(net, "l3", 0.1)
    with pytest.raises(ValueError):
        nn.weight_penalty(net, "l1", -1.0)


def test_spec_validation():
    with pytest.raises(ValueError):
        nn.MlpSpec(3, (0,), 2)
    with pytest.raises(ValueError):
        nn.MlpSpec(3, (4,), 2, dropout_p=1.0)
    assert nn.MlpSpec(3, (4, 9), 2, vib_enabled=True).feature_dim == 9
    assert nn.MlpSpec(3, (4, 9), 2).feature_dim == 9
    assert nn.MlpSpec(3, (4,), 2, vib_enabled=True, vib_dim=2).feature_dim == 2


def test_forward_errors_and_stale_recording():
    net = make_net(dropout=0.2)
    with pytest.raises(ValueError):
        net.forward(np.zeros((2, 4)))
    with pytest.raises(ValueError):
        net.forward(np.zeros((2, 5)), "train")  # needs an rng
    rec = net.forward(np.zeros((2, 5)))
    net.version += 1
    with pytest.raises(nn.StaleRecordingError):
        net.backward(rec, np.zeros((2, 3)))


@given(st.integers(0, 1000))
@settings(max_examples=20)
def test_eval_forward_is_deterministic(seed):
    net = make_net(dropout=0.3, vib=True, seed=seed)
    x = np.random.default_rng(seed).normal(size=(3, 5))
    a, b = net.forward(x).output, net.forward(x).output
    assert np.array_equal(a, b)


def test_vib_sample_uses_recorded_noise_and_kl_nonnegative():
    net = make_net(vib=True)
    rec = net.forward(np.ones((3, 5)), "train", np.random.default_rng(0))
    v = rec.vib
    np.testing.assert_allclose(v.sampled, v.mean_out + np.exp(0.5 * v.logvar_out) * v.noise)
    assert np.all(v.kl >= 0)


def test_large_vib_weight_shrinks_kl():
    rng = np.random.default_rng(0)
    net = make_net(vib=True)
    x = rng.normal(size=(16, 5))
    kl0 = net.forward(x).vib.kl.mean()
    state = nn.AdamState(lr=1e-2)
    history = [kl0]
    for i in range(300):
        rec = net.forward(x, "train", rng)
        nn.optimizer_step(net, net.backward(rec, np.zeros((16, 3)), grad_kl=10.0 / 16), state)
        if i % 100 == 99:
            history.append(net.forward(x).vib.kl.mean())
    assert all(b < a for a, b in zip(history, history[1:]))
    assert history[-1] < 0.05 * kl0


def test_checkpoint_round_trip(tmp_path):
    net = make_net(vib=True, dropout=0.1)
    state = nn.AdamState(lr=1e-3)
    rec = net.forward(np.ones((2, 5)), "train", np.random.default_rng(0))
    nn.optimizer_step(net, net.backward(rec, np.ones((2, 3))), state)
    path = nn.save_checkpoint(tmp_path / "c.json", net, state, step=12, meta={"k": 1})
    net2, state2, step, meta = nn.load_checkpoint(path)
    assert step == 12 and meta == {"k": 1} and net2.spec == net.spec
    for k in net.params:
        assert np.array_equal(net.params[k], net2.params[k])
    assert state2.to_dict() == state.to_dict()
    (tmp_path / "bad.json").write_text('{"format": "other"}')
    with pytest.raises(ValueError):
        nn.load_checkpoint(tmp_path / "bad.json")
