import numpy as np
import pytest

from adaptprop.qnet import (
    Network,
    NetworkConfig,
    OptimizerState,
    decode_checkpoint,
    encode_checkpoint,
    load_checkpoint,
    save_checkpoint,
    sgd_step,
)


def small_net(seed, in_dim=8, out_dim=7, hidden=(6, 5), dropout=0.0):
    return Network(NetworkConfig(in_dim, out_dim, hidden, dropout, seed=seed, dtype="float64"))


def td_loss(net, x, actions, targets):
    q = net.predict(x)
    return 0.5 * np.mean((q[np.arange(len(actions)), actions] - targets) ** 2)


def l1_loss(net, x, targets):
    return np.mean(np.abs(net.predict(x) - targets).sum(axis=1))


def central_differences(net, loss_fn, h=1e-5):
    out = []
    for p in net.parameters():
        g = np.zeros_like(p)
        for idx in np.ndindex(p.shape):
            orig = p[idx]
            p[idx] = orig + h
            up = loss_fn()
            p[idx] = orig - h
            down = loss_fn()
            p[idx] = orig
            g[idx] = (up - down) / (2 * h)
        out.append(g)
    return out


def flat(grads):
    return [g for pair in grads for g in pair]


def max_relative_error(analytic, numeric, floor=1e-8):
    worst = 0.0
    for a, n in zip(analytic, numeric):
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
        worst = max(worst, float(np.max(np.abs(a - n) / denom)))
    return worst


def test_zero_network_outputs_zero():
    net = small_net(0)
    for p in net.parameters():
        p[...] = 0
    x = np.random.default_rng(0).normal(size=(4, 8))
    assert np.all(net.predict(x) == 0)


def test_single_linear_layer_identity():
    cfg = NetworkConfig(3, 3, (), 0.0, dtype="float64")
    net = Network(cfg, [np.eye(3)], [np.zeros(3)])
    np.testing.assert_array_equal(net.predict(np.array([1.0, -2.0, 3.5])), [1.0, -2.0, 3.5])


def test_dimension_mismatch():
    with pytest.raises(ValueError):
        small_net(0).forward(np.zeros(5))


def test_train_mode_deterministic_given_rng_state():
    net = small_net(1, dropout=0.5)
    x = np.ones(8)
    a, _ = net.forward(x, train=True, rng=np.random.default_rng(7))
    b, _ = net.forward(x, train=True, rng=np.random.default_rng(7))
    np.testing.assert_array_equal(a, b)


def test_eval_mode_is_pure():
    net = small_net(1, dropout=0.5)
    x = np.linspace(-1, 1, 8)
    np.testing.assert_array_equal(net.predict(x), net.predict(x))


def test_td_zero_residual_gives_zero_gradient():
    net = small_net(2)
    x = np.random.default_rng(2).normal(size=8)
    q, cache = net.forward(x)
    grads, loss = net.backward_td(cache, [3], [q[3]])
    assert loss == 0.0
    assert all(np.all(g == 0) for g in flat(grads))


def test_td_gradient_masks_other_outputs():
    net = small_net(3)
    x = np.random.default_rng(3).normal(size=(5, 8))
    _, cache = net.forward(x)
    actions = np.array([2, 2, 2, 2, 2])
    grads, _ = net.backward_td(cache, actions, np.full(5, 10.0))
    dW, db = grads[-1]
    others = [i for i in range(7) if i != 2]
    assert np.all(dW[:, others] == 0) and np.all(db[others] == 0)
    assert np.any(dW[:, 2] != 0)


def test_td_rejects_bad_action():
    net = small_net(0)
    _, cache = net.forward(np.zeros(8))
    with pytest.raises(ValueError):
        net.backward_td(cache, [7], [0.0])


@pytest.mark.parametrize("seed", range(5))
def test_td_gradient_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    net = small_net(seed)
    x = rng.normal(size=(3, 8))
    actions = rng.integers(0, 7, size=3)
    targets = rng.normal(size=3) * 3
    _, cache = net.forward(x)
    grads, _ = net.backward_td(cache, actions, targets)
    numeric = central_differences(net, lambda: td_loss(net, x, actions, targets))
    assert max_relative_error(flat(grads), numeric) < 1e-4


@pytest.mark.parametrize("seed", range(5))
def test_l1_gradient_matches_finite_differences(seed):
    rng = np.random.default_rng(100 + seed)
    net = small_net(seed, out_dim=2)
    x = rng.normal(size=(3, 8))
    targets = rng.normal(size=(3, 2)) * 2
    out, cache = net.forward(x)
    assert np.min(np.abs(out - targets)) > 1e-3  # away from kinks
    grads, _ = net.backward_l1(cache, targets)
    numeric = central_differences(net, lambda: l1_loss(net, x, targets))
    assert max_relative_error(flat(grads), numeric) < 1e-4


def test_l1_zero_at_target_and_bias_sign():
    net = small_net(4, out_dim=2)
    x = np.random.default_rng(4).normal(size=8)
    out, cache = net.forward(x)
    grads, loss = net.backward_l1(cache, out.copy())
    assert loss == 0.0 and all(np.all(g == 0) for g in flat(grads))
    target = out + np.array([0.5, -0.5])
    grads, _ = net.backward_l1(cache, target)
    np.testing.assert_array_equal(np.sign(grads[-1][1]), np.sign(out - target))


def test_l1_needs_two_outputs():
    net = small_net(0)
    _, cache = net.forward(np.zeros(8))
    with pytest.raises(ValueError):
        net.backward_l1(cache, np.zeros(7))


def test_dropout_preserves_expectation():
    # exact only when the dropped layer feeds the linear output layer
    net = small_net(5, hidden=(16,), dropout=0.2)
    x = np.random.default_rng(5).normal(size=8)
    rng = np.random.default_rng(6)
    n = 10_000
    batch = np.tile(x, (n, 1))
    samples, _ = net.forward(batch, train=True, rng=rng)
    mean = samples.mean(axis=0)
    sem = samples.std(axis=0, ddof=1) / np.sqrt(n)
    assert np.all(np.abs(mean - net.predict(x)) <= 3 * sem + 1e-12)


def test_learning_rate_schedule():
    opt = OptimizerState(1e-3, 5e-5)
    assert opt.lr == 1e-3
    opt.step_count = 20000
    assert opt.lr == pytest.approx(5e-4)


def test_sgd_zero_gradient_only_counts():
    net = small_net(0)
    before = [p.copy() for p in net.parameters()]
    opt = OptimizerState(1e-3, 5e-5)
    zeros = [(np.zeros_like(w), np.zeros_like(b)) for w, b in zip(net.weights, net.biases)]
    sgd_step(net, zeros, opt)
    assert opt.step_count == 1
    assert all(np.array_equal(a, b) for a, b in zip(before, net.parameters()))


def test_sgd_rejects_non_finite():
    net = small_net(0)
    grads = [(np.zeros_like(w), np.zeros_like(b)) for w, b in zip(net.weights, net.biases)]
    grads[0][0][0, 0] = np.nan
    with pytest.raises(FloatingPointError):
        sgd_step(net, grads, OptimizerState(1e-3))


def test_loss_decreases_on_fixed_batch():
    rng = np.random.default_rng(0)
    net = Network(NetworkConfig(10, 7, (32, 16), 0.0, seed=0))
    x = rng.normal(size=(64, 10)).astype(np.float32)
    actions = rng.integers(0, 7, size=64)
    targets = rng.normal(size=64).astype(np.float32)
    opt = OptimizerState(1e-2)
    first = None
    for _ in range(100):
        _, cache = net.forward(x)
        grads, loss = net.backward_td(cache, actions, targets)
        first = loss if first is None else first
        sgd_step(net, grads, opt)
    _, cache = net.forward(x)
    assert net.backward_td(cache, actions, targets)[1] < first


def test_checkpoint_roundtrip_bit_exact(tmp_path):
    net = Network(NetworkConfig(12, 7, (9, 5), 0.2, seed=3))
    opt = OptimizerState(1e-3, 5e-5, 42)
    path = tmp_path / "q.ckpt"
    save_checkpoint(path, net, opt, {"class_id": 1})
    back, back_opt, meta = load_checkpoint(path)
    assert back.cfg == net.cfg and back_opt == opt and meta == {"class_id": 1}
    for a, b in zip(net.parameters(), back.parameters()):
        assert a.dtype == b.dtype and a.tobytes() == b.tobytes()
    assert encode_checkpoint(back, back_opt, meta) == path.read_bytes()


def test_corrupt_checkpoint_rejected():
    data = encode_checkpoint(Network(NetworkConfig(4, 2, (3,), 0.0)))
    with pytest.raises(ValueError):
        decode_checkpoint(data[:-1])
    with pytest.raises(ValueError):
        decode_checkpoint(b"garbage!" + data[8:])
