import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from latentcfm.nn import (MLP, Adam, GradientError, Linear, MlpConfig, ShapeError, Tensor,
                          backward, load_checkpoint, save_checkpoint)
from latentcfm.nn import autograd as ad


def numeric_grad(f, x, h=1e-5):
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def rel_err(a, b):
    return np.max(np.abs(a - b)) / max(1e-8, np.max(np.abs(a)) + np.max(np.abs(b)))


def check_grads(build, arrays, tol=1e-4):
    """``build(*tensors)`` returns a scalar tensor; compare with central differences."""
    ts = [Tensor(a, requires_grad=True) for a in arrays]
    backward(build(*ts))
    for t, a in zip(ts, arrays):
        num = numeric_grad(lambda: build(*[Tensor(x) for x in arrays]).item(), a)
        assert rel_err(t.grad, num) < tol


UNARY = {
    "exp": lambda a: ad.sum_(ad.exp(a)),
    "log": lambda a: ad.sum_(ad.log(a * a + 1.0)),
    "sqrt": lambda a: ad.sum_(ad.sqrt(a * a + 0.5)),
    "selu": lambda a: ad.sum_(ad.selu(a)),
    "relu": lambda a: ad.sum_(ad.relu(a + 0.05)),
    "gelu": lambda a: ad.sum_(ad.gelu(a)),
    "power": lambda a: ad.sum_(ad.power(a, 3)),
    "clip": lambda a: ad.sum_(ad.clip(a, -0.5, 0.5) * a),
    "logsumexp": lambda a: ad.sum_(ad.logsumexp(a, axis=-1)),
    "log_softmax": lambda a: ad.sum_(ad.log_softmax(a, axis=-1) * Tensor(np.arange(4.0))),
    "mean": lambda a: ad.mean(a * a, axis=0).sum(),
    "reshape_T": lambda a: ad.sum_(ad.reshape(a, (4, 3)).T @ Tensor(np.ones((4, 1)))),
    "getitem": lambda a: ad.sum_(a[:, 1:3] * a[:, 0:2]),
    "concat": lambda a: ad.sum_(ad.concat([a, a * 2.0], axis=-1) ** 2),
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_ops_match_finite_differences(name):
    rng = np.random.default_rng(0)
    x = rng.normal(size=(3, 4))
    if name == "relu":
        x = np.where(np.abs(x + 0.05) < 1e-3, 0.3, x)   # keep away from the kink
    if name == "clip":
        x = np.where(np.abs(np.abs(x) - 0.5) < 1e-3, 0.1, x)
    check_grads(UNARY[name], [x])


def test_binary_ops_with_broadcasting():
    rng = np.random.default_rng(1)
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(4,)) + 3.0
    check_grads(lambda x, y: ad.sum_((x + y) * (x - y) / y), [a, b])
    check_grads(lambda x, y: ad.sum_(1.0 / y - x * 2.0), [a, b])
    w = rng.normal(size=(4, 2))
    check_grads(lambda x, y: ad.sum_(ad.selu(x @ y)), [a, w])


def test_linear_op_gradients():
    rng = np.random.default_rng(2)
    x, w, b = rng.normal(size=(5, 3)), rng.normal(size=(3, 2)), rng.normal(size=(2,))
    check_grads(lambda x_, w_, b_: ad.sum_(ad.linear(x_, w_, b_) ** 2), [x, w, b])


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2 ** 31 - 1))
def test_mlp_gradients_on_random_seeds(seed):
    rng = np.random.default_rng(seed)
    net = MLP(MlpConfig(3, [5, 4], 2), rng)
    x = rng.normal(size=(4, 3))

    def loss():
        return ad.sum_(ad.selu(net(x)))

    net.zero_grad()
    backward(loss())
    for _, p in net.named_parameters():
        num = numeric_grad(lambda: loss().item(), p.data)
        assert rel_err(p.grad, num) < 1e-4


def test_backward_simple_cases():
    w = Tensor(np.array([2.0]), requires_grad=True)
    backward(ad.sum_(w * 3.0))
    assert w.grad[0] == 3.0
    z = Tensor(np.array([1.5, -2.0]), requires_grad=True)
    backward(ad.sum_(z * 0.0))
    assert np.all(z.grad == 0.0)
    with pytest.raises(GradientError):
        backward(Tensor(np.ones(3), requires_grad=True) * 2.0)


def test_selu_zero_is_exact():
    assert ad.selu_array(np.zeros(3)).tolist() == [0.0, 0.0, 0.0]
    assert ad.selu(Tensor(np.zeros(2))).data.tolist() == [0.0, 0.0]


def test_forward_trivial_cases():
    rng = np.random.default_rng(0)
    net = MLP(MlpConfig(3, [4], 2), rng)
    for layer in net.layers:
        layer.weight.data[...] = 0.0
    x = rng.normal(size=(5, 3))
    np.testing.assert_array_equal(net.predict(x), np.tile(net.layers[-1].bias.data, (5, 1)))
    lin = Linear(1, 1, rng)
    lin.weight.data[...] = 1.0
    lin.bias.data[...] = 0.0
    assert lin(np.array([[2.0]])).item() == 2.0


def test_forward_matches_independent_matmul():
    rng = np.random.default_rng(3)
    net = MLP(MlpConfig(2, [64, 64], 2), rng)
    x = rng.normal(size=(7, 2))
    alpha, scale = 1.6732632423543772, 1.0507009873554805

    def selu(z):
        return scale * np.where(z > 0, z, alpha * (np.exp(z) - 1))

    h = x
    for i, layer in enumerate(net.layers):
        h = np.einsum("ij,jk->ik", h, layer.weight.data) + layer.bias.data
        if i < len(net.layers) - 1:
            h = selu(h)
    np.testing.assert_allclose(net(x).data, h, rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(net.predict(x), h, rtol=1e-12, atol=1e-12)


def test_shape_errors():
    net = MLP(MlpConfig(3, [4], 2), np.random.default_rng(0))
    with pytest.raises(ShapeError):
        net(np.zeros((2, 4)))
    with pytest.raises(ValueError):
        MlpConfig(0, [4], 2)
    with pytest.raises(ValueError):
        MlpConfig(2, [4], 2, activation="tanh")


def test_adam_first_step_and_zero_grad():
    p = Tensor(np.array([1.0]), requires_grad=True)
    opt = Adam([p], lr=1e-3)
    p.grad = np.array([1.0])
    opt.step()
    assert p.data[0] == pytest.approx(1.0 - 1e-3, rel=1e-6)
    assert opt.step_count == 1
    m_before = opt.m[0].copy()
    p.grad = np.array([0.0])
    before = p.data.copy()
    opt.step()
    np.testing.assert_allclose(opt.m[0], 0.9 * m_before)
    # zero gradient still moves the parameter through the decayed first moment;
    # with no history at all the parameter stays put
    q = Tensor(np.array([4.0]), requires_grad=True)
    opt2 = Adam([q], lr=1e-3)
    q.grad = np.zeros(1)
    opt2.step()
    assert q.data[0] == 4.0
    assert p.data[0] < before[0]


def test_adam_missing_grad():
    p = Tensor(np.zeros(2), requires_grad=True)
    with pytest.raises(GradientError):
        Adam([p]).step()


def test_adam_scalar_oracle():
    w = Tensor(np.array([0.0]), requires_grad=True)
    opt = Adam([w], lr=0.1)
    for _ in range(100):
        opt.zero_grad()
        backward(ad.sum_((w - 5.0) ** 2))
        opt.step()
    assert abs(w.data[0] - 5.0) < 0.5


def _train_few(seed):
    rng = np.random.default_rng(seed)
    net = MLP(MlpConfig(2, [8, 8], 1), rng)
    opt = Adam(net.named_parameters(), lr=1e-2)
    for _ in range(20):
        x = rng.normal(size=(16, 2))
        opt.zero_grad()
        out = net(x)
        backward(ad.mean((out - Tensor(x[:, :1] * x[:, 1:])) ** 2))
        opt.step()
    return net


def test_determinism_bit_identical():
    assert _train_few(5).checksum() == _train_few(5).checksum()
    assert _train_few(5).checksum() != _train_few(6).checksum()


def test_checkpoint_round_trip(tmp_path):
    net = _train_few(1)
    path = tmp_path / "net.lcfm"
    save_checkpoint(path, {"net": net}, meta={"note": "x"})
    other = MLP(MlpConfig(2, [8, 8], 1), np.random.default_rng(99))
    meta, arrays = load_checkpoint(path, {"net": other})
    assert meta["note"] == "x" and meta["checkpoint_version"].startswith("lcfm-ckpt")
    assert other.checksum() == net.checksum()
    assert all(a.dtype == np.float64 for a in arrays.values())
