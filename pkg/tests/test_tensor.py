import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mrio import tensor as T
from mrio.gradcheck import finite_diff_check
from mrio.optim import OptimizerState, optimizer_step
from mrio.tensor import ContractError, DomainError, Tape, Tensor, backward


def test_sigmoid_zero():
    assert T.sigmoid(Tensor(0.0)).item() == 0.5


def test_softmax_uniform():
    out = T.softmax(Tensor([2.5, 2.5, 2.5]))
    np.testing.assert_allclose(out.data, [1 / 3] * 3, rtol=0, atol=1e-15)


def test_matmul_identity():
    a = np.random.default_rng(0).normal(size=(3, 3))
    assert np.array_equal(T.matmul(Tensor(np.eye(3)), Tensor(a)).data, a)


def test_matmul_shape_mismatch():
    with pytest.raises(ContractError):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_log_domain():
    with pytest.raises(DomainError):
        T.log(Tensor([-1.0]))
    with pytest.raises(DomainError):
        T.power(Tensor([-2.0]), 0.5)


def test_square_grad():
    x = Tensor(3.0, requires_grad=True)
    with Tape() as tape:
        loss = x ** 2
    assert backward(tape, loss, [x])[x] == pytest.approx(6.0)


def test_sigmoid_grad():
    x = Tensor(0.0, requires_grad=True)
    with Tape() as tape:
        loss = T.sigmoid(x)
    assert backward(tape, loss, [x])[x] == pytest.approx(0.25)


def test_softmax_sum_grad_zero():
    v = Tensor(np.random.default_rng(1).normal(size=5), requires_grad=True)
    with Tape() as tape:
        loss = T.softmax(v).sum()
    np.testing.assert_allclose(backward(tape, loss, [v])[v], 0.0, atol=1e-15)


def test_non_scalar_loss_rejected():
    x = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        y = x * 2.0
    with pytest.raises(ContractError):
        backward(tape, y, [x])


def test_unused_leaf_gets_zero():
    x = Tensor(2.0, requires_grad=True)
    y = Tensor(np.ones(4), requires_grad=True)
    with Tape() as tape:
        loss = x * 3.0
    g = backward(tape, loss, [x, y])
    assert g[x] == 3.0 and np.array_equal(g[y], np.zeros(4))


def test_linearity_of_backward():
    rng = np.random.default_rng(2)
    w = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
    x = Tensor(rng.normal(size=(5, 4)))

    def l1():
        return T.sigmoid(x @ w).sum()

    def l2():
        return (T.relu(x @ w) ** 2).mean()

    _, g1 = T.grad(l1, [w])
    _, g2 = T.grad(l2, [w])
    _, g12 = T.grad(lambda: l1() + l2(), [w])
    np.testing.assert_allclose(g12[w], g1[w] + g2[w], rtol=0, atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (4, 6), elements=st.floats(-50, 50)))
def test_softmax_rows_normalised(x):
    out = T.softmax(Tensor(x), axis=1).data
    assert np.all(out >= 0)
    np.testing.assert_allclose(out.sum(axis=1), 1.0, rtol=0, atol=1e-12)


def test_fd_quadratic_form():
    rng = np.random.default_rng(3)
    a = rng.normal(size=(4, 4))
    a = a @ a.T
    x = Tensor(rng.normal(size=(4, 1)), requires_grad=True)
    err = finite_diff_check(lambda: (x.T @ Tensor(a) @ x).sum(), [x], eps=1e-5)
    assert err < 1e-8


def test_fd_constant():
    x = Tensor(np.ones(3), requires_grad=True)
    assert finite_diff_check(lambda: Tensor(7.0) + x.sum() * 0.0, [x], eps=1e-5) == 0.0


def test_fd_eps_range():
    x = Tensor(1.0, requires_grad=True)
    with pytest.raises(ContractError):
        finite_diff_check(lambda: x * 1.0, [x], eps=1e-2)


OPS = {
    "exp-log": lambda a: T.log(T.exp(a) + 1.0).sum(),
    "softmax": lambda a: (T.softmax(a, axis=1) * Tensor(np.arange(12.0).reshape(3, 4))).sum(),
    "relu-abs": lambda a: (T.relu(a) * 3.0 + T.tabs(a)).sum(),
    "power": lambda a: ((a * a + 1.0) ** 1.5).mean(),
    "max": lambda a: T.tmax(a, axis=1).sum(),
    "concat-slice": lambda a: (T.concat([a, a * 2.0], axis=0)[1:5, ::2] ** 2).sum(),
    "transpose": lambda a: (a.T @ a).sum(),
    "atan2": lambda a: T.atan2(a[0], a[1] + 3.0).sum(),
    "sqrt": lambda a: T.sqrt(a * a + 1.0).sum(),
    "div": lambda a: (a / (a * a + 2.0)).sum(),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_op_gradients(name):
    rng = np.random.default_rng(4)
    a = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    assert finite_diff_check(lambda: OPS[name](a), [a], eps=1e-6) < 1e-6


def test_conv2d_gradient_and_stride():
    rng = np.random.default_rng(5)
    x = Tensor(rng.normal(size=(6, 8, 2)), requires_grad=True)
    w = Tensor(rng.normal(size=(3, 3, 2, 3)), requires_grad=True)
    b = Tensor(rng.normal(size=3), requires_grad=True)
    assert T.conv2d(x, w, b, stride=2).shape == (3, 4, 3)
    err = finite_diff_check(lambda: (T.conv2d(x, w, b, stride=2) ** 2).sum(), [x, w, b])
    assert err < 1e-6


def test_conv2d_matches_direct():
    rng = np.random.default_rng(6)
    x = rng.normal(size=(5, 5, 2))
    w = rng.normal(size=(3, 3, 2, 1))
    out = T.conv2d(Tensor(x), Tensor(w)).data
    xp = np.pad(x, ((1, 1), (1, 1), (0, 0)))
    direct = sum(xp[2 + di, 3 + dj] @ w[di, dj] for di in range(3) for dj in range(3))
    np.testing.assert_allclose(out[2, 3], direct, rtol=1e-12)


@pytest.mark.parametrize("dilation", [1, 2])
def test_conv3d_gradient(dilation):
    rng = np.random.default_rng(7)
    x = Tensor(rng.normal(size=(4, 3, 5, 2)), requires_grad=True)
    w = Tensor(rng.normal(size=(3, 3, 3, 2, 2)), requires_grad=True)
    b = Tensor(rng.normal(size=2), requires_grad=True)
    err = finite_diff_check(lambda: (T.conv3d(x, w, b, dilation=dilation) ** 2).sum(), [x, w, b])
    assert err < 1e-6


def test_bilinear_sample_exact_at_pixels_and_gradient():
    rng = np.random.default_rng(8)
    f = Tensor(rng.normal(size=(5, 6, 3)), requires_grad=True)
    coords = np.array([[2.0, 3.0], [0.0, 0.0], [5.0, 4.0], [2.5, 1.25], [6.5, 1.0]])
    out, valid = T.bilinear_sample(f, coords)
    np.testing.assert_array_equal(out.data[0], f.data[3, 2])
    np.testing.assert_array_equal(out.data[2], f.data[4, 5])
    assert valid.tolist() == [True, True, True, True, False]
    np.testing.assert_array_equal(out.data[4], 0.0)
    expect = (0.5 * 0.75 * f.data[1, 2] + 0.5 * 0.75 * f.data[1, 3]
              + 0.5 * 0.25 * f.data[2, 2] + 0.5 * 0.25 * f.data[2, 3])
    np.testing.assert_allclose(out.data[3], expect, rtol=1e-12)
    err = finite_diff_check(lambda: (T.bilinear_sample(f, coords)[0] ** 2).sum(), [f])
    assert err < 1e-6


def test_trilinear_reproduces_linear_field():
    g = 6
    centres = (np.arange(g) + 0.5) / g
    X, Y, Z = np.meshgrid(centres, centres, centres, indexing="ij")
    vol = np.stack([1 + 2 * X - Y + 0.5 * Z, X * Y * Z], axis=-1)
    rng = np.random.default_rng(9)
    q = rng.uniform(0.5 / g, 1 - 0.5 / g, size=(50, 3))
    out = T.trilinear_sample(Tensor(vol), q).data
    np.testing.assert_allclose(out[:, 0], 1 + 2 * q[:, 0] - q[:, 1] + 0.5 * q[:, 2], atol=1e-12)
    np.testing.assert_allclose(out[:, 1], q.prod(axis=1), atol=1e-12)


def test_sgd_step():
    p = Tensor(1.0, requires_grad=True)
    optimizer_step(OptimizerState(kind="sgd", learning_rate=0.1), [p], {p: np.array(2.0)})
    assert p.item() == pytest.approx(0.8)


def test_adam_first_step_magnitude():
    for g in (3.0, -0.02):
        p = Tensor(0.0, requires_grad=True)
        optimizer_step(OptimizerState(learning_rate=0.01), [p], {p: np.array(g)})
        assert np.sign(p.item()) == -np.sign(g)
        assert abs(p.item()) == pytest.approx(0.01, rel=1e-5)


def test_zero_grad_leaves_param():
    for kind in ("sgd", "adam"):
        p = Tensor([1.0, -2.0], requires_grad=True)
        optimizer_step(OptimizerState(kind=kind), [p], {p: np.zeros(2)})
        assert np.array_equal(p.data, [1.0, -2.0])


def test_missing_gradient():
    p = Tensor(1.0, requires_grad=True)
    with pytest.raises(ContractError):
        optimizer_step(OptimizerState(), [p], {})


def test_step_decay():
    st_ = OptimizerState(kind="sgd", learning_rate=1.0, decay_factor=0.5, decay_every=2)
    lrs = []
    for _ in range(5):
        lrs.append(st_.current_lr())
        st_.step_count += 1
    assert lrs == [1.0, 1.0, 0.5, 0.5, 0.25]
