import numpy as np
import pytest

from patternbank.nn import autodiff as ad


def numeric_grad(f, x, eps=1e-6):
    """Central differences of a scalar function of one array."""
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f(x)
        flat[i] = orig - eps
        fm = f(x)
        flat[i] = orig
        gf[i] = (fp - fm) / (2 * eps)
    return g


def check_unary(op, np_ref, shape=(3, 4), seed=0, positive=False):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=shape)
    if positive:
        x = np.abs(x) + 0.5
    t = ad.Tensor(x.copy(), requires_grad=True)
    out = op(t)
    assert np.allclose(out.data, np_ref(x))
    loss = ad.tsum(out * out)
    loss.backward()
    num = numeric_grad(lambda a: float((np_ref(a) ** 2).sum()), x.copy())
    assert np.allclose(t.grad, num, rtol=1e-6, atol=1e-8)


def test_elementwise_ops():
    check_unary(ad.exp, np.exp)
    check_unary(ad.log, np.log, positive=True)
    check_unary(ad.sqrt, np.sqrt, positive=True)
    check_unary(ad.tanh, np.tanh)
    check_unary(ad.relu, lambda x: np.maximum(x, 0.0))
    check_unary(ad.sigmoid, lambda x: 1.0 / (1.0 + np.exp(-x)))


def test_broadcast_add_mul_grads():
    rng = np.random.default_rng(1)
    a = ad.Tensor(rng.normal(size=(4, 3)), requires_grad=True)
    b = ad.Tensor(rng.normal(size=(3,)), requires_grad=True)
    loss = ad.tsum((a * b + b) ** 2)
    loss.backward()
    an = numeric_grad(lambda x: float(((a.data * x + x) ** 2).sum()), b.data.copy())
    assert np.allclose(b.grad, an, rtol=1e-6)
    assert a.grad.shape == a.data.shape


def test_matmul_batched_grad():
    rng = np.random.default_rng(2)
    a = ad.Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True)
    b = ad.Tensor(rng.normal(size=(4, 5)), requires_grad=True)
    loss = ad.tsum(ad.matmul(a, b) ** 2)
    loss.backward()
    na = numeric_grad(lambda x: float(((x @ b.data) ** 2).sum()), a.data.copy())
    nb = numeric_grad(lambda x: float(((a.data @ x) ** 2).sum()), b.data.copy())
    assert np.allclose(a.grad, na, rtol=1e-6)
    assert np.allclose(b.grad, nb, rtol=1e-6)


def test_reshape_swap_concat_getitem():
    rng = np.random.default_rng(3)
    x = ad.Tensor(rng.normal(size=(4, 6)), requires_grad=True)
    y = ad.reshape(x, (2, 12))
    z = ad.swapaxes(y, 0, 1)
    w = ad.concat([z, z], axis=1)
    s = ad.tsum(w[2:5, :] ** 2)
    s.backward()
    num = numeric_grad(
        lambda v: float((np.concatenate([v.reshape(2, 12).T] * 2, axis=1)[2:5] ** 2).sum()),
        x.data.copy())
    assert np.allclose(x.grad, num, rtol=1e-6)


def test_take_rows_scatter_grad():
    table = ad.Tensor(np.arange(12.0).reshape(4, 3), requires_grad=True)
    idx = np.array([[0, 1], [1, 3]])
    out = ad.take_rows(table, idx)
    assert out.shape == (2, 2, 3)
    ad.tsum(out).backward()
    expect = np.zeros((4, 3))
    for i in idx.reshape(-1):
        expect[i] += 1.0
    assert np.array_equal(table.grad, expect)


def test_solve_matches_inverse_and_grad():
    rng = np.random.default_rng(4)
    G = rng.normal(size=(5, 5))
    G = G @ G.T + 5 * np.eye(5)
    B = rng.normal(size=(5, 5))
    tG = ad.Tensor(G.copy(), requires_grad=True)
    tB = ad.Tensor(B.copy(), requires_grad=True)
    X = ad.solve(tG, tB)
    assert np.allclose(X.data, np.linalg.inv(G) @ B, atol=1e-10)
    ad.tsum(X ** 2).backward()
    nG = numeric_grad(lambda g: float((np.linalg.solve(g, B) ** 2).sum()), G.copy())
    nB = numeric_grad(lambda b: float((np.linalg.solve(G, b) ** 2).sum()), B.copy())
    assert np.allclose(tG.grad, nG, rtol=1e-5, atol=1e-7)
    assert np.allclose(tB.grad, nB, rtol=1e-5, atol=1e-7)


def test_softmax_rows_stochastic_and_shift_invariant():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(8, 8))
    s = ad.softmax(ad.constant(x), axis=-1)
    assert np.allclose(s.data.sum(axis=-1), 1.0, atol=1e-6)
    shifted = ad.softmax(ad.constant(x + 3.7), axis=-1)
    assert np.allclose(s.data, shifted.data, atol=1e-12)


def test_backward_requires_scalar():
    t = ad.Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ValueError):
        (t * 2).backward()


def test_no_grad_blocks_tape():
    t = ad.Tensor(np.ones(3), requires_grad=True)
    with ad.no_grad():
        out = ad.tsum(t * t)
    assert out._parents == ()


def test_grad_accumulates_over_reuse():
    t = ad.Tensor(np.array(2.0), requires_grad=True)
    loss = t * t + t  # dL/dt = 2t + 1 = 5
    loss.backward()
    assert np.allclose(t.grad, 5.0)
