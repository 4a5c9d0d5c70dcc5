import math
import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hradapt import tensor as T

from helpers import BINARY, UNARY, analytic_gradients, fd_gradients, random_graph, rel_error


def test_softmax_zero_row():
    out = T.softmax_rows(T.Tensor(np.zeros((1, 4))))
    assert np.allclose(out.data, 0.25, atol=0)


def test_segment_mean_example():
    out = T.segment_mean(T.Tensor(np.array([[1.0], [3.0], [5.0]])), np.array([0, 0, 1]), 2)
    assert np.array_equal(out.data.ravel(), [2.0, 5.0])


def test_square_derivative():
    x = T.Tensor(3.0, requires_grad=True)
    T.backward(T.square(x))
    assert x.grad == 6.0


def test_shape_mismatch_raises():
    with pytest.raises(ValueError):
        T.matmul(T.Tensor(np.ones((2, 3))), T.Tensor(np.ones((2, 3))))


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_op_gradients(name):
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    x = rng.normal(size=(3, 4))
    w = rng.normal(size=(3, 4))

    def f(a):
        return T.sum(T.mul(UNARY[name](a), w))

    assert rel_error(analytic_gradients(f, [x]), fd_gradients(f, [x])) < 1e-4


@pytest.mark.parametrize("name", sorted(BINARY))
def test_binary_op_gradients(name):
    rng = np.random.default_rng(len(name))
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    w = rng.normal(size=(3, 4))

    def f(x, y):
        return T.sum(T.mul(BINARY[name](x, y), w))

    assert rel_error(analytic_gradients(f, [a, b]), fd_gradients(f, [a, b])) < 1e-4


def test_broadcast_gradients():
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(4, 3)), rng.normal(size=(1, 3))

    def f(x, y):
        return T.sum(T.square(T.add(T.mul(x, y), y)))

    assert rel_error(analytic_gradients(f, [a, b]), fd_gradients(f, [a, b])) < 1e-4


def test_segment_softmax_gradient():
    rng = np.random.default_rng(1)
    s = rng.normal(size=7)
    ids = np.array([0, 0, 1, 1, 1, 2, 0])
    w = rng.normal(size=7)

    def f(x):
        return T.sum(T.mul(T.segment_softmax(x, ids, 3), w))

    out = T.segment_softmax(T.Tensor(s), ids, 3).data.ravel()
    assert np.allclose(np.bincount(ids, out), 1.0)
    assert rel_error(analytic_gradients(f, [s]), fd_gradients(f, [s])) < 1e-4


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_random_graphs_match_finite_differences(seed):
    leaves, f = random_graph(seed)
    assert rel_error(analytic_gradients(f, leaves), fd_gradients(f, leaves)) < 1e-4


# ----------------------------------------------------------------------
# forward-mode oracle


class Dual:
    """Value plus tangent, propagated by the chain rule in forward order."""

    def __init__(self, v, d):
        self.v, self.d = np.asarray(v, float), np.asarray(d, float)

    def __add__(self, o):
        return Dual(self.v + o.v, self.d + o.d)

    def __mul__(self, o):
        return Dual(self.v * o.v, self.d * o.v + self.v * o.d)

    def __matmul__(self, o):
        return Dual(self.v @ o.v, self.d @ o.v + self.v @ o.d)

    def tanh(self):
        t = np.tanh(self.v)
        return Dual(t, (1 - t * t) * self.d)

    def exp(self):
        e = np.exp(self.v)
        return Dual(e, e * self.d)

    def log(self):
        return Dual(np.log(self.v), self.d / self.v)

    def sigmoid(self):
        s = 1 / (1 + np.exp(-self.v))
        return Dual(s, s * (1 - s) * self.d)

    def softmax_rows(self):
        e = np.exp(self.v - self.v.max(axis=1, keepdims=True))
        p = e / e.sum(axis=1, keepdims=True)
        return Dual(p, p * (self.d - np.sum(p * self.d, axis=1, keepdims=True)))

    def sum(self):
        return Dual(self.v.sum(), self.d.sum())


def composed(x, w, c, lib):
    """``sum(log(1 + exp(softmax(tanh(x @ w) * c)) * sigmoid(x @ w)))`` in either library."""
    if lib == "dual":
        z = x @ w
        s = (z.tanh() * c).softmax_rows()
        one = Dual(np.ones_like(s.v), np.zeros_like(s.v))
        return ((one + s.exp()).log() * z.sigmoid()).sum()
    z = T.matmul(x, w)
    s = T.softmax_rows(T.mul(T.tanh(z), c))
    return T.sum(T.mul(T.log(T.add(T.exp(s), 1.0)), T.sigmoid(z)))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_backward_matches_forward_mode(seed):
    rng = np.random.default_rng(seed)
    x, w, c = rng.normal(size=(3, 4)), rng.normal(size=(4, 5)), rng.normal(size=(3, 5))
    dx, dw, dc = rng.normal(size=x.shape), rng.normal(size=w.shape), rng.normal(size=c.shape)
    tx, tw, tc = (T.Tensor(a, requires_grad=True) for a in (x, w, c))
    loss = composed(tx, tw, tc, "tensor")
    T.backward(loss)
    reverse = np.sum(tx.grad * dx) + np.sum(tw.grad * dw) + np.sum(tc.grad * dc)
    fwd = composed(Dual(x, dx), Dual(w, dw), Dual(c, dc), "dual")
    assert float(loss.data) == pytest.approx(float(fwd.v), rel=1e-13)
    assert reverse == pytest.approx(float(fwd.d), rel=1e-10, abs=1e-12)


def test_forward_is_deterministic():
    leaves, f = random_graph(3)
    a = f(*[T.Tensor(x) for x in leaves]).data
    b = f(*[T.Tensor(x) for x in leaves]).data
    assert a.tobytes() == b.tobytes()


def test_tape_freed_after_backward():
    x = T.Tensor(np.ones(3), requires_grad=True)
    y = T.tanh(x)
    loss = T.sum(y)
    T.backward(loss)
    assert y._parents == () and y.grad is None and x.grad is not None


# ----------------------------------------------------------------------
# distributions


def test_gaussian_logprob_at_mean():
    lp = T.gaussian_logprob(np.zeros((2, 3)), np.zeros((2, 3)), np.zeros((2, 3)))
    assert np.allclose(lp.data, -1.5 * math.log(2 * math.pi), atol=1e-15)


def test_gaussian_logprob_matches_scipy():
    from scipy.stats import norm

    rng = np.random.default_rng(0)
    x, mu, ls = rng.normal(size=(5, 2)), rng.normal(size=(5, 2)), rng.normal(size=(5, 2)) * 0.5
    mask = np.array([[1, 1], [1, 0], [0, 0], [1, 1], [0, 1]], float)
    lp = T.gaussian_logprob(x, mu, ls, mask).data
    ref = np.sum(mask * norm.logpdf(x, mu, np.exp(ls)), axis=1)
    assert np.allclose(lp, ref, atol=1e-13)
    ent = T.gaussian_entropy(ls, mask).data
    assert np.allclose(ent, np.sum(mask * norm.entropy(0, np.exp(ls)), axis=1), atol=1e-13)


def test_gaussian_nonfinite_log_std():
    with pytest.raises(FloatingPointError):
        T.gaussian_logprob(np.zeros((1, 2)), np.zeros((1, 2)), np.array([[0.0, np.nan]]))


def test_bernoulli_closed_forms():
    assert T.bernoulli_logprob(np.array([1.0]), np.array([0.0])).data[0] == pytest.approx(math.log(0.5), abs=1e-15)
    assert T.bernoulli_entropy(np.array([0.0])).data[0] == pytest.approx(math.log(2), abs=1e-15)
    # extreme logits stay finite
    lp = T.bernoulli_logprob(np.array([0.0, 1.0]), np.array([800.0, -800.0])).data
    assert np.all(np.isfinite(lp)) and np.allclose(lp, -800.0)


# ----------------------------------------------------------------------
# optimiser


def test_adam_single_step_oracle():
    store = T.ParamStore()
    w = store.add("w", np.array([1.0]))
    T.backward(T.sum(T.square(w)))
    store_norm = T.adam_step(store, lr=0.1, grad_clip_norm=None)
    # hand recurrence: g=2, m=0.2, v=0.004, mhat=2, vhat=4
    assert store_norm == 2.0
    assert w.data[0] == pytest.approx(1.0 - 0.1 * 2.0 / (2.0 + 1e-8), rel=1e-15)


def test_adam_clip_scales_gradients():
    store = T.ParamStore()
    a = store.add("a", np.zeros(2))
    a.grad = np.array([2.0, 0.0])  # norm 2
    T.adam_step(store, lr=1.0, grad_clip_norm=0.5)
    assert np.allclose(store.m["a"], [0.1 * 0.5, 0.0])
    assert np.allclose(store.v["a"], [0.001 * 0.25, 0.0])


def test_adam_zero_gradient_is_noop():
    store = T.ParamStore()
    a = store.add("a", np.array([0.3, -0.2]))
    a.grad = np.zeros(2)
    T.adam_step(store)
    assert np.array_equal(a.data, [0.3, -0.2])


def test_adam_nan_aborts():
    store = T.ParamStore()
    a = store.add("a", np.array([1.0]))
    a.grad = np.array([np.nan])
    with pytest.raises(FloatingPointError):
        T.adam_step(store)
    assert a.data[0] == 1.0 and store.step == 0


def test_paramstore_roundtrip(tmp_path):
    store = T.ParamStore()
    store.add("x", np.random.default_rng(0).normal(size=(3, 2)))
    store.params["x"].grad = np.ones((3, 2))
    T.adam_step(store)
    store.save(tmp_path / "p.json", header={"k": 1})
    back, header = T.ParamStore.load(tmp_path / "p.json")
    assert header == {"k": 1} and back.step == 1
    assert np.array_equal(back["x"].data, store["x"].data)
    assert np.array_equal(back.m["x"], store.m["x"]) and np.array_equal(back.v["x"], store.v["x"])
