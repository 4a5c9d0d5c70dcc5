"""Shared oracles for the tensor and acceptance tests."""
import numpy as np

from hradapt import tensor as T


def _positive(x):
    return T.add(T.softplus(x), 0.1)


UNARY = {
    "neg": T.neg,
    "relu": T.relu,
    "tanh": T.tanh,
    "sigmoid": T.sigmoid,
    "softplus": T.softplus,
    "exp": lambda x: T.exp(T.mul(T.tanh(x), 0.5)),
    "log": lambda x: T.log(_positive(x)),
    "square": T.square,
    "clip": lambda x: T.clip(x, -0.7, 0.8),
    "softmax_rows": T.softmax_rows,
    "mean_rows": lambda x: T.add(x, T.mean(x, axis=1, keepdims=True)),
    "sum_cols": lambda x: T.mul(x, T.sum(x, axis=0, keepdims=True)),
}
BINARY = {
    "add": T.add,
    "sub": T.sub,
    "mul": T.mul,
    "div": lambda a, b: T.div(a, _positive(b)),
    "minimum": T.minimum,
    "maximum": T.maximum,
}


def random_graph(seed):
    """Random composed op graph on two leaves.

    Returns ``(leaves, f)`` where ``f(*tensors)`` builds a scalar loss.
    """
    rng = np.random.default_rng(seed)
    n, m = int(rng.integers(2, 6)), int(rng.integers(2, 6))
    k = int(rng.integers(2, 5))
    leaves = [rng.normal(size=(n, m)), rng.normal(size=(m, k))]
    ops = []
    for _ in range(int(rng.integers(3, 8))):
        if rng.random() < 0.5:
            ops.append(("u", str(rng.choice(list(UNARY)))))
        else:
            ops.append(("b", str(rng.choice(list(BINARY)))))
    seg = rng.integers(0, 3, n)
    weight = rng.normal(size=(3, k))
    rows = rng.integers(0, n, n + 2)

    def f(x, w):
        h = x
        for kind, name in ops:
            h = UNARY[name](h) if kind == "u" else BINARY[name](h, T.tanh(x))
        z = T.matmul(h, w)
        z = T.concat([z, T.gather(z, rows[: len(rows) // 2])], axis=0)
        s = T.segment_mean(T.index(z, slice(0, n)), seg, 3)
        return T.sum(T.mul(s, weight)) + T.sum(T.square(T.index(z, slice(n, None)))) * 0.1

    return leaves, f


def fd_gradients(f, leaves, h=1e-5):
    """Central finite differences of the scalar ``f`` w.r.t. each leaf."""
    out = []
    for i, a in enumerate(leaves):
        g = np.zeros_like(a)
        for idx in np.ndindex(a.shape):
            args_p = [b.copy() for b in leaves]
            args_m = [b.copy() for b in leaves]
            args_p[i][idx] += h
            args_m[i][idx] -= h
            fp = float(f(*[T.Tensor(b) for b in args_p]).data)
            fm = float(f(*[T.Tensor(b) for b in args_m]).data)
            g[idx] = (fp - fm) / (2 * h)
        out.append(g)
    return out


def analytic_gradients(f, leaves):
    ts = [T.Tensor(a, requires_grad=True) for a in leaves]
    loss = f(*ts)
    T.backward(loss)
    return [t.grad if t.grad is not None else np.zeros_like(t.data) for t in ts]


def rel_error(a, b, floor=1e-6):
    a, b = np.concatenate([x.ravel() for x in a]), np.concatenate([x.ravel() for x in b])
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), floor))

