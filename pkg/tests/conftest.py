import math

import numpy as np
import pytest

from robustlab import tensor as T


def numeric_grad(f, arrays, i, h=1e-5):
    """Central differences of scalar ``f(*arrays)`` with respect to ``arrays[i]``."""
    base = [a.copy() for a in arrays]
    g = np.zeros_like(base[i])
    it = np.nditer(base[i], flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        old = base[i][idx]
        base[i][idx] = old + h
        fp = f(*base)
        base[i][idx] = old - h
        fm = f(*base)
        base[i][idx] = old
        g[idx] = (fp - fm) / (2 * h)
    return g


def max_rel_err(a, b):
    scale = max(np.abs(a).max(), np.abs(b).max(), 1e-8)
    return float(np.abs(a - b).max() / scale)


def gradcheck(op, arrays, rng, wrt=None, h=1e-5):
    """Largest relative error over the inputs in ``wrt`` for ``sum(op(*inputs) * G)``."""
    wrt = range(len(arrays)) if wrt is None else wrt
    tensors = [T.Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = op(*tensors)
    weights = rng.standard_normal(out.shape)
    T.backward(T.tsum(out * T.Tensor(weights)))

    def scalar(*arrs):
        return float((op(*[T.Tensor(a) for a in arrs]).data * weights).sum())

    return max(max_rel_err(tensors[i].grad, numeric_grad(scalar, arrays, i, h)) for i in wrt)


class LinearBinary:
    """Two-logit linear model ``z = W x + b`` on flattened inputs."""

    def __init__(self, w, b):
        self.w = T.Tensor(np.asarray(w, dtype=np.float64))
        self.b = T.Tensor(np.asarray(b, dtype=np.float64))

    def __call__(self, x):
        flat = T.reshape(x, (x.shape[0], -1))
        return T.linear(flat, self.w, self.b)


def linear_worst_case_ce(w, b, x, y, eps):
    """Closed-form l_inf worst-case CE of a two-class linear model with an inactive box."""
    direction = w[y] - w[1 - y]
    xs = x - eps * np.sign(direction)
    z = xs @ w.T + b
    return np.logaddexp(z[:, 0], z[:, 1]) - z[np.arange(len(y)), y]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def micro_models():
    from robustlab.arch import build, preset_spec
    return {name: build(preset_spec(name), seed=0, dtype=np.float64)
            for name in ("micro-convnext", "micro-convnext+convstem", "micro-vit", "micro-vit+convstem",
                         "micro-isotropic-convnext")}


INF = math.inf
