"""Random double-precision instances for every differentiable op, shared by the unit and acceptance tests."""
import numpy as np

from robustlab import tensor as T
from robustlab.attacks import dlr_targeted


def _away_from_zero(rng, shape, gap=0.05):
    a = rng.standard_normal(shape)
    return np.where(np.abs(a) < gap, a + np.sign(a + 1e-12) * 2 * gap, a)


def _soft_rows(rng, n, k):
    t = rng.uniform(size=(n, k))
    return t / t.sum(axis=1, keepdims=True)


def cases(rng):
    """Yield (name, op, arrays) for one random instance of each op."""
    n, k = int(rng.integers(1, 4)), int(rng.integers(4, 7))
    yield "add", T.add, [rng.standard_normal((3, 4)), rng.standard_normal((4,))]
    yield "mul", T.mul, [rng.standard_normal((2, 3, 1)), rng.standard_normal((1, 3, 4))]
    yield "neg", T.neg, [rng.standard_normal((3, 2))]
    yield "div_scalar", lambda a: a / 3.5, [rng.standard_normal((3, 2))]
    yield "matmul", T.matmul, [rng.standard_normal((2, 3, 4)), rng.standard_normal((2, 4, 5))]
    yield "sum", lambda a: T.tsum(a, axis=1, keepdims=True), [rng.standard_normal((3, 4, 2))]
    yield "mean", lambda a: T.tmean(a, axis=(0, 2)), [rng.standard_normal((3, 4, 2))]
    yield "reshape", lambda a: T.reshape(a, (4, -1)), [rng.standard_normal((2, 3, 4))]
    yield "transpose", lambda a: T.transpose(a, (2, 0, 1)), [rng.standard_normal((2, 3, 4))]
    yield "getitem", lambda a: a[:, 1:3, ::2], [rng.standard_normal((2, 4, 5))]
    yield "concat", lambda a, b: T.concat([a, b], axis=1), [rng.standard_normal((2, 3)), rng.standard_normal((2, 2))]
    idx = rng.integers(0, 5, size=(3, 4))
    yield "gather_last", lambda a: T.gather_last(a, idx), [rng.standard_normal((3, 5))]
    yield "exp", T.exp, [rng.standard_normal((3, 3))]
    yield "log", T.log, [rng.uniform(0.5, 2.0, (3, 3))]
    yield "relu", T.relu, [_away_from_zero(rng, (4, 4))]
    yield "gelu", T.gelu, [rng.standard_normal((4, 4)) * 2]
    yield "softmax", lambda a: T.softmax(a, axis=-1), [rng.standard_normal((3, 5))]
    yield "log_softmax", lambda a: T.log_softmax(a, axis=-1), [rng.standard_normal((3, 5))]
    yield "linear", T.linear, [rng.standard_normal((n, 2, 4)), rng.standard_normal((3, 4)), rng.standard_normal(3)]
    yield "layer_norm", lambda x, g, b: T.layer_norm(x, g, b, 1e-6), \
        [rng.standard_normal((n, 3, 5)), rng.standard_normal(5), rng.standard_normal(5)]
    yield "layer_norm_2d", lambda x, g, b: T.layer_norm_2d(x, g, b, 1e-6), \
        [rng.standard_normal((n, 4, 3, 3)), rng.standard_normal(4), rng.standard_normal(4)]
    yield "conv2d", lambda x, w, b: T.conv2d(x, w, b, stride=2, padding=1), \
        [rng.standard_normal((n, 3, 5, 5)), rng.standard_normal((4, 3, 3, 3)), rng.standard_normal(4)]
    yield "conv2d_grouped", lambda x, w: T.conv2d(x, w, stride=1, padding=0, groups=2), \
        [rng.standard_normal((n, 4, 4, 4)), rng.standard_normal((6, 2, 2, 2))]
    yield "depthwise_conv2d", lambda x, w, b: T.depthwise_conv2d(x, w, b), \
        [rng.standard_normal((n, 3, 6, 6)), rng.standard_normal((3, 1, 3, 3)), rng.standard_normal(3)]
    yield "multihead_attention", lambda x, wq, bq, wo, bo: T.multihead_attention(x, wq, bq, wo, bo, heads=2), \
        [rng.standard_normal((n, 3, 4)), rng.standard_normal((12, 4)) * 0.5, rng.standard_normal(12),
         rng.standard_normal((4, 4)), rng.standard_normal(4)]
    targets = _soft_rows(rng, n, k)
    yield "cross_entropy", lambda z: T.cross_entropy(z, targets), [rng.standard_normal((n, k))]
    yield "global_avg_pool", T.global_avg_pool, [rng.standard_normal((n, 3, 4, 4))]
    yield "bicubic_resize", lambda a: T.bicubic_resize(a, 7, 9), [rng.standard_normal((2, 5, 6))]
    y = rng.integers(0, k, size=n)
    t = (y + 1 + rng.integers(0, k - 1, size=n)) % k
    yield "dlr_targeted", lambda z: dlr_targeted(z, y, t), [rng.standard_normal((n, k)) * 3]


OP_NAMES = [name for name, _, _ in cases(np.random.default_rng(0))]
