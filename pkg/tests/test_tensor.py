import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.special import erf

from robustlab import tensor as T
from robustlab.tensor import Tensor

from conftest import gradcheck
from gradsuite import OP_NAMES, cases


def naive_conv(x, w, b, stride, padding):
    n, c, h, wd = x.shape
    o, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho = (h + 2 * padding - k) // stride + 1
    wo = (wd + 2 * padding - k) // stride + 1
    out = np.zeros((n, o, ho, wo))
    for ni in range(n):
        for oi in range(o):
            for i in range(ho):
                for j in range(wo):
                    acc = b[oi]
                    for ci in range(c):
                        for di in range(k):
                            for dj in range(k):
                                acc += xp[ni, ci, i * stride + di, j * stride + dj] * w[oi, ci, di, dj]
                    out[ni, oi, i, j] = acc
    return out


class TestConv:
    def test_pointwise_identity(self, rng):
        x = rng.standard_normal((2, 3, 4, 4))
        w = np.eye(3)[:, :, None, None]
        out = T.conv2d(Tensor(x), Tensor(w))
        np.testing.assert_array_equal(out.data, x)

    def test_all_ones(self):
        out = T.conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))))
        assert out.shape == (1, 1, 1, 1)
        assert out.data.item() == 9.0

    @pytest.mark.parametrize("stride,padding", [(1, 0), (2, 1), (1, 2)])
    def test_matches_loop_oracle(self, rng, stride, padding):
        x = rng.standard_normal((2, 3, 5, 5))
        w = rng.standard_normal((4, 3, 3, 3))
        b = rng.standard_normal(4)
        out = T.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=stride, padding=padding)
        np.testing.assert_allclose(out.data, naive_conv(x, w, b, stride, padding), atol=1e-6)

    def test_output_size_formula(self):
        for h, k, s, p in [(224, 3, 2, 1), (32, 4, 4, 0), (7, 7, 1, 3), (31, 2, 2, 0)]:
            out = T.conv2d(Tensor(np.zeros((1, 1, h, h))), Tensor(np.zeros((1, 1, k, k))), stride=s, padding=p)
            assert out.shape[-1] == (h + 2 * p - k) // s + 1

    def test_errors_name_dimension(self):
        with pytest.raises(ValueError, match="groups"):
            T.conv2d(Tensor(np.zeros((1, 3, 4, 4))), Tensor(np.zeros((2, 1, 3, 3))), groups=2)
        with pytest.raises(ValueError, match="in-channels"):
            T.conv2d(Tensor(np.zeros((1, 3, 4, 4))), Tensor(np.zeros((2, 2, 3, 3))))
        with pytest.raises(ValueError, match="larger than padded input"):
            T.conv2d(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 3, 3))))


class TestDepthwise:
    def test_kernel_one_identity(self, rng):
        x = rng.standard_normal((2, 4, 5, 5))
        out = T.depthwise_conv2d(Tensor(x), Tensor(np.ones((4, 1, 1, 1))))
        np.testing.assert_array_equal(out.data, x)

    def test_constant_field_interior(self, rng):
        w = rng.standard_normal((2, 1, 7, 7))
        out = T.depthwise_conv2d(Tensor(np.full((1, 2, 15, 15), 2.0)), Tensor(w))
        # interior pixels see all 49 taps
        np.testing.assert_allclose(out.data[0, :, 3:-3, 3:-3],
                                   (2.0 * w.sum(axis=(1, 2, 3)))[:, None, None] * np.ones((9, 9)))

    @pytest.mark.parametrize("stride", [1, 2])
    def test_equals_grouped_conv_oracle(self, rng, stride):
        x = rng.standard_normal((2, 3, 9, 9))
        w = rng.standard_normal((3, 1, 7, 7))
        b = rng.standard_normal(3)
        out = T.depthwise_conv2d(Tensor(x), Tensor(w), Tensor(b), stride=stride)
        ref = np.concatenate([naive_conv(x[:, c:c + 1], w[c:c + 1], b[c:c + 1], stride, 3) for c in range(3)], axis=1)
        np.testing.assert_allclose(out.data, ref, atol=1e-9)


class TestLayerNorm:
    def test_constant_input_gives_beta(self):
        beta = np.array([0.3, -1.0, 2.0])
        out = T.layer_norm(Tensor(np.full((2, 3), 5.0)), Tensor(np.ones(3)), Tensor(beta))
        np.testing.assert_allclose(out.data, np.broadcast_to(beta, (2, 3)))

    def test_two_point(self):
        out = T.layer_norm(Tensor(np.array([[1.0, 3.0]])), Tensor(np.ones(2)), Tensor(np.zeros(2)))
        np.testing.assert_allclose(out.data, [[-1.0, 1.0]], atol=1e-6)

    def test_moments(self, rng):
        x = rng.standard_normal((10, 64)) * 3 + 1
        out = T.layer_norm(Tensor(x), Tensor(np.ones(64)), Tensor(np.zeros(64))).data
        assert np.abs(out.mean(axis=1)).max() <= 1e-6
        assert np.abs(out.var(axis=1) - 1).max() <= 1e-4

    def test_eps_must_be_positive(self):
        with pytest.raises(ValueError):
            T.layer_norm(Tensor(np.ones((1, 2))), Tensor(np.ones(2)), Tensor(np.zeros(2)), eps=0.0)


class TestGelu:
    def test_values(self):
        x = Tensor(np.array([0.0, 1.0, 10.0, -10.0]))
        out = T.gelu(x).data
        assert out[0] == 0.0
        assert out[1] == pytest.approx(0.5 * (1 + erf(1 / math.sqrt(2))), abs=1e-12)
        assert out[2] == pytest.approx(10.0, abs=1e-4)
        assert out[3] == pytest.approx(0.0, abs=1e-4)


class TestAttention:
    def _weights(self, rng, d):
        return [Tensor(rng.standard_normal((3 * d, d))), Tensor(rng.standard_normal(3 * d)),
                Tensor(rng.standard_normal((d, d))), Tensor(rng.standard_normal(d))]

    def test_single_token(self, rng):
        d = 4
        x = rng.standard_normal((2, 1, d))
        wq, bq, wo, bo = self._weights(rng, d)
        out = T.multihead_attention(Tensor(x), wq, bq, wo, bo, heads=2).data
        v = x @ wq.data[2 * d:].T + bq.data[2 * d:]
        np.testing.assert_allclose(out, v @ wo.data.T + bo.data, atol=1e-12)

    def test_identical_tokens_uniform(self, rng):
        d, length = 4, 5
        x = np.broadcast_to(rng.standard_normal((1, 1, d)), (1, length, d)).copy()
        wq, bq, wo, bo = self._weights(rng, d)
        qkv = x @ wq.data.T + bq.data
        q, k = qkv[..., :d].reshape(length, 2, 2), qkv[..., d:2 * d].reshape(length, 2, 2)
        scores = np.einsum("lhd,mhd->hlm", q, k) / math.sqrt(2)
        attn = np.exp(scores - scores.max(-1, keepdims=True))
        attn /= attn.sum(-1, keepdims=True)
        np.testing.assert_allclose(attn, 1.0 / length)
        out = T.multihead_attention(Tensor(x), wq, bq, wo, bo, heads=2).data
        np.testing.assert_allclose(out, out[:, :1].repeat(length, axis=1), atol=1e-12)

    def test_matches_per_head_loop(self, rng):
        n, length, d, heads = 2, 3, 6, 3
        x = rng.standard_normal((n, length, d))
        wq, bq, wo, bo = self._weights(rng, d)
        out = T.multihead_attention(Tensor(x), wq, bq, wo, bo, heads).data
        hd = d // heads
        ref = np.zeros_like(x)
        for b in range(n):
            qkv = x[b] @ wq.data.T + bq.data
            ctx = np.zeros((length, d))
            for h in range(heads):
                q = qkv[:, h * hd:(h + 1) * hd]
                k = qkv[:, d + h * hd:d + (h + 1) * hd]
                v = qkv[:, 2 * d + h * hd:2 * d + (h + 1) * hd]
                for i in range(length):
                    s = np.array([q[i] @ k[j] for j in range(length)]) / math.sqrt(hd)
                    a = np.exp(s - s.max())
                    a /= a.sum()
                    ctx[i, h * hd:(h + 1) * hd] = a @ v
            ref[b] = ctx @ wo.data.T + bo.data
        np.testing.assert_allclose(out, ref, atol=1e-6)

    def test_head_split_error(self, rng):
        with pytest.raises(ValueError, match="heads"):
            T.multihead_attention(Tensor(np.zeros((1, 2, 5))), *self._weights(rng, 5), heads=2)


class TestCrossEntropy:
    def test_uniform_logits(self):
        out = T.cross_entropy(Tensor(np.zeros((3, 4))), np.eye(4)[[0, 1, 2]])
        assert out.data == pytest.approx(math.log(4))

    def test_confident(self):
        z = np.zeros((1, 3))
        z[0, 1] = 1e4
        assert T.cross_entropy(Tensor(z), np.array([1])).data == pytest.approx(0.0, abs=1e-12)

    def test_formula_oracle(self, rng):
        z = rng.standard_normal((5, 6)) * 4
        t = rng.uniform(size=(5, 6))
        t /= t.sum(1, keepdims=True)
        lse = np.log(np.exp(z).sum(1))
        ref = np.mean(-(t * (z - lse[:, None])).sum(1))
        assert T.cross_entropy(Tensor(z), t).data == pytest.approx(ref, abs=1e-8)

    def test_needs_two_classes(self):
        with pytest.raises(ValueError):
            T.cross_entropy(Tensor(np.zeros((2, 1))), np.ones((2, 1)))

    def test_rows_must_sum_to_one(self):
        with pytest.raises(ValueError):
            T.cross_entropy(Tensor(np.zeros((1, 3))), np.array([[0.5, 0.2, 0.2]]))


class TestBackward:
    def test_sum_gives_ones(self, rng):
        x = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
        T.backward(T.tsum(x))
        np.testing.assert_array_equal(x.grad, np.ones((3, 4)))

    def test_half_square(self, rng):
        x = Tensor(rng.standard_normal((5,)), requires_grad=True)
        T.backward(T.tsum(x * x) * 0.5)
        np.testing.assert_allclose(x.grad, x.data)

    def test_non_scalar_rejected(self):
        with pytest.raises(ValueError, match="scalar"):
            T.backward(Tensor(np.ones(3), requires_grad=True) * 2.0)

    def test_linearity(self, rng):
        x = rng.standard_normal((3, 4))

        def grad_of(fn):
            t = Tensor(x, requires_grad=True)
            T.backward(fn(t))
            return t.grad

        l1 = lambda t: T.tsum(T.gelu(t))
        l2 = lambda t: T.tsum(T.exp(t) * t)
        combo = grad_of(lambda t: l1(t) * 2.0 + l2(t) * -0.7)
        np.testing.assert_allclose(combo, 2.0 * grad_of(l1) - 0.7 * grad_of(l2), atol=1e-10)

    def test_deterministic(self, rng):
        x = rng.standard_normal((2, 3, 6, 6))
        w = rng.standard_normal((4, 3, 3, 3))
        grads = []
        for _ in range(2):
            tx = Tensor(x, requires_grad=True)
            T.backward(T.tsum(T.gelu(T.conv2d(tx, Tensor(w), padding=1))))
            grads.append(tx.grad)
        assert grads[0].tobytes() == grads[1].tobytes()

    def test_shared_node_visited_once(self):
        x = Tensor(np.array([2.0]), requires_grad=True)
        y = x * x
        T.backward(T.tsum(y + y))
        assert x.grad[0] == pytest.approx(8.0)

    def test_nonfinite_raises(self):
        with pytest.raises(FloatingPointError):
            T.log(Tensor(np.array([0.0, 1.0])))
        with pytest.raises(FloatingPointError):
            T.exp(Tensor(np.array([1e4])))


@pytest.mark.parametrize("name", OP_NAMES)
def test_finite_difference(name):
    rng = np.random.default_rng(abs(hash(name)) % 2 ** 32)
    for _ in range(5):
        for op_name, op, arrays in cases(rng):
            if op_name == name:
                assert gradcheck(op, arrays, rng) < 1e-4


class TestBicubic:
    def test_identity(self, rng):
        img = rng.uniform(size=(3, 6, 6))
        np.testing.assert_array_equal(T.bicubic_resize(Tensor(img), 6, 6).data, img)

    def test_constant(self):
        out = T.bicubic_resize(Tensor(np.full((2, 5, 7), 0.3)), 11, 4).data
        np.testing.assert_allclose(out, 0.3, atol=1e-12)

    def test_ramp_against_kernel_formula(self):
        img = np.tile(np.arange(8.0), (8, 1))[None]
        out = T.bicubic_resize(Tensor(img), 16, 16).data[0]

        def keys(t, a=-0.5):
            t = abs(t)
            if t <= 1:
                return (a + 2) * t ** 3 - (a + 3) * t ** 2 + 1
            if t < 2:
                return a * t ** 3 - 5 * a * t ** 2 + 8 * a * t - 4 * a
            return 0.0

        for j in range(4, 12):
            src = (j + 0.5) / 2 - 0.5
            ref = sum(keys(src - m) * min(max(m, 0), 7) for m in range(int(np.floor(src)) - 1, int(np.floor(src)) + 3))
            assert out[8, j] == pytest.approx(ref, abs=1e-5)
        # cubic convolution reproduces linear functions away from the clamped border
        np.testing.assert_allclose(out[:, 4:12], np.tile((np.arange(4, 12) + 0.5) / 2 - 0.5, (16, 1)), atol=1e-5)

    def test_errors(self):
        with pytest.raises(ValueError):
            T.bicubic_resize(Tensor(np.zeros((1, 4, 4))), 0, 3)
        with pytest.raises(ValueError):
            T.bicubic_resize(Tensor(np.zeros((1, 3, 3))), 6, 6)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.integers(1, 4), min_size=0, max_size=4), st.integers(0, 2 ** 31))
def test_serialization_round_trip(shape, seed):
    arr = np.random.default_rng(seed).standard_normal(shape).astype(np.float32)
    buf = T.tensor_to_bytes(arr) + b"tail"
    back, off = T.tensor_from_bytes(buf)
    assert back.shape == arr.shape
    assert back.tobytes() == arr.tobytes()
    assert buf[off:] == b"tail"


def test_serialization_layout():
    buf = T.tensor_to_bytes(np.array([[1.5, -2.0]], dtype=np.float32))
    assert buf[:24] == (2).to_bytes(8, "little") + (1).to_bytes(8, "little") + (2).to_bytes(8, "little")
    assert np.frombuffer(buf[24:], "<f4").tolist() == [1.5, -2.0]
