"""Dense N-d tensors with define-by-run reverse-mode differentiation.

Only the operator set needed by the ConvNeXt / ViT / isotropic models,
their losses and the attacks is provided. Every op checks its output for
non-finite values and raises ``FloatingPointError`` before a graph with a
NaN can be differentiated.
"""
from __future__ import annotations

import struct
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

DEFAULT_DTYPE = np.float32

_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


class Tensor:
    """An array plus the bookkeeping needed to differentiate through it."""

    __slots__ = ("data", "grad", "requires_grad", "name", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op}{tag})"

    # -- arithmetic ---------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other, self.dtype)))

    def __rsub__(self, other):
        return add(_as_tensor(other, self.dtype), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return tmean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def backward(self) -> dict:
        return backward(self)


def _as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype if dtype is not None else DEFAULT_DTYPE))


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.isfinite(arr).all():
        raise FloatingPointError(f"non-finite values produced by {op}")


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    _check_finite(data, op)
    out = Tensor(data)
    out.op = op
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# graph traversal
# ---------------------------------------------------------------------------
def topological_order(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root`` that require grad, inputs before outputs."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Backpropagate from a scalar ``loss``.

    Gradients are accumulated into ``.grad`` of every reachable leaf that
    requires grad; the returned mapping holds the gradient contributed by
    this call alone.
    """
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss does not depend on any tensor that requires grad")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[Tensor, np.ndarray] = {}
    for node in reversed(topological_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            leaves[node] = g
            continue
        parent_grads = node._backward(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    for leaf, g in leaves.items():
        g = g.astype(leaf.dtype, copy=False)
        leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
    return leaves


# ---------------------------------------------------------------------------
# elementwise and shape ops
# ---------------------------------------------------------------------------
def add(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)

    def _bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), _bw, "add")


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)

    def _bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(a.data * b.data, (a, b), _bw, "mul")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product with broadcasting over leading axes."""

    def _bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _make(a.data @ b.data, (a, b), _bw, "matmul")


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    def _bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), _bw, "sum")


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([a.shape[i] for i in axes]))
    return mul(tsum(a, axis, keepdims), 1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a: Tensor, axes) -> Tensor:
    inv = np.argsort(axes)
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def getitem(a: Tensor, index) -> Tensor:
    def _bw(g):
        out = np.zeros_like(a.data)
        np.add.at(out, index, g)
        return (out,)

    return _make(np.array(a.data[index]), (a,), _bw, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def _bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), _bw, "concat")


def gather_last(a: Tensor, index: np.ndarray) -> Tensor:
    """``take_along_axis`` on the last axis; ``index`` is a constant int array."""
    index = np.asarray(index)

    def _bw(g):
        out = np.zeros_like(a.data)
        # scatter-add, an index may repeat
        lead = np.indices(index.shape)[:-1]
        np.add.at(out, (*lead, index), g)
        return (out,)

    return _make(np.take_along_axis(a.data, index, axis=-1), (a,), _bw, "gather")


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return _make(out, (a,), lambda g: (g / a.data,), "log")


def relu(a: Tensor) -> Tensor:
    return _make(np.maximum(a.data, 0), (a,), lambda g: (g * (a.data > 0),), "relu")


def gelu(a: Tensor) -> Tensor:
    """Exact GELU, ``x * Phi(x)`` with the erf-based normal CDF."""
    x = a.data
    cdf = 0.5 * (1.0 + erf(x / _SQRT2))

    def _bw(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
        return (g * (cdf + x * pdf),)

    return _make((x * cdf).astype(x.dtype, copy=False), (a,), _bw, "gelu")


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def _bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make(y, (a,), _bw, "softmax")


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse

    def _bw(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _make(out, (a,), _bw, "log_softmax")


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------
def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` with ``weight`` stored (out, in)."""
    w = weight.data

    def _bw(g):
        gx = g @ w if x.requires_grad else None
        gw = gb = None
        if weight.requires_grad:
            gw = g.reshape(-1, g.shape[-1]).T @ x.data.reshape(-1, x.shape[-1])
        if bias is not None and bias.requires_grad:
            gb = g.reshape(-1, g.shape[-1]).sum(axis=0)
        return (gx, gw, gb) if bias is not None else (gx, gw)

    out = x.data @ w.T
    if bias is not None:
        out = out + bias.data
    parents = (x, weight, bias) if bias is not None else (x, weight)
    return _make(out, parents, _bw, "linear")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalise over the last axis, then scale by ``gamma`` and shift by ``beta``."""
    if eps <= 0:
        raise ValueError(f"layer_norm eps must be positive, got {eps}")
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ValueError(
            f"layer_norm affine params must have shape ({d},), got {gamma.shape} and {beta.shape}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat * gamma.data + beta.data

    def _bw(g):
        gx = gg = gbeta = None
        if x.requires_grad:
            gh = g * gamma.data
            gx = rstd * (gh - gh.mean(axis=-1, keepdims=True)
                         - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        if gamma.requires_grad:
            gg = (g * xhat).reshape(-1, d).sum(axis=0)
        if beta.requires_grad:
            gbeta = g.reshape(-1, d).sum(axis=0)
        return gx, gg, gbeta

    return _make(out, (x, gamma, beta), _bw, "layer_norm")


def layer_norm_2d(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    """Channel-wise LayerNorm for NCHW input."""
    y = layer_norm(transpose(x, (0, 2, 3, 1)), gamma, beta, eps)
    return transpose(y, (0, 3, 1, 2))


def _pad_hw(a: np.ndarray, padding: int) -> np.ndarray:
    if padding == 0:
        return a
    return np.pad(a, ((0, 0), (0, 0), (padding, padding), (padding, padding)))


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1,
           padding: int = 0, groups: int = 1) -> Tensor:
    """2-D cross-correlation of NCHW ``x`` with an (O, C/groups, k, k) kernel."""
    if x.ndim != 4:
        raise ValueError(f"conv2d input must be NCHW, got rank {x.ndim}")
    n, c, h, w = x.shape
    o, cg, kh, kw = weight.shape
    if kh != kw:
        raise ValueError(f"conv2d kernel must be square, got {kh}x{kw}")
    k = kh
    if c % groups:
        raise ValueError(f"input channels {c} not divisible by groups {groups}")
    if o % groups:
        raise ValueError(f"output channels {o} not divisible by groups {groups}")
    if cg != c // groups:
        raise ValueError(f"weight in-channels {cg} does not match input channels {c} / groups {groups}")
    if bias is not None and bias.shape != (o,):
        raise ValueError(f"bias must have shape ({o},), got {bias.shape}")
    if h + 2 * padding < k or w + 2 * padding < k:
        raise ValueError(f"kernel {k} larger than padded input {h + 2 * padding}x{w + 2 * padding}")
    ho = conv_output_size(h, k, stride, padding)
    wo = conv_output_size(w, k, stride, padding)
    xp = _pad_hw(x.data, padding)
    og = o // groups
    wd = weight.data
    if cg == 1 and og == 1 and groups > 1:
        return _depthwise(x, weight, bias, xp, k, stride, padding, ho, wo)
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]

    if groups == 1:
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * k * k)
        wm = wd.reshape(o, c * k * k)
        out = (cols @ wm.T).reshape(n, ho, wo, o).transpose(0, 3, 1, 2)
    else:
        wg = win.reshape(n, groups, cg, ho, wo, k, k)
        out = np.einsum("ngchwij,gocij->ngohw", wg, wd.reshape(groups, og, cg, k, k),
                        optimize=True).reshape(n, o, ho, wo)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out)

    def _bw(g):
        gx = gw = gb = None
        if groups == 1:
            gm = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, o)
            if weight.requires_grad:
                gw = (gm.T @ cols).reshape(wd.shape)
            if x.requires_grad:
                dcols = (gm @ wm).reshape(n, ho, wo, c, k, k).transpose(0, 3, 1, 2, 4, 5)
        else:
            gg = g.reshape(n, groups, og, ho, wo)
            wg5 = wd.reshape(groups, og, cg, k, k)
            if weight.requires_grad:
                gw = np.einsum("ngohw,ngchwij->gocij", gg, wg, optimize=True).reshape(wd.shape)
            if x.requires_grad:
                dcols = np.einsum("ngohw,gocij->ngchwij", gg, wg5, optimize=True).reshape(n, c, ho, wo, k, k)
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for i in range(k):
                for j in range(k):
                    gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[..., i, j]
            gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return (gx, gw, gb) if bias is not None else (gx, gw)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return _make(out, parents, _bw, "conv2d")


def _depthwise(x, weight, bias, xp, k, stride, padding, ho, wo) -> Tensor:
    """Per-channel convolution as a sum of k*k shifted, scaled slices."""
    n, c, h, w = x.shape
    wd = weight.data[:, 0]

    def window(i, j):
        return (slice(None), slice(None), slice(i, i + stride * (ho - 1) + 1, stride),
                slice(j, j + stride * (wo - 1) + 1, stride))

    out = np.zeros((n, c, ho, wo), dtype=np.result_type(xp, wd))
    for i in range(k):
        for j in range(k):
            out += xp[window(i, j)] * wd[None, :, i, j, None, None]
    if bias is not None:
        out += bias.data[None, :, None, None]

    def _bw(g):
        gx = gw = gb = None
        if weight.requires_grad:
            gw = np.empty_like(weight.data)
            for i in range(k):
                for j in range(k):
                    gw[:, 0, i, j] = np.einsum("nchw,nchw->c", g, xp[window(i, j)])
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for i in range(k):
                for j in range(k):
                    gxp[window(i, j)] += g * wd[None, :, i, j, None, None]
            gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return (gx, gw, gb) if bias is not None else (gx, gw)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return _make(out, parents, _bw, "depthwise_conv2d")


def depthwise_conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, kernel: int | None = None,
                     stride: int = 1, padding: int | None = None) -> Tensor:
    """Per-channel convolution; ``padding`` defaults to ``kernel // 2`` ("same" at stride 1)."""
    c = x.shape[1]
    if weight.shape[0] != c or weight.shape[1] != 1:
        raise ValueError(f"depthwise weight must be ({c}, 1, k, k), got {weight.shape}")
    k = weight.shape[-1] if kernel is None else kernel
    if weight.shape[-1] != k:
        raise ValueError(f"weight kernel {weight.shape[-1]} does not match kernel={k}")
    if padding is None:
        padding = k // 2
    return conv2d(x, weight, bias, stride=stride, padding=padding, groups=c)


def multihead_attention(x: Tensor, w_qkv: Tensor, b_qkv: Tensor | None, w_out: Tensor,
                        b_out: Tensor | None, heads: int) -> Tensor:
    """Self-attention over N x L x D tokens with a fused (3D, D) input projection."""
    n, length, d = x.shape
    if d % heads:
        raise ValueError(f"width {d} not divisible by {heads} heads")
    hd = d // heads
    qkv = linear(x, w_qkv, b_qkv)                                   # N, L, 3D
    qkv = transpose(reshape(qkv, (n, length, 3, heads, hd)), (2, 0, 3, 1, 4))  # 3, N, H, L, hd
    q, k, v = qkv[0], qkv[1], qkv[2]
    scores = mul(matmul(q, transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(hd))
    attn = softmax(scores, axis=-1)
    ctx = matmul(attn, v)                                           # N, H, L, hd
    ctx = reshape(transpose(ctx, (0, 2, 1, 3)), (n, length, d))
    return linear(ctx, w_out, b_out)


def cross_entropy(logits: Tensor, target: np.ndarray | Tensor, reduction: str = "mean") -> Tensor:
    """Soft-target cross entropy ``-sum(t * log_softmax(z))`` per row.

    ``target`` holds N x K probability rows (a 1-D int array is taken as
    hard labels).
    """
    if logits.ndim != 2:
        raise ValueError(f"logits must be N x K, got shape {logits.shape}")
    n, kk = logits.shape
    if kk < 2:
        raise ValueError(f"cross_entropy needs at least 2 classes, got {kk}")
    t = target.data if isinstance(target, Tensor) else np.asarray(target)
    if t.ndim == 1:
        t = one_hot(t, kk, logits.dtype)
    t = t.astype(logits.dtype, copy=False)
    if t.shape != logits.shape:
        raise ValueError(f"target shape {t.shape} does not match logits {logits.shape}")
    if np.any(np.abs(t.sum(axis=1) - 1.0) > 1e-6):
        raise ValueError("target rows must sum to 1")
    if not np.isfinite(logits.data).all():
        raise FloatingPointError("cross_entropy received non-finite logits")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    per = -(t * logp).sum(axis=1)
    p = np.exp(logp)

    if reduction == "none":
        out = per
    elif reduction == "sum":
        out = np.asarray(per.sum())
    elif reduction == "mean":
        out = np.asarray(per.mean())
    else:
        raise ValueError(f"unknown reduction {reduction!r}")

    def _bw(g):
        rows = p * t.sum(axis=1, keepdims=True) - t
        if reduction == "none":
            return (rows * g[:, None],)
        factor = g if reduction == "sum" else g / n
        return (rows * factor,)

    return _make(out.astype(logits.dtype, copy=False), (logits,), _bw, "cross_entropy")


def one_hot(labels: np.ndarray, k: int, dtype=DEFAULT_DTYPE) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((labels.shape[0], k), dtype=dtype)
    out[np.arange(labels.shape[0]), labels] = 1
    return out


def global_avg_pool(x: Tensor) -> Tensor:
    return tmean(x, axis=(2, 3))


# ---------------------------------------------------------------------------
# bicubic resampling
# ---------------------------------------------------------------------------
def cubic_kernel(t: np.ndarray, a: float = -0.5) -> np.ndarray:
    t = np.abs(t)
    t2, t3 = t * t, t * t * t
    near = (a + 2) * t3 - (a + 3) * t2 + 1
    far = a * t3 - 5 * a * t2 + 8 * a * t - 4 * a
    return np.where(t <= 1, near, np.where(t < 2, far, 0.0))


def bicubic_matrix(in_size: int, out_size: int, a: float = -0.5) -> np.ndarray:
    """(out_size, in_size) resampling matrix, half-pixel centres, clamped edges."""
    scale = in_size / out_size
    m = np.zeros((out_size, in_size))
    for i in range(out_size):
        src = (i + 0.5) * scale - 0.5
        base = int(np.floor(src))
        for tap in range(base - 1, base + 3):
            wgt = cubic_kernel(np.array(src - tap), a)
            if wgt != 0.0:
                m[i, min(max(tap, 0), in_size - 1)] += wgt
    return m


def bicubic_resize(image: Tensor, out_h: int, out_w: int) -> Tensor:
    """Resize the last two axes of a (..., H, W) tensor with cubic convolution."""
    if out_h < 1 or out_w < 1:
        raise ValueError(f"output size must be positive, got {out_h}x{out_w}")
    h, w = image.shape[-2:]
    if (h, w) == (out_h, out_w):
        return _make(image.data.copy(), (image,), lambda g: (g,), "bicubic_resize")
    if h < 4 or w < 4:
        raise ValueError(f"bicubic_resize needs at least 4x4 input, got {h}x{w}")
    mh = bicubic_matrix(h, out_h).astype(image.dtype)
    mw = bicubic_matrix(w, out_w).astype(image.dtype)
    out = mh @ image.data @ mw.T

    def _bw(g):
        return (mh.T @ g @ mw,)

    return _make(out, (image,), _bw, "bicubic_resize")


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------
def tensor_to_bytes(arr: np.ndarray) -> bytes:
    """Little-endian rank and u64 extents, then row-major float32 values."""
    arr = np.asarray(arr)
    header = struct.pack("<Q", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return header + np.ascontiguousarray(arr, dtype="<f4").tobytes()


def tensor_from_bytes(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Inverse of :func:`tensor_to_bytes`; returns the array and the next offset."""
    (rank,) = struct.unpack_from("<Q", buf, offset)
    offset += 8
    if rank > 16:
        raise ValueError(f"implausible tensor rank {rank} at byte {offset - 8}")
    shape = struct.unpack_from(f"<{rank}Q", buf, offset)
    offset += 8 * rank
    count = int(np.prod(shape)) if rank else 1
    nbytes = 4 * count
    if offset + nbytes > len(buf):
        raise ValueError(f"truncated tensor data at byte {offset}")
    arr = np.frombuffer(buf, dtype="<f4", count=count, offset=offset).reshape(shape).astype(np.float32)
    return arr, offset + nbytes


def parameters_of(tensors: Iterable[Tensor]) -> list[Tensor]:
    return [t for t in tensors if t.requires_grad and t.is_leaf]
