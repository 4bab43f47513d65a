"""Perturbation sets ``B_p(x, eps) ∩ [lo, hi]^d`` and exact Euclidean projections onto them."""
from __future__ import annotations

import math
import re
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

L1_TOPK_FRACTION = 0.1
_NORMS = {"inf": math.inf, "linf": math.inf, "2": 2, "l2": 2, "1": 1, "l1": 1}


@dataclass(frozen=True)
class ThreatModel:
    p: float                    # math.inf, 2 or 1
    epsilon: float
    box: tuple[float, float] = (0.0, 1.0)

    def __post_init__(self):
        if self.p not in (math.inf, 2, 1):
            raise ValueError(f"p must be inf, 2 or 1, got {self.p}")
        if self.epsilon < 0:
            raise ValueError(f"epsilon must be non-negative, got {self.epsilon}")
        if not self.box[0] < self.box[1]:
            raise ValueError(f"box lower bound must be below upper bound, got {self.box}")

    @property
    def tag(self) -> str:
        return "linf" if self.p == math.inf else f"l{int(self.p)}"

    def with_epsilon(self, epsilon: float) -> "ThreatModel":
        return ThreatModel(self.p, epsilon, self.box)

    def __str__(self) -> str:
        return f"{self.tag}:{self.epsilon:g}"

    @classmethod
    def parse(cls, text: str) -> "ThreatModel":
        """Parse ``"linf:4/255"``, ``"l2:2.0"`` or ``"l1:75"``."""
        m = re.fullmatch(r"\s*(l?inf|l?[12])\s*:\s*([0-9.eE+\-/ ]+)\s*", text.lower())
        if not m:
            raise ValueError(f"cannot parse threat model {text!r}; expected e.g. 'linf:4/255'")
        p = _NORMS[m.group(1)]
        raw = m.group(2).replace(" ", "")
        eps = float(Fraction(raw)) if "/" in raw else float(raw)
        return cls(p, eps)


def lp_norm(delta: np.ndarray, p: float) -> np.ndarray:
    """Per-example norm over all but the first axis."""
    flat = delta.reshape(delta.shape[0], -1)
    if p == math.inf:
        return np.abs(flat).max(axis=1)
    if p == 2:
        return np.sqrt((flat * flat).sum(axis=1))
    return np.abs(flat).sum(axis=1)


# ---------------------------------------------------------------------------
# projections
# ---------------------------------------------------------------------------
def project_l1_ball(v: np.ndarray, epsilon: float) -> np.ndarray:
    """Euclidean projection of a vector onto ``{w : ||w||_1 <= epsilon}`` (sort-based)."""
    v = np.asarray(v, dtype=np.float64)
    if epsilon < 0:
        raise ValueError("epsilon must be non-negative")
    a = np.abs(v)
    if a.sum() <= epsilon:
        return v.copy()
    if epsilon == 0:
        return np.zeros_like(v)
    u = np.sort(a.ravel())[::-1]
    css = np.cumsum(u)
    idx = np.arange(1, u.size + 1)
    rho = np.nonzero(u * idx > css - epsilon)[0][-1]
    theta = (css[rho] - epsilon) / (rho + 1.0)
    return np.sign(v) * np.maximum(a - theta, 0.0)


def _bisect(fn, hi: float, iters: int = 200) -> float:
    """Smallest t in [0, hi] with fn(t) <= 0, fn decreasing."""
    lo = 0.0
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if fn(mid) > 0:
            lo = mid
        else:
            hi = mid
        if hi - lo <= 1e-15 * max(1.0, hi):
            break
    return hi


def _project_one(v: np.ndarray, lo: np.ndarray, hi: np.ndarray, p: float, eps: float) -> np.ndarray:
    """Projection of a flat ``v`` onto ``{||d||_p <= eps} ∩ [lo, hi]`` with ``lo <= 0 <= hi``."""
    if p == math.inf:
        return np.clip(v, np.maximum(lo, -eps), np.minimum(hi, eps))
    boxed = np.clip(v, lo, hi)
    if p == 2:
        if np.sqrt((boxed * boxed).sum()) <= eps:
            return boxed
        # KKT: d = clip(v / (1 + lam), lo, hi), pick lam so that ||d||_2 = eps
        def excess(lam):
            d = np.clip(v / (1.0 + lam), lo, hi)
            return np.sqrt((d * d).sum()) - eps
        upper = 1.0
        while excess(upper) > 0:
            upper *= 2.0
        lam = _bisect(excess, upper)
        return np.clip(v / (1.0 + lam), lo, hi)
    if np.abs(boxed).sum() <= eps:
        return boxed
    # KKT: d = clip(soft(v, theta), lo, hi), pick theta so that ||d||_1 = eps
    a, s = np.abs(v), np.sign(v)

    def excess(theta):
        return np.abs(np.clip(s * np.maximum(a - theta, 0.0), lo, hi)).sum() - eps

    theta = _bisect(excess, float(a.max()))
    return np.clip(s * np.maximum(a - theta, 0.0), lo, hi)


def project(delta: np.ndarray, x: np.ndarray, tm: ThreatModel) -> np.ndarray:
    """Nearest ``delta'`` with ``||delta'||_p <= eps`` and ``x + delta'`` inside the box.

    The leading axis indexes examples; each example is projected on its own.
    """
    delta = np.asarray(delta)
    x = np.asarray(x)
    if delta.shape != x.shape:
        raise ValueError(f"delta shape {delta.shape} != x shape {x.shape}")
    lo_box, hi_box = tm.box
    lo = np.minimum(lo_box - x, 0.0)
    hi = np.maximum(hi_box - x, 0.0)
    if tm.epsilon == 0:
        return np.zeros_like(delta)
    if tm.p == math.inf:
        out = np.clip(delta, np.maximum(lo, -tm.epsilon), np.minimum(hi, tm.epsilon))
        return out.astype(delta.dtype, copy=False)
    d64 = delta.astype(np.float64).reshape(delta.shape[0], -1)
    lo64 = lo.astype(np.float64).reshape(d64.shape)
    hi64 = hi.astype(np.float64).reshape(d64.shape)
    out = np.empty_like(d64)
    for i in range(d64.shape[0]):
        out[i] = _project_one(d64[i], lo64[i], hi64[i], tm.p, tm.epsilon)
    out = out.reshape(delta.shape).astype(delta.dtype)
    # float32 rounding can leave x + d a hair outside the box
    return np.clip(out, lo.astype(delta.dtype), hi.astype(delta.dtype))


def is_feasible(delta: np.ndarray, x: np.ndarray, tm: ThreatModel, rtol: float = 1e-6,
                box_tol: float = 1e-6) -> np.ndarray:
    """Per-example certificate that ``delta`` obeys both the norm ball and the box."""
    norms = lp_norm(delta.astype(np.float64), tm.p)
    in_ball = norms <= tm.epsilon * (1 + rtol) + 1e-12
    adv = (x.astype(np.float64) + delta.astype(np.float64)).reshape(delta.shape[0], -1)
    in_box = (adv >= tm.box[0] - box_tol).all(axis=1) & (adv <= tm.box[1] + box_tol).all(axis=1)
    return in_ball & in_box


# ---------------------------------------------------------------------------
# initialisation and ascent directions
# ---------------------------------------------------------------------------
def init_delta(x: np.ndarray, tm: ThreatModel, mode: str = "random",
               rng: np.random.Generator | int | None = None) -> np.ndarray:
    """Starting perturbation: zero, or a random point of the ball projected into the box."""
    x = np.asarray(x)
    if mode == "zero" or tm.epsilon == 0:
        return project(np.zeros_like(x), x, tm)
    if mode != "random":
        raise ValueError(f"unknown init mode {mode!r}")
    rng = np.random.default_rng(rng)
    n = x.shape[0]
    d = x[0].size
    if tm.p == math.inf:
        delta = rng.uniform(-tm.epsilon, tm.epsilon, size=x.shape)
    elif tm.p == 2:
        g = rng.standard_normal((n, d))
        g /= np.linalg.norm(g, axis=1, keepdims=True) + 1e-30
        r = tm.epsilon * rng.uniform(size=(n, 1)) ** (1.0 / d)
        delta = (g * r).reshape(x.shape)
    else:
        k = max(1, int(round(L1_TOPK_FRACTION * d)))
        delta = np.zeros((n, d))
        for i in range(n):
            idx = rng.choice(d, size=k, replace=False)
            w = rng.exponential(size=k)
            w *= tm.epsilon * rng.uniform() ** (1.0 / d) / w.sum()
            delta[i, idx] = w * rng.choice((-1.0, 1.0), size=k)
        delta = delta.reshape(x.shape)
    return project(delta.astype(x.dtype), x, tm)


def steepest_direction(grad: np.ndarray, tm: ThreatModel, topk: float = L1_TOPK_FRACTION) -> np.ndarray:
    """Unit ascent direction for the norm of ``tm``, one per example along axis 0."""
    grad = np.asarray(grad)
    if tm.p == math.inf:
        return np.sign(grad)
    flat = grad.reshape(grad.shape[0], -1)
    if tm.p == 2:
        norm = np.linalg.norm(flat, axis=1, keepdims=True)
        out = np.divide(flat, norm, out=np.zeros_like(flat), where=norm > 0)
        return out.reshape(grad.shape)
    d = flat.shape[1]
    k = max(1, int(math.floor(topk * d)))
    out = np.zeros_like(flat)
    order = np.argsort(-np.abs(flat), axis=1, kind="stable")[:, :k]
    rows = np.arange(flat.shape[0])[:, None]
    picked = flat[rows, order]
    out[rows, order] = np.sign(picked) / k
    return out.reshape(grad.shape)
