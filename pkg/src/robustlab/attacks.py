"""PGD and APGD white-box attacks and the robust-accuracy evaluation protocol.

APGD follows the published auto-attack recipe: initial step ``2 eps``,
momentum 0.75, step halving at checkpoints when fewer than 75% of the
steps since the previous checkpoint increased the loss (or the best loss
stalled), restarting from the best point found so far.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import tensor as T
from .tensor import Tensor
from .threat import ThreatModel, init_delta, is_feasible, project, steepest_direction

APGD_MOMENTUM = 0.75
APGD_RHO = 0.75


@dataclass
class AttackConfig:
    kind: str = "apgd"              # pgd | apgd
    loss: str = "ce"                # ce | dlr_targeted
    iters: int = 10
    tm: ThreatModel = field(default_factory=lambda: ThreatModel(math.inf, 4 / 255))
    step_size: float | None = None  # pgd only; defaults to 2.5 * eps / iters
    target_classes: int = 3         # dlr_targeted only
    init: str = "random"            # random | zero
    seed: int = 0

    def __post_init__(self):
        if self.iters < 1:
            raise ValueError("iters must be >= 1")
        if self.kind not in ("pgd", "apgd"):
            raise ValueError(f"unknown attack kind {self.kind!r}")
        if self.loss not in ("ce", "dlr_targeted"):
            raise ValueError(f"unknown attack loss {self.loss!r}")


@dataclass
class AttackResult:
    delta: np.ndarray
    best_loss: np.ndarray          # per example
    success: np.ndarray            # per example: prediction at x + delta != y
    feasible: np.ndarray           # per example: norm and box certificate
    iters_used: int
    loss_trace: np.ndarray         # (iters + 1) x N best-so-far loss

    @property
    def robust(self) -> np.ndarray:
        return ~self.success


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------
def dlr_targeted(logits: Tensor | np.ndarray, y: np.ndarray, t: np.ndarray) -> Tensor:
    """Per-example targeted DLR loss ``-(z_y - z_t) / (z_pi1 - (z_pi3 + z_pi4) / 2)``."""
    z = logits if isinstance(logits, Tensor) else Tensor(np.asarray(logits, dtype=np.float64))
    if z.ndim != 2 or z.shape[1] < 4:
        raise ValueError(f"targeted DLR needs at least 4 classes, got logits of shape {z.shape}")
    y = np.asarray(y, dtype=np.int64)
    t = np.asarray(t, dtype=np.int64)
    if np.any(y == t):
        raise ValueError("target class must differ from the true class")
    order = np.argsort(-z.data, axis=1, kind="stable")
    idx = np.stack([y, t, order[:, 0], order[:, 2], order[:, 3]], axis=1)
    g = T.gather_last(z, idx)
    num = g[:, 0] - g[:, 1]
    den = g[:, 2] - (g[:, 3] + g[:, 4]) * 0.5
    # top-1 equal to the mean of ranks 3 and 4 only when they all tie; keep it finite
    safe = np.where(den.data == 0, 1e-12, 0.0).astype(den.dtype)
    inv = _reciprocal(den + safe)
    return -(num * inv)


def _reciprocal(a: Tensor) -> Tensor:
    out = 1.0 / a.data
    return T._make(out, (a,), lambda g: (-g * out * out,), "reciprocal")


def per_example_loss(logits: Tensor, y: np.ndarray, loss: str, targets: np.ndarray | None = None) -> Tensor:
    if loss == "ce":
        return T.cross_entropy(logits, y, reduction="none")
    if loss == "dlr_targeted":
        return dlr_targeted(logits, y, targets)
    raise ValueError(f"unknown loss {loss!r}")


def _as_forward(model) -> Callable[[Tensor], Tensor]:
    return model if callable(model) else model.forward


def loss_and_grad(model, x_adv: np.ndarray, y, loss: str = "ce", targets=None, soft_targets=None):
    """Per-example loss, input gradient of their sum, and logits at ``x_adv``.

    ``soft_targets`` (N x K rows) replaces the hard labels for the CE loss.
    """
    frozen = getattr(model, "frozen", None)
    ctx = frozen() if frozen is not None else _nullctx()
    with ctx:
        xt = Tensor(x_adv, requires_grad=True)
        logits = _as_forward(model)(xt)
        if soft_targets is not None and loss == "ce":
            per = T.cross_entropy(logits, soft_targets, reduction="none")
        else:
            per = per_example_loss(logits, y, loss, targets)
        T.backward(T.tsum(per))
    return per.data.astype(np.float64), xt.grad, logits.data


class _nullctx:
    def __enter__(self):
        return self

    def __exit__(self, *exc):
        return False


def predict_logits(model, x: np.ndarray) -> np.ndarray:
    frozen = getattr(model, "frozen", None)
    ctx = frozen() if frozen is not None else _nullctx()
    with ctx:
        return _as_forward(model)(Tensor(x)).data


def _check_finite_loss(per: np.ndarray, it: int) -> None:
    if not np.isfinite(per).all():
        bad = int(np.flatnonzero(~np.isfinite(per))[0])
        raise FloatingPointError(f"non-finite attack loss at iteration {it}, example {bad}")


def _finish(model, x, y, best_delta, adv_delta, fooled, best_loss, trace, iters, tm) -> AttackResult:
    delta = np.where(fooled.reshape((-1,) + (1,) * (x.ndim - 1)), adv_delta, best_delta)
    pred = predict_logits(model, x + delta).argmax(axis=1)
    return AttackResult(delta=delta, best_loss=best_loss, success=pred != y,
                        feasible=is_feasible(delta, x, tm), iters_used=iters,
                        loss_trace=np.asarray(trace))


# ---------------------------------------------------------------------------
# attacks
# ---------------------------------------------------------------------------
def pgd_attack(model, x: np.ndarray, y: np.ndarray, cfg: AttackConfig, targets=None,
               soft_targets=None) -> AttackResult:
    """Fixed-step projected steepest ascent keeping the best-loss iterate."""
    if cfg.kind != "pgd":
        raise ValueError("pgd_attack needs cfg.kind == 'pgd'")
    tm = cfg.tm
    x = np.asarray(x)
    y = np.asarray(y, dtype=np.int64)
    step = cfg.step_size if cfg.step_size is not None else 2.5 * tm.epsilon / cfg.iters
    rng = np.random.default_rng(cfg.seed)
    delta = init_delta(x, tm, cfg.init, rng)
    per, grad, logits = loss_and_grad(model, x + delta, y, cfg.loss, targets, soft_targets)
    _check_finite_loss(per, 0)
    best_loss, best_delta = per.copy(), delta.copy()
    fooled = logits.argmax(axis=1) != y
    adv_delta = delta.copy()
    trace = [best_loss.copy()]
    for it in range(1, cfg.iters + 1):
        delta = project(delta + step * steepest_direction(grad, tm), x, tm)
        per, grad, logits = loss_and_grad(model, x + delta, y, cfg.loss, targets, soft_targets)
        _check_finite_loss(per, it)
        better = per > best_loss
        best_loss = np.where(better, per, best_loss)
        best_delta[better] = delta[better]
        newly = (logits.argmax(axis=1) != y) & ~fooled
        adv_delta[newly] = delta[newly]
        fooled |= newly
        trace.append(best_loss.copy())
    return _finish(model, x, y, best_delta, adv_delta, fooled, best_loss, trace, cfg.iters, tm)


def apgd_checkpoints(iters: int) -> list[int]:
    """Iterations at which APGD checks whether to halve its step size."""
    p = [0.0, 0.22]
    while p[-1] < 1:
        p.append(p[-1] + max(p[-1] - p[-2] - 0.03, 0.06))
    return sorted({int(math.ceil(round(q * iters, 9))) for q in p[1:] if q <= 1})


def apgd_attack(model, x: np.ndarray, y: np.ndarray, cfg: AttackConfig, targets=None,
                soft_targets=None) -> AttackResult:
    """Auto-PGD with momentum, adaptive step size and best-point restarts."""
    if cfg.kind != "apgd":
        raise ValueError("apgd_attack needs cfg.kind == 'apgd'")
    tm = cfg.tm
    x = np.asarray(x)
    y = np.asarray(y, dtype=np.int64)
    n = x.shape[0]
    bshape = (n,) + (1,) * (x.ndim - 1)
    rng = np.random.default_rng(cfg.seed)

    delta = init_delta(x, tm, cfg.init, rng)
    per, grad, logits = loss_and_grad(model, x + delta, y, cfg.loss, targets, soft_targets)
    _check_finite_loss(per, 0)
    best_loss = per.copy()
    best_delta, best_grad = delta.copy(), grad.copy()
    fooled = logits.argmax(axis=1) != y
    adv_delta = delta.copy()
    trace = [best_loss.copy()]

    step = np.full(n, (2.0 if tm.p != 1 else 1.0) * tm.epsilon)
    checkpoints = apgd_checkpoints(cfg.iters)
    last_check = 0
    increases = np.zeros(n)
    best_at_last_check = best_loss.copy()
    reduced_at_last_check = np.ones(n, dtype=bool)
    prev_loss = per.copy()
    delta_prev = delta.copy()

    for it in range(1, cfg.iters + 1):
        alpha = APGD_MOMENTUM if it > 1 else 1.0
        z = project(delta + step.reshape(bshape) * steepest_direction(grad, tm), x, tm)
        moved = delta + alpha * (z - delta) + (1.0 - alpha) * (delta - delta_prev)
        delta_prev = delta
        delta = project(moved.astype(x.dtype), x, tm)

        per, grad, logits = loss_and_grad(model, x + delta, y, cfg.loss, targets, soft_targets)
        _check_finite_loss(per, it)
        increases += per > prev_loss
        prev_loss = per
        better = per > best_loss
        best_loss = np.where(better, per, best_loss)
        best_delta[better] = delta[better]
        best_grad[better] = grad[better]
        newly = (logits.argmax(axis=1) != y) & ~fooled
        adv_delta[newly] = delta[newly]
        fooled |= newly
        trace.append(best_loss.copy())

        if it in checkpoints:
            window = it - last_check
            oscillating = increases < APGD_RHO * window
            stalled = ~reduced_at_last_check & (best_at_last_check >= best_loss)
            halve = oscillating | stalled
            step = np.where(halve, step / 2.0, step)
            if halve.any():
                delta = np.where(halve.reshape(bshape), best_delta, delta)
                grad = np.where(halve.reshape(bshape), best_grad, grad)
                delta_prev = np.where(halve.reshape(bshape), best_delta, delta_prev)
            reduced_at_last_check = halve
            best_at_last_check = best_loss.copy()
            increases[:] = 0
            last_check = it

    return _finish(model, x, y, best_delta, adv_delta, fooled, best_loss, trace, cfg.iters, tm)


def run_attack(model, x, y, cfg: AttackConfig, targets=None, soft_targets=None) -> AttackResult:
    fn = pgd_attack if cfg.kind == "pgd" else apgd_attack
    return fn(model, x, y, cfg, targets=targets, soft_targets=soft_targets)


# ---------------------------------------------------------------------------
# evaluation protocol
# ---------------------------------------------------------------------------
PROTOCOLS = {
    # stage list: (loss, iters)
    "quick": (("ce", 10),),
    "standard": (("ce", 100), ("dlr_targeted", 40)),
}


@dataclass
class EvalReport:
    threat: str
    epsilon: float
    clean_acc: float
    robust_acc: float
    iters: int
    stages: str
    seed: int
    n: int = 0
    robust_mask: np.ndarray | None = None

    CSV_HEADER = ("threat", "epsilon", "clean_acc", "robust_acc", "iters", "stages", "seed")

    def csv_row(self) -> list:
        return [self.threat, f"{self.epsilon:.6g}", f"{self.clean_acc:.6f}", f"{self.robust_acc:.6f}",
                self.iters, self.stages, self.seed]


def reports_to_csv(reports: list[EvalReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(EvalReport.CSV_HEADER)
    for r in reports:
        w.writerow(r.csv_row())
    return buf.getvalue()


def evaluate_robust_accuracy(model, images: np.ndarray, labels: np.ndarray, tm: ThreatModel,
                             protocol: str = "quick", seed: int = 0, batch_size: int = 256,
                             target_classes: int = 3, ce_iters: int | None = None,
                             dlr_iters: int | None = None) -> EvalReport:
    """Clean and worst-case robust accuracy over the stages of ``protocol``.

    Each stage attacks only the examples still classified correctly; an
    example is robust only if it survives every stage.
    """
    if protocol not in PROTOCOLS:
        raise ValueError(f"unknown protocol {protocol!r}; expected one of {list(PROTOCOLS)}")
    images = np.asarray(images)
    labels = np.asarray(labels, dtype=np.int64)
    n = len(labels)
    stages = []
    for loss, iters in PROTOCOLS[protocol]:
        if loss == "ce" and ce_iters is not None:
            iters = ce_iters
        if loss == "dlr_targeted" and dlr_iters is not None:
            iters = dlr_iters
        stages.append((loss, iters))

    preds = np.concatenate([predict_logits(model, images[s:s + batch_size]).argmax(axis=1)
                            for s in range(0, n, batch_size)]) if n else np.zeros(0, np.int64)
    clean = preds == labels
    robust = clean.copy()
    num_classes = None
    for si, (loss, iters) in enumerate(stages):
        if tm.epsilon == 0:
            break
        cfg = AttackConfig("apgd", loss, iters, tm, seed=seed + si)
        if loss == "dlr_targeted":
            if num_classes is None:
                num_classes = predict_logits(model, images[:1]).shape[1]
            if num_classes < 4:
                continue
        for s in range(0, n, batch_size):
            idx = np.flatnonzero(robust[s:s + batch_size]) + s
            if idx.size == 0:
                continue
            xb, yb = images[idx], labels[idx]
            if loss == "ce":
                res = apgd_attack(model, xb, yb, cfg)
                robust[idx[res.success]] = False
                continue
            logits = predict_logits(model, xb)
            ranked = np.argsort(-logits, axis=1, kind="stable")
            for ti in range(min(target_classes, num_classes - 1)):
                alive = robust[idx]
                if not alive.any():
                    break
                sub = idx[alive]
                # ti-th highest logit other than the true class
                cand = np.array([[c for c in row if c != yy][ti] for row, yy in zip(ranked[alive], labels[sub])])
                res = apgd_attack(model, images[sub], labels[sub],
                                  AttackConfig("apgd", loss, iters, tm, seed=seed + si * 10 + ti),
                                  targets=cand)
                robust[sub[res.success]] = False
    desc = "+".join(f"apgd-{'t-dlr' if l == 'dlr_targeted' else 'ce'}" for l, _ in stages)
    return EvalReport(
        threat=tm.tag, epsilon=tm.epsilon,
        clean_acc=float(clean.mean()) if n else 0.0,
        robust_acc=float(robust.mean()) if n else 0.0,
        iters=sum(i for _, i in stages), stages=desc, seed=seed, n=n, robust_mask=robust,
    )
