"""Adversarial example generators and the cut operator.

Five attacks with the settings the training/evaluation code expects:

========  =====  ==========================================================
kind      norm   parameters
========  =====  ==========================================================
FGSM      linf   one signed-gradient step of size eps
Noise     linf   uniform noise in [-eps, eps]
PGD       linf   20 steps of eps/10, random start of magnitude eps/2
DeepFool  l2     at most 10 linearisation steps, overshoot 0.02
CW        l2     100 Adam steps (lr 0.01, abort early), confidence 0,
                 10 binary-search steps on the trade-off constant
========  =====  ==========================================================

Every generator returns a :class:`PerturbationBatch` holding the raw deltas,
so callers can cut, scale or re-add them to the clean inputs.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .nn import LossSpec, Model, default_loss, grad_input, labels_of, predict, score_jacobian, scores

KINDS = ("fgsm", "noise", "pgd", "deepfool", "cw")
CONSTRAINED = ("fgsm", "noise", "pgd")
NORM_OF = {"fgsm": "linf", "noise": "linf", "pgd": "linf", "deepfool": "l2", "cw": "l2"}
UNIT_BOX = (0.0, 1.0)


@dataclass(frozen=True)
class AttackSpec:
    kind: str
    eps: float | None = None
    steps: int | None = None
    pgd_step_fraction: float = 0.1
    pgd_init_fraction: float = 0.5
    df_overshoot: float = 0.02
    cw_learning_rate: float = 0.01
    cw_confidence: float = 0.0
    cw_binary_search_steps: int = 10
    cw_initial_const: float = 1e-2
    cw_abort_early: bool = True
    clip: tuple[float, float] | None = UNIT_BOX

    def __post_init__(self):
        kind = self.kind.lower()
        if kind not in KINDS:
            raise ValueError(f"unknown attack kind {self.kind!r}")
        object.__setattr__(self, "kind", kind)
        if kind in CONSTRAINED and self.eps is not None and self.eps < 0:
            raise ValueError("eps must be >= 0")
        if kind not in CONSTRAINED and self.eps is not None:
            raise ValueError(f"{kind} is unconstrained and takes no budget")
        if self.steps is None:
            object.__setattr__(self, "steps", {"pgd": 20, "deepfool": 10, "cw": 100}.get(kind, 1))

    @property
    def norm(self) -> str:
        return NORM_OF[self.kind]

    @property
    def constrained(self) -> bool:
        return self.kind in CONSTRAINED

    def with_eps(self, eps: float) -> "AttackSpec":
        return replace(self, eps=eps)


@dataclass(frozen=True)
class PerturbationBatch:
    deltas: np.ndarray
    norms_l2: np.ndarray
    norms_linf: np.ndarray
    success: np.ndarray

    @classmethod
    def from_deltas(cls, deltas, success=None) -> "PerturbationBatch":
        deltas = np.asarray(deltas, dtype=np.float64)
        if deltas.ndim != 2:
            raise ValueError("deltas must be (n, d)")
        if not np.all(np.isfinite(deltas)):
            raise FloatingPointError("non-finite perturbation")
        if success is None:
            success = np.zeros(len(deltas), dtype=bool)
        return cls(deltas, l2_norms(deltas), np.abs(deltas).max(axis=1, initial=0.0), np.asarray(success, bool))

    def __len__(self):
        return len(self.deltas)


def l2_norms(deltas) -> np.ndarray:
    return np.sqrt(np.einsum("ij,ij->i", deltas, deltas))


def _flipped(model, x_adv, labels):
    return predict(model, x_adv) != labels


def _clip(x, clip):
    if clip is None:
        return x
    return np.clip(x, clip[0], clip[1])


def _signed_grad(model, x, y, loss):
    return np.sign(grad_input(model, x, y, loss))


def fgsm(model: Model, x, y, eps: float, loss: LossSpec | None = None, clip=UNIT_BOX) -> PerturbationBatch:
    """Fast gradient sign step; sign(0) is taken as 0."""
    if eps < 0:
        raise ValueError("eps must be >= 0")
    x = np.asarray(x, dtype=np.float64)
    loss = loss or default_loss(model)
    x_adv = _clip(x + eps * _signed_grad(model, x, y, loss), clip)
    delta = x_adv - x
    return PerturbationBatch.from_deltas(delta, _flipped(model, x_adv, labels_of(y)))


def noise(x, eps: float, rng, clip=UNIT_BOX, model: Model | None = None, y=None) -> PerturbationBatch:
    """Uniform noise; ``model``/``y`` only feed the success flags."""
    if eps < 0:
        raise ValueError("eps must be >= 0")
    x = np.asarray(x, dtype=np.float64)
    rng = np.random.default_rng(rng)
    x_adv = _clip(x + rng.uniform(-eps, eps, size=x.shape), clip)
    delta = x_adv - x
    success = None
    if model is not None and y is not None:
        success = _flipped(model, x_adv, labels_of(y))
    return PerturbationBatch.from_deltas(delta, success)


def pgd(
    model: Model,
    x,
    y,
    eps: float,
    rng=None,
    steps: int = 20,
    step_fraction: float = 0.1,
    init_fraction: float = 0.5,
    loss: LossSpec | None = None,
    clip=UNIT_BOX,
    on_step=None,
) -> PerturbationBatch:
    """Projected sign-gradient ascent inside the linf ball of radius eps.

    ``on_step(i, delta)`` is called after every projection, if given.
    """
    if eps < 0:
        raise ValueError("eps must be >= 0")
    x = np.asarray(x, dtype=np.float64)
    loss = loss or default_loss(model)
    rng = np.random.default_rng(rng)
    start = init_fraction * eps
    x_adv = _clip(x + rng.uniform(-start, start, size=x.shape), clip)
    for i in range(steps):
        x_adv = x_adv + step_fraction * eps * _signed_grad(model, x_adv, y, loss)
        x_adv = _clip(np.clip(x_adv, x - eps, x + eps), clip)
        if on_step is not None:
            on_step(i, x_adv - x)
    delta = x_adv - x
    return PerturbationBatch.from_deltas(delta, _flipped(model, x_adv, labels_of(y)))


def deepfool(
    model: Model,
    x,
    y=None,
    steps: int = 10,
    overshoot: float = 0.02,
) -> PerturbationBatch:
    """Minimal l2 DeepFool, batched over examples.

    The reference label of each example is the model's own prediction. When
    true labels ``y`` are given, examples that are already misclassified get
    a zero perturbation and count as successful. Examples that do not flip
    within ``steps`` keep their last accumulated perturbation (times the
    overshoot) with ``success=False``.
    """
    x = np.asarray(x, dtype=np.float64)
    n = len(x)
    orig = predict(model, x)
    active = np.ones(n, dtype=bool)
    if y is not None:
        active = orig == labels_of(y)
    r_tot = np.zeros_like(x)
    for _ in range(steps):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        x_cur = x[idx] + (1.0 + overshoot) * r_tot[idx]
        f, J = score_jacobian(model, x_cur)  # (m, k), (k, m, d)
        lab = orig[idx]
        m = idx.size
        f_diff = f - f[np.arange(m), lab][:, None]
        w = J - J[lab, np.arange(m)][None, :, :]
        w_norm = np.sqrt(np.einsum("kmd,kmd->km", w, w)).T  # (m, k)
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = np.abs(f_diff) / w_norm
        ratio[np.arange(m), lab] = np.inf
        ratio[~np.isfinite(ratio)] = np.inf
        best = np.argmin(ratio, axis=1)
        pert = ratio[np.arange(m), best]
        stuck = ~np.isfinite(pert)
        w_best = w[best, np.arange(m)]
        wn = w_norm[np.arange(m), best]
        step = np.zeros_like(w_best)
        ok = ~stuck
        step[ok] = (pert[ok] / wn[ok])[:, None] * w_best[ok]
        r_tot[idx] += step
        x_new = x[idx] + (1.0 + overshoot) * r_tot[idx]
        still = (predict(model, x_new) == lab) & ok
        active[idx] = still
    delta = (1.0 + overshoot) * r_tot
    final = predict(model, x + delta)
    success = final != orig
    if y is not None:
        wrong = orig != labels_of(y)
        success = success | wrong
    return PerturbationBatch.from_deltas(delta, success)


def _margin(z, labels, confidence):
    """Z_true - max Z_other + confidence, per example."""
    m = len(z)
    true = z[np.arange(m), labels]
    other = z.copy()
    other[np.arange(m), labels] = -np.inf
    j = np.argmax(other, axis=1)
    return true - other[np.arange(m), j] + confidence, j


def cw_l2(
    model: Model,
    x,
    y,
    steps: int = 100,
    learning_rate: float = 0.01,
    confidence: float = 0.0,
    binary_search_steps: int = 10,
    initial_const: float = 1e-2,
    abort_early: bool = True,
    box=UNIT_BOX,
) -> PerturbationBatch:
    """Carlini-Wagner l2 attack with tanh reparametrisation and Adam.

    Minimises ``|delta|^2 + c * max(Z_true - max Z_other + confidence, 0)``
    and binary-searches ``c`` per example. An iterate counts as successful
    when the margin term reaches zero. Abort-early stops the inner loop once
    the objective has not improved by a relative 1e-4 for 10 steps.
    """
    x = np.asarray(x, dtype=np.float64)
    labels = labels_of(y)
    n, d = x.shape
    lo, hi = box
    mid, half = (hi + lo) / 2.0, (hi - lo) / 2.0
    w0 = np.arctanh(np.clip((x - mid) / half, -1.0, 1.0) * 0.999999)
    x_base = np.tanh(w0) * half + mid

    lower = np.zeros(n)
    upper = np.full(n, 1e10)
    const = np.full(n, initial_const)
    best_l2 = np.full(n, np.inf)
    best_adv = x.copy()
    # closest miss for examples that never succeed
    miss_margin = np.full(n, np.inf)
    miss_adv = x.copy()
    beta1, beta2, adam_eps = 0.9, 0.999, 1e-8

    for _ in range(binary_search_steps):
        w = w0.copy()
        m_t = np.zeros_like(w)
        v_t = np.zeros_like(w)
        run_best = np.full(n, np.inf)
        run_success = np.zeros(n, dtype=bool)
        prev = np.full(n, np.inf)
        stall = np.zeros(n, dtype=int)
        live = np.ones(n, dtype=bool)
        for t in range(steps + 1):
            x_adv = np.tanh(w) * half + mid
            diff = x_adv - x_base
            l2sq = np.einsum("ij,ij->i", diff, diff)
            z, J = score_jacobian(model, x_adv)
            margin, j = _margin(z, labels, confidence)
            hinge = np.maximum(margin, 0.0)
            obj = l2sq + const * hinge
            bad = ~np.isfinite(obj)
            live &= ~bad

            hit = live & (margin <= 0.0)
            l2 = np.sqrt(l2sq)
            better = hit & (l2 < best_l2)
            best_l2[better] = l2[better]
            best_adv[better] = x_adv[better]
            run_success |= hit
            closer = live & ~hit & (margin < miss_margin)
            miss_margin[closer] = margin[closer]
            miss_adv[closer] = x_adv[closer]
            run_best = np.where(hit, np.minimum(run_best, l2), run_best)
            if t == steps:
                break
            if abort_early:
                improved = obj < prev * (1.0 - 1e-4)
                stall = np.where(improved, 0, stall + 1)
                prev = np.where(improved, obj, prev)
                live &= stall < 10
            if not live.any():
                break

            rows = np.arange(n)
            g_margin = J[labels, rows] - J[j, rows]
            g_x = 2.0 * diff + (const * (margin > 0.0))[:, None] * g_margin
            g_w = g_x * half * (1.0 - np.tanh(w) ** 2)
            g_w[~live] = 0.0
            m_t = beta1 * m_t + (1 - beta1) * g_w
            v_t = beta2 * v_t + (1 - beta2) * g_w * g_w
            step = learning_rate * (m_t / (1 - beta1 ** (t + 1))) / (np.sqrt(v_t / (1 - beta2 ** (t + 1))) + adam_eps)
            w = np.where(live[:, None], w - step, w)

        # binary search on the constant
        upper = np.where(run_success, np.minimum(upper, const), upper)
        lower = np.where(run_success, lower, np.maximum(lower, const))
        found = upper < 1e9
        const = np.where(found, (lower + upper) / 2.0, const * 10.0)

    success = np.isfinite(best_l2)
    adv = np.where(success[:, None], best_adv, miss_adv)
    delta = adv - x
    return PerturbationBatch.from_deltas(delta, success)


def generate(model: Model, x, y, spec: AttackSpec, rng=None, loss: LossSpec | None = None) -> PerturbationBatch:
    """Dispatch on ``spec.kind``."""
    if spec.kind == "fgsm":
        return fgsm(model, x, y, spec.eps, loss=loss, clip=spec.clip)
    if spec.kind == "noise":
        return noise(x, spec.eps, rng, clip=spec.clip, model=model, y=y)
    if spec.kind == "pgd":
        return pgd(
            model, x, y, spec.eps, rng=rng, steps=spec.steps,
            step_fraction=spec.pgd_step_fraction, init_fraction=spec.pgd_init_fraction,
            loss=loss, clip=spec.clip,
        )
    if spec.kind == "deepfool":
        return deepfool(model, x, y, steps=spec.steps, overshoot=spec.df_overshoot)
    box = spec.clip if spec.clip is not None else UNIT_BOX
    return cw_l2(
        model, x, y, steps=spec.steps, learning_rate=spec.cw_learning_rate,
        confidence=spec.cw_confidence, binary_search_steps=spec.cw_binary_search_steps,
        initial_const=spec.cw_initial_const, abort_early=spec.cw_abort_early, box=box,
    )


def cut(batch: PerturbationBatch, eps: float) -> PerturbationBatch:
    """Rescale every perturbation with l2 norm above ``eps`` onto the eps-sphere.

    Rows already inside the ball are returned bit for bit. The shrink factor
    is nudged down by ulps where rounding would leave a row a hair above
    ``eps``, which keeps the operator exactly idempotent.
    """
    if eps < 0:
        raise ValueError("eps must be >= 0")
    deltas = batch.deltas.copy()
    norms = batch.norms_l2
    over = norms > eps
    if over.any():
        factor = eps / norms[over]
        scaled = deltas[over] * factor[:, None]
        sn = l2_norms(scaled)
        for _ in range(64):
            high = sn > eps
            if not high.any():
                break
            factor[high] = np.nextafter(factor[high], 0.0)
            scaled[high] = deltas[over][high] * factor[high][:, None]
            sn = l2_norms(scaled)
        deltas[over] = scaled
    return PerturbationBatch.from_deltas(deltas, batch.success)


def scale(batch: PerturbationBatch, rho: float) -> PerturbationBatch:
    return PerturbationBatch.from_deltas(batch.deltas * rho, batch.success)
