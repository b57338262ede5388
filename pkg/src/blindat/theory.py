"""Closed forms for the two-point sigmoid perceptron.

The data are fixed at x1 = (-1, 0, ...) with label 0 and x2 = (1, 0, ...)
with label 1; only the first weight W1 and the bias b matter. Adversarial
copies sit at (1 - eta) * x_i, i.e. eta is the distance travelled toward the
other point. The AT loss is

    sum_i 1/2 [s(W x_i + b) - y_i]^2 + 1/2 [s(W x_i_adv + b) - y_i]^2
          + lam |W| + lam |b|

and the NT loss drops the 1/2 factors and the adversarial terms.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from . import attacks
from .nn import Layer, LossSpec, Model, OptimizerState, loss_and_grads, sgd_step
from .training import cos_transform

SQUARED = LossSpec("squared-error")


def sig(u: float) -> float:
    if u >= 0:
        return 1.0 / (1.0 + math.exp(-u))
    e = math.exp(u)
    return e / (1.0 + e)


def dsig(u: float) -> float:
    s = sig(u)
    return s * (1.0 - s)


def _sign(v: float) -> float:
    return (v > 0) - (v < 0)


class NoBracket(ValueError):
    pass


def bisect(f: Callable[[float], float], lo: float, hi: float) -> float:
    """Root of ``f`` on [lo, hi] given a sign change; runs to adjacent floats."""
    flo, fhi = f(lo), f(hi)
    if flo == 0:
        return lo
    if fhi == 0:
        return hi
    if (flo > 0) == (fhi > 0):
        raise NoBracket(f"no sign change on [{lo}, {hi}]")
    while True:
        mid = 0.5 * (lo + hi)
        if mid <= lo or mid >= hi:
            break
        fm = f(mid)
        if fm == 0:
            return mid
        if (fm > 0) == (flo > 0):
            lo, flo = mid, fm
        else:
            hi, fhi = mid, fm
    return lo if abs(flo) <= abs(fhi) else hi


# ------------------------------------------------------------ normal training


def nt_residual(w1: float, lam: float) -> float:
    """lam (1 + e^W1)^2 (1 + e^-W1) - 4."""
    return lam * (1.0 + math.exp(w1)) ** 2 * (1.0 + math.exp(-w1)) - 4.0


def solve_nt_w1(lam: float) -> float:
    """Stationary W1 of the regularised NT loss (b = 0) by bisection on [0, 50].

    The residual is increasing in W1 >= 0 with value 8 lam - 4 at zero, so a
    root exists only for lam < 1/2.
    """
    if not 0 < lam < 4:
        raise ValueError(f"lam={lam} outside (0, 4)")
    try:
        return bisect(lambda w: nt_residual(w, lam), 0.0, 50.0)
    except NoBracket:
        raise NoBracket(f"no root of the NT stationarity equation in [0, 50] for lam={lam}") from None


# -------------------------------------------------------- restricted training


def _g(u: float) -> float:
    # (1 - s(u))^2 s(u), written with s(-u) to keep precision for large u
    return sig(-u) ** 2 * sig(u)


def at_residual(w1: float, lam: float, eta: float) -> float:
    """dL_AT/dW1 at b = 0 in the printed reduced form."""
    u = (1.0 - eta) * w1
    return -2.0 * _g(w1) - 2.0 * (1.0 - eta) * _g(u) + lam * _sign(w1)


def solve_at_w1(lam: float, eta: float, hi: float = 50.0, hi_max: float = 1e12) -> float:
    """Stationary W1 > 0 of restricted AT with budget ``eta``.

    The upper end of the bracket doubles from ``hi`` until the residual turns
    positive; near eta = 1 the root runs into the thousands.
    """
    if lam <= 0:
        raise ValueError("lam must be > 0")
    if not 0.0 <= eta <= 2.0:
        raise ValueError(f"eta={eta} outside [0, 2]")
    f = lambda w: at_residual(w, lam, eta)
    lo = 1e-12
    if f(lo) >= 0:
        raise NoBracket(f"residual already non-negative at W1=0+ for eta={eta}")
    while f(hi) <= 0:
        hi *= 2.0
        if hi > hi_max:
            raise NoBracket(f"no root below W1={hi_max:g} for eta={eta}")
    return bisect(f, lo, hi)


def _h(u: float) -> float:
    s = sig(u)
    return dsig(u) * sig(-u) * (3.0 * s - 1.0)


def curvature_b(w1: float, b: float, eta: float) -> float:
    """d^2 L_AT / db^2, the printed four-term expression."""
    a = (1.0 - eta) * w1
    return _h(w1 - b) + _h(w1 + b) + _h(a - b) + _h(a + b)


def curvature_w1(w1: float, b: float, eta: float) -> float:
    """d^2 L_AT / dW1^2 as printed."""
    a = (1.0 - eta) * w1
    return _h(w1 - b) + _h(w1 + b) + ((1.0 - eta) ** 2) * (_h(a - b) + _h(a + b))


def curvature_b_w1(w1: float, b: float, eta: float) -> float:
    """Mixed second derivative as printed."""
    a = (1.0 - eta) * w1
    return -_h(w1 - b) + _h(w1 + b) + (eta - 1.0) * _h(a - b) + (1.0 - eta) * _h(a + b)


def nt_curvature_b(w1: float, b: float) -> float:
    """d^2 L_NT / db^2 (no 1/2 factors, so twice the clean terms)."""
    return 2.0 * (_h(w1 - b) + _h(w1 + b))


def at_loss(w1: float, b: float, eta: float, lam: float = 0.0) -> float:
    """Assembled restricted-AT loss along the first axis."""
    terms = (
        sig(b - w1) ** 2,
        sig(w1 * (eta - 1.0) + b) ** 2,
        sig(-(w1 + b)) ** 2,
        sig(-(w1 * (1.0 - eta) + b)) ** 2,
    )
    return 0.5 * sum(terms) + lam * abs(w1) + lam * abs(b)


def at_grad_b(w1: float, b: float, eta: float, lam: float = 0.0) -> float:
    """dL_AT/db, printed form."""
    return unrestricted_grad_b(w1, b, eta, eta, lam)


def at_grad_w1(w1: float, b: float, eta: float, lam: float = 0.0) -> float:
    return unrestricted_grad_w1(w1, b, eta, eta, lam)


# ------------------------------------------------------ unrestricted training


def unrestricted_grad_b(w1: float, b: float, eta1: float, eta2: float, lam: float = 0.0) -> float:
    """dL/db with separate travel ``eta1`` (label 0) and ``eta2`` (label 1).

    Adversarial copies sitting on the current boundary have
    eta1 + eta2 = 2; the function itself does not enforce it, so the
    figure sweeps can hold eta1 fixed while eta2 varies.
    """
    u1 = w1 * (eta1 - 1.0) + b
    u2 = w1 * (1.0 - eta2) + b
    return (
        sig(b - w1) * dsig(b - w1)
        + sig(u1) * dsig(u1)
        + (sig(w1 + b) - 1.0) * dsig(w1 + b)
        + (sig(u2) - 1.0) * dsig(u2)
        + lam * _sign(b)
    )


def unrestricted_grad_w1(w1: float, b: float, eta1: float, eta2: float, lam: float = 0.0) -> float:
    u1 = w1 * (eta1 - 1.0) + b
    u2 = w1 * (1.0 - eta2) + b
    return (
        -sig(b - w1) * dsig(b - w1)
        + sig(u1) * dsig(u1) * (eta1 - 1.0)
        + (sig(w1 + b) - 1.0) * dsig(w1 + b)
        + (sig(u2) - 1.0) * dsig(u2) * (1.0 - eta2)
        + lam * _sign(w1)
    )


def on_boundary_grad_b(w1: float, b: float, lam: float = 0.0) -> float:
    """dL/db once both adversarial copies sit on the boundary (their terms cancel)."""
    return sig(b - w1) * dsig(b - w1) + (sig(w1 + b) - 1.0) * dsig(w1 + b) + lam * _sign(b)


# ------------------------------------------------------------------ sweeps


def argmax_eta(lam: float, lo: float = 0.99, hi: float = 1.0, points: int = 2001) -> tuple[float, float]:
    """Budget in [lo, hi) that maximises the AT stationary W1, refined twice."""
    for _ in range(3):
        etas = np.linspace(lo, hi, points, endpoint=False)
        w = np.array([solve_at_w1(lam, e) for e in etas])
        k = int(np.argmax(w))
        step = etas[1] - etas[0]
        lo, hi = max(etas[k] - step, 0.0), min(etas[k] + step, 1.0)
    return float(etas[k]), float(w[k])


def sweep(fn: Callable[[float], float], grid: Iterable[float]) -> list[tuple[float, float]]:
    grid = list(grid)
    if not grid:
        raise ValueError("empty grid")
    return [(float(g), float(fn(g))) for g in grid]


FIGURES = {
    7: ("lambda", "w1"),
    8: ("eta", "w1"),
    9: ("eta", "d2L_db2"),
    10: ("eta2", "dL_db"),
}


def figure_rows(fig: int, lam: float = 1e-5) -> list[tuple[float, float]]:
    """Data behind the four closed-form figures."""
    if fig == 7:
        return sweep(solve_nt_w1, 10.0 ** np.linspace(-6, -1, 51))
    if fig == 8:
        return sweep(lambda e: solve_at_w1(lam, e), np.round(np.arange(1001) * 1e-3, 12))
    if fig == 9:
        return sweep(lambda e: curvature_b(solve_at_w1(lam, e), 0.0, e), np.round(np.arange(1001) * 1e-3, 12))
    if fig == 10:
        return sweep(lambda e2: unrestricted_grad_b(5.0, 2.5, 0.5, e2), np.round(np.arange(151) * 1e-2, 12))
    raise ValueError(f"no figure {fig}; choose from {sorted(FIGURES)}")


def write_sweep(rows: Sequence[tuple[float, float]], header: Sequence[str], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([repr(v) for v in row])


# ------------------------------------------------- two-point training runs


def two_point_data(dim: int = 2):
    x = np.zeros((2, dim))
    x[0, 0], x[1, 0] = -1.0, 1.0
    return x, np.array([0.0, 1.0])


def perceptron(w: Sequence[float], b: float) -> Model:
    w = np.asarray(w, dtype=np.float64).reshape(-1, 1)
    return Model((Layer(w, np.array([float(b)]), "sigmoid"),))


@dataclass
class TwoPointRun:
    epochs: int | None
    w1: float
    b: float


def _adversarial_copies(model: Model, x, y, mode: str, eta: float, rho: float):
    if mode == "nt":
        return None
    if mode == "restricted":
        return (1.0 - eta) * x
    W = model.layers[0].W[:, 0]
    b = model.layers[0].b[0]
    if mode == "on-boundary":
        # both copies slide along the first axis onto W.x + b = 0
        xs = x.copy()
        xs[:, 0] = -(b + W[1:] @ x[:, 1:].T) / W[0]
        return xs
    if mode == "bat":
        batch = attacks.deepfool(model, x, y)
        out, _ = cos_transform(batch, rho)
        return x + out.deltas
    raise ValueError(f"unknown mode {mode!r}")


def train_two_point(
    mode: str,
    eta: float = 0.9,
    lam: float = 1e-5,
    lr: float = 0.2,
    w0: Sequence[float] | None = None,
    b0: float | None = None,
    seed: int = 0,
    rho: float = 0.9,
    max_epochs: int = 200_000,
    b_tol: float = 1e-3,
    w1_min: float = 5.0,
) -> TwoPointRun:
    """Full-batch gradient descent on the two-point problem.

    Modes: ``nt``, ``restricted`` (fixed ``eta``), ``on-boundary`` (copies
    placed on the current boundary) and ``bat`` (DeepFool copies after
    cutoff and scale). Gradients come from the autodiff engine; the
    ``lam`` (|W| + |b|) subgradient is added on top. Stops at the first epoch
    with |b| < b_tol and W1 > w1_min; ``epochs`` is None if that never happens.
    Missing initial values are drawn from ``seed``: W1 in [0.5, 1.5], the
    other weight in [-0.5, 0.5] and b in [-1, 1].
    """
    rng = np.random.default_rng(seed)
    w_init = np.array([rng.uniform(0.5, 1.5), rng.uniform(-0.5, 0.5)])
    b_init = rng.uniform(-1.0, 1.0)
    w0 = w_init if w0 is None else np.asarray(w0, dtype=np.float64)
    b0 = b_init if b0 is None else float(b0)
    x, y = two_point_data(len(w0))
    model = perceptron(w0, b0)
    state = OptimizerState(lr=lr)
    for epoch in range(1, max_epochs + 1):
        _, g, _ = loss_and_grads(model, x, y, SQUARED)
        x_adv = _adversarial_copies(model, x, y, mode, eta, rho)
        if x_adv is None:
            # NT carries no 1/2 factors: twice the batch-mean loss
            grads = [2.0 * gi for gi in g]
        else:
            _, g_adv, _ = loss_and_grads(model, x_adv, y, SQUARED)
            grads = [gi + ga for gi, ga in zip(g, g_adv)]
        params = model.params()
        grads = [gi + lam * np.sign(p) for gi, p in zip(grads, params)]
        model, state = sgd_step(model, grads, state)
        w1 = model.layers[0].W[0, 0]
        b = model.layers[0].b[0]
        if abs(b) < b_tol and w1 > w1_min:
            return TwoPointRun(epoch, float(w1), float(b))
    return TwoPointRun(None, float(model.layers[0].W[0, 0]), float(model.layers[0].b[0]))
