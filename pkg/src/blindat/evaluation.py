"""Accuracy-versus-strength curves and their averages.

Two ways to sample a curve:

* ``cut-l2`` (DeepFool, CW): attack once without a budget, then score
  ``x + cut(delta, eps)`` for every eps on the grid;
* ``regenerate`` (FGSM, Noise, PGD): rerun the budgeted attack at every eps.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import attacks
from .attacks import AttackSpec, PerturbationBatch
from .nn import Model, labels_of, predict


@dataclass(frozen=True)
class AACurve:
    grid: np.ndarray
    accuracy: np.ndarray
    attack: str
    mode: str

    def __post_init__(self):
        g = np.asarray(self.grid, dtype=np.float64)
        a = np.asarray(self.accuracy, dtype=np.float64)
        if g.ndim != 1 or g.size == 0 or g.shape != a.shape:
            raise ValueError("grid and accuracy must be equal-length 1-d arrays")
        if g[0] != 0.0 or np.any(np.diff(g) <= 0):
            raise ValueError("grid must start at 0 and increase strictly")
        object.__setattr__(self, "grid", g)
        object.__setattr__(self, "accuracy", a)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epsilon", "accuracy", "attack", "mode"])
            for e, a in zip(self.grid, self.accuracy):
                w.writerow([repr(float(e)), repr(float(a)), self.attack, self.mode])


def _check_grid(grid) -> np.ndarray:
    grid = np.asarray(grid, dtype=np.float64)
    if grid.size == 0:
        raise ValueError("empty grid")
    if grid[0] != 0.0:
        raise ValueError("grid must start at 0")
    return grid


def default_l2_grid(mean_norm: float, points: int = 61) -> np.ndarray:
    """Uniform grid on [0, 1.2 * mean_norm]."""
    return np.linspace(0.0, 1.2 * mean_norm, points)


def _accuracy(model, x, labels) -> float:
    return float(np.mean(predict(model, x) == labels))


def cut_curve(model: Model, x, y, batch: PerturbationBatch, grid) -> np.ndarray:
    labels = labels_of(y)
    out = []
    for eps in grid:
        out.append(_accuracy(model, x + attacks.cut(batch, eps).deltas, labels))
    return np.array(out)


def aa_curve(
    model: Model,
    x,
    y,
    attack: AttackSpec,
    grid,
    rng=None,
    deltas: PerturbationBatch | None = None,
    source: Model | None = None,
) -> AACurve:
    """Adversarial accuracy of ``model`` along ``grid``.

    ``source`` crafts the perturbations (white-box when omitted). In cut
    mode a precomputed ``deltas`` batch can be reused.
    """
    grid = _check_grid(grid)
    x = np.asarray(x, dtype=np.float64)
    labels = labels_of(y)
    src = source if source is not None else model
    if attack.constrained:
        rng = np.random.default_rng(rng)
        acc = []
        for eps in grid:
            if eps == 0.0:
                acc.append(_accuracy(model, x, labels))
                continue
            b = attacks.generate(src, x, y, attack.with_eps(float(eps)), rng=rng)
            acc.append(_accuracy(model, x + b.deltas, labels))
        return AACurve(grid, np.array(acc), attack.kind, "regenerate")
    if deltas is None:
        deltas = attacks.generate(src, x, y, attack)
    return AACurve(grid, cut_curve(model, x, y, deltas, grid), attack.kind, "cut-l2")


def avg_aa(curve: AACurve, theta: float) -> float:
    """Mean of the curve over [0, theta] by the trapezoid rule.

    ``theta`` need not be a grid point; the curve is linearly interpolated
    there. ``theta = 0`` returns the clean accuracy.
    """
    if theta < 0:
        raise ValueError("theta must be >= 0")
    g, a = curve.grid, curve.accuracy
    if theta > g[-1]:
        raise ValueError(f"theta={theta} beyond the sampled range [0, {g[-1]}]")
    if theta == 0.0:
        return float(a[0])
    k = int(np.searchsorted(g, theta, side="right"))
    xs = np.append(g[:k], theta) if g[k - 1] != theta else g[:k]
    ys = np.append(a[:k], np.interp(theta, g, a)) if g[k - 1] != theta else a[:k]
    area = np.sum((xs[1:] - xs[:-1]) * (ys[1:] + ys[:-1]) / 2.0)
    return float(area / theta)


def mean_norm(model: Model, x, y, attack: AttackSpec) -> float:
    """Average l2 norm of unconstrained perturbations over the set."""
    if attack.constrained:
        raise ValueError(f"mean_norm needs an unconstrained attack, got {attack.kind}")
    return float(np.mean(attacks.generate(model, x, y, attack).norms_l2))


def blackbox_eval(source: Model, target: Model, x, y, attack: AttackSpec, grid, rng=None) -> AACurve:
    """Perturbations crafted on ``source``, accuracy measured on ``target``."""
    if source.input_dim != target.input_dim or source.n_classes != target.n_classes:
        raise ValueError(
            f"source {source.describe()} and target {target.describe()} disagree on input/output size"
        )
    return aa_curve(target, x, y, attack, grid, rng=rng, source=source)


@dataclass
class EvalReport:
    curves: dict[str, AACurve] = field(default_factory=dict)
    avg: dict[str, dict[float, float]] = field(default_factory=dict)
    norms: dict[str, float] = field(default_factory=dict)
    clean: float | None = None


def evaluate(
    model: Model,
    x,
    y,
    attack_specs,
    linf_budgets=(0.1, 0.2, 0.3),
    rng=None,
) -> EvalReport:
    """Curves, mean norms and avg-AA at the mean norm and half of it."""
    report = EvalReport()
    rng = np.random.default_rng(rng)
    for spec in attack_specs:
        if spec.constrained:
            grid = np.concatenate([[0.0], np.asarray(linf_budgets, dtype=np.float64)])
            curve = aa_curve(model, x, y, spec, grid, rng=rng)
            report.curves[spec.kind] = curve
            continue
        batch = attacks.generate(model, x, y, spec)
        mn = float(np.mean(batch.norms_l2))
        grid = default_l2_grid(mn) if mn > 0 else np.array([0.0])
        curve = aa_curve(model, x, y, spec, grid, deltas=batch)
        report.curves[spec.kind] = curve
        report.norms[spec.kind] = mn
        report.avg[spec.kind] = {mn: avg_aa(curve, mn), mn / 2: avg_aa(curve, mn / 2)}
    report.clean = float(next(iter(report.curves.values())).accuracy[0]) if report.curves else None
    return report


def write_table(rows, path) -> None:
    """One row per (defense, attack, budget) with the measured accuracy."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["defense", "attack", "budget", "accuracy"])
        for defense, attack, budget, acc in rows:
            w.writerow([defense, attack, repr(float(budget)), repr(float(acc))])


def table_rows(defense: str, report: EvalReport):
    for kind, curve in report.curves.items():
        for e, a in zip(curve.grid, curve.accuracy):
            yield defense, kind, e, a
