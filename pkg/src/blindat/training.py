"""One epoch loop for normal, restricted-adversarial, DeepFool and blind training.

Every strategy minimises ``L(x) + L(x + delta)`` with unit mixing weight.
Normal training is the special case ``delta = 0``: its adversarial copy is the
clean batch itself, so it takes exactly the same gradient as blind training
with ``rho = 0``. Blind training (BAT) perturbs with DeepFool, then cuts every
perturbation at the batch-mean l2 norm and shrinks the survivors by ``rho``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import attacks
from .attacks import AttackSpec, PerturbationBatch
from .nn import (
    LossSpec,
    Model,
    OptimizerState,
    accuracy,
    adam_step,
    init_model,
    loss_and_grads,
    sgd_step,
)

STRATEGIES = ("nt", "restricted-at", "df-at", "bat")
MONITORS = ("fixed", "accuracy", "avg-aa-plateau")


class TrainingDiverged(FloatingPointError):
    def __init__(self, epoch: int, msg: str = "loss is not finite"):
        super().__init__(f"epoch {epoch}: {msg}")
        self.epoch = epoch


@dataclass(frozen=True)
class TrainConfig:
    strategy: str = "nt"
    sizes: tuple[int, ...] = (784, 128, 10)
    activations: tuple[str, ...] = ("relu", "identity")
    epochs: int = 10
    lr: float = 1e-3
    optimizer: str = "adam"
    batch_size: int = 128
    loss: LossSpec = field(default_factory=LossSpec)
    seed: int = 0
    rho: float = 0.9
    # "adaptive" (batch-mean norm), "off", or a fixed l2 radius
    cutoff: str | float = "adaptive"
    attack: AttackSpec | None = None
    df_steps: int = 10
    df_overshoot: float = 0.02
    monitor: str = "fixed"
    monitor_window: int = 5
    monitor_tol: float = 0.002
    monitor_theta: float | None = None

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        if self.epochs <= 0:
            raise ValueError("epochs must be > 0")
        if not 0.0 <= self.rho <= 1.0:
            raise ValueError(f"rho={self.rho} outside [0, 1]")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.monitor not in MONITORS:
            raise ValueError(f"monitor must be one of {MONITORS}")
        if self.batch_size <= 0:
            raise ValueError("batch_size must be > 0")
        if isinstance(self.cutoff, str):
            if self.cutoff not in ("adaptive", "off"):
                raise ValueError("cutoff must be 'adaptive', 'off' or a number")
        elif self.cutoff < 0:
            raise ValueError("cutoff radius must be >= 0")
        if self.strategy == "restricted-at":
            if self.attack is None or not self.attack.constrained or self.attack.eps is None:
                raise ValueError("restricted-at needs a budgeted fgsm/pgd/noise attack")


@dataclass
class TrainReport:
    clean_acc: list[float] = field(default_factory=list)
    mean_norm: list[float] = field(default_factory=list)
    eps_budget: list[float] = field(default_factory=list)
    model: Model | None = None
    batch_eps: list[float] = field(default_factory=list)

    @property
    def epochs(self) -> int:
        return len(self.clean_acc)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "clean_acc", "mean_norm", "eps_budget"])
            for i, row in enumerate(zip(self.clean_acc, self.mean_norm, self.eps_budget), start=1):
                w.writerow([i, *(repr(float(v)) for v in row)])


def cos_transform(batch: PerturbationBatch, rho: float, cutoff: str | float = "adaptive"):
    """Cutoff then scale. Returns ``(new_batch, eps)``.

    With ``cutoff="adaptive"`` the radius is the mean l2 norm of the batch,
    taken before anything is cut.
    """
    if not 0.0 <= rho <= 1.0:
        raise ValueError(f"rho={rho} outside [0, 1]")
    if len(batch) == 0:
        raise ValueError("empty perturbation batch")
    if cutoff == "off":
        eps = math.inf
        cut = batch
    else:
        eps = float(np.mean(batch.norms_l2)) if cutoff == "adaptive" else float(cutoff)
        cut = attacks.cut(batch, eps)
    if rho == 1.0:
        return cut, eps
    return attacks.scale(cut, rho), eps


def _perturb(model, xb, yb, config: TrainConfig, rng):
    """Perturbation to train on, raw mean norm and the budget used."""
    s = config.strategy
    if s == "nt":
        return None, 0.0, 0.0
    if s == "restricted-at":
        batch = attacks.generate(model, xb, yb, config.attack, rng=rng, loss=config.loss)
        return batch.deltas, float(np.mean(batch.norms_l2)), float(config.attack.eps)
    batch = attacks.deepfool(model, xb, yb, steps=config.df_steps, overshoot=config.df_overshoot)
    raw = float(np.mean(batch.norms_l2))
    if s == "df-at":
        return batch.deltas, raw, math.inf
    out, eps = cos_transform(batch, config.rho, config.cutoff)
    return out.deltas, raw, eps


def train_step(model, state, xb, yb, config: TrainConfig, rng):
    """One update on ``L(x) + L(x + delta)``. Returns model, state, stats."""
    loss_c, g_c, _ = loss_and_grads(model, xb, yb, config.loss)
    delta, raw, eps = _perturb(model, xb, yb, config, rng)
    if delta is None:
        loss_ae, g_ae = loss_c, g_c
    else:
        loss_ae, g_ae, _ = loss_and_grads(model, xb + delta, yb, config.loss)
    total = loss_c + loss_ae
    grads = [a + b for a, b in zip(g_c, g_ae)]
    step = adam_step if config.optimizer == "adam" else sgd_step
    model, state = step(model, grads, state)
    return model, state, total, raw, eps


def train(
    config: TrainConfig,
    x,
    y,
    model: Model | None = None,
    holdout=None,
    stop: Callable[[int, Model, TrainReport], bool] | None = None,
    on_epoch: Callable[[int, Model, TrainReport], None] | None = None,
) -> TrainReport:
    """Run ``config.strategy`` on ``(x, y)``.

    ``model`` overrides the seeded initialisation. ``stop`` is consulted after
    every epoch in addition to the configured monitor.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    n = len(x)
    if n == 0:
        raise ValueError("empty training set")
    rng = np.random.default_rng(config.seed)
    if model is None:
        model = init_model(config.sizes, config.activations, rng)
    state = OptimizerState(lr=config.lr)
    report = TrainReport()
    history: list[float] = []
    for epoch in range(1, config.epochs + 1):
        perm = rng.permutation(n)
        norms, budgets = [], []
        for start in range(0, n, config.batch_size):
            idx = perm[start : start + config.batch_size]
            try:
                with np.errstate(over="ignore", invalid="ignore"):
                    model, state, total, raw, eps = train_step(model, state, x[idx], y[idx], config, rng)
            except FloatingPointError as e:
                raise TrainingDiverged(epoch, str(e)) from None
            if not math.isfinite(total):
                raise TrainingDiverged(epoch)
            norms.append(raw)
            budgets.append(eps)
        report.clean_acc.append(accuracy(model, x, y))
        report.mean_norm.append(float(np.mean(norms)))
        report.eps_budget.append(float(np.mean(budgets)))
        report.batch_eps.extend(budgets)
        report.model = model
        if on_epoch is not None:
            on_epoch(epoch, model, report)
        if _monitor_says_stop(config, model, report, holdout if holdout is not None else (x, y), history):
            break
        if stop is not None and stop(epoch, model, report):
            break
    return report


def _monitor_says_stop(config, model, report, holdout, history) -> bool:
    if config.monitor == "fixed":
        return False
    if config.monitor == "accuracy":
        return report.clean_acc[-1] >= 1.0
    from .evaluation import aa_curve, avg_aa, default_l2_grid

    hx, hy = holdout
    df = AttackSpec("deepfool", steps=config.df_steps, df_overshoot=config.df_overshoot)
    batch = attacks.deepfool(model, hx, hy, steps=config.df_steps, overshoot=config.df_overshoot)
    theta = config.monitor_theta or float(np.mean(batch.norms_l2))
    grid = default_l2_grid(max(theta, 1e-12))
    curve = aa_curve(model, hx, hy, df, grid, deltas=batch)
    history.append(avg_aa(curve, min(theta, grid[-1])))
    w = config.monitor_window
    if len(history) < w:
        return False
    recent = history[-w:]
    return max(recent) - min(recent) < config.monitor_tol


def train_nt(config: TrainConfig, x, y, **kw) -> TrainReport:
    return train(_with_strategy(config, "nt"), x, y, **kw)


def train_restricted_at(config: TrainConfig, x, y, **kw) -> TrainReport:
    return train(_with_strategy(config, "restricted-at"), x, y, **kw)


def train_df_at(config: TrainConfig, x, y, **kw) -> TrainReport:
    return train(_with_strategy(config, "df-at"), x, y, **kw)


def train_bat(config: TrainConfig, x, y, **kw) -> TrainReport:
    return train(_with_strategy(config, "bat"), x, y, **kw)


def _with_strategy(config: TrainConfig, strategy: str) -> TrainConfig:
    from dataclasses import replace

    return config if config.strategy == strategy else replace(config, strategy=strategy)
