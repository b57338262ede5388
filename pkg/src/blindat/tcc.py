"""Two concentric circles: data, exact robustness and the polygon bounds.

Label 0 lives on the inner circle, label 1 on the outer one. A classifier's
robustness is the distance from the data to its 0.5-level set, which we
locate by bisection along a fan of rays from the origin.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .nn import Model, scores

R_INNER = 0.3
R_OUTER = 0.7


class DegenerateBoundary(RuntimeError):
    """Too many rays without a level crossing between the circles."""


@dataclass(frozen=True)
class TccDataset:
    points: np.ndarray
    labels: np.ndarray
    r1: float
    r2: float
    seed: int


def _sample(n, r1, r2, rng):
    labels = np.arange(n) % 2
    rng.shuffle(labels)
    angles = rng.uniform(0.0, 2.0 * np.pi, size=n)
    radii = np.where(labels == 0, r1, r2)
    pts = np.stack([radii * np.cos(angles), radii * np.sin(angles)], axis=1)
    return pts, labels


def gen_two_circles(n_train=5000, n_test=1000, r1=R_INNER, r2=R_OUTER, seed=0):
    """Balanced train/test sets with uniform angles."""
    if not 0 < r1 < r2:
        raise ValueError(f"need 0 < r1 < r2, got r1={r1}, r2={r2}")
    if n_train <= 0 or n_test <= 0:
        raise ValueError("sample counts must be positive")
    rng = np.random.default_rng(seed)
    tr = _sample(n_train, r1, r2, rng)
    te = _sample(n_test, r1, r2, rng)
    return TccDataset(*tr, r1, r2, seed), TccDataset(*te, r1, r2, seed)


def polygon_bound(n_sides: int, r1: float = R_INNER, r2: float = R_OUTER) -> float:
    """Best margin of a regular n-gon boundary between the circles.

    The circumradius R balances the inner gap (apothem - r1) against the
    outer gap (r2 - R), giving R = (r1 + r2) / (1 + cos(pi / n)).
    """
    if n_sides < 3:
        raise ValueError("a polygon needs at least 3 sides")
    if math.isinf(n_sides):
        return (r2 - r1) / 2.0
    R = (r1 + r2) / (1.0 + math.cos(math.pi / n_sides))
    return r2 - R


@dataclass
class RobustnessReport:
    distances: np.ndarray
    angles: np.ndarray
    boundary_radius: np.ndarray
    profile: np.ndarray
    degenerate: int = 0

    @property
    def min(self) -> float:
        return float(self.distances.min())

    @property
    def mean(self) -> float:
        return float(self.distances.mean())

    @property
    def max(self) -> float:
        return float(self.distances.max())

    def profile_csv(self, path):
        _write(path, ["angle", "distance"], zip(self.angles, self.profile))

    def boundary_csv(self, path):
        _write(path, ["angle", "radius"], zip(self.angles, self.boundary_radius))


def _write(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([repr(float(v)) for v in row])


def _level(model, pts):
    # positive on the outer (class 1) side of the boundary
    s = scores(model, pts)
    return s[:, 1] - s[:, 0]


def boundary_rays(model: Model, n_rays=4096, r1=R_INNER, r2=R_OUTER, tol=1e-8, samples=64):
    """Radius of the first inner-to-outer level crossing on each ray.

    Rays are scanned at ``samples`` radii in [r1, r2]; the first sign change
    is refined by bisection to ``tol``. Rays without a crossing give NaN.
    """
    angles = np.arange(n_rays) * (2.0 * np.pi / n_rays)
    c, s = np.cos(angles), np.sin(angles)
    radii = np.linspace(r1, r2, samples)
    pts = (radii[None, :, None] * np.stack([c, s], axis=1)[:, None, :]).reshape(-1, 2)
    vals = _level(model, pts).reshape(n_rays, samples)
    pos = vals > 0
    change = pos[:, 1:] & ~pos[:, :-1]
    has = change.any(axis=1)
    first = np.argmax(change, axis=1)
    lo = radii[first].copy()
    hi = radii[first + 1].copy()
    iters = max(1, int(math.ceil(math.log2((radii[1] - radii[0]) / tol))))
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        v = _level(model, np.stack([mid * c, mid * s], axis=1)) > 0
        hi = np.where(v, mid, hi)
        lo = np.where(v, lo, mid)
    r = 0.5 * (lo + hi)
    r[~has] = np.nan
    return angles, r


def _point_segment_dist(points, a, b, chunk=256):
    """Min distance from each point to a set of segments a[i]-b[i]."""
    ab = b - a
    ab2 = np.einsum("ij,ij->i", ab, ab)
    ab2 = np.where(ab2 > 0, ab2, 1.0)
    out = np.empty(len(points))
    for s in range(0, len(points), chunk):
        p = points[s : s + chunk, None, :]
        t = np.clip(np.einsum("psk,sk->ps", p - a[None], ab) / ab2[None], 0.0, 1.0)
        proj = a[None] + t[..., None] * ab[None]
        d = np.sqrt(np.sum((p - proj) ** 2, axis=2))
        out[s : s + chunk] = d.min(axis=1)
    return out


def boundary_distance(
    model: Model,
    points,
    labels=None,
    n_rays=4096,
    r1=R_INNER,
    r2=R_OUTER,
    tol=1e-8,
    max_degenerate=0.01,
) -> RobustnessReport:
    """Distance from every point to the sampled 0.5-level polyline.

    Misclassified points (when ``labels`` are given) get distance 0.
    """
    points = np.asarray(points, dtype=np.float64)
    angles, r = boundary_rays(model, n_rays, r1, r2, tol)
    bad = np.isnan(r)
    if bad.mean() > max_degenerate:
        raise DegenerateBoundary(
            f"{int(bad.sum())} of {n_rays} rays have no level crossing between r={r1} and r={r2}"
        )
    keep = ~bad
    ang, rad = angles[keep], r[keep]
    verts = np.stack([rad * np.cos(ang), rad * np.sin(ang)], axis=1)
    nxt = np.roll(verts, -1, axis=0)
    # do not bridge gaps left by degenerate rays
    gap = np.diff(np.append(ang, ang[0] + 2 * np.pi)) > 1.5 * (2 * np.pi / n_rays)
    seg_a, seg_b = verts[~gap], nxt[~gap]
    seg_a = np.concatenate([seg_a, verts[gap]])
    seg_b = np.concatenate([seg_b, verts[gap]])
    dist = _point_segment_dist(points, seg_a, seg_b)
    if labels is not None:
        wrong = predict_tcc(model, points) != np.asarray(labels)
        dist[wrong] = 0.0

    ring = np.concatenate(
        [np.stack([r1 * np.cos(angles), r1 * np.sin(angles)], 1), np.stack([r2 * np.cos(angles), r2 * np.sin(angles)], 1)]
    )
    ring_d = _point_segment_dist(ring, seg_a, seg_b)
    ring_labels = np.concatenate([np.zeros(n_rays, int), np.ones(n_rays, int)])
    ring_d[predict_tcc(model, ring) != ring_labels] = 0.0
    profile = np.minimum(ring_d[:n_rays], ring_d[n_rays:])
    return RobustnessReport(dist, angles, r, profile, int(bad.sum()))


def predict_tcc(model: Model, pts) -> np.ndarray:
    return (_level(model, pts) > 0).astype(int)


# ------------------------------------------------------------- experiments

TCC_STRATEGIES = ("nt", "at", "nt-aa", "bat")


@dataclass(frozen=True)
class TccConfig:
    """One run of the circles experiment.

    ``epochs`` is the fixed budget for ``bat`` and the cap for the others.
    Training is full-batch plain gradient descent on squared error.
    """

    strategy: str = "bat"
    epochs: int = 8000
    lr: float = 0.2
    hidden: int = 6
    batch_size: int = 5000
    at_eps: float = 0.1
    rho: float = 0.9
    seed: int = 0
    n_train: int = 5000
    n_test: int = 1000
    n_rays: int = 4096
    track_every: int = 50
    track_rays: int = 1024
    plateau_window: int = 200
    plateau_tol: float = 1e-3

    def __post_init__(self):
        if self.strategy not in TCC_STRATEGIES:
            raise ValueError(f"strategy must be one of {TCC_STRATEGIES}, got {self.strategy!r}")
        if self.epochs <= 0 or self.track_every <= 0:
            raise ValueError("epochs and track_every must be > 0")


@dataclass
class TccResult:
    robustness: RobustnessReport
    train: object
    history: list = field(default_factory=list)
    config: TccConfig | None = None

    def history_csv(self, path):
        _write(path, ["epoch", "min", "mean", "max"], self.history)


def _train_config(cfg: TccConfig):
    from .attacks import AttackSpec
    from .nn import LossSpec
    from .training import TrainConfig

    strategy = {"nt": "nt", "nt-aa": "nt", "at": "restricted-at", "bat": "bat"}[cfg.strategy]
    return TrainConfig(
        strategy=strategy,
        sizes=(2, cfg.hidden, 1),
        activations=("relu", "sigmoid"),
        epochs=cfg.epochs,
        lr=cfg.lr,
        optimizer="sgd",
        batch_size=cfg.batch_size,
        loss=LossSpec("squared-error"),
        seed=cfg.seed,
        rho=cfg.rho,
        attack=AttackSpec("fgsm", eps=cfg.at_eps, clip=None) if strategy == "restricted-at" else None,
        monitor="accuracy" if cfg.strategy == "nt" else "fixed",
    )


def run_tcc_experiment(cfg: TccConfig, log=None) -> TccResult:
    """Train the 2-hidden-1 rectifier network and measure its boundary distance.

    Stopping rules: ``nt`` stops at 100% training accuracy, ``at`` once the
    clean and the FGSM copies are all classified correctly, ``nt-aa`` when
    the tracked min distance has moved less than ``plateau_tol`` over
    ``plateau_window`` epochs, and ``bat`` runs the full budget.
    """
    from .attacks import fgsm
    from .nn import accuracy
    from .training import train

    data, _ = gen_two_circles(cfg.n_train, cfg.n_test, seed=cfg.seed)
    x, y = data.points, data.labels
    tc = _train_config(cfg)
    history: list[tuple[int, float, float, float]] = []

    def track(epoch, model, report):
        if epoch % cfg.track_every:
            return
        try:
            r = boundary_distance(model, x, y, n_rays=cfg.track_rays)
            row = (epoch, r.min, r.mean, r.max)
        except DegenerateBoundary:
            row = (epoch, 0.0, 0.0, 0.0)
        history.append(row)
        if log is not None:
            log(f"[{cfg.strategy} seed={cfg.seed}] epoch {epoch} acc={report.clean_acc[-1]:.4f} min={row[1]:.4f}")

    def stop(epoch, model, report):
        if cfg.strategy == "at":
            if report.clean_acc[-1] < 1.0:
                return False
            adv = fgsm(model, x, y, cfg.at_eps, clip=None)
            return accuracy(model, x + adv.deltas, y) >= 1.0
        if cfg.strategy == "nt-aa":
            span = cfg.plateau_window // cfg.track_every + 1
            if epoch % cfg.track_every or len(history) < span:
                return False
            recent = [h[1] for h in history[-span:]]
            return recent[-1] > 0 and max(recent) - min(recent) < cfg.plateau_tol
        return False

    rep = train(tc, x, y, stop=stop, on_epoch=track)
    rob = boundary_distance(rep.model, x, y, n_rays=cfg.n_rays)
    return TccResult(rob, rep, history, cfg)
