"""IDX loading, stratified subsets and run configuration files.

Run configurations are TOML with a fixed set of sections. Every key is
checked against the dataclass that receives it, so a typo is an error
rather than a silently ignored setting.
"""

from __future__ import annotations

import dataclasses
import math
import os
import re
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801


class IdxError(ValueError):
    pass


class BadMagic(IdxError):
    pass


class TruncatedPayload(IdxError):
    pass


class CountMismatch(IdxError):
    pass


@dataclass(frozen=True)
class Dataset:
    images: np.ndarray
    labels: np.ndarray
    name: str = ""
    split: str = ""

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise CountMismatch(f"{len(self.images)} images but {len(self.labels)} labels")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def n_classes(self) -> int:
        return int(self.labels.max()) + 1 if len(self) else 0


def _read_idx(path, magic: int):
    raw = Path(path).read_bytes()
    if len(raw) < 8:
        raise TruncatedPayload(f"{path}: {len(raw)} bytes is shorter than an IDX header")
    (got,) = struct.unpack(">I", raw[:4])
    if got != magic:
        raise BadMagic(f"{path}: magic 0x{got:08x}, expected 0x{magic:08x}")
    ndim = magic & 0xFF
    head = 4 + 4 * ndim
    if len(raw) < head:
        raise TruncatedPayload(f"{path}: header cut short")
    dims = struct.unpack(f">{ndim}I", raw[4:head])
    need = int(np.prod(dims))
    if len(raw) - head < need:
        raise TruncatedPayload(f"{path}: payload has {len(raw) - head} bytes, header promises {need}")
    return np.frombuffer(raw, dtype=np.uint8, count=need, offset=head).reshape(dims)


def load_idx(images_path, labels_path, name: str = "", split: str = "") -> Dataset:
    """Read an IDX image/label pair; pixels are scaled to [0, 1]."""
    images = _read_idx(images_path, IMAGE_MAGIC)
    labels = _read_idx(labels_path, LABEL_MAGIC)
    if len(images) != len(labels):
        raise CountMismatch(f"{images_path} holds {len(images)} images, {labels_path} holds {len(labels)} labels")
    x = images.reshape(len(images), -1).astype(np.float64) / 255.0
    return Dataset(x, labels.astype(np.int64), name, split)


def write_idx(dataset: Dataset, images_path, labels_path, shape: tuple[int, int] = (28, 28)) -> None:
    """Inverse of ``load_idx`` for pixel values on the 1/255 lattice."""
    pix = np.rint(np.asarray(dataset.images) * 255.0).astype(np.uint8)
    n = len(pix)
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">IIII", IMAGE_MAGIC, n, *shape))
        fh.write(pix.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">II", LABEL_MAGIC, n))
        fh.write(np.asarray(dataset.labels, dtype=np.uint8).tobytes())


def _stratified_indices(labels, n, seed):
    labels = np.asarray(labels)
    if n > len(labels):
        raise ValueError(f"asked for {n} examples from a set of {len(labels)}")
    if n < 0:
        raise ValueError("n must be >= 0")
    rng = np.random.default_rng(seed)
    classes, counts = np.unique(labels, return_counts=True)
    quota = counts * n / len(labels)
    if n >= len(classes):
        # every class is represented, then fill by largest remaining deficit
        take = np.ones(len(classes), dtype=int)
        for _ in range(n - len(classes)):
            room = np.where(take < counts, quota - take, -np.inf)
            take[int(np.argmax(room))] += 1
    else:
        # largest remainder keeps each class within one example of its share
        take = np.floor(quota).astype(int)
        order = np.lexsort((classes, -(quota - take)))
        take[order[: n - take.sum()]] += 1
    picked = []
    for c, k in zip(classes, take):
        members = np.flatnonzero(labels == c)
        picked.append(rng.permutation(members)[:k])
    return np.sort(np.concatenate(picked)) if picked else np.array([], dtype=int)


def subset(dataset: Dataset, n: int, seed: int) -> Dataset:
    """Deterministic stratified sample of ``n`` examples."""
    idx = _stratified_indices(dataset.labels, n, seed)
    return Dataset(dataset.images[idx], dataset.labels[idx], dataset.name, dataset.split)


def split(dataset: Dataset, n_test: int, seed: int) -> tuple[Dataset, Dataset]:
    """Stratified train/test partition of one pool."""
    test_idx = _stratified_indices(dataset.labels, n_test, seed)
    mask = np.ones(len(dataset), dtype=bool)
    mask[test_idx] = False
    tr = Dataset(dataset.images[mask], dataset.labels[mask], dataset.name, "train")
    te = Dataset(dataset.images[test_idx], dataset.labels[test_idx], dataset.name, "test")
    return tr, te


MNIST_ENV = "BLINDAT_MNIST"
MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
    "pool": ("mnist5k-images-idx3-ubyte", "mnist5k-labels-idx1-ubyte"),
}


def find_mnist(root=None) -> dict[str, tuple[Path, Path]]:
    """Locate IDX files under ``root`` (default: $BLINDAT_MNIST).

    Returns the available splits among ``train``, ``test`` and ``pool`` (a
    single small set that is split locally).
    """
    root = root or os.environ.get(MNIST_ENV)
    if not root:
        return {}
    out = {}
    for key, (im, lb) in MNIST_FILES.items():
        p, q = Path(root) / im, Path(root) / lb
        if p.exists() and q.exists():
            out[key] = (p, q)
    return out


def load_mnist(root=None, n_train=10000, n_test=2000, seed=0, pool_test=1000) -> tuple[Dataset, Dataset]:
    """Reduced MNIST: stratified subsets of the official splits when present,
    otherwise a stratified split of the small pool."""
    files = find_mnist(root)
    if "train" in files and "test" in files:
        tr = load_idx(*files["train"], name="mnist", split="train")
        te = load_idx(*files["test"], name="mnist", split="test")
        return subset(tr, min(n_train, len(tr)), seed), subset(te, min(n_test, len(te)), seed)
    if "pool" in files:
        pool = load_idx(*files["pool"], name="mnist", split="pool")
        tr, te = split(pool, min(pool_test, len(pool) // 2), seed)
        return subset(tr, min(n_train, len(tr)), seed), te
    raise FileNotFoundError(
        f"no MNIST IDX files found; set ${MNIST_ENV} to a directory holding them "
        "(scripts/fetch_mnist_subset.py builds a small pool)"
    )


# ------------------------------------------------------------------ configs


class ConfigError(ValueError):
    pass


@dataclass
class DataSection:
    name: str = "tcc"
    root: str = ""
    n_train: int = 10000
    n_test: int = 2000


@dataclass
class ModelSection:
    sizes: list[int] = field(default_factory=lambda: [784, 128, 10])
    activations: list[str] = field(default_factory=lambda: ["relu", "identity"])


@dataclass
class TrainSection:
    strategy: str = "bat"
    epochs: int = 10
    lr: float = 1e-3
    optimizer: str = "adam"
    batch_size: int = 128
    loss: str = "cross-entropy"
    label_smoothing: float = 0.0
    rho: float = 0.9
    cutoff: str = "adaptive"
    attack: str = "fgsm"
    attack_eps: float = 0.1
    df_steps: int = 10
    df_overshoot: float = 0.02
    monitor: str = "fixed"


@dataclass
class EvalSection:
    attacks: list[str] = field(default_factory=lambda: ["deepfool", "fgsm"])
    linf_budgets: list[float] = field(default_factory=lambda: [0.1, 0.2, 0.3])
    grid_points: int = 61
    n: int = 0
    source: str = ""


@dataclass
class TccSection:
    strategy: str = "bat"
    epochs: int = 8000
    lr: float = 0.2
    at_eps: float = 0.1
    rho: float = 0.9
    n_rays: int = 4096


@dataclass
class TheorySection:
    fig: int = 8
    lam: float = 1e-5


@dataclass
class RunConfig:
    seed: int
    out: str = "runs/out"
    data: DataSection = field(default_factory=DataSection)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    eval: EvalSection = field(default_factory=EvalSection)
    tcc: TccSection = field(default_factory=TccSection)
    theory: TheorySection = field(default_factory=TheorySection)


_SECTION_TYPES = {
    "data": DataSection,
    "model": ModelSection,
    "train": TrainSection,
    "eval": EvalSection,
    "tcc": TccSection,
    "theory": TheorySection,
}


def _line_of(text: str, section: str | None, key: str) -> int | None:
    current = None
    for i, line in enumerate(text.splitlines(), start=1):
        s = line.strip()
        m = re.match(r"^\[([^\]]+)\]", s)
        if m:
            current = m.group(1).strip()
            continue
        if current == section and re.match(rf"^{re.escape(key)}\s*=", s):
            return i
    return None


def _where(text, section, key) -> str:
    name = f"{section}.{key}" if section else key
    line = _line_of(text, section, key) if text else None
    return f"line {line}: {name}" if line else name


def _coerce(value, default, where: str):
    """Check ``value`` against the type of ``default``."""
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    elif isinstance(default, str):
        ok = isinstance(value, str)
    elif isinstance(default, list):
        ok = isinstance(value, list)
        if ok and default:
            elem = default[0]
            value = [_coerce(v, elem, where) for v in value]
    else:
        ok = True
    if not ok:
        raise ConfigError(f"{where}: expected {type(default).__name__}, got {type(value).__name__} {value!r}")
    return value


def _build(cls, table: dict, section: str, text: str):
    inst = cls()
    known = {f.name for f in dataclasses.fields(cls)}
    for key, value in table.items():
        if key not in known:
            raise ConfigError(f"{_where(text, section, key)}: unknown key")
        setattr(inst, key, _coerce(value, getattr(inst, key), _where(text, section, key)))
    return inst


def _validate(cfg: RunConfig, text: str = "") -> None:
    def bad(section, key, msg):
        raise ConfigError(f"{_where(text, section, key)}: {msg}")

    for sec in ("train", "tcc"):
        rho = getattr(cfg, sec).rho
        if not 0.0 <= rho <= 1.0:
            bad(sec, "rho", f"{rho} outside [0, 1]")
    t = cfg.train
    if t.strategy not in ("nt", "restricted-at", "df-at", "bat"):
        bad("train", "strategy", f"unknown strategy {t.strategy!r}")
    if t.cutoff not in ("adaptive", "off"):
        try:
            if float(t.cutoff) < 0:
                raise ValueError
        except ValueError:
            bad("train", "cutoff", f"{t.cutoff!r} is not 'adaptive', 'off' or a radius >= 0")
    if t.optimizer not in ("adam", "sgd"):
        bad("train", "optimizer", f"unknown optimizer {t.optimizer!r}")
    if t.loss not in ("cross-entropy", "squared-error"):
        bad("train", "loss", f"unknown loss {t.loss!r}")
    if not 0.0 <= t.label_smoothing < 1.0:
        bad("train", "label_smoothing", "must be in [0, 1)")
    for key in ("epochs", "batch_size"):
        if getattr(t, key) <= 0:
            bad("train", key, "must be > 0")
    if t.lr <= 0:
        bad("train", "lr", "must be > 0")
    if cfg.tcc.strategy not in ("nt", "at", "nt-aa", "bat"):
        bad("tcc", "strategy", f"unknown strategy {cfg.tcc.strategy!r}")
    if cfg.tcc.epochs <= 0:
        bad("tcc", "epochs", "must be > 0")
    m = cfg.model
    if len(m.sizes) < 2 or len(m.activations) != len(m.sizes) - 1:
        bad("model", "activations", f"{len(m.sizes)} sizes need {len(m.sizes) - 1} activations")
    for a in m.activations:
        if a not in ("relu", "sigmoid", "identity"):
            bad("model", "activations", f"unknown activation {a!r}")
    if cfg.data.name not in ("tcc", "mnist"):
        bad("data", "name", f"unknown dataset {cfg.data.name!r}")
    if cfg.data.root and not Path(cfg.data.root).is_dir():
        bad("data", "root", f"directory {cfg.data.root!r} does not exist")
    if cfg.eval.source and not Path(cfg.eval.source).exists():
        bad("eval", "source", f"file {cfg.eval.source!r} does not exist")
    for a in cfg.eval.attacks:
        if a not in ("fgsm", "noise", "pgd", "deepfool", "cw"):
            bad("eval", "attacks", f"unknown attack {a!r}")


def config_from_dict(d: dict, text: str = "") -> RunConfig:
    d = dict(d)
    if "seed" not in d:
        raise ConfigError("seed: missing required key (runs must be reproducible)")
    seed = _coerce(d.pop("seed"), 0, _where(text, None, "seed"))
    out = _coerce(d.pop("out", "runs/out"), "", _where(text, None, "out"))
    sections = {}
    for key, value in d.items():
        if key not in _SECTION_TYPES:
            raise ConfigError(f"{_where(text, None, key)}: unknown key")
        if not isinstance(value, dict):
            raise ConfigError(f"{_where(text, None, key)}: expected a [{key}] table")
        sections[key] = _build(_SECTION_TYPES[key], value, key, text)
    cfg = RunConfig(seed=seed, out=out, **sections)
    _validate(cfg, text)
    return cfg


def parse_config_text(text: str) -> RunConfig:
    try:
        d = tomllib.loads(text)
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"syntax: {e}") from None
    return config_from_dict(d, text)


def parse_config(path) -> RunConfig:
    return parse_config_text(Path(path).read_text())


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, int):
        return str(v)
    if isinstance(v, float):
        if math.isinf(v) or math.isnan(v):
            return {math.inf: "inf", -math.inf: "-inf"}.get(v, "nan")
        return repr(v)
    if isinstance(v, str):
        return '"' + v.replace("\\", "\\\\").replace('"', '\\"') + '"'
    if isinstance(v, list):
        return "[" + ", ".join(_fmt(x) for x in v) + "]"
    raise TypeError(f"cannot write {type(v).__name__}")


def emit_config(cfg: RunConfig) -> str:
    """Normalised TOML text; every key is written, sections in fixed order."""
    lines = [f"seed = {_fmt(cfg.seed)}", f"out = {_fmt(cfg.out)}"]
    for name in _SECTION_TYPES:
        lines.append("")
        lines.append(f"[{name}]")
        for f in dataclasses.fields(getattr(cfg, name)):
            lines.append(f"{f.name} = {_fmt(getattr(getattr(cfg, name), f.name))}")
    return "\n".join(lines) + "\n"


def config_to_dict(cfg: RunConfig) -> dict[str, Any]:
    return dataclasses.asdict(cfg)


def apply_overrides(cfg: RunConfig, overrides) -> RunConfig:
    """Apply ``section.key=value`` strings; values use TOML syntax, bare words are strings."""
    d = config_to_dict(cfg)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r}: expected key=value")
        path, raw = item.split("=", 1)
        path = path.strip()
        try:
            value = tomllib.loads(f"v = {raw}")["v"]
        except tomllib.TOMLDecodeError:
            value = raw.strip()
        parts = path.split(".")
        node = d
        for p in parts[:-1]:
            if p not in node or not isinstance(node[p], dict):
                raise ConfigError(f"override {path}: no section {p!r}")
            node = node[p]
        if parts[-1] not in node:
            raise ConfigError(f"override {path}: unknown key")
        node[parts[-1]] = value
    return config_from_dict(d)
