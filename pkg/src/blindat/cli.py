"""Command line entry point.

    blindat train    --config run.toml --out runs/a
    blindat eval     --config run.toml --out runs/a [--model runs/a/model.bin]
    blindat blackbox --source runs/nt/model.bin --target runs/bat/model.bin --config run.toml
    blindat tcc      --strategy bat --out runs/tcc
    blindat theory   --fig 8 --out runs/theory

Exit codes: 0 success, 1 invalid input, 2 failure while running. Progress
goes to stderr; results go to files under ``--out`` together with the
resolved configuration, which is enough to rerun the command.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import data as dio
from . import evaluation, tcc, theory
from .attacks import AttackSpec
from .nn import LossSpec, load_model, save_model
from .training import TrainConfig, TrainingDiverged, train

OK, INVALID, FAILED = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _log(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="TOML run configuration")
    common.add_argument("--out", help="output directory (overrides the config)")
    common.add_argument("--seed", type=int, help="seed (overrides the config)")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override, e.g. train.rho=0.8")
    ap = _Parser(prog="blindat", description="Blind adversarial training experiments.")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("train", parents=[common], help="train a classifier")
    p = sub.add_parser("eval", parents=[common], help="white-box accuracy curves")
    p.add_argument("--model", help="checkpoint (default: <out>/model.bin)")
    p = sub.add_parser("blackbox", parents=[common], help="transfer attack from a source model")
    p.add_argument("--source", required=True)
    p.add_argument("--target", required=True)
    p = sub.add_parser("tcc", parents=[common], help="two-circles experiment")
    p.add_argument("--strategy", choices=tcc.TCC_STRATEGIES)
    p = sub.add_parser("theory", parents=[common], help="closed-form sweeps")
    p.add_argument("--fig", type=int, choices=sorted(theory.FIGURES))
    return ap


def resolve_config(args) -> dio.RunConfig:
    cfg = dio.parse_config(args.config) if args.config else dio.RunConfig(seed=0)
    sets = list(args.set)
    if args.seed is not None:
        sets.append(f"seed={args.seed}")
    if args.out:
        sets.append(f'out="{args.out}"')
    if getattr(args, "strategy", None):
        sets.append(f'tcc.strategy="{args.strategy}"')
    if getattr(args, "fig", None) is not None:
        sets.append(f"theory.fig={args.fig}")
    return dio.apply_overrides(cfg, sets) if sets else cfg


def train_config(cfg: dio.RunConfig) -> TrainConfig:
    t = cfg.train
    cutoff = t.cutoff if t.cutoff in ("adaptive", "off") else float(t.cutoff)
    attack = AttackSpec(t.attack, eps=t.attack_eps) if t.strategy == "restricted-at" else None
    return TrainConfig(
        strategy=t.strategy,
        sizes=tuple(cfg.model.sizes),
        activations=tuple(cfg.model.activations),
        epochs=t.epochs,
        lr=t.lr,
        optimizer=t.optimizer,
        batch_size=t.batch_size,
        loss=LossSpec(t.loss, t.label_smoothing),
        seed=cfg.seed,
        rho=t.rho,
        cutoff=cutoff,
        attack=attack,
        df_steps=t.df_steps,
        df_overshoot=t.df_overshoot,
        monitor=t.monitor,
    )


INPUT_DIMS = {"tcc": 2, "mnist": 784}


def load_data(cfg: dio.RunConfig):
    want = INPUT_DIMS[cfg.data.name]
    if cfg.model.sizes[0] != want:
        raise dio.ConfigError(f"model.sizes: {cfg.data.name} inputs have {want} features, model expects {cfg.model.sizes[0]}")
    if cfg.data.name == "tcc":
        tr, te = tcc.gen_two_circles(cfg.data.n_train, cfg.data.n_test, seed=cfg.seed)
        return (tr.points, tr.labels), (te.points, te.labels)
    tr, te = dio.load_mnist(cfg.data.root or None, cfg.data.n_train, cfg.data.n_test, seed=cfg.seed)
    return (tr.images, tr.labels), (te.images, te.labels)


def _attack_specs(cfg):
    return [AttackSpec(a) for a in cfg.eval.attacks]


def _eval_slice(cfg, x, y):
    n = cfg.eval.n or len(x)
    return x[:n], y[:n]


def cmd_train(cfg, out: Path, args) -> None:
    (x, y), _ = load_data(cfg)
    tc = train_config(cfg)
    _log(f"train: {tc.strategy} on {len(x)} examples, {tc.epochs} epochs")
    rep = train(tc, x, y, on_epoch=lambda e, m, r: _log(f"epoch {e}: clean acc {r.clean_acc[-1]:.4f}"))
    rep.to_csv(out / "train.csv")
    save_model(rep.model, out / "model.bin")


def cmd_eval(cfg, out: Path, args) -> None:
    _, (x, y) = load_data(cfg)
    x, y = _eval_slice(cfg, x, y)
    model = load_model(args.model or out / "model.bin")
    report = evaluation.evaluate(model, x, y, _attack_specs(cfg), cfg.eval.linf_budgets, rng=cfg.seed)
    for kind, curve in report.curves.items():
        curve.to_csv(out / f"aa_{kind}.csv")
    evaluation.write_table(evaluation.table_rows(cfg.train.strategy, report), out / "table.csv")
    with open(out / "avg_aa.csv", "w", newline="") as fh:
        fh.write("attack,theta,avg_aa\n")
        for kind, vals in report.avg.items():
            for theta, v in vals.items():
                fh.write(f"{kind},{theta!r},{v!r}\n")


def cmd_blackbox(cfg, out: Path, args) -> None:
    _, (x, y) = load_data(cfg)
    x, y = _eval_slice(cfg, x, y)
    source, target = load_model(args.source), load_model(args.target)
    for spec in _attack_specs(cfg):
        if spec.constrained:
            grid = np.concatenate([[0.0], cfg.eval.linf_budgets])
        else:
            grid = evaluation.default_l2_grid(evaluation.mean_norm(target, x, y, spec), cfg.eval.grid_points)
        _log(f"blackbox: {spec.kind}")
        evaluation.blackbox_eval(source, target, x, y, spec, grid, rng=cfg.seed).to_csv(out / f"blackbox_{spec.kind}.csv")
        evaluation.aa_curve(target, x, y, spec, grid, rng=cfg.seed).to_csv(out / f"whitebox_{spec.kind}.csv")


def cmd_tcc(cfg, out: Path, args) -> None:
    c = cfg.tcc
    tc = tcc.TccConfig(strategy=c.strategy, epochs=c.epochs, lr=c.lr, at_eps=c.at_eps, rho=c.rho, seed=cfg.seed, n_rays=c.n_rays)
    res = tcc.run_tcc_experiment(tc, log=_log)
    r = res.robustness
    res.train.to_csv(out / "train.csv")
    res.history_csv(out / "history.csv")
    r.profile_csv(out / "profile.csv")
    r.boundary_csv(out / "boundary.csv")
    save_model(res.train.model, out / "model.bin")
    with open(out / "robustness.csv", "w", newline="") as fh:
        fh.write("strategy,seed,epochs,min,mean,max\n")
        fh.write(f"{c.strategy},{cfg.seed},{res.train.epochs},{r.min!r},{r.mean!r},{r.max!r}\n")
    _log(f"tcc {c.strategy}: min distance {r.min:.4f} after {res.train.epochs} epochs")


def cmd_theory(cfg, out: Path, args) -> None:
    fig = cfg.theory.fig
    if fig not in theory.FIGURES:
        raise dio.ConfigError(f"theory.fig: no figure {fig}; choose from {sorted(theory.FIGURES)}")
    rows = theory.figure_rows(fig, cfg.theory.lam)
    theory.write_sweep(rows, theory.FIGURES[fig], out / f"fig{fig}.csv")
    _log(f"theory: wrote fig{fig}.csv ({len(rows)} rows)")


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "blackbox": cmd_blackbox, "tcc": cmd_tcc, "theory": cmd_theory}


def run(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        cfg = resolve_config(args)
        out = Path(cfg.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.toml").write_text(dio.emit_config(cfg))
    except UsageError as e:
        _log(str(e))
        return INVALID
    except (dio.ConfigError, OSError, ValueError) as e:
        _log(f"config: {e}")
        return INVALID
    try:
        COMMANDS[args.command](cfg, out, args)
    except dio.ConfigError as e:
        _log(f"config: {e}")
        return INVALID
    except FileNotFoundError as e:
        _log(f"{args.command}: input missing: {e}")
        return INVALID
    except (TrainingDiverged, tcc.DegenerateBoundary, FloatingPointError, theory.NoBracket) as e:
        _log(f"{args.command}: failed: {e}")
        return FAILED
    except Exception as e:  # noqa: BLE001 - any other crash is a runtime failure
        _log(f"{args.command}: failed: {type(e).__name__}: {e}")
        return FAILED
    return OK


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
