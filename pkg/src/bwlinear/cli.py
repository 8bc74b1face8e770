"""Command-line front end.

Every subcommand writes into ``--out`` (a directory) and leaves a
``manifest.json`` next to its outputs. Settings are resolved as built-in
defaults, then a flat ``key = value`` config file (``--config``), then
explicit flags.
"""

from __future__ import annotations

import argparse
import ast
import csv
import json
import math
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Callable

import numpy as np

from . import __version__
from .bwloss import Target
from .critical import critical_table, write_critical_csv
from .errors import InputError, MdmFailedError, PreconditionError, SingularityError
from .experiments import HessianRecord, hessian_records, perturbed_init, run_rate_cell, zipf_spectrum
from .matcore import random_orthogonal
from .network import NetParams
from .optimize import FlowConfig, GdConfig, certified_constants, flow_run, gd_run, optimal_value
from .svgplot import heatmap, line_plot

__all__ = ["main", "load_config", "load_target", "run_sweep", "EXIT_OK", "EXIT_PRECONDITION", "EXIT_INTERNAL"]

EXIT_OK, EXIT_INTERNAL, EXIT_PRECONDITION = 0, 1, 2

DEFAULTS = {
    "target": {"n": 20, "lambda_min": 0.50098, "seed": 0, "out": "."},
    "init": {"target": None, "depth": 3, "tau": 0.05, "perturb_scale": 0.005, "seed": 1, "width": None, "m": None, "out": "."},
    "train": {
        "target": None,
        "params": None,
        "mode": "gd",
        "tau": None,
        "eta": "auto",
        "iters": 1000,
        "t_end": 10.0,
        "tol": 1e-8,
        "record_every": 1,
        "record_dt": None,
        "target_loss": 0.0,
        "seed": 0,
        "out": ".",
    },
    "sweep-rate": {
        "n": 20,
        "depths": [2, 3, 4, 5],
        "lambda_min_grid": [0.25, 0.36, 0.50098, 0.64],
        "tau": 0.05,
        "perturb_scale": 0.005,
        "seed": 0,
        "mode": "flow",
        "eta": 1e-3,
        "t_end": 50.0,
        "tol": 1e-8,
        "record_dt": 0.05,
        "target_loss": 1e-10,
        "trim_fraction": 0.5,
        "workers": 1,
        "out": ".",
    },
    "critical": {"target": None, "k": 1, "tau": 0.0, "out": "."},
    "hessian-study": {
        "n": 8,
        "depth": 3,
        "taus": [0.1, 0.001],
        "indices": 5,
        "seeds": 7,
        "lambda_min": 0.50098,
        "seed": 0,
        "workers": 1,
        "out": ".",
    },
}


# ---------------------------------------------------------------- config


def _parse_value(text: str):
    text = text.strip()
    try:
        return ast.literal_eval(text)
    except (ValueError, SyntaxError):
        if text.lower() in ("true", "false"):
            return text.lower() == "true"
        return text


def load_config(path: str | Path) -> dict:
    """Read a flat ``key = value`` file.

    Blank lines and ``#`` comments are skipped; values are Python/TOML-style
    literals (numbers, quoted strings, ``[a, b]`` lists, ``true``/``false``),
    anything else is kept as a bare string. Dashes in keys become
    underscores. ``lambdaMinGrid`` style keys are accepted as aliases.
    """
    out = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InputError(f"{path}:{lineno}: expected key = value")
        key, value = line.split("=", 1)
        key = key.strip().replace("-", "_")
        key = {"lambdaMinGrid": "lambda_min_grid", "tEnd": "t_end", "outputDir": "out", "lambdaMin": "lambda_min"}.get(key, key)
        out[key] = _parse_value(value)
    return out


def _resolve(command: str, args: argparse.Namespace) -> dict:
    settings = dict(DEFAULTS[command])
    if args.config:
        cfg = load_config(args.config)
        if "sigma_min_grid" in cfg:
            cfg["lambda_min_grid"] = [float(s) ** 2 for s in cfg.pop("sigma_min_grid")]
        unknown = set(cfg) - set(settings)
        if unknown:
            raise InputError(f"unknown config keys for {command}: {sorted(unknown)}")
        settings.update(cfg)
    for key in settings:
        value = getattr(args, key, None)
        if value is not None:
            settings[key] = value
    return settings


def _eta_arg(text: str):
    if text == "auto":
        return text
    try:
        value = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError("eta must be a positive float or 'auto'") from None
    if not value > 0:
        raise argparse.ArgumentTypeError("eta must be positive")
    return value


def _list_arg(kind):
    def parse(text: str):
        try:
            return [kind(x) for x in text.split(",") if x.strip()]
        except ValueError:
            raise argparse.ArgumentTypeError(f"expected a comma-separated list, got {text!r}") from None

    return parse


# ---------------------------------------------------------------- io


def _fmt(x) -> str:
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return f"{float(x):.17g}"


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(header)
        for row in rows:
            wr.writerow([v if isinstance(v, str) else _fmt(v) for v in row])


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, np.integer, np.bool_)):
        return obj.item()
    if isinstance(obj, float) and not math.isfinite(obj):
        return str(obj)
    return obj


def _write_manifest(out: Path, command: str, settings: dict, started: float, outputs: dict, extra: dict | None = None) -> None:
    doc = {
        "command": command,
        "version": __version__,
        "seed": settings.get("seed"),
        "config": settings,
        "wall_clock_s": time.perf_counter() - started,
        "outputs": outputs,
    }
    if extra:
        doc.update(extra)
    (out / "manifest.json").write_text(json.dumps(_jsonable(doc), indent=2, sort_keys=True) + "\n")


def load_target(path: str | Path, tau: float = 0.0) -> Target:
    """Read a target written by the ``target`` subcommand."""
    doc = json.loads(Path(path).read_text())
    return Target.from_spectrum(doc["eigvals"], doc["omega"], tau=tau)


def _need(settings: dict, *keys: str) -> None:
    missing = [k for k in keys if settings.get(k) is None]
    if missing:
        raise InputError(f"missing required setting(s): {', '.join(missing)}")


# ---------------------------------------------------------------- commands


def cmd_target(s: dict, out: Path) -> tuple[dict, dict]:
    n, lam_min, seed = int(s["n"]), float(s["lambda_min"]), int(s["seed"])
    lam = zipf_spectrum(n, lam_min)
    omega = random_orthogonal(n, seed)
    sigma0 = (omega * lam) @ omega.T
    doc = {
        "n": n,
        "lambda_min": lam_min,
        "seed": seed,
        "eigvals": lam.tolist(),
        "omega": omega.tolist(),
        "sigma0": (0.5 * (sigma0 + sigma0.T)).tolist(),
    }
    (out / "target.json").write_text(json.dumps(doc) + "\n")
    return {"target": "target.json"}, {"sigma_min_sqrt": math.sqrt(lam_min)}


def cmd_init(s: dict, out: Path) -> tuple[dict, dict]:
    _need(s, "target")
    tau = float(s["tau"])
    target = load_target(s["target"], tau)
    res = perturbed_init(target, int(s["depth"]), float(s["perturb_scale"]), int(s["seed"]), width=s["width"], m=s["m"])
    res.params.save(out / "params.json", extra={"tau": tau, "iteration": 0, "margin": res.margin})
    return {"params": "params.json"}, {"margin": res.margin}


def _flow_bound_check(traj, rate: float, optimum: float) -> dict:
    t = traj.column("t")
    gap = traj.column("loss") - optimum
    bound = np.exp(-rate * t) * gap[0]
    slack = 1e-12 * max(1.0, abs(gap[0]))
    viol = int(np.sum(gap > bound + slack))
    return {"flow_rate": rate, "bound_violations": viol, "samples": len(traj)}


def _gd_check(traj, const, eta: float) -> dict:
    vals = traj.column("loss")
    idx = traj.column("index")
    consecutive = np.diff(idx) == 1
    ratios = vals[1:][consecutive] / vals[:-1][consecutive]
    return {
        "eta": eta,
        "eta_max": const.eta_max,
        "eta_within_certificate": bool(eta <= const.eta_max),
        "monotone": bool(np.all(np.diff(vals) <= 0)),
        "max_step_ratio": float(ratios.max()) if ratios.size else None,
        "contraction_bound": const.contraction(eta),
    }


def cmd_train(s: dict, out: Path) -> tuple[dict, dict]:
    _need(s, "target", "params")
    doc = json.loads(Path(s["params"]).read_text())
    params = NetParams.from_json(doc)
    tau = float(s["tau"] if s["tau"] is not None else doc.get("tau", 0.0))
    target = load_target(s["target"], tau)
    start = int(doc.get("iteration", 0))
    const = certified_constants(params, target)
    extra = {"tau": tau, "start_iteration": start, "constants": const.__dict__}
    optimum = optimal_value(target, min(params.dims))
    if s["mode"] == "gd":
        eta = s["eta"]
        if eta == "auto":
            # a resumed run keeps the step size of its first segment
            eta = float(doc["eta"]) if start > 0 and "eta" in doc else const.eta_max
        cfg = GdConfig(eta=float(eta), max_iters=start + int(s["iters"]), target_loss=float(s["target_loss"]), record_every=int(s["record_every"]))
        final, traj = gd_run(params, target, cfg, start_index=start)
        state = {"tau": tau, "iteration": traj.meta["iterations"], "mode": "gd", "eta": float(eta)}
        extra["checks"] = _gd_check(traj, const, float(eta))
    elif s["mode"] == "flow":
        cfg = FlowConfig(
            t_end=float(s["t_end"]),
            tol=float(s["tol"]),
            record_every=int(s["record_every"]),
            record_dt=s["record_dt"],
            target_loss=float(s["target_loss"]),
        )
        final, traj = flow_run(params, target, cfg)
        state = {"tau": tau, "iteration": 0, "mode": "flow", "t": traj.meta["t_final"]}
        extra["checks"] = _flow_bound_check(traj, const.flow_rate, optimum)
    else:
        raise InputError(f"unknown mode {s['mode']!r}")
    traj.to_csv(out / "trajectory.csv")
    final.save(out / "params_final.json", extra=state)
    extra["optimum"] = optimum
    extra["trajectory_meta"] = traj.meta
    return {"trajectory": "trajectory.csv", "params": "params_final.json"}, extra


def _rate_task(args):
    kwargs, simulate = args
    return run_rate_cell(**kwargs, simulate=simulate)


def _pool_map(fn, tasks: list, workers: int) -> list:
    if workers > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(fn, tasks))
    return [fn(t) for t in tasks]


def run_sweep(s: dict, out: Path, simulate: Callable | None = None) -> tuple[dict, dict]:
    """Rate sweep over ``depths x lambda_min_grid``; ``simulate`` is passed to :func:`run_rate_cell`."""
    depths = [int(d) for d in s["depths"]]
    sigmas = [math.sqrt(float(x)) for x in s["lambda_min_grid"]]
    if not depths or min(depths) < 1 or not sigmas:
        raise InputError("depths must be >= 1 and the lambda_min grid non-empty")
    tasks = []
    for depth in depths:
        for sig in sigmas:
            kwargs = {
                "n": int(s["n"]),
                "depth": depth,
                "sigma_min": sig,
                "tau": float(s["tau"]),
                "perturb_scale": float(s["perturb_scale"]),
                "seed": int(s["seed"]),
                "t_end": float(s["t_end"]),
                "tol": float(s["tol"]),
                "record_dt": float(s["record_dt"]),
                "target_loss": float(s["target_loss"]),
                "trim_fraction": float(s["trim_fraction"]),
                "mode": s["mode"],
                "eta": float(s["eta"]),
            }
            tasks.append((kwargs, simulate))
    cells = _pool_map(_rate_task, tasks, int(s["workers"]))
    _write_csv(out / "slopes.csv", ("depth", "sigma_min_sqrt", "slope", "r2"), [(c.depth, c.sigma_min, c.slope, c.r2) for c in cells])
    _write_csv(
        out / "diagnostics.csv",
        ("depth", "sigma_min_sqrt", "margin", "max_balance_residual", "min_sigma_gap", "samples"),
        [(c.depth, c.sigma_min, c.margin, c.max_balance_residual, c.min_sigma_gap, c.samples) for c in cells],
    )
    grid = np.array([c.slope for c in cells]).reshape(len(depths), len(sigmas))
    series = {f"sigma_min={sig:.4g}": (depths, -grid[:, j]) for j, sig in enumerate(sigmas)}
    line_plot(out / "slopes_depth.svg", series, "convergence rate vs depth", "depth N", "-slope")
    heatmap(out / "slopes_grid.svg", -grid, sigmas, depths, "-slope", "sigma_min", "depth N")
    outputs = {"slopes": "slopes.csv", "diagnostics": "diagnostics.csv", "plot_depth": "slopes_depth.svg", "plot_grid": "slopes_grid.svg"}
    return outputs, {"cells": len(cells)}


def cmd_critical(s: dict, out: Path) -> tuple[dict, dict]:
    _need(s, "target")
    target = load_target(s["target"], float(s["tau"]))
    rows = critical_table(target, int(s["k"]))
    write_critical_csv(rows, out / "critical.csv")
    return {"table": "critical.csv"}, {"rows": len(rows), "max_grad_norm": max(r[2] for r in rows)}


def _hessian_task(args):
    return hessian_records(*args)


HESSIAN_FIELDS = ("index", "loss", "lambda_max", "kappa_rel_abs", "kappa_abs")


def cmd_hessian_study(s: dict, out: Path) -> tuple[dict, dict]:
    n, depth, indices, seeds = int(s["n"]), int(s["depth"]), int(s["indices"]), int(s["seeds"])
    taus = [float(t) for t in s["taus"]]
    if indices > n:
        raise InputError("indices cannot exceed n")
    tasks = [(n, depth, tau, indices, float(s["lambda_min"]), int(s["seed"]) + k) for tau in taus for k in range(seeds)]
    records: list[HessianRecord] = [r for batch in _pool_map(_hessian_task, tasks, int(s["workers"])) for r in batch]
    _write_csv(
        out / "hessian_records.csv",
        ("seed", "tau", "index", "loss", "lambda_max", "lambda_min", "kappa_rel", "kappa_abs"),
        [(r.seed, r.tau, r.index, r.loss, r.lambda_max, r.lambda_min, r.kappa_rel, r.kappa_abs) for r in records],
    )
    outputs = {"records": "hessian_records.csv"}
    for tau in taus:
        mean_rows, std_rows = [], []
        series = {}
        for kind in ("frobenius", "bw"):
            ka = []
            for i in range(indices):
                sel = [r for r in records if r.tau == tau and r.index == i and r.loss == kind]
                stats = np.array([[r.lambda_max, abs(r.kappa_rel), r.kappa_abs] for r in sel])
                mean_rows.append((i, kind, *stats.mean(axis=0)))
                std_rows.append((i, kind, *stats.std(axis=0)))
                ka.append(stats[:, 2].mean())
            series[kind] = (list(range(indices)), np.log10(ka))
        tag = f"{tau:g}"
        _write_csv(out / f"hessian_tau{tag}.csv", HESSIAN_FIELDS, mean_rows)
        _write_csv(out / f"hessian_tau{tag}_std.csv", HESSIAN_FIELDS, std_rows)
        line_plot(out / f"hessian_tau{tag}.svg", series, f"tau = {tag}", "critical point index", "log10 kappa_abs")
        outputs[f"mean_tau{tag}"] = f"hessian_tau{tag}.csv"
        outputs[f"std_tau{tag}"] = f"hessian_tau{tag}_std.csv"
        outputs[f"plot_tau{tag}"] = f"hessian_tau{tag}.svg"
    return outputs, {"records": len(records)}


COMMANDS = {
    "target": cmd_target,
    "init": cmd_init,
    "train": cmd_train,
    "sweep-rate": run_sweep,
    "critical": cmd_critical,
    "hessian-study": cmd_hessian_study,
}


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key = value settings file (flags win)")
    common.add_argument("--out", help="output directory")
    common.add_argument("--seed", type=int)

    parser = argparse.ArgumentParser(prog="bwlinear", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("target", parents=[common], help="Zipf-spectrum target covariance")
    p.add_argument("--n", type=int)
    p.add_argument("--lambda-min", dest="lambda_min", type=float)

    p = sub.add_parser("init", parents=[common], help="balanced perturbed initialization")
    p.add_argument("--target")
    p.add_argument("--depth", type=int)
    p.add_argument("--tau", type=float)
    p.add_argument("--perturb-scale", dest="perturb_scale", type=float)
    p.add_argument("--width", type=int)
    p.add_argument("--m", type=int)

    p = sub.add_parser("train", parents=[common], help="gradient descent or gradient flow")
    p.add_argument("--target")
    p.add_argument("--params")
    p.add_argument("--mode", choices=("gd", "flow"))
    p.add_argument("--tau", type=float)
    p.add_argument("--eta", type=_eta_arg, help="step size or 'auto' (certified)")
    p.add_argument("--iters", type=int)
    p.add_argument("--t-end", dest="t_end", type=float)
    p.add_argument("--tol", type=float)
    p.add_argument("--record-every", dest="record_every", type=int)
    p.add_argument("--record-dt", dest="record_dt", type=float)
    p.add_argument("--target-loss", dest="target_loss", type=float)

    p = sub.add_parser("sweep-rate", parents=[common], help="empirical convergence rates")
    p.add_argument("--n", type=int)
    p.add_argument("--depth", dest="depths", type=_list_arg(int), help="comma-separated depths")
    p.add_argument("--lambda-min-grid", dest="lambda_min_grid", type=_list_arg(float))
    p.add_argument("--tau", type=float)
    p.add_argument("--eta", type=float, help="step size for --mode gd")
    p.add_argument("--mode", choices=("flow", "gd"))
    p.add_argument("--perturb-scale", dest="perturb_scale", type=float)
    p.add_argument("--t-end", dest="t_end", type=float)
    p.add_argument("--tol", type=float)
    p.add_argument("--record-dt", dest="record_dt", type=float)
    p.add_argument("--workers", type=int)

    p = sub.add_parser("critical", parents=[common], help="closed-form critical point table")
    p.add_argument("--target")
    p.add_argument("--k", type=int)
    p.add_argument("--tau", type=float)

    p = sub.add_parser("hessian-study", parents=[common], help="parameter Hessian conditioning")
    p.add_argument("--n", type=int)
    p.add_argument("--depth", type=int)
    p.add_argument("--tau", dest="taus", type=_list_arg(float), help="comma-separated tau values")
    p.add_argument("--indices", type=int)
    p.add_argument("--seeds", type=int)
    p.add_argument("--lambda-min", dest="lambda_min", type=float)
    p.add_argument("--workers", type=int)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    started = time.perf_counter()
    try:
        settings = _resolve(args.command, args)
        out = Path(settings["out"])
        out.mkdir(parents=True, exist_ok=True)
        outputs, extra = COMMANDS[args.command](settings, out)
        _write_manifest(out, args.command, settings, started, outputs, extra)
    except MdmFailedError as exc:
        print(f"bwlinear: precondition failed: {exc} (margin={exc.margin})", file=sys.stderr)
        return EXIT_PRECONDITION
    except (PreconditionError, SingularityError) as exc:
        print(f"bwlinear: precondition failed: {exc}", file=sys.stderr)
        return EXIT_PRECONDITION
    except Exception as exc:  # noqa: BLE001
        print(f"bwlinear: internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
