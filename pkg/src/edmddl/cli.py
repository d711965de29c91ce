"""Command-line interface: ``edmddl {generate,train,predict,eval,classify,sweep}``.

Exit codes: 0 on success, 2 for usage or configuration errors, 3 for numerical
failures (non-finite integration, defective eigendecomposition, diverged training).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from . import __version__
from .data import TimeSeriesDataset
from .edmd import PredictionError
from .metrics import (EvalConfig, MetricError, classify_basins, duffing_recon_report, duffing_truth_labels,
                      efficiency_sweep, eigen_report, ks_recon_report, reconstruction_error)
from .numerics import NumericsError
from .odeint import IntegrationError
from .serialize import dump_json, load_json, load_model, save_checkpoint, save_model, write_manifest
from .systems import (DuffingParams, KsParams, duffing_trajectories, generate_duffing_dataset,
                      generate_ks_dataset, ks_trajectories, make_rng, params_from_system, stepper_for)
from .trainer import TrainConfig, TrainingError, train

log = logging.getLogger("edmddl")

CONFIG_SCHEMA = "edmddl-config/1"
OUTPUT_ENV = "EDMDDL_OUTPUT_DIR"
FLOAT_FMT = "%.17g"

NUMERICAL_ERRORS = (NumericsError, IntegrationError, TrainingError, PredictionError, MetricError,
                    FloatingPointError, np.linalg.LinAlgError)


class UsageError(ValueError):
    pass


# -- helpers -------------------------------------------------------------------

def _num(v) -> str:
    return FLOAT_FMT % v


def _write_rows(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_num(v) if isinstance(v, (float, np.floating)) else v for v in row])


def _out_dir(args) -> Path:
    out = Path(args.out_dir or os.environ.get(OUTPUT_ENV) or ".")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"expected comma-separated numbers, got {text!r}") from None


def _ints(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"expected comma-separated integers, got {text!r}") from None


def load_config(path) -> dict:
    """Read a run config. The document is JSON with a ``schema`` tag and optional
    ``train`` and ``eval`` sections, e.g.::

        {"schema": "edmddl-config/1", "train": {"network": "node", "width": 120}}
    """
    if path is None:
        return {"schema": CONFIG_SCHEMA, "train": {}, "eval": {}}
    try:
        doc = load_json(path)
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from None
    if not isinstance(doc, dict) or doc.get("schema") != CONFIG_SCHEMA:
        raise UsageError(f"config {path} must be an object with schema {CONFIG_SCHEMA!r}")
    unknown = set(doc) - {"schema", "train", "eval", "d"}
    if unknown:
        raise UsageError(f"unknown config sections: {sorted(unknown)}")
    doc.setdefault("train", {})
    doc.setdefault("eval", {})
    return doc


_TRAIN_FLAGS = {
    "dict": "network", "n_dict": "n_dict", "width": "width", "depth": "depth",
    "field_width": "field_width", "ridge": "ridge", "tol": "tol", "lr": "learning_rate",
    "max_epochs": "max_epochs", "inner_steps": "inner_steps", "batch_size": "batch_size",
    "init_scale": "init_scale", "ridge_convention": "ridge_convention", "abs_tol": "abs_tol",
    "rel_tol": "rel_tol", "max_time": "max_time",
}


def _train_config(args, doc: dict) -> TrainConfig:
    values = dict(doc.get("train", {}))
    for flag, key in _TRAIN_FLAGS.items():
        v = getattr(args, flag, None)
        if v is not None:
            values[key] = v
    if getattr(args, "per_row", False):
        values["per_row"] = True
    if args.seed is not None:
        values["seed"] = args.seed
    return TrainConfig.from_dict(values)


def _load_dataset(path) -> TimeSeriesDataset:
    try:
        return TimeSeriesDataset.load(path)
    except OSError as exc:
        raise UsageError(f"cannot read dataset {path}: {exc}") from None


def _system_params(system: dict):
    if not system:
        raise UsageError("no system descriptor available; pass --dataset")
    return params_from_system(system)


def _seed(args, default=0) -> int:
    return default if args.seed is None else args.seed


# -- generate ------------------------------------------------------------------

def _generate(cfg: dict) -> TimeSeriesDataset:
    if cfg["system"] == "duffing":
        return generate_duffing_dataset(cfg["seed"], cfg["n_trajectories"], cfg["n_steps"])
    params = KsParams(nx=cfg["nx"])
    return generate_ks_dataset(cfg["seed"], cfg["n_trajectories"], cfg["n_steps"], cfg["amplitude"], params)


def cmd_generate(args) -> int:
    started = time.time()
    if args.manifest:
        cfg = load_json(args.manifest)["config"]
    else:
        if args.system is None:
            raise UsageError("generate needs a system (duffing or ks) or --manifest")
        ks = args.system == "ks"
        cfg = {
            "system": args.system,
            "seed": _seed(args),
            "n_trajectories": args.n_trajectories or (100 if ks else 1000),
            "n_steps": args.n_steps or (100 if ks else 10),
            "nx": args.nx if ks else None,
            "amplitude": args.amplitude if ks else None,
        }
    out = Path(args.out) if args.out else _out_dir(args) / f"{cfg['system']}_seed{cfg['seed']}.edmds"
    out.parent.mkdir(parents=True, exist_ok=True)
    ds = _generate(cfg)
    ds.save(out)
    artifacts = {"dataset": out}
    if args.csv:
        ds.to_csv(args.csv)
        artifacts["dataset_csv"] = Path(args.csv)
    write_manifest(str(out) + ".manifest.json", "generate", sys.argv[1:], cfg, {"data": cfg["seed"]},
                   artifacts, started)
    print(f"wrote {out}")
    print(f"N={ds.n_pairs} d={ds.d} rejections={ds.extra.get('rejections', 0)}")
    return 0


# -- train ---------------------------------------------------------------------

def cmd_train(args) -> int:
    started = time.time()
    doc = load_config(args.config)
    config = _train_config(args, doc)
    ds = _load_dataset(args.dataset)
    if "d" in doc and int(doc["d"]) != ds.d:
        raise UsageError(f"config is for d={doc['d']} but dataset {args.dataset} has d={ds.d}")
    config.m_trainable(ds.d)
    out = _out_dir(args)
    ckpt = out / "checkpoint.json"

    net = config.build_network(ds.d)
    print(f"parameters: {net.n_params:,}")
    if args.dry_run:
        return 0

    def callback(epoch, J, dictionary):
        if args.checkpoint_every and epoch % args.checkpoint_every == 0:
            save_checkpoint(dictionary.network, ckpt, config.seed)
        if args.verbose and epoch % max(1, args.checkpoint_every or 100) == 0:
            print(f"epoch {epoch}  J={J:.6g}", flush=True)

    dictionary, model, report = train(config, ds, callback=callback, network=net)
    save_checkpoint(dictionary.network, ckpt, config.seed)
    save_model(model, out / "model.json", ckpt, ds.system, config.seed)

    before = [""] + report.losses_before_update
    _write_rows(out / "loss_trace.csv", ["epoch", "J", "J_before_update"],
                [(i, J, before[i] if i < len(before) else "") for i, J in enumerate(report.losses)])
    rep = {"final_loss": report.final_loss, "iterations": report.iterations, "success": report.success,
           "best_iteration": report.best_iteration, "n_params": report.n_params,
           "wall_time": report.wall_time}
    dump_json(rep, out / "report.json")
    write_manifest(out / "manifest.json", "train", sys.argv[1:],
                   {"schema": CONFIG_SCHEMA, "train": config.to_dict()},
                   {"train": config.seed, "data": ds.seed},
                   {"dataset": args.dataset, "checkpoint": ckpt, "model": out / "model.json",
                    "loss_trace": out / "loss_trace.csv", "report": out / "report.json"}, started)
    print(f"epochs: {report.iterations}")
    print(f"final J: {report.final_loss:.6g} (tolerance {config.tol:g}, {'met' if report.success else 'not met'})")
    return 0


# -- predict -------------------------------------------------------------------

def cmd_predict(args) -> int:
    model, system = load_model(args.model)
    ic = np.asarray(_floats(args.ic))
    if ic.size != model.d:
        raise UsageError(f"initial condition has {ic.size} components, model expects {model.d}")
    if args.n_steps < 0:
        raise UsageError("n_steps must be nonnegative")
    pred = model.predict(ic[None, :], args.n_steps)[0]
    header = ["step"] + [f"pred_x{i + 1}" for i in range(model.d)]
    rows = [[n, *map(float, pred[n])] for n in range(args.n_steps + 1)]
    if args.truth:
        params = _system_params(system)
        if isinstance(params, DuffingParams):
            truth = duffing_trajectories(params, ic, args.n_steps)[0]
        else:
            truth = ks_trajectories(params, ic, args.n_steps)[0]
        header += [f"true_x{i + 1}" for i in range(model.d)] + ["error"]
        err = np.linalg.norm(truth - pred, axis=1)
        rows = [r + [*map(float, truth[n]), float(err[n])] for n, r in enumerate(rows)]
    out = Path(args.out) if args.out else _out_dir(args) / "prediction.csv"
    _write_rows(out, header, rows)
    print(f"wrote {out} ({args.n_steps + 1} rows)")
    if args.truth and args.n_steps >= 1:
        print(f"E_recon={reconstruction_error(truth, pred):.6g}")
    return 0


# -- eval ----------------------------------------------------------------------

def _eval_box(params, args):
    if args.box is not None:
        return -args.box, args.box
    return (-2.0, 2.0) if isinstance(params, DuffingParams) else (-4.0, 4.0)


def evaluate(model, params, which: str, seed: int, n_samples: int = 10_000, n_ics: int = 10,
             horizon: int | None = None, box=None) -> tuple[dict, list]:
    """Metrics report and flat ``(metric, value)`` rows for one model."""
    report: dict = {"which": which, "seed": seed}
    rows = []
    duffing = isinstance(params, DuffingParams)
    if which in ("recon", "both"):
        if duffing:
            r = duffing_recon_report(model, n_ics, horizon or 50, seed, params)
            for basin in ("plus", "minus"):
                rows += [(f"E_recon_{basin}_median", r[basin]["median"]), (f"E_recon_{basin}_mean", r[basin]["mean"])]
        else:
            r = ks_recon_report(model, params, n_ics, horizon or 100, seed)
            rows += [("E_recon_median", r["all"]["median"]), ("E_recon_mean", r["all"]["mean"])]
        report["recon"] = r
    if which in ("eigen", "both"):
        low, high = box or ((-2.0, 2.0) if duffing else (-4.0, 4.0))
        r = eigen_report(model, stepper_for(params), EvalConfig(n_samples, low, high, seed))
        rows.append(("E_eigen", r["E_eigen"]))
        rows += [(f"E_{j}", e) for j, e in enumerate(r["E_j"])]
        report["eigen"] = r
    return report, rows


def cmd_eval(args) -> int:
    started = time.time()
    model, system = load_model(args.model)
    if args.dataset:
        system = _load_dataset(args.dataset).system
    params = _system_params(system)
    seed = _seed(args, 1)
    report, rows = evaluate(model, params, args.which, seed, args.n_samples, args.n_ics, args.horizon,
                            _eval_box(params, args))
    report["model"] = str(args.model)
    out = _out_dir(args)
    dump_json(report, out / "metrics.json")
    _write_rows(out / "metrics.csv", ["metric", "value"], rows)
    write_manifest(out / "eval_manifest.json", "eval", sys.argv[1:],
                   {"which": args.which, "n_samples": args.n_samples, "n_ics": args.n_ics, "horizon": args.horizon},
                   {"eval": seed}, {"model": args.model, "metrics": out / "metrics.json",
                                    "metrics_csv": out / "metrics.csv"}, started)
    for name, value in rows:
        if not name.startswith("E_") or not name[2:].isdigit():
            print(f"{name}={value:.6g}")
    return 0


# -- classify ------------------------------------------------------------------

def cmd_classify(args) -> int:
    model, system = load_model(args.model)
    params = _system_params(system) if system else DuffingParams()
    if not isinstance(params, DuffingParams) or model.d != 2:
        raise UsageError("basin classification needs a Duffing model")
    if args.n_samples < 1:
        raise UsageError("n_samples must be positive")
    ics = make_rng(_seed(args, 2)).uniform(-2.0, 2.0, size=(args.n_samples, 2))
    res = classify_basins(model, ics, args.horizon, duffing_truth_labels(ics, args.horizon, params), params)
    out = Path(args.out) if args.out else _out_dir(args) / "classification.csv"
    _write_rows(out, ["x1", "x2", "truth", "pred"],
                [(float(a), float(b), int(t), int(p)) for (a, b), t, p in zip(ics, res.truth, res.predicted)])
    print(f"wrote {out}")
    print(f"accuracy={res.accuracy:.6g} ({int(np.sum(res.truth == res.predicted))}/{args.n_samples})")
    return 0


# -- sweep ---------------------------------------------------------------------

def cmd_sweep(args) -> int:
    doc = load_config(args.config)
    base = _train_config(args, doc)
    ds = _load_dataset(args.dataset)
    params = _system_params(ds.system)
    seed = _seed(args, 1)
    variants = [("node", w) for w in _ints(args.field_widths or "")] + [("mlp", w) for w in _ints(args.widths or "")]
    if not variants:
        raise UsageError("sweep needs --field-widths and/or --widths")

    def runner(kind, w):
        def run():
            values = base.to_dict()
            values["network"] = kind
            values["field_width" if kind == "node" else "width"] = w
            _, model, report = train(TrainConfig.from_dict(values), ds)
            if args.metric == "classify":
                ics = make_rng(seed).uniform(-2.0, 2.0, size=(args.n_samples, 2))
                metric = classify_basins(model, ics, params=params).accuracy
            elif args.metric == "eigen":
                metric = evaluate(model, params, "eigen", seed, args.n_samples)[0]["eigen"]["E_eigen"]
            else:
                r = evaluate(model, params, "recon", seed)[0]["recon"]
                metric = max(r["plus"]["median"], r["minus"]["median"]) if "plus" in r else r["all"]["median"]
            print(f"{kind} width {w}: parameters={report.n_params:,} {args.metric}={metric:.6g}", flush=True)
            return report.n_params, metric
        return f"{kind}:{w}", run

    target = args.target
    if target is None and args.metric == "classify":
        target = 1.0
    rows, best = efficiency_sweep([runner(k, w) for k, w in variants], target, args.metric == "classify")
    out = _out_dir(args)
    _write_rows(out / "sweep.csv", ["label", "n_params", args.metric], [(r.label, r.n_params, r.metric) for r in rows])
    print(f"wrote {out / 'sweep.csv'}")
    print(f"minimum parameters meeting target: {'none' if best is None else f'{best:,}'}")
    return 0


# -- parser --------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="random seed for this command")
    common.add_argument("--threads", type=int, default=None,
                        help="BLAS threads (default: all); 1 guarantees bitwise determinism")
    common.add_argument("--out-dir", default=None, help=f"output directory (default: ${OUTPUT_ENV} or .)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="edmddl", description="EDMD with trainable dictionaries.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", parents=[common], help="simulate a training dataset")
    g.add_argument("system", nargs="?", choices=["duffing", "ks"])
    g.add_argument("--out", help="dataset path")
    g.add_argument("--csv", help="also write a CSV export")
    g.add_argument("--n-trajectories", type=int)
    g.add_argument("--n-steps", type=int)
    g.add_argument("--nx", type=int, default=128, help="KS grid size")
    g.add_argument("--amplitude", type=float, default=4.0, help="KS initial-condition amplitude")
    g.add_argument("--manifest", help="regenerate from an earlier generate manifest")
    g.set_defaults(func=cmd_generate)

    def train_flags(q):
        q.add_argument("--config", help="JSON run config")
        q.add_argument("--dataset", required=True)
        q.add_argument("--dict", choices=["node", "mlp"])
        q.add_argument("--n-dict", type=int, help="dictionary size M")
        q.add_argument("--width", type=int)
        q.add_argument("--depth", type=int)
        q.add_argument("--field-width", type=int)
        q.add_argument("--ridge", type=float)
        q.add_argument("--tol", type=float)
        q.add_argument("--lr", type=float)
        q.add_argument("--max-epochs", type=int)
        q.add_argument("--inner-steps", type=int)
        q.add_argument("--batch-size", type=int)
        q.add_argument("--init-scale", choices=["inverse", "literal"])
        q.add_argument("--ridge-convention", choices=["loss", "literal"])
        q.add_argument("--abs-tol", type=float)
        q.add_argument("--rel-tol", type=float)
        q.add_argument("--max-time", type=float, help="wall-clock training budget in seconds")
        q.add_argument("--per-row", action="store_true", help="independent ODE steps per sample")

    t = sub.add_parser("train", parents=[common], help="train a dictionary and Koopman model")
    train_flags(t)
    t.add_argument("--checkpoint-every", type=int, default=0)
    t.add_argument("--dry-run", action="store_true", help="print the parameter count and exit")
    t.set_defaults(func=cmd_train)

    pr = sub.add_parser("predict", parents=[common], help="multi-step prediction from one state")
    pr.add_argument("--model", required=True)
    pr.add_argument("--ic", required=True, help="comma-separated initial state")
    pr.add_argument("--n-steps", type=int, default=50)
    pr.add_argument("--out")
    pr.add_argument("--truth", action="store_true", help="add simulated ground truth and error columns")
    pr.set_defaults(func=cmd_predict)

    e = sub.add_parser("eval", parents=[common], help="reconstruction and eigenfunction errors")
    e.add_argument("--model", required=True)
    e.add_argument("--dataset", help="take the system descriptor from this dataset")
    e.add_argument("--which", choices=["recon", "eigen", "both"], default="both")
    e.add_argument("--n-samples", type=int, default=10_000, help="Monte-Carlo samples I")
    e.add_argument("--n-ics", type=int, default=10, help="held-out ICs (per basin for Duffing)")
    e.add_argument("--horizon", type=int, default=None)
    e.add_argument("--box", type=float, default=None, help="half-width of the sampling box")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("classify", parents=[common], help="Duffing basin classification")
    c.add_argument("--model", required=True)
    c.add_argument("--n-samples", type=int, default=2000)
    c.add_argument("--horizon", type=int, default=49)
    c.add_argument("--out")
    c.set_defaults(func=cmd_classify)

    s = sub.add_parser("sweep", parents=[common], help="parameter-efficiency sweep")
    train_flags(s)
    s.add_argument("--field-widths", help="NODE field widths, comma-separated")
    s.add_argument("--widths", help="MLP widths, comma-separated")
    s.add_argument("--metric", choices=["recon", "eigen", "classify"], default="classify")
    s.add_argument("--target", type=float)
    s.add_argument("--n-samples", type=int, default=2000)
    s.set_defaults(func=cmd_sweep)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if args.threads is not None and args.threads < 1:
        print("edmddl: error: --threads must be positive", file=sys.stderr)
        return 2
    if args.threads is not None:
        from threadpoolctl import threadpool_limits
        limits = threadpool_limits(limits=args.threads)
    else:
        limits = nullcontext()
    try:
        with limits:
            return args.func(args)
    except NUMERICAL_ERRORS as exc:
        print(f"edmddl: numerical failure: {exc}", file=sys.stderr)
        return 3
    except (UsageError, ValueError, KeyError, TypeError, OSError) as exc:
        print(f"edmddl: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
