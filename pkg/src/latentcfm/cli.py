"""Command-line front end: ``latentcfm <command> ...`` or ``python -m latentcfm``.

Every command that produces artifacts writes into a run directory::

    run/
      config.json      training config (JSON file values overridden by flags)
      metrics.csv      step,metric,value,seed,method,n_a,n_b,config_hash
      model.lcfm       final model bundle
      checkpoints/     periodic training checkpoints
      samples/         generated batches in the dataset container format
      manifest.json    command log and sha256 of every artifact

Failures print one JSON object ``{"error": ..., "type": ...}`` on stderr;
the exit code is 2 for usage and configuration errors, 1 otherwise.
"""
from __future__ import annotations

import argparse
import datetime
import json
import logging
import os
import sys
import warnings

import numpy as np

from . import __version__
from . import datasets as ds
from .io import (FormatError, config_hash, file_sha256, load_container, read_csv, read_json,
                 save_container, write_csv, write_json)
from .metrics import (SinkhornConfig, darcy_residual, kernel_distances, mode_coverage,
                      sinkhorn_divergence)
from .pipelines import (ConfigError, TrainConfig, compose_sample, load_bundle, sample,
                        save_bundle, sweep_beta, train)
from .solvers import ComposeConfig, SolverConfig

log = logging.getLogger("latentcfm")

METRICS_FIELDS = ["step", "metric", "value", "seed", "method", "n_a", "n_b", "config_hash"]
HIST_BINS = 50


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# -- datasets on disk ----------------------------------------------------------------
def save_dataset(path, kind, config, arrays, stats=None):
    first = next(iter(arrays.values()))
    meta = {"kind": kind, "config": config, "stats": stats, "count": int(len(first)),
            "shape": list(first.shape[1:])}
    save_container(path, meta, arrays)


def load_dataset(path):
    """``(train, test, meta)`` as flat ``(n, d)`` arrays; ``test`` may be None."""
    meta, arrays = load_container(path)
    if meta.get("kind") == "darcy":
        x, _ = ds.standardize(arrays["K"], arrays["P"], meta["stats"])
        flat = x.reshape(len(x), -1)
        return flat, None, meta
    if "train" not in arrays:
        raise FormatError(f"{path}: no train array")
    return arrays["train"], arrays.get("test"), meta


# -- run directory helpers -----------------------------------------------------------
def _now():
    return datetime.datetime.now(datetime.timezone.utc).isoformat(timespec="seconds")


def update_manifest(run_dir, command, cfg_hash=None):
    """Record ``command`` and re-stamp every artifact in the run directory."""
    path = os.path.join(run_dir, "manifest.json")
    man = read_json(path) if os.path.exists(path) else {
        "run_id": os.path.basename(os.path.abspath(run_dir)), "created": _now(), "commands": []}
    man["version"] = __version__
    try:
        from .experiments import source_digest
        man["source_digest"] = source_digest()
    except ImportError:  # pragma: no cover
        pass
    if cfg_hash:
        man["config_hash"] = cfg_hash
    man["commands"].append({"argv": command, "time": _now()})
    man["updated"] = _now()
    artifacts = {}
    for root, _, files in os.walk(run_dir):
        for name in sorted(files):
            if name == "manifest.json" or name.startswith(".tmp-"):
                continue
            full = os.path.join(root, name)
            artifacts[os.path.relpath(full, run_dir)] = file_sha256(full)
    man["artifacts"] = dict(sorted(artifacts.items()))
    write_json(path, man)
    return man


def append_metrics(run_dir, rows):
    path = os.path.join(run_dir, "metrics.csv")
    old = read_csv(path) if os.path.exists(path) else []
    write_csv(path, old + rows, METRICS_FIELDS)


def _run_config(run_dir):
    path = os.path.join(run_dir, "config.json")
    if not os.path.exists(path):
        raise UsageError(f"{run_dir} is not a run directory (no config.json)")
    return TrainConfig.from_dict(read_json(path))


def _model(run_dir):
    path = os.path.join(run_dir, "model.lcfm")
    if not os.path.exists(path):
        raise UsageError(f"{run_dir} has no trained model")
    return load_bundle(path)[0]


def _floats(text):
    try:
        return [float(v) for v in text.split(",")]
    except ValueError:
        raise UsageError(f"expected comma-separated numbers, got {text!r}") from None


def _solver(args):
    return SolverConfig(scheme=args.solver, steps=args.solver_steps)


# -- commands ------------------------------------------------------------------------
def cmd_gen_triangle(args):
    if args.preset is not None:
        cfg = ds.TriangleConfig.preset(args.preset, seed=args.seed)
    else:
        cfg = ds.TriangleConfig(k=args.k, d=args.d, seed=args.seed)
    x = ds.sample_triangle(cfg, args.n)
    train_x, test_x = ds.split_half(x, args.seed)
    save_dataset(args.out, "triangle", vars(cfg), {"train": train_x, "test": test_x})
    return {"out": args.out, "train": len(train_x), "test": len(test_x)}


def cmd_gen_darcy(args):
    cfg = ds.DarcyConfig(N=args.N, seed=args.seed)
    K, P = ds.generate_darcy(cfg, args.n)
    _, stats = ds.standardize(K, P)
    save_dataset(args.out, "darcy", vars(cfg), {"K": K, "P": P}, stats)
    return {"out": args.out, "count": args.n, "stats": stats}


TRAIN_FLAGS = {
    "method": str, "steps": int, "batch": int, "lr": float, "beta": float, "latent_dim": int,
    "gmm_components": int, "seed": int, "sigma": float, "eval_every": int, "eval_n": int,
    "checkpoint_every": int, "vae_steps": int, "vrfm_input": str,
}


def _train_config(args):
    base = read_json(args.config) if args.config else {}
    for name in TRAIN_FLAGS:
        v = getattr(args, name)
        if v is not None:
            base[name] = v
    if args.hidden_dims:
        base["hidden_dims"] = [int(v) for v in _floats(args.hidden_dims)]
    try:
        return TrainConfig.from_dict(base)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def _record_rows(record, cfg, n_b):
    h = config_hash(cfg.to_dict())
    return [{"step": s, "metric": m, "value": v, "seed": cfg.seed, "method": cfg.method,
             "n_a": cfg.eval_n, "n_b": n_b, "config_hash": h} for s, m, v in record.metrics]


def cmd_train(args):
    cfg = _train_config(args)
    train_x, test_x, _ = load_dataset(args.data)
    os.makedirs(args.run, exist_ok=True)
    write_json(os.path.join(args.run, "config.json"), cfg.to_dict())
    bundle, record = train(cfg, train_x, eval_data=test_x, run_dir=args.run, resume=args.resume)
    save_bundle(os.path.join(args.run, "model.lcfm"), bundle, cfg.steps, record=record)
    n_b = min(cfg.eval_n, len(test_x)) if test_x is not None else 0
    rows = _record_rows(record, cfg, n_b)
    rows += [{"step": s, "metric": "loss", "value": v, "seed": cfg.seed, "method": cfg.method,
              "n_a": "", "n_b": "", "config_hash": config_hash(cfg.to_dict())}
             for s, v in record.losses]
    write_csv(os.path.join(args.run, "metrics.csv"), rows, METRICS_FIELDS)
    write_json(os.path.join(args.run, "data.json"), {"data": os.path.abspath(args.data)})
    return {"run": args.run, "steps": cfg.steps, "wall_clock": record.wall_clock,
            "final_loss": record.losses[-1][1] if record.losses else None}


def _trajectory_rows(traj, max_traj):
    rows = []
    for i, t, *x in traj.to_rows(max_traj):
        rows.append({"traj_id": i, "t": t, "x": x[0], "y": x[1] if len(x) > 1 else ""})
    return rows


def cmd_sample(args):
    bundle = _model(args.run)
    solver = _solver(args)
    out = os.path.join(args.run, "samples", args.name + ".lcfm")
    if args.trajectory:
        traj = sample(bundle, args.n, solver, args.seed, return_trajectory=True)
        x = traj.final
        write_csv(os.path.join(args.run, "samples", args.name + "_trajectory.csv"),
                  _trajectory_rows(traj, args.trajectory), ["traj_id", "t", "x", "y"])
    else:
        x = sample(bundle, args.n, solver, args.seed)
    save_dataset(out, "samples", {"seed": args.seed, "solver": vars(solver)}, {"train": x})
    return {"out": out, "count": len(x)}


def cmd_compose(args):
    bundle = _model(args.run)
    cfg = ComposeConfig(n_ode=args.n_ode, n_langevin=args.n_langevin, eps_drift=args.eps,
                        eps_diff=args.eps)
    b = None if args.anchor_b is None else _floats(args.anchor_b)
    x = compose_sample(bundle, _floats(args.anchor_a), b, args.n, cfg, args.seed)
    out = os.path.join(args.run, "samples", args.name + ".lcfm")
    save_dataset(out, "samples", {"seed": args.seed, "compose": vars(cfg),
                                  "anchor_a": args.anchor_a, "anchor_b": args.anchor_b},
                 {"train": x})
    return {"out": out, "count": len(x)}


def cmd_eval(args):
    cfg = _run_config(args.run)
    bundle = None
    if args.samples:
        gen = load_container(args.samples)[1]["train"]
    else:
        bundle = _model(args.run)
        gen = sample(bundle, args.n, _solver(args), args.seed)
    data_path = args.data or read_json(os.path.join(args.run, "data.json"))["data"]
    train_x, test_x, meta = load_dataset(data_path)
    ref = (test_x if test_x is not None else train_x)[:args.n]
    h = config_hash(cfg.to_dict())
    base = {"step": cfg.steps, "seed": args.seed, "method": cfg.method, "n_a": len(gen),
            "n_b": len(ref), "config_hash": h}
    rows, result = [], {}
    if args.metric in ("w2", "sinkhorn"):
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            s = sinkhorn_divergence(gen, ref, SinkhornConfig(blur=args.blur, scale=args.scale))
        result = {"sinkhorn": s, "w2": float(np.sqrt(2 * max(s, 0.0)))}
        result["warnings"] = [str(w.message) for w in caught]
    elif args.metric == "kernel":
        result = kernel_distances(gen, ref)
    elif args.metric == "coverage":
        tcfg = ds.TriangleConfig(**meta["config"])
        cov = mode_coverage(gen, tcfg)
        result = {"missing_modes": len(cov["missing"]), "min_mode_fraction": float(cov["fractions"].min()),
                  "outside_fraction": cov["outside_fraction"]}
    elif args.metric == "residual":
        if meta.get("kind") != "darcy":
            raise UsageError("residual needs a Darcy dataset")
        dcfg = ds.DarcyConfig(**meta["config"])
        N = dcfg.N
        K, P = ds.unstandardize(gen.reshape(-1, 2, N, N), meta["stats"])
        R = darcy_residual(K, P, dcfg)
        write_json(os.path.join(args.run, "residuals.json"), {"residuals": R.tolist()})
        result = {"residual_median": float(np.median(R)), "residual_mean": float(np.mean(R))}
    for k, v in result.items():
        if isinstance(v, (int, float)):
            rows.append(dict(base, metric=k, value=v))
    append_metrics(args.run, rows)
    return result


def cmd_sweep_beta(args):
    cfg = _train_config(args)
    cfg.method = "latent-cfm-vae"
    train_x, test_x, _ = load_dataset(args.data)
    if test_x is None:
        raise UsageError("sweep-beta needs a dataset with a test split")
    os.makedirs(args.run, exist_ok=True)
    write_json(os.path.join(args.run, "config.json"), cfg.to_dict())
    rows = sweep_beta(cfg, train_x, test_x, _floats(args.betas))
    write_csv(os.path.join(args.run, "sweep.csv"), rows, ["beta", "test_kl", "final_loss"])
    h = config_hash(cfg.to_dict())
    append_metrics(args.run, [{"step": cfg.steps, "metric": f"test_kl@beta={r['beta']:g}",
                               "value": r["test_kl"], "seed": cfg.seed, "method": cfg.method,
                               "n_a": len(test_x), "n_b": "", "config_hash": h} for r in rows])
    return {"rows": rows}


# -- plot data -----------------------------------------------------------------------
def emit_plot_data(run_dirs, out_dir, metric="w2"):
    """Long-format tables for the W2-vs-steps curve, trajectories and residual histograms.

    Writes ``curve.csv`` (method, run, step, value), ``trajectories.csv``
    (method, run, traj_id, t, x, y) and ``residual_hist.csv`` (method, run,
    bin_lo, bin_hi, count; 50 bins over log10 residual) into ``out_dir``.
    Runs lacking a table are skipped with a warning.  Returns the file paths.
    """
    curve, trajs, hists = [], [], []
    for run in run_dirs:
        name = os.path.basename(os.path.abspath(run))
        try:
            method = _run_config(run).method
        except UsageError:
            warnings.warn(f"{run}: no config.json, skipped")
            continue
        mpath = os.path.join(run, "metrics.csv")
        rows = [r for r in read_csv(mpath) if r["metric"] == metric] if os.path.exists(mpath) else []
        if not rows:
            warnings.warn(f"{run}: no {metric} rows in metrics.csv")
        curve += [{"method": method, "run": name, "step": int(r["step"]), "value": float(r["value"])}
                  for r in sorted(rows, key=lambda r: int(r["step"]))]
        sdir = os.path.join(run, "samples")
        if os.path.isdir(sdir):
            for f in sorted(os.listdir(sdir)):
                if f.endswith("_trajectory.csv"):
                    trajs += [dict(r, method=method, run=name) for r in read_csv(os.path.join(sdir, f))]
        rpath = os.path.join(run, "residuals.json")
        if os.path.exists(rpath):
            R = np.asarray(read_json(rpath)["residuals"], float)
            logR = np.log10(np.maximum(R, np.finfo(float).tiny))
            counts, edges = np.histogram(logR, bins=HIST_BINS)
            hists += [{"method": method, "run": name, "bin_lo": float(edges[i]),
                       "bin_hi": float(edges[i + 1]), "count": int(counts[i])}
                      for i in range(HIST_BINS)]
    os.makedirs(out_dir, exist_ok=True)
    paths = {"curve": os.path.join(out_dir, "curve.csv"),
             "trajectories": os.path.join(out_dir, "trajectories.csv"),
             "residual_hist": os.path.join(out_dir, "residual_hist.csv")}
    write_csv(paths["curve"], curve, ["method", "run", "step", "value"])
    write_csv(paths["trajectories"], trajs, ["method", "run", "traj_id", "t", "x", "y"])
    write_csv(paths["residual_hist"], hists, ["method", "run", "bin_lo", "bin_hi", "count"])
    return paths


def cmd_report(args):
    out = args.out or os.path.join(args.run[0], "report")
    return emit_plot_data(args.run, out, args.metric)


# -- parser --------------------------------------------------------------------------
def _add_train_flags(p):
    p.add_argument("--data", required=True, help="dataset file from `data gen-*`")
    p.add_argument("--run", required=True, help="run directory")
    p.add_argument("--config", help="JSON file of training settings; flags override it")
    for name, typ in TRAIN_FLAGS.items():
        p.add_argument("--" + name.replace("_", "-"), dest=name, type=typ, default=None)
    p.add_argument("--hidden-dims", help="comma-separated widths, e.g. 64,64,64")


def _add_solver_flags(p):
    p.add_argument("--solver", default="dopri5", choices=["dopri5", "euler", "rk4"])
    p.add_argument("--solver-steps", type=int, default=100, help="fixed-step schemes only")


def build_parser():
    ap = _Parser(prog="latentcfm", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    data = sub.add_parser("data", help="generate datasets")
    dsub = data.add_subparsers(dest="kind", parser_class=_Parser)
    dsub.required = True
    tri = dsub.add_parser("gen-triangle", help="triangular-mode mixture, split 50/50")
    tri.add_argument("--k", type=int, default=4)
    tri.add_argument("--d", type=int, default=2)
    tri.add_argument("--preset", type=int, choices=range(5), help="named weight preset (k=4, d=2)")
    tri.add_argument("--n", type=int, default=100000)
    tri.add_argument("--seed", type=int, default=0)
    tri.add_argument("--out", required=True)
    tri.set_defaults(fn=cmd_gen_triangle)
    dar = dsub.add_parser("gen-darcy", help="permeability/pressure pairs")
    dar.add_argument("--N", type=int, default=32)
    dar.add_argument("--n", type=int, default=2000)
    dar.add_argument("--seed", type=int, default=0)
    dar.add_argument("--out", required=True)
    dar.set_defaults(fn=cmd_gen_darcy)

    p = sub.add_parser("train", help="train a model into a run directory")
    _add_train_flags(p)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("sample", help="generate samples from a trained run")
    p.add_argument("--run", required=True)
    p.add_argument("--n", type=int, default=10000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--name", default="samples")
    p.add_argument("--trajectory", type=int, default=0, metavar="K",
                   help="also export the first K trajectories as (traj_id, t, x, y) rows")
    _add_solver_flags(p)
    p.set_defaults(fn=cmd_sample)

    p = sub.add_parser("compose", help="sample from the product of two conditionals")
    p.add_argument("--run", required=True)
    p.add_argument("--anchor-a", required=True, help="conditioning point, e.g. 0.125,0.125")
    p.add_argument("--anchor-b", help="second conditioning point (omit for one condition)")
    p.add_argument("--n", type=int, default=2000)
    p.add_argument("--n-ode", type=int, default=100)
    p.add_argument("--n-langevin", type=int, default=2)
    p.add_argument("--eps", type=float, default=1e-4, help="Langevin drift and diffusion size")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--name", default="composed")
    p.set_defaults(fn=cmd_compose)

    p = sub.add_parser("eval", help="score a run against held-out data")
    p.add_argument("--run", required=True)
    p.add_argument("--metric", default="w2", choices=["w2", "sinkhorn", "kernel", "coverage", "residual"])
    p.add_argument("--data", help="dataset file (defaults to the one used for training)")
    p.add_argument("--samples", help="evaluate this samples file instead of fresh samples")
    p.add_argument("--n", type=int, default=10000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--blur", type=float, default=0.05)
    p.add_argument("--scale", type=float, default=1.0, help="blur multiplier (1.0: absolute blur)")
    _add_solver_flags(p)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("sweep-beta", help="test-set KL across KL weights")
    _add_train_flags(p)
    p.add_argument("--betas", default="0.001,0.01,0.1,1")
    p.set_defaults(fn=cmd_sweep_beta)

    p = sub.add_parser("report", help="emit plot-ready CSV tables")
    p.add_argument("--run", required=True, action="append", help="run directory (repeatable)")
    p.add_argument("--out", help="output directory (default RUN/report)")
    p.add_argument("--metric", default="w2")
    p.set_defaults(fn=cmd_report)
    return ap


def _fail(exc, code):
    print(json.dumps({"error": str(exc), "type": type(exc).__name__, "exit_code": code}),
          file=sys.stderr)
    return code


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        return _fail(exc, 2)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        result = args.fn(args)
    except (UsageError, ConfigError, ds.darcy.ConfigError, ds.triangle.ConfigError,
            FileNotFoundError, FormatError) as exc:
        return _fail(exc, 2)
    except Exception as exc:  # runtime failure: report, do not dump a traceback
        log.debug("command failed", exc_info=True)
        return _fail(exc, 1)
    run = getattr(args, "run", None)
    if isinstance(run, str) and os.path.isdir(run):
        cfg_path = os.path.join(run, "config.json")
        h = config_hash(read_json(cfg_path)) if os.path.exists(cfg_path) else None
        update_manifest(run, ["latentcfm", *argv], h)
    print(json.dumps(result, default=lambda o: o.tolist() if hasattr(o, "tolist") else str(o)))
    return 0
