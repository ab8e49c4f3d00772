"""Command-line front end: ingest counter data, run the two-stage pipeline, run studies.

Exit codes are 0 on success, 2 when inputs fail validation and 3 on a
numerical failure inside a fit.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import platform
import sys
import warnings
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import scipy

from . import __version__, baselines, calibrate, gssm, multilevel, simstudy
from .errors import (DegenerateEnsemble, InfeasibleError, MissingTotals, NegativeEntry,
                     NonConvergence, NonFiniteLikelihood, OptFailed, RankDeficientWarning,
                     ShapeMismatch)
from .network import RoutingMatrix, read_routing_csv

log = logging.getLogger("nettomo")

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERICAL = 0, 2, 3
VALIDATION_ERRORS = (ShapeMismatch, NegativeEntry, MissingTotals, InfeasibleError,
                     FileNotFoundError, ValueError)
NUMERICAL_ERRORS = (NonConvergence, NonFiniteLikelihood, OptFailed, DegenerateEnsemble,
                    FloatingPointError, np.linalg.LinAlgError)
_TIME_COLUMNS = {"", "t", "time", "epoch", "timestamp", "date"}
TRUTH_RTOL = 1e-6


@dataclass(frozen=True)
class Dataset:
    """Validated counter series with its routing matrix and optional truth."""

    A: RoutingMatrix
    y: np.ndarray
    truth: np.ndarray | None = None
    truth_violations: tuple = ()

    @property
    def T(self):
        return self.y.shape[0]


def _read_series(path, names):
    """Read a ``T x len(names)`` numeric table.

    A non-numeric first row is a header.  When it contains every name in
    ``names`` the columns are matched by name, otherwise by position after
    dropping a leading time column.
    """
    with open(path) as fh:
        first = fh.readline().strip().split(",")
    try:
        [float(v) for v in first]
        header = None
    except ValueError:
        header = [h.strip().strip('"') for h in first]
    data = np.atleast_2d(np.genfromtxt(path, delimiter=",", skip_header=0 if header is None else 1))
    if header is not None and set(names) <= set(header):
        idx = [header.index(nm) for nm in names]
        return data[:, idx]
    if header is not None and header[0].lower() in _TIME_COLUMNS:
        data = data[:, 1:]
    if data.shape[1] != len(names):
        raise ShapeMismatch(f"{path}: {data.shape[1]} columns, expected {len(names)}")
    return data


def ingest(link_csv, routing_csv, od_truth_csv=None) -> Dataset:
    """Load and validate counters, routing matrix and (optionally) true OD volumes.

    Raises :class:`ShapeMismatch` or :class:`NegativeEntry` on bad input and
    warns with :class:`RankDeficientWarning` when counters are linearly
    dependent.  Epochs where the truth does not reproduce the counters to a
    relative ``1e-6`` are listed in ``truth_violations``.
    """
    A = read_routing_csv(routing_csv)
    y = _read_series(link_csv, list(A.row_names))
    if not np.all(np.isfinite(y)):
        raise ShapeMismatch(f"{link_csv}: missing or non-numeric counter values")
    if np.any(y < 0):
        raise NegativeEntry(f"{link_csv}: negative counter values")
    if A.rank < A.m:
        warnings.warn(f"routing matrix has rank {A.rank} < {A.m} counters; "
                      f"redundant rows {[A.row_names[i] for i in A.redundant_rows]}", RankDeficientWarning)
    truth, bad = None, ()
    if od_truth_csv is not None:
        truth = _read_series(od_truth_csv, list(A.col_names))
        if truth.shape[0] != y.shape[0]:
            raise ShapeMismatch(f"truth has {truth.shape[0]} epochs, counters {y.shape[0]}")
        if np.any(truth < 0):
            raise NegativeEntry(f"{od_truth_csv}: negative OD volumes")
        resid = np.abs(truth @ A.entries.T - y).max(axis=1)
        scale = np.maximum(np.abs(y).max(axis=1), 1e-300)
        bad = tuple(int(t) for t in np.flatnonzero(resid / scale > TRUTH_RTOL))
        if bad:
            log.warning("truth misses the counters at %d epochs (first %s)", len(bad), bad[:5])
    return Dataset(A, y, truth, bad)


def _stage1(ds: Dataset, stage1, cfg, out_dir):
    A, y = ds.A, ds.y
    if stage1 == "naive":
        return calibrate.naive_priors(A.n, ds.T, rho=cfg["rho"], tau=cfg["tau"]), None
    if stage1 == "gravity":
        x_grav = baselines.gravity_series(y, A)
        return calibrate.priors_from_gravity(x_grav, rho=cfg["rho"], tau=cfg["tau"]), x_grav
    fit = gssm.fit_sliding(y, A, window=cfg["window"], rho=cfg["ssm_rho"],
                           sigma2=cfg["ssm_sigma2"], tau=cfg["tau"])
    gssm.write_fit_csv(fit, out_dir / "ssm_fit.csv", list(A.col_names))
    x_corr, flags = calibrate.correct(fit.x_hat, A, y)
    if flags.any():
        log.warning("IPFP correction failed at %d epochs", int(flags.sum()))
    x_s = calibrate.correct_and_smooth(fit.x_hat, A, y, cfg["median_window"])
    v = np.maximum(fit.v_hat, np.finfo(float).tiny)
    return calibrate.priors_from_ssm(x_s, v, fit.phi_hat, rho=cfg["rho"], tau=cfg["tau"]), x_corr


def _hash_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _versions():
    return {"nettomo": __version__, "python": platform.python_version(),
            "numpy": np.__version__, "scipy": scipy.__version__}


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()


def run_pipeline(ds: Dataset, stage1: str, cfg: dict, out_dir) -> dict:
    """Calibrate priors, filter, and write every output to ``out_dir``.

    Returns the metrics dictionary (empty without truth).
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    A = ds.A
    priors, x_stage1 = _stage1(ds, stage1, cfg, out_dir)
    if cfg.get("alpha") is not None:
        priors = replace(priors, alpha=float(cfg["alpha"]))
    calibrate.write_priors_csv(priors, out_dir / "priors.csv", route_names=list(A.col_names))
    fcfg = multilevel.FilterConfig(
        n_particles=cfg["particles"], n_move=cfg["move_iters"],
        rda_steps_per_draw=cfg["rda_steps"], seed=cfg["seed"],
        keep_particles=cfg["dump_particles"],
    )
    post = multilevel.sirm_filter(ds.y, A, priors, fcfg)
    multilevel.write_estimates_csv(post, out_dir / "estimates.csv", list(A.col_names))
    multilevel.write_diagnostics_csv(post, out_dir / "diagnostics.csv")
    if cfg["dump_particles"]:
        multilevel.dump_particles(post, out_dir / "particles.npz")
    metrics = {}
    if ds.truth is not None:
        methods = {"multilevel": post.mean}
        if x_stage1 is not None:
            methods[f"stage1_{stage1}"] = x_stage1
        for name, xh in methods.items():
            l1, se1, l2, se2 = simstudy.l_errors(xh, ds.truth)
            metrics[name] = {"mean_L1": l1, "se_L1": se1, "mean_L2": l2, "se_L2": se2}
        with open(out_dir / "metrics.json", "w") as fh:
            json.dump(metrics, fh, indent=1)
    return metrics


def _pipeline_config(args) -> dict:
    return {
        "stage1": args.stage1, "particles": args.particles, "move_iters": args.move_iters,
        "rda_steps": args.rda_steps, "window": args.window, "rho": args.rho, "tau": args.tau,
        "alpha": args.alpha, "seed": args.seed, "ssm_rho": args.ssm_rho,
        "ssm_sigma2": args.ssm_sigma2, "median_window": args.median_window,
        "dump_particles": args.dump_particles,
    }


def _cmd_ingest(args):
    ds = ingest(args.links, args.routing, args.truth)
    report = {"T": ds.T, "m": ds.A.m, "n": ds.A.n, "rank": ds.A.rank,
              "redundant_rows": [ds.A.row_names[i] for i in ds.A.redundant_rows],
              "truth": ds.truth is not None, "truth_violations": list(ds.truth_violations)}
    print(json.dumps(report, indent=1))
    return EXIT_VALIDATION if ds.truth_violations and args.strict else EXIT_OK


def _cmd_run(args):
    if args.from_manifest:
        with open(args.from_manifest) as fh:
            man = json.load(fh)
        cfg = man["config"]
        inputs = man["inputs"]
        routing, links, truth = inputs["routing"]["path"], inputs["links"]["path"], (
            inputs.get("truth") or {}).get("path")
        out_dir = Path(args.out_dir or man["out_dir"])
    else:
        if not (args.routing and args.links):
            raise ValueError("--routing and --links are required")
        cfg = _pipeline_config(args)
        routing, links, truth, out_dir = args.routing, args.links, args.truth, Path(args.out_dir or ".")
    ds = ingest(links, routing, truth)
    print(json.dumps({"config": cfg}, indent=1))
    metrics = run_pipeline(ds, cfg["stage1"], cfg, out_dir)
    inputs = {k: {"path": str(Path(p).resolve()), "sha256": _hash_file(p)}
              for k, p in (("routing", routing), ("links", links), ("truth", truth)) if p}
    manifest = {"inputs": inputs, "seed": cfg["seed"], "config": cfg,
                "config_hash": config_hash(cfg), "versions": _versions(),
                "out_dir": str(out_dir.resolve()), "metrics": metrics}
    with open(out_dir / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=1)
    if metrics:
        print(json.dumps(metrics, indent=1))
    return EXIT_OK


def _cmd_study(args):
    cfg = simstudy.load_config(args.config) if args.config else simstudy.StudyConfig()
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if args.particles is not None:
        cfg = replace(cfg, filter=replace(cfg.filter, n_particles=args.particles))
    if args.command == "relerr":
        res = simstudy.run_relerr_experiment(cfg.topologies, args.reps or cfg.reps, args.T or cfg.T, cfg)
        summary = {k: {"mean": float(np.mean(v)), "sd": float(np.std(v, ddof=1)) if len(v) > 1 else 0.0}
                   for k, v in simstudy.relative_errors(res).items()}
    else:
        pool = simstudy.read_pool_csv(args.pool)
        res = simstudy.run_star_benchmark(pool, tuple(args.node_counts), args.reps or 10, cfg)
        summary = {"rows": len(res.rows)}
    out = Path(args.out_dir or ".")
    out.mkdir(parents=True, exist_ok=True)
    simstudy.write_results_csv(res, out / f"{args.command}.csv", out / f"{args.command}_config.json")
    print(json.dumps({"failures": res.failures, "elapsed": res.elapsed, "summary": summary}, indent=1))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="nettomo", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    ing = sub.add_parser("ingest", help="validate counter, routing and truth CSVs")
    ing.add_argument("--routing", required=True)
    ing.add_argument("--links", required=True)
    ing.add_argument("--truth")
    ing.add_argument("--strict", action="store_true", help="fail when truth misses the counters")
    ing.set_defaults(func=_cmd_ingest)

    run = sub.add_parser("run", help="two-stage pipeline: calibrate priors, then filter")
    run.add_argument("--routing")
    run.add_argument("--links")
    run.add_argument("--truth")
    run.add_argument("--stage1", choices=("ssm", "gravity", "naive"), default="ssm")
    run.add_argument("--particles", type=int, default=1000)
    run.add_argument("--move-iters", type=int, default=10)
    run.add_argument("--rda-steps", type=int, default=50)
    run.add_argument("--window", type=int, default=23)
    run.add_argument("--rho", type=float, default=0.9, help="autocorrelation of log intensities")
    run.add_argument("--tau", type=float, default=2.0)
    run.add_argument("--alpha", type=float, default=None, help="Gamma shape; default n/2")
    run.add_argument("--ssm-rho", type=float, default=0.1)
    run.add_argument("--ssm-sigma2", type=float, default=0.01)
    run.add_argument("--median-window", type=int, default=5)
    run.add_argument("--seed", type=int, default=0)
    run.add_argument("--dump-particles", action="store_true")
    run.add_argument("--out-dir")
    run.add_argument("--from-manifest", help="re-run the configuration stored in a manifest")
    run.set_defaults(func=_cmd_run)

    for name, hlp in (("relerr", "naive vs two-stage on simulated data"),
                      ("bench", "star benchmark on a pool of OD series")):
        s = sub.add_parser(name, help=hlp)
        s.add_argument("--config", help="JSON study configuration")
        s.add_argument("--reps", type=int)
        s.add_argument("--seed", type=int)
        s.add_argument("--particles", type=int)
        s.add_argument("--out-dir")
        if name == "relerr":
            s.add_argument("--T", type=int)
        else:
            s.add_argument("--pool", required=True, help="CSV of OD series, one column per route")
            s.add_argument("--node-counts", type=int, nargs="+", default=[3, 4, 5, 9])
        s.set_defaults(func=_cmd_study)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except NUMERICAL_ERRORS as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except VALIDATION_ERRORS as exc:
        print(f"validation failure: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
