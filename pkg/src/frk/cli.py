"""Command-line driver: ``frk {simulate,fit,predict,cv,scan}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import yaml

from . import plotting
from .binning import TrendDesign, binned_moments, detrend_ols, make_bins, write_bin_diagnostics
from .estimation import CovParams, fit_frk_params, write_trace_csv
from .grid import (
    BasisSet,
    Grid,
    Resolution,
    build_multires_centroids,
    evaluate_bisquare,
    read_grid_csv,
    read_raster,
    read_variances_csv,
    write_grid_csv,
    write_raster,
)
from .harness import (
    SimSpec,
    cross_validate,
    frk_method,
    ols_method,
    sigma2_scan,
    simulate_gp,
    write_cv_csv,
    write_scan_csv,
)
from .predictor import FittedModel, fill_raster, predict, write_predictions_csv

log = logging.getLogger("frk")

DEFAULTS = {
    "seed": 0,
    "simulation": {
        "nrows": 60, "ncols": 60, "spacing": 1.0,
        "partial_sill": 5.5, "range": 1.0, "nugget": 1.375, "beta": [0.0, 0.0, 0.0],
    },
    "model": {
        "basis": [4, 25], "bins": 100, "trend": "linear",
        "weighted": False, "max_iter": 100, "pd_tol": 1e-10,
    },
    "cv": {"fractions": [0.15, 0.25, 0.5], "reps": 50},
    "scan": {"n_points": 1500},
}


def _merge(base: dict, extra: dict) -> dict:
    out = dict(base)
    for k, v in (extra or {}).items():
        out[k] = _merge(base[k], v) if isinstance(v, dict) and isinstance(base.get(k), dict) else v
    return out


def load_config(args) -> dict:
    cfg = DEFAULTS
    if args.config:
        with open(args.config) as fh:
            cfg = _merge(cfg, yaml.safe_load(fh) or {})
    overrides = {
        "seed": args.seed,
        "model": {
            "basis": args.basis, "bins": args.bins, "trend": args.trend,
            "weighted": args.weighted or None, "max_iter": args.max_iter, "pd_tol": args.pd_tol,
        },
        "cv": {"fractions": getattr(args, "fraction", None), "reps": getattr(args, "reps", None)},
        "scan": {"n_points": getattr(args, "n_points", None)},
    }
    return _merge(cfg, _drop_none(overrides))


def _drop_none(d: dict) -> dict:
    return {k: _drop_none(v) if isinstance(v, dict) else v for k, v in d.items() if v is not None}


def _int_list(text: str) -> list[int]:
    return [int(t) for t in text.split(",") if t.strip()]


def _float_list(text: str) -> list[float]:
    return [float(t) for t in text.split(",") if t.strip()]


def load_data(args, cfg) -> Grid:
    """Grid from ``--data`` (CSV or raster) or a simulation from the config."""
    if args.data:
        path = Path(args.data)
        if path.suffix == ".npz" or path.name.endswith(".raster.csv"):
            return read_raster(path)
        return read_grid_csv(path)
    sim = dict(cfg["simulation"])
    sim["beta"] = tuple(sim["beta"])
    log.info("no --data given; simulating from the configuration")
    return simulate_gp(SimSpec(seed=cfg["seed"], **sim))


def _outdir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _summary(grid: Grid, model_cfg: dict, V=None):
    design = TrendDesign.from_kind(model_cfg["trend"], grid.locations)
    _, D = detrend_ols(grid, design)
    resolutions = build_multires_centroids(grid, model_cfg["basis"])
    Z = evaluate_bisquare(resolutions, grid.locations)
    scheme = make_bins(grid, model_cfg["bins"], Z.shape[1])
    summary = binned_moments(D, scheme, Z, V)
    if model_cfg["weighted"]:
        summary = summary.with_weights()
    return design, resolutions, Z, summary


def _fit(grid: Grid, cfg: dict, V=None):
    mc = cfg["model"]
    design, resolutions, Z, summary = _summary(grid, mc, V)
    params = fit_frk_params(summary, weighted=mc["weighted"], max_iter=mc["max_iter"], pd_tol=mc["pd_tol"])
    return _model(grid, design, resolutions, Z, params, V), summary


def _model(grid, design, resolutions, Z, params, V=None) -> FittedModel:
    obs = grid.mask
    v = np.ones(grid.n) if V is None else np.asarray(V, float)
    return FittedModel.build(
        params, BasisSet(tuple(resolutions), Z[obs]), TrendDesign(design.X[obs], design.kind),
        grid.values[obs], v[obs],
    )


def save_params(path, model: FittedModel) -> None:
    res = model.basis.resolutions
    np.savez(
        path,
        sigma2=model.sigma2,
        K=model.K,
        beta_gls=model.beta_gls,
        trend=model.design.kind,
        apertures=np.array([r.aperture for r in res]),
        sizes=np.array([r.size for r in res]),
        centers=np.vstack([r.centers for r in res]),
        iterations=model.params.iterations,
        sigma2_unconstrained=model.params.sigma2_unconstrained,
    )


def load_params(path, grid: Grid, V=None) -> FittedModel:
    with np.load(path) as z:
        bounds = np.cumsum(np.r_[0, z["sizes"]])
        resolutions = [Resolution(z["centers"][a:b], float(ap)) for a, b, ap in zip(bounds[:-1], bounds[1:], z["apertures"])]
        K = z["K"]
        lam = np.linalg.eigvalsh(K)
        params = CovParams(float(z["sigma2"]), K, float(lam[0]), int(z["iterations"]), (),
                           float(z["sigma2_unconstrained"]))
        trend = str(z["trend"])
    design = TrendDesign.from_kind(trend, grid.locations)
    Z = evaluate_bisquare(resolutions, grid.locations)
    return _model(grid, design, resolutions, Z, params, V)


# -- subcommands ------------------------------------------------------------

def cmd_simulate(args, cfg):
    out = _outdir(args)
    grid = load_data(argparse.Namespace(data=None), cfg)
    if args.missing:
        rng = np.random.default_rng(cfg["seed"] + 1)
        grid = grid.with_mask(rng.random(grid.n) >= args.missing)
    write_grid_csv(out / "field.csv", grid)
    write_raster(out / "field.raster.csv", grid)
    print(f"wrote {grid.n} locations ({grid.n_observed} observed) to {out}")


def _variances(args, grid):
    return read_variances_csv(args.variances, grid) if args.variances else None


def cmd_fit(args, cfg):
    out = _outdir(args)
    grid = load_data(args, cfg)
    V = _variances(args, grid)
    model, summary = _fit(grid, cfg, V)
    p = model.params
    write_trace_csv(out / "fit_trace.csv", p)
    plotting.write_dat(out / "fit_trace.dat", {
        "g": [t.g for t in p.trace], "sigma2": [t.sigma2 for t in p.trace],
        "lambda_min": [t.lambda_min for t in p.trace], "neg_eigs": [t.neg_eigs for t in p.trace],
        "sse": [t.sse for t in p.trace],
    })
    plotting.plot_trace(p.trace, out / "fit_trace.png")
    write_bin_diagnostics(out / "bins.csv", summary)
    save_params(out / "params.npz", model)
    report = {
        "n_observed": grid.n_observed, "r": p.r, "M": summary.M, "weighted": p.weighted,
        "sigma2": p.sigma2, "sigma2_unconstrained": p.sigma2_unconstrained,
        "lambda_min": p.lambda_min, "iterations": p.iterations,
        "beta_gls": model.beta_gls.tolist(),
    }
    (out / "fit.json").write_text(json.dumps(report, indent=2))
    print(json.dumps(report, indent=2))


def cmd_predict(args, cfg):
    out = _outdir(args)
    grid = load_data(args, cfg)
    V = _variances(args, grid)
    model = load_params(args.params, grid, V) if args.params else _fit(grid, cfg, V)[0]
    if args.points:
        pts = np.loadtxt(args.points, delimiter=",", skiprows=1, usecols=(0, 1), ndmin=2)
    else:
        pts = grid.locations[~grid.mask]
    Hhat, mspe = predict(model, pts)
    write_predictions_csv(out / "predictions.csv", pts, Hhat, mspe)
    print(f"wrote {len(pts)} predictions to {out / 'predictions.csv'}")
    if grid.shape is not None and not args.points:
        filled, _ = fill_raster(model, grid)
        write_raster(out / "filled.raster.csv", grid, filled)
        plotting.plot_raster(grid, filled, out / "filled.png")


def cmd_cv(args, cfg):
    out = _outdir(args)
    grid = load_data(args, cfg)
    mc = cfg["model"]
    methods = {
        "OLS": ols_method(mc["trend"]),
        "FRK": frk_method(mc["basis"], mc["bins"], mc["trend"], mc["weighted"], mc["max_iter"], mc["pd_tol"]),
    }
    reports = []
    for fraction in cfg["cv"]["fractions"]:
        reports += cross_validate(grid, methods, fraction, cfg["cv"]["reps"], cfg["seed"])
    write_cv_csv(out / "cv.csv", reports)
    plotting.plot_cv(reports, out / "cv.png")
    for r in reports:
        print(f"{r.method:4s} {r.fraction:.2f}  MSPE {r.mean_mspe:.4f} ({r.std_mspe:.2e})  reps {r.reps}  failed {r.failed}")


def cmd_scan(args, cfg):
    out = _outdir(args)
    grid = load_data(args, cfg)
    mc = cfg["model"]
    _, resolutions, _, summary = _summary(grid, mc, _variances(args, grid))
    scan = sigma2_scan(summary, cfg["scan"]["n_points"], weighted=mc["weighted"])
    params = fit_frk_params(summary, weighted=mc["weighted"], max_iter=mc["max_iter"], pd_tol=mc["pd_tol"])
    write_scan_csv(out / "scan.csv", scan)
    plotting.write_dat(out / "scan.dat", {k: scan[k] for k in ("sigma2", "lambda_min", "sse")})
    plotting.plot_scan(scan, out / "scan.png")
    plotting.plot_basis(resolutions, grid, out / "basis.png")
    print(f"unconstrained sigma2 {scan['unconstrained']:.4f}; largest feasible scanned {scan['largest_feasible']:.4f}; "
          f"iterative fit {params.sigma2:.4f} after {params.iterations} iterations")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML configuration file")
    common.add_argument("--data", help="grid CSV (x,y,value) or raster (.raster.csv / .npz); simulated if omitted")
    common.add_argument("--variances", help="per-location variance CSV (x,y,v)")
    common.add_argument("--seed", type=int)
    common.add_argument("--bins", type=int, help="number of bins M")
    common.add_argument("--basis", type=_int_list, help="basis counts per resolution, e.g. 16,64,225")
    common.add_argument("--trend", choices=["constant", "linear"])
    common.add_argument("--weighted", action="store_true", help="weight bins by their variability")
    common.add_argument("--max-iter", type=int)
    common.add_argument("--pd-tol", type=float)
    common.add_argument("--out", default="frk_out", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="frk", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("simulate", parents=[common], help="simulate an exponential-covariance field")
    p.add_argument("--missing", type=float, default=0.0, help="fraction of cells to mark missing")
    p.set_defaults(func=cmd_simulate)
    p = sub.add_parser("fit", parents=[common], help="estimate sigma2 and a positive-definite K")
    p.set_defaults(func=cmd_fit)
    p = sub.add_parser("predict", parents=[common], help="predict at missing cells or given points")
    p.add_argument("--params", help="params.npz written by fit (refit if omitted)")
    p.add_argument("--points", help="CSV of x,y prediction points")
    p.set_defaults(func=cmd_predict)
    p = sub.add_parser("cv", parents=[common], help="cross-validated MSPE of OLS and FRK")
    p.add_argument("--fraction", type=_float_list, help="holdout fraction(s), comma separated")
    p.add_argument("--reps", type=int)
    p.set_defaults(func=cmd_cv)
    p = sub.add_parser("scan", parents=[common], help="scan sigma2 against lambda_min and SSE")
    p.add_argument("--n-points", type=int)
    p.set_defaults(func=cmd_scan)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    cfg = load_config(args)
    args.func(args, cfg)
    return 0


if __name__ == "__main__":
    sys.exit(main())
