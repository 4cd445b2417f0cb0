"""Report figures and gnuplot-style data files."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from matplotlib.figure import Figure

from .grid import Grid, evaluate_bisquare


def write_dat(path, columns: dict) -> None:
    """Whitespace-separated columns with a ``#`` header line."""
    names = list(columns)
    data = np.column_stack([np.asarray(columns[k], float) for k in names])
    np.savetxt(path, data, header=" ".join(names), comments="# ", fmt="%.10g")


def _save(fig: Figure, path) -> Path:
    path = Path(path)
    fig.savefig(path, dpi=120, bbox_inches="tight")
    return path


def plot_scan(scan: dict, path, mark=None) -> Path:
    """Minimum eigenvalue and profile sum of squares against sigma^2."""
    fig = Figure(figsize=(9, 3.6))
    ax1, ax2 = fig.subplots(1, 2)
    ax1.plot(scan["sigma2"], scan["lambda_min"], lw=1.2)
    ax1.axhline(0.0, color="0.6", lw=0.8)
    ax1.set_xlabel(r"$\sigma^2$")
    ax1.set_ylabel(r"$\lambda_{min}$ of $\hat K(\sigma^2)$")
    ax2.plot(scan["sigma2"], scan["sse"], lw=1.2)
    ax2.set_xlabel(r"$\sigma^2$")
    ax2.set_ylabel("sum of squares")
    mark = scan.get("largest_feasible") if mark is None else mark
    if mark is not None and np.isfinite(mark):
        for ax in (ax1, ax2):
            ax.axvline(mark, color="k", ls="--", lw=0.8)
    fig.tight_layout()
    return _save(fig, path)


def plot_trace(trace, path) -> Path:
    """Per-iteration sigma^2, lambda_min, negative-eigenvalue count and SSE."""
    g = [t.g for t in trace]
    panels = [
        ([t.sigma2 for t in trace], r"$\hat\sigma^2_g$"),
        ([t.lambda_min for t in trace], r"$\lambda_{min,g}$"),
        ([t.neg_eigs for t in trace], "negative eigenvalues"),
        ([t.sse for t in trace], "sum of squares"),
    ]
    fig = Figure(figsize=(8, 6))
    axes = fig.subplots(2, 2).ravel()
    for ax, (y, label) in zip(axes, panels):
        ax.plot(g, y, "o-", ms=3, lw=1)
        ax.set_xlabel("iteration g")
        ax.set_ylabel(label)
    fig.tight_layout()
    return _save(fig, path)


def plot_basis(resolutions, grid: Grid, path) -> Path:
    """Each resolution's bisquares over the grid, one panel per resolution."""
    fig = Figure(figsize=(4 * len(resolutions), 3.8))
    axes = np.atleast_1d(fig.subplots(1, len(resolutions)))
    for k, (ax, res) in enumerate(zip(axes, resolutions)):
        Z = evaluate_bisquare([res], grid.locations)
        peak = np.asarray(Z.max(axis=1).todense()).ravel()
        sc = ax.scatter(*grid.locations.T, c=peak, s=4, marker="s", cmap="viridis", vmin=0, vmax=1)
        ax.plot(*res.centers.T, "r+", ms=6)
        ax.set_title(f"resolution {k + 1}: {res.size} functions")
        ax.set_aspect("equal")
    fig.colorbar(sc, ax=list(axes), shrink=0.8)
    return _save(fig, path)


def plot_raster(grid: Grid, filled, path) -> Path:
    """Observed field with gaps beside the gap-filled field."""
    if grid.shape is None:
        raise ValueError("grid carries no raster shape")
    nrows, ncols = grid.shape
    observed = np.where(grid.mask, grid.values, np.nan).reshape(nrows, ncols)
    filled = np.asarray(filled, float).reshape(nrows, ncols)
    lo, hi = np.nanmin(filled), np.nanmax(filled)
    fig = Figure(figsize=(10, 4.2))
    axes = fig.subplots(1, 2)
    for ax, img, title in zip(axes, (observed, filled), ("observed", "filled")):
        im = ax.imshow(img, origin="lower", vmin=lo, vmax=hi, cmap="viridis")
        ax.set_title(title)
    fig.colorbar(im, ax=list(axes), shrink=0.8)
    return _save(fig, path)


def plot_cv(reports, path) -> Path:
    """Mean holdout MSPE (with one std) per method and holdout fraction."""
    fig = Figure(figsize=(6, 4))
    ax = fig.subplots()
    for method in dict.fromkeys(r.method for r in reports):
        rows = sorted((r for r in reports if r.method == method), key=lambda r: r.fraction)
        ax.errorbar([r.fraction for r in rows], [r.mean_mspe for r in rows],
                    yerr=[r.std_mspe for r in rows], marker="o", capsize=3, label=method)
    ax.set_xlabel("holdout fraction")
    ax.set_ylabel("mean MSPE")
    ax.legend()
    return _save(fig, path)
