"""Spatial grids and multiresolution bisquare basis functions."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy.spatial import cKDTree

# Support radius of each bisquare relative to the spacing of its lattice.
APERTURE_FACTOR = 1.5


@dataclass(frozen=True)
class Grid:
    """Ordered set of planar locations with optional observations.

    ``mask[i]`` is True where ``values[i]`` is observed. ``values`` may be
    None for a prediction-only grid, in which case every mask entry is False.
    """

    locations: np.ndarray
    values: np.ndarray | None = None
    mask: np.ndarray | None = None
    shape: tuple[int, int] | None = None  # (nrows, ncols) for raster grids

    def __post_init__(self):
        locs = np.asarray(self.locations, dtype=float)
        if locs.ndim != 2 or locs.shape[1] != 2:
            raise ValueError("locations must be an (n, 2) array")
        if not np.all(np.isfinite(locs)):
            raise ValueError("locations must be finite")
        if len(np.unique(locs, axis=0)) != len(locs):
            raise ValueError("duplicate locations")
        object.__setattr__(self, "locations", locs)

        if self.values is None:
            mask = np.zeros(len(locs), bool) if self.mask is None else np.asarray(self.mask, bool)
            if mask.any():
                raise ValueError("mask marks observations but no values were given")
            object.__setattr__(self, "mask", mask)
            return

        vals = np.asarray(self.values, dtype=float)
        if vals.shape != (len(locs),):
            raise ValueError("values length must match locations")
        mask = np.isfinite(vals) if self.mask is None else np.asarray(self.mask, bool)
        if mask.shape != (len(locs),):
            raise ValueError("mask length must match locations")
        if not np.all(np.isfinite(vals[mask])):
            raise ValueError("values must be finite wherever mask is True")
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "mask", mask)

    @property
    def n(self) -> int:
        return len(self.locations)

    @property
    def n_observed(self) -> int:
        return int(self.mask.sum())

    @property
    def observed_locations(self) -> np.ndarray:
        return self.locations[self.mask]

    @property
    def observed_values(self) -> np.ndarray:
        return self.values[self.mask]

    def bbox(self) -> tuple[np.ndarray, np.ndarray]:
        if self.n == 0:
            raise ValueError("empty grid")
        return self.locations.min(axis=0), self.locations.max(axis=0)

    def subset(self, index) -> "Grid":
        """Grid restricted to ``index`` (boolean mask or integer indices)."""
        vals = None if self.values is None else self.values[index]
        return Grid(self.locations[index], vals, self.mask[index])

    def with_mask(self, mask) -> "Grid":
        """Same locations and values with observation mask ``mask``."""
        return Grid(self.locations, self.values, np.asarray(mask, bool) & self.mask, self.shape)


def regular_grid(nrows: int, ncols: int, spacing: float = 1.0, origin=(0.0, 0.0)) -> Grid:
    """Row-major lattice of ``nrows * ncols`` locations, no values."""
    x = origin[0] + spacing * np.arange(ncols)
    y = origin[1] + spacing * np.arange(nrows)
    xx, yy = np.meshgrid(x, y)
    return Grid(np.column_stack([xx.ravel(), yy.ravel()]), shape=(nrows, ncols))


@dataclass(frozen=True)
class Resolution:
    """Centers and common aperture of the bisquares at one scale."""

    centers: np.ndarray
    aperture: float

    def __post_init__(self):
        c = np.atleast_2d(np.asarray(self.centers, dtype=float))
        if len(c) == 0:
            raise ValueError("a resolution needs at least one center")
        if not self.aperture > 0:
            raise ValueError("aperture must be positive")
        if len(np.unique(c, axis=0)) != len(c):
            raise ValueError("centers must be distinct")
        object.__setattr__(self, "centers", c)

    @property
    def size(self) -> int:
        return len(self.centers)


@dataclass(frozen=True)
class BasisSet:
    """Resolutions (coarse to fine) and the sparse basis matrix at ``points``."""

    resolutions: tuple[Resolution, ...]
    evaluation: sp.csr_matrix = field(repr=False)

    @property
    def r(self) -> int:
        return sum(res.size for res in self.resolutions)

    @classmethod
    def build(cls, resolutions, points) -> "BasisSet":
        resolutions = tuple(resolutions)
        return cls(resolutions, evaluate_bisquare(resolutions, points))


def near_square_layout(count: int) -> tuple[int, int]:
    """Factor ``count`` as ``rows * cols`` with the pair closest to square.

    Returns ``(rows, cols)`` with ``rows <= cols``.
    """
    if count < 1:
        raise ValueError("count must be a positive integer")
    rows = int(math.isqrt(count))
    while count % rows:
        rows -= 1
    return rows, count // rows


def lattice_centers(lo, hi, count: int) -> tuple[np.ndarray, float]:
    """Cell midpoints of a ``count``-cell lattice over the box ``[lo, hi]``.

    The longer side of the box receives the larger factor. Returns the
    row-major centers and the shortest cell side (the neighbor spacing).
    """
    lo = np.asarray(lo, float)
    hi = np.asarray(hi, float)
    rows, cols = near_square_layout(count)
    width, height = hi - lo
    if height > width:
        rows, cols = cols, rows
    dx = width / cols
    dy = height / rows
    xs = lo[0] + (np.arange(cols) + 0.5) * dx
    ys = lo[1] + (np.arange(rows) + 0.5) * dy
    xx, yy = np.meshgrid(xs, ys)
    centers = np.column_stack([xx.ravel(), yy.ravel()])

    # a one-cell axis has no neighbor along it
    steps = [s for s, k in ((dx, cols), (dy, rows)) if k > 1 and s > 0]
    if not steps:
        steps = [s for s in (dx, dy) if s > 0] or [1.0]
    return centers, float(min(steps))


def build_multires_centroids(grid: Grid, counts_per_resolution) -> list[Resolution]:
    """One lattice of bisquare centers per requested count, coarse to fine."""
    if grid.n == 0:
        raise ValueError("empty grid")
    counts = list(counts_per_resolution)
    if not counts or any(int(c) != c or c < 1 for c in counts):
        raise ValueError("counts must be positive integers")
    lo, hi = grid.bbox()
    out = []
    for count in counts:
        centers, spacing = lattice_centers(lo, hi, int(count))
        out.append(Resolution(centers, APERTURE_FACTOR * spacing))
    return out


def evaluate_bisquare(basis, points) -> sp.csr_matrix:
    """Sparse ``len(points) x r`` matrix of bisquare values.

    Entry ``(i, j)`` is ``(1 - (d/a)^2)^2`` for distance ``d < a`` between
    point ``i`` and center ``j`` with aperture ``a``, and zero otherwise.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    tree = cKDTree(pts)
    rows, cols, vals = [], [], []
    offset = 0
    for res in basis:
        pairs = tree.sparse_distance_matrix(cKDTree(res.centers), res.aperture, output_type="ndarray")
        keep = pairs["v"] < res.aperture
        d = pairs["v"][keep] / res.aperture
        rows.append(pairs["i"][keep])
        cols.append(pairs["j"][keep] + offset)
        vals.append((1.0 - d * d) ** 2)
        offset += res.size
    Z = sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(len(pts), offset),
    )
    return Z.tocsr()


# -- file formats -----------------------------------------------------------

def _parse_value(text: str) -> float:
    text = text.strip()
    if not text or text.lower() == "nan":
        return math.nan
    return float(text)


def read_grid_csv(path) -> Grid:
    """Read ``x,y,value`` rows; an empty or NaN value is a missing observation."""
    xs, ys, vals = [], [], []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            xs.append(float(row["x"]))
            ys.append(float(row["y"]))
            vals.append(_parse_value(row.get("value", "")))
    return Grid(np.column_stack([xs, ys]) if xs else np.empty((0, 2)), np.array(vals))


def write_grid_csv(path, grid: Grid) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "y", "value"])
        vals = grid.values if grid.values is not None else np.full(grid.n, np.nan)
        for (x, y), v, m in zip(grid.locations, vals, grid.mask):
            w.writerow([repr(float(x)), repr(float(y)), repr(float(v)) if m else "NaN"])


RASTER_HEADER = ("ncols", "nrows", "x0", "y0", "dx", "dy")


def read_raster(path) -> Grid:
    """Read a row-major raster.

    Text form: a header line ``ncols,nrows,x0,y0,dx,dy``, a line of their
    values, then ``nrows`` lines of ``ncols`` comma-separated cell values
    (empty or NaN for missing). Binary form (``.npz``) stores the six header
    fields as scalars plus a ``values`` array of length ``nrows * ncols``.
    """
    path = Path(path)
    if path.suffix == ".npz":
        with np.load(path) as z:
            hdr = {k: z[k].item() for k in RASTER_HEADER}
            values = np.asarray(z["values"], float).ravel()
    else:
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            names = [h.strip() for h in next(reader)]
            if tuple(names) != RASTER_HEADER:
                raise ValueError(f"raster header must be {','.join(RASTER_HEADER)}")
            hdr = dict(zip(names, (float(v) for v in next(reader))))
            values = np.array([_parse_value(v) for line in reader if line for v in line])
    ncols, nrows = int(hdr["ncols"]), int(hdr["nrows"])
    if values.size != ncols * nrows:
        raise ValueError("raster cell count does not match header")
    x = hdr["x0"] + hdr["dx"] * np.arange(ncols)
    y = hdr["y0"] + hdr["dy"] * np.arange(nrows)
    xx, yy = np.meshgrid(x, y)
    return Grid(np.column_stack([xx.ravel(), yy.ravel()]), values, shape=(nrows, ncols))


def raster_header(grid: Grid) -> dict:
    if grid.shape is None:
        raise ValueError("grid carries no raster shape")
    nrows, ncols = grid.shape
    locs = grid.locations.reshape(nrows, ncols, 2)
    dx = locs[0, 1, 0] - locs[0, 0, 0] if ncols > 1 else 1.0
    dy = locs[1, 0, 1] - locs[0, 0, 1] if nrows > 1 else 1.0
    return dict(ncols=ncols, nrows=nrows, x0=locs[0, 0, 0], y0=locs[0, 0, 1], dx=dx, dy=dy)


def write_raster(path, grid: Grid, values=None) -> None:
    """Write ``values`` (default: the grid's observed values) in raster form."""
    path = Path(path)
    hdr = raster_header(grid)
    if values is None:
        values = np.where(grid.mask, grid.values if grid.values is not None else np.nan, np.nan)
    values = np.asarray(values, float).ravel()
    if path.suffix == ".npz":
        np.savez(path, values=values, **hdr)
        return
    nrows, ncols = grid.shape
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(RASTER_HEADER)
        w.writerow([repr(float(hdr[k])) if k in ("x0", "y0", "dx", "dy") else hdr[k] for k in RASTER_HEADER])
        for row in values.reshape(nrows, ncols):
            w.writerow(["NaN" if not np.isfinite(v) else repr(float(v)) for v in row])


def read_variances_csv(path, grid: Grid) -> np.ndarray:
    """Per-location measurement variances ``x,y,v`` aligned to ``grid``."""
    lookup = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            lookup[(float(row["x"]), float(row["y"]))] = float(row["v"])
    try:
        v = np.array([lookup[(float(x), float(y))] for x, y in grid.locations])
    except KeyError as exc:
        raise ValueError(f"no variance given for location {exc.args[0]}") from None
    if np.any(v < 0):
        raise ValueError("variances must be nonnegative")
    return v
