"""Intensity functions, Cox pattern simulation, likelihood, node counts.

The point process is simulated exactly under the piecewise-constant raster:
cell counts are independent Poisson(rate * cell volume) and locations are
uniform within their cell, so the total is Poisson of the integrated rate and
locations are conditionally i.i.d. proportional to the raster.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass

import numpy as np

from .covariates import CovariateField, _seed_repr, _seed_seq
from .geometry import Grid, NodeIndex, PartitionTree


class IntensityError(ValueError):
    pass


# ---------------------------------------------------------------------------
# intensity functions over the covariate space


class IntensityFn:
    """Nonnegative function of the covariate value; subclasses implement
    evaluate() on an (m, d) array of covariate points."""

    def evaluate(self, Z: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def __call__(self, Z) -> np.ndarray:
        Z = np.asarray(Z, dtype=float)
        if Z.ndim == 1:
            Z = Z[:, None]
        out = np.asarray(self.evaluate(Z), dtype=float)
        if out.shape != (Z.shape[0],):
            raise IntensityError("intensity must return one value per point")
        return out


@dataclass(frozen=True)
class AnalyticIntensity(IntensityFn):
    """Closed-form test intensities, evaluated on the first covariate axis."""

    name: str
    params: tuple = ()

    NAMES = ("constant", "linear", "abs-kink", "cosine", "step")

    def __post_init__(self):
        if self.name not in self.NAMES:
            raise IntensityError(f"unknown analytic intensity {self.name!r}")

    def evaluate(self, Z: np.ndarray) -> np.ndarray:
        z = Z[:, 0]
        p = self.params
        if self.name == "constant":
            return np.full(len(z), p[0])
        if self.name == "linear":
            return p[0] + p[1] * z
        if self.name == "abs-kink":
            return p[0] + p[1] * np.abs(z - p[2])
        if self.name == "cosine":
            return p[0] + p[1] * np.cos(2.0 * np.pi * p[2] * z)
        # step: value p[0] below the threshold p[2], p[1] at or above it
        return np.where(z < p[2], p[0], p[1])

    def descriptor(self) -> dict:
        return {"kind": "analytic", "name": self.name, "params": list(self.params)}


def analytic_from_descriptor(d: dict) -> AnalyticIntensity:
    return AnalyticIntensity(name=d["name"], params=tuple(d["params"]))


# ---------------------------------------------------------------------------
# patterns


@dataclass(frozen=True)
class PointPattern:
    points: np.ndarray          # (k, D) coordinates inside the window
    cell_counts: np.ndarray     # per grid cell, sums to len(points)
    grid: Grid
    seed: object = None

    def __post_init__(self):
        if int(self.cell_counts.sum()) != len(self.points):
            raise IntensityError("cell counts must sum to the point total")

    @property
    def total(self) -> int:
        return len(self.points)


@dataclass(frozen=True)
class NodeCounts:
    """N_eps: points whose covariate value lies in B_eps, one array per level."""

    tree: PartitionTree
    level_counts: list

    def count(self, node: NodeIndex) -> int:
        return int(self.level_counts[node.level][node.code])

    @property
    def total(self) -> int:
        return int(self.level_counts[0][0])


def intensity_raster(rho: IntensityFn, covariate: CovariateField) -> np.ndarray:
    lam = rho(covariate.values)
    if np.any(lam < 0) or not np.all(np.isfinite(lam)):
        raise IntensityError("intensity raster must be finite and nonnegative")
    return lam


def sample_cox(raster: np.ndarray, grid: Grid, seed) -> PointPattern:
    raster = np.asarray(raster, dtype=float)
    if raster.shape != (grid.total_cells,):
        raise IntensityError("raster shape must match the grid")
    if np.any(raster < 0):
        raise IntensityError("raster must be nonnegative")
    rng = np.random.default_rng(_seed_seq(seed))
    counts = rng.poisson(raster * grid.cell_volume)
    total = int(counts.sum())
    D = grid.window.dim_D
    if total == 0:
        points = np.empty((0, D))
    else:
        cells = np.repeat(np.arange(grid.total_cells), counts)
        # unravel the flat cell index into per-axis integer coordinates
        m = grid.cells_per_axis
        coords = np.empty((total, D), dtype=np.int64)
        rem = cells
        for a in range(D - 1, -1, -1):
            coords[:, a] = rem % m
            rem = rem // m
        u = rng.uniform(size=(total, D))
        points = -grid.window.half_side + (coords + u) * grid.spacing
    return PointPattern(points=points, cell_counts=counts, grid=grid,
                        seed=_seed_repr(seed))


@dataclass(frozen=True)
class LogLik:
    value: float
    n_zero_intensity_points: int = 0

    def __float__(self) -> float:
        return self.value


def log_likelihood(rho: IntensityFn, covariate: CovariateField,
                   pattern: PointPattern) -> LogLik:
    """sum_i log rho(Z(x_i)) - sum_cells rho(Z(cell)) * cell volume.

    Points sitting in zero-intensity cells give -inf, flagged in the result,
    which keeps Metropolis rejections well defined.
    """
    lam = intensity_raster(rho, covariate)
    counts = pattern.cell_counts
    integral = float(lam.sum() * covariate.grid.cell_volume)
    occupied = counts > 0
    zeros = int(counts[occupied & (lam == 0.0)].sum())
    if zeros > 0:
        return LogLik(value=-np.inf, n_zero_intensity_points=zeros)
    point_term = float(np.dot(counts[occupied], np.log(lam[occupied])))
    return LogLik(value=point_term - integral)


def bin_counts(pattern: PointPattern, covariate: CovariateField,
               tree: PartitionTree) -> NodeCounts:
    if pattern.grid is not covariate.grid and pattern.grid != covariate.grid:
        raise IntensityError("pattern and covariate field must share the grid")
    codes = tree.leaf_codes(covariate.values)
    leaf = np.bincount(codes, weights=pattern.cell_counts,
                       minlength=2 ** tree.max_level).astype(np.int64)
    levels = [leaf]
    for _ in range(tree.max_level):
        levels.append(levels[-1].reshape(-1, 2).sum(axis=1))
    levels.reverse()
    return NodeCounts(tree=tree, level_counts=levels)


# ---------------------------------------------------------------------------
# persistence: CSV of coordinates plus a JSON sidecar


def save_pattern(pattern: PointPattern, path_prefix, metadata: dict | None = None):
    D = pattern.grid.window.dim_D
    with open(f"{path_prefix}.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"x{a}" for a in range(D)])
        for row in pattern.points:
            writer.writerow([f"{v:.17g}" for v in row])
    meta = {
        "seed": pattern.seed,
        "total": pattern.total,
        "dim_D": D,
        "volume_n": pattern.grid.window.volume_n,
        "cells_per_axis": pattern.grid.cells_per_axis,
    }
    if metadata:
        meta.update(metadata)
    with open(f"{path_prefix}.json", "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)


def load_pattern(path_prefix) -> PointPattern:
    from .geometry import Window

    with open(f"{path_prefix}.json") as fh:
        meta = json.load(fh)
    grid = Grid(window=Window(dim_D=meta["dim_D"], volume_n=meta["volume_n"]),
                cells_per_axis=meta["cells_per_axis"])
    rows = []
    with open(f"{path_prefix}.csv", newline="") as fh:
        reader = csv.reader(fh)
        next(reader)
        for row in reader:
            rows.append([float(v) for v in row])
    points = np.asarray(rows, dtype=float) if rows else np.empty(
        (0, meta["dim_D"]))
    counts = np.zeros(grid.total_cells, dtype=np.int64)
    if len(points):
        counts = np.bincount(grid.cell_index_of(points),
                             minlength=grid.total_cells)
    return PointPattern(points=points, cell_counts=counts, grid=grid,
                        seed=meta.get("seed"))
