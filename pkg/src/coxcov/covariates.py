"""Stationary ergodic covariate fields on the window grid.

Two families: componentwise transforms of stationary centred Gaussian fields
(synthesised by circulant embedding with an exact Cholesky fallback), and
piecewise-constant fields from marked Poisson-Voronoi tessellations.  Fields
are sampled once per grid cell and treated as constant over the cell, which
turns every window integral downstream into an exact finite sum.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field, replace
from functools import lru_cache

import numpy as np
from scipy.spatial import cKDTree
from scipy.special import gamma as gamma_fn
from scipy.special import kv, ndtr

from .geometry import Grid, NodeIndex, PartitionTree

CHOLESKY_MAX_CELLS = 4096
EMBEDDING_NEG_TOL = 1e-10


class SynthesisError(RuntimeError):
    pass


class CovariateError(ValueError):
    pass


# ---------------------------------------------------------------------------
# covariance kernels


@dataclass(frozen=True)
class CovarianceKernel:
    """Stationary covariance with K(0)=1; family controls the tail."""

    family: str
    length_scale: float
    tail_exponent: float = 1.5   # only used by the matern family

    FAMILIES = ("squared-exponential", "exponential", "matern")

    def __post_init__(self):
        if self.family not in self.FAMILIES:
            raise CovariateError(f"unknown kernel family {self.family!r}")
        if not self.length_scale > 0:
            raise CovariateError("length_scale must be positive")
        if self.family == "matern" and not self.tail_exponent > 0:
            raise CovariateError("matern tail exponent must be positive")

    def __call__(self, r) -> np.ndarray:
        r = np.abs(np.asarray(r, dtype=float)) / self.length_scale
        if self.family == "squared-exponential":
            return np.exp(-0.5 * r**2)
        if self.family == "exponential":
            return np.exp(-r)
        nu = self.tail_exponent
        out = np.ones_like(r)
        pos = r > 0
        u = np.sqrt(2 * nu) * r[pos]
        out[pos] = (2 ** (1 - nu) / gamma_fn(nu)) * u**nu * kv(nu, u)
        return out

    def descriptor(self) -> dict:
        d = {"family": self.family, "length_scale": self.length_scale}
        if self.family == "matern":
            d["tail_exponent"] = self.tail_exponent
        return d

    @classmethod
    def from_descriptor(cls, d: dict) -> "CovarianceKernel":
        return cls(**d)


# ---------------------------------------------------------------------------
# field container


@dataclass(frozen=True)
class CovariateField:
    """Grid-sampled covariate realisation; values has shape (cells, d)."""

    grid: Grid
    dim_d: int
    values: np.ndarray
    generator: dict
    stationary_measure: dict
    retries: int = 0

    def __post_init__(self):
        v = self.values
        if v.ndim != 2 or v.shape != (self.grid.total_cells, self.dim_d):
            raise CovariateError("values must have shape (total_cells, dim_d)")

    @property
    def n(self) -> float:
        return self.grid.window.volume_n


@lru_cache(maxsize=32)
def _circulant_eigenvalues(grid: Grid, kernel: CovarianceKernel) -> np.ndarray:
    m = grid.cells_per_axis
    D = grid.window.dim_D
    size = 2 * m
    idx = np.arange(size)
    wrap = np.minimum(idx, size - idx) * grid.spacing
    if D == 1:
        dist = wrap
    else:
        mesh = np.meshgrid(*([wrap] * D), indexing="ij")
        dist = np.sqrt(sum(w**2 for w in mesh))
    cov = kernel(dist)
    eig = np.fft.fftn(cov).real
    return eig


def _sample_circulant(grid: Grid, kernel: CovarianceKernel,
                      rng: np.random.Generator) -> np.ndarray | None:
    """One stationary field on the grid, or None if the embedding fails."""
    eig = _circulant_eigenvalues(grid, kernel)
    neg = eig.min()
    if neg < -EMBEDDING_NEG_TOL * max(eig.max(), 1.0):
        return None
    eig = np.clip(eig, 0.0, None)
    total = eig.size
    a = rng.standard_normal(eig.shape)
    b = rng.standard_normal(eig.shape)
    # Re ifftn(sqrt(eig) * (a + ib)) is Gaussian with covariance C / T.
    z = np.fft.ifftn(np.sqrt(eig) * (a + 1j * b)).real * np.sqrt(total)
    # keep the first m points per axis
    m = grid.cells_per_axis
    sl = tuple([slice(0, m)] * grid.window.dim_D)
    return np.ascontiguousarray(z[sl]).ravel()


def _sample_cholesky(grid: Grid, kernel: CovarianceKernel,
                     rng: np.random.Generator) -> np.ndarray:
    centers = grid.cell_centers()
    diff = centers[:, None, :] - centers[None, :, :]
    cov = kernel(np.linalg.norm(diff, axis=-1))
    cov[np.diag_indices_from(cov)] += 1e-12
    chol = np.linalg.cholesky(cov)
    return chol @ rng.standard_normal(len(centers))


def sample_gaussian_field(grid: Grid, kernels, seed) -> CovariateField:
    """d independent unit-variance stationary Gaussian components per cell.

    Circulant embedding is used whenever the embedded covariance is
    nonnegative definite (up to a small clamp); otherwise an exact dense
    Cholesky is used for small grids.
    """
    if isinstance(kernels, CovarianceKernel):
        kernels = [kernels]
    d = len(kernels)
    rng = np.random.default_rng(_seed_seq(seed))
    cols = []
    for kern in kernels:
        z = _sample_circulant(grid, kern, rng)
        if z is None:
            if grid.total_cells <= CHOLESKY_MAX_CELLS:
                z = _sample_cholesky(grid, kern, rng)
            else:
                raise SynthesisError(
                    "circulant embedding of the covariance is not nonnegative "
                    f"definite on this grid and {grid.total_cells} cells is too "
                    "large for the Cholesky fallback; coarsen the grid or pick "
                    "a smoother-tailed kernel")
        cols.append(z)
    values = np.stack(cols, axis=-1)
    gen = {"kind": "gaussian", "transform": "identity",
           "kernels": [k.descriptor() for k in kernels], "seed": _seed_repr(seed)}
    return CovariateField(grid=grid, dim_d=d, values=values, generator=gen,
                          stationary_measure={"kind": "std-normal", "dim": d})


def transform_cdf(raw: CovariateField) -> CovariateField:
    """Componentwise standard-normal CDF map onto [0,1]^d; the stationary
    law becomes uniform on the cube."""
    gen = dict(raw.generator)
    gen["transform"] = "normal-cdf"
    return replace(raw, values=ndtr(raw.values), generator=gen,
                   stationary_measure={"kind": "uniform", "dim": raw.dim_d})


# ---------------------------------------------------------------------------
# Poisson-Voronoi tessellation fields


@dataclass(frozen=True)
class MarkLaw:
    """Cell-mark distribution: uniform on [0,1] or a finite discrete law."""

    kind: str = "uniform"
    values: tuple = ()
    probs: tuple = ()

    def __post_init__(self):
        if self.kind == "uniform":
            return
        if self.kind != "discrete":
            raise CovariateError(f"unknown mark law {self.kind!r}")
        if len(self.values) != len(self.probs) or not self.values:
            raise CovariateError("discrete mark law needs matching values/probs")
        if abs(sum(self.probs) - 1.0) > 1e-9 or min(self.probs) < 0:
            raise CovariateError("discrete mark probabilities must sum to 1")

    def sample(self, count: int, rng: np.random.Generator) -> np.ndarray:
        if self.kind == "uniform":
            return rng.uniform(0.0, 1.0, size=count)
        return rng.choice(np.asarray(self.values, dtype=float), size=count,
                          p=np.asarray(self.probs, dtype=float))

    def mean(self) -> float:
        if self.kind == "uniform":
            return 0.5
        return float(np.dot(self.values, self.probs))

    def descriptor(self) -> dict:
        if self.kind == "uniform":
            return {"kind": "uniform"}
        return {"kind": "discrete", "values": list(self.values),
                "probs": list(self.probs)}


def default_voronoi_margin(grid: Grid, rate: float) -> float:
    D = grid.window.dim_D
    return 3.0 * rate ** (-1.0 / D) * max(np.log(grid.total_cells), 1.0) ** (1.0 / D)


def sample_voronoi_field(grid: Grid, rate: float, mark_law: MarkLaw,
                         margin: float | None, seed) -> CovariateField:
    """Nearest-seed mark field for a homogeneous Poisson seed process on the
    window dilated by ``margin``; ties go to the lowest seed index."""
    if not rate > 0:
        raise CovariateError("seed rate must be positive")
    if margin is None:
        margin = default_voronoi_margin(grid, rate)
    if margin < 0:
        raise CovariateError("margin must be nonnegative")
    D = grid.window.dim_D
    half = grid.window.half_side + margin
    vol = (2.0 * half) ** D
    rng = np.random.default_rng(_seed_seq(seed))
    retries = 0
    nseeds = rng.poisson(rate * vol)
    while nseeds == 0:
        retries += 1
        nseeds = rng.poisson(rate * vol)
    seeds = rng.uniform(-half, half, size=(nseeds, D))
    marks = mark_law.sample(nseeds, rng)
    centers = grid.cell_centers()
    if nseeds == 1:
        nearest = np.zeros(len(centers), dtype=np.int64)
    else:
        tree = cKDTree(seeds)
        dist, nearest = tree.query(centers, k=2)
        tied = dist[:, 0] == dist[:, 1]
        nearest_first = nearest[:, 0]
        nearest_first[tied] = np.minimum(nearest[tied, 0], nearest[tied, 1])
        nearest = nearest_first
    values = marks[nearest][:, None]
    gen = {"kind": "voronoi", "rate": rate, "margin": margin,
           "mark_law": mark_law.descriptor(), "seed": _seed_repr(seed),
           "retries": retries}
    return CovariateField(grid=grid, dim_d=1, values=values, generator=gen,
                          stationary_measure=mark_law.descriptor(),
                          retries=retries)


# ---------------------------------------------------------------------------
# push-forward mass and tree diagnostics


@dataclass(frozen=True)
class PushforwardMass:
    """Occupancy mass mu_n(B_eps) per node, stored as one array per level."""

    tree: PartitionTree
    level_masses: list   # level_masses[l] has length 2^l; level 0 is the root

    def mass(self, node: NodeIndex) -> float:
        return float(self.level_masses[node.level][node.code])

    def alpha(self, node: NodeIndex) -> float:
        """alpha_n(eps) = mu_n(B_eps) / mu_n(B_parent); NaN when the parent
        carries no mass."""
        parent = self.level_masses[node.level - 1][node.code >> 1]
        if parent <= 0.0:
            return float("nan")
        return float(self.level_masses[node.level][node.code] / parent)

    def child_fractions(self, level: int) -> np.ndarray:
        """alpha_n of every level-``level`` node, NaN under zero-mass parents."""
        child = self.level_masses[level]
        parent = np.repeat(self.level_masses[level - 1], 2)
        with np.errstate(invalid="ignore", divide="ignore"):
            out = np.where(parent > 0, child / parent, np.nan)
        return out


def pushforward(covariate: CovariateField, tree: PartitionTree) -> PushforwardMass:
    codes = tree.leaf_codes(covariate.values)
    leaf = np.bincount(codes, minlength=2 ** tree.max_level).astype(float)
    leaf *= covariate.grid.cell_volume / covariate.n
    levels = [leaf]
    for _ in range(tree.max_level):
        levels.append(levels[-1].reshape(-1, 2).sum(axis=1))
    levels.reverse()
    return PushforwardMass(tree=tree, level_masses=levels)


def stationary_bin_mass(measure: dict, tree: PartitionTree,
                        node: NodeIndex) -> float:
    """nu(B_eps) for the supported stationary measures."""
    lo, hi = tree.bin_bounds(node)
    if measure.get("kind") == "uniform":
        return float(np.prod(hi - lo))
    if measure.get("kind") == "discrete":
        vals = np.asarray(measure["values"], dtype=float)
        probs = np.asarray(measure["probs"], dtype=float)
        inside = (vals >= lo[0]) & ((vals < hi[0]) | ((hi[0] == 1.0) & (vals <= 1.0)))
        return float(probs[inside].sum())
    raise CovariateError(f"unsupported stationary measure {measure!r}")


@dataclass(frozen=True)
class NodeDiagnostics:
    node: NodeIndex
    alpha: float
    mass: float
    nu_mass: float
    alpha_ok: bool
    mass_ok: bool


@dataclass(frozen=True)
class DiagnosticsReport:
    c1: float
    Cd: float
    entries: list
    passed: bool
    worst_alpha_margin: float
    worst_mass_ratio: float

    def empirical_margins(self) -> np.ndarray:
        return np.array([abs(e.mass - e.nu_mass) for e in self.entries])


def diagnostics(mass: PushforwardMass, path, c1: float, Cd: float,
                stationary: dict | None = None) -> DiagnosticsReport:
    """Check the split-regularity inequalities along a path and its twins.

    Each node eps on the path (and its twin) must satisfy
    c1 <= alpha_n(eps) <= 1 - c1 and mu_n(B_eps) >= 2^-l / Cd.  The report
    also carries |mu_n - nu| margins for comparison with the expected
    sqrt(nu(B) log n / n) envelope.
    """
    if not 0 < c1 < 0.5:
        raise CovariateError("c1 must lie in (0, 1/2)")
    entries = []
    worst_alpha = np.inf
    worst_ratio = np.inf
    for node in path:
        for nd in (node, node.twin()):
            a = mass.alpha(nd)
            m = mass.mass(nd)
            nu_m = (stationary_bin_mass(stationary, mass.tree, nd)
                    if stationary is not None else float("nan"))
            alpha_ok = bool(np.isfinite(a) and c1 <= a <= 1.0 - c1)
            floor = 2.0 ** (-nd.level) / Cd
            mass_ok = bool(m >= floor)
            if np.isfinite(a):
                worst_alpha = min(worst_alpha, a - c1, 1.0 - c1 - a)
            else:
                worst_alpha = -np.inf
            worst_ratio = min(worst_ratio, m / floor if floor > 0 else np.inf)
            entries.append(NodeDiagnostics(nd, a, m, nu_m, alpha_ok, mass_ok))
    passed = all(e.alpha_ok and e.mass_ok for e in entries)
    return DiagnosticsReport(c1=c1, Cd=Cd, entries=entries, passed=passed,
                             worst_alpha_margin=float(worst_alpha),
                             worst_mass_ratio=float(worst_ratio))


# ---------------------------------------------------------------------------
# persistence: flat little-endian float64 raster + JSON header


def save_field(covariate: CovariateField, path_prefix) -> None:
    raw = covariate.values.astype("<f8").tobytes(order="C")
    with open(f"{path_prefix}.raster", "wb") as fh:
        fh.write(raw)
    header = {
        "byte_order": "little-endian",
        "dtype": "float64",
        "shape": list(covariate.values.shape),
        "dim_D": covariate.grid.window.dim_D,
        "volume_n": covariate.grid.window.volume_n,
        "cells_per_axis": covariate.grid.cells_per_axis,
        "dim_d": covariate.dim_d,
        "generator": covariate.generator,
        "stationary_measure": covariate.stationary_measure,
    }
    with open(f"{path_prefix}.json", "w") as fh:
        json.dump(header, fh, indent=2, sort_keys=True)


def load_field(path_prefix) -> CovariateField:
    from .geometry import Window

    with open(f"{path_prefix}.json") as fh:
        header = json.load(fh)
    grid = Grid(window=Window(dim_D=header["dim_D"], volume_n=header["volume_n"]),
                cells_per_axis=header["cells_per_axis"])
    raw = np.fromfile(f"{path_prefix}.raster", dtype="<f8")
    values = raw.reshape(header["shape"])
    return CovariateField(grid=grid, dim_d=header["dim_d"], values=values,
                          generator=header["generator"],
                          stationary_measure=header["stationary_measure"])


# ---------------------------------------------------------------------------
# seeding helpers


def _seed_seq(seed) -> np.random.SeedSequence:
    if isinstance(seed, np.random.SeedSequence):
        return seed
    if isinstance(seed, (tuple, list)):
        return np.random.SeedSequence([int(s) for s in seed])
    return np.random.SeedSequence(seed)


def _seed_repr(seed):
    if isinstance(seed, np.random.SeedSequence):
        ent = seed.entropy
        if isinstance(ent, (tuple, list, np.ndarray)):
            ent = [int(e) for e in ent]
        return {"entropy": ent, "spawn_key": [int(k) for k in seed.spawn_key]}
    if isinstance(seed, (tuple, list)):
        return [int(s) for s in seed]
    return seed
