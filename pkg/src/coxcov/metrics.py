"""Loss functions between covariate intensities.

empirical_l1 averages |rho - rho0| over the realised covariate surface (an
exact sum under the piecewise-constant raster); l1_nu integrates the same
difference against the stationary law, so their gap measures how far the
window average is from its ergodic limit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .covariates import CovariateField
from .pointproc import IntensityFn

QUAD_POINTS_PER_AXIS = 2**16
QUAD_POINTS_CAP = 2**20


class MetricError(ValueError):
    pass


@dataclass(frozen=True)
class LossReport:
    empirical_l1: float | None = None
    l1_nu: float | None = None
    pointwise_abs: float | None = None
    kl_nu: float | None = None
    v2_nu: float | None = None
    mass_gap: float | None = None
    kl_infinite: bool = False


def empirical_l1(rho: IntensityFn, rho0: IntensityFn,
                 covariate: CovariateField) -> float:
    diff = np.abs(rho(covariate.values) - rho0(covariate.values))
    return float(diff.sum() * covariate.grid.cell_volume / covariate.n)


def _quad_points(nu: dict, quad_points: int | None):
    """(points, weights) against the stationary measure."""
    kind = nu.get("kind")
    if kind == "uniform":
        d = int(nu.get("dim", 1))
        per_axis = quad_points or QUAD_POINTS_PER_AXIS
        while per_axis**d > QUAD_POINTS_CAP:
            per_axis //= 2
        axis = (np.arange(per_axis) + 0.5) / per_axis
        if d == 1:
            pts = axis[:, None]
        else:
            mesh = np.meshgrid(*([axis] * d), indexing="ij")
            pts = np.stack([m.ravel() for m in mesh], axis=-1)
        w = np.full(len(pts), 1.0 / len(pts))
        return pts, w
    if kind == "discrete":
        vals = np.asarray(nu["values"], dtype=float)[:, None]
        probs = np.asarray(nu["probs"], dtype=float)
        return vals, probs
    raise MetricError(f"unsupported stationary measure {nu!r}")


def l1_nu(rho: IntensityFn, rho0: IntensityFn, nu: dict,
          quad_points: int | None = None) -> float:
    pts, w = _quad_points(nu, quad_points)
    return float(np.dot(w, np.abs(rho(pts) - rho0(pts))))


def kl_stats(rho: IntensityFn, rho0: IntensityFn, nu: dict,
             quad_points: int | None = None) -> LossReport:
    """KL and squared-log moments between the normalised intensities, plus
    the gap between total masses."""
    pts, w = _quad_points(nu, quad_points)
    f = rho(pts)
    f0 = rho0(pts)
    M = float(np.dot(w, f))
    M0 = float(np.dot(w, f0))
    if M <= 0 or M0 <= 0:
        raise MetricError("kl_stats needs intensities with positive mass")
    bar = f / M
    bar0 = f0 / M0
    active = (bar0 > 0) & (w > 0)
    infinite = bool(np.any(active & (bar <= 0)))
    if infinite:
        kl = np.inf
        v2 = np.inf
    else:
        logs = np.zeros_like(bar0)
        logs[active] = np.log(bar0[active] / bar[active])
        kl = float(np.dot(w, bar0 * logs))
        v2 = float(np.dot(w, bar0 * logs**2))
    return LossReport(kl_nu=kl, v2_nu=v2, mass_gap=abs(M - M0),
                      kl_infinite=infinite)


def ergodic_gap(rho: IntensityFn, rho0: IntensityFn, covariates,
                nu: dict | None = None, quad_points: int | None = None):
    """|empirical_l1 - l1_nu| per field, for fields over growing windows."""
    gaps = []
    for cov in covariates:
        measure = nu or cov.stationary_measure
        limit = l1_nu(rho, rho0, measure, quad_points)
        gaps.append(abs(empirical_l1(rho, rho0, cov) - limit))
    return np.asarray(gaps)
