"""Truncated Gaussian tensor-wavelet priors, positive links, pCN sampling.

The random function is W(z) = sum_{l<=L} 2^(-l(alpha+d/2)) sum_k g_lk psi_lk(z)
with i.i.d. standard normal g_lk; the intensity is eta(W(z)) for a strictly
positive increasing link eta.  Level l collects the tensor wavelets at
resolution j = l - 1, so the minimal level for d = 1 is the single mother
wavelet.  A preconditioned Crank-Nicolson chain targets the posterior, and a
birth/death move on the truncation level implements the hierarchical variant.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from itertools import product

import numpy as np
from scipy.special import logsumexp

from .covariates import CovariateField, _seed_seq
from .pointproc import IntensityFn, PointPattern


class GPError(ValueError):
    pass


# ---------------------------------------------------------------------------
# 1-d factor functions


def _haar_phi(j: int, k: np.ndarray, x: np.ndarray) -> np.ndarray:
    t = x * 2**j - k
    inside = (t >= 0.0) & ((t < 1.0) | (x == 1.0) & (k == 2**j - 1))
    return np.where(inside, 2.0 ** (j / 2.0), 0.0)


def _haar_psi(j: int, k: np.ndarray, x: np.ndarray) -> np.ndarray:
    t = x * 2**j - k
    at_end = (x == 1.0) & (k == 2**j - 1)
    first = (t >= 0.0) & (t < 0.5)
    second = ((t >= 0.5) & (t < 1.0)) | at_end
    return 2.0 ** (j / 2.0) * (first.astype(float) - second.astype(float))


_DB4_GRID_LEVEL = 12
_db4_cache: dict = {}


def _db4_tables():
    """Scaling/wavelet values of the 4-tap Daubechies pair on [0,3], cascade."""
    if "phi" in _db4_cache:
        return _db4_cache["phi"], _db4_cache["psi"], _db4_cache["step"]
    s3 = np.sqrt(3.0)
    h = np.array([1 + s3, 3 + s3, 3 - s3, 1 - s3]) / (4.0 * np.sqrt(2.0))
    g = np.array([h[3], -h[2], h[1], -h[0]])
    # exact values at the integers, then dyadic refinement
    phi = np.array([0.0, (1 + s3) / 2.0, (1 - s3) / 2.0, 0.0])
    step = 1.0
    for _ in range(_DB4_GRID_LEVEL):
        m = len(phi)
        fine = np.zeros(2 * m - 1)
        fine[0::2] = phi
        xs = np.arange(2 * m - 1) * (step / 2.0)
        vals = np.zeros_like(xs)
        for k in range(4):
            t = 2.0 * xs - k
            idx = np.round(t / step).astype(int)
            ok = (idx >= 0) & (idx < m) & (np.abs(t - idx * step) < 1e-12)
            vals[ok] += np.sqrt(2.0) * h[k] * phi[idx[ok]]
        phi = vals
        step /= 2.0
    xs = np.arange(len(phi)) * step
    psi = np.zeros_like(phi)
    for k in range(4):
        t = 2.0 * xs - k
        idx = np.round(t / step).astype(int)
        ok = (idx >= 0) & (idx < len(phi)) & (np.abs(t - idx * step) < 1e-12)
        psi[ok] += np.sqrt(2.0) * g[k] * phi[idx[ok]]
    _db4_cache.update(phi=phi, psi=psi, step=step)
    return phi, psi, step


def _db4_lookup(table: np.ndarray, step: float, t: np.ndarray) -> np.ndarray:
    out = np.zeros_like(t, dtype=float)
    inside = (t >= 0.0) & (t <= 3.0)
    pos = t[inside] / step
    i0 = np.minimum(pos.astype(int), len(table) - 2)
    frac = pos - i0
    out[inside] = table[i0] * (1 - frac) + table[i0 + 1] * frac
    return out


def _db4_factor(kind: str, j: int, k: np.ndarray, x: np.ndarray) -> np.ndarray:
    phi, psi, step = _db4_tables()
    table = phi if kind == "phi" else psi
    # periodised: sum the unit translates whose support can intersect [0,3]
    acc = np.zeros(np.broadcast(k, x).shape, dtype=float)
    for m in range(0, 2 + int(np.ceil(3.0 / 2**j))):
        acc += _db4_lookup(table, step, x * 2**j + m * 2**j - k)
    return 2.0 ** (j / 2.0) * acc


def _factor(family: str, kind: str, j: int, k, x) -> np.ndarray:
    k = np.asarray(k)
    x = np.asarray(x, dtype=float)
    if family == "haar":
        return _haar_phi(j, k, x) if kind == "phi" else _haar_psi(j, k, x)
    return _db4_factor(kind, j, k, x)


# ---------------------------------------------------------------------------
# tensor basis


@dataclass(frozen=True)
class WaveletBasis:
    """Orthonormal tensor wavelet system on [0,1]^d, levels 1..max_level."""

    family: str
    dim_d: int
    max_level: int

    FAMILIES = ("haar", "db4-periodized")

    def __post_init__(self):
        if self.family not in self.FAMILIES:
            raise GPError(f"unknown wavelet family {self.family!r}")
        if self.dim_d < 1 or self.max_level < 1:
            raise GPError("need dim_d >= 1 and max_level >= 1")

    def level_size(self, level: int) -> int:
        j = level - 1
        return (2**self.dim_d - 1) * 2 ** (j * self.dim_d)

    def total_size(self, level: int) -> int:
        return sum(self.level_size(l) for l in range(1, level + 1))

    def _fam(self) -> str:
        return "haar" if self.family == "haar" else "db4"

    def eval_level(self, level: int, Z: np.ndarray) -> np.ndarray:
        """Dense (npoints, level_size) matrix of basis values.

        Coefficients are blocked by the wavelet/scaling pattern over the axes
        (patterns with at least one wavelet factor, in binary order), then
        C-ordered over the per-axis shift k.
        """
        Z = np.atleast_2d(np.asarray(Z, dtype=float))
        j = level - 1
        d = self.dim_d
        npts = Z.shape[0]
        nk = 2**j
        kk = np.arange(nk)
        fam = self._fam()
        # per-axis factor matrices (npts, nk) for scaling and wavelet
        phis = [
            _factor(fam, "phi", j, kk[None, :], Z[:, h][:, None]) for h in range(d)
        ]
        psis = [
            _factor(fam, "psi", j, kk[None, :], Z[:, h][:, None]) for h in range(d)
        ]
        blocks = []
        for pattern in range(1, 2**d):
            axes = []
            for h in range(d):
                use_psi = (pattern >> (d - 1 - h)) & 1
                axes.append(psis[h] if use_psi else phis[h])
            block = axes[0]
            for nxt in axes[1:]:
                block = block[:, :, None] * nxt[:, None, :]
                block = block.reshape(npts, -1)
            blocks.append(block)
        return np.concatenate(blocks, axis=1)

    def level_dot(self, level: int, Z: np.ndarray, coef: np.ndarray) -> np.ndarray:
        """sum_k coef_k psi_lk(Z); fast sparse path for the Haar family."""
        Z = np.atleast_2d(np.asarray(Z, dtype=float))
        if self.family != "haar":
            return self.eval_level(level, Z) @ coef
        j = level - 1
        d = self.dim_d
        nk = 2**j
        cell = np.clip((Z * nk).astype(np.int64), 0, nk - 1)
        half = np.clip((Z * (2 * nk)).astype(np.int64), 0, 2 * nk - 1) - 2 * cell
        sign = 1.0 - 2.0 * half          # wavelet factor sign per axis
        flat = cell[:, 0]
        for h in range(1, d):
            flat = flat * nk + cell[:, h]
        out = np.zeros(Z.shape[0])
        scale = 2.0 ** (j * d / 2.0)
        block = nk**d
        for bi, pattern in enumerate(range(1, 2**d)):
            s = np.ones(Z.shape[0])
            for h in range(d):
                if (pattern >> (d - 1 - h)) & 1:
                    s = s * sign[:, h]
            out += coef[bi * block + flat] * s
        return out * scale


# ---------------------------------------------------------------------------
# link functions


class LinkFn:
    """Strictly positive, strictly increasing link with a first derivative."""

    def __call__(self, u):
        raise NotImplementedError

    def deriv(self, u):
        raise NotImplementedError

    def descriptor(self) -> dict:
        raise NotImplementedError


@dataclass(frozen=True)
class ExpLink(LinkFn):
    def __call__(self, u):
        return np.exp(u)

    def deriv(self, u):
        return np.exp(u)

    def descriptor(self):
        return {"kind": "exp"}


@dataclass(frozen=True)
class ScaledSigmoidLink(LinkFn):
    """eta(u) = M1 / (1 + e^-u); bounded by M1."""

    M1: float = 4.0

    def __call__(self, u):
        u = np.asarray(u, dtype=float)
        return self.M1 * np.where(u >= 0, 1.0 / (1.0 + np.exp(-u)),
                                  np.exp(u) / (1.0 + np.exp(u)))

    def deriv(self, u):
        s = self(u) / self.M1
        return self.M1 * s * (1.0 - s)

    def descriptor(self):
        return {"kind": "scaled-sigmoid", "M1": self.M1}


_RAMP_LO, _RAMP_HI, _RAMP_STEP = -50.0, 50.0, 1e-3
_ramp_cache: dict = {}


def _ramp_tables():
    """eta = h * g with g(u) = 1/(1-u) for u<0, 1+u for u>=0, and h a
    normalised symmetric bump on [-1,1]; tabulated with its derivative."""
    if "u" in _ramp_cache:
        return _ramp_cache["u"], _ramp_cache["eta"], _ramp_cache["deta"]
    nodes, weights = np.polynomial.legendre.leggauss(64)
    bump = np.exp(-1.0 / (1.0 - nodes**2))
    bump_mass = float(np.dot(weights, bump))
    w = weights * bump / bump_mass          # quadrature of h(t) dt
    u = np.arange(_RAMP_LO, _RAMP_HI + _RAMP_STEP / 2, _RAMP_STEP)

    def g(v):
        return np.where(v < 0, 1.0 / (1.0 - v), 1.0 + v)

    def gprime(v):
        return np.where(v < 0, 1.0 / (1.0 - v) ** 2, 1.0)

    eta = np.zeros_like(u)
    deta = np.zeros_like(u)
    for t, wt in zip(nodes, w):
        eta += wt * g(u - t)
        deta += wt * gprime(u - t)
    _ramp_cache.update(u=u, eta=eta, deta=deta)
    return u, eta, deta


@dataclass(frozen=True)
class MollifiedRampLink(LinkFn):
    """Smoothed ramp: linear for large u, slow polynomial decay of eta' on the
    left, exponential tail extension below the tabulated range."""

    tail_a: float = 2.5
    tail_v0: float = -4.0

    def __call__(self, u):
        grid, eta, _ = _ramp_tables()
        u = np.asarray(u, dtype=float)
        out = np.interp(u, grid, eta)
        out = np.where(u > _RAMP_HI, 1.0 + u, out)
        low = u < _RAMP_LO
        if np.any(low):
            out = np.where(low, eta[0] * np.exp(u - _RAMP_LO), out)
        return np.maximum(out, np.finfo(float).tiny)

    def deriv(self, u):
        grid, eta, deta = _ramp_tables()
        u = np.asarray(u, dtype=float)
        out = np.interp(u, grid, deta)
        out = np.where(u > _RAMP_HI, 1.0, out)
        low = u < _RAMP_LO
        if np.any(low):
            out = np.where(low, eta[0] * np.exp(u - _RAMP_LO), out)
        return np.maximum(out, np.finfo(float).tiny)

    def tail_bound_margin(self, vgrid=None) -> float:
        """min of eta'(v) |v|^a - 1 over tabulated v < v0 (>= 0 when the
        declared tail exponent is honest)."""
        grid, _, deta = _ramp_tables()
        sel = grid < self.tail_v0
        vals = deta[sel] * np.abs(grid[sel]) ** self.tail_a
        return float(vals.min() - 1.0)

    def descriptor(self):
        return {"kind": "mollified-ramp", "a": self.tail_a, "v0": self.tail_v0}


def link_from_descriptor(d: dict) -> LinkFn:
    kind = d["kind"]
    if kind == "exp":
        return ExpLink()
    if kind == "scaled-sigmoid":
        return ScaledSigmoidLink(M1=d.get("M1", 4.0))
    if kind == "mollified-ramp":
        return MollifiedRampLink(tail_a=d.get("a", 2.5), tail_v0=d.get("v0", -4.0))
    raise GPError(f"unknown link {kind!r}")


# ---------------------------------------------------------------------------
# wavelet states


@dataclass(frozen=True)
class WaveletState(IntensityFn):
    basis: WaveletBasis
    smoothness_alpha: float
    level: int
    coeffs: tuple            # raw g arrays, one per level 1..level
    link: LinkFn

    def __post_init__(self):
        if not 1 <= self.level <= self.basis.max_level:
            raise GPError("state level outside the basis range")
        if len(self.coeffs) != self.level:
            raise GPError("one coefficient block per level required")
        for l, block in enumerate(self.coeffs, start=1):
            if len(block) != self.basis.level_size(l):
                raise GPError(f"level {l} block has the wrong size")

    def scale(self, level: int) -> float:
        return 2.0 ** (-level * (self.smoothness_alpha + self.basis.dim_d / 2.0))

    def field(self, Z) -> np.ndarray:
        """W(z) for an array of points."""
        Z = np.atleast_2d(np.asarray(Z, dtype=float))
        out = np.zeros(Z.shape[0])
        for l in range(1, self.level + 1):
            out += self.scale(l) * self.basis.level_dot(l, Z, self.coeffs[l - 1])
        return out

    def evaluate(self, Z: np.ndarray) -> np.ndarray:
        return self.link(self.field(Z))


def prior_sample_wavelet(basis: WaveletBasis, alpha: float, level: int, seed,
                         link: LinkFn | None = None) -> WaveletState:
    rng = np.random.default_rng(_seed_seq(seed))
    coeffs = tuple(rng.standard_normal(basis.level_size(l))
                   for l in range(1, level + 1))
    return WaveletState(basis=basis, smoothness_alpha=alpha, level=level,
                        coeffs=coeffs, link=link or ExpLink())


def eval_rho(state: WaveletState, z) -> np.ndarray:
    return state(z)


def prior_variance_at(basis: WaveletBasis, alpha: float, level: int,
                      z) -> np.ndarray:
    """Analytic prior variance of W(z): sum of squared scaled basis values."""
    Z = np.atleast_2d(np.asarray(z, dtype=float))
    var = np.zeros(Z.shape[0])
    for l in range(1, level + 1):
        vals = basis.eval_level(l, Z)
        var += 4.0 ** (-l * (alpha + basis.dim_d / 2.0)) * (vals**2).sum(axis=1)
    return var


# ---------------------------------------------------------------------------
# hierarchical level prior


@dataclass(frozen=True)
class LevelPrior:
    """Pi_L(L=l) proportional to exp(-C_L 2^(ld) l) on {min..max}."""

    C_L: float
    dim_d: int
    min_level: int = 1
    max_level: int = 6

    def __post_init__(self):
        if self.C_L <= 0:
            raise GPError("C_L must be positive")
        if not 1 <= self.min_level <= self.max_level:
            raise GPError("bad level support")

    def support(self) -> np.ndarray:
        return np.arange(self.min_level, self.max_level + 1)

    def log_mass(self) -> np.ndarray:
        lv = self.support().astype(float)
        raw = -self.C_L * 2.0 ** (lv * self.dim_d) * lv
        return raw - logsumexp(raw)

    def log_mass_at(self, level: int) -> float:
        if not self.min_level <= level <= self.max_level:
            return -np.inf
        return float(self.log_mass()[level - self.min_level])


# ---------------------------------------------------------------------------
# targets


class ConstantTarget:
    """Flat likelihood; the chain should then preserve the prior."""

    def __init__(self, value: float = 0.0):
        self.value = value

    def __call__(self, state: WaveletState) -> float:
        return self.value


class CoxWaveletLogLik:
    """Log-likelihood of a wavelet state given one simulated data set.

    For the Haar family the raster reduces exactly to per-dyadic-bin counts
    and volumes (W is piecewise constant), making each evaluation O(2^L).
    """

    def __init__(self, covariate: CovariateField, pattern: PointPattern,
                 basis: WaveletBasis):
        self.basis = basis
        vol = covariate.grid.cell_volume
        if basis.family == "haar":
            res = 2 ** basis.max_level
            Z = covariate.values
            idx = np.clip((Z * res).astype(np.int64), 0, res - 1)
            flat = idx[:, 0]
            for h in range(1, basis.dim_d):
                flat = flat * res + idx[:, h]
            occupied, inverse = np.unique(flat, return_inverse=True)
            self.volumes = np.bincount(inverse, minlength=len(occupied)) * vol
            self.counts = np.bincount(inverse, weights=pattern.cell_counts,
                                      minlength=len(occupied))
            # representative midpoints of the occupied dyadic cells
            rep = np.empty((len(occupied), basis.dim_d))
            rem = occupied.copy()
            for h in range(basis.dim_d - 1, -1, -1):
                rep[:, h] = (rem % res + 0.5) / res
                rem = rem // res
            self.points = rep
        else:
            self.points = covariate.values
            self.volumes = np.full(len(self.points), vol)
            self.counts = pattern.cell_counts.astype(float)

    def __call__(self, state: WaveletState) -> float:
        lam = state(self.points)
        pos = self.counts > 0
        if np.any(lam[pos] <= 0.0):
            return -np.inf
        return float(np.dot(self.counts[pos], np.log(lam[pos]))
                     - np.dot(self.volumes, lam))


# ---------------------------------------------------------------------------
# samplers


@dataclass
class ChainResult:
    states: list
    logliks: np.ndarray
    accepts: np.ndarray
    levels: np.ndarray
    step_beta: float
    thin: int

    @property
    def acceptance_rate(self) -> float:
        return float(self.accepts.mean()) if len(self.accepts) else 0.0


def pcn_step(state: WaveletState, loglik: float, target, beta: float,
             rng: np.random.Generator):
    keep = np.sqrt(1.0 - beta * beta)
    coeffs = tuple(keep * g + beta * rng.standard_normal(len(g))
                   for g in state.coeffs)
    prop = replace(state, coeffs=coeffs)
    new_ll = target(prop)
    if np.log(rng.uniform()) < min(0.0, new_ll - loglik):
        return prop, new_ll, True
    return state, loglik, False


def pcn_chain(init: WaveletState, target, step_beta: float, iters: int, seed,
              thin: int = 1) -> ChainResult:
    """Prior-reversible random walk; accepts on the likelihood ratio only."""
    if not 0.0 < step_beta <= 1.0:
        raise GPError("step_beta must lie in (0, 1]")
    rng = np.random.default_rng(_seed_seq(seed))
    loglik = target(init)
    if not np.isfinite(loglik):
        raise GPError("initial state has non-finite log-likelihood")
    state = init
    states, lls, accs, levels = [], [], [], []
    for it in range(iters):
        state, loglik, acc = pcn_step(state, loglik, target, step_beta, rng)
        lls.append(loglik)
        accs.append(acc)
        levels.append(state.level)
        if (it + 1) % thin == 0:
            states.append(state)
    return ChainResult(states=states, logliks=np.asarray(lls),
                       accepts=np.asarray(accs, dtype=bool),
                       levels=np.asarray(levels), step_beta=step_beta, thin=thin)


def level_move(state: WaveletState, level_prior: LevelPrior, target, rng_or_seed):
    """One birth/death Metropolis-Hastings move on the truncation level.

    Birth draws the new top-level coefficients from their prior, so the
    acceptance ratio reduces to the level-prior ratio times the likelihood
    ratio; proposals outside the support are rejected outright.
    """
    rng = (rng_or_seed if isinstance(rng_or_seed, np.random.Generator)
           else np.random.default_rng(_seed_seq(rng_or_seed)))
    up = rng.uniform() < 0.5
    newlev = state.level + (1 if up else -1)
    lo = level_prior.min_level
    hi = min(level_prior.max_level, state.basis.max_level)
    if newlev < lo or newlev > hi:
        return state, False
    if up:
        new_block = rng.standard_normal(state.basis.level_size(newlev))
        prop = replace(state, level=newlev, coeffs=state.coeffs + (new_block,))
    else:
        prop = replace(state, level=newlev, coeffs=state.coeffs[:-1])
    log_ratio = (level_prior.log_mass_at(newlev)
                 - level_prior.log_mass_at(state.level)
                 + target(prop) - target(state))
    if np.log(rng.uniform()) < min(0.0, log_ratio):
        return prop, True
    return state, False


def tune_pcn_beta(init: WaveletState, target, seed, beta0: float = 0.5,
                  window: int = 80, rounds: int = 12,
                  accept_range=(0.15, 0.4)):
    """Double/halve beta until the acceptance rate lands in the target band,
    then freeze; returns (beta, warmed-up state)."""
    rng = np.random.default_rng(_seed_seq(seed))
    beta = beta0
    state = init
    loglik = target(state)
    for _ in range(rounds):
        acc = 0
        for _ in range(window):
            state, loglik, a = pcn_step(state, loglik, target, beta, rng)
            acc += a
        rate = acc / window
        if rate < accept_range[0]:
            beta = max(beta / 2.0, 1e-4)
        elif rate > accept_range[1]:
            beta = min(beta * 2.0, 1.0)
        else:
            break
    return beta, state


# ---------------------------------------------------------------------------
# chain persistence: JSONL trace plus periodic coefficient snapshots


def save_chain(result: ChainResult, path_prefix, snapshot_every: int = 0):
    with open(f"{path_prefix}.jsonl", "w") as fh:
        for it, (ll, acc, lev) in enumerate(zip(result.logliks, result.accepts,
                                                result.levels)):
            fh.write(json.dumps({"iteration": it, "level": int(lev),
                                 "loglik": float(ll), "accepted": bool(acc)}))
            fh.write("\n")
    if snapshot_every > 0 and result.states:
        snaps = {}
        for i, st in enumerate(result.states):
            it = (i + 1) * result.thin
            if it % snapshot_every == 0:
                flat = np.concatenate(st.coeffs) if st.coeffs else np.empty(0)
                snaps[f"iter_{it:08d}"] = flat
        if snaps:
            np.savez(f"{path_prefix}_snapshots.npz", **snaps)
