"""Monte Carlo harnesses: contraction-rate slopes, concentration tails,
and split-regularity diagnostics over replicated simulations.

Every replicate owns an RNG stream derived from (base seed, n index,
replicate index), so results are identical whatever the worker count.
"""

from __future__ import annotations

import hashlib
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from . import covariates as cov
from . import gpprior, metrics, pointproc, polyatree
from .geometry import Grid, Window, build_partition


class BenchError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# ordinary least squares on log-log pairs


@dataclass(frozen=True)
class SlopeFit:
    slope: float
    stderr: float
    intercept: float
    r_squared: float


def fit_slope(x, y) -> SlopeFit:
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if len(x) < 3 or len(np.unique(x)) < 2:
        raise BenchError("need at least three points with distinct x")
    xc = x - x.mean()
    sxx = float(np.dot(xc, xc))
    slope = float(np.dot(xc, y) / sxx)
    intercept = float(y.mean() - slope * x.mean())
    resid = y - (intercept + slope * x)
    dof = len(x) - 2
    sigma2 = float(np.dot(resid, resid) / dof) if dof > 0 else 0.0
    stderr = float(np.sqrt(sigma2 / sxx))
    sst = float(np.dot(y - y.mean(), y - y.mean()))
    r2 = 1.0 if sst == 0 else 1.0 - float(np.dot(resid, resid)) / sst
    return SlopeFit(slope=slope, stderr=stderr, intercept=intercept,
                    r_squared=r2)


def isotonic_decreasing(y: np.ndarray) -> np.ndarray:
    """Pool-adjacent-violators projection onto nonincreasing sequences."""
    y = np.asarray(y, dtype=float)
    vals = []
    weights = []
    for v in y:
        vals.append(v)
        weights.append(1.0)
        while len(vals) > 1 and vals[-2] < vals[-1]:
            w = weights[-2] + weights[-1]
            m = (vals[-2] * weights[-2] + vals[-1] * weights[-1]) / w
            vals[-2:] = [m]
            weights[-2:] = [w]
    return np.repeat(vals, np.asarray(weights, dtype=int))


# ---------------------------------------------------------------------------
# simulation configs


@dataclass(frozen=True)
class CovariateConfig:
    kind: str = "gaussian-cdf"       # gaussian-cdf | gaussian | voronoi
    dim_D: int = 1
    dim_d: int = 1
    cells_per_unit: float = 4.0
    kernels: tuple = ({"family": "squared-exponential", "length_scale": 1.0},)
    rate: float = 1.0
    mark_law: dict = field(default_factory=lambda: {"kind": "uniform"})
    margin: float | None = None

    def __post_init__(self):
        if self.kind not in ("gaussian-cdf", "gaussian", "voronoi"):
            raise BenchError(f"unknown covariate kind {self.kind!r}")

    def grid(self, n: float) -> Grid:
        window = Window(dim_D=self.dim_D, volume_n=float(n))
        per_axis = max(1, int(round(window.side * self.cells_per_unit ** (1.0 / self.dim_D))))
        return Grid(window=window, cells_per_axis=per_axis)

    def simulate(self, n: float, seed) -> cov.CovariateField:
        grid = self.grid(n)
        if self.kind == "voronoi":
            law = cov.MarkLaw(**self.mark_law)
            return cov.sample_voronoi_field(grid, self.rate, law, self.margin, seed)
        kernels = [cov.CovarianceKernel.from_descriptor(k) for k in self.kernels]
        raw = cov.sample_gaussian_field(grid, kernels, seed)
        return raw if self.kind == "gaussian" else cov.transform_cdf(raw)

    def stationary(self) -> dict:
        if self.kind == "voronoi":
            return dict(self.mark_law)
        if self.kind == "gaussian-cdf":
            return {"kind": "uniform", "dim": self.dim_d}
        return {"kind": "std-normal", "dim": self.dim_d}


def _w0_eval(name: str, params, z: np.ndarray) -> np.ndarray:
    if name == "triangle":
        return params[0] * (0.5 - np.abs(2.0 * z - 1.0))
    if name == "cosine":
        return params[0] * np.cos(2.0 * np.pi * params[1] * z)
    if name == "zero":
        return np.zeros_like(z)
    raise BenchError(f"unknown base function {name!r}")


@dataclass(frozen=True)
class LinkedIntensity(pointproc.IntensityFn):
    """rho0 = eta(w0(z)) for a named base function; matches the prior's form."""

    link_descriptor: dict
    w0_name: str
    w0_params: tuple

    def evaluate(self, Z: np.ndarray) -> np.ndarray:
        link = gpprior.link_from_descriptor(self.link_descriptor)
        return link(_w0_eval(self.w0_name, self.w0_params, Z[:, 0]))


@dataclass(frozen=True)
class TruthConfig:
    kind: str                       # analytic | linked
    descriptor: dict
    beta: float = 1.0
    beta0: float | None = None

    def build(self) -> pointproc.IntensityFn:
        if self.kind == "analytic":
            return pointproc.analytic_from_descriptor(self.descriptor)
        if self.kind == "linked":
            return LinkedIntensity(
                link_descriptor=self.descriptor["link"],
                w0_name=self.descriptor["w0"]["name"],
                w0_params=tuple(self.descriptor["w0"]["params"]))
        raise BenchError(f"unknown truth kind {self.kind!r}")


@dataclass(frozen=True)
class PolyaFitConfig:
    delta: float = 0.1
    free_depth: int = 2
    alpha: float = 1.0
    rho_star_shape: float = 1.0
    rho_star_rate: float = 1.0
    posterior_draws: int = 400


@dataclass(frozen=True)
class GPFitConfig:
    basis_family: str = "haar"
    alpha: float = 1.0
    link: dict = field(default_factory=lambda: {"kind": "scaled-sigmoid", "M1": 4.0})
    level_offset: int = 0
    iters: int = 3000
    burnin: int = 600
    thin: int = 20
    step_beta: float = 0.3
    adapt: bool = True
    quad_points: int = 2048

    def level_for(self, n: float, dim_d: int) -> int:
        base = int(np.ceil(np.log2(n) / (2.0 * self.alpha + dim_d)))
        return max(1, base + self.level_offset)


@dataclass(frozen=True)
class RateExperiment:
    model: str                      # polya | gp
    covariate: CovariateConfig
    truth: TruthConfig
    n_grid: tuple
    replicates: int
    loss: str = "pointwise"         # pointwise | empirical-l1 | l1-nu
    z0: tuple = (0.3,)
    seed: int = 0
    polya: PolyaFitConfig = field(default_factory=PolyaFitConfig)
    gp: GPFitConfig = field(default_factory=GPFitConfig)

    def __post_init__(self):
        if self.model not in ("polya", "gp"):
            raise BenchError(f"unknown model {self.model!r}")
        if self.loss not in ("pointwise", "empirical-l1", "l1-nu"):
            raise BenchError(f"unknown loss {self.loss!r}")
        n = tuple(self.n_grid)
        if len(n) < 3 and self.loss == "pointwise":
            pass
        if len(n) < 2:
            raise BenchError("n_grid needs at least two sizes")
        if any(b >= a for a, b in zip(n[1:], n[:-1])):
            raise BenchError("n_grid must be strictly increasing")

    def theoretical_exponent(self) -> float:
        d = self.covariate.dim_d
        if self.loss == "pointwise":
            b0 = self.beta0_effective()
            return -b0 / (2.0 * b0 + d)
        if self.model == "gp":
            a = min(self.gp.alpha, self.truth.beta)
            return -a / (2.0 * self.gp.alpha + d)
        b = self.truth.beta
        return -b / (2.0 * b + d)

    def beta0_effective(self) -> float:
        return self.truth.beta0 if self.truth.beta0 is not None else self.truth.beta


@dataclass
class RateResult:
    experiment: RateExperiment
    rows: list                      # (n, replicate, loss name, value)
    mean_losses: np.ndarray         # per n, failures excluded
    slope: SlopeFit
    theoretical: float
    failures: int


def _sub_seed(seed, k: int) -> tuple:
    base = tuple(seed) if isinstance(seed, (tuple, list)) else (seed,)
    return base + (k,)


def _fit_polya_loss(exp: RateExperiment, field_, pattern, rho0, seed) -> float:
    n = field_.n
    depth = polyatree.default_depth(n, exp.polya.delta)
    tree = build_partition(exp.covariate.dim_d, depth)
    mass = cov.pushforward(field_, tree)
    counts = pointproc.bin_counts(pattern, field_, tree)
    hyper = polyatree.PolyaHyper.default(
        depth, free_depth=exp.polya.free_depth, alpha=exp.polya.alpha,
        rho_star_shape=exp.polya.rho_star_shape,
        rho_star_rate=exp.polya.rho_star_rate)
    post = polyatree.exact_posterior(counts, mass, hyper, n)
    if exp.loss == "pointwise":
        z0 = np.asarray(exp.z0)
        draws = polyatree.sample_rho_at(post, tree, mass, z0,
                                        exp.polya.posterior_draws, seed)
        truth_val = float(rho0(z0[None, :])[0])
        return float(np.mean(np.abs(draws - truth_val)))
    draws = polyatree.posterior_sample(post, tree, mass,
                                       max(20, exp.polya.posterior_draws // 20),
                                       seed)
    if exp.loss == "empirical-l1":
        vals = [metrics.empirical_l1(d, rho0, field_) for d in draws]
    else:
        nu = exp.covariate.stationary()
        vals = [metrics.l1_nu(d, rho0, nu, 4096) for d in draws]
    return float(np.mean(vals))


def _fit_gp_loss(exp: RateExperiment, field_, pattern, rho0, seed) -> float:
    gpc = exp.gp
    n = field_.n
    level = gpc.level_for(n, exp.covariate.dim_d)
    basis = gpprior.WaveletBasis(family=gpc.basis_family,
                                 dim_d=exp.covariate.dim_d, max_level=level)
    link = gpprior.link_from_descriptor(gpc.link)
    target = gpprior.CoxWaveletLogLik(field_, pattern, basis)
    init = gpprior.prior_sample_wavelet(basis, gpc.alpha, level,
                                        _sub_seed(seed, 11), link=link)
    beta = gpc.step_beta
    if gpc.adapt:
        beta, init = gpprior.tune_pcn_beta(init, target, _sub_seed(seed, 12),
                                           beta0=gpc.step_beta)
    chain = gpprior.pcn_chain(init, target, beta, gpc.iters, _sub_seed(seed, 13),
                              thin=gpc.thin)
    keep = [s for i, s in enumerate(chain.states)
            if (i + 1) * gpc.thin > gpc.burnin]
    if not keep:
        raise BenchError("no post-burn-in states; lengthen the chain")
    if exp.loss == "empirical-l1":
        post_mean = np.mean([s(field_.values) for s in keep], axis=0)
        diff = np.abs(post_mean - rho0(field_.values))
        return float(diff.sum() * field_.grid.cell_volume / n)
    nu = exp.covariate.stationary()
    pts, w = metrics._quad_points(nu, gpc.quad_points)
    post_mean = np.mean([s(pts) for s in keep], axis=0)
    return float(np.dot(w, np.abs(post_mean - rho0(pts))))


def _rate_task(args):
    exp, n_idx, rep = args
    n = float(exp.n_grid[n_idx])
    base = (exp.seed, n_idx, rep)
    field_ = exp.covariate.simulate(n, base + (0,))
    rho0 = exp.truth.build()
    raster = pointproc.intensity_raster(rho0, field_)
    pattern = pointproc.sample_cox(raster, field_.grid, base + (1,))
    fit = _fit_polya_loss if exp.model == "polya" else _fit_gp_loss
    return n_idx, rep, fit(exp, field_, pattern, rho0, base + (2,))


def _run_tasks(tasks, worker, threads: int):
    if threads <= 1:
        return [worker(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(worker, tasks, chunksize=1))


def run_rate(exp: RateExperiment, threads: int = 1) -> RateResult:
    tasks = [(exp, i, r) for i in range(len(exp.n_grid))
             for r in range(exp.replicates)]
    rows, failures = [], 0
    per_n = [[] for _ in exp.n_grid]
    for (i, r), out in zip(((i, r) for _, i, r in tasks),
                           _run_tasks(tasks, _rate_task_safe, threads)):
        n = exp.n_grid[i]
        if out is None:
            failures += 1
            rows.append((n, r, exp.loss, float("nan")))
        else:
            rows.append((n, r, exp.loss, out))
            per_n[i].append(out)
    if failures > 0.05 * len(tasks):
        raise BenchError(f"{failures} of {len(tasks)} replicates failed")
    mean_losses = np.array([np.mean(v) for v in per_n])
    slope = fit_slope(np.log(np.asarray(exp.n_grid, dtype=float)),
                      np.log(mean_losses))
    return RateResult(experiment=exp, rows=rows, mean_losses=mean_losses,
                      slope=slope, theoretical=exp.theoretical_exponent(),
                      failures=failures)


def _rate_task_safe(args):
    try:
        _, _, val = _rate_task(args)
        return val
    except (ValueError, RuntimeError):
        return None


# ---------------------------------------------------------------------------
# concentration tails


@dataclass(frozen=True)
class TailExperiment:
    functional: dict                # {"name": "cosine", "amplitude": A, "freq": k}
    covariate: CovariateConfig
    n_grid: tuple
    replicates: int
    r_quantiles: tuple = (0.5, 0.65, 0.8, 0.9, 0.95, 0.98, 0.995)
    seed: int = 0

    def __post_init__(self):
        if self.replicates < 1000:
            raise BenchError("tail estimation needs at least 1e3 replicates")

    def centred_functional(self):
        """(f, sup-norm, gradient sup-norm); f is centred under nu."""
        name = self.functional.get("name", "cosine")
        amp = float(self.functional.get("amplitude", 1.0))
        freq = float(self.functional.get("freq", 1.0))
        nu = self.covariate.stationary()

        if name == "cosine":
            raw = lambda z: amp * np.cos(2.0 * np.pi * freq * z)
            grad = amp * 2.0 * np.pi * freq
        elif name == "triangle":
            raw = lambda z: amp * (0.5 - np.abs(2.0 * z - 1.0))
            grad = 2.0 * amp
        else:
            raise BenchError(f"unknown tail functional {name!r}")
        pts, w = metrics._quad_points(nu, 2**14)
        offset = float(np.dot(w, raw(pts[:, 0])))
        f = lambda z: raw(z) - offset
        centred = abs(float(np.dot(w, f(pts[:, 0]))))
        if centred > 1e-6:
            raise BenchError("functional failed the centring check")
        return f, amp + abs(offset), grad


@dataclass
class TailResult:
    experiment: TailExperiment
    rows: list                      # (n, r, exceedance, replicates)
    fits: list                      # per n: {"n", "rate", "r_squared"}
    rate_ratios: list               # fitted-rate ratio between consecutive n


def _tail_samples(exp: TailExperiment, n: float, n_idx: int) -> np.ndarray:
    f, _, _ = exp.centred_functional()
    xs = np.empty(exp.replicates)
    for rep in range(exp.replicates):
        field_ = exp.covariate.simulate(n, (exp.seed, n_idx, rep))
        vals = f(field_.values[:, 0])
        xs[rep] = vals.sum() * field_.grid.cell_volume / n
    return xs


def run_tails(exp: TailExperiment, threads: int = 1) -> TailResult:
    sub_gaussian = exp.covariate.kind != "voronoi"
    rows, fits = [], []
    for n_idx, n in enumerate(exp.n_grid):
        xs = np.abs(_tail_samples(exp, float(n), n_idx))
        rs = np.quantile(xs, exp.r_quantiles)
        used_x, used_y = [], []
        for r in rs:
            p = float(np.mean(xs >= r))
            rows.append((n, float(r), p, exp.replicates))
            if p > 0.0:
                used_x.append(min(r, r * r) if not sub_gaussian else r * r)
                used_y.append(np.log(p))
        fit = fit_slope(np.asarray(used_x), np.asarray(used_y))
        fits.append({"n": float(n), "rate": -fit.slope,
                     "r_squared": fit.r_squared})
    ratios = [fits[i + 1]["rate"] / fits[i]["rate"]
              for i in range(len(fits) - 1)]
    return TailResult(experiment=exp, rows=rows, fits=fits, rate_ratios=ratios)


# ---------------------------------------------------------------------------
# split-regularity diagnostics over replicates


@dataclass(frozen=True)
class DiagnoseExperiment:
    covariate: CovariateConfig
    n: float
    replicates: int
    c1: float = 0.1
    delta: float = 0.1
    z0: tuple = (0.3,)
    seed: int = 0


@dataclass
class DiagnoseResult:
    experiment: DiagnoseExperiment
    rows: list                      # (replicate, passed, worst alpha, worst mass)
    pass_rate: float
    depth: int


def run_diagnose(exp: DiagnoseExperiment, threads: int = 1) -> DiagnoseResult:
    depth = polyatree.default_depth(exp.n, exp.delta)
    tree = build_partition(exp.covariate.dim_d, depth)
    Cd = tree.diam_constant
    rows = []
    from .geometry import locate

    for rep in range(exp.replicates):
        field_ = exp.covariate.simulate(exp.n, (exp.seed, 0, rep))
        mass = cov.pushforward(field_, tree)
        path = locate(tree, np.asarray(exp.z0))
        report = cov.diagnostics(mass, path, exp.c1, Cd,
                                 stationary=exp.covariate.stationary())
        rows.append((rep, report.passed, report.worst_alpha_margin,
                     report.worst_mass_ratio))
    pass_rate = float(np.mean([r[1] for r in rows]))
    return DiagnoseResult(experiment=exp, rows=rows, pass_rate=pass_rate,
                          depth=depth)


# ---------------------------------------------------------------------------
# persistence


def config_hash(obj) -> str:
    doc = json.dumps(obj, sort_keys=True, default=_jsonable)
    return hashlib.sha256(doc.encode()).hexdigest()


def _jsonable(v):
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, tuple):
        return list(v)
    raise TypeError(f"not JSON serialisable: {type(v)}")


def experiment_dict(exp) -> dict:
    return json.loads(json.dumps(asdict(exp), sort_keys=True, default=_jsonable))
