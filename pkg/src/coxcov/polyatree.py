"""Spike-and-slab Polya tree prior on covariate intensities, exact posterior.

Each internal node at level l carries one splitting variable Ybar for its
left child: below the free depth L0 it is a plain Beta draw, from L0 on it
mixes a point mass at alpha_n(left child) (the "spike", meaning no local
structure) with a Beta slab whose parameters track the local covariate mass.
The likelihood factorises over nodes, so the posterior is again node-wise
independent: a spike probability plus a conjugate Beta slab per node, and a
Gamma posterior for the overall rate rho*.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.special import betaln, expit

from .covariates import CovariateField, PushforwardMass, _seed_seq
from .geometry import NodeIndex, PartitionTree
from .pointproc import IntensityFn, IntensityError, NodeCounts

Q_FLOOR = 0.5
Q_CEIL = 1.0 - 2.0**-20


class PolyaError(ValueError):
    pass


def default_depth(n: float, delta: float = 0.1) -> int:
    """Tree depth with 2^depth = floor(delta * n / log n), at least 1."""
    leaves = int(delta * n / max(np.log(n), 1.0))
    return max(1, int(np.floor(np.log2(max(leaves, 2)))))


@dataclass(frozen=True)
class PolyaHyper:
    """Hyperparameters, indexed by the internal-node (parent) level 0..depth-1."""

    depth: int
    free_depth: int                # parent levels < free_depth use a plain Beta
    slab_concentration: np.ndarray  # alpha_l > 0, length depth
    spike_weight: np.ndarray        # q_l in (0,1), length depth
    shallow_beta: np.ndarray        # (free_depth, 2) Beta parameters
    rho_star_shape: float = 1.0
    rho_star_rate: float = 1.0

    def __post_init__(self):
        if self.depth < 1:
            raise PolyaError("tree depth must be >= 1")
        if not 0 <= self.free_depth <= self.depth:
            raise PolyaError("free depth must lie in [0, depth]")
        if len(self.slab_concentration) != self.depth or np.any(
                np.asarray(self.slab_concentration) <= 0):
            raise PolyaError("slab concentration must be positive per level")
        q = np.asarray(self.spike_weight)
        if len(q) != self.depth or np.any(q <= 0) or np.any(q > 1):
            raise PolyaError("spike weight q must lie in (0,1] per level")
        sb = np.asarray(self.shallow_beta)
        if sb.shape != (self.free_depth, 2) or (sb.size and np.any(sb <= 0)):
            raise PolyaError("shallow Beta parameters must be positive")
        if self.rho_star_shape <= 0 or self.rho_star_rate <= 0:
            raise PolyaError("rho* Gamma prior parameters must be positive")

    @classmethod
    def default(cls, depth: int, free_depth: int = 2, alpha: float = 1.0,
                rho_star_shape: float = 1.0, rho_star_rate: float = 1.0) -> "PolyaHyper":
        free_depth = min(free_depth, depth)
        levels = np.arange(depth)
        q = np.clip(1.0 - 2.0**(-levels.astype(float)), Q_FLOOR, Q_CEIL)
        return cls(depth=depth, free_depth=free_depth,
                   slab_concentration=np.full(depth, float(alpha)),
                   spike_weight=q,
                   shallow_beta=np.ones((free_depth, 2)),
                   rho_star_shape=rho_star_shape, rho_star_rate=rho_star_rate)

    def constraint_report(self, n: float, t: float = 1.0, c2: float = 0.5) -> dict:
        """Sparsity / concentration conditions behind the point-wise rate:
        (1-q_l) alpha_l <= 2^(-l t), q_l >= c2, and alpha_l 2^l small next to n."""
        lv = np.arange(self.free_depth, self.depth)
        lhs = (1.0 - self.spike_weight[lv]) * self.slab_concentration[lv]
        sparsity_ok = bool(np.all(lhs <= 2.0**(-t * lv) + 1e-12))
        floor_ok = bool(np.all(self.spike_weight[lv] >= c2 - 1e-12))
        growth = float(np.max(self.slab_concentration * 2.0**np.arange(self.depth)))
        return {"sparsity_ok": sparsity_ok, "q_floor_ok": floor_ok,
                "max_alpha_2l": growth, "alpha_growth_ok": growth < n}


# ---------------------------------------------------------------------------
# tree-structured intensity draws


def _child_fractions(mass: PushforwardMass, level: int) -> np.ndarray:
    return mass.child_fractions(level)


@dataclass(frozen=True)
class TreeIntensity(IntensityFn):
    """rho(z) = rho* prod_l Y at the bins containing z; frozen nodes give 1."""

    tree: PartitionTree
    rho_star: float
    ybar: list        # ybar[l-1]: Ybar per level-l node, length 2^l
    yfac: list        # Y = Ybar / alpha_n with frozen nodes set to 1

    def evaluate(self, Z: np.ndarray) -> np.ndarray:
        codes = self.tree.leaf_codes(Z)
        L = self.tree.max_level
        out = np.full(Z.shape[0], self.rho_star)
        for lev in range(1, L + 1):
            out *= self.yfac[lev - 1][codes >> (L - lev)]
        return out

    def leaf_bin_rates(self) -> np.ndarray:
        """mu_n-integral of rho over each leaf bin: rho* prod Ybar."""
        L = self.tree.max_level
        acc = np.full(2 ** L, self.rho_star)
        for lev in range(1, L + 1):
            reps = 2 ** (L - lev)
            acc *= np.repeat(self.ybar[lev - 1], reps)
        return acc


def prior_sample(tree: PartitionTree, mass: PushforwardMass, hyper: PolyaHyper,
                 seed) -> TreeIntensity:
    if hyper.depth != tree.max_level:
        raise PolyaError("hyperparameter depth must match the tree depth")
    rng = np.random.default_rng(_seed_seq(seed))
    rho_star = rng.gamma(hyper.rho_star_shape, 1.0 / hyper.rho_star_rate)
    ybar, yfac = [], []
    frozen_total = 0
    for lev in range(1, tree.max_level + 1):
        l = lev - 1   # parent level
        frac = _child_fractions(mass, lev)
        am, ap = frac[0::2], frac[1::2]
        npairs = len(am)
        degenerate = ~np.isfinite(am) | (am <= 0.0) | (am >= 1.0)
        frozen_total += int(degenerate.sum())
        if l < hyper.free_depth:
            a1, a2 = hyper.shallow_beta[l]
            ym = rng.beta(np.full(npairs, a1), np.full(npairs, a2))
        else:
            conc = hyper.slab_concentration[l]
            safe_am = np.where(degenerate, 0.5, am)
            ym = rng.beta(conc * safe_am, conc * (1.0 - safe_am))
            spikes = rng.uniform(size=npairs) < hyper.spike_weight[l]
            ym = np.where(spikes, safe_am, ym)
        ym = np.where(degenerate, np.where(np.isfinite(am), am, 0.5), ym)
        yb = np.empty(2 ** lev)
        yb[0::2], yb[1::2] = ym, 1.0 - ym
        yf = np.ones_like(yb)
        ok = ~degenerate
        yf[0::2][ok] = ym[ok] / am[ok]
        yf[1::2][ok] = (1.0 - ym[ok]) / ap[ok]
        ybar.append(yb)
        yfac.append(yf)
    if frozen_total:
        warnings.warn(f"froze {frozen_total} degenerate zero-mass nodes at the spike")
    return TreeIntensity(tree=tree, rho_star=float(rho_star), ybar=ybar, yfac=yfac)


# ---------------------------------------------------------------------------
# exact posterior


def log_slab_spike_bayes_factor(n_minus, n_plus, alpha_minus, alpha_plus, conc):
    """log of (slab marginal likelihood) / (spike likelihood) for one node.

    The local likelihood in ybar is ybar^N- (1-ybar)^N+ divided by
    alpha-^N- alpha+^N+; the spike sits at ybar = alpha-, the slab is
    Beta(conc*alpha-, conc*alpha+), so the ratio reduces to a Beta-function
    quotient.  Stable in log space for counts up to millions.
    """
    n_minus = np.asarray(n_minus, dtype=float)
    n_plus = np.asarray(n_plus, dtype=float)
    am = np.asarray(alpha_minus, dtype=float)
    ap = np.asarray(alpha_plus, dtype=float)
    conc = np.asarray(conc, dtype=float)
    return (betaln(n_minus + conc * am, n_plus + conc * ap)
            - betaln(conc * am, conc * ap)
            - n_minus * np.log(am) - n_plus * np.log(ap))


def spike_probability(n_minus, n_plus, alpha_minus, q, conc):
    """Posterior probability of the spike at a single node (vectorised)."""
    alpha_minus = np.asarray(alpha_minus, dtype=float)
    log_bf = log_slab_spike_bayes_factor(n_minus, n_plus, alpha_minus,
                                         1.0 - alpha_minus, conc)
    q = np.asarray(q, dtype=float)
    with np.errstate(divide="ignore"):
        return expit(-(np.log1p(-q) - np.log(q) + log_bf))


@dataclass(frozen=True)
class PolyaPosterior:
    """Node-wise independent posterior: per parent node a spike probability,
    a Beta slab for Ybar(left child), and the spike atom alpha_n(left)."""

    depth: int
    n: float
    root_count: int
    rho_star_shape: float
    rho_star_rate: float
    p_spike: list     # p_spike[l]: per parent node at level l, length 2^l
    slab_a: list
    slab_b: list
    atom: list
    frozen: list

    def rho_star_mean(self) -> float:
        return self.rho_star_shape / self.rho_star_rate


def exact_posterior(counts: NodeCounts, mass: PushforwardMass,
                    hyper: PolyaHyper, n: float) -> PolyaPosterior:
    if counts.tree.max_level != hyper.depth:
        raise PolyaError("counts and hyperparameters use different depths")
    p_spike, slab_a, slab_b, atom, frozen = [], [], [], [], []
    for lev in range(1, hyper.depth + 1):
        l = lev - 1
        frac = _child_fractions(mass, lev)
        am, ap = frac[0::2], frac[1::2]
        cnt = counts.level_counts[lev]
        nm, npl = cnt[0::2].astype(float), cnt[1::2].astype(float)
        degenerate = ~np.isfinite(am) | (am <= 0.0) | (am >= 1.0)
        safe_am = np.where(degenerate, 0.5, am)
        safe_ap = np.where(degenerate, 0.5, ap)
        if l < hyper.free_depth:
            a1, a2 = hyper.shallow_beta[l]
            p = np.zeros(len(nm))
            a = nm + a1
            b = npl + a2
        else:
            conc = hyper.slab_concentration[l]
            q = hyper.spike_weight[l]
            p = spike_probability(nm, npl, safe_am, q, conc)
            a = nm + conc * safe_am
            b = npl + conc * safe_ap
        p = np.where(degenerate, 1.0, p)
        p_spike.append(p)
        slab_a.append(a)
        slab_b.append(b)
        atom.append(np.where(np.isfinite(am), am, 0.5))
        frozen.append(degenerate)
    return PolyaPosterior(depth=hyper.depth, n=float(n),
                          root_count=counts.total,
                          rho_star_shape=hyper.rho_star_shape + counts.total,
                          rho_star_rate=hyper.rho_star_rate + float(n),
                          p_spike=p_spike, slab_a=slab_a, slab_b=slab_b,
                          atom=atom, frozen=frozen)


def posterior_sample(post: PolyaPosterior, tree: PartitionTree,
                     mass: PushforwardMass, count: int, seed) -> list:
    """Independent draws from the factorised posterior as TreeIntensity objects."""
    rng = np.random.default_rng(_seed_seq(seed))
    draws = []
    for _ in range(count):
        rho_star = rng.gamma(post.rho_star_shape, 1.0 / post.rho_star_rate)
        ybar, yfac = [], []
        for lev in range(1, post.depth + 1):
            l = lev - 1
            frac = _child_fractions(mass, lev)
            am, ap = frac[0::2], frac[1::2]
            p = post.p_spike[l]
            ym = rng.beta(post.slab_a[l], post.slab_b[l])
            take_spike = (rng.uniform(size=len(p)) < p) | post.frozen[l]
            ym = np.where(take_spike, post.atom[l], ym)
            yb = np.empty(2 ** lev)
            yb[0::2], yb[1::2] = ym, 1.0 - ym
            yf = np.ones_like(yb)
            ok = ~post.frozen[l] & np.isfinite(am) & (am > 0) & (am < 1)
            yf[0::2][ok] = ym[ok] / am[ok]
            yf[1::2][ok] = (1.0 - ym[ok]) / ap[ok]
            ybar.append(yb)
            yfac.append(yf)
        draws.append(TreeIntensity(tree=tree, rho_star=float(rho_star),
                                   ybar=ybar, yfac=yfac))
    return draws


def _path_codes(tree: PartitionTree, z0) -> np.ndarray:
    z0 = np.atleast_1d(np.asarray(z0, dtype=float))
    leaf = int(tree.leaf_codes(z0[None, :])[0])
    L = tree.max_level
    return np.array([leaf >> (L - lev) for lev in range(1, L + 1)])


def sample_rho_at(post: PolyaPosterior, tree: PartitionTree,
                  mass: PushforwardMass, z0, count: int, seed) -> np.ndarray:
    """Posterior draws of rho(z0), sampling only the nodes on the path."""
    rng = np.random.default_rng(_seed_seq(seed))
    codes = _path_codes(tree, z0)
    out = rng.gamma(post.rho_star_shape, 1.0 / post.rho_star_rate, size=count)
    for lev in range(1, post.depth + 1):
        l = lev - 1
        code = codes[l]
        pair, side = code >> 1, code & 1
        if post.frozen[l][pair]:
            continue
        frac = _child_fractions(mass, lev)
        a_child = frac[code]
        ym = rng.beta(post.slab_a[l][pair], post.slab_b[l][pair], size=count)
        spike = rng.uniform(size=count) < post.p_spike[l][pair]
        ym = np.where(spike, post.atom[l][pair], ym)
        ybar_child = ym if side == 0 else 1.0 - ym
        out *= ybar_child / a_child
    return out


def posterior_mean_at(post: PolyaPosterior, tree: PartitionTree,
                      mass: PushforwardMass, z0) -> float:
    """Analytic posterior mean of rho(z0): product of independent node means."""
    codes = _path_codes(tree, z0)
    mean = post.rho_star_shape / post.rho_star_rate
    for lev in range(1, post.depth + 1):
        l = lev - 1
        code = codes[l]
        pair, side = code >> 1, code & 1
        if post.frozen[l][pair]:
            continue
        frac = _child_fractions(mass, lev)
        a_child = frac[code]
        p = post.p_spike[l][pair]
        slab_mean = post.slab_a[l][pair] / (post.slab_a[l][pair] + post.slab_b[l][pair])
        e_ybar_minus = p * post.atom[l][pair] + (1.0 - p) * slab_mean
        e_ybar = e_ybar_minus if side == 0 else 1.0 - e_ybar_minus
        mean *= e_ybar / a_child
    return float(mean)


def pointwise_summary(post: PolyaPosterior, tree: PartitionTree,
                      mass: PushforwardMass, z0, draws: int,
                      levels=(0.05, 0.5, 0.95), seed=0) -> dict:
    vals = sample_rho_at(post, tree, mass, z0, draws, seed)
    return {"mean": float(vals.mean()),
            "quantiles": {float(q): float(np.quantile(vals, q)) for q in levels}}


# ---------------------------------------------------------------------------
# truth coefficients and the significant-level set


@dataclass(frozen=True)
class TruthCoefficients:
    path: list                 # NodeIndex per level 1..depth
    y0_path: np.ndarray        # y0 at each path node
    rho0_bins: np.ndarray      # normalised truth mass of each path bin
    rho0_star: float
    gamma: float
    significant_levels: list   # levels l with |y0 - 1| over the noise envelope


def truth_coefficients(rho0: IntensityFn, covariate: CovariateField,
                       tree: PartitionTree, mass: PushforwardMass, z0,
                       gamma: float) -> TruthCoefficients:
    n = covariate.n
    w = rho0(covariate.values) * covariate.grid.cell_volume / n
    codes = tree.leaf_codes(covariate.values)
    leaf = np.bincount(codes, weights=w, minlength=2 ** tree.max_level)
    levels = [leaf]
    for _ in range(tree.max_level):
        levels.append(levels[-1].reshape(-1, 2).sum(axis=1))
    levels.reverse()
    rho0_star = float(levels[0][0])
    path_codes = _path_codes(tree, z0)
    y0, bins, signif, path = [], [], [], []
    for lev in range(1, tree.max_level + 1):
        code = int(path_codes[lev - 1])
        node = NodeIndex.from_code(lev, code)
        path.append(node)
        parent_mass = levels[lev - 1][code >> 1]
        child_mass = levels[lev][code]
        a_child = mass.child_fractions(lev)[code]
        if parent_mass <= 0 or not np.isfinite(a_child) or a_child <= 0:
            raise IntensityError(
                f"truth coefficient undefined at level {lev}: zero mass on path")
        y = child_mass / (parent_mass * a_child)
        y0.append(y)
        bins.append(child_mass)
        threshold = gamma * np.sqrt(np.log(n) / (n * child_mass)) \
            if child_mass > 0 else np.inf
        if abs(y - 1.0) > threshold:
            signif.append(lev)
    return TruthCoefficients(path=path, y0_path=np.asarray(y0),
                             rho0_bins=np.asarray(bins), rho0_star=rho0_star,
                             gamma=gamma, significant_levels=signif)


# ---------------------------------------------------------------------------
# persistence


def save_posterior(post: PolyaPosterior, path) -> None:
    doc = {
        "depth": post.depth,
        "n": post.n,
        "root_count": post.root_count,
        "rho_star": {"shape": post.rho_star_shape, "rate": post.rho_star_rate},
        "levels": [
            {"p_spike": post.p_spike[l].tolist(),
             "slab_a": post.slab_a[l].tolist(),
             "slab_b": post.slab_b[l].tolist(),
             "atom": post.atom[l].tolist(),
             "frozen": post.frozen[l].astype(bool).tolist()}
            for l in range(post.depth)
        ],
    }
    with open(path, "w") as fh:
        json.dump(doc, fh)


def load_posterior(path) -> PolyaPosterior:
    with open(path) as fh:
        doc = json.load(fh)
    return PolyaPosterior(
        depth=doc["depth"], n=doc["n"], root_count=doc["root_count"],
        rho_star_shape=doc["rho_star"]["shape"],
        rho_star_rate=doc["rho_star"]["rate"],
        p_spike=[np.asarray(lv["p_spike"]) for lv in doc["levels"]],
        slab_a=[np.asarray(lv["slab_a"]) for lv in doc["levels"]],
        slab_b=[np.asarray(lv["slab_b"]) for lv in doc["levels"]],
        atom=[np.asarray(lv["atom"]) for lv in doc["levels"]],
        frozen=[np.asarray(lv["frozen"], dtype=bool) for lv in doc["levels"]],
    )
