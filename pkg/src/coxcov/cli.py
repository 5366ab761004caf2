"""Config-driven command line: simulate, fit, benchmark, diagnose.

One JSON config per run; the config carries the command.  Artifacts land in
a directory keyed by the hash of the echoed config, so identical inputs
regenerate identical outputs.  Exit codes: 0 ok, 2 config error, 3 failed
--check, 4 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import bench, covariates, gpprior, metrics, pointproc, polyatree, svgplot
from .geometry import build_partition

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_CHECK = 3
EXIT_RUNTIME = 4

COMMANDS = ("simulate", "fit-polya", "fit-gp", "rates", "tails", "diagnose")


# ---------------------------------------------------------------------------
# schema validation with path-aware messages; unknown keys are rejected


def _fail(path, msg):
    return [f"{path}: {msg}"]


def _number(lo=None, hi=None, lo_open=False, hi_open=False):
    def check(v, path):
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            return _fail(path, "expected a number")
        if lo is not None and (v <= lo if lo_open else v < lo):
            return _fail(path, f"must be {'>' if lo_open else '>='} {lo}")
        if hi is not None and (v >= hi if hi_open else v > hi):
            return _fail(path, f"must be {'<' if hi_open else '<='} {hi}")
        return []
    return check


def _integer(lo=None, hi=None):
    def check(v, path):
        if isinstance(v, bool) or not isinstance(v, int):
            return _fail(path, "expected an integer")
        if lo is not None and v < lo:
            return _fail(path, f"must be >= {lo}")
        if hi is not None and v > hi:
            return _fail(path, f"must be <= {hi}")
        return []
    return check


def _boolean(v, path):
    return [] if isinstance(v, bool) else _fail(path, "expected a boolean")


def _string(*choices):
    def check(v, path):
        if not isinstance(v, str):
            return _fail(path, "expected a string")
        if choices and v not in choices:
            return _fail(path, f"must be one of {sorted(choices)}")
        return []
    return check


def _array(item_check, min_len=0):
    def check(v, path):
        if not isinstance(v, list):
            return _fail(path, "expected an array")
        if len(v) < min_len:
            return _fail(path, f"needs at least {min_len} entries")
        errs = []
        for i, item in enumerate(v):
            errs.extend(item_check(item, f"{path}[{i}]"))
        return errs
    return check


def _object(schema):
    def check(v, path):
        if not isinstance(v, dict):
            return _fail(path, "expected an object")
        errs = []
        for key in sorted(set(v) - set(schema)):
            errs.extend(_fail(f"{path}.{key}", "unknown key"))
        for key, (required, sub) in schema.items():
            if key not in v:
                if required:
                    errs.extend(_fail(f"{path}.{key}", "missing required key"))
                continue
            errs.extend(sub(v[key], f"{path}.{key}"))
        return errs
    return check


_KERNEL = _object({
    "family": (True, _string("squared-exponential", "exponential", "matern")),
    "length_scale": (True, _number(lo=0, lo_open=True)),
    "tail_exponent": (False, _number(lo=0, lo_open=True)),
})

_MARK_LAW = _object({
    "kind": (True, _string("uniform", "discrete")),
    "values": (False, _array(_number(), min_len=1)),
    "probs": (False, _array(_number(lo=0), min_len=1)),
})

_COVARIATE = _object({
    "kind": (True, _string("gaussian-cdf", "gaussian", "voronoi")),
    "dim_D": (False, _integer(lo=1, hi=3)),
    "dim_d": (False, _integer(lo=1, hi=4)),
    "cells_per_unit": (False, _number(lo=0, lo_open=True)),
    "kernels": (False, _array(_KERNEL, min_len=1)),
    "rate": (False, _number(lo=0, lo_open=True)),
    "mark_law": (False, _MARK_LAW),
    "margin": (False, _number(lo=0)),
})

_TRUTH = _object({
    "kind": (True, _string("analytic", "linked")),
    "descriptor": (True, lambda v, p: [] if isinstance(v, dict)
                   else _fail(p, "expected an object")),
    "beta": (False, _number(lo=0, lo_open=True)),
    "beta0": (False, _number(lo=0, lo_open=True)),
})

_POLYA = _object({
    "delta": (False, _number(lo=0, lo_open=True)),
    "free_depth": (False, _integer(lo=0)),
    "alpha": (False, _number(lo=0, lo_open=True)),
    "q": (False, _number(lo=0, hi=1, lo_open=True)),
    "rho_star_shape": (False, _number(lo=0, lo_open=True)),
    "rho_star_rate": (False, _number(lo=0, lo_open=True)),
    "posterior_draws": (False, _integer(lo=1)),
})

_LINK = _object({
    "kind": (True, _string("exp", "scaled-sigmoid", "mollified-ramp")),
    "M1": (False, _number(lo=0, lo_open=True)),
    "a": (False, _number(lo=0, lo_open=True)),
    "v0": (False, _number(hi=0, hi_open=True)),
})

_GP = _object({
    "basis_family": (False, _string("haar", "db4-periodized")),
    "alpha": (False, _number(lo=0, lo_open=True)),
    "link": (False, _LINK),
    "level_offset": (False, _integer(lo=-4, hi=8)),
    "iters": (False, _integer(lo=1)),
    "burnin": (False, _integer(lo=0)),
    "thin": (False, _integer(lo=1)),
    "step_beta": (False, _number(lo=0, hi=1, lo_open=True)),
    "adapt": (False, _boolean),
    "quad_points": (False, _integer(lo=16)),
})

_FUNCTIONAL = _object({
    "name": (True, _string("cosine", "triangle")),
    "amplitude": (False, _number(lo=0, lo_open=True)),
    "freq": (False, _number(lo=0, lo_open=True)),
})

_CHECK = _object({
    "slope_tol": (False, _number(lo=0, lo_open=True)),
    "monotone": (False, _boolean),
    "min_pass_rate": (False, _number(lo=0, hi=1, lo_open=True)),
    "r2_min": (False, _number(lo=0, hi=1)),
    "rate_ratio_tol": (False, _number(lo=0, lo_open=True)),
})

_Z0 = _array(_number(lo=0, hi=1), min_len=1)

_SCHEMAS = {
    "simulate": _object({
        "command": (True, _string(*COMMANDS)),
        "seed": (False, _integer()),
        "out": (False, _string()),
        "covariate": (True, _COVARIATE),
        "truth": (True, _TRUTH),
        "n": (True, _number(lo=1)),
        "check": (False, _CHECK),
    }),
    "fit-polya": _object({
        "command": (True, _string(*COMMANDS)),
        "seed": (False, _integer()),
        "out": (False, _string()),
        "data": (True, _string()),
        "polya": (False, _POLYA),
        "check": (False, _CHECK),
    }),
    "fit-gp": _object({
        "command": (True, _string(*COMMANDS)),
        "seed": (False, _integer()),
        "out": (False, _string()),
        "data": (True, _string()),
        "gp": (False, _GP),
        "check": (False, _CHECK),
    }),
    "rates": _object({
        "command": (True, _string(*COMMANDS)),
        "seed": (False, _integer()),
        "out": (False, _string()),
        "model": (True, _string("polya", "gp")),
        "loss": (False, _string("pointwise", "empirical-l1", "l1-nu")),
        "covariate": (True, _COVARIATE),
        "truth": (True, _TRUTH),
        "n_grid": (True, _array(_number(lo=1), min_len=2)),
        "replicates": (True, _integer(lo=1)),
        "z0": (False, _Z0),
        "polya": (False, _POLYA),
        "gp": (False, _GP),
        "check": (False, _CHECK),
    }),
    "tails": _object({
        "command": (True, _string(*COMMANDS)),
        "seed": (False, _integer()),
        "out": (False, _string()),
        "functional": (True, _FUNCTIONAL),
        "covariate": (True, _COVARIATE),
        "n_grid": (True, _array(_number(lo=1), min_len=1)),
        "replicates": (True, _integer(lo=1000)),
        "r_quantiles": (False, _array(_number(lo=0, hi=1, lo_open=True,
                                              hi_open=True), min_len=3)),
        "check": (False, _CHECK),
    }),
    "diagnose": _object({
        "command": (True, _string(*COMMANDS)),
        "seed": (False, _integer()),
        "out": (False, _string()),
        "covariate": (True, _COVARIATE),
        "n": (True, _number(lo=1)),
        "replicates": (True, _integer(lo=1)),
        "c1": (False, _number(lo=0, hi=0.5, lo_open=True, hi_open=True)),
        "delta": (False, _number(lo=0, lo_open=True)),
        "z0": (False, _Z0),
        "check": (False, _CHECK),
    }),
}


def validate_config(cfg) -> list:
    """Full list of schema violations (empty when the config is valid)."""
    if not isinstance(cfg, dict):
        return ["config: expected a JSON object"]
    command = cfg.get("command")
    if command not in _SCHEMAS:
        return [f"config.command: must be one of {sorted(_SCHEMAS)}"]
    errs = _SCHEMAS[command](cfg, "config")
    if not errs:
        errs = _semantic_checks(cfg)
    return errs


def _semantic_checks(cfg) -> list:
    errs = []
    grid = cfg.get("n_grid")
    if grid and any(b <= a for a, b in zip(grid, grid[1:])):
        errs.append("config.n_grid: must be strictly increasing")
    covariate = cfg.get("covariate", {})
    law = covariate.get("mark_law")
    if law and law.get("kind") == "discrete":
        vals, probs = law.get("values"), law.get("probs")
        if not vals or not probs or len(vals) != len(probs):
            errs.append("config.covariate.mark_law: discrete law needs "
                        "matching values and probs")
        elif abs(sum(probs) - 1.0) > 1e-9:
            errs.append("config.covariate.mark_law.probs: must sum to 1")
    z0 = cfg.get("z0")
    if z0 is not None and covariate and len(z0) != covariate.get("dim_d", 1):
        errs.append("config.z0: length must equal covariate.dim_d")
    return errs


# ---------------------------------------------------------------------------
# config -> experiment objects


def _covariate_config(cfg: dict) -> bench.CovariateConfig:
    c = cfg.get("covariate", {})
    kw = {k: c[k] for k in ("kind", "dim_D", "dim_d", "cells_per_unit",
                            "rate", "margin") if k in c}
    if "kernels" in c:
        kw["kernels"] = tuple(c["kernels"])
    if "mark_law" in c:
        kw["mark_law"] = c["mark_law"]
    return bench.CovariateConfig(**kw)


def _truth_config(cfg: dict) -> bench.TruthConfig:
    t = cfg["truth"]
    return bench.TruthConfig(kind=t["kind"], descriptor=t["descriptor"],
                             beta=t.get("beta", 1.0), beta0=t.get("beta0"))


def _polya_config(cfg: dict) -> bench.PolyaFitConfig:
    p = dict(cfg.get("polya", {}))
    p.pop("q", None)
    return bench.PolyaFitConfig(**p)


def _gp_config(cfg: dict) -> bench.GPFitConfig:
    return bench.GPFitConfig(**cfg.get("gp", {}))


def _polya_hyper(cfg: dict, depth: int) -> polyatree.PolyaHyper:
    p = cfg.get("polya", {})
    hyper = polyatree.PolyaHyper.default(
        depth,
        free_depth=min(p.get("free_depth", 2), depth),
        alpha=p.get("alpha", 1.0),
        rho_star_shape=p.get("rho_star_shape", 1.0),
        rho_star_rate=p.get("rho_star_rate", 1.0))
    if "q" in p:
        from dataclasses import replace
        hyper = replace(hyper, spike_weight=np.full(depth, float(p["q"])))
    return hyper


# ---------------------------------------------------------------------------
# artifact helpers


def _write_json(path: Path, doc) -> None:
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow(row)


def _run_dir(cfg: dict, out_override) -> Path:
    base = Path(out_override or cfg.get("out", "runs"))
    run_id = bench.config_hash(cfg)[:12]
    path = base / f"{cfg['command']}-{run_id}"
    path.mkdir(parents=True, exist_ok=True)
    return path


# ---------------------------------------------------------------------------
# command handlers: return (manifest dict, check failures list)


def _cmd_simulate(cfg, rundir, threads):
    seed = cfg.get("seed", 0)
    n = float(cfg["n"])
    covariate = _covariate_config(cfg).simulate(n, (seed, 0, 0))
    rho0 = _truth_config(cfg).build()
    raster = pointproc.intensity_raster(rho0, covariate)
    pattern = pointproc.sample_cox(raster, covariate.grid, (seed, 0, 1))
    covariates.save_field(covariate, rundir / "field")
    pointproc.save_pattern(pattern, rundir / "pattern",
                           metadata={"truth": cfg["truth"],
                                     "generator": covariate.generator})
    manifest = {"points": pattern.total,
                "integrated_intensity": float(raster.sum()
                                              * covariate.grid.cell_volume)}
    return manifest, []


def _load_run_data(data_dir):
    data = Path(data_dir)
    covariate = covariates.load_field(data / "field")
    pattern = pointproc.load_pattern(data / "pattern")
    return covariate, pattern


def _cmd_fit_polya(cfg, rundir, threads):
    covariate, pattern = _load_run_data(cfg["data"])
    n = covariate.n
    p = cfg.get("polya", {})
    depth = polyatree.default_depth(n, p.get("delta", 0.1))
    tree = build_partition(covariate.dim_d, depth)
    mass = covariates.pushforward(covariate, tree)
    counts = pointproc.bin_counts(pattern, covariate, tree)
    hyper = _polya_hyper(cfg, depth)
    post = polyatree.exact_posterior(counts, mass, hyper, n)
    polyatree.save_posterior(post, rundir / "posterior.json")
    manifest = {"depth": depth, "root_count": post.root_count,
                "pattern_total": pattern.total,
                "rho_star_mean": post.rho_star_mean()}
    failures = []
    if post.root_count != pattern.total:
        failures.append("posterior root count does not match the pattern size")
    return manifest, failures


def _cmd_fit_gp(cfg, rundir, threads):
    covariate, pattern = _load_run_data(cfg["data"])
    gpc = _gp_config(cfg)
    seed = cfg.get("seed", 0)
    level = gpc.level_for(covariate.n, covariate.dim_d)
    basis = gpprior.WaveletBasis(family=gpc.basis_family,
                                 dim_d=covariate.dim_d, max_level=level)
    link = gpprior.link_from_descriptor(gpc.link)
    target = gpprior.CoxWaveletLogLik(covariate, pattern, basis)
    init = gpprior.prior_sample_wavelet(basis, gpc.alpha, level, (seed, 11),
                                        link=link)
    beta = gpc.step_beta
    if gpc.adapt:
        beta, init = gpprior.tune_pcn_beta(init, target, (seed, 12),
                                           beta0=gpc.step_beta)
    chain = gpprior.pcn_chain(init, target, beta, gpc.iters, (seed, 13),
                              thin=gpc.thin)
    gpprior.save_chain(chain, rundir / "chain",
                       snapshot_every=max(gpc.thin * 10, 100))
    keep = [s for i, s in enumerate(chain.states)
            if (i + 1) * gpc.thin > gpc.burnin]
    pts = np.linspace(0.0, 1.0, 513)[:, None] if covariate.dim_d == 1 else None
    manifest = {"level": level, "step_beta": beta,
                "acceptance_rate": chain.acceptance_rate,
                "kept_states": len(keep)}
    if pts is not None and keep:
        post_mean = np.mean([s(pts) for s in keep], axis=0)
        _write_csv(rundir / "posterior_mean.csv", ["z", "rho"],
                   [(f"{z:.6f}", f"{v:.17g}") for z, v in
                    zip(pts[:, 0], post_mean)])
    failures = []
    if gpc.adapt and not 0.05 <= chain.acceptance_rate <= 0.95:
        failures.append("pCN acceptance rate escaped the tuned band")
    return manifest, failures


def _cmd_rates(cfg, rundir, threads):
    exp = bench.RateExperiment(
        model=cfg["model"], covariate=_covariate_config(cfg),
        truth=_truth_config(cfg), n_grid=tuple(cfg["n_grid"]),
        replicates=cfg["replicates"], loss=cfg.get("loss", "pointwise"),
        z0=tuple(cfg.get("z0", (0.3,))), seed=cfg.get("seed", 0),
        polya=_polya_config(cfg), gp=_gp_config(cfg))
    result = bench.run_rate(exp, threads=threads)
    _write_csv(rundir / "results.csv", ["n", "replicate", "loss", "value"],
               [(n, r, name, f"{v:.17g}") for n, r, name, v in result.rows])
    ns = np.asarray(exp.n_grid, dtype=float)
    theory = result.mean_losses[0] * (ns / ns[0]) ** result.theoretical
    svgplot.line_plot(rundir / "loss.svg",
                      [("mean loss", ns, result.mean_losses),
                       ("theory slope", ns, theory)],
                      title="posterior loss vs window volume",
                      xlabel="n", ylabel="loss", logx=True, logy=True)
    manifest = {"slope": result.slope.slope, "stderr": result.slope.stderr,
                "r_squared": result.slope.r_squared,
                "theoretical_exponent": result.theoretical,
                "mean_losses": result.mean_losses.tolist(),
                "failures": result.failures}
    failures = []
    check = cfg.get("check", {})
    tol = check.get("slope_tol", 0.15)
    if check.get("monotone"):
        if not np.all(np.diff(result.mean_losses) < 0):
            failures.append("mean loss is not strictly decreasing in n")
    elif abs(result.slope.slope - result.theoretical) > tol:
        failures.append(
            f"slope {result.slope.slope:.3f} further than {tol} from "
            f"{result.theoretical:.3f}")
    return manifest, failures


def _cmd_tails(cfg, rundir, threads):
    exp = bench.TailExperiment(
        functional=cfg["functional"], covariate=_covariate_config(cfg),
        n_grid=tuple(cfg["n_grid"]), replicates=cfg["replicates"],
        r_quantiles=tuple(cfg.get("r_quantiles",
                                  (0.5, 0.65, 0.8, 0.9, 0.95, 0.98, 0.995))),
        seed=cfg.get("seed", 0))
    result = bench.run_tails(exp, threads=threads)
    _write_csv(rundir / "results.csv", ["n", "r", "exceedance", "replicates"],
               [(n, f"{r:.17g}", f"{p:.17g}", m) for n, r, p, m in result.rows])
    series = []
    for fit in result.fits:
        n = fit["n"]
        pts = [(r, p) for (nn, r, p, _) in result.rows if nn == n and p > 0]
        xs = [min(r, r * r) if exp.covariate.kind == "voronoi" else r * r
              for r, _ in pts]
        series.append((f"n={int(n)}", np.asarray(xs),
                       np.asarray([p for _, p in pts])))
    svgplot.line_plot(rundir / "tails.svg", series,
                      title="empirical exceedance", xlabel="r^2 scale",
                      ylabel="P(|X| >= r)", logy=True)
    manifest = {"fits": result.fits, "rate_ratios": result.rate_ratios}
    failures = []
    check = cfg.get("check", {})
    r2_min = check.get("r2_min", 0.9)
    ratio_tol = check.get("rate_ratio_tol", 0.25)
    for fit in result.fits:
        if fit["r_squared"] < r2_min:
            failures.append(f"n={fit['n']:.0f}: exceedance fit R^2 "
                            f"{fit['r_squared']:.3f} below {r2_min}")
    for i, ratio in enumerate(result.rate_ratios):
        expected = exp.n_grid[i + 1] / exp.n_grid[i]
        if abs(ratio / expected - 1.0) > ratio_tol:
            failures.append(
                f"rate ratio {ratio:.2f} vs expected {expected:.2f}")
    return manifest, failures


def _cmd_diagnose(cfg, rundir, threads):
    exp = bench.DiagnoseExperiment(
        covariate=_covariate_config(cfg), n=float(cfg["n"]),
        replicates=cfg["replicates"], c1=cfg.get("c1", 0.1),
        delta=cfg.get("delta", 0.1), z0=tuple(cfg.get("z0", (0.3,))),
        seed=cfg.get("seed", 0))
    result = bench.run_diagnose(exp, threads=threads)
    _write_csv(rundir / "results.csv",
               ["replicate", "passed", "worst_alpha_margin", "worst_mass_ratio"],
               [(r, int(ok), f"{wa:.17g}", f"{wm:.17g}")
                for r, ok, wa, wm in result.rows])
    manifest = {"pass_rate": result.pass_rate, "depth": result.depth}
    failures = []
    min_rate = cfg.get("check", {}).get("min_pass_rate", 0.95)
    if result.pass_rate < min_rate:
        failures.append(f"pass rate {result.pass_rate:.2f} below {min_rate}")
    return manifest, failures


_HANDLERS = {
    "simulate": _cmd_simulate,
    "fit-polya": _cmd_fit_polya,
    "fit-gp": _cmd_fit_gp,
    "rates": _cmd_rates,
    "tails": _cmd_tails,
    "diagnose": _cmd_diagnose,
}


def run(cfg: dict, out=None, threads: int = 1, check: bool = False) -> int:
    """Validate, execute, persist; returns the process exit code."""
    errors = validate_config(cfg)
    if errors:
        for e in errors:
            print(e, file=sys.stderr)
        return EXIT_CONFIG
    rundir = _run_dir(cfg, out)
    _write_json(rundir / "config.json", cfg)
    try:
        manifest, failures = _HANDLERS[cfg["command"]](cfg, rundir, threads)
    except Exception as exc:   # runtime failure after a valid config
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    manifest = {"command": cfg["command"],
                "config_hash": bench.config_hash(cfg),
                "seed": cfg.get("seed", 0),
                **manifest}
    if check:
        manifest["check_failures"] = failures
    _write_json(rundir / "manifest.json", manifest)
    print(f"artifacts in {rundir}")
    if check and failures:
        for f in failures:
            print(f"check failed: {f}", file=sys.stderr)
        return EXIT_CHECK
    return EXIT_OK


def _load_config(path):
    try:
        with open(path) as fh:
            return json.load(fh), None
    except OSError as exc:
        return None, f"cannot read config: {exc}"
    except json.JSONDecodeError as exc:
        return None, f"config is not valid JSON: {exc}"


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="coxcov",
        description="covariate-driven Cox process simulation and inference")
    sub = parser.add_subparsers(dest="action", required=True)
    runp = sub.add_parser("run", help="execute the command in a config file")
    runp.add_argument("--config", required=True)
    runp.add_argument("--seed", type=int, default=None,
                      help="override the config seed")
    runp.add_argument("--out", default=None, help="output directory root")
    runp.add_argument("--threads", type=int, default=1)
    runp.add_argument("--check", action="store_true",
                      help="exit 3 if acceptance-level checks fail")
    valp = sub.add_parser("validate", help="schema-check a config file")
    valp.add_argument("--config", required=True)
    args = parser.parse_args(argv)

    cfg, err = _load_config(args.config)
    if err:
        print(err, file=sys.stderr)
        return EXIT_CONFIG
    if args.action == "validate":
        errors = validate_config(cfg)
        if errors:
            for e in errors:
                print(e, file=sys.stderr)
            return EXIT_CONFIG
        print("OK")
        return EXIT_OK
    if args.seed is not None:
        cfg = {**cfg, "seed": args.seed}
    return run(cfg, out=args.out, threads=args.threads, check=args.check)


if __name__ == "__main__":
    sys.exit(main())
