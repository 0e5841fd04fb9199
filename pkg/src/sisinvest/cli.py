"""Command-line driver for reproducible experiments.

Subcommands: ``gen`` writes a generated network JSON, ``solve`` runs the
optimizers at one perturbation level, ``sweep`` tabulates bounds over a
perturbation grid (CSV) and ``equilibrium`` reports the stable equilibrium
with per-component regimes.  Every output embeds the config hash and seeds
so reruns are bit-identical.

Exit codes: 0 success, 2 input error, 3 solver failure, 4 validation
failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import __version__
from .dynamics import BreachModel, integrate_ode, stable_equilibrium
from .errors import InputError, NumericError, SisInvestError, SolverError
from .graph import DependenceGraph, add_cross_edges, build_graph, condense, \
    generate_scale_free
from .perturb import DEFAULT_EPS_GRID
from .relax import BoundsReport, DomainSpec, build_relaxation, \
    check_exactness, recover_feasible, solve_barrier
from .rgm import FeasibleSet, LinearCost, RgmSettings, solve_rgm

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_SOLVER = 3
EXIT_VALIDATION = 4


@dataclass
class ExperimentConfig:
    """Everything needed to regenerate and solve one experiment."""

    # generator
    sizes: tuple = (50, 150)
    power: float = 1.5
    min_deg: int = 2
    max_deg: int | None = None          # default: ceil(3 log size) per part
    cross_edges: int = 10
    seed: int = 0
    # parameters
    delta: float = 0.1
    beta_range: tuple = (0.01, 1.0)
    kappa_rule: str = "inv_delta"
    attacked_count: int = 10
    attack_rate: float = 0.1
    attacked_part: int = 1              # index of the part holding attacks
    # cost
    nu: float = 1.1
    c_rand_weight: float = 0.2
    c_rand_seed: int = 1
    # optimization
    feasible_kind: str = "nonneg_orthant"
    budget: float = 0.0
    eps_grid: tuple = tuple(DEFAULT_EPS_GRID)
    grad_tol: float = 1e-6
    max_iters: int = 10_000

    def to_dict(self) -> dict:
        d = asdict(self)
        for key in ("sizes", "beta_range", "eps_grid"):
            d[key] = list(d[key])
        return d

    @staticmethod
    def from_dict(data: dict) -> "ExperimentConfig":
        cfg = ExperimentConfig()
        known = set(asdict(cfg))
        unknown = set(data) - known
        if unknown:
            raise InputError(f"unknown config keys: {sorted(unknown)}")
        merged = {**cfg.to_dict(), **data}
        for key in ("sizes", "beta_range", "eps_grid"):
            merged[key] = tuple(merged[key])
        return ExperimentConfig(**merged)

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def generate_network(cfg: ExperimentConfig) -> DependenceGraph:
    """Two bidirectional scale-free MSCCs joined by one-way cross edges."""
    rng = np.random.default_rng(cfg.seed)
    parts = []
    offset = 0
    offsets = []
    for k, size in enumerate(cfg.sizes):
        max_deg = cfg.max_deg or max(cfg.min_deg, math.ceil(3 * math.log(size)))
        und = generate_scale_free(size, cfg.power, cfg.min_deg, max_deg,
                                  seed=cfg.seed + 1000 * k)
        parts.append([(a + offset, b + offset) for a, b in und])
        offsets.append(offset)
        offset += size
    n = offset
    lo, hi = cfg.beta_range
    edges = [(a, b, float(rng.uniform(lo, hi)))
             for part in parts for a, b in part]
    lam = np.zeros(n)
    part = cfg.attacked_part
    pool = np.arange(offsets[part], offsets[part] + cfg.sizes[part])
    picks = rng.choice(pool, size=min(cfg.attacked_count, len(pool)),
                       replace=False)
    lam[picks] = cfg.attack_rate
    g = build_graph(n, edges, lam=lam, delta=cfg.delta,
                    require_connected=False)
    if cfg.cross_edges and len(cfg.sizes) > 1:
        src = range(offsets[0], offsets[0] + cfg.sizes[0])
        dst = range(offsets[1], offsets[1] + cfg.sizes[1])
        g = add_cross_edges(g, src, dst, cfg.cross_edges, cfg.beta_range,
                            seed=cfg.seed + 77)
    c_rng = np.random.default_rng(cfg.c_rand_seed)
    c_rand = c_rng.uniform(0.0, 1.0, size=n)
    B = g.infection_matrix()
    c = (cfg.nu + cfg.c_rand_weight * c_rand) * (B.T @ np.ones(n))
    return g.with_params(c=c)


def _feasible_set(cfg: ExperimentConfig) -> FeasibleSet:
    if cfg.feasible_kind == "budget_simplex":
        return FeasibleSet(kind="budget_simplex", budget=cfg.budget)
    return FeasibleSet()


def solve_instance(g: DependenceGraph, eps, method="both",
                   cfg: ExperimentConfig | None = None, s_warm=None) -> dict:
    """Run the selected optimizers and assemble a SolveReport dict."""
    cfg = cfg or ExperimentConfig()
    fs = _feasible_set(cfg)
    settings = RgmSettings(grad_tol=cfg.grad_tol, max_iters=cfg.max_iters)
    report: dict = {"epsilon": float(eps), "n": g.n, "method": method}
    timings: dict = {}
    lower = upper_rec = None
    s_start = s_warm

    if method in ("relax", "both"):
        domain = DomainSpec.from_feasible_set(fs)
        try:
            prog = build_relaxation(g, eps, domain=domain)
            sol = solve_barrier(prog)
            rec = recover_feasible(g, sol, eps, feasible=fs)
        except (NumericError, SolverError) as exc:
            raise SolverError(str(exc), method="relax",
                              stage="barrier") from exc
        lower, upper_rec = sol.value, rec.value
        timings["relax_seconds"] = sol.solve_seconds
        report.update({
            "lower": lower,
            "upper_recovered": upper_rec,
            "s_recovered": rec.s_prime.tolist(),
            "recovered_s_feasible": rec.s_feasible,
            "ep_residual": rec.ep_residual,
            "d_cap_binding": sol.d_cap_binding,
        })
        if method == "both" and s_start is None and rec.s_feasible:
            s_start = rec.s_prime

    upper_rgm = None
    if method in ("rgm", "both"):
        try:
            rg = solve_rgm(g, eps, feasible=fs, s0=s_start, settings=settings)
        except NumericError as exc:
            raise SolverError(str(exc), method="rgm",
                              stage="descent") from exc
        upper_rgm = rg.value
        report.update({
            "upper_rgm": rg.value,
            "s_rgm": rg.s.tolist(),
            "p_rgm": rg.p_bar.tolist(),
            "rgm_iterations": rg.iterations,
            "rgm_converged": rg.converged,
            "rgm_stalled": rg.stalled,
        })

    if lower is not None:
        exact = check_exactness(
            g, domain=DomainSpec.from_feasible_set(fs)).exact
        bounds = BoundsReport.from_parts(lower, upper_rec,
                                         upper_rgm=upper_rgm, exact=exact,
                                         timings=timings)
        report["bounds"] = bounds.to_dict()
    return report


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_gen(args) -> int:
    cfg = _load_config(args)
    g = generate_network(cfg)
    cond = condense(g)
    data = g.to_dict()
    data["provenance"] = {
        "config": cfg.to_dict(),
        "config_hash": cfg.hash(),
        "version": __version__,
        "msccs": cond.m,
        "levels": list(cond.levels),
    }
    out = args.out or "network.json"
    with open(out, "w") as f:
        json.dump(data, f, indent=1, sort_keys=True)
    print(f"wrote {out}: {g.n} nodes, {len(g.edges)} edges, "
          f"{cond.m} MSCCs (hash {cfg.hash()})")
    return EXIT_OK


def cmd_solve(args) -> int:
    cfg = _load_config(args)
    g = DependenceGraph.load(args.network)
    if args.epsilon <= 0:
        raise InputError("solve requires epsilon > 0")
    report = solve_instance(g, args.epsilon, method=args.method, cfg=cfg)
    report["config_hash"] = cfg.hash()
    out = args.out or "solve_report.json"
    with open(out, "w") as f:
        json.dump(report, f, indent=1, sort_keys=True)
    print(f"wrote {out}")
    if "bounds" in report:
        b = report["bounds"]
        print(f"lower={b['lower']:.8g} upper_recovered={b['upper_recovered']:.8g} "
              f"upper_rgm={b['upper_rgm']} exact={b['exact']} "
              f"gap_rel={b['gap_rel']:.3g}")
    return EXIT_OK


def _sweep_point(payload):
    g, eps, cfg, s_warm = payload
    try:
        return eps, solve_instance(g, eps, method="both", cfg=cfg,
                                   s_warm=s_warm), None
    except SisInvestError as exc:
        return eps, None, str(exc)


def cmd_sweep(args) -> int:
    cfg = _load_config(args)
    g = DependenceGraph.load(args.network)
    grid = [float(e) for e in (args.eps_grid.split(",") if args.eps_grid
                               else cfg.eps_grid)]
    if any(b >= a for a, b in zip(grid, grid[1:])):
        raise InputError("eps grid must be strictly decreasing")
    rows = []
    failures = []
    if args.parallel:
        with ProcessPoolExecutor() as pool:
            results = list(pool.map(
                _sweep_point, [(g, e, cfg, None) for e in grid]))
    else:
        results = []
        s_warm = None
        for e in grid:
            eps, rep, err = _sweep_point((g, e, cfg, s_warm))
            results.append((eps, rep, err))
            if rep is not None and "s_rgm" in rep:
                s_warm = np.asarray(rep["s_rgm"])
    for eps, rep, err in results:
        if rep is None:
            failures.append((eps, err))
            continue
        b = rep["bounds"]
        rows.append((eps, b["lower"] / g.n, b["upper_recovered"] / g.n,
                     (b["upper_rgm"] / g.n if b["upper_rgm"] is not None
                      else float("nan")), b["gap_rel"]))
    out = args.out or "sweep.csv"
    with open(out, "w") as f:
        f.write("epsilon,lower_per_node,upper_recovered_per_node,"
                "upper_rgm_per_node,gap_rel\n")
        for r in rows:
            f.write(",".join(f"{v:.12g}" for v in r) + "\n")
    print(f"wrote {out} ({len(rows)} rows, {len(failures)} failures)")
    for eps, err in failures:
        print(f"  failed at eps={eps:g}: {err}", file=sys.stderr)
    return EXIT_OK if rows else EXIT_SOLVER


def cmd_equilibrium(args) -> int:
    g = DependenceGraph.load(args.network)
    if args.s_file:
        s = np.asarray(json.load(open(args.s_file)), float)
    else:
        s = np.zeros(g.n)
    eq = stable_equilibrium(g, s, args.epsilon)
    cond = eq.condensation
    # conditioning of the equilibrium Jacobian; large near eps = 0
    B = g.infection_matrix()
    lam_eps = g.lam + args.epsilon
    dd = BreachModel.from_graph(g).d_of_s(s) * g.delta
    J = np.diag(1.0 - eq.p_bar) @ B - np.diag(dd + lam_eps + B @ eq.p_bar)
    cond_est = float(np.linalg.cond(J))
    result = {
        "epsilon": args.epsilon,
        "p_bar": eq.p_bar.tolist(),
        "residual_inf": eq.residual_inf,
        "effective_lambda": eq.effective_lambda.tolist(),
        "jacobian_condition": cond_est,
        "msccs": [sorted(m) for m in cond.msccs],
        "regimes": list(eq.regimes),
        "levels": list(cond.levels),
        "exposed": list(cond.exposed),
    }
    if args.ode_check:
        ode = integrate_ode(np.full(g.n, 0.5), s, g, horizon=1000.0,
                            eps=args.epsilon)
        agree = float(np.max(np.abs(ode.terminal - eq.p_bar)))
        result["ode_max_deviation"] = agree
        result["ode_agrees"] = agree <= 1e-6
    out = args.out or "equilibrium.json"
    with open(out, "w") as f:
        json.dump(result, f, indent=1, sort_keys=True)
    print(f"wrote {out}; residual={eq.residual_inf:.2e} "
          f"cond={cond_est:.3g} regimes={eq.regimes}")
    if args.ode_check and not result["ode_agrees"]:
        return EXIT_VALIDATION
    return EXIT_OK


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

def _load_config(args) -> ExperimentConfig:
    if getattr(args, "config", None):
        with open(args.config) as f:
            cfg = ExperimentConfig.from_dict(json.load(f))
    else:
        cfg = ExperimentConfig()
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, seed=args.seed)
    if getattr(args, "nu", None) is not None:
        cfg = replace(cfg, nu=args.nu)
    return cfg


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sisinvest",
        description="SIS security-investment optimization experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    p_gen = sub.add_parser("gen", help="generate a network JSON file")
    p_gen.add_argument("--config", help="experiment config JSON")
    p_gen.add_argument("--seed", type=int)
    p_gen.add_argument("--nu", type=float)
    p_gen.add_argument("--out", help="output path (default network.json)")
    p_gen.set_defaults(func=cmd_gen)

    p_solve = sub.add_parser("solve", help="solve one perturbed instance")
    p_solve.add_argument("--network", required=True)
    p_solve.add_argument("--config")
    p_solve.add_argument("--method", choices=("rgm", "relax", "both"),
                         default="both")
    p_solve.add_argument("--epsilon", type=float, required=True)
    p_solve.add_argument("--nu", type=float)
    p_solve.add_argument("--out")
    p_solve.set_defaults(func=cmd_solve)

    p_sweep = sub.add_parser("sweep", help="bounds vs epsilon as CSV")
    p_sweep.add_argument("--network", required=True)
    p_sweep.add_argument("--config")
    p_sweep.add_argument("--eps-grid", dest="eps_grid",
                         help="comma-separated descending grid")
    p_sweep.add_argument("--parallel", action="store_true",
                         help="fan out (disables warm starts)")
    p_sweep.add_argument("--out")
    p_sweep.set_defaults(func=cmd_sweep)

    p_eq = sub.add_parser("equilibrium", help="stable equilibrium report")
    p_eq.add_argument("--network", required=True)
    p_eq.add_argument("--s-file", dest="s_file",
                      help="JSON array of investments (default zeros)")
    p_eq.add_argument("--epsilon", type=float, default=0.0)
    p_eq.add_argument("--ode-check", dest="ode_check", action="store_true")
    p_eq.add_argument("--out")
    p_eq.set_defaults(func=cmd_equilibrium)
    return parser


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    try:
        return args.func(args)
    except (InputError, FileNotFoundError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except SolverError as exc:
        print(f"solver failure [{exc.method}/{exc.stage}]: {exc}",
              file=sys.stderr)
        return EXIT_SOLVER
    except SisInvestError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
