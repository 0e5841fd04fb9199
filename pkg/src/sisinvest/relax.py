"""Convex relaxation of the perturbed investment problem.

After the change of variables d = 1/q(s), the equilibrium condition
becomes, in (d, p, y, t, U) with p = e^-y, t = lam^eps * e^y and
U = diag(e^y) B diag(e^-y):

    t + U 1 = lam^eps + B p + d * delta

Relaxing the defining equalities of p, t and U to convex inequalities
gives a smooth convex program whose optimal value is a certified lower
bound on the perturbed optimum.  A feasible point of the equivalent
problem (an upper bound) is recovered from the relaxation optimum, and an
elementwise gradient condition certifies when the two coincide.

The program is solved in-repo with an equality-constrained log-barrier
Newton method over sparse KKT systems; no external conic solver is used.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .dynamics import BreachModel, as_eps_vector
from .errors import InputError, NumericError, SolverError
from .graph import DependenceGraph
from .rgm import BUDGET_SIMPLEX, NONNEG_ORTHANT, FeasibleSet, LinearCost

D_MAX_DEFAULT = 1e6
EP_RESIDUAL_TOL = 1e-8


@dataclass(frozen=True)
class DomainSpec:
    """Constraint set for d = 1/q(s).

    ``box``: [1, d_max]^N (d_max None means [1, inf), capped internally at
    1e6 with a report when the cap binds).  ``budget``: the image of the
    investment budget simplex, i.e. sum_i s_i(d_i) <= budget with d >= 1.
    """

    kind: str = "box"
    d_max: float | None = None
    budget: float = 0.0

    def __post_init__(self):
        if self.kind not in ("box", "budget"):
            raise InputError(f"unknown domain kind {self.kind!r}")
        if self.kind == "budget" and self.budget <= 0:
            raise InputError("budget must be positive")
        if self.d_max is not None and self.d_max <= 1:
            raise InputError("d_max must exceed 1")

    @staticmethod
    def from_feasible_set(fs: FeasibleSet) -> "DomainSpec":
        if fs.kind == NONNEG_ORTHANT:
            return DomainSpec(kind="box", d_max=None)
        return DomainSpec(kind="budget", budget=fs.budget)

    @property
    def effective_d_max(self) -> float:
        return self.d_max if self.d_max is not None else D_MAX_DEFAULT


class RelaxProgram:
    """Assembled convex program data for one (graph, eps) instance.

    Variable packing: x = [d (N), p (N), y (N), t (N), u (|E|)] where the
    u block covers the sparsity pattern of the infection matrix.
    """

    def __init__(self, g: DependenceGraph, eps, w_spec: LinearCost,
                 domain: DomainSpec):
        self.g = g
        self.n = g.n
        self.eps_vec = as_eps_vector(eps, g.n)
        self.lam_eps = g.lam + self.eps_vec
        self.w_spec = w_spec
        self.domain = domain
        self.breach = BreachModel.from_graph(g)
        self.delta = g.delta
        self.c = g.c
        B = g.infection_matrix()
        self.B = sp.csr_matrix(B)
        rows, cols = np.nonzero(B)
        self.pat_i = rows          # u_k corresponds to B[pat_i[k], pat_j[k]]
        self.pat_j = cols
        self.pat_b = B[rows, cols]
        self.n_edges = len(rows)
        self.weights = (np.ones(self.n) if w_spec.weights is None
                        else np.asarray(w_spec.weights, float))
        if np.any(self.weights < 0):
            raise SolverError(
                "investment weights must be nonnegative for a convex "
                "transformed cost; supply a convex lower bound instead",
                method="relax", stage="build")
        # offsets into the packed variable vector
        n = self.n
        self.od, self.op, self.oy, self.ot, self.ou = 0, n, 2 * n, 3 * n, 4 * n
        self.n_var = 4 * n + self.n_edges
        self.n_ineq = (5 * n + self.n_edges
                       + (n if domain.kind == "box" else 1))
        self.A, self.b_eq = self._equality_system()

    # -- pieces -------------------------------------------------------------

    def unpack(self, x):
        n = self.n
        return (x[self.od:self.od + n], x[self.op:self.op + n],
                x[self.oy:self.oy + n], x[self.ot:self.ot + n],
                x[self.ou:])

    def _equality_system(self):
        n, ne = self.n, self.n_edges
        rows, cols, vals = [], [], []
        for i in range(n):
            rows.append(i); cols.append(self.ot + i); vals.append(1.0)
            rows.append(i); cols.append(self.od + i); vals.append(-self.delta[i])
        for k in range(ne):
            rows.append(self.pat_i[k]); cols.append(self.ou + k); vals.append(1.0)
            # -B p term: row pat_i, column p_{pat_j}
            rows.append(self.pat_i[k]); cols.append(self.op + self.pat_j[k])
            vals.append(-self.pat_b[k])
        A = sp.csr_matrix((vals, (rows, cols)), shape=(n, self.n_var))
        return A, self.lam_eps.copy()

    def w_tilde(self, d):
        """Transformed investment cost w(s(d))."""
        return float(self.weights @ self.breach.s_of_d(d))

    def grad_w_tilde(self, d):
        b = self.breach.exponent
        return self.weights * (1.0 / b) * d ** (1.0 / b - 1.0) / self.breach.kappa

    def _hess_w_tilde_diag(self, d):
        b = self.breach.exponent
        return self.weights * (1.0 / b) * (1.0 / b - 1.0) * d ** (1.0 / b - 2.0) \
            / self.breach.kappa

    def objective(self, x):
        d, p, _, _, _ = self.unpack(x)
        return self.w_tilde(d) + float(self.c @ p)

    def slacks(self, x):
        """Positive parts -g_k of every inequality, grouped."""
        d, p, y, t, u = self.unpack(x)
        with np.errstate(over="ignore"):
            emy = np.exp(-y)
            ey = np.exp(np.minimum(y, 700.0))
            eyd = np.exp(np.clip(y[self.pat_i] - y[self.pat_j], -700.0, 700.0))
        out = {
            "p_hi": 1.0 - p,
            "p_lo": p - emy,
            "t": t - self.lam_eps * ey,
            "u": u - self.pat_b * eyd,
            "y": y.copy(),
            "d_lo": d - 1.0,
        }
        if self.domain.kind == "box":
            out["d_hi"] = self.domain.effective_d_max - d
        else:
            out["budget"] = np.array(
                [self.domain.budget - float(np.sum(self.breach.s_of_d(d)))])
        return out

    def strictly_feasible(self, x):
        sl = self.slacks(x)
        return all(np.all(np.isfinite(v)) and np.all(v > 0)
                   for v in sl.values())

    def barrier(self, x):
        sl = self.slacks(x)
        total = 0.0
        for v in sl.values():
            if np.any(v <= 0) or not np.all(np.isfinite(v)):
                return np.inf
            total -= float(np.sum(np.log(v)))
        return total

    def gradients(self, x, mu):
        """Gradient and sparse Hessian of objective + mu * barrier."""
        n, ne = self.n, self.n_edges
        d, p, y, t, u = self.unpack(x)
        sl = self.slacks(x)
        emy = np.exp(-y)
        ey = np.exp(y)
        eyd = np.exp(y[self.pat_i] - y[self.pat_j])

        grad = np.zeros(self.n_var)
        # diagonal Hessian accumulators per block
        h_dd = np.zeros(n)
        h_pp = np.zeros(n)
        h_yy = np.zeros(n)
        h_tt = np.zeros(n)
        h_uu = np.zeros(ne)
        h_py = np.zeros(n)   # coupling p_i,y_i
        h_yt = np.zeros(n)   # coupling y_i,t_i
        extra_rows, extra_cols, extra_vals = [], [], []

        # objective
        grad[self.od:self.op] += self.grad_w_tilde(d)
        grad[self.op:self.oy] += self.c
        h_dd += self._hess_w_tilde_diag(d)

        # p <= 1
        s1 = sl["p_hi"]
        grad[self.op:self.oy] += mu / s1
        h_pp += mu / s1 ** 2

        # e^-y <= p
        s2 = sl["p_lo"]
        grad[self.op:self.oy] += -mu / s2
        grad[self.oy:self.ot] += -mu * emy / s2
        h_pp += mu / s2 ** 2
        h_py += mu * emy / s2 ** 2
        h_yy += mu * emy ** 2 / s2 ** 2 + mu * emy / s2

        # lam^eps e^y <= t
        s3 = sl["t"]
        le = self.lam_eps * ey
        grad[self.oy:self.ot] += mu * le / s3
        grad[self.ot:self.ou] += -mu / s3
        h_yy += mu * le ** 2 / s3 ** 2 + mu * le / s3
        h_yt += -mu * le / s3 ** 2
        h_tt += mu / s3 ** 2

        # b_ij e^(y_i - y_j) <= u_ij
        s4 = sl["u"]
        h = self.pat_b * eyd
        gi, gj = self.pat_i, self.pat_j
        np.add.at(grad, self.oy + gi, mu * h / s4)
        np.add.at(grad, self.oy + gj, -mu * h / s4)
        grad[self.ou:] += -mu / s4
        w1 = mu * h ** 2 / s4 ** 2 + mu * h / s4   # y_i y_i and y_j y_j weight
        w2 = -w1                                   # y_i y_j coupling
        np.add.at(h_yy, gi, w1)
        np.add.at(h_yy, gj, w1)
        extra_rows += [self.oy + gi, self.oy + gj,
                       self.oy + gi, self.ou + np.arange(ne),
                       self.oy + gj, self.ou + np.arange(ne)]
        extra_cols += [self.oy + gj, self.oy + gi,
                       self.ou + np.arange(ne), self.oy + gi,
                       self.ou + np.arange(ne), self.oy + gj]
        extra_vals += [w2, w2,
                       -mu * h / s4 ** 2, -mu * h / s4 ** 2,
                       mu * h / s4 ** 2, mu * h / s4 ** 2]
        h_uu += mu / s4 ** 2

        # y >= 0
        s5 = sl["y"]
        grad[self.oy:self.ot] += -mu / s5
        h_yy += mu / s5 ** 2

        # d >= 1
        s6 = sl["d_lo"]
        grad[self.od:self.op] += -mu / s6
        h_dd += mu / s6 ** 2

        if self.domain.kind == "box":
            s7 = sl["d_hi"]
            grad[self.od:self.op] += mu / s7
            h_dd += mu / s7 ** 2
        else:
            s7 = float(sl["budget"][0])
            gb = (1.0 / self.breach.exponent) * d ** (1.0 / self.breach.exponent - 1.0) \
                / self.breach.kappa
            grad[self.od:self.op] += mu * gb / s7
            # rank-one over the d block plus diagonal curvature
            sb = (1.0 / self.breach.exponent) * (1.0 / self.breach.exponent - 1.0) \
                * d ** (1.0 / self.breach.exponent - 2.0) / self.breach.kappa
            h_dd += mu * sb / s7
            dr = self.od + np.arange(n)
            r1 = np.repeat(dr, n)
            c1 = np.tile(dr, n)
            extra_rows.append(r1)
            extra_cols.append(c1)
            extra_vals.append(np.outer(gb, gb).ravel() * mu / s7 ** 2)

        rows = [np.arange(self.od, self.op), np.arange(self.op, self.oy),
                np.arange(self.oy, self.ot), np.arange(self.ot, self.ou),
                np.arange(self.ou, self.n_var),
                np.arange(self.op, self.oy), np.arange(self.oy, self.ot),
                np.arange(self.oy, self.ot), np.arange(self.ot, self.ou)]
        cols = [np.arange(self.od, self.op), np.arange(self.op, self.oy),
                np.arange(self.oy, self.ot), np.arange(self.ot, self.ou),
                np.arange(self.ou, self.n_var),
                np.arange(self.oy, self.ot), np.arange(self.op, self.oy),
                np.arange(self.ot, self.ou), np.arange(self.oy, self.ot)]
        vals = [h_dd, h_pp, h_yy, h_tt, h_uu, h_py, h_py, h_yt, h_yt]
        rows = np.concatenate(rows + [np.concatenate(extra_rows)])
        cols = np.concatenate(cols + [np.concatenate(extra_cols)])
        vals = np.concatenate(vals + [np.concatenate(extra_vals)])
        H = sp.csr_matrix((vals, (rows, cols)),
                          shape=(self.n_var, self.n_var))
        return grad, H

    def multiplier_estimates(self, x, mu):
        """Barrier multiplier estimates mu / slack per inequality group."""
        sl = self.slacks(x)
        return {name: mu / v for name, v in sl.items()}


def build_relaxation(g: DependenceGraph, eps, w_spec: LinearCost | None = None,
                     domain: DomainSpec | None = None) -> RelaxProgram:
    """Assemble the convex program for one instance; see RelaxProgram."""
    return RelaxProgram(g, eps, w_spec or LinearCost(),
                        domain or DomainSpec(kind="box", d_max=None))


# ---------------------------------------------------------------------------
# Interior point construction
# ---------------------------------------------------------------------------

def _initial_point(prog: RelaxProgram):
    n = prog.n
    lam = prog.lam_eps
    B1 = np.asarray(prog.B.sum(axis=1)).ravel()

    def assemble(y0, slack_factor, p_val):
        p = np.full(n, p_val)
        ey = np.exp(y0)
        u = slack_factor * prog.pat_b * np.exp(
            y0 * np.ones(prog.n_edges) * 0.0)  # uniform y: e^(yi-yj) = 1
        U1 = np.zeros(n)
        np.add.at(U1, prog.pat_i, u)
        Bp = prog.B @ p
        t_lo = lam * ey
        d = (slack_factor * t_lo + U1 - lam - Bp) / prog.delta
        d_need = ((t_lo * (1.0 + 1e-3) + 1e-9) + U1 - lam - Bp) / prog.delta
        d = np.maximum.reduce([d, d_need, np.full(n, 1.0 + 1e-6)])
        t = lam + Bp + d * prog.delta - U1
        y = np.full(n, y0)
        x = np.concatenate([d, p, y, t, u])
        return x

    if prog.domain.kind == "box":
        x = assemble(1.0, 2.0, 0.5)
        d = prog.unpack(x)[0]
        if np.any(d >= prog.domain.effective_d_max):
            raise SolverError("initial point exceeds d_max; increase d_max",
                              method="relax", stage="init")
        if not prog.strictly_feasible(x):
            raise SolverError("interior-point construction failed",
                              method="relax", stage="init")
        return x

    # budget mode: scan y0 upward until d >= 1 is reachable inside the budget
    for y0 in np.concatenate([np.logspace(-3, 1, 40), np.linspace(11, 40, 30)]):
        p_val = min(np.exp(-y0) * (1.0 + 1e-3), 1.0 - 1e-9)
        x = assemble(y0, 1.0 + 1e-3, p_val)
        if prog.strictly_feasible(x):
            return x
    raise SolverError("no strictly feasible start inside the budget",
                      method="relax", stage="init")


# ---------------------------------------------------------------------------
# Barrier solver
# ---------------------------------------------------------------------------

@dataclass
class RelaxVariables:
    d: np.ndarray
    p: np.ndarray
    y: np.ndarray
    t: np.ndarray
    u: np.ndarray            # on the sparsity pattern of B
    pattern: tuple           # (rows, cols) of the pattern


@dataclass
class RelaxSolution:
    variables: RelaxVariables     # polished primal optimum
    central: RelaxVariables       # last barrier central point
    value: float                  # objective at the polished point
    sigma: np.ndarray             # equality multipliers
    duals: dict                   # barrier multiplier estimates per group
    mu_final: float
    n_ineq: int
    newton_iters: int
    d_cap_binding: bool
    equality_residual: float
    solve_seconds: float


def solve_barrier(prog: RelaxProgram, mu0=1.0, mu_min=1e-10, mu_factor=10.0,
                  newton_tol=1e-8, max_newton=60) -> RelaxSolution:
    """Equality-constrained log-barrier path following.

    The equality rows stay explicit in each Newton KKT system; all
    inequalities enter through -sum log(-g).  The barrier parameter drops
    by mu_factor per stage from mu0 to mu_min, with damped Newton inside
    each stage.  Finishes by snapping the t and U constraints (active at
    any optimum) and rebalancing d through the equality rows.
    """
    t_start = time.perf_counter()
    x = _initial_point(prog)
    A = prog.A
    n_eq = A.shape[0]
    sigma = np.zeros(n_eq)
    total_newton = 0

    mu = mu0
    while True:
        for _ in range(max_newton):
            grad, H = prog.gradients(x, mu)
            K = sp.bmat([[H + 1e-13 * sp.eye(prog.n_var), A.T],
                         [A, None]], format="csc")
            rhs = np.concatenate([-grad, np.zeros(n_eq)])
            try:
                sol = spla.splu(K).solve(rhs)
            except RuntimeError as exc:
                raise NumericError(
                    f"KKT factorization failed at mu={mu:.1e}: {exc}") from exc
            dx = sol[:prog.n_var]
            sigma = sol[prog.n_var:]
            kkt_res = float(np.max(np.abs(grad + A.T @ sigma)))
            decrement = float(-grad @ dx)
            if kkt_res <= newton_tol or decrement * 0.5 <= 1e-16:
                break
            # backtracking: stay strictly feasible, then Armijo decrease
            merit = prog.objective(x) + mu * prog.barrier(x)
            alpha = 1.0
            accepted = False
            for _ in range(60):
                trial = x + alpha * dx
                m_trial = prog.objective(trial) + mu * prog.barrier(trial)
                if np.isfinite(m_trial) and \
                        m_trial <= merit - 1e-4 * alpha * decrement:
                    x = trial
                    accepted = True
                    break
                alpha *= 0.5
            total_newton += 1
            if not accepted:
                if kkt_res < 1e-4:
                    break
                raise NumericError(
                    f"Newton stalled at barrier stage mu={mu:.1e} "
                    f"(kkt residual {kkt_res:.2e})")
        if mu <= mu_min * (1.0 + 1e-12):
            break
        mu = max(mu / mu_factor, mu_min)

    duals = prog.multiplier_estimates(x, mu)
    central = _to_variables(prog, x)

    # polish: snap t and U to their (active) bounds, rebalance d via equality
    d, p, y, t, u = (v.copy() for v in prog.unpack(x))
    t_act = prog.lam_eps * np.exp(y)
    u_act = prog.pat_b * np.exp(y[prog.pat_i] - y[prog.pat_j])
    U1 = np.zeros(prog.n)
    np.add.at(U1, prog.pat_i, u_act)
    Bp = prog.B @ p
    d_raw = (t_act + U1 - prog.lam_eps - Bp) / prog.delta
    d_pol = np.maximum(d_raw, 1.0)
    t_pol = t_act + (d_pol - d_raw) * prog.delta   # absorb d clipping
    x_pol = np.concatenate([d_pol, p, y, t_pol, u_act])
    eq_res = float(np.max(np.abs(A @ x_pol - prog.b_eq)))

    variables = _to_variables(prog, x_pol)
    return RelaxSolution(
        variables=variables,
        central=central,
        value=prog.objective(x_pol),
        sigma=sigma,
        duals=duals,
        mu_final=mu,
        n_ineq=prog.n_ineq,
        newton_iters=total_newton,
        d_cap_binding=bool(prog.domain.kind == "box" and prog.domain.d_max is None
                           and np.any(d_pol > 0.99 * D_MAX_DEFAULT)),
        equality_residual=eq_res,
        solve_seconds=time.perf_counter() - t_start,
    )


def _to_variables(prog: RelaxProgram, x) -> RelaxVariables:
    d, p, y, t, u = prog.unpack(x)
    return RelaxVariables(d=d.copy(), p=p.copy(), y=y.copy(), t=t.copy(),
                          u=u.copy(), pattern=(prog.pat_i, prog.pat_j))


# ---------------------------------------------------------------------------
# Recovery and exactness
# ---------------------------------------------------------------------------

@dataclass
class Recovery:
    d_prime: np.ndarray
    p_prime: np.ndarray
    s_prime: np.ndarray
    value: float             # transformed objective at (d', p')
    ep_residual: float       # equality residual of the equivalent problem
    s_feasible: bool         # s' inside the investment feasible set


def recover_feasible(g: DependenceGraph, sol: RelaxSolution, eps,
                     w_spec: LinearCost | None = None,
                     feasible: FeasibleSet | None = None) -> Recovery:
    """Feasible point of the equivalent problem from a relaxation optimum.

    p' = e^-y and d' = d + diag(1/delta) B (p - p').  The pair satisfies
    the equilibrium equality up to the residual reported here; s' may
    exceed a budget constraint, which is flagged rather than hidden.
    """
    w_spec = w_spec or LinearCost()
    feasible = feasible or FeasibleSet()
    breach = BreachModel.from_graph(g)
    lam_eps = g.lam + as_eps_vector(eps, g.n)
    B = g.infection_matrix()
    v = sol.variables
    p_prime = np.exp(-v.y)
    d_prime = v.d + (B @ (v.p - p_prime)) / g.delta
    if np.any(d_prime < 1.0 - 1e-9):
        raise NumericError("recovered d' fell below 1; solver inaccuracy")
    d_prime = np.maximum(d_prime, 1.0)
    resid = (1.0 / p_prime - 1.0) * (lam_eps + B @ p_prime) - d_prime * g.delta
    ep_residual = float(np.max(np.abs(resid)))
    if ep_residual > EP_RESIDUAL_TOL:
        raise NumericError(
            f"recovered point equality residual {ep_residual:.2e} exceeds "
            f"{EP_RESIDUAL_TOL:.0e}")
    s_prime = breach.s_of_d(d_prime)
    weights = (np.ones(g.n) if w_spec.weights is None
               else np.asarray(w_spec.weights, float))
    value = float(weights @ s_prime + g.c @ p_prime)
    return Recovery(d_prime=d_prime, p_prime=p_prime, s_prime=s_prime,
                    value=value, ep_residual=ep_residual,
                    s_feasible=feasible.contains(s_prime))


@dataclass
class ExactnessResult:
    verdict: str             # "exact", "not_exact" or "inconclusive"
    margins: np.ndarray | None = None

    @property
    def exact(self) -> bool:
        return self.verdict == "exact"


def check_exactness(g: DependenceGraph, w_spec: LinearCost | None = None,
                    domain: DomainSpec | None = None,
                    tol=1e-12) -> ExactnessResult:
    """Elementwise certificate B^T diag(1/delta) grad_w_tilde(d) <= c on D.

    grad_w_tilde is monotone in d for the power breach family, so the
    supremum over a box is attained at its upper corner; for exponent 1
    the gradient is constant and any domain works.  Unbounded domains with
    exponent < 1 cannot be certified.
    """
    w_spec = w_spec or LinearCost()
    domain = domain or DomainSpec(kind="box", d_max=None)
    breach = BreachModel.from_graph(g)
    weights = (np.ones(g.n) if w_spec.weights is None
               else np.asarray(w_spec.weights, float))
    b = breach.exponent
    if domain.kind == "box":
        if domain.d_max is None and np.any(b < 1.0):
            return ExactnessResult(verdict="inconclusive")
        d_sup = np.full(g.n, domain.effective_d_max if domain.d_max is not None
                        else 1.0)  # b == 1 everywhere: gradient constant
    else:
        # whole budget on one node bounds each coordinate of D from above
        d_sup = (1.0 + breach.kappa * domain.budget) ** b
    grad_wt = weights * (1.0 / b) * d_sup ** (1.0 / b - 1.0) / breach.kappa
    margins = g.infection_matrix().T @ (grad_wt / g.delta) - g.c
    verdict = "exact" if np.all(margins <= tol) else "not_exact"
    return ExactnessResult(verdict=verdict, margins=margins)


@dataclass
class BoundsReport:
    """Sandwich of the perturbed optimal cost with an exactness verdict."""

    lower: float
    upper_recovered: float
    upper_rgm: float | None
    exact: bool
    gap_rel: float
    timings: dict = field(default_factory=dict)

    @staticmethod
    def from_parts(lower, upper_recovered, upper_rgm=None, exact=False,
                   timings=None) -> "BoundsReport":
        gap = (upper_recovered - lower) / max(1.0, abs(lower))
        return BoundsReport(lower=lower, upper_recovered=upper_recovered,
                            upper_rgm=upper_rgm, exact=exact, gap_rel=gap,
                            timings=timings or {})

    def to_dict(self) -> dict:
        return {
            "lower": self.lower,
            "upper_recovered": self.upper_recovered,
            "upper_rgm": self.upper_rgm,
            "exact": self.exact,
            "gap_rel": self.gap_rel,
            "timings": self.timings,
        }
