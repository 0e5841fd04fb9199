"""Reduced gradient method for the perturbed investment problem.

Minimizes F(s) = w(s) + c . p_bar(s) over a convex feasible set, where
p_bar(s) is the perturbed stable equilibrium.  Gradients come from the
implicit function theorem: one transposed linear solve with the
equilibrium Jacobian per gradient, then projected-gradient steps with a
backtracking (Armijo) line search.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dynamics import BreachModel, Equilibrium, as_eps_vector, stable_equilibrium
from .errors import InputError, NumericError
from .graph import DependenceGraph

NONNEG_ORTHANT = "nonneg_orthant"
BUDGET_SIMPLEX = "budget_simplex"


@dataclass(frozen=True)
class FeasibleSet:
    """Nonnegative orthant, or its intersection with a budget half-space."""

    kind: str = NONNEG_ORTHANT
    budget: float = 0.0

    def __post_init__(self):
        if self.kind not in (NONNEG_ORTHANT, BUDGET_SIMPLEX):
            raise InputError(f"unknown feasible set kind {self.kind!r}")
        if self.kind == BUDGET_SIMPLEX and self.budget <= 0:
            raise InputError("budget must be positive")

    def project(self, s: np.ndarray) -> np.ndarray:
        s = np.maximum(np.asarray(s, float), 0.0)
        if self.kind == NONNEG_ORTHANT or s.sum() <= self.budget:
            return s
        return _project_capped_simplex(s, self.budget)

    def contains(self, s, tol=1e-9) -> bool:
        s = np.asarray(s, float)
        if np.any(s < -tol):
            return False
        if self.kind == BUDGET_SIMPLEX and s.sum() > self.budget + tol:
            return False
        return True


def _project_capped_simplex(v, budget):
    """Euclidean projection onto {x >= 0, sum(x) = budget} (sort-based)."""
    u = np.sort(v)[::-1]
    css = np.cumsum(u)
    ks = np.arange(1, len(v) + 1)
    cond = u - (css - budget) / ks > 0
    k = int(np.nonzero(cond)[0][-1]) + 1
    tau = (css[k - 1] - budget) / k
    return np.maximum(v - tau, 0.0)


@dataclass(frozen=True)
class LinearCost:
    """Investment cost w(s) = weights . s (the default has unit weights)."""

    weights: np.ndarray | None = None

    def value(self, s):
        w = np.ones_like(s) if self.weights is None else self.weights
        return float(w @ s)

    def grad(self, s):
        return np.ones_like(s) if self.weights is None else np.asarray(self.weights, float)


@dataclass(frozen=True)
class RgmSettings:
    gamma0: float = 1.0
    shrink: float = 0.85
    armijo_c: float = 1e-4
    grad_tol: float = 1e-6
    max_iters: int = 10_000

    def __post_init__(self):
        if not (0.0 < self.shrink < 1.0):
            raise InputError("shrink must lie in (0, 1)")
        if self.gamma0 <= 0:
            raise InputError("gamma0 must be positive")


def objective(g: DependenceGraph, s, eps, w_spec: LinearCost | None = None,
              warm=None):
    """F(s) = w(s) + c . p_bar(s) and the equilibrium it was computed at."""
    w_spec = w_spec or LinearCost()
    s = np.asarray(s, float)
    eq = stable_equilibrium(g, s, eps, p0=warm)
    return w_spec.value(s) + float(g.c @ eq.p_bar), eq


def gradient(g: DependenceGraph, s, eps, w_spec: LinearCost | None = None,
             eq: Equilibrium | None = None):
    """Implicit-function gradient of F via a single adjoint solve.

    With d(s) = 1/q(s), the equilibrium condition depends on s only through
    the diagonal term -d(s)*delta*p, so each dF/ds_i needs just the i-th
    component of the adjoint z = [-dg/dp]^(-T) c.
    Requires eps > 0 (nonsingular Jacobian).
    """
    w_spec = w_spec or LinearCost()
    s = np.asarray(s, float)
    eps_vec = as_eps_vector(eps, g.n)
    if np.all(eps_vec == 0.0):
        raise InputError("gradient requires a positive perturbation eps")
    if eq is None:
        eq = stable_equilibrium(g, s, eps_vec)
    p = eq.p_bar
    breach = BreachModel.from_graph(g)
    B = g.infection_matrix()
    lam_eps = g.lam + eps_vec
    dd = breach.d_of_s(s) * g.delta
    J = np.diag(1.0 - p) @ B - np.diag(dd + lam_eps + B @ p)
    try:
        z = np.linalg.solve(-J.T, g.c)
    except np.linalg.LinAlgError as exc:
        raise NumericError("singular equilibrium Jacobian in gradient") from exc
    return w_spec.grad(s) - breach.d_of_s_deriv(s) * g.delta * p * z


@dataclass
class RgmResult:
    s: np.ndarray
    p_bar: np.ndarray
    value: float
    iterations: int
    converged: bool
    stalled: bool
    log: list = field(default_factory=list)   # (iter, F, step, grad_norm)

    def log_to_csv(self, path):
        with open(path, "w") as f:
            f.write("iter,F,step,grad_norm\n")
            for it, F, step, gn in self.log:
                f.write(f"{it},{F:.12g},{step:.6g},{gn:.6g}\n")


def solve_rgm(g: DependenceGraph, eps, w_spec: LinearCost | None = None,
              feasible: FeasibleSet | None = None, s0=None,
              settings: RgmSettings | None = None) -> RgmResult:
    """Projected-gradient descent with Armijo backtracking.

    Stops when the projected-gradient displacement drops below grad_tol or
    the iteration cap is hit; a dead line search (step below 1e-12) returns
    the current iterate flagged as stalled.
    """
    w_spec = w_spec or LinearCost()
    feasible = feasible or FeasibleSet()
    settings = settings or RgmSettings()
    s = feasible.project(np.zeros(g.n) if s0 is None else np.asarray(s0, float))

    F, eq = objective(g, s, eps, w_spec)
    log = []
    stalled = False
    converged = False
    it = 0
    gamma_start = settings.gamma0
    for it in range(1, settings.max_iters + 1):
        grad = gradient(g, s, eps, w_spec, eq=eq)
        stat = float(np.max(np.abs(s - feasible.project(s - grad))))
        if stat <= settings.grad_tol:
            log.append((it, F, 0.0, stat))
            converged = True
            break
        # start near the previously accepted step to avoid rediscovering a
        # small step length from gamma0 every iteration
        gamma = gamma_start
        accepted = False
        while gamma >= 1e-12:
            cand = feasible.project(s - gamma * grad)
            try:
                F_cand, eq_cand = objective(g, cand, eps, w_spec, warm=eq.p_bar)
            except NumericError:
                gamma *= settings.shrink
                continue
            if F_cand <= F + settings.armijo_c * float(grad @ (cand - s)):
                s, F, eq = cand, F_cand, eq_cand
                accepted = True
                break
            gamma *= settings.shrink
        if accepted:
            gamma_start = min(settings.gamma0, gamma / settings.shrink)
        log.append((it, F, gamma if accepted else 0.0, stat))
        if not accepted:
            stalled = True
            break
    return RgmResult(s=s, p_bar=eq.p_bar, value=F, iterations=it,
                     converged=converged, stalled=stalled, log=log)
