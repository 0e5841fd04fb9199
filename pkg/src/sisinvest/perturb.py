"""Attack-rate perturbation machinery.

Perturbing the external attack rates by a small eps > 0 makes the stable
equilibrium unique and strictly positive, restores a nonsingular
equilibrium Jacobian and lets gradient-based optimization work on weakly
connected graphs.  This module builds perturbation vectors, sweeps eps
toward zero and exposes the equilibrium sensitivity with respect to eps.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dynamics import BreachModel, stable_equilibrium
from .errors import InputError, NumericError
from .graph import DependenceGraph, condense

UNIFORM = "uniform"
SELECTIVE = "selective"

#: default sweep grid: log-spaced, covering the plot range down to 1e-5
DEFAULT_EPS_GRID = tuple(np.logspace(-1, -5, 17))


@dataclass(frozen=True)
class PerturbationScheme:
    """Uniform (every node) or selective (target set) perturbation by eps.

    A selective scheme must hit at least one node in every accessible MSCC,
    otherwise positivity of the perturbed equilibrium is not guaranteed.
    """

    mode: str = UNIFORM
    epsilon: float = 1e-3
    targets: tuple = ()

    def __post_init__(self):
        if self.mode not in (UNIFORM, SELECTIVE):
            raise InputError(f"unknown perturbation mode {self.mode!r}")
        if self.epsilon <= 0:
            raise InputError("epsilon must be positive")
        if self.mode == SELECTIVE and not self.targets:
            raise InputError("selective mode requires a target node set")

    def vector(self, n: int, epsilon=None) -> np.ndarray:
        eps = self.epsilon if epsilon is None else float(epsilon)
        if self.mode == UNIFORM:
            return np.full(n, eps)
        v = np.zeros(n)
        v[list(self.targets)] = eps
        return v

    def validate_coverage(self, g: DependenceGraph, condensation=None):
        """Check that every accessible MSCC contains a perturbed node."""
        if self.mode == UNIFORM:
            return
        cond = condensation if condensation is not None else condense(g)
        targets = set(self.targets)
        for v in range(cond.m):
            if cond.exposed[v]:
                continue
            if not (targets & cond.msccs[v]):
                raise InputError(
                    f"selective perturbation misses accessible MSCC {v}")


@dataclass
class SweepPoint:
    epsilon: float
    p_bar: np.ndarray
    deviation: float      # inf-norm distance to the unperturbed equilibrium


@dataclass
class SweepResult:
    points: list
    p_bar0: np.ndarray    # unperturbed (eps = 0) stable equilibrium


def sweep_equilibrium(g: DependenceGraph, s, epsilons,
                      scheme: PerturbationScheme | None = None) -> SweepResult:
    """Equilibria along a strictly decreasing positive eps sequence.

    Each solve is warm-started from the previous point; the conditioning
    of the equilibrium Jacobian degrades as eps shrinks, so the sweep is
    sequential by contract.  The unperturbed equilibrium is solved last
    (warm-started from the smallest eps) and used for the deviations.
    """
    epsilons = [float(e) for e in epsilons]
    if any(e <= 0 for e in epsilons):
        raise InputError("sweep epsilons must be strictly positive")
    if any(b >= a for a, b in zip(epsilons, epsilons[1:])):
        raise InputError("sweep epsilons must be strictly decreasing")
    scheme = scheme or PerturbationScheme(mode=UNIFORM, epsilon=epsilons[0])
    cond = condense(g)
    scheme.validate_coverage(g, cond)

    solutions = []
    warm = None
    for e in epsilons:
        try:
            eq = stable_equilibrium(g, s, scheme.vector(g.n, e), p0=warm,
                                    condensation=cond)
        except NumericError as exc:
            raise NumericError(f"sweep failed at eps={e:.3e}: {exc}",
                               last_iterate=exc.last_iterate) from exc
        solutions.append(eq.p_bar)
        warm = eq.p_bar
    eq0 = stable_equilibrium(g, s, 0.0, p0=warm, condensation=cond)
    points = [SweepPoint(epsilon=e, p_bar=p,
                         deviation=float(np.max(np.abs(p - eq0.p_bar))))
              for e, p in zip(epsilons, solutions)]
    return SweepResult(points=points, p_bar0=eq0.p_bar)


def sensitivity_eps(g: DependenceGraph, s, eps,
                    scheme: PerturbationScheme | None = None) -> np.ndarray:
    """Derivative of the perturbed equilibrium with respect to eps.

    Solves [-dg/dp] x = (1 - p_bar) on the perturbed mask; the equilibrium
    Jacobian is a nonsingular M-matrix for eps > 0, so the result is
    strictly positive for uniform schemes.
    """
    if float(np.max(np.atleast_1d(eps))) <= 0:
        raise InputError("sensitivity requires eps > 0")
    scheme = scheme or PerturbationScheme(mode=UNIFORM, epsilon=float(eps))
    eps_vec = scheme.vector(g.n, eps)
    eq = stable_equilibrium(g, s, eps_vec)
    p = eq.p_bar
    B = g.infection_matrix()
    dinv_delta = BreachModel.from_graph(g).d_of_s(np.asarray(s, float)) * g.delta
    J = np.diag(1.0 - p) @ B - np.diag(dinv_delta + g.lam + eps_vec + B @ p)
    rhs = (1.0 - p) * (scheme.vector(g.n, 1.0))  # d lam^eps / d eps
    try:
        return np.linalg.solve(-J, rhs)
    except np.linalg.LinAlgError as exc:
        raise NumericError("singular equilibrium Jacobian") from exc
