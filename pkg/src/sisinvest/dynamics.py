"""SIS mean-field dynamics and the stable-equilibrium solver.

The infection-probability vector obeys

    dp/dt = (1 - p) * q(s) * (lam + B p) - delta * p

where q(s) is the per-node breach probability under investment s and
B[i, j] is the rate at which node j infects node i.  The stable
equilibrium is computed component by component over the condensation DAG:
each MSCC sees a fixed effective attack rate assembled from its already
solved upstream components, and within an MSCC the equilibrium is either
zero (subcritical, unattacked), the endemic positive root (supercritical,
unattacked) or the unique positive root forced by a nonzero attack rate.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InputError, NumericError
from .graph import Condensation, DependenceGraph, condense

RESIDUAL_TOL = 1e-10
MSCC_TOL = 1e-12
RHO_TIE_TOL = 1e-9


@dataclass(frozen=True)
class BreachModel:
    """Breach probability family q(s) = (1 + kappa*s)**(-b), b in (0, 1].

    Strictly decreasing and strictly convex in s >= 0 with q(0) = 1.
    Also houses the reciprocal d = 1/q(s) and its inverse map.
    """

    kappa: np.ndarray
    exponent: np.ndarray

    @staticmethod
    def from_graph(g: DependenceGraph) -> "BreachModel":
        return BreachModel(kappa=g.kappa, exponent=g.beta_exp)

    def q(self, s):
        return (1.0 + self.kappa * s) ** (-self.exponent)

    def d_of_s(self, s):
        """d = 1/q(s) = (1 + kappa*s)**b."""
        return (1.0 + self.kappa * s) ** self.exponent

    def s_of_d(self, d):
        """Inverse map: s with q(s) = 1/d, valid for d >= 1."""
        return (np.asarray(d, float) ** (1.0 / self.exponent) - 1.0) / self.kappa

    def d_of_s_deriv(self, s):
        """Derivative of d = 1/q(s) with respect to s (positive)."""
        return self.exponent * self.kappa * (1.0 + self.kappa * s) ** (self.exponent - 1.0)


def as_eps_vector(eps, n):
    eps = np.asarray(eps, float)
    if eps.ndim == 0:
        eps = np.full(n, float(eps))
    if eps.shape != (n,):
        raise InputError(f"epsilon must be scalar or length-{n} vector")
    if np.any(eps < 0):
        raise InputError("epsilon must be nonnegative")
    return eps


def dynamics_rhs(p, s, g: DependenceGraph, eps=0.0):
    """Velocity (1-p) * q(s) * (lam^eps + B p) - delta * p."""
    p = np.asarray(p, float)
    s = np.asarray(s, float)
    if p.shape != (g.n,) or s.shape != (g.n,):
        raise InputError(f"p and s must have shape ({g.n},)")
    lam_eps = g.lam + as_eps_vector(eps, g.n)
    q = BreachModel.from_graph(g).q(s)
    return (1.0 - p) * q * (lam_eps + g.infection_matrix() @ p) - g.delta * p


def equilibrium_map(g: DependenceGraph, s, eps=0.0):
    """Residual g(eps, p) = (1-p)*(lam^eps + Bp) - (1/q)*delta*p as a closure."""
    lam_eps = g.lam + as_eps_vector(eps, g.n)
    d = BreachModel.from_graph(g).d_of_s(np.asarray(s, float))
    B = g.infection_matrix()
    dd = d * g.delta

    def residual(p):
        return (1.0 - p) * (lam_eps + B @ p) - dd * p

    def jacobian(p):
        Bp = B @ p
        return np.diag(1.0 - p) @ B - np.diag(dd + lam_eps + Bp)

    return residual, jacobian


# ---------------------------------------------------------------------------
# ODE oracle
# ---------------------------------------------------------------------------

@dataclass
class OdeResult:
    times: np.ndarray
    states: np.ndarray       # sampled trajectory, one row per sample
    terminal: np.ndarray
    max_drift: float         # max deviation from terminal over last 10%

    def to_csv(self, path):
        header = "t," + ",".join(f"p_{i}" for i in range(self.states.shape[1]))
        data = np.column_stack([self.times, self.states])
        np.savetxt(path, data, delimiter=",", header=header, comments="")


def integrate_ode(p0, s, g: DependenceGraph, horizon, eps=0.0, dt=0.05,
                  sample_every=50):
    """Explicit RK4 with step halving near the [0, 1] box boundary.

    Steps are halved whenever a trial step leaves [-1e-12, 1+1e-12] in any
    component; accepted states are clipped to [0, 1].  Raises on step
    underflow below 1e-10.
    """
    p = np.asarray(p0, float)
    if p.shape != (g.n,):
        raise InputError(f"p0 must have shape ({g.n},)")
    if np.any(p < 0.0) or np.any(p > 1.0):
        raise InputError("p0 must lie in [0, 1]")
    lam_eps = g.lam + as_eps_vector(eps, g.n)
    q = BreachModel.from_graph(g).q(np.asarray(s, float))
    B = g.infection_matrix()
    delta = g.delta

    def f(x):
        return (1.0 - x) * q * (lam_eps + B @ x) - delta * x

    t = 0.0
    step = min(dt, horizon)
    times = [0.0]
    states = [p.copy()]
    n_steps = 0
    lo, hi = -1e-12, 1.0 + 1e-12
    while t < horizon - 1e-12:
        h = min(step, horizon - t)
        while True:
            k1 = f(p)
            k2 = f(p + 0.5 * h * k1)
            k3 = f(p + 0.5 * h * k2)
            k4 = f(p + h * k3)
            trial = p + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
            if np.all(trial >= lo) and np.all(trial <= hi):
                break
            h *= 0.5
            if h < 1e-10:
                raise NumericError(f"ODE step underflow at t={t:.6g}")
        p = np.clip(trial, 0.0, 1.0)
        t += h
        n_steps += 1
        if n_steps % sample_every == 0:
            times.append(t)
            states.append(p.copy())
    times.append(t)
    states.append(p.copy())
    times = np.asarray(times)
    states = np.asarray(states)
    tail = times >= 0.9 * horizon
    max_drift = float(np.max(np.abs(states[tail] - p), initial=0.0))
    return OdeResult(times=times, states=states, terminal=p, max_drift=max_drift)


# ---------------------------------------------------------------------------
# Spectral radius and M-matrix predicate
# ---------------------------------------------------------------------------

def spectral_radius(M, rtol=1e-10, max_iter=100_000, seed=12345):
    """Dominant eigenvalue magnitude of a nonnegative matrix.

    Power iteration on M + 1e-12*I from a random positive start; the shift
    guarantees progress on nilpotent patterns and is subtracted at the end.
    """
    M = np.asarray(M, float)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise InputError("matrix must be square")
    if np.any(M < 0):
        raise InputError("matrix must be nonnegative")
    n = M.shape[0]
    if n == 0:
        return 0.0
    shift = 1e-12
    Ms = M + shift * np.eye(n)
    rng = np.random.default_rng(seed)
    x = rng.uniform(0.5, 1.5, size=n)
    x /= np.linalg.norm(x)
    est = 0.0
    for _ in range(max_iter):
        y = Ms @ x
        ny = np.linalg.norm(y)
        if ny == 0.0:
            return 0.0
        new_est = ny
        x = y / ny
        if abs(new_est - est) <= rtol * max(new_est, shift):
            return max(new_est - shift, 0.0)
        est = new_est
    raise NumericError("power iteration did not converge", last_iterate=x)


@dataclass
class MMatrixResult:
    is_m_matrix: bool
    witness: np.ndarray | None = None
    reason: str = ""

    def __bool__(self):
        return self.is_m_matrix


def is_nonsingular_m_matrix(A, zero_tol=1e-12) -> MMatrixResult:
    """Inverse-positivity test for a Z-matrix.

    Verifies the Z-shape, then looks for x > 0 with A x > 0 by solving
    A x = 1; the positive solution is returned as the witness.
    """
    A = np.asarray(A, float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise InputError("matrix must be square")
    n = A.shape[0]
    off = A - np.diag(np.diag(A))
    if np.any(off > zero_tol):
        return MMatrixResult(False, reason="positive off-diagonal entry")
    if np.any(np.diag(A) < -zero_tol):
        return MMatrixResult(False, reason="negative diagonal entry")
    try:
        x = np.linalg.solve(A, np.ones(n))
    except np.linalg.LinAlgError:
        return MMatrixResult(False, reason="singular matrix")
    if not np.all(x > 0):
        return MMatrixResult(False, reason="solution of Ax=1 not positive")
    if not np.all(A @ x > 0):
        return MMatrixResult(False, reason="recomputed Ax not positive")
    return MMatrixResult(True, witness=x)


# ---------------------------------------------------------------------------
# Equilibrium solver
# ---------------------------------------------------------------------------

DISEASE_FREE = "disease_free"
ENDEMIC = "endemic"
DRIVEN = "driven"


def solve_mscc_equilibrium(B_v, lam_tilde, qinv_delta, p0=None,
                           tol=MSCC_TOL):
    """Stable equilibrium of one strongly connected component.

    ``B_v`` is the within-component infection matrix, ``lam_tilde`` the
    effective attack rates (external plus upstream pressure) and
    ``qinv_delta`` the vector delta/q(s).  Returns (p, regime).
    """
    B_v = np.asarray(B_v, float)
    lam_tilde = np.asarray(lam_tilde, float)
    qinv_delta = np.asarray(qinv_delta, float)
    nv = len(lam_tilde)

    if np.all(lam_tilde == 0.0):
        rho = spectral_radius(B_v / qinv_delta[:, None])
        if rho <= 1.0 + RHO_TIE_TOL:
            return np.zeros(nv), DISEASE_FREE
        regime = ENDEMIC
        p = np.full(nv, 0.5) if p0 is None or not np.any(p0 > 0) \
            else np.clip(np.asarray(p0, float), 1e-8, 1.0 - 1e-8)
    else:
        regime = DRIVEN
        p = (lam_tilde + 1e-3) / (lam_tilde + 1e-3 + qinv_delta) \
            if p0 is None else np.clip(np.asarray(p0, float), 0.0, 1.0 - 1e-12)

    def g_hat(x):
        return (1.0 - x) * (lam_tilde + B_v @ x) - qinv_delta * x

    def fixed_point(x):
        pressure = lam_tilde + B_v @ x
        return pressure / (pressure + qinv_delta)

    # a few damped fixed-point steps to land in the attraction basin
    for _ in range(50):
        p_new = fixed_point(p)
        if np.max(np.abs(p_new - p)) < 1e-3:
            p = p_new
            break
        p = p_new

    # Newton with step halving; Jacobian is an M-matrix near the root
    res = g_hat(p)
    for _ in range(200):
        if np.max(np.abs(res)) <= tol:
            return p, regime
        Bp = B_v @ p
        J = np.diag(1.0 - p) @ B_v - np.diag(qinv_delta + lam_tilde + Bp)
        try:
            dp = np.linalg.solve(J, -res)
        except np.linalg.LinAlgError:
            break
        alpha = 1.0
        improved = False
        base = np.max(np.abs(res))
        for _ in range(40):
            trial = p + alpha * dp
            if np.all(trial >= 0.0) and np.all(trial <= 1.0):
                trial_res = g_hat(trial)
                if np.max(np.abs(trial_res)) < base:
                    p, res = trial, trial_res
                    improved = True
                    break
            alpha *= 0.5
        if not improved:
            break
    if np.max(np.abs(res)) <= tol:
        return p, regime

    # fall back to pure fixed-point iteration
    for _ in range(1_000_000):
        p = fixed_point(p)
        res = g_hat(p)
        if np.max(np.abs(res)) <= tol:
            return p, regime
    raise NumericError("MSCC equilibrium iteration did not converge",
                       last_iterate=p)


@dataclass(frozen=True, eq=False)
class Equilibrium:
    """Stationary infection probabilities with per-MSCC regime labels."""

    p_bar: np.ndarray
    regimes: tuple            # per MSCC, aligned with condensation.msccs
    residual_inf: float
    effective_lambda: np.ndarray
    condensation: Condensation


def stable_equilibrium(g: DependenceGraph, s, eps=0.0, p0=None,
                       condensation=None, tol=RESIDUAL_TOL) -> Equilibrium:
    """Global stable equilibrium, solved MSCC by MSCC in level order.

    Each component's effective attack rate adds the steady-state pressure
    from its (already solved) upstream components to lam + eps.  ``eps``
    may be a scalar (uniform perturbation) or a per-node vector.
    """
    s = np.asarray(s, float)
    if s.shape != (g.n,):
        raise InputError(f"s must have shape ({g.n},)")
    if np.any(s < 0):
        raise InputError("investments must be nonnegative")
    eps_vec = as_eps_vector(eps, g.n)
    cond = condensation if condensation is not None else condense(g)
    B = g.infection_matrix()
    lam_eps = g.lam + eps_vec
    qinv_delta = BreachModel.from_graph(g).d_of_s(s) * g.delta

    p = np.zeros(g.n)
    lam_tilde = np.zeros(g.n)
    regimes = [None] * cond.m
    for v in cond.order:
        idx = np.array(sorted(cond.msccs[v]))
        upstream = p.copy()
        upstream[idx] = 0.0
        lt = lam_eps[idx] + B[idx, :] @ upstream
        lam_tilde[idx] = lt
        warm = None if p0 is None else np.asarray(p0, float)[idx]
        try:
            pv, regime = solve_mscc_equilibrium(
                B[np.ix_(idx, idx)], lt, qinv_delta[idx], p0=warm)
        except NumericError as exc:
            raise NumericError(f"MSCC {v} solver failure: {exc}",
                               last_iterate=exc.last_iterate) from exc
        p[idx] = pv
        regimes[v] = regime

    residual = (1.0 - p) * (lam_eps + B @ p) - qinv_delta * p
    res_inf = float(np.max(np.abs(residual)))
    if res_inf > tol:
        raise NumericError(
            f"global equilibrium residual {res_inf:.3e} exceeds {tol:.1e}",
            last_iterate=p)
    return Equilibrium(p_bar=p, regimes=tuple(regimes), residual_inf=res_inf,
                       effective_lambda=lam_tilde, condensation=cond)
