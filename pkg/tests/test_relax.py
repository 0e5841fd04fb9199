"""Convex relaxation: program assembly, barrier solver, recovery, bounds."""

import numpy as np
import pytest

from sisinvest import (
    BoundsReport,
    DomainSpec,
    FeasibleSet,
    InputError,
    LinearCost,
    build_graph,
    build_relaxation,
    check_exactness,
    objective,
    recover_feasible,
    solve_barrier,
    solve_rgm,
)

from conftest import layered_instance


def single_node(lam=0.1, delta=0.1, c=1.0, kappa=10.0):
    return build_graph(1, [], lam=lam, delta=delta, c=c, kappa=kappa)


def attacked_cycle(nu=1.1):
    g = build_graph(2, [(0, 1, 0.5), (1, 0, 0.5)], lam=[0.1, 0.0], delta=0.1)
    B = g.infection_matrix()
    return g.with_params(c=nu * (B.T @ np.ones(2)))


# ---------------------------------------------------------------------------
# Program assembly
# ---------------------------------------------------------------------------

def test_program_shapes(chain):
    prog = build_relaxation(chain, 1e-3)
    assert prog.n_edges == 1                       # one nonzero in B
    assert prog.n_var == 4 * 2 + 1
    assert prog.n_ineq == 5 * 2 + 1 + 2            # box domain: + n d-caps
    assert prog.A.shape == (2, prog.n_var)
    np.testing.assert_allclose(prog.b_eq, chain.lam + 1e-3)


def test_program_equality_encodes_balance(chain):
    # t + U 1 = lam_eps + B p + d * delta at any packed point
    prog = build_relaxation(chain, 1e-3)
    rng = np.random.default_rng(0)
    x = rng.uniform(0.5, 2.0, size=prog.n_var)
    d, p, y, t, u = prog.unpack(x)
    lhs = np.asarray(prog.A @ x)
    U1 = np.zeros(2)
    np.add.at(U1, prog.pat_i, u)
    np.testing.assert_allclose(lhs, t + U1 - d * chain.delta
                               - chain.infection_matrix() @ p, atol=1e-12)


def test_transformed_cost_matches_original(chain):
    prog = build_relaxation(chain, 1e-3)
    s = np.array([0.3, 0.7])
    d = prog.breach.d_of_s(s)
    assert prog.w_tilde(d) == pytest.approx(float(np.sum(s)), abs=1e-12)
    # gradient by finite differences
    h = 1e-6
    for i in range(2):
        e = np.zeros(2)
        e[i] = h
        fd = (prog.w_tilde(d + e) - prog.w_tilde(d - e)) / (2 * h)
        assert prog.grad_w_tilde(d)[i] == pytest.approx(fd, rel=1e-8)


def test_barrier_gradient_matches_finite_differences(chain):
    prog = build_relaxation(chain, 1e-3)
    from sisinvest.relax import _initial_point
    x = _initial_point(prog)
    assert prog.strictly_feasible(x)
    mu = 0.3
    grad, H = prog.gradients(x, mu)

    def phi(z):
        return prog.objective(z) + mu * prog.barrier(z)

    h = 1e-7
    rng = np.random.default_rng(1)
    for k in rng.choice(prog.n_var, size=5, replace=False):
        e = np.zeros(prog.n_var)
        e[k] = h
        fd = (phi(x + e) - phi(x - e)) / (2 * h)
        assert grad[k] == pytest.approx(fd, rel=2e-4, abs=1e-7)
    # Hessian row against gradient differences
    e = np.zeros(prog.n_var)
    e[0] = h
    gp, _ = prog.gradients(x + e, mu)
    gm, _ = prog.gradients(x - e, mu)
    np.testing.assert_allclose(H.toarray()[0], (gp - gm) / (2 * h),
                               rtol=1e-4, atol=1e-5)


def test_domain_spec_validation():
    with pytest.raises(InputError):
        DomainSpec(kind="ellipsoid")
    with pytest.raises(InputError):
        DomainSpec(kind="budget", budget=0.0)
    assert DomainSpec.from_feasible_set(FeasibleSet()).kind == "box"
    fs = FeasibleSet(kind="budget_simplex", budget=2.0)
    dom = DomainSpec.from_feasible_set(fs)
    assert dom.kind == "budget" and dom.budget == 2.0


# ---------------------------------------------------------------------------
# Barrier solver
# ---------------------------------------------------------------------------

def test_barrier_single_node_matches_grid():
    g = single_node(c=2.0)
    eps = 1e-4
    prog = build_relaxation(g, eps)
    sol = solve_barrier(prog)
    grid = np.linspace(0.0, 3.0, 30001)
    vals = grid + 2.0 * (0.1 + eps) / (0.1 + eps + 0.1 * (1 + 10 * grid))
    assert sol.mu_final <= 1e-10 * (1 + 1e-9)
    assert sol.value <= vals.min() + 1e-6
    assert sol.value >= vals.min() - 1e-4
    assert sol.equality_residual <= 1e-9


def test_barrier_active_set(chain):
    # at the optimum the t and u inequalities are tight (up to polish)
    prog = build_relaxation(attacked_cycle(), 1e-3)
    sol = solve_barrier(prog)
    v = sol.variables
    ey = np.exp(v.y)
    np.testing.assert_allclose(v.t, prog.lam_eps * ey, rtol=1e-6)
    eyd = np.exp(v.y[prog.pat_i] - v.y[prog.pat_j])
    np.testing.assert_allclose(v.u, prog.pat_b * eyd, rtol=1e-6)
    assert not sol.d_cap_binding


def test_barrier_multipliers_on_central_path():
    prog = build_relaxation(attacked_cycle(), 1e-3)
    sol = solve_barrier(prog)
    # stationarity at the central point: grad f - sum mu/s grad g + A^T sigma
    grad, _ = prog.gradients(
        np.concatenate([sol.central.d, sol.central.p, sol.central.y,
                        sol.central.t, sol.central.u]), sol.mu_final)
    res = grad + prog.A.T @ sol.sigma
    # the last stage is ill-conditioned (mu = 1e-10), so the stationarity
    # residual is only approximate there
    assert np.max(np.abs(res)) <= 1e-3 * max(1.0, float(np.max(np.abs(grad))))
    # multiplier estimates are positive
    assert all(np.all(v > 0) for v in sol.duals.values())


def test_barrier_lower_bound_and_recovery():
    rng = np.random.default_rng(2)
    g = layered_instance(rng, n_msccs=3, mscc_size=3)
    eps = 1e-3
    prog = build_relaxation(g, eps)
    sol = solve_barrier(prog)
    rec = recover_feasible(g, sol, eps)
    assert rec.ep_residual <= 1e-8
    assert np.all(rec.d_prime >= 1.0 - 1e-9)
    assert np.all(rec.s_prime >= -1e-12) and rec.s_feasible
    # recovered value evaluated through the equilibrium solver agrees
    F, _ = objective(g, rec.s_prime, eps)
    assert F == pytest.approx(rec.value, rel=1e-6, abs=1e-8)
    # sandwich: lower <= true optimum <= recovered value
    assert sol.value <= rec.value + 1e-8
    rgm = solve_rgm(g, eps)
    assert sol.value <= rgm.value + 1e-6


def test_budget_domain_restricts_value():
    g = attacked_cycle()
    eps = 1e-3
    free = solve_barrier(build_relaxation(g, eps))
    dom = DomainSpec(kind="budget", budget=0.2)
    tight = solve_barrier(build_relaxation(g, eps, domain=dom))
    assert tight.value >= free.value - 1e-8
    s_central = build_relaxation(g, eps, domain=dom).breach.s_of_d(
        tight.central.d)
    assert float(np.sum(s_central)) <= 0.2 + 1e-9


# ---------------------------------------------------------------------------
# Exactness certificate
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("nu, verdict", [(0.9, "not_exact"),
                                         (1.0, "exact"),
                                         (1.1, "exact")])
def test_exactness_iff_nu_at_least_one(nu, verdict):
    # unit weights, kappa = 1/delta, exponent 1: the certificate reduces
    # to B^T 1 <= c elementwise, i.e. nu >= 1
    g = attacked_cycle(nu=nu)
    res = check_exactness(g)
    assert res.verdict == verdict
    assert res.exact == (nu >= 1.0)


def test_exactness_inconclusive_unbounded_concave():
    g = single_node().with_params(beta_exp=[0.5])
    res = check_exactness(g, domain=DomainSpec(kind="box", d_max=None))
    assert res.verdict == "inconclusive"
    # a finite cap resolves it
    res2 = check_exactness(g, domain=DomainSpec(kind="box", d_max=2.0))
    assert res2.verdict in ("exact", "not_exact")


def test_exact_instance_closes_gap():
    g = attacked_cycle(nu=1.1)
    eps = 1e-4
    sol = solve_barrier(build_relaxation(g, eps))
    rec = recover_feasible(g, sol, eps)
    rgm = solve_rgm(g, eps, s0=rec.s_prime)
    rep = BoundsReport.from_parts(sol.value, rec.value, upper_rgm=rgm.value,
                                  exact=check_exactness(g).exact)
    assert rep.exact
    assert abs(rep.gap_rel) <= 1e-6
    assert rep.upper_rgm == pytest.approx(rep.lower, rel=1e-6)


def test_bounds_report_serializes():
    rep = BoundsReport.from_parts(1.0, 1.5, upper_rgm=1.2, exact=False,
                                  timings={"relax_seconds": 0.1})
    d = rep.to_dict()
    assert d["lower"] == 1.0 and d["upper_recovered"] == 1.5
    assert d["gap_rel"] == pytest.approx(0.5)
    assert d["timings"]["relax_seconds"] == 0.1
