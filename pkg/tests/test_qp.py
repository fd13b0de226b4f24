import numpy as np
import pytest

from _oracles import enumerate_active_sets_qp, projected_gradient_box_qp
from ddmpc.qp import (QpProblem, QpSettings, QpSolver, QpStatus,
                      kkt_residuals, solve)


def _random_instance(rng, d, n_eq, n_box):
    """Strictly convex instance with a guaranteed-feasible constraint set."""
    M = rng.normal(size=(d, d))
    P = M @ M.T + (0.5 + rng.uniform()) * np.eye(d)
    q = rng.normal(size=d)
    z_feas = rng.normal(size=d)
    A_eq = rng.normal(size=(n_eq, d)) if n_eq else None
    b_eq = A_eq @ z_feas if n_eq else None
    A_box = rng.normal(size=(n_box, d)) if n_box else None
    if n_box:
        mid = A_box @ z_feas
        lb = mid - rng.uniform(0.1, 2.0, size=n_box)
        ub = mid + rng.uniform(0.1, 2.0, size=n_box)
        # Occasionally open one side to exercise infinite bounds.
        if rng.uniform() < 0.3:
            lb[rng.integers(n_box)] = -np.inf
    else:
        lb = ub = None
    return QpProblem(P=P, q=q, A_eq=A_eq, b_eq=b_eq, A_box=A_box, lb=lb, ub=ub)


def test_projection_example():
    prob = QpProblem(P=2 * np.eye(2), q=np.zeros(2),
                     A_eq=[[1.0, 0.0]], b_eq=[1.0])
    sol = solve(prob)
    assert sol.status is QpStatus.SOLVED
    np.testing.assert_allclose(sol.z, [1.0, 0.0], atol=1e-8)
    res = kkt_residuals(prob, sol.z, sol.dual_eq, sol.dual_box)
    assert max(res) <= 1e-8


def test_clamped_scalar_example():
    # (z - 2)^2 = z^2 - 4z + 4 up to the constant.
    prob = QpProblem(P=[[2.0]], q=[-4.0], A_box=[[1.0]],
                     lb=[-np.inf], ub=[1.0])
    sol = solve(prob)
    assert sol.status is QpStatus.SOLVED
    assert sol.z[0] == pytest.approx(1.0, abs=1e-8)
    assert (sol.z[0] - 2.0) ** 2 == pytest.approx(1.0, abs=1e-7)


def test_random_instances_match_enumeration_oracle():
    rng = np.random.default_rng(99)
    for _ in range(50):
        d = int(rng.integers(2, 9))
        n_eq = int(rng.integers(0, min(3, d)))
        n_box = int(rng.integers(1, 5))
        prob = _random_instance(rng, d, n_eq, n_box)
        sol = solve(prob)
        assert sol.status is QpStatus.SOLVED
        _, obj_ref = enumerate_active_sets_qp(
            prob.P, prob.q, prob.A_eq if prob.n_eq else None,
            prob.b_eq if prob.n_eq else None, prob.A_box, prob.lb, prob.ub)
        assert sol.objective == pytest.approx(obj_ref, abs=1e-6)


def test_random_box_instances_match_projected_gradient():
    rng = np.random.default_rng(7)
    for _ in range(20):
        d = int(rng.integers(2, 9))
        M = rng.normal(size=(d, d))
        P = M @ M.T + np.eye(d)
        q = rng.normal(size=d)
        lb = -rng.uniform(0.1, 1.5, size=d)
        ub = rng.uniform(0.1, 1.5, size=d)
        prob = QpProblem(P=P, q=q, A_box=np.eye(d), lb=lb, ub=ub)
        sol = solve(prob)
        z_ref = projected_gradient_box_qp(P, q, lb, ub)
        assert sol.status is QpStatus.SOLVED
        obj_ref = 0.5 * z_ref @ P @ z_ref + q @ z_ref
        assert sol.objective == pytest.approx(obj_ref, abs=1e-6)


def test_solved_solutions_beat_random_feasible_points():
    rng = np.random.default_rng(31)
    for _ in range(5):
        d = int(rng.integers(3, 7))
        prob = _random_instance(rng, d, 1, 3)
        sol = solve(prob)
        assert sol.status is QpStatus.SOLVED
        # Sample feasible points: solve the equality part, project box rows
        # by rejection sampling around the optimum.
        count = 0
        tries = 0
        while count < 100 and tries < 20000:
            tries += 1
            w = sol.z + rng.normal(size=d) * 0.5
            w = w - prob.A_eq.T @ np.linalg.lstsq(
                prob.A_eq @ prob.A_eq.T, prob.A_eq @ w - prob.b_eq,
                rcond=None)[0]
            Az = prob.A_box @ w
            if np.any(Az < prob.lb) or np.any(Az > prob.ub):
                continue
            count += 1
            assert sol.objective <= prob.objective(w) \
                + 1e-6 * (1.0 + abs(prob.objective(w)))
        assert count >= 100


def test_kkt_residuals_exact_and_perturbed():
    prob = QpProblem(P=2 * np.eye(2), q=np.zeros(2),
                     A_eq=[[1.0, 0.0]], b_eq=[1.0])
    z = np.array([1.0, 0.0])
    lam = np.array([-2.0])  # stationarity: 2z + lam * e1 = 0
    res = kkt_residuals(prob, z, lam, np.zeros(0))
    assert max(res) <= 1e-12
    res_p = kkt_residuals(prob, z + 1e-3, lam, np.zeros(0))
    assert res_p.stationarity > 1e-6


def test_kkt_residuals_interior_zero_duals():
    prob = QpProblem(P=np.eye(2), q=np.zeros(2), A_box=np.eye(2),
                     lb=[-1.0, -1.0], ub=[1.0, 1.0])
    res = kkt_residuals(prob, np.zeros(2), np.zeros(0), np.zeros(2))
    assert res.comp_slack == 0.0
    assert res.primal_box == 0.0


def test_kkt_residuals_dimension_mismatch():
    prob = QpProblem(P=np.eye(2), q=np.zeros(2))
    with pytest.raises(ValueError):
        kkt_residuals(prob, np.zeros(3), np.zeros(0), np.zeros(0))


def test_warm_start_is_a_fixed_point():
    rng = np.random.default_rng(17)
    prob = _random_instance(rng, 6, 2, 3)
    settings = QpSettings()
    first = solve(prob, settings)
    again = solve(prob, settings, warm_start=first)
    assert again.status is QpStatus.SOLVED
    assert np.max(np.abs(again.z - first.z)) <= settings.eps_abs * 10


def test_cost_scaling_leaves_argmin():
    rng = np.random.default_rng(23)
    prob = _random_instance(rng, 5, 1, 2)
    sol = solve(prob)
    scaled = QpProblem(P=50.0 * prob.P, q=50.0 * prob.q, A_eq=prob.A_eq,
                       b_eq=prob.b_eq, A_box=prob.A_box, lb=prob.lb,
                       ub=prob.ub)
    sol_s = solve(scaled)
    np.testing.assert_allclose(sol_s.z, sol.z, atol=1e-6)


def test_infeasible_equalities_detected():
    prob = QpProblem(P=np.eye(1), q=np.zeros(1),
                     A_eq=[[1.0], [1.0]], b_eq=[1.0, 2.0])
    sol = solve(prob)
    assert sol.status is QpStatus.INFEASIBLE


def test_infeasible_box_against_equality():
    prob = QpProblem(P=np.eye(1), q=np.zeros(1), A_eq=[[1.0]], b_eq=[1.0],
                     A_box=[[1.0]], lb=[2.0], ub=[3.0])
    sol = solve(prob)
    assert sol.status is QpStatus.INFEASIBLE


def test_semidefinite_cost_gets_ridge():
    # Rank-one P: unconstrained directions are fixed by the ridge.
    P = np.outer([1.0, 1.0], [1.0, 1.0])
    prob = QpProblem(P=P, q=[-1.0, -1.0], A_box=np.eye(2),
                     lb=[-5.0, -5.0], ub=[5.0, 5.0])
    sol = solve(prob)
    assert sol.status is QpStatus.SOLVED
    assert sol.diagnostics["ridge"] > 0.0
    assert sol.primal_residual <= 1e-8
    assert sol.dual_residual <= 1e-7


def test_unconstrained_problem():
    prob = QpProblem(P=np.diag([2.0, 4.0]), q=[-2.0, -4.0])
    sol = solve(prob)
    assert sol.status is QpStatus.SOLVED
    np.testing.assert_allclose(sol.z, [1.0, 1.0], atol=1e-8)


def test_update_matches_fresh_solve():
    rng = np.random.default_rng(41)
    prob = _random_instance(rng, 6, 2, 3)
    solver = QpSolver(prob)
    solver.solve()
    new_b = prob.b_eq + 0.1
    solver.update(b_eq=new_b)
    warm = solver.solve()
    fresh = solve(QpProblem(P=prob.P, q=prob.q, A_eq=prob.A_eq, b_eq=new_b,
                            A_box=prob.A_box, lb=prob.lb, ub=prob.ub))
    assert warm.status is QpStatus.SOLVED
    np.testing.assert_allclose(warm.z, fresh.z, atol=1e-6)


def test_problem_validation():
    with pytest.raises(ValueError):
        QpProblem(P=[[1.0, 0.5], [0.2, 1.0]], q=[0.0, 0.0])
    with pytest.raises(ValueError):
        QpProblem(P=np.eye(1), q=[0.0], A_box=[[1.0]], lb=[1.0], ub=[0.0])
    with pytest.raises(ValueError):
        QpSettings(eps_abs=0.0)
    with pytest.raises(ValueError):
        QpSettings(max_iter=0)


def test_solutions_are_deterministic():
    rng = np.random.default_rng(53)
    prob = _random_instance(rng, 7, 2, 4)
    a = solve(prob)
    b = solve(prob)
    np.testing.assert_array_equal(a.z, b.z)
    assert a.iterations == b.iterations
