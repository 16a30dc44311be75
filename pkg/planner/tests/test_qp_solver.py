import itertools
from unittest import mock

import numpy as np
from django.test import SimpleTestCase

from planner.exceptions import QpInfeasible
from planner.parameters import QpParameters
from planner.qp_solver import QpProblem, QpStatus, solve
from planner.spline_core import ConstraintTag, LinearConstraintSet, QuadraticCost


def halfspace_problem() -> QpProblem:
    """min x² subject to x ≥ 1."""
    cons = LinearConstraintSet(
        size=1, A_in=np.array([[-1.0]]), b_in=np.array([-1.0]), in_tags=[ConstraintTag.BOUNDARY],
    )
    return QpProblem(QuadraticCost(np.array([[1.0]]), np.zeros(1)), cons)


def random_problem(rng, n: int, m: int) -> QpProblem:
    M = rng.normal(size=(n, n))
    Q = M @ M.T + np.eye(n)
    c = rng.normal(scale=5.0, size=n)
    A = rng.normal(size=(m, n))
    interior = rng.normal(size=n)
    b = A @ interior + rng.uniform(0.1, 1.0, size=m)
    cons = LinearConstraintSet(size=n, A_in=A, b_in=b, in_tags=[ConstraintTag.BOUNDARY] * m)
    return QpProblem(QuadraticCost(Q, c), cons)


def enumerate_active_sets(problem: QpProblem) -> np.ndarray:
    """Brute force: the KKT point over every subset of inequality rows."""
    Q = problem.cost.Q + problem.epsilon * np.eye(problem.size)
    c = problem.cost.c
    A, b = problem.constraints.A_in, problem.constraints.b_in
    n, m = problem.size, A.shape[0]
    best, best_value = None, np.inf
    for k in range(min(n, m) + 1):
        for subset in itertools.combinations(range(m), k):
            rows = list(subset)
            kkt = np.zeros((n + k, n + k))
            kkt[:n, :n] = 2.0 * Q
            kkt[:n, n:] = A[rows].T
            kkt[n:, :n] = A[rows]
            rhs = np.concatenate([2.0 * c, b[rows]])
            try:
                solution = np.linalg.solve(kkt, rhs)
            except np.linalg.LinAlgError:
                continue
            x, mu = solution[:n], solution[n:]
            if np.any(A @ x - b > 1e-9) or np.any(mu < -1e-9):
                continue
            value = x @ Q @ x - 2.0 * c @ x
            if value < best_value:
                best, best_value = x, value
    return best


class QpSolverTests(SimpleTestCase):
    def test_projection_onto_halfspace(self) -> None:
        solution = solve(halfspace_problem())
        self.assertIs(solution.status, QpStatus.OPTIMAL)
        self.assertAlmostEqual(solution.params[0], 1.0, places=7)
        self.assertEqual(solution.active_set, (0,))

    def test_unconstrained_minimum(self) -> None:
        target = np.array([1.5, -2.0, 0.25])
        problem = QpProblem(QuadraticCost(np.eye(3), target), LinearConstraintSet(size=3))
        solution = solve(problem)
        np.testing.assert_allclose(solution.params, target, atol=1e-7)

    def test_matches_active_set_enumeration(self) -> None:
        rng = np.random.default_rng(21)
        for _ in range(10):
            problem = random_problem(rng, n=6, m=10)
            solution = solve(problem)
            self.assertTrue(solution.ok)
            np.testing.assert_allclose(solution.params, enumerate_active_sets(problem), atol=1e-6)

    def test_kkt_conditions(self) -> None:
        rng = np.random.default_rng(22)
        for _ in range(20):
            problem = random_problem(rng, n=12, m=40)
            solution = solve(problem)
            self.assertTrue(solution.ok)
            cons, p = problem.constraints, solution.params
            self.assertLessEqual(float(np.max(cons.A_in @ p - cons.b_in)), 1e-6)
            gradient = 2.0 * (problem.cost.Q + problem.epsilon * np.eye(problem.size)) @ p - 2.0 * problem.cost.c
            stationarity = gradient + cons.A_in.T @ solution.multipliers_in
            self.assertLessEqual(float(np.linalg.norm(stationarity)), 1e-6 * (1.0 + np.linalg.norm(problem.cost.c)))
            self.assertTrue(np.all(solution.multipliers_in >= -1e-8))

    def test_objective_never_increases(self) -> None:
        problem = random_problem(np.random.default_rng(23), n=8, m=20)
        trace = solve(problem).objective_trace
        for before, after in zip(trace, trace[1:]):
            self.assertLessEqual(after, before + 1e-9 * max(1.0, abs(before)))

    def test_scaling_the_objective_keeps_the_argmin(self) -> None:
        problem = random_problem(np.random.default_rng(24), n=6, m=12)
        scaled = QpProblem(problem.cost.scaled(7.0), problem.constraints)
        np.testing.assert_allclose(solve(scaled).params, solve(problem).params, atol=1e-7)

    def test_warm_start_is_faster(self) -> None:
        for problem in (halfspace_problem(), random_problem(np.random.default_rng(25), n=8, m=20)):
            cold = solve(problem)
            warm = solve(problem, warm_start=cold)
            self.assertTrue(warm.ok)
            self.assertLessEqual(warm.iterations, 2)
            self.assertLess(warm.iterations, cold.iterations)
            np.testing.assert_allclose(warm.params, cold.params, atol=1e-8)

    def test_infeasible_rows_are_reported(self) -> None:
        cons = LinearConstraintSet(
            size=1,
            A_in=np.array([[-1.0], [1.0]]),
            b_in=np.array([-1.0, 0.0]),
            in_tags=[ConstraintTag.BOUNDARY, ConstraintTag.BOUNDARY],
        )
        solution = solve(QpProblem(QuadraticCost(np.array([[1.0]]), np.zeros(1)), cons))
        self.assertIs(solution.status, QpStatus.INFEASIBLE)
        with self.assertRaises(QpInfeasible) as raised:
            solution.raise_for_status()
        self.assertIn("boundary", raised.exception.tags)

    def test_dependent_equalities_are_dropped(self) -> None:
        cons = LinearConstraintSet(
            size=2,
            A_eq=np.array([[1.0, 0.0], [2.0, 0.0]]),
            b_eq=np.array([1.0, 2.0]),
            eq_tags=[ConstraintTag.INITIAL_CONDITION] * 2,
        )
        problem = QpProblem(QuadraticCost(np.eye(2), np.zeros(2)), cons)
        with self.assertLogs("planner.qp_solver", level="WARNING") as logs:
            solution = solve(problem, params=QpParameters())
        self.assertTrue(any("linearly dependent" in line for line in logs.output))
        np.testing.assert_allclose(solution.params, [1.0, 0.0], atol=1e-7)

    def test_repeated_rows_do_not_exhaust_the_budget(self) -> None:
        # x₀ ≥ 1 and x₀ + x₁ ≥ 2, each stated several times with different row scales.
        A = np.array([
            [-1.0, 0.0], [-2.0, 0.0], [-0.5, 0.0], [-1.0, 0.0],
            [-1.0, -1.0], [-3.0, -3.0], [-1.0, -1.0],
        ])
        b = np.array([-1.0, -2.0, -0.5, -1.0, -2.0, -6.0, -2.0])
        cons = LinearConstraintSet(size=2, A_in=A, b_in=b, in_tags=[ConstraintTag.BOUNDARY] * 7)
        solution = solve(QpProblem(QuadraticCost(np.eye(2), np.zeros(2)), cons))
        self.assertTrue(solution.ok)
        self.assertLess(solution.iterations, 10 * 7)
        np.testing.assert_allclose(solution.params, [1.0, 1.0], atol=1e-6)

    def test_main_run_has_its_own_budget(self) -> None:
        problem = halfspace_problem()
        with mock.patch("planner.qp_solver._phase_one", return_value=(np.array([100.0]), True, 10)) as phase_one:
            solution = solve(problem)
        phase_one.assert_called_once()
        self.assertIs(solution.status, QpStatus.OPTIMAL)
        self.assertGreater(solution.iterations, 10)
        self.assertAlmostEqual(solution.params[0], 1.0, places=7)
