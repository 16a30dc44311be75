"""
Dense primal active-set solver for the convex spline QPs.

    minimize    pᵀQp − 2cᵀp           (QuadraticCost, Q regularized by εI)
    subject to  A_eq p = b_eq
                A_in p ≤ b_in

Internally the problem is Jacobi-scaled (unit Hessian diagonal) and every
constraint row is normalized, which keeps monomial spline bases on long
segments well conditioned. Feasibility comes from a phase-one problem with a
single penalized artificial variable; a previous solution can seed the
working set for the next cycle.
"""

import enum
import logging
from collections import Counter, deque
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
from scipy import linalg

from .exceptions import QpInfeasible, QpIterationLimit
from .parameters import QpParameters
from .spline_core import LinearConstraintSet, QuadraticCost

logger = logging.getLogger(__name__)

FEASIBILITY_TOLERANCE = 1e-9
DUAL_TOLERANCE = 1e-10
STEP_TOLERANCE = 1e-12
RANK_TOLERANCE = 1e-10
CYCLE_REPEATS = 3
STALL_WINDOW = 12
STALL_DECREASE = 1e-12


class QpStatus(str, enum.Enum):
    OPTIMAL = "optimal"
    INFEASIBLE = "infeasible"
    ITER_LIMIT = "iter_limit"


@dataclass(frozen=True, eq=False)
class QpProblem:
    cost: QuadraticCost
    constraints: LinearConstraintSet
    epsilon: float = QpParameters.epsilon

    @property
    def size(self) -> int:
        return self.cost.size


@dataclass(frozen=True, eq=False)
class QpSolution:
    params: np.ndarray
    status: QpStatus
    iterations: int
    active_set: Tuple[int, ...] = ()
    multipliers_eq: np.ndarray = field(default_factory=lambda: np.zeros(0))
    multipliers_in: np.ndarray = field(default_factory=lambda: np.zeros(0))
    objective: float = float("nan")
    objective_trace: Tuple[float, ...] = ()
    violated_tags: Tuple[str, ...] = ()

    @property
    def ok(self) -> bool:
        return self.status is QpStatus.OPTIMAL

    def raise_for_status(self) -> "QpSolution":
        if self.status is QpStatus.INFEASIBLE:
            raise QpInfeasible("QP has no feasible point", self.violated_tags)
        if self.status is QpStatus.ITER_LIMIT:
            raise QpIterationLimit(f"QP stopped after {self.iterations} iterations", self.violated_tags)
        return self


@dataclass
class _Outcome:
    x: np.ndarray
    working: List[int]
    mu_eq: np.ndarray
    mu_in: np.ndarray
    status: QpStatus
    iterations: int
    trace: List[float]


class _ActiveSet:
    """Primal active-set iterations on ½xᵀHx + gᵀx with normalized rows."""

    def __init__(self, H, g, A_eq, b_eq, A_in, b_in, max_iterations: int) -> None:
        self.H, self.g = H, g
        self.A_eq, self.b_eq = A_eq, b_eq
        self.A_in, self.b_in = A_in, b_in
        self.max_iterations = max_iterations
        self.chol = _cholesky(H)
        self.z0 = -linalg.cho_solve(self.chol, g)

    def objective(self, x: np.ndarray) -> float:
        return float(0.5 * x @ self.H @ x + self.g @ x)

    def eqp(self, working: Sequence[int]) -> Tuple[np.ndarray, np.ndarray]:
        """Minimizer with the equalities and ``working`` rows held as equalities."""
        A = np.vstack([self.A_eq, self.A_in[list(working)]])
        if A.shape[0] == 0:
            return self.z0.copy(), np.zeros(0)
        b = np.concatenate([self.b_eq, self.b_in[list(working)]])
        Y = linalg.cho_solve(self.chol, A.T)
        S = A @ Y
        rhs = A @ self.z0 - b
        try:
            mu = linalg.solve(S, rhs, assume_a="pos")
        except (linalg.LinAlgError, ValueError):
            mu = linalg.lstsq(S, rhs)[0]
        return self.z0 - Y @ mu, mu

    def run(
        self,
        x: np.ndarray,
        working: List[int],
        iterations: int = 0,
        stop: Optional[Callable[[np.ndarray], bool]] = None,
    ) -> _Outcome:
        """
        Iterate from the feasible ``x``. ``stop`` ends the run early once it
        holds for the current iterate. Alternating between at most two
        working sets without lowering the objective counts as cycling: the
        first stall switches to Bland's rule, a second one accepts ``x``.
        """
        working = list(working)
        seen: Counter = Counter()
        recent: deque = deque(maxlen=STALL_WINDOW)
        bland = False
        trace = [self.objective(x)]
        n_eq = self.A_eq.shape[0]

        while iterations < self.max_iterations:
            if stop is not None and stop(x):
                z, mu = self.eqp(working)
                return self._outcome(x, working, mu, QpStatus.OPTIMAL, iterations, trace)
            iterations += 1
            z, mu = self.eqp(working)
            step = z - x
            if np.linalg.norm(step) <= STEP_TOLERANCE * (1.0 + np.linalg.norm(x)):
                mu_in = mu[n_eq:]
                negative = [k for k, value in enumerate(mu_in) if value < -DUAL_TOLERANCE]
                if not negative:
                    return self._outcome(z, working, mu, QpStatus.OPTIMAL, iterations, trace)
                if bland:
                    leave = min(negative, key=lambda k: working[k])
                else:
                    leave = min(negative, key=lambda k: (mu_in[k], working[k]))
                working.pop(leave)
            else:
                x, entering = self._advance(x, z, step, working, bland)
                if entering is not None:
                    working.append(entering)
                trace.append(self.objective(x))

            key = frozenset(working)
            seen[key] += 1
            if seen[key] >= CYCLE_REPEATS and not bland:
                logger.debug("Active-set cycling detected; switching to Bland's rule")
                bland = True
                recent.clear()

            objective = self.objective(x)
            recent.append((key, objective))
            if self._stalled(recent, objective):
                if not bland:
                    logger.debug("Active set stalled at a constant objective; switching to Bland's rule")
                    bland = True
                    recent.clear()
                else:
                    logger.debug("Active set stalled under Bland's rule; accepting the current point")
                    z, mu = self.eqp(working)
                    return self._outcome(x, working, mu, QpStatus.OPTIMAL, iterations, trace)

        if stop is not None and stop(x):
            z, mu = self.eqp(working)
            return self._outcome(x, working, mu, QpStatus.OPTIMAL, iterations, trace)
        z, mu = self.eqp(working)
        return self._outcome(x, working, mu, QpStatus.ITER_LIMIT, iterations, trace)

    @staticmethod
    def _stalled(recent: deque, objective: float) -> bool:
        if len(recent) < recent.maxlen:
            return False
        if len({key for key, _ in recent}) > 2:
            return False
        return recent[0][1] - objective <= STALL_DECREASE * (1.0 + abs(objective))

    def _advance(self, x, z, step, working, bland) -> Tuple[np.ndarray, Optional[int]]:
        if self.A_in.shape[0] == 0:
            return z, None
        rate = self.A_in @ step
        slack = np.maximum(self.b_in - self.A_in @ x, 0.0)
        candidates = np.flatnonzero(rate > 1e-14)
        if working:
            candidates = np.setdiff1d(candidates, working, assume_unique=False)
        if candidates.size == 0:
            return z, None
        ratios = slack[candidates] / rate[candidates]
        alpha = float(ratios.min())
        if alpha >= 1.0:
            return z, None
        tied = candidates[ratios <= alpha + 1e-12]
        if bland or tied.size == 1:
            entering = int(tied.min())
        else:
            violation = self.A_in[tied] @ z - self.b_in[tied]
            entering = int(tied[np.lexsort((tied, -violation))[0]])
        return x + alpha * step, entering

    def _outcome(self, x, working, mu, status, iterations, trace) -> _Outcome:
        n_eq = self.A_eq.shape[0]
        mu_in = np.zeros(self.A_in.shape[0])
        if working:
            mu_in[working] = mu[n_eq:]
        return _Outcome(x, working, mu[:n_eq], mu_in, status, iterations, trace)


def _cholesky(H: np.ndarray):
    ridge = 0.0
    for _ in range(3):
        try:
            return linalg.cho_factor(H + ridge * np.eye(H.shape[0]))
        except linalg.LinAlgError:
            ridge = 1e-10 if ridge == 0.0 else ridge * 100.0
            logger.warning("QP Hessian not positive definite; adding ridge %.1e", ridge)
    return linalg.cho_factor(H + ridge * np.eye(H.shape[0]))


def _independent_rows(A: np.ndarray) -> np.ndarray:
    if A.shape[0] == 0:
        return np.zeros(0, dtype=int)
    _, r, pivots = linalg.qr(A.T, mode="economic", pivoting=True)
    diagonal = np.abs(np.diag(r))
    if diagonal.size == 0 or diagonal[0] == 0.0:
        return np.zeros(0, dtype=int)
    rank = int(np.sum(diagonal > RANK_TOLERANCE * diagonal[0]))
    return np.sort(pivots[:rank])


class _ScaledProblem:
    """Jacobi-scaled copy of a QpProblem with unit-norm constraint rows."""

    def __init__(self, problem: QpProblem) -> None:
        cost, cons = problem.cost, problem.constraints
        H = 2.0 * (cost.Q + problem.epsilon * np.eye(cost.size))
        H = 0.5 * (H + H.T)
        self.D = 1.0 / np.sqrt(np.diag(H))
        self.H = self.D[:, None] * H * self.D[None, :]
        self.g = -2.0 * cost.c * self.D

        keep = _independent_rows(cons.A_eq * self.D[None, :])
        dropped = sorted(set(range(cons.A_eq.shape[0])) - set(keep.tolist()))
        if dropped:
            logger.warning("Dropping %d linearly dependent equality row(s) from the QP", len(dropped))
        self.eq_rows = keep
        self.dropped_eq = dropped
        A_eq = cons.A_eq[keep] * self.D[None, :]
        self.eq_norm = _row_norms(A_eq)
        self.A_eq = A_eq / self.eq_norm[:, None]
        self.b_eq = cons.b_eq[keep] / self.eq_norm

        A_in = cons.A_in * self.D[None, :]
        self.in_norm = _row_norms(A_in)
        self.A_in = A_in / self.in_norm[:, None]
        self.b_in = cons.b_in / self.in_norm

    def start_point(self) -> np.ndarray:
        if self.A_eq.shape[0] == 0:
            return np.zeros(self.D.size)
        return np.linalg.lstsq(self.A_eq, self.b_eq, rcond=None)[0]

    def max_violation(self, y: np.ndarray) -> float:
        worst = 0.0
        if self.A_in.shape[0]:
            worst = max(worst, float(np.max(self.A_in @ y - self.b_in)))
        if self.A_eq.shape[0]:
            worst = max(worst, float(np.max(np.abs(self.A_eq @ y - self.b_eq))))
        return worst


def _row_norms(A: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(A, axis=1)
    return np.where(norms > 0.0, norms, 1.0)


def _phase_one(scaled: _ScaledProblem, penalty: float, max_iterations: int) -> Tuple[np.ndarray, bool, int]:
    """Find a feasible point; returns (y, feasible, iterations)."""
    y0 = scaled.start_point()
    n, m = y0.size, scaled.A_in.shape[0]
    tau0 = max(0.0, float(np.max(scaled.A_in @ y0 - scaled.b_in))) if m else 0.0
    if tau0 <= FEASIBILITY_TOLERANCE:
        return y0, True, 0

    H = np.eye(n + 1)
    g = np.concatenate([-y0, [penalty]])
    A_eq = np.hstack([scaled.A_eq, np.zeros((scaled.A_eq.shape[0], 1))])
    A_in = np.vstack([
        np.hstack([scaled.A_in, -np.ones((m, 1))]),
        np.concatenate([np.zeros(n), [-1.0]])[None, :],
    ])
    b_in = np.concatenate([scaled.b_in, [0.0]])
    norms = _row_norms(A_in)
    solver = _ActiveSet(H, g, A_eq, scaled.b_eq, A_in / norms[:, None], b_in / norms, max_iterations)
    outcome = solver.run(np.concatenate([y0, [tau0]]), [], stop=lambda x: x[-1] <= FEASIBILITY_TOLERANCE)
    y = outcome.x[:n]
    return y, scaled.max_violation(y) <= 1e-7, outcome.iterations


def _violated_tags(problem: QpProblem, params: np.ndarray, tolerance: float = 1e-6) -> Tuple[str, ...]:
    cons = problem.constraints
    eq_gap, in_gap = cons.violations(params)
    tags = {cons.eq_tags[i].value for i in np.flatnonzero(eq_gap > tolerance)}
    tags |= {cons.in_tags[i].value for i in np.flatnonzero(in_gap > tolerance)}
    return tuple(sorted(tags))


def _finish(problem: QpProblem, scaled: _ScaledProblem, outcome: _Outcome) -> QpSolution:
    params = scaled.D * outcome.x
    mu_eq = np.zeros(problem.constraints.A_eq.shape[0])
    mu_eq[scaled.eq_rows] = outcome.mu_eq / scaled.eq_norm
    mu_in = outcome.mu_in / scaled.in_norm
    status = outcome.status
    violated: Tuple[str, ...] = ()
    if scaled.dropped_eq:
        residual = np.abs(problem.constraints.A_eq @ params - problem.constraints.b_eq)
        if np.max(residual) > 1e-6:
            status = QpStatus.INFEASIBLE
    if status is not QpStatus.OPTIMAL:
        violated = _violated_tags(problem, params)
    return QpSolution(
        params=params,
        status=status,
        iterations=outcome.iterations,
        active_set=tuple(sorted(outcome.working)),
        multipliers_eq=mu_eq,
        multipliers_in=mu_in,
        objective=problem.cost.value(params),
        objective_trace=tuple(value + problem.cost.constant for value in outcome.trace),
        violated_tags=violated,
    )


def _try_warm_start(solver: _ActiveSet, scaled: _ScaledProblem, warm: QpSolution) -> Optional[_Outcome]:
    if warm.params.size != scaled.D.size:
        return None
    m = scaled.A_in.shape[0]
    working = sorted(i for i in warm.active_set if 0 <= i < m)
    try:
        z, mu = solver.eqp(working)
    except (linalg.LinAlgError, ValueError):
        return None
    n_eq = scaled.A_eq.shape[0]
    feasible = scaled.max_violation(z) <= FEASIBILITY_TOLERANCE
    if feasible and np.all(mu[n_eq:] >= -DUAL_TOLERANCE):
        return solver._outcome(z, working, mu, QpStatus.OPTIMAL, 1, [solver.objective(z)])
    if feasible:
        return solver.run(z, working, iterations=1)

    y = warm.params / scaled.D
    if scaled.max_violation(y) <= FEASIBILITY_TOLERANCE:
        slack = scaled.b_in[working] - scaled.A_in[working] @ y if working else np.zeros(0)
        binding = [row for row, gap in zip(working, slack) if gap <= FEASIBILITY_TOLERANCE]
        return solver.run(y, binding, iterations=1)
    return None


def solve(
    problem: QpProblem,
    warm_start: Optional[QpSolution] = None,
    params: QpParameters = QpParameters(),
) -> QpSolution:
    scaled = _ScaledProblem(problem)
    rows = problem.constraints.row_count
    max_iterations = max(params.iteration_factor * rows, 10)
    solver = _ActiveSet(scaled.H, scaled.g, scaled.A_eq, scaled.b_eq, scaled.A_in, scaled.b_in, max_iterations)

    if warm_start is not None:
        outcome = _try_warm_start(solver, scaled, warm_start)
        if outcome is not None and outcome.status is QpStatus.OPTIMAL:
            logger.debug("QP warm start converged in %d iteration(s)", outcome.iterations)
            return _finish(problem, scaled, outcome)

    y, feasible, phase_one_iterations = _phase_one(scaled, params.feasibility_penalty, max_iterations)
    if not feasible:
        outcome = _Outcome(y, [], np.zeros(scaled.A_eq.shape[0]), np.zeros(scaled.A_in.shape[0]),
                           QpStatus.INFEASIBLE, phase_one_iterations, [])
        solution = _finish(problem, scaled, outcome)
        logger.debug("QP infeasible after %d phase-one iteration(s): %s", phase_one_iterations,
                     ", ".join(solution.violated_tags))
        return solution

    outcome = solver.run(y, [])
    outcome.iterations += phase_one_iterations
    if outcome.status is QpStatus.ITER_LIMIT:
        logger.warning("QP hit the iteration limit (%d rows, %d iterations)", rows, outcome.iterations)
    return _finish(problem, scaled, outcome)
