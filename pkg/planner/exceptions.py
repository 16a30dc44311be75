"""Exception hierarchy shared by every planner stage and the scenario harness."""

from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence


class PlannerError(Exception):
    """Base class for everything the planner raises on purpose."""


# -- geometry ---------------------------------------------------------------

class GeometryError(PlannerError):
    pass


class AmbiguousProjection(GeometryError):
    """Two non-adjacent reference samples are equally close to the point."""


class OutOfRange(GeometryError):
    """The nearest reference point clamps to an endpoint of the line."""


class CurvatureSingularity(GeometryError):
    """The lateral offset reaches the local radius of curvature."""


# -- splines ----------------------------------------------------------------

class SplineError(PlannerError):
    pass


class OutOfDomain(SplineError):
    pass


class GuidanceDomainMismatch(SplineError):
    pass


class InfeasibleBox(SplineError):
    pass


# -- path / speed stages ----------------------------------------------------

class StageError(PlannerError):
    """A path or speed M-step could not produce a result for its lane."""


class EmptyRow(StageError):
    pass


class AllPathsCollide(StageError):
    pass


class DegenerateTunnel(AllPathsCollide):
    """Tunnel bounds crossed; treated by callers exactly like a collision."""


class NoFeasibleProfile(StageError):
    pass


class QpError(StageError):
    def __init__(self, message: str, tags: Iterable[str] = ()) -> None:
        self.tags: Sequence[str] = tuple(sorted(set(tags)))
        if self.tags:
            message = f"{message} (violated: {', '.join(self.tags)})"
        super().__init__(message)


class QpInfeasible(QpError):
    pass


class QpIterationLimit(QpError):
    pass


# -- planner orchestration --------------------------------------------------

class LaneFailure(PlannerError):
    """Wraps the stage error that stopped one lane candidate."""

    def __init__(self, lane_id: str, cause: PlannerError, timings: Optional[Mapping[str, int]] = None) -> None:
        self.lane_id = lane_id
        self.cause = cause
        self.timings = dict(timings or {})
        super().__init__(f"lane {lane_id}: {type(cause).__name__}: {cause}")


class AllLanesFailed(PlannerError):
    def __init__(self, failures: Sequence[LaneFailure]) -> None:
        self.failures = tuple(failures)
        lanes = ", ".join(f.lane_id for f in self.failures) or "none"
        super().__init__(f"no feasible lane candidate ({lanes})")


# -- harness ----------------------------------------------------------------

class ConfigurationError(PlannerError):
    pass


class ScenarioError(PlannerError):
    pass


class ScenarioParseError(ScenarioError):
    def __init__(self, message: str, *, line: Optional[int] = None, column: Optional[int] = None) -> None:
        self.line = line
        self.column = column
        if line is not None:
            message = f"{message} (line {line}, column {column})"
        super().__init__(message)


class ScenarioValidationError(ScenarioError):
    pass


class OutputError(PlannerError):
    def __init__(self, message: str, path: Path) -> None:
        self.path = Path(path)
        super().__init__(f"{message}: {self.path}")
