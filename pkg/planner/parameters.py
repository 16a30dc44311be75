"""
Planner tunables.

Every weight, limit and grid resolution lives in one of the frozen
dataclasses below. A planner config file overrides them with
``SECTION_FIELD=value`` lines (dotenv syntax), e.g.::

    # slower, stiffer paths
    PATH_W3=200
    SPEED_DEC_MAX=3.5

``python manage.py plan --dump-config`` prints the full key list with defaults.
"""

import dataclasses
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, Mapping, Optional, Tuple, Union

from dotenv import dotenv_values

from .exceptions import ConfigurationError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ProjectionParameters:
    dt: float = 0.1
    horizon: float = 8.0
    low_speed_floor: float = 2.0
    low_speed_ratio: float = 0.4
    station_step: float = 0.5


@dataclass(frozen=True)
class LatticeParameters:
    min_row_interval: float = 10.0
    row_headway: float = 1.5
    lane_change_factor: float = 2.0
    min_span: float = 200.0
    span_horizon: float = 8.0
    offset_count: int = 7
    offset_spacing: float = 0.5


@dataclass(frozen=True)
class PathCostParams:
    w1: float = 1.0
    w2: float = 10.0
    w3: float = 100.0
    w4: float = 0.5
    d_c: float = 0.3
    d_n: float = 1.5
    w_obs: float = 10.0
    c_collision: float = 1e6
    on_road_penalty: float = 1e3
    obstacle_step: float = 1.0
    qp_segments: int = 5
    qp_min_span: float = 60.0
    qp_margin: float = 20.0
    qp_station_step: float = 2.0
    ddl_max: float = 0.5
    dddl_max: float = 0.5


@dataclass(frozen=True)
class SpeedParameters:
    v_ref: float = 10.0
    v_upper: float = 20.0
    acc_max: float = 2.0
    dec_max: float = 4.0
    jerk_max: float = 2.0
    dp_jerk_limit: float = 8.0
    dp_dt: float = 0.5
    dp_ds: float = 0.5
    qp_dt: float = 0.1
    horizon: float = 8.0
    w_below: float = 1.0
    w_above: float = 4.0
    w_acc: float = 1.0
    w_jerk: float = 0.1
    w_obs: float = 1.0
    obs_range: float = 10.0
    follow_headway: float = 0.5
    follow_min: float = 3.0
    overtake_buffer: float = 3.0
    passing_speed: float = 5.0
    passing_lead: float = 15.0
    passing_tolerance: float = 0.5
    qp_segments: int = 5
    qp_w_ref: float = 1.0
    qp_w_acc: float = 1.0
    qp_w_jerk: float = 1.0


@dataclass(frozen=True)
class QpParameters:
    epsilon: float = 1e-8
    iteration_factor: int = 10
    feasibility_penalty: float = 1e6


@dataclass(frozen=True)
class DeciderParameters:
    hysteresis: float = 0.8
    lane_change_penalty: float = 0.2
    w_progress: float = 1.0
    w_smoothness: float = 1e-3
    w_proximity: float = 1.0
    output_dt: float = 0.02
    speed_tolerance: float = 0.02
    workers: int = 4


@dataclass(frozen=True)
class PlannerParameters:
    projection: ProjectionParameters = field(default_factory=ProjectionParameters)
    lattice: LatticeParameters = field(default_factory=LatticeParameters)
    path: PathCostParams = field(default_factory=PathCostParams)
    speed: SpeedParameters = field(default_factory=SpeedParameters)
    qp: QpParameters = field(default_factory=QpParameters)
    decider: DeciderParameters = field(default_factory=DeciderParameters)

    def __post_init__(self) -> None:
        if not self.path.d_c < self.path.d_n:
            raise ConfigurationError("PATH_D_C must be smaller than PATH_D_N")
        if not 0 < self.speed.v_ref <= self.speed.v_upper:
            raise ConfigurationError("SPEED_V_REF must be positive and not above SPEED_V_UPPER")
        for key in ("acc_max", "dec_max", "jerk_max", "dp_dt", "dp_ds", "qp_dt", "horizon"):
            if getattr(self.speed, key) <= 0:
                raise ConfigurationError(f"SPEED_{key.upper()} must be > 0")
        if not 0 < self.decider.hysteresis <= 1:
            raise ConfigurationError("DECIDER_HYSTERESIS must be in (0, 1]")

    def replace(self, section: str, **changes) -> "PlannerParameters":
        """Return a copy with some fields of one section changed."""
        updated = dataclasses.replace(getattr(self, section), **changes)
        return dataclasses.replace(self, **{section: updated})


def iter_keys(params: PlannerParameters) -> Iterator[Tuple[str, str, str, object]]:
    """Yield (KEY, section, field, value) for every tunable."""
    for section in dataclasses.fields(params):
        values = getattr(params, section.name)
        for item in dataclasses.fields(values):
            key = f"{section.name}_{item.name}".upper()
            yield key, section.name, item.name, getattr(values, item.name)


def dump_parameters(params: Optional[PlannerParameters] = None) -> str:
    params = params or PlannerParameters()
    lines = []
    current = None
    for key, section, _, value in iter_keys(params):
        if section != current:
            if current is not None:
                lines.append("")
            lines.append(f"# {section}")
            current = section
        lines.append(f"{key}={value}")
    return "\n".join(lines) + "\n"


def _coerce(key: str, raw: Optional[str], default: object) -> object:
    if raw is None or raw.strip() == "":
        raise ConfigurationError(f"{key} has no value")
    text = raw.strip()
    try:
        if isinstance(default, bool):
            if text.lower() not in {"1", "0", "true", "false", "yes", "no"}:
                raise ValueError(text)
            return text.lower() in {"1", "true", "yes"}
        if isinstance(default, int):
            return int(text)
        return float(text)
    except ValueError as exc:
        raise ConfigurationError(f"{key}={text!r} is not a valid {type(default).__name__}") from exc


def parameters_from_mapping(values: Mapping[str, Optional[str]]) -> PlannerParameters:
    defaults = PlannerParameters()
    known = {key: (section, name, value) for key, section, name, value in iter_keys(defaults)}

    unknown = sorted(set(k.upper() for k in values) - set(known))
    if unknown:
        raise ConfigurationError(f"unknown planner config key(s): {', '.join(unknown)}")

    changes: Dict[str, Dict[str, object]] = {}
    for raw_key, raw_value in values.items():
        key = raw_key.upper()
        section, name, default = known[key]
        changes.setdefault(section, {})[name] = _coerce(key, raw_value, default)

    sections = {
        section: dataclasses.replace(getattr(defaults, section), **fields)
        for section, fields in changes.items()
    }
    return dataclasses.replace(defaults, **sections)


def load_parameters(path: Optional[Union[str, Path]] = None) -> PlannerParameters:
    """Read a KEY=value planner config file; ``None`` gives the defaults."""
    if path is None:
        return PlannerParameters()
    path = Path(path)
    if not path.is_file():
        raise ConfigurationError(f"planner config file not found: {path}")
    values = dotenv_values(path)
    params = parameters_from_mapping(values)
    logger.info("Loaded %d planner override(s) from %s", len(values), path)
    return params
