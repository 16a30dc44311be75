"""
Trace files: trace.json, timings.json, trajectory.csv and per-cycle SVG plots.
"""

import csv
import json
import logging
import math
from pathlib import Path
from typing import Any, Iterable, List, Optional, Sequence, Union

import matplotlib

matplotlib.use("Agg")

import numpy as np  # noqa: E402
from matplotlib.figure import Figure  # noqa: E402
from matplotlib.patches import Polygon, Rectangle  # noqa: E402

from .em_planner import LaneResult  # noqa: E402
from .exceptions import OutputError  # noqa: E402
from .projection import RegionKind  # noqa: E402
from .simulation import CycleRecord, Trace  # noqa: E402

logger = logging.getLogger(__name__)

FORMATS = ("json", "csv", "svg")
FLOAT_DIGITS = 6
CSV_COLUMNS = ("cycle", "t", "x", "y", "v", "a")
SVG_METADATA = {"Date": None}
REGION_COLOURS = {
    RegionKind.OBSTACLE: "tab:red",
    RegionKind.STOP_LINE: "black",
    RegionKind.KEEP_CLEAR: "tab:orange",
}


def parse_formats(value: Union[str, Iterable[str]]) -> List[str]:
    """``"json,csv"`` or an iterable of names, validated and in canonical order."""
    names = value.split(",") if isinstance(value, str) else list(value)
    wanted = {name.strip().lower() for name in names if name.strip()}
    unknown = sorted(wanted - set(FORMATS))
    if unknown:
        raise ValueError(f"unknown output format(s): {', '.join(unknown)}; choose from {', '.join(FORMATS)}")
    if not wanted:
        raise ValueError("at least one output format is required")
    return [name for name in FORMATS if name in wanted]


def _rounded(value: Any) -> Any:
    if isinstance(value, dict):
        return {str(k): _rounded(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_rounded(v) for v in value]
    if isinstance(value, np.ndarray):
        return _rounded(value.tolist())
    if isinstance(value, (bool, np.bool_)):
        return bool(value)
    if isinstance(value, (int, np.integer)):
        return int(value)
    if isinstance(value, (float, np.floating)):
        value = float(value)
        if not math.isfinite(value):
            return None
        rounded = round(value, FLOAT_DIGITS)
        return 0.0 if rounded == 0 else rounded
    return value


def trace_json(trace: Trace) -> str:
    return json.dumps(_rounded(trace.to_dict()), indent=1, sort_keys=True) + "\n"


def _write_text(path: Path, text: str) -> Path:
    try:
        path.write_text(text, encoding="utf-8")
    except OSError as exc:
        raise OutputError(f"cannot write {path.name} ({exc.strerror or exc})", path) from exc
    return path


def _write_csv(path: Path, trace: Trace) -> Path:
    try:
        with path.open("w", newline="", encoding="utf-8") as handle:
            writer = csv.writer(handle)
            writer.writerow(CSV_COLUMNS)
            for record in trace.records:
                for point in record.trajectory:
                    writer.writerow([record.index] + [
                        f"{_rounded(getattr(point, name)):.{FLOAT_DIGITS}f}" for name in CSV_COLUMNS[1:]
                    ])
    except OSError as exc:
        raise OutputError(f"cannot write {path.name} ({exc.strerror or exc})", path) from exc
    return path


def _plotted_lane(record: CycleRecord) -> Optional[LaneResult]:
    chosen = record.result.chosen
    if chosen is not None:
        return chosen
    try:
        return record.result.lane(record.current_lane)
    except KeyError:
        return None


def _save(fig: Figure, path: Path) -> Path:
    try:
        with matplotlib.rc_context({"svg.hashsalt": "lane-planner", "svg.fonttype": "none"}):
            fig.savefig(path, format="svg", metadata=SVG_METADATA)
    except OSError as exc:
        raise OutputError(f"cannot write {path.name} ({exc.strerror or exc})", path) from exc
    return path


def plot_sl(record: CycleRecord, path: Path) -> Path:
    """Lateral offset over station: obstacle regions, tunnel, DP path and QP path."""
    fig = Figure(figsize=(10, 4))
    ax = fig.add_subplot()
    lane = _plotted_lane(record)
    if lane is not None:
        for region in lane.sl_regions:
            ax.add_patch(Rectangle(
                (region.s_min, region.l_min), region.s_max - region.s_min, region.l_max - region.l_min,
                facecolor="tab:red", alpha=0.3, edgecolor="tab:red",
            ))
            ax.annotate(region.source_id, (region.s_center, region.l_max), fontsize=7, ha="center")
        if lane.path is not None:
            profile = lane.path
            if profile.tunnel is not None:
                tunnel = profile.tunnel
                ax.fill_between(tunnel.stations, tunnel.lower, tunnel.upper, color="tab:green", alpha=0.15,
                                label="feasible tunnel")
            if profile.dp_path is not None:
                ax.plot(profile.dp_path.stations, profile.dp_path.offsets, "o--", color="tab:gray",
                        markersize=3, label="DP path")
            lo, hi = profile.domain
            stations = np.linspace(lo, hi, 200)
            ax.plot(stations, profile.lateral(stations), color="tab:blue", linewidth=2, label="QP path")
            if profile.nudge_station is not None:
                ax.axvline(profile.nudge_station, color="tab:purple", linestyle=":", label="nudge station")
    ax.set_xlabel("station s [m]")
    ax.set_ylabel("lateral l [m]")
    ax.set_title(f"SL, cycle {record.index}")
    ax.grid(True, alpha=0.3)
    if ax.get_legend_handles_labels()[0]:
        ax.legend(loc="upper right", fontsize=8)
    return _save(fig, path)


def plot_st(record: CycleRecord, path: Path) -> Path:
    """Station over time with ST regions and speed tunnel, plus the speed on a twin axis."""
    fig = Figure(figsize=(10, 5))
    ax = fig.add_subplot()
    lane = _plotted_lane(record)
    if lane is not None:
        for region in lane.st_regions:
            colour = REGION_COLOURS[region.kind]
            ax.add_patch(Polygon(region.polygon, closed=True, facecolor=colour, alpha=0.3, edgecolor=colour))
            t, sigma = region.min_t_vertex()
            ax.annotate(region.source_id, (t, sigma), fontsize=7)
        if lane.speed is not None:
            profile = lane.speed
            if profile.tunnel is not None:
                tunnel = profile.tunnel
                upper = np.minimum(tunnel.upper, max(float(np.max(tunnel.lower)), 1.0) * 4.0)
                ax.fill_between(tunnel.times, tunnel.lower, upper, color="tab:green", alpha=0.15,
                                label="speed tunnel")
            if profile.dp_profile is not None:
                ax.plot(profile.dp_profile.times, profile.dp_profile.stations, "o--", color="tab:gray",
                        markersize=3, label="DP profile")
            times = np.linspace(0.0, profile.horizon, 161)
            ax.plot(times, profile.evaluate(times), color="tab:blue", linewidth=2, label="S(t)")
            speed_ax = ax.twinx()
            speed_ax.plot(times, profile.evaluate(times, 1), color="tab:purple", label="speed")
            speed_ax.set_ylabel("speed [m/s]")
    ax.set_xlabel("time t [s]")
    ax.set_ylabel("station σ [m]")
    ax.set_title(f"ST, cycle {record.index}")
    ax.grid(True, alpha=0.3)
    if ax.get_legend_handles_labels()[0]:
        ax.legend(loc="upper left", fontsize=8)
    return _save(fig, path)


def plot_xy(record: CycleRecord, trace: Trace, path: Path) -> Path:
    """Overhead view: lane centre lines, obstacle boxes at the cycle start and the output trajectory."""
    fig = Figure(figsize=(10, 4))
    ax = fig.add_subplot()
    for lane in trace.scenario.lanes:
        xs, ys = zip(*lane.polyline)
        ax.plot(xs, ys, color="tab:gray", linestyle="--", linewidth=1)
    cycle_time = record.time
    for obstacle in trace.scenario.obstacles:
        corners = obstacle.corners_at([cycle_time])[0]
        ax.add_patch(Polygon(corners, closed=True, facecolor="tab:red", alpha=0.4, edgecolor="tab:red"))
    trajectory = record.trajectory
    ax.plot(trajectory.x, trajectory.y, color="tab:blue", linewidth=2,
            label="fallback stop" if record.fallback else f"lane {record.chosen_lane}")
    ax.plot([record.ego.x], [record.ego.y], "o", color="tab:green", label="ego")
    ax.set_aspect("equal", adjustable="datalim")
    ax.set_xlabel("x [m]")
    ax.set_ylabel("y [m]")
    ax.set_title(f"XY, cycle {record.index}")
    ax.grid(True, alpha=0.3)
    ax.legend(loc="upper right", fontsize=8)
    return _save(fig, path)


def emit_outputs(
    trace: Trace,
    out_dir: Union[str, Path],
    formats: Sequence[str] = FORMATS,
    *,
    plot: bool = False,
) -> List[Path]:
    """Write the requested files into ``out_dir``; SVGs need both ``plot`` and the svg format."""
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OutputError(f"cannot create output directory ({exc.strerror or exc})", out_dir) from exc

    formats = parse_formats(formats)
    written: List[Path] = []
    if "json" in formats:
        written.append(_write_text(out_dir / "trace.json", trace_json(trace)))
        written.append(_write_text(
            out_dir / "timings.json", json.dumps(trace.timings(), indent=1, sort_keys=True) + "\n",
        ))
    if "csv" in formats:
        written.append(_write_csv(out_dir / "trajectory.csv", trace))
    if plot and "svg" in formats:
        for record in trace.records:
            written.append(plot_sl(record, out_dir / f"sl_{record.index:03d}.svg"))
            written.append(plot_st(record, out_dir / f"st_{record.index:03d}.svg"))
            written.append(plot_xy(record, trace, out_dir / f"xy_{record.index:03d}.svg"))
    logger.info("Wrote %d file(s) to %s", len(written), out_dir)
    return written
