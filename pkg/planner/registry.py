"""Persistence of finished closed-loop traces into the run registry."""

import logging
from datetime import datetime
from pathlib import Path
from typing import Optional, Union

from django.db import transaction
from django.utils import timezone

from .models import PlannedCycle, PlanRun
from .simulation import Trace

logger = logging.getLogger(__name__)


def record_trace(
    trace: Trace,
    *,
    cycles_requested: Optional[int] = None,
    output_directory: Optional[Union[str, Path]] = None,
    started_at: Optional[datetime] = None,
) -> PlanRun:
    """Store the run and one row per cycle in a single transaction."""
    scenario = trace.scenario
    with transaction.atomic():
        run = PlanRun.objects.create(
            scenario_path=str(scenario.source) if scenario.source else "",
            scenario_name=scenario.name,
            cycles_requested=cycles_requested if cycles_requested is not None else len(trace),
            cycles_completed=len(trace),
            fallback_count=trace.fallback_count,
            output_directory=str(Path(output_directory).resolve()) if output_directory else "",
            started_at=started_at or timezone.now(),
            completed_at=timezone.now(),
        )
        for record in trace.records:
            chosen = record.result.chosen
            terminal = None
            if chosen is not None and chosen.speed is not None:
                terminal = float(chosen.speed.evaluate(chosen.speed.horizon))
            PlannedCycle.objects.create(
                run=run,
                index=record.index,
                chosen_lane=record.chosen_lane or "",
                fallback=record.fallback,
                terminal_station=terminal,
                min_speed=record.min_speed,
                nudge_station=record.nudge_station,
                qp_iterations=record.qp_iterations,
            )
    logger.info("Recorded run %s with %d cycle(s)", run.pk, len(trace))
    return run
