from django.http import Http404, HttpRequest, JsonResponse
from django.views.decorators.http import require_GET

from .models import PlanRun

RUN_LIST_LIMIT = 50


def _run_summary(run: PlanRun) -> dict:
    return {
        "id": run.pk,
        "scenario_name": run.scenario_name,
        "scenario_path": run.scenario_path,
        "cycles_requested": run.cycles_requested,
        "cycles_completed": run.cycles_completed,
        "fallback_count": run.fallback_count,
        "output_directory": run.output_directory,
        "started_at": run.started_at.isoformat() if run.started_at else None,
        "completed_at": run.completed_at.isoformat() if run.completed_at else None,
    }


@require_GET
def run_list(request: HttpRequest) -> JsonResponse:
    """Most recent planning runs, newest first."""
    runs = PlanRun.objects.all()[:RUN_LIST_LIMIT]
    return JsonResponse({"runs": [_run_summary(run) for run in runs]})


@require_GET
def run_detail(request: HttpRequest, pk: int) -> JsonResponse:
    try:
        run = PlanRun.objects.get(pk=pk)
    except PlanRun.DoesNotExist:
        raise Http404(f"no planning run {pk}")

    data = _run_summary(run)
    data["cycles"] = [
        {
            "index": cycle.index,
            "chosen_lane": cycle.chosen_lane or None,
            "fallback": cycle.fallback,
            "terminal_station": cycle.terminal_station,
            "min_speed": cycle.min_speed,
            "nudge_station": cycle.nudge_station,
            "qp_iterations": cycle.qp_iterations,
        }
        for cycle in run.cycles.all()
    ]
    return JsonResponse(data)
