from django.db import models
from django.utils import timezone


class PlanRun(models.Model):
    """One closed-loop planning run over a scenario file."""

    scenario_path = models.TextField(help_text="Path of the scenario file that was planned")
    scenario_name = models.CharField(max_length=255, blank=True)
    cycles_requested = models.PositiveIntegerField(default=0)
    cycles_completed = models.PositiveIntegerField(default=0)
    fallback_count = models.PositiveIntegerField(default=0)
    output_directory = models.TextField(blank=True, help_text="Directory the trace files were written to")
    started_at = models.DateTimeField(default=timezone.now)
    completed_at = models.DateTimeField(null=True, blank=True)
    created_at = models.DateTimeField(auto_now_add=True)

    class Meta:
        ordering = ["-started_at"]

    def __str__(self) -> str:  # pragma: no cover - human readable representation
        return f"PlanRun({self.scenario_name or self.scenario_path})"


class PlannedCycle(models.Model):
    """Summary of a single planning cycle within a run."""

    run = models.ForeignKey(PlanRun, on_delete=models.CASCADE, related_name="cycles")
    index = models.PositiveIntegerField()
    chosen_lane = models.CharField(max_length=64, blank=True, help_text="Empty when the cycle fell back")
    fallback = models.BooleanField(default=False)
    terminal_station = models.FloatField(null=True, blank=True)
    min_speed = models.FloatField(null=True, blank=True)
    nudge_station = models.FloatField(null=True, blank=True)
    qp_iterations = models.PositiveIntegerField(default=0)

    class Meta:
        ordering = ["run", "index"]
        constraints = [
            models.UniqueConstraint(fields=["run", "index"], name="unique_cycle_per_run"),
        ]

    def __str__(self) -> str:  # pragma: no cover - human readable representation
        return f"cycle {self.index} of run {self.run_id}"
