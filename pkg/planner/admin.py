from django.contrib import admin

from .models import PlannedCycle, PlanRun


class PlannedCycleInline(admin.TabularInline):
    model = PlannedCycle
    extra = 0
    readonly_fields = (
        "index",
        "chosen_lane",
        "fallback",
        "terminal_station",
        "min_speed",
        "nudge_station",
        "qp_iterations",
    )


@admin.register(PlanRun)
class PlanRunAdmin(admin.ModelAdmin):
    list_display = (
        "scenario_name",
        "cycles_completed",
        "fallback_count",
        "started_at",
        "completed_at",
    )
    list_filter = ("started_at",)
    search_fields = ("scenario_name", "scenario_path")
    inlines = [PlannedCycleInline]


@admin.register(PlannedCycle)
class PlannedCycleAdmin(admin.ModelAdmin):
    list_display = (
        "run",
        "index",
        "chosen_lane",
        "fallback",
        "min_speed",
        "qp_iterations",
    )
    list_filter = ("fallback", "chosen_lane")
