import logging
from pathlib import Path

from django.conf import settings
from django.core.management.base import BaseCommand, CommandError
from django.utils import timezone

from planner.exceptions import ConfigurationError, OutputError, ScenarioError
from planner.outputs import FORMATS, emit_outputs, parse_formats
from planner.parameters import dump_parameters, load_parameters
from planner.registry import record_trace
from planner.scenario import load_scenario
from planner.simulation import run_closed_loop

logger = logging.getLogger(__name__)

EXIT_INPUT_ERROR = 2
EXIT_OUTPUT_ERROR = 3


class Command(BaseCommand):
    help = "Run the lane-level EM planner in closed loop over a scenario file and write the trace."

    def add_arguments(self, parser):
        parser.add_argument("--scenario", help="Scenario JSON file")
        parser.add_argument("--cycles", type=int, help="Number of planning cycles (default: the scenario's)")
        parser.add_argument("--out", help="Output directory (default: PLANNER_OUTPUT_ROOT/<scenario name>)")
        parser.add_argument("--plot", action="store_true", help="Write per-cycle SL, ST and XY SVG plots")
        parser.add_argument(
            "--formats", default=",".join(FORMATS),
            help=f"Comma separated output formats out of {', '.join(FORMATS)}",
        )
        parser.add_argument("--config", help="KEY=value planner config file (default: PLANNER_CONFIG)")
        parser.add_argument("--dump-config", action="store_true", help="Print every planner key with its value and exit")
        parser.add_argument("--record", action="store_true", help="Store the run in the run registry")

    def handle(self, *args, **options):
        config_path = options["config"] or settings.PLANNER_CONFIG_FILE
        try:
            params = load_parameters(config_path)
        except ConfigurationError as exc:
            raise CommandError(str(exc), returncode=EXIT_INPUT_ERROR)

        if options["dump_config"]:
            self.stdout.write(dump_parameters(params), ending="")
            return

        if not options["scenario"]:
            raise CommandError("--scenario is required", returncode=EXIT_INPUT_ERROR)
        try:
            formats = parse_formats(options["formats"])
        except ValueError as exc:
            raise CommandError(str(exc), returncode=EXIT_INPUT_ERROR)
        if options["cycles"] is not None and options["cycles"] < 1:
            raise CommandError("--cycles must be at least 1", returncode=EXIT_INPUT_ERROR)

        try:
            scenario = load_scenario(options["scenario"])
        except ScenarioError as exc:
            raise CommandError(f"Invalid scenario: {exc}", returncode=EXIT_INPUT_ERROR)

        out_dir = Path(options["out"]) if options["out"] else Path(settings.PLANNER_OUTPUT_ROOT) / scenario.name
        started_at = timezone.now()
        verbosity = options["verbosity"]

        def progress(message, context):
            if verbosity > 1:
                self.stdout.write(message)

        trace = run_closed_loop(scenario, params, cycles=options["cycles"], progress_callback=progress)

        try:
            written = emit_outputs(trace, out_dir, formats, plot=options["plot"])
        except OutputError as exc:
            raise CommandError(str(exc), returncode=EXIT_OUTPUT_ERROR)

        if options["record"]:
            run = record_trace(
                trace, cycles_requested=len(trace), output_directory=out_dir, started_at=started_at,
            )
            self.stdout.write(f"Recorded run {run.pk}")

        summary = f"{len(trace)} cycle(s), {trace.fallback_count} fallback(s), {len(written)} file(s) in {out_dir}"
        if trace.fallback_count:
            self.stdout.write(self.style.WARNING(summary))
        else:
            self.stdout.write(self.style.SUCCESS(summary))
