from django.core.management.base import BaseCommand, CommandError

from benchmark.cli import EXIT_NUMERIC, translate_errors
from benchmark.gradcheck import run_suite


class Command(BaseCommand):
    help = "Compare every backward rule with central finite differences."

    def add_arguments(self, parser):
        parser.add_argument("--seed", type=int, default=0)
        parser.add_argument(
            "--points", type=int, default=10, help="random points per check"
        )

    def handle(self, *args, **options):
        with translate_errors():
            results = run_suite(seed=options["seed"], points=options["points"])
        for result in results:
            line = str(result)
            style = self.style.SUCCESS if result.passed else self.style.ERROR
            self.stdout.write(style(line))
        failed = [result.op for result in results if not result.passed]
        if failed:
            raise CommandError(
                f"gradient check failed for {', '.join(failed)}",
                returncode=EXIT_NUMERIC,
            )
        self.stdout.write(
            self.style.SUCCESS(f"All {len(results)} gradient checks passed")
        )
