from django.core.management.base import BaseCommand

from benchmark.cli import synthetic_spec, translate_errors
from benchmark.datasets import make_synthetic, save_dataset


class Command(BaseCommand):
    help = "Generate the synthetic GZSL benchmark in the manifest format."

    def add_arguments(self, parser):
        parser.add_argument(
            "--config", help="JSON file overriding SyntheticSpec fields"
        )
        parser.add_argument(
            "--out", required=True, help="directory to write the dataset to"
        )
        parser.add_argument("--seed", type=int, help="overrides the benchmark seed")

    def handle(self, *args, **options):
        with translate_errors():
            spec = synthetic_spec(options["config"], options["seed"])
            dataset = make_synthetic(spec)
            manifest = save_dataset(dataset, options["out"])
        for key, value in dataset.summary().items():
            self.stdout.write(f"{key}: {value}")
        self.stdout.write(self.style.SUCCESS(f"Dataset written to {manifest}"))
