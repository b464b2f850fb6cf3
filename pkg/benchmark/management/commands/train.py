from django.core.management.base import BaseCommand

from benchmark.cli import (
    RunOutcome,
    default_output_dir,
    execute_run,
    label_for,
    record_run,
    resolve_dataset,
    run_manifest,
    train_configs,
    translate_errors,
)


class Command(BaseCommand):
    help = "Train the decoupled generator, evaluate it and write the run artifacts."

    def add_arguments(self, parser):
        parser.add_argument(
            "--manifest",
            help="run manifest JSON (config, data, out, seed, stages, ablation)",
        )
        parser.add_argument("--config", help="JSON file overriding TrainConfig fields")
        parser.add_argument(
            "--data", help="dataset manifest.json; the synthetic benchmark when omitted"
        )
        parser.add_argument("--out", help="output directory")
        parser.add_argument("--seed", type=int)
        parser.add_argument(
            "--ablation", help="full, Stg1, Stg3, -Stg1, -Stg2, -Stg3 or baseline"
        )
        parser.add_argument("--stages", help="comma-separated stages to run, e.g. 1,3")
        parser.add_argument(
            "--deterministic", action="store_true", help="serial execution (default)"
        )
        parser.add_argument(
            "--no-record",
            action="store_true",
            help="do not store the run in the database",
        )

    def handle(self, *args, **options):
        with translate_errors():
            manifest = run_manifest(options)
            config, eval_config = train_configs(
                manifest["config"],
                manifest["seed"],
                manifest["ablation"],
                manifest["stages"],
            )
            label = label_for(config, manifest["ablation"])
            output_dir = manifest["out"] or default_output_dir(label, config.seed)
            dataset = resolve_dataset(manifest["data"])
            self.stdout.write(
                f"{label}: stages {config.stages()} seed {config.seed} -> {output_dir}"
            )
            result = execute_run(dataset, config, eval_config, output_dir, label)

        if not options["no_record"]:
            outcome = RunOutcome.for_config(config, label, output_dir, result.metrics)
            record_run(outcome)
        self.stdout.write(self.style.SUCCESS(result.metrics.summary()))
