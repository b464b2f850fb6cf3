import os
from concurrent.futures import ThreadPoolExecutor

from django.conf import settings
from django.core.management.base import BaseCommand
from django.utils.crypto import get_random_string

from benchmark.cli import (
    record_run,
    resolve_dataset,
    run_and_capture,
    run_manifest,
    train_configs,
    translate_errors,
)
from benchmark.reports import aggregate_ablation, write_ablation_csv
from gan.trainer import ABLATIONS, TrainConfig

DEFAULT_SEEDS = [0, 1, 2, 3, 4]


class Command(BaseCommand):
    help = "Run every ablation configuration per seed and write the aggregate table."

    def add_arguments(self, parser):
        parser.add_argument(
            "--manifest", help="run manifest JSON (config, data, out, seeds)"
        )
        parser.add_argument("--config", help="JSON file overriding TrainConfig fields")
        parser.add_argument(
            "--data", help="dataset manifest.json; the synthetic benchmark when omitted"
        )
        parser.add_argument("--out", help="output directory")
        parser.add_argument("--seeds", help="comma-separated seeds (default 0,1,2,3,4)")
        parser.add_argument("--seed", type=int, help="run a single seed")
        parser.add_argument(
            "--workers", type=int, default=1, help="runs executed in parallel"
        )
        parser.add_argument(
            "--deterministic", action="store_true", help="force serial execution"
        )

    def handle(self, *args, **options):
        with translate_errors():
            manifest = run_manifest(options)
            seeds = manifest["seeds"]
            if not seeds:
                single = manifest["seed"]
                seeds = DEFAULT_SEEDS if single is None else [single]
            base, eval_config = train_configs(manifest["config"])
            dataset = resolve_dataset(manifest["data"])
            out = manifest["out"] or os.path.join(
                settings.DECGAN["OUTPUT_DIR"], "ablation"
            )
            os.makedirs(out, exist_ok=True)

        jobs = []
        for name in ABLATIONS:
            for seed in seeds:
                config = TrainConfig.for_ablation(name, base.replace(seed=seed))
                jobs.append((name, config, os.path.join(out, f"{name}-seed{seed}")))

        workers = max(options["workers"], 1)
        if manifest["deterministic"] or options["deterministic"]:
            workers = 1
        self.stdout.write(
            f"{len(jobs)} runs ({len(ABLATIONS)} configurations x {len(seeds)} seeds), "
            f"{workers} worker(s)"
        )

        def run(job):
            name, config, output_dir = job
            return run_and_capture(dataset, config, eval_config, output_dir, name)

        with ThreadPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(run, jobs))

        sweep = get_random_string(12)
        results = {}
        for outcome in outcomes:
            record_run(outcome, sweep=sweep)
            results.setdefault(outcome.label, []).append(outcome.metrics)
            if outcome.error:
                self.stdout.write(
                    self.style.ERROR(
                        f"{outcome.label} seed {outcome.seed} failed: {outcome.error}"
                    )
                )

        rows = aggregate_ablation(results, list(ABLATIONS))
        with translate_errors():
            path = write_ablation_csv(rows, os.path.join(out, "ablation.csv"))
        for row in rows:
            line = f"{row.configuration:<9} runs={row.runs} failed={row.failed} "
            if row.H is not None:
                line += f"a_u={row.a_u:.4f} a_s={row.a_s:.4f} H={row.H:.4f}"
            self.stdout.write(line)
        self.stdout.write(
            self.style.SUCCESS(f"Ablation table written to {path} (sweep {sweep})")
        )
