"""CSV and JSON artifacts written next to each run."""
import csv
import json
import logging
import os
import platform
from dataclasses import dataclass
from typing import List, Optional

import django
import numpy as np

from benchmark.evaluation import harmonic_mean

logger = logging.getLogger(__name__)

METRICS_FIELDS = ["class", "split", "accuracy"]
ABLATION_FIELDS = ["configuration", "runs", "failed", "a_u", "a_s", "H", "H_of_means"]


def write_metrics(metrics, directory):
    """``metrics.csv`` with one row per class and the one-line ``summary.txt``."""
    os.makedirs(directory, exist_ok=True)
    path = os.path.join(directory, "metrics.csv")
    with open(path, "w", newline="") as file:
        writer = csv.writer(file)
        writer.writerow(METRICS_FIELDS)
        for class_id, split, accuracy in metrics.rows():
            writer.writerow([class_id, split, repr(float(accuracy))])
    with open(os.path.join(directory, "summary.txt"), "w") as file:
        file.write(metrics.summary() + "\n")
    return path


def versions():
    return {
        "python": platform.python_version(),
        "numpy": np.__version__,
        "django": django.get_version(),
    }


def write_run_record(directory, config, label, dataset_summary=None):
    record = {
        "label": label,
        "seed": config.seed,
        "config": config.as_dict(),
        "config_hash": config.digest(),
        "versions": versions(),
    }
    if dataset_summary is not None:
        record["dataset"] = dataset_summary
    path = os.path.join(directory, "run.json")
    with open(path, "w") as file:
        json.dump(record, file, indent=2, sort_keys=True)
    return path


@dataclass
class AblationRow:
    configuration: str
    runs: int
    failed: int
    a_u: Optional[float]
    a_s: Optional[float]
    H: Optional[float]
    H_of_means: Optional[float]

    def as_list(self):
        return [
            self.configuration,
            self.runs,
            self.failed,
            *(
                "" if v is None else repr(float(v))
                for v in (self.a_u, self.a_s, self.H, self.H_of_means)
            ),
        ]


def aggregate_ablation(results, order):
    """
    ``results`` maps a configuration name to its per-seed metrics, ``None``
    for a failed run. H is the mean of the per-run H values; H_of_means is
    the harmonic mean of the mean accuracies.
    """
    rows: List[AblationRow] = []
    for name in order:
        runs = results.get(name, [])
        finished = [m for m in runs if m is not None]
        if not finished:
            rows.append(AblationRow(name, len(runs), len(runs), None, None, None, None))
            continue
        a_u = float(np.mean([m.a_u for m in finished]))
        a_s = float(np.mean([m.a_s for m in finished]))
        rows.append(
            AblationRow(
                configuration=name,
                runs=len(runs),
                failed=len(runs) - len(finished),
                a_u=a_u,
                a_s=a_s,
                H=float(np.mean([m.H for m in finished])),
                H_of_means=harmonic_mean(a_s, a_u),
            )
        )
    return rows


def write_ablation_csv(rows, path):
    with open(path, "w", newline="") as file:
        writer = csv.writer(file)
        writer.writerow(ABLATION_FIELDS)
        for row in rows:
            writer.writerow(row.as_list())
    return path
