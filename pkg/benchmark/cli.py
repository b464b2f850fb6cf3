"""
Shared plumbing of the management commands: JSON loading and validation,
error translation to exit codes and the execution of a single run.

Exit codes: 0 success, 2 validation, 3 I/O, 4 numeric.
"""
import json
import logging
import os
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Optional

from django.conf import settings
from django.core.exceptions import ValidationError
from django.core.management.base import CommandError

from benchmark.datasets import SyntheticSpec, load_dataset, make_synthetic
from benchmark.evaluation import EvalConfig
from benchmark.forms import RunManifestForm, SyntheticSpecForm, TrainConfigForm
from benchmark.models import Run
from benchmark.reports import write_metrics, write_run_record
from gan.checkpoints import save_checkpoint
from gan.exceptions import DecganError, NumericError
from gan.losses import LossWeights
from gan.trainer import ABLATIONS, TrainConfig, run_pipeline

logger = logging.getLogger(__name__)

EXIT_VALIDATION = 2
EXIT_IO = 3
EXIT_NUMERIC = 4


def _messages(error):
    if isinstance(error, ValidationError):
        return "; ".join(error.messages)
    return str(error)


@contextmanager
def translate_errors():
    """Re-raise library errors as ``CommandError`` with the matching exit code."""
    try:
        yield
    except CommandError:
        raise
    except NumericError as exc:
        raise CommandError(f"numeric failure: {exc}", returncode=EXIT_NUMERIC) from exc
    except (ValidationError, DecganError, json.JSONDecodeError) as exc:
        raise CommandError(
            f"validation failed: {_messages(exc)}", returncode=EXIT_VALIDATION
        ) from exc
    except OSError as exc:
        raise CommandError(f"I/O failure: {exc}", returncode=EXIT_IO) from exc


def load_json(path):
    with open(path) as file:
        data = json.load(file)
    if not isinstance(data, dict):
        raise ValidationError(f"{path}: expected a JSON object", code="invalid")
    return data


def validated(form_class, data, source):
    form = form_class(data)
    if not form.is_valid():
        details = "; ".join(
            f"{field}: {' '.join(errors)}" for field, errors in form.errors.items()
        )
        raise ValidationError(f"{source}: {details}", code="invalid")
    return form


def parse_int_list(value):
    if value in (None, ""):
        return None
    try:
        return [int(part) for part in str(value).split(",") if part.strip()]
    except ValueError:
        raise ValidationError(
            f"expected a comma-separated list of integers, got {value!r}",
            code="invalid",
        )


def synthetic_spec(config_path=None, seed=None):
    overrides = {}
    if config_path:
        form = validated(SyntheticSpecForm, load_json(config_path), config_path)
        overrides = form.overrides()
    if seed is not None:
        overrides["seed"] = seed
    return SyntheticSpec.from_settings(**overrides)


def train_configs(config_path=None, seed=None, ablation=None, stages=None):
    """``(TrainConfig, EvalConfig)`` from settings, a JSON config file and flags."""
    train, loss, evaluation = {}, {}, {}
    if config_path:
        form = validated(TrainConfigForm, load_json(config_path), config_path)
        train, loss, evaluation = form.split()
    if seed is not None:
        train["seed"] = seed
    if stages is not None:
        train["stage_mask"] = stages
    weights = LossWeights.from_settings(**loss)
    config = TrainConfig.from_settings(loss_weights=weights, **train)
    if ablation:
        config = TrainConfig.for_ablation(ablation, config)
    return config, EvalConfig.from_settings(**evaluation)


def run_manifest(options):
    """
    Merge the optional ``--manifest`` file with command-line flags (flags win)
    and validate the result.
    """
    data = load_json(options["manifest"]) if options.get("manifest") else {}
    for key in ("config", "data", "out", "seed", "ablation"):
        if options.get(key) not in (None, ""):
            data[key] = options[key]
    for key in ("stages", "seeds"):
        if options.get(key) not in (None, ""):
            data[key] = parse_int_list(options[key])
    if options.get("deterministic"):
        data["deterministic"] = True
    form = validated(RunManifestForm, data, options.get("manifest") or "command line")
    values = {key: form.cleaned_data.get(key) for key in form.fields}
    values["ablation"] = values["ablation"] or None
    return values


def resolve_dataset(data_path=None):
    if data_path:
        return load_dataset(data_path)
    return make_synthetic(SyntheticSpec.from_settings())


def default_output_dir(label, seed):
    return os.path.join(settings.DECGAN["OUTPUT_DIR"], f"{label}-seed{seed}")


def label_for(config, ablation=None):
    if ablation:
        return ablation
    for name, (mask, baseline) in ABLATIONS.items():
        if config.stage_mask == mask and config.baseline_mode == baseline:
            return name
    return "custom"


@dataclass
class RunOutcome:
    label: str
    seed: int
    output_dir: str
    config_hash: str
    stages: str
    baseline: bool
    metrics: Optional[object] = None
    error: Optional[str] = None

    @classmethod
    def for_config(cls, config, label, output_dir, metrics=None):
        return cls(
            label=label,
            seed=config.seed,
            output_dir=output_dir,
            config_hash=config.digest(),
            stages=",".join(str(s) for s in config.stages()),
            baseline=config.baseline_mode,
            metrics=metrics,
        )


def execute_run(dataset, config, eval_config, output_dir, label):
    """
    Train, evaluate and write the run's artifacts: a checkpoint per finished
    stage, ``telemetry.csv``, ``metrics.csv``, ``summary.txt`` and ``run.json``.
    """
    os.makedirs(output_dir, exist_ok=True)
    write_run_record(output_dir, config, label, dataset.summary())

    def on_stage_end(stage, models):
        path = os.path.join(output_dir, f"checkpoint_stage{stage}.npz")
        save_checkpoint(path, models, config.seed)

    result = run_pipeline(dataset, config, eval_config, on_stage_end=on_stage_end)
    result.telemetry.write_csv(os.path.join(output_dir, "telemetry.csv"))
    write_metrics(result.metrics, output_dir)
    return result


def run_and_capture(dataset, config, eval_config, output_dir, label):
    """``execute_run`` that records library failures on the outcome."""
    outcome = RunOutcome.for_config(config, label, output_dir)
    try:
        result = execute_run(dataset, config, eval_config, output_dir, label)
        outcome.metrics = result.metrics
    except (DecganError, ValidationError, OSError) as exc:
        logger.warning("run %s seed %s failed: %s", label, config.seed, exc)
        outcome.error = _messages(exc)
    return outcome


def record_run(outcome, sweep=""):
    run = Run.objects.create(
        label=outcome.label,
        sweep=sweep,
        seed=outcome.seed,
        stages=outcome.stages,
        baseline=outcome.baseline,
        config_hash=outcome.config_hash,
        output_dir=outcome.output_dir,
    )
    if outcome.metrics is not None:
        run.mark_completed(outcome.metrics)
    else:
        run.mark_failed(outcome.error)
    return run
