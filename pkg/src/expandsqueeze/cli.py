"""Command-line entry point.

One binary with subcommands mirroring the pipeline stages::

    expandsqueeze pretrain  --config cfg.yaml [--resume CKPT] [--force]
    expandsqueeze squeeze   --config cfg.yaml
    expandsqueeze evaluate  --config cfg.yaml [--checkpoint CKPT]
    expandsqueeze compare   --config cfg.yaml [--variants a,b,...]
    expandsqueeze report    --config cfg.yaml

Exit codes: 0 success, 1 validation error, 2 training failure, 3 I/O or
checkpoint error. ``--jobs 1`` (the default) pins torch to one thread for
fully deterministic, bitwise-reproducible runs.
"""

from __future__ import annotations

import dataclasses
import sys

import click
import torch

from . import pipeline
from .checkpoint import CheckpointError
from .config import VARIANTS, ConfigError, ExperimentConfig, load_experiment_config
from .expansion import TrainingError

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_TRAINING = 2
EXIT_IO = 3


def _load(config_path: str, output_dir: str | None, seed: int | None,
          jobs: int) -> ExperimentConfig:
    torch.set_num_threads(max(1, jobs))
    config = load_experiment_config(config_path)
    if output_dir is not None:
        config = dataclasses.replace(config, output_dir=output_dir)
    if seed is not None:
        config = dataclasses.replace(config, global_seed=seed)
    return config


def _run(action) -> None:
    try:
        action()
    except ConfigError as exc:
        click.echo(f"validation error: {exc}", err=True)
        sys.exit(EXIT_VALIDATION)
    except TrainingError as exc:
        click.echo(f"training failure: {exc}", err=True)
        sys.exit(EXIT_TRAINING)
    except (CheckpointError, OSError) as exc:
        click.echo(f"i/o error: {exc}", err=True)
        sys.exit(EXIT_IO)
    sys.exit(EXIT_OK)


def _common_options(fn):
    fn = click.option("--jobs", type=int, default=1, show_default=True,
                      help="torch thread count; 1 = fully serial")(fn)
    fn = click.option("--seed", type=int, default=None, help="override global_seed")(fn)
    fn = click.option("--output-dir", type=str, default=None, help="override output_dir")(fn)
    fn = click.option("--config", "config_path", required=True,
                      type=click.Path(exists=False), help="experiment config file")(fn)
    return fn


@click.group()
def main() -> None:
    """Multi-task multi-source pre-training pipeline."""


@main.command()
@_common_options
@click.option("--resume", type=click.Path(exists=False), default=None,
              help="checkpoint to continue from")
@click.option("--force", is_flag=True, help="ignore config fingerprint mismatches")
def pretrain(config_path, output_dir, seed, jobs, resume, force) -> None:
    """Run the variant's pre-training stage(s)."""

    def action() -> None:
        config = _load(config_path, output_dir, seed, jobs)
        path = pipeline.run_pretrain(config, resume=resume, force=force)
        click.echo(f"pretrain complete: {path}")

    _run(action)


@main.command()
@_common_options
@click.option("--checkpoint", type=click.Path(exists=False), default=None,
              help="expanded checkpoint to condense (defaults to the run's own)")
@click.option("--force", is_flag=True, help="ignore config fingerprint mismatches")
def squeeze(config_path, output_dir, seed, jobs, checkpoint, force) -> None:
    """Condense the expanded backbone (distill or prune, by variant)."""

    def action() -> None:
        config = _load(config_path, output_dir, seed, jobs)
        path = pipeline.run_squeeze(config, checkpoint=checkpoint, force=force)
        click.echo(f"squeeze complete: {path}")

    _run(action)


@main.command()
@_common_options
@click.option("--checkpoint", type=click.Path(exists=False), default=None,
              help="specific checkpoint to evaluate")
@click.option("--force", is_flag=True, help="ignore config fingerprint mismatches")
def evaluate(config_path, output_dir, seed, jobs, checkpoint, force) -> None:
    """Probe the final artifact on the held-out transfer suite."""

    def action() -> None:
        config = _load(config_path, output_dir, seed, jobs)
        result = pipeline.run_evaluate(config, checkpoint=checkpoint, force=force)
        best = result["reports"][result["best_branch"]]
        click.echo(best.as_text())
        click.echo(f"report written to {result['paths']['json']}")

    _run(action)


@main.command()
@_common_options
@click.option("--variants", type=str, default=",".join(VARIANTS), show_default=True,
              help="comma-separated variant list")
def compare(config_path, output_dir, seed, jobs, variants) -> None:
    """Run several variants end to end and tabulate their probe results."""

    def action() -> None:
        names = [v.strip() for v in variants.split(",") if v.strip()]
        unknown = [v for v in names if v not in VARIANTS]
        if unknown:
            raise ConfigError(f"unknown variants: {unknown}")
        config = _load(config_path, output_dir, seed, jobs)
        pipeline.run_compare(config, names)
        table = pipeline.output_paths(config).reports / "comparison.txt"
        click.echo(table.read_text())

    _run(action)


@main.command()
@_common_options
def report(config_path, output_dir, seed, jobs) -> None:
    """Plot loss curves and probe bars from recorded artifacts."""

    def action() -> None:
        config = _load(config_path, output_dir, seed, jobs)
        for path in pipeline.run_report(config):
            click.echo(f"wrote {path}")

    _run(action)


if __name__ == "__main__":
    main()
