"""Command-line front end for the forecasting pipeline.

Each subcommand runs the matching pipeline stage against an artifact
directory.  Exit codes: 0 success, 2 configuration problem, 3 numerical
failure, 4 provenance (stale or missing upstream artifact).
"""

from __future__ import annotations

import sys
from pathlib import Path

import click

from .errors import (ConfigError, DomainError, NumericalError,
                     ProvenanceError, StructuralError, WavecastError)
from .pipeline import STAGES, PipelineConfig, default_config, run_pipeline, run_stage

EXIT_CONFIG = 2
EXIT_NUMERICAL = 3
EXIT_PROVENANCE = 4


def _load_config(config_path, seed):
    if config_path is None:
        cfg = default_config()
    else:
        try:
            text = Path(config_path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {config_path}: {exc}") from exc
        cfg = PipelineConfig.from_ini(text)
    if seed is not None:
        from dataclasses import replace
        cfg = replace(cfg, seed=seed)
    return cfg


def _run(stage, config_path, seed, out):
    try:
        cfg = _load_config(config_path, seed)
        run_stage(cfg, out, stage)
    except (ConfigError, DomainError, StructuralError) as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(EXIT_CONFIG)
    except NumericalError as exc:
        click.echo(f"numerical failure: {exc}", err=True)
        sys.exit(EXIT_NUMERICAL)
    except ProvenanceError as exc:
        click.echo(f"provenance: {exc}", err=True)
        sys.exit(EXIT_PROVENANCE)
    except WavecastError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(1)
    click.echo(f"{stage}: done ({out})")


def _common(fn):
    fn = click.option("--out", default="artifacts", show_default=True,
                      help="artifact directory")(fn)
    fn = click.option("--seed", type=int, default=None,
                      help="override the configured RNG seed")(fn)
    fn = click.option("--config", "config_path", type=click.Path(),
                      default=None, help="INI configuration file")(fn)
    return fn


@click.group()
@click.version_option()
def main():
    """Reduced-order probabilistic tsunami wave-height forecasting."""


def _make_stage_command(stage, help_text):
    @main.command(name=stage, help=help_text)
    @_common
    def _cmd(config_path, seed, out):
        _run(stage, config_path, seed, out)
    return _cmd


_HELP = {
    "simulate": "Run the reference shallow-water simulation.",
    "sensors": "Place sensors against the reference amplitude map.",
    "ensemble": "Run the perturbed-source ensemble and extract scenarios.",
    "pod": "Decompose the reference snapshots into modes.",
    "rom": "Project the dynamics onto the modes (quadratic ODE).",
    "ngp": "Train elementwise operator corrections for stability.",
    "calibrate": "Sample the hierarchical posterior over initial values.",
    "forecast": "Produce probabilistic wave-height forecasts per sensor.",
    "report": "Write the run report (spectrum, diagnostics, wall clock).",
}
for _stage in STAGES:
    _make_stage_command(_stage, _HELP[_stage])


@main.command()
@_common
@click.option("--stage", "upto", default="report", show_default=True,
              type=click.Choice(STAGES),
              help="run stages in order up to and including this one")
def run(config_path, seed, out, upto):
    """Run the whole pipeline (or a prefix of it)."""
    try:
        cfg = _load_config(config_path, seed)
        run_pipeline(cfg, out, upto=upto)
    except (ConfigError, DomainError, StructuralError) as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(EXIT_CONFIG)
    except NumericalError as exc:
        click.echo(f"numerical failure: {exc}", err=True)
        sys.exit(EXIT_NUMERICAL)
    except ProvenanceError as exc:
        click.echo(f"provenance: {exc}", err=True)
        sys.exit(EXIT_PROVENANCE)
    except WavecastError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(1)
    click.echo(f"pipeline: done through {upto} ({out})")


@main.command("init-config")
@click.argument("path", type=click.Path())
def init_config(path):
    """Write a configuration file with the default settings."""
    p = Path(path)
    if p.exists():
        click.echo(f"error: {path} already exists", err=True)
        sys.exit(EXIT_CONFIG)
    p.write_text(default_config().to_ini())
    click.echo(f"wrote {path}")


if __name__ == "__main__":
    main()
