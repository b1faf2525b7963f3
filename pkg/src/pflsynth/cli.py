"""Command line entry points: ``pflsynth`` and ``phantom``.

Exit codes: 0 success, 2 configuration error, 3 training divergence.
"""

from __future__ import annotations

import json
import logging
import sys
from pathlib import Path

import click

from .errors import ComparisonError, ConfigError, DataError, TrainingDivergence

EXIT_CONFIG = 2
EXIT_DIVERGENCE = 3


def _guard(fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except (ConfigError, ComparisonError, DataError) as exc:
        click.echo(f"configuration error: {exc}", err=True)
        sys.exit(EXIT_CONFIG)
    except TrainingDivergence as exc:
        click.echo(f"training diverged: {exc} {json.dumps(exc.record)}", err=True)
        sys.exit(EXIT_DIVERGENCE)


@click.group()
@click.option("-v", "--verbose", is_flag=True, help="Log progress to stderr.")
def main(verbose):
    """Personalized federated MRI synthesis experiments on synthetic phantoms."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")


@main.command()
@click.option("--config", "config_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--out", default="runs", show_default=True, type=click.Path(file_okay=False))
def run(config_path, out):
    """Run one experiment config (JSON or TOML)."""
    from .experiments import load_config, run_experiment

    cfg = _guard(load_config, config_path)
    report = _guard(run_experiment, cfg, out)
    click.echo(f"{report.run_dir}  mean PSNR {report.mean_psnr():.2f} dB  SSIM {report.mean_ssim():.2f}%")


@main.command()
@click.option("--configs", "config_dir", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--out", default="runs", show_default=True, type=click.Path(file_okay=False))
def matrix(config_dir, out):
    """Run every config in a directory as one paired comparison."""
    from .experiments import load_matrix_configs, run_matrix

    configs = _guard(load_matrix_configs, config_dir)
    table, _ = _guard(run_matrix, configs, out)
    for label in table.labels:
        p, s = table.means[label]
        flag = "  *best federated*" if label == table.best else ""
        click.echo(f"{label:>16}  PSNR {p:6.2f}  SSIM {s:6.2f}{flag}")


@main.command()
@click.option("--run", "run_dirs", required=True, multiple=True, type=click.Path(exists=True, file_okay=False))
@click.option("--out", default=None, type=click.Path(file_okay=False), help="Defaults to <first run>/plots.")
def plots(run_dirs, out):
    """Similarity and sample-grid figures for one or more finished runs."""
    from .experiments import emit_plots, load_report

    reports = [_guard(load_report, d) for d in run_dirs]
    out = out or str(Path(run_dirs[0]) / "plots")
    for path in emit_plots(reports, out):
        click.echo(str(path))


@click.group("phantom")
def phantom_group():
    """Synthetic multi-site phantom datasets."""


@phantom_group.command("generate")
@click.option("--sites", default=4, show_default=True, type=int)
@click.option("--size", default=64, show_default=True, type=int)
@click.option("--maps", default=20, show_default=True, type=int)
@click.option("--setup", default="common", show_default=True, type=click.Choice(["common", "variable"]))
@click.option("--seed", default=0, show_default=True, type=int)
@click.option("--out", required=True, type=click.Path(file_okay=False))
def generate(sites, size, maps, setup, seed, out):
    """Render every site's paired dataset to OUT/<site>/."""
    from .phantom import build_sites, save_dataset

    datasets = _guard(build_sites, sites, size, maps, setup, seed)
    for ds in datasets:
        path = save_dataset(ds, Path(out) / ds.profile.name)
        counts = {k: len(v) for k, v in ds.splits.items()}
        click.echo(f"{ds.profile.name}: {counts} -> {path}")


main.add_command(phantom_group)
phantom = phantom_group

if __name__ == "__main__":
    main()
