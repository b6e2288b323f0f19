"""Command line front end: ``quadsync synth|sync|joint|distributed|report``.

Every failure exits nonzero after printing one line starting with ``error:``.
"""
from __future__ import annotations

import logging
import sys

import click

from .experiments import load_config, read_results, run_experiment, synthesize
from .report import write_report

config_option = click.option("--config", "config_path", required=True,
                             type=click.Path(exists=True, dir_okay=False),
                             help="Key-value experiment config file.")
seed_option = click.option("--seed", type=int, default=None,
                           help="Run this seed only, overriding the config's seed list.")
out_option = click.option("--out", type=click.Path(file_okay=False), default=None,
                          help="Experiment directory, overriding the config's 'out'.")


def _seeds(config, seed):
    return [seed] if seed is not None else config.seeds


@click.group()
@click.option("-v", "--verbose", is_flag=True, help="Log solver progress.")
def cli(verbose: bool) -> None:
    """Synthetic multifocal synchronization experiments."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")


@cli.command()
@config_option
@seed_option
@out_option
def synth(config_path, seed, out):
    """Generate cameras and sampled noisy block tensors."""
    config = load_config(config_path)
    for s in _seeds(config, seed):
        d = synthesize(config, s, out)
        click.echo(f"wrote {d}")


def _run(command, config_path, seed, out, subsample_m=None, clusters=None):
    config = load_config(config_path)
    path = run_experiment(command, config, _seeds(config, seed), out, subsample_m, clusters)
    click.echo(f"wrote {path}")


@cli.command()
@config_option
@seed_option
@out_option
@click.option("--subsample-m", type=click.IntRange(min=1), default=None,
              help="Columns sampled per camera factor update.")
def sync(config_path, seed, out, subsample_m):
    """Run quadrifocal synchronization on synthesized inputs."""
    _run("sync", config_path, seed, out, subsample_m=subsample_m)


@cli.command()
@config_option
@seed_option
@out_option
def joint(config_path, seed, out):
    """Run the joint quadrifocal, trifocal and essential solver."""
    _run("joint", config_path, seed, out)


@cli.command()
@config_option
@seed_option
@out_option
@click.option("--subsample-m", type=click.IntRange(min=1), default=None)
@click.option("--clusters", type=click.Path(exists=True, dir_okay=False), default=None,
              help="Cluster plan: one line of camera indices per cluster.")
def distributed(config_path, seed, out, subsample_m, clusters):
    """Synchronize clusters separately and merge them."""
    _run("distributed", config_path, seed, out, subsample_m=subsample_m, clusters=clusters)


@cli.command()
@click.argument("results", nargs=-1, required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--out", type=click.Path(file_okay=False), default="report",
              help="Directory for summary.txt and the SVG charts.")
def report(results, out):
    """Summarize result CSVs as a table and SVG charts."""
    rows = [r for path in results for r in read_results(path)]
    table, charts = write_report(rows, out)
    click.echo(table, nl=False)
    for c in charts:
        click.echo(f"wrote {c}")


def _one_line(text: str) -> str:
    return " ".join(str(text).split())


def main(argv=None) -> int:
    try:
        result = cli.main(args=argv, prog_name="quadsync", standalone_mode=False)
    except click.exceptions.Exit as exc:
        return exc.exit_code
    except click.exceptions.Abort:
        click.echo("error: aborted", err=True)
        return 1
    except click.ClickException as exc:
        click.echo(f"error: {_one_line(exc.format_message())}", err=True)
        return exc.exit_code or 2
    except Exception as exc:  # every other failure path
        click.echo(f"error: {type(exc).__name__}: {_one_line(exc)}", err=True)
        return 1
    return result if isinstance(result, int) else 0


if __name__ == "__main__":
    sys.exit(main())
