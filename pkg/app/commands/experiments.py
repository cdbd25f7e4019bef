from pathlib import Path

import click

from app.commands.common import command_workspace, run_options
from app.schemas.experiment import ExperimentManifest
from app.services.experiment_service import ExperimentService


@click.command("ablate")
@click.option("--grid", type=click.Choice(["loss", "arch"]), default=None, help="Built-in ablation grid")
@click.option("--manifest", "manifest_file", type=click.Path(exists=True, dir_okay=False), default=None,
              help="Experiment manifest: '<run_id><TAB>key=value,...' per line")
@run_options
def ablate(grid, manifest_file, config):
    """Run stage 2 + evaluation per grid row and merge the results"""
    if (grid is None) == (manifest_file is None):
        raise click.UsageError("Pass exactly one of --grid or --manifest")
    try:
        manifest = (
            ExperimentService.grid_manifest(grid) if grid
            else ExperimentManifest.from_text(Path(manifest_file).read_text(encoding="utf-8"))
        )
    except ValueError as e:
        raise click.ClickException(f"Invalid experiment manifest: {e}")
    with command_workspace(config, "ablate") as ws:
        table = ExperimentService.ablate(config, ws, manifest)
    click.echo(table.to_string(index=False) if len(table) else "empty grid")


def _parse_sizes(ctx, param, value):
    try:
        return [int(part) for part in value.split(",") if part.strip()]
    except ValueError:
        raise click.BadParameter("expected comma-separated integers, e.g. 100,300,600")


@click.command("sweep-trainsize")
@click.option("--sizes", required=True, callback=_parse_sizes, help="Comma-separated training-set sizes")
@run_options
def sweep_trainsize(sizes, config):
    """Retrain stages 1 and 2 per training-set size and plot metrics against size"""
    with command_workspace(config, "sweep-trainsize") as ws:
        table, summary = ExperimentService.sweep_trainsize(config, ws, sizes)
    click.echo(table.to_string(index=False))
    click.echo(f"plateau={summary['plateau']} relative_gap={summary['relative_gap']}")
