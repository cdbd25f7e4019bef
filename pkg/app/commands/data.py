import click

from app.commands.common import command_workspace, run_options
from app.services.experiment_service import ExperimentService


@click.command("prepare-data")
@run_options
def prepare_data(config):
    """Generate the corpus, sample subsets and render degraded pairs"""
    with command_workspace(config, "prepare-data") as ws:
        summary = ExperimentService.prepare_data(config, ws)
    click.echo(f"corpus={summary['corpus']} train={summary['train']} eval={summary['eval']}")
