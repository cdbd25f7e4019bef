import click

from app.commands.common import command_workspace, run_options
from app.services.experiment_service import ExperimentService

STAGES = {
    "codec": ExperimentService.train_codec,
    "prior": ExperimentService.train_prior,
    "1": ExperimentService.train_stage1,
    "2": ExperimentService.train_stage2,
}


@click.command("train")
@click.option("--stage", type=click.Choice(list(STAGES)), required=True,
              help="Stage to train (order: codec → prior → 1 → 2)")
@run_options
def train(stage, config):
    """
    Train one stage; writes its checkpoint and loss CSV.

    Fails naming the missing artifact when an earlier stage has not run.
    """
    with command_workspace(config, f"train --stage {stage}") as ws:
        summary = STAGES[stage](config, ws)
    for key, value in summary.items():
        click.echo(f"{key}={value}")
