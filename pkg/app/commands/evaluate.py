import click

from app.commands.common import command_workspace, run_options
from app.services.experiment_service import EVAL_SOURCES, ExperimentService


@click.command("evaluate")
@click.option("--source", type=click.Choice(EVAL_SOURCES), default="restored", show_default=True,
              help="restored: full pipeline; no-align: LQ latents; upsampled: bicubic baseline; gt: self-check")
@run_options
def evaluate(source, config):
    """Score one source on the fixed eval set (CSV + JSON summary under reports/)"""
    with command_workspace(config, f"evaluate --source {source}") as ws:
        report = ExperimentService.evaluate(config, ws, source=source)
    means = report.means()
    click.echo(" ".join(f"{key}={means[key]}" for key in ("psnr", "ssim", "deg", "lmd")) + f" fid={report.fid}")
