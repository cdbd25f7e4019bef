import click

from app.commands.common import command_workspace, run_options
from app.services.experiment_service import ExperimentService
from app.services.report_service import ReportService


@click.command("diagnose-latents")
@run_options
def diagnose_latents(config):
    """Alignment gaps, codebook usage and face-vs-noise compactness"""
    with command_workspace(config, "diagnose-latents") as ws:
        summary = ExperimentService.diagnose_latents(config, ws)
    click.echo(
        f"lq_to_hq={summary['lq_to_hq']['mean']:.6f} aligned_to_hq={summary['aligned_to_hq']['mean']:.6f} "
        f"utilization={summary['codebook_utilization']:.4f} silhouette={summary['compactness']['silhouette']:.4f}"
    )


@click.command("plot")
@run_options
def plot(config):
    """Loss curves for every training log in the run directory"""
    with command_workspace(config, "plot") as ws:
        paths = ReportService.plot_loss_logs(ws.log_dir, ws.report_dir / "plots")
    for path in paths:
        click.echo(str(path))
