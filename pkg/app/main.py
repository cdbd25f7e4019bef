"""
lafr - latent-alignment face restoration toolkit

Usage:
    python -m app.main prepare-data --output-dir runs/demo
    python -m app.main train --stage codec --output-dir runs/demo
    python -m app.main train --stage prior --output-dir runs/demo
    python -m app.main train --stage 1 --output-dir runs/demo
    python -m app.main train --stage 2 --output-dir runs/demo
    python -m app.main evaluate --output-dir runs/demo
"""
import logging
import os

import click
from dotenv import load_dotenv

from app.commands import COMMANDS

# Load environment variables
load_dotenv()

# Configure logging
logging.basicConfig(
    level=os.getenv("LOG_LEVEL", "INFO").upper(),
    format="%(asctime)s %(levelname)s [%(name)s] %(message)s",
    datefmt="%Y-%m-%d %H:%M:%S",
)
logger = logging.getLogger(__name__)


@click.group()
@click.version_option("1.0.0", prog_name="lafr")
def cli():
    """Blind face restoration by latent alignment and LoRA fine-tuning (desk scale)."""


for command in COMMANDS:
    cli.add_command(command)


if __name__ == "__main__":
    cli()
