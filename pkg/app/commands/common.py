"""
Shared CLI plumbing: common options, config resolution and the workspace lock
"""
import functools
import logging
from contextlib import contextmanager
from typing import Iterator, Optional, Sequence, Tuple

import click

from app.config import build_config, write_snapshot
from app.schemas.config import RunConfig
from app.utils.errors import LafrError
from app.workspace import Workspace, open_workspace

logger = logging.getLogger(__name__)


def parse_set_options(values: Sequence[str]) -> dict:
    """--set key=value pairs → override dict"""
    overrides = {}
    for item in values:
        key, sep, value = item.partition("=")
        if not sep or not key.strip():
            raise click.BadParameter(f"expected key=value, got '{item}'", param_hint="--set")
        overrides[key.strip()] = value.strip()
    return overrides


def run_options(command):
    """--config / --set / --output-dir, shared by every verb"""
    @click.option("--config", "config_file", type=click.Path(exists=True, dir_okay=False), default=None,
                  help="Config file of 'dotted.key = value' lines")
    @click.option("--set", "set_values", multiple=True, metavar="KEY=VALUE",
                  help="Override one config key (repeatable)")
    @click.option("--output-dir", default=None, help="Run directory (overrides output_dir)")
    @functools.wraps(command)
    def wrapper(*args, config_file: Optional[str], set_values: Tuple[str, ...], output_dir: Optional[str], **kwargs):
        overrides = parse_set_options(set_values)
        if output_dir is not None:
            overrides["output_dir"] = output_dir
        try:
            config = build_config(config_file, overrides)
        except LafrError as e:
            raise click.ClickException(str(e))
        return command(*args, config=config, **kwargs)

    return wrapper


@contextmanager
def command_workspace(config: RunConfig, verb: str) -> Iterator[Workspace]:
    """
    Lock the output directory, snapshot the config and turn LafrError into a CLI error.
    """
    logger.info("=" * 60)
    logger.info(f"🚀 {verb} → {config.output_dir}")
    logger.info("=" * 60)
    try:
        with open_workspace(config.output_dir) as ws:
            write_snapshot(config, ws.root)
            yield ws
    except LafrError as e:
        logger.error(f"❌ {verb} failed: {e}")
        raise click.ClickException(str(e))
    logger.info(f"✓ {verb} finished")
