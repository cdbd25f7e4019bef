"""
Workspace - the output directory of a run.

Knows where every artifact lives, refuses to run a stage whose
prerequisites are missing, and guarantees a single writer per directory.

Usage:
    with open_workspace(config.output_dir) as ws:
        ws.require("codec")
        ...
"""
import logging
import os
from contextlib import contextmanager
from pathlib import Path
from typing import Dict, Iterator, Union

import pandas as pd

from app.utils.errors import MissingArtifactError, WorkspaceLockedError

logger = logging.getLogger(__name__)

LOCK_NAME = ".lock"

# Stage order: codec → prior → 1 → 2
STAGE_PREREQUISITES: Dict[str, tuple] = {
    "codec": ("train_manifest",),
    "prior": ("train_manifest", "codec"),
    "1": ("train_manifest", "codec", "prior"),
    "2": ("train_manifest", "codec", "prior", "stage1"),
}


class Workspace:
    """Artifact layout of one output directory"""

    def __init__(self, root: Union[str, Path]):
        self.root = Path(root)

    # --- directories ---

    @property
    def data_dir(self) -> Path:
        return self.root / "data"

    @property
    def hq_dir(self) -> Path:
        return self.data_dir / "hq"

    @property
    def lq_dir(self) -> Path:
        return self.data_dir / "lq"

    @property
    def checkpoint_dir(self) -> Path:
        return self.root / "checkpoints"

    @property
    def log_dir(self) -> Path:
        return self.root / "logs"

    @property
    def report_dir(self) -> Path:
        return self.root / "reports"

    # --- named artifacts ---

    def artifact(self, name: str) -> Path:
        paths = {
            "corpus_manifest": self.data_dir / "corpus.manifest",
            "train_manifest": self.data_dir / "train.manifest",
            "eval_manifest": self.data_dir / "eval.manifest",
            "landmarks": self.data_dir / "landmarks.csv",
            "codec": self.checkpoint_dir / "codec.lafr",
            "prior": self.checkpoint_dir / "prior.lafr",
            "stage1": self.checkpoint_dir / "stage1.lafr",
            "stage2": self.checkpoint_dir / "stage2.lafr",
            "conditioning": self.checkpoint_dir / "conditioning.lafr",
        }
        if name not in paths:
            raise KeyError(f"Unknown artifact '{name}'")
        return paths[name]

    def loss_log(self, stage: str) -> Path:
        return self.log_dir / f"{stage}_loss.csv"

    def exists(self, name: str) -> bool:
        return self.artifact(name).exists()

    def require(self, *names: str) -> None:
        """Raise MissingArtifactError naming the first missing artifact"""
        for name in names:
            path = self.artifact(name)
            if not path.exists():
                raise MissingArtifactError(name, str(path))

    def require_stage(self, stage: str) -> None:
        self.require(*STAGE_PREREQUISITES[stage])

    def write_table(self, frame: pd.DataFrame, path: Union[str, Path]) -> Path:
        """Write a CSV atomically"""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        temp_path = path.with_suffix(path.suffix + ".tmp")
        frame.to_csv(temp_path, index=False, lineterminator="\n")
        os.replace(temp_path, path)
        return path

    def write_text(self, text: str, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        temp_path = path.with_suffix(path.suffix + ".tmp")
        temp_path.write_text(text, encoding="utf-8")
        os.replace(temp_path, path)
        return path


@contextmanager
def open_workspace(root: Union[str, Path]) -> Iterator[Workspace]:
    """
    Open a workspace for writing.

    Holds `<root>/.lock` for the duration; a second writer gets
    WorkspaceLockedError instead of interleaving outputs.
    """
    workspace = Workspace(root)
    workspace.root.mkdir(parents=True, exist_ok=True)
    lock_path = workspace.root / LOCK_NAME
    try:
        fd = os.open(lock_path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise WorkspaceLockedError(
            f"Output directory {workspace.root} is locked by another run "
            f"(remove {lock_path} if that run is gone)"
        )
    try:
        os.write(fd, str(os.getpid()).encode("ascii"))
        os.close(fd)
        logger.debug(f"Acquired workspace lock {lock_path}")
        yield workspace
    finally:
        try:
            lock_path.unlink()
        except FileNotFoundError:
            pass
