"""
Report Service - static plots and JSON summaries written next to the CSV tables
"""
import json
import logging
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Union

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

# No timestamps or version strings in the files, so reruns are byte-identical
_PNG_METADATA = {"Software": None}


class ReportService:
    """Matplotlib (Agg) figures: loss curves, sweep curves, gap histograms, codebook usage"""

    FIGSIZE = (6.4, 4.0)
    DPI = 100

    @staticmethod
    def _save(fig, path: PathLike) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        fig.tight_layout()
        fig.savefig(path, dpi=ReportService.DPI, metadata=_PNG_METADATA)
        plt.close(fig)
        logger.info(f"📈 Wrote {path}")
        return path

    @staticmethod
    def write_json(data: Mapping, path: PathLike) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return path

    @staticmethod
    def plot_loss_curve(frame: pd.DataFrame, title: str, path: PathLike) -> Optional[Path]:
        """One line per loss column against the epoch/step column"""
        if frame.empty:
            logger.warning(f"Skipping plot for '{title}': empty log")
            return None
        x_column = "step" if "step" in frame.columns else "epoch"
        fig, ax = plt.subplots(figsize=ReportService.FIGSIZE)
        for column in frame.columns:
            if column == x_column:
                continue
            ax.plot(frame[x_column], frame[column], label=column, linewidth=1.2)
        ax.set_xlabel(x_column)
        ax.set_ylabel("loss")
        ax.set_yscale("log" if (frame.drop(columns=[x_column]) > 0).all().all() else "linear")
        ax.set_title(title)
        ax.legend()
        ax.grid(alpha=0.3)
        return ReportService._save(fig, path)

    @staticmethod
    def plot_loss_logs(log_dir: PathLike, out_dir: PathLike) -> List[Path]:
        """Plot every <stage>_loss.csv in a log directory"""
        written = []
        for log_path in sorted(Path(log_dir).glob("*_loss.csv")):
            stage = log_path.stem[: -len("_loss")]
            plot = ReportService.plot_loss_curve(pd.read_csv(log_path), f"{stage} training loss", Path(out_dir) / f"{stage}_loss.png")
            if plot is not None:
                written.append(plot)
        return written

    @staticmethod
    def plot_sweep(table: pd.DataFrame, path: PathLike) -> Path:
        """PSNR and perceptual proxy against the number of training images"""
        fig, ax_psnr = plt.subplots(figsize=ReportService.FIGSIZE)
        ax_psnr.plot(table["size"], table["psnr"], marker="o", color="tab:blue", label="PSNR")
        ax_psnr.set_xlabel("training images")
        ax_psnr.set_ylabel("PSNR (dB)", color="tab:blue")
        ax_lpips = ax_psnr.twinx()
        ax_lpips.plot(table["size"], table["lpips_proxy"], marker="s", color="tab:orange", label="perceptual proxy")
        ax_lpips.set_ylabel("perceptual distance", color="tab:orange")
        ax_psnr.set_title("Restoration quality vs training-set size")
        ax_psnr.grid(alpha=0.3)
        return ReportService._save(fig, path)

    @staticmethod
    def plot_gap_histogram(gaps: Dict[str, Sequence[float]], path: PathLike, bins: int = 30) -> Path:
        fig, ax = plt.subplots(figsize=ReportService.FIGSIZE)
        values = [np.asarray(v, dtype=np.float64) for v in gaps.values()]
        finite = np.concatenate(values) if values else np.zeros(0)
        edges = np.linspace(finite.min(), finite.max(), bins + 1) if finite.size and finite.max() > finite.min() else bins
        for label, vals in zip(gaps.keys(), values):
            ax.hist(vals, bins=edges, alpha=0.55, label=label)
        ax.set_xlabel("mean |Δz| per sample")
        ax.set_ylabel("samples")
        ax.set_title("Latent gap to HQ")
        ax.legend()
        return ReportService._save(fig, path)

    @staticmethod
    def plot_usage(counts: Sequence[int], path: PathLike) -> Path:
        counts = np.asarray(counts)
        fig, ax = plt.subplots(figsize=ReportService.FIGSIZE)
        ax.bar(np.arange(len(counts)), counts, width=1.0, color="tab:green")
        ax.set_xlabel("codebook index")
        ax.set_ylabel("queries")
        ax.set_title(f"Codebook usage ({int((counts > 0).sum())}/{len(counts)} entries used)")
        return ReportService._save(fig, path)
