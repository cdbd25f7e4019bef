"""
Experiment Service - end-to-end orchestration behind the CLI verbs

Every stage reads its inputs from one or more workspaces (searched in
order) and writes checkpoints, loss logs and reports to an output
workspace. Ablation rows and sweep sizes get their own output workspace
while reusing the base run's data, codec, prior and (for ablations)
stage-1 adapter.
"""
import logging
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import torch

from app.config import with_overrides, write_snapshot
from app.models.embedders import EmbeddingProvider, LossProviders, PixelEmbedding
from app.models.restorer import PrecomputedConditioning
from app.schemas.config import RunConfig
from app.schemas.data import DatasetManifest
from app.schemas.experiment import ExperimentManifest, ExperimentRun
from app.schemas.metrics import MetricsReport
from app.services.alignment_service import AlignmentService
from app.services.codec_service import CodecService
from app.services.data_service import DataService
from app.services.finetune_service import FinetuneService
from app.services.loss_service import LossService
from app.services.metrics_service import MetricsService
from app.services.report_service import ReportService
from app.utils.container import load_arrays, save_arrays
from app.utils.errors import FrozenContractError, ImageSizeError, ManifestError, MissingArtifactError
from app.utils.image_io import load_image, save_png
from app.utils.seeding import derive_seed
from app.utils.tensors import images_to_tensor, latents_to_tensor
from app.workspace import STAGE_PREREQUISITES, Workspace

logger = logging.getLogger(__name__)

EVAL_SOURCES = ("restored", "no-align", "upsampled", "gt")


class ExperimentService:
    """
    Orchestrates prepare → codec → prior → stage 1 → stage 2 → evaluate,
    plus ablation grids, training-size sweeps and latent diagnostics.
    """

    # Loss ablation; every row keeps L_res
    LOSS_GRID: Tuple[Tuple[str, Dict], ...] = (
        ("loss_1_res_only", {"loss.lambda_id": "0", "loss.lambda_fs": "0"}),
        ("loss_2_id", {"loss.lambda_fs": "0"}),
        ("loss_3_id_l2", {"loss.lambda_fs": "0", "loss.id_variant": "l2"}),
        ("loss_4_fs_l2", {"loss.lambda_id": "0", "loss.fs_variant": "l2"}),
        ("loss_5_fs", {"loss.lambda_id": "0"}),
        ("loss_6_id_fs", {}),
    )

    # Architecture ablation: full fine-tuning vs LoRA target, pruning, alignment
    ARCH_GRID: Tuple[Tuple[str, Dict], ...] = (
        ("arch_1_full", {"stage2.align": "false", "stage2.prune": "false", "lora.target": ""}),
        ("arch_2_attn", {"stage2.align": "false", "stage2.prune": "false", "lora.target": "attn"}),
        ("arch_3_conv", {"stage2.align": "false", "stage2.prune": "false", "lora.target": "conv"}),
        ("arch_4_conv_pruned", {"stage2.align": "false", "stage2.prune": "true", "lora.target": "conv"}),
        ("arch_5_conv_pruned_align", {"stage2.align": "true", "stage2.prune": "true", "lora.target": "conv"}),
    )

    ABLATION_COLUMNS = (
        "run_id", "status", "align", "prune", "target", "lambda_id", "lambda_fs", "id_variant", "fs_variant",
        "trainable_params", "total_params", "psnr", "ssim", "deg", "lmd", "fid", "error",
    )

    # ============================================
    # Workspace helpers
    # ============================================

    @staticmethod
    def _locate(name: str, *workspaces: Workspace) -> Path:
        """Path of the first workspace holding the artifact"""
        for ws in workspaces:
            if ws.exists(name):
                return ws.artifact(name)
        raise MissingArtifactError(name, str(workspaces[0].artifact(name)))

    @staticmethod
    def _require(stage: str, *workspaces: Workspace) -> None:
        for name in STAGE_PREREQUISITES[stage]:
            ExperimentService._locate(name, *workspaces)

    @staticmethod
    def grid_manifest(grid: str) -> ExperimentManifest:
        presets = {"loss": ExperimentService.LOSS_GRID, "arch": ExperimentService.ARCH_GRID}
        if grid not in presets:
            raise ManifestError(f"Unknown ablation grid '{grid}' (choose from {sorted(presets)})")
        return ExperimentManifest(
            runs=[ExperimentRun(run_id=run_id, overrides=dict(overrides)) for run_id, overrides in presets[grid]]
        )

    # ============================================
    # Data
    # ============================================

    @staticmethod
    def _corpus_images(config: RunConfig) -> Tuple[List[str], List[np.ndarray], Optional[List[np.ndarray]]]:
        data = config.data
        if data.source_folder:
            manifest = DataService.manifest_from_folder(data.source_folder, seed=config.seed)
            images = []
            for entry in manifest.entries:
                img = load_image(entry.path, channels=3)
                if img.shape[:2] != (data.image_size, data.image_size):
                    logger.info(f"Resizing {entry.id} from {img.shape[:2]} to {data.image_size}×{data.image_size}")
                    img = DataService._resize_bicubic(img, data.image_size, data.image_size)
                images.append(img)
            return manifest.ids, images, None
        faces = DataService.generate_toy_faces_with_landmarks(
            data.corpus_size, data.image_size, derive_seed(config.seed, "data")
        )
        ids = [f"face_{i:05d}" for i in range(len(faces))]
        return ids, [img for img, _ in faces], [points for _, points in faces]

    @staticmethod
    def prepare_data(config: RunConfig, ws: Workspace) -> Dict:
        """
        Render the corpus, sample eval and train subsets, degrade, write manifests.

        The eval set is drawn first; the train subset comes from the rest.
        Every non-eval image also gets an LQ counterpart so sweeps can draw
        larger subsets later.
        """
        data = config.data
        if data.image_size % data.scale_factor:
            raise ImageSizeError(f"scale_factor {data.scale_factor} must divide image_size {data.image_size}")
        ids, images, landmarks = ExperimentService._corpus_images(config)
        corpus = DatasetManifest(
            entries=[{"id": item_id, "path": f"hq/{item_id}.png"} for item_id in ids],
            split="train",
            subset_size=len(ids),
            seed=config.seed,
        )
        if data.eval_size + data.train_subset > len(corpus):
            raise ManifestError(
                f"eval_size ({data.eval_size}) + train_subset ({data.train_subset}) exceeds the corpus ({len(corpus)})"
            )
        eval_manifest = DataService.sample_training_subset(corpus, data.eval_size, derive_seed(config.seed, "eval_split"))
        eval_manifest = eval_manifest.model_copy(update={"split": "test"})
        pool = DataService.exclude(corpus, eval_manifest.ids)
        train_manifest = DataService.sample_training_subset(pool, data.train_subset, derive_seed(config.seed, "train_subset"))

        logger.info(f"Writing {len(ids)} HQ images to {ws.hq_dir}")
        for item_id, img in zip(ids, images):
            save_png(img, ws.hq_dir / f"{item_id}.png")

        eval_ids = set(eval_manifest.ids)
        params_rows = []
        for item_id, img in zip(ids, images):
            if item_id in eval_ids:
                params = DataService.evaluation_degradation_params(data, config.seed, item_id)
            else:
                params = DataService.sample_degradation_params(data, config.seed, item_id)
            # Degrade the stored 8-bit HQ so LQ/HQ pairs match what later stages load
            hq = load_image(ws.hq_dir / f"{item_id}.png")
            save_png(DataService.degrade(hq, params), ws.lq_dir / f"{item_id}.png")
            params_rows.append({"id": item_id, **params.model_dump()})

        DataService.write_manifest(corpus, ws.artifact("corpus_manifest"))
        DataService.write_manifest(eval_manifest, ws.artifact("eval_manifest"))
        DataService.write_manifest(train_manifest, ws.artifact("train_manifest"))
        ws.write_table(pd.DataFrame(params_rows), ws.data_dir / "degradations.csv")
        if landmarks is not None:
            ws.write_table(DataService.landmark_table(ids, landmarks), ws.artifact("landmarks"))

        summary = {"corpus": len(corpus), "eval": len(eval_manifest), "train": len(train_manifest)}
        logger.info(f"✓ Prepared data: {summary}")
        return summary

    @staticmethod
    def load_split(ws: Workspace, manifest: DatasetManifest) -> Tuple[List[str], List[np.ndarray], List[np.ndarray]]:
        """(ids, HQ images, LQ images) of a manifest's entries"""
        hq, lq = [], []
        for entry in manifest.entries:
            hq.append(load_image(DataService.resolve_path(ws.data_dir, entry)))
            lq_path = ws.lq_dir / f"{entry.id}.png"
            if not lq_path.exists():
                raise MissingArtifactError(f"LQ image {entry.id}", str(lq_path))
            lq.append(load_image(lq_path))
        return manifest.ids, hq, lq

    @staticmethod
    def pool_manifest(ws: Workspace) -> DatasetManifest:
        """Corpus entries outside the eval set"""
        ws.require("corpus_manifest", "eval_manifest")
        corpus = DataService.read_manifest(ws.artifact("corpus_manifest"))
        eval_manifest = DataService.read_manifest(ws.artifact("eval_manifest"))
        return DataService.exclude(corpus, eval_manifest.ids)

    # ============================================
    # Artifact loading
    # ============================================

    @staticmethod
    def load_codec(*workspaces: Workspace):
        return CodecService.from_arrays(load_arrays(ExperimentService._locate("codec", *workspaces)))

    @staticmethod
    def load_prior(*workspaces: Workspace):
        return FinetuneService.prior_from_arrays(load_arrays(ExperimentService._locate("prior", *workspaces)))

    @staticmethod
    def load_adapter(*workspaces: Workspace):
        adapter = AlignmentService.from_arrays(load_arrays(ExperimentService._locate("stage1", *workspaces)))
        return AlignmentService.freeze(adapter)

    @staticmethod
    def load_stage2(*workspaces: Workspace):
        """Adapted restorer; a pruned model's fixed tensors must match the stored conditioning file"""
        base = ExperimentService.load_prior(*workspaces)
        model, pruned = FinetuneService.lora_from_arrays(base, load_arrays(ExperimentService._locate("stage2", *workspaces)))
        if pruned:
            stored = PrecomputedConditioning.from_arrays(
                load_arrays(ExperimentService._locate("conditioning", *workspaces))
            )
            rebuilt = PrecomputedConditioning.compute_checksum(
                model.prompt, model.prompt_embedding.cpu().numpy(), model.timestep_embedding.cpu().numpy()
            )
            if rebuilt != stored.checksum:
                raise FrozenContractError("Pruned restorer tensors differ from the stored conditioning file")
        return model

    @staticmethod
    def _upsampled(lq: Sequence[np.ndarray], factor: int) -> List[np.ndarray]:
        return [DataService.upsample(img, factor) for img in lq]

    # ============================================
    # Training stages
    # ============================================

    @staticmethod
    def train_codec(config: RunConfig, ws: Workspace) -> Dict:
        ExperimentService._require("codec", ws)
        pool = ExperimentService.pool_manifest(ws)
        subset = DatasetManifest(
            entries=pool.entries[: config.data.codec_images],
            split="train",
            subset_size=min(config.data.codec_images, len(pool)),
            seed=config.seed,
        )
        _, hq, _ = ExperimentService.load_split(ws, subset)
        codec, trace = CodecService.train_toy_codec(hq, config.codec, config.optim, seed=derive_seed(config.seed, "codec"))
        save_arrays(ws.artifact("codec"), CodecService.to_arrays(codec))
        ws.write_table(pd.DataFrame(trace, columns=["epoch", "loss"]), ws.loss_log("codec"))

        eval_manifest = DataService.read_manifest(ws.artifact("eval_manifest"))
        _, eval_hq, _ = ExperimentService.load_split(ws, eval_manifest)
        heldout = CodecService.roundtrip_psnr(codec, eval_hq)
        logger.info(f"✓ Codec trained: held-out round-trip PSNR {heldout:.2f} dB")
        return {"images": len(hq), "heldout_psnr": heldout}

    @staticmethod
    def train_prior(config: RunConfig, ws: Workspace) -> Dict:
        ExperimentService._require("prior", ws)
        codec = ExperimentService.load_codec(ws)
        train = DataService.read_manifest(ws.artifact("train_manifest"))
        _, hq, _ = ExperimentService.load_split(ws, train)
        z_hq = latents_to_tensor(CodecService.encode_batch(codec, hq))
        model, trace = FinetuneService.pretrain_toy_restorer(z_hq, config.prior, config.optim, seed=derive_seed(config.seed, "prior"))
        save_arrays(ws.artifact("prior"), FinetuneService.prior_to_arrays(model))
        ws.write_table(pd.DataFrame(trace, columns=["epoch", "loss"]), ws.loss_log("prior"))
        with torch.no_grad():
            zero_noise = float(torch.nn.functional.mse_loss(model(z_hq), z_hq))
        logger.info(f"✓ Prior trained: zero-noise reconstruction mse {zero_noise:.6f}")
        return {"latents": len(z_hq), "zero_noise_mse": zero_noise}

    @staticmethod
    def latent_pairs(config: RunConfig, codec, ws: Workspace, manifest: DatasetManifest) -> Tuple[torch.Tensor, torch.Tensor]:
        _, hq, lq = ExperimentService.load_split(ws, manifest)
        z_hq = latents_to_tensor(CodecService.encode_batch(codec, hq))
        z_lq = latents_to_tensor(CodecService.encode_batch(codec, ExperimentService._upsampled(lq, config.data.scale_factor)))
        return z_lq, z_hq

    @staticmethod
    def train_stage1(config: RunConfig, inputs: Workspace, outputs: Optional[Workspace] = None, manifest: Optional[DatasetManifest] = None) -> Dict:
        outputs = outputs or inputs
        ExperimentService._require("1", outputs, inputs)
        codec = ExperimentService.load_codec(outputs, inputs)
        manifest = manifest or DataService.read_manifest(inputs.artifact("train_manifest"))
        z_lq, z_hq = ExperimentService.latent_pairs(config, codec, inputs, manifest)

        adapter = AlignmentService.build(config.adapter, codec.latent_channels, seed=derive_seed(config.seed, "stage1"))
        adapter, trace = AlignmentService.train_stage1(
            z_lq, z_hq, adapter, config.stage1, config.adapter, config.optim,
            seed=derive_seed(config.seed, "stage1"), codec=codec,
        )
        save_arrays(outputs.artifact("stage1"), AlignmentService.to_arrays(adapter))
        outputs.write_table(pd.DataFrame(trace, columns=["epoch", "loss"]), outputs.loss_log("stage1"))
        gaps = AlignmentService.alignment_gaps(z_lq, z_hq, adapter)
        summary = {
            "pairs": len(z_lq),
            "train_lq_gap": float(gaps["lq_to_hq"].mean()),
            "train_aligned_gap": float(gaps["aligned_to_hq"].mean()),
        }
        logger.info(f"✓ Stage 1 done: {summary}")
        return summary

    @staticmethod
    def train_stage2(config: RunConfig, inputs: Workspace, outputs: Optional[Workspace] = None, manifest: Optional[DatasetManifest] = None) -> Dict:
        outputs = outputs or inputs
        ExperimentService._require("2", outputs, inputs)
        codec = ExperimentService.load_codec(outputs, inputs)
        adapter = ExperimentService.load_adapter(outputs, inputs)
        base = ExperimentService.load_prior(outputs, inputs)
        manifest = manifest or DataService.read_manifest(inputs.artifact("train_manifest"))
        _, hq, lq = ExperimentService.load_split(inputs, manifest)

        model, conditioning, layers = FinetuneService.prepare_model(
            base, config.lora, prune=config.stage2.prune, seed=derive_seed(config.seed, "stage2")
        )
        providers = LossProviders(config.loss.provider_seed)
        model, trace = FinetuneService.train_stage2(
            images_to_tensor(ExperimentService._upsampled(lq, config.data.scale_factor)),
            images_to_tensor(hq),
            model, codec, adapter, config.loss, providers, config.stage2, config.optim,
            seed=derive_seed(config.seed, "stage2"),
        )
        save_arrays(outputs.artifact("stage2"), FinetuneService.lora_to_arrays(model, config.lora, pruned=config.stage2.prune))
        save_arrays(outputs.artifact("conditioning"), conditioning.to_arrays())
        outputs.write_table(
            pd.DataFrame(trace, columns=["step", "L_res", "L_id", "L_fs", "total"]), outputs.loss_log("stage2")
        )
        counts = FinetuneService.parameter_counts(model)
        summary = {
            "pairs": len(hq),
            "layers": layers,
            "trainable_params": counts["trainable"],
            "total_params": counts["total"],
            "final_loss": trace[-1]["total"] if trace else None,
        }
        ReportService.write_json(summary, outputs.report_dir / "stage2_parameters.json")
        logger.info(f"✓ Stage 2 done: {counts['trainable']} trainable / {counts['total']} total parameters")
        return summary

    # ============================================
    # Evaluation
    # ============================================

    @staticmethod
    def restore_images(config: RunConfig, source: str, lq: Sequence[np.ndarray], hq: Sequence[np.ndarray], *workspaces: Workspace) -> List[np.ndarray]:
        """Images produced by one evaluation source"""
        if source not in EVAL_SOURCES:
            raise ValueError(f"Unknown evaluation source '{source}' (choose from {EVAL_SOURCES})")
        if source == "gt":
            return [img.copy() for img in hq]
        upsampled = ExperimentService._upsampled(lq, config.data.scale_factor)
        if source == "upsampled":
            return upsampled
        codec = ExperimentService.load_codec(*workspaces)
        model = ExperimentService.load_stage2(*workspaces)
        adapter = ExperimentService.load_adapter(*workspaces) if source == "restored" else None
        z = FinetuneService.latent_input(images_to_tensor(upsampled), codec, adapter, align=source == "restored")
        return FinetuneService.restore(z, model, codec)

    @staticmethod
    def evaluate(config: RunConfig, inputs: Workspace, outputs: Optional[Workspace] = None, source: str = "restored") -> MetricsReport:
        """
        Metrics of one source on the fixed eval set, written as CSV + JSON summary.

        Returns:
            MetricsReport with one row per eval image
        """
        outputs = outputs or inputs
        report, _ = ExperimentService._evaluate(config, inputs, outputs, source)
        if source == "restored" and config.eval.include_no_adapter:
            ExperimentService._evaluate(config, inputs, outputs, "no-align")
        return report

    @staticmethod
    def _evaluate(config: RunConfig, inputs: Workspace, outputs: Workspace, source: str) -> Tuple[MetricsReport, List[np.ndarray]]:
        inputs.require("eval_manifest")
        eval_manifest = DataService.read_manifest(inputs.artifact("eval_manifest"))
        ids, hq, lq = ExperimentService.load_split(inputs, eval_manifest)
        restored = ExperimentService.restore_images(config, source, lq, hq, outputs, inputs)
        providers = LossProviders(config.loss.provider_seed)
        landmarks = DataService.optional_landmarks(inputs.artifact("landmarks"))

        report = MetricsService.evaluate_pairs(
            ids, restored, hq, providers.identity, landmarks=landmarks, workers=config.eval.workers, source=source,
        )
        train_size = len(DataService.read_manifest(inputs.artifact("train_manifest"))) if inputs.exists("train_manifest") else 0
        report.corpus_sizes = {"eval": len(ids), "train": train_size}

        outputs.write_table(MetricsService.report_frame(report), outputs.report_dir / f"metrics_{source}.csv")
        ReportService.write_json(report.summary(), outputs.report_dir / f"summary_{source}.json")
        means = report.means()
        logger.info(
            f"📊 {source}: psnr={means['psnr']} ssim={means['ssim']} deg={means['deg']} "
            f"lmd={means['lmd']} fid={report.fid}"
        )
        return report, restored

    # ============================================
    # Ablations and sweeps
    # ============================================

    @staticmethod
    def _ablation_row(run: ExperimentRun, config: RunConfig) -> Dict:
        return {
            "run_id": run.run_id,
            "align": config.stage2.align,
            "prune": config.stage2.prune,
            "target": config.lora.target,
            "lambda_id": config.loss.lambda_id,
            "lambda_fs": config.loss.lambda_fs,
            "id_variant": config.loss.id_variant,
            "fs_variant": config.loss.fs_variant,
        }

    @staticmethod
    def ablate(config: RunConfig, ws: Workspace, manifest: ExperimentManifest) -> pd.DataFrame:
        """
        One stage-2 run + evaluation per grid row; a failed row is recorded and the grid continues.

        Returns:
            Comparison table keyed by run id (also written to ablations/ablation_table.csv)
        """
        if manifest.runs:
            ExperimentService._require("2", ws)
        rows = []
        for run in manifest.runs:
            logger.info("=" * 60)
            logger.info(f"Ablation run '{run.run_id}': {run.overrides}")
            row = {"run_id": run.run_id}
            try:
                run_config = with_overrides(config, run.overrides)
                row.update(ExperimentService._ablation_row(run, run_config))
                run_ws = Workspace(ws.root / "ablations" / run.run_id)
                write_snapshot(run_config, run_ws.root)
                stage2 = ExperimentService.train_stage2(run_config, ws, run_ws)
                report, _ = ExperimentService._evaluate(run_config, ws, run_ws, "restored")
                means = report.means()
                row.update({
                    "status": "ok",
                    "trainable_params": stage2["trainable_params"],
                    "total_params": stage2["total_params"],
                    "psnr": means["psnr"], "ssim": means["ssim"], "deg": means["deg"], "lmd": means["lmd"],
                    "fid": report.fid,
                })
            except Exception as exc:
                logger.error(f"❌ Ablation run '{run.run_id}' failed: {exc}", exc_info=True)
                row.update({"status": "failed", "error": str(exc)})
            rows.append(row)

        table = pd.DataFrame(rows, columns=list(ExperimentService.ABLATION_COLUMNS))
        ws.write_table(table, ws.root / "ablations" / "ablation_table.csv")
        failed = int((table["status"] == "failed").sum()) if len(table) else 0
        logger.info(f"✓ Ablation grid finished: {len(table)} runs, {failed} failed")
        return table

    @staticmethod
    def sweep_trainsize(config: RunConfig, ws: Workspace, sizes: Sequence[int]) -> Tuple[pd.DataFrame, Dict]:
        """
        Stage 1 + stage 2 + evaluation per training-set size.

        Returns:
            (per-size table, plateau summary)
        """
        ExperimentService._require("1", ws)
        pool = ExperimentService.pool_manifest(ws)
        sizes = sorted(set(int(size) for size in sizes))
        too_big = [size for size in sizes if size > len(pool) or size < 1]
        if too_big:
            raise ManifestError(f"Sweep sizes {too_big} are outside [1, {len(pool)}] (non-eval corpus)")

        providers = LossProviders(config.loss.provider_seed)
        eval_manifest = DataService.read_manifest(ws.artifact("eval_manifest"))
        _, eval_hq, _ = ExperimentService.load_split(ws, eval_manifest)
        rows = []
        for size in sizes:
            logger.info("=" * 60)
            logger.info(f"Sweep: {size} training images")
            size_ws = Workspace(ws.root / "sweeps" / str(size))
            subset = DataService.sample_training_subset(pool, size, derive_seed(config.seed, "train_subset"))
            DataService.write_manifest(subset, size_ws.artifact("train_manifest"))
            write_snapshot(config, size_ws.root)
            ExperimentService.train_stage1(config, ws, size_ws, manifest=subset)
            ExperimentService.train_stage2(config, ws, size_ws, manifest=subset)
            report, restored = ExperimentService._evaluate(config, ws, size_ws, "restored")
            with torch.no_grad():
                proxy = float(LossService.perceptual_distance(images_to_tensor(restored), images_to_tensor(eval_hq), providers.perceptual))
            rows.append({"size": size, **report.means(), "fid": report.fid, "lpips_proxy": proxy})

        table = pd.DataFrame(rows, columns=["size", "psnr", "ssim", "deg", "lmd", "fid", "lpips_proxy"])
        summary = ExperimentService.plateau_check(table, config.data.train_subset, config.eval.plateau_tolerance)
        ws.write_table(table, ws.root / "sweeps" / "sweep_table.csv")
        ReportService.write_json(summary, ws.root / "sweeps" / "summary.json")
        if len(table):
            ReportService.plot_sweep(table, ws.root / "sweeps" / "sweep_plot.png")
        return table, summary

    @staticmethod
    def plateau_check(table: pd.DataFrame, reference_size: int, tolerance: float) -> Dict:
        """Is the reference-size PSNR within `tolerance` (relative) of the largest run's?"""
        summary = {"reference_size": reference_size, "tolerance": tolerance, "plateau": None, "relative_gap": None}
        if table.empty or reference_size not in set(table["size"]):
            return summary
        largest = table.loc[table["size"].idxmax()]
        reference = table.loc[table["size"] == reference_size].iloc[0]
        gap = float((largest["psnr"] - reference["psnr"]) / abs(largest["psnr"]))
        summary.update({"largest_size": int(largest["size"]), "relative_gap": gap, "plateau": bool(gap <= tolerance)})
        return summary

    # ============================================
    # Diagnostics
    # ============================================

    @staticmethod
    def diagnose_latents(config: RunConfig, ws: Workspace) -> Dict:
        """Latent gap statistics, codebook usage and face-vs-noise compactness"""
        ws.require("stage1", "eval_manifest")
        codec = ExperimentService.load_codec(ws)
        adapter = ExperimentService.load_adapter(ws)
        out_dir = ws.report_dir / "diagnostics"

        eval_manifest = DataService.read_manifest(ws.artifact("eval_manifest"))
        z_lq, z_hq = ExperimentService.latent_pairs(config, codec, ws, eval_manifest)
        gaps = AlignmentService.alignment_gaps(z_lq, z_hq, adapter)
        ws.write_table(pd.DataFrame({"id": eval_manifest.ids, **gaps}), out_dir / "alignment_gaps.csv")
        ReportService.plot_gap_histogram(gaps, out_dir / "alignment_gaps.png")

        usage_source = z_lq
        if ws.exists("train_manifest"):
            train = DataService.read_manifest(ws.artifact("train_manifest"))
            usage_source, _ = ExperimentService.latent_pairs(config, codec, ws, train)
        counts = AlignmentService.codebook_usage(adapter, usage_source)
        ws.write_table(AlignmentService.usage_table(counts), out_dir / "codebook_usage.csv")
        ReportService.plot_usage(counts, out_dir / "codebook_usage.png")

        compactness = ExperimentService.compactness(config)
        summary = {
            "lq_to_hq": AlignmentService.gap_statistics(gaps["lq_to_hq"]),
            "aligned_to_hq": AlignmentService.gap_statistics(gaps["aligned_to_hq"]),
            "codebook_utilization": AlignmentService.utilization(counts),
            "compactness": compactness,
        }
        ReportService.write_json(summary, out_dir / "summary.json")
        logger.info(
            f"✓ Diagnostics: LQ→HQ gap {summary['lq_to_hq']['mean']:.4f}, "
            f"aligned→HQ gap {summary['aligned_to_hq']['mean']:.4f}, "
            f"utilization {summary['codebook_utilization']:.1%}"
        )
        return summary

    @staticmethod
    def compactness_embedder(config: RunConfig) -> EmbeddingProvider:
        """Pixel embedding, or one of the frozen loss networks built from loss.provider_seed"""
        name = config.eval.compactness_embedding
        if name == PixelEmbedding.name:
            return PixelEmbedding()
        return getattr(LossProviders(config.loss.provider_seed), name)

    @staticmethod
    def compactness(config: RunConfig, seed: Optional[int] = None) -> Dict:
        """Intra-class distance of toy faces vs uniform noise, and their silhouette, under eval.compactness_embedding"""
        seed = config.seed if seed is None else seed
        n = config.eval.diagnostic_samples
        size = config.data.image_size
        faces = DataService.generate_toy_faces(n, size, derive_seed(seed, "diagnostic_faces"))
        noise = DataService.generate_noise_images(n, size, derive_seed(seed, "diagnostic_noise"))
        embedder = ExperimentService.compactness_embedder(config)
        face_features = embedder.embed_batch(faces)
        noise_features = embedder.embed_batch(noise)
        features = np.concatenate([face_features, noise_features])
        labels = np.array([0] * n + [1] * n)
        return {
            "embedding": embedder.name,
            "samples_per_class": n,
            "face_intra_class_distance": MetricsService.intra_class_distance(face_features),
            "noise_intra_class_distance": MetricsService.intra_class_distance(noise_features),
            "silhouette": MetricsService.silhouette(features, labels),
        }
