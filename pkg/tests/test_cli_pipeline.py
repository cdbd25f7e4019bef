"""
CLI Pipeline Test Suite
=======================
Tiny end-to-end runs through the click commands: data preparation, every
training stage, evaluation sources, ablations, sweeps, diagnostics and
plots. Desk-scale acceptance runs are marked slow.
"""
import json

import pandas as pd
import pytest
from click.testing import CliRunner

from app.config import build_config
from app.main import cli
from app.models.embedders import LossProviders
from app.services.codec_service import CodecService
from app.services.data_service import DataService
from app.services.experiment_service import ExperimentService
from app.services.metrics_service import MetricsService
from app.utils.seeding import derive_seed
from app.workspace import LOCK_NAME, Workspace, open_workspace

PIPELINE = (
    ["prepare-data"],
    ["train", "--stage", "codec"],
    ["train", "--stage", "prior"],
    ["train", "--stage", "1"],
    ["train", "--stage", "2"],
    ["evaluate"],
)


def invoke(args, root, set_args, expect=0):
    result = CliRunner().invoke(cli, [*args, "--output-dir", str(root), *set_args])
    assert result.exit_code == expect, result.output
    return result


def run_pipeline(root, set_args):
    for args in PIPELINE:
        invoke(args, root, set_args)
    return root


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory, tiny_set_args):
    """Output directory of one complete tiny run."""
    return run_pipeline(tmp_path_factory.mktemp("pipeline"), tiny_set_args)


# ============================================
# Data preparation
# ============================================

class TestPrepareData:
    def test_outputs(self, tmp_path, tiny_set_args):
        result = invoke(["prepare-data"], tmp_path, tiny_set_args)
        assert "corpus=24 train=8 eval=4" in result.output
        ws = Workspace(tmp_path)
        for name in ("corpus_manifest", "train_manifest", "eval_manifest", "landmarks"):
            assert ws.exists(name)
        assert (ws.data_dir / "degradations.csv").exists()
        assert (tmp_path / "config.resolved.txt").exists()
        assert not (tmp_path / LOCK_NAME).exists()

    def test_train_and_eval_are_disjoint(self, tmp_path, tiny_set_args):
        invoke(["prepare-data"], tmp_path, tiny_set_args)
        ws = Workspace(tmp_path)
        train = ws.artifact("train_manifest").read_text().splitlines()
        eval_ = ws.artifact("eval_manifest").read_text().splitlines()
        train_ids = {line.split("\t")[0] for line in train if line and not line.startswith("#")}
        eval_ids = {line.split("\t")[0] for line in eval_ if line and not line.startswith("#")}
        assert not train_ids & eval_ids


# ============================================
# Errors surfaced by the CLI
# ============================================

class TestCliErrors:
    def test_missing_prerequisite_is_named(self, tmp_path, tiny_set_args):
        result = invoke(["train", "--stage", "codec"], tmp_path, tiny_set_args, expect=1)
        assert "train_manifest" in result.output

    def test_stage_order_enforced(self, tmp_path, tiny_set_args):
        invoke(["prepare-data"], tmp_path, tiny_set_args)
        result = invoke(["train", "--stage", "2"], tmp_path, tiny_set_args, expect=1)
        assert "codec" in result.output

    def test_locked_output_dir(self, tmp_path, tiny_set_args):
        (tmp_path / LOCK_NAME).write_text("12345")
        result = invoke(["prepare-data"], tmp_path, tiny_set_args, expect=1)
        assert "locked" in result.output
        assert (tmp_path / LOCK_NAME).exists()

    def test_unknown_config_key(self, tmp_path):
        result = invoke(["prepare-data", "--set", "lora.rnak=2"], tmp_path, [], expect=1)
        assert "lora.rnak" in result.output

    def test_malformed_set_option(self, tmp_path):
        invoke(["prepare-data", "--set", "lora.rank"], tmp_path, [], expect=2)

    def test_unknown_stage(self, tmp_path):
        invoke(["train", "--stage", "3"], tmp_path, [], expect=2)

    def test_ablate_needs_exactly_one_source(self, tmp_path, tiny_set_args):
        invoke(["ablate"], tmp_path, tiny_set_args, expect=2)


# ============================================
# Training and evaluation
# ============================================

class TestPipeline:
    def test_checkpoints_and_logs(self, pipeline):
        ws = Workspace(pipeline)
        for name in ("codec", "prior", "stage1", "stage2", "conditioning"):
            assert ws.exists(name)
        for stage in ("codec", "prior", "stage1"):
            assert list(pd.read_csv(ws.loss_log(stage)).columns) == ["epoch", "loss"]
        stage2_log = pd.read_csv(ws.loss_log("stage2"))
        assert list(stage2_log.columns) == ["step", "L_res", "L_id", "L_fs", "total"]
        assert len(stage2_log) == 2

    def test_stage2_parameter_report(self, pipeline):
        report = json.loads((pipeline / "reports" / "stage2_parameters.json").read_text())
        assert 0 < report["trainable_params"] < report["total_params"]
        assert report["layers"]
        assert all("conv" in name for name in report["layers"])

    def test_evaluate_writes_restored_and_no_align(self, pipeline):
        reports = pipeline / "reports"
        for source in ("restored", "no-align"):
            frame = pd.read_csv(reports / f"metrics_{source}.csv")
            assert list(frame.columns) == ["id", "psnr", "ssim", "deg", "lmd"]
            assert len(frame) == 4
            assert list(frame["id"]) == sorted(frame["id"])
            summary = json.loads((reports / f"summary_{source}.json").read_text())
            assert summary["count"] == 4
            assert summary["corpus_sizes"] == {"eval": 4, "train": 8}

    def test_gt_self_check(self, pipeline, tiny_set_args):
        invoke(["evaluate", "--source", "gt"], pipeline, tiny_set_args)
        summary = json.loads((pipeline / "reports" / "summary_gt.json").read_text())
        assert summary["means"]["psnr"] == "inf"
        assert summary["means"]["ssim"] == pytest.approx(1.0, abs=1e-9)
        assert summary["means"]["deg"] == pytest.approx(0.0, abs=1e-6)
        assert summary["means"]["lmd"] == 0.0
        assert summary["fid"] == pytest.approx(0.0, abs=1e-4)

    def test_upsampled_baseline(self, pipeline, tiny_set_args):
        result = invoke(["evaluate", "--source", "upsampled"], pipeline, tiny_set_args)
        assert "psnr=" in result.output
        frame = pd.read_csv(pipeline / "reports" / "metrics_upsampled.csv")
        assert frame["psnr"].between(0, 100).all()

    def test_rerun_from_snapshot(self, pipeline):
        snapshot = pipeline / "config.resolved.txt"
        config = build_config(snapshot, environ={}, use_dotenv=False)
        assert config.output_dir == str(pipeline)
        assert config.stage2.total_steps == 2

    def test_runs_are_deterministic(self, pipeline, tmp_path, tiny_set_args):
        """Same config, different directory → byte-identical checkpoints and reports"""
        other = run_pipeline(tmp_path / "again", tiny_set_args)
        for relative in (
            "checkpoints/codec.lafr",
            "checkpoints/stage1.lafr",
            "checkpoints/stage2.lafr",
            "checkpoints/conditioning.lafr",
            "logs/stage2_loss.csv",
            "reports/metrics_restored.csv",
        ):
            assert (pipeline / relative).read_bytes() == (other / relative).read_bytes(), relative


# ============================================
# Experiments
# ============================================

class TestExperiments:
    def test_empty_manifest(self, pipeline, tmp_path, tiny_set_args):
        manifest = tmp_path / "empty.tsv"
        manifest.write_text("# no runs\n")
        result = invoke(["ablate", "--manifest", str(manifest)], pipeline, tiny_set_args)
        assert "empty grid" in result.output
        table = pd.read_csv(pipeline / "ablations" / "ablation_table.csv")
        assert len(table) == 0
        assert list(table.columns) == list(ExperimentService.ABLATION_COLUMNS)

    def test_failed_run_does_not_stop_grid(self, pipeline, tmp_path, tiny_set_args):
        manifest = tmp_path / "grid.tsv"
        manifest.write_text("bad\tloss.no_such_key=1\nres_only\tloss.lambda_id=0,loss.lambda_fs=0\n")
        invoke(["ablate", "--manifest", str(manifest)], pipeline, tiny_set_args)
        table = pd.read_csv(pipeline / "ablations" / "ablation_table.csv").set_index("run_id")
        assert table.loc["bad", "status"] == "failed"
        assert table.loc["res_only", "status"] == "ok"
        assert table.loc["res_only", "lambda_id"] == 0
        assert (pipeline / "ablations" / "res_only" / "reports" / "metrics_restored.csv").exists()

    def test_grid_presets(self):
        loss = ExperimentService.grid_manifest("loss")
        arch = ExperimentService.grid_manifest("arch")
        assert len(loss.runs) == 6 and len(arch.runs) == 5
        assert loss.runs[-1].overrides == {}
        assert arch.runs[-1].overrides["stage2.align"] == "true"

    def test_sweep(self, pipeline, tiny_set_args):
        invoke(["sweep-trainsize", "--sizes", "8,4"], pipeline, tiny_set_args)
        table = pd.read_csv(pipeline / "sweeps" / "sweep_table.csv")
        assert list(table["size"]) == [4, 8]
        summary = json.loads((pipeline / "sweeps" / "summary.json").read_text())
        assert summary["reference_size"] == 8
        assert summary["plateau"] is not None
        assert (pipeline / "sweeps" / "sweep_plot.png").exists()
        assert (pipeline / "sweeps" / "4" / "checkpoints" / "stage2.lafr").exists()

    def test_sweep_size_out_of_range(self, pipeline, tiny_set_args):
        result = invoke(["sweep-trainsize", "--sizes", "1000"], pipeline, tiny_set_args, expect=1)
        assert "1000" in result.output

    def test_plateau_check(self):
        table = pd.DataFrame({"size": [100, 300, 600], "psnr": [24.0, 26.0, 26.3]})
        assert ExperimentService.plateau_check(table, 300, 0.02)["plateau"] is True
        assert ExperimentService.plateau_check(table, 100, 0.02)["plateau"] is False
        assert ExperimentService.plateau_check(table, 50, 0.02)["plateau"] is None


# ============================================
# Diagnostics and plots
# ============================================

class TestDiagnostics:
    def test_diagnose_latents(self, pipeline, tiny_set_args):
        result = invoke(["diagnose-latents"], pipeline, tiny_set_args)
        assert "utilization=" in result.output
        out_dir = pipeline / "reports" / "diagnostics"
        gaps = pd.read_csv(out_dir / "alignment_gaps.csv")
        assert list(gaps.columns) == ["id", "lq_to_hq", "aligned_to_hq"]
        usage = pd.read_csv(out_dir / "codebook_usage.csv")
        assert list(usage.columns) == ["index", "count"]
        assert len(usage) == 16
        assert (out_dir / "alignment_gaps.png").exists()
        assert (out_dir / "codebook_usage.png").exists()
        summary = json.loads((out_dir / "summary.json").read_text())
        assert summary["compactness"]["embedding"] == "pixel"

    def test_plot(self, pipeline, tiny_set_args):
        result = invoke(["plot"], pipeline, tiny_set_args)
        plots = pipeline / "reports" / "plots"
        assert plots.exists()
        assert any(line.endswith(".png") for line in result.output.splitlines())

    @pytest.mark.parametrize("seed", range(5))
    def test_faces_are_more_compact_than_noise(self, tiny_config, seed):
        config = tiny_config.model_copy(update={"eval": tiny_config.eval.model_copy(update={"diagnostic_samples": 16})})
        result = ExperimentService.compactness(config, seed=seed)
        assert result["embedding"] == "pixel"
        assert result["face_intra_class_distance"] < result["noise_intra_class_distance"]
        assert -1.0 <= result["silhouette"] <= 1.0

    def test_compactness_under_identity_provider(self, tiny_config):
        """The identity option embeds with the frozen loss network of loss.provider_seed"""
        eval_config = tiny_config.eval.model_copy(update={"compactness_embedding": "identity"})
        config = tiny_config.model_copy(update={"eval": eval_config})
        result = ExperimentService.compactness(config, seed=0)
        assert result["embedding"] == "identity"
        identity = LossProviders(config.loss.provider_seed).identity
        faces = DataService.generate_toy_faces(config.eval.diagnostic_samples, config.data.image_size, derive_seed(0, "diagnostic_faces"))
        expected = MetricsService.intra_class_distance(identity.embed_batch(faces))
        assert result["face_intra_class_distance"] == pytest.approx(expected, rel=1e-12)


# ============================================
# Desk-scale acceptance
# ============================================

DESK_OVERRIDES = {
    "data.corpus_size": 640,
    "data.image_size": 64,
    "data.train_subset": 512,
    "data.eval_size": 64,
    "data.codec_images": 512,
    "eval.diagnostic_samples": 16,
}


@pytest.fixture(scope="module")
def desk_run(tmp_path_factory):
    """Data, codec, prior and stage 1 at desk scale."""
    root = tmp_path_factory.mktemp("desk")
    config = build_config(overrides={**DESK_OVERRIDES, "output_dir": str(root)}, environ={}, use_dotenv=False)
    with open_workspace(root) as ws:
        ExperimentService.prepare_data(config, ws)
        ExperimentService.train_codec(config, ws)
        ExperimentService.train_prior(config, ws)
        ExperimentService.train_stage1(config, ws)
    return config, root


@pytest.mark.slow
class TestAcceptance:
    def test_codec_roundtrip_floor(self, desk_run):
        config, root = desk_run
        codec = ExperimentService.load_codec(Workspace(root))
        eval_manifest = DataService.read_manifest(Workspace(root).artifact("eval_manifest"))
        _, hq, _ = ExperimentService.load_split(Workspace(root), eval_manifest)
        assert CodecService.roundtrip_psnr(codec, hq) >= 28.0

    def test_stage1_closes_latent_gap(self, desk_run):
        """Held-out aligned→HQ L1 at most 0.6 of LQ→HQ, with a live codebook"""
        config, root = desk_run
        with open_workspace(root) as ws:
            summary = ExperimentService.diagnose_latents(config, ws)
        assert summary["aligned_to_hq"]["mean"] <= 0.6 * summary["lq_to_hq"]["mean"]
        assert summary["codebook_utilization"] >= 0.05

    def test_stage2_beats_baselines(self, desk_run):
        config, root = desk_run
        with open_workspace(root) as ws:
            ExperimentService.train_stage2(config, ws)
            restored = ExperimentService.evaluate(config, ws)
            upsampled = ExperimentService.evaluate(config, ws, source="upsampled")
        no_align = json.loads((root / "reports" / "summary_no-align.json").read_text())
        assert restored.means()["psnr"] > upsampled.means()["psnr"]
        assert restored.means()["psnr"] > no_align["means"]["psnr"]
