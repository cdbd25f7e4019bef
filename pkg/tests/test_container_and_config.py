"""
Container, Config and Workspace Test Suite
"""
import struct
import zlib
from collections import OrderedDict

import numpy as np
import pytest

from app.config import (
    SNAPSHOT_NAME,
    build_config,
    config_to_text,
    env_overrides,
    parse_config_text,
    with_overrides,
    write_snapshot,
)
from app.schemas.experiment import ExperimentManifest
from app.utils.container import decode_arrays, encode_arrays, load_arrays, save_arrays
from app.utils.errors import ConfigError, ContainerError, MissingArtifactError, WorkspaceLockedError
from app.utils.seeding import derive_seed, numpy_rng
from app.workspace import LOCK_NAME, Workspace, open_workspace


@pytest.fixture
def arrays():
    return OrderedDict([
        ("encoder.weight", np.arange(12, dtype=np.float32).reshape(3, 4) / 7),
        ("meta.size", np.array([1024], dtype=np.int64)),
        ("meta.prompt", np.frombuffer(b"face, high quality", dtype=np.uint8)),
        ("scalar", np.array(3.5, dtype=np.float32)),
    ])


# ============================================
# Container
# ============================================

class TestContainer:
    def test_save_load_save_is_byte_identical(self, tmp_path, arrays):
        first = save_arrays(tmp_path / "a.lafr", arrays)
        loaded = load_arrays(first)
        second = save_arrays(tmp_path / "b.lafr", loaded)
        assert first.read_bytes() == second.read_bytes()
        assert list(loaded) == list(arrays)
        for name in arrays:
            np.testing.assert_array_equal(loaded[name], arrays[name])

    def test_dtype_tags(self, arrays):
        decoded = decode_arrays(encode_arrays(arrays))
        assert decoded["encoder.weight"].dtype == np.float32
        assert decoded["meta.size"].dtype == np.int64
        assert decoded["meta.prompt"].dtype == np.uint8
        assert decoded["scalar"].shape == ()

    def test_float64_is_stored_as_float32(self):
        decoded = decode_arrays(encode_arrays({"x": np.array([0.5, 1.5])}))
        assert decoded["x"].dtype == np.float32

    def test_crc_corruption_detected(self, arrays):
        blob = bytearray(encode_arrays(arrays))
        blob[20] ^= 0xFF
        with pytest.raises(ContainerError, match="CRC"):
            decode_arrays(bytes(blob))

    def test_bad_magic(self, arrays):
        blob = b"XXXX" + encode_arrays(arrays)[4:]
        with pytest.raises(ContainerError, match="magic"):
            decode_arrays(blob)

    def test_duplicate_names_detected(self):
        """Hand-built body with the same name twice and a valid CRC"""
        record = struct.pack("<H", 1) + b"x" + struct.pack("<BB", 0, 1) + struct.pack("<I", 1) + np.float32(1).tobytes()
        body = b"LAFR" + struct.pack("<HI", 1, 2) + record + record
        blob = body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)
        with pytest.raises(ContainerError, match="Duplicate"):
            decode_arrays(blob)

    def test_truncated(self, arrays):
        body = encode_arrays(arrays)[:-4][:-8]
        blob = body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)
        with pytest.raises(ContainerError):
            decode_arrays(blob)

    def test_unsupported_dtype(self):
        with pytest.raises(ContainerError):
            encode_arrays({"x": np.array(["a"])})


# ============================================
# Config
# ============================================

class TestConfig:
    def test_defaults(self):
        config = build_config(environ={}, use_dotenv=False)
        assert config.lora.rank == 4
        assert config.stage1.batch_size == 16
        assert config.loss.id_variant == "cosine"

    def test_precedence(self, tmp_path):
        """defaults < file < environment < overrides"""
        config_file = tmp_path / "run.conf"
        config_file.write_text("# tiny\nstage1.epochs = 3\nstage1.batch_size = 8\nlora.rank = 2\n")
        environ = {"LAFR_STAGE1_BATCH_SIZE": "4", "LAFR_LORA_RANK": "6"}
        config = build_config(config_file, overrides={"lora.rank": "8"}, environ=environ, use_dotenv=False)
        assert config.stage1.epochs == 3
        assert config.stage1.batch_size == 4
        assert config.lora.rank == 8
        assert config.stage2.total_steps == 2000

    def test_unknown_file_key(self, tmp_path):
        config_file = tmp_path / "run.conf"
        config_file.write_text("stage1.epoch = 3\n")
        with pytest.raises(ConfigError, match="stage1.epoch"):
            build_config(config_file, environ={}, use_dotenv=False)

    def test_unknown_override_key(self):
        with pytest.raises(ConfigError):
            build_config(overrides={"lora.rnak": "2"}, environ={}, use_dotenv=False)

    def test_unknown_env_variable(self):
        with pytest.raises(ConfigError):
            env_overrides({"LAFR_NOT_A_KEY": "1"})

    def test_other_env_variables_ignored(self):
        assert env_overrides({"HOME": "/root", "LAFR_SEED": "5"}) == {"seed": 5}

    def test_invalid_value(self):
        with pytest.raises(ConfigError):
            build_config(overrides={"loss.id_variant": "l1"}, environ={}, use_dotenv=False)

    def test_malformed_line(self):
        with pytest.raises(ConfigError):
            parse_config_text("lora.rank 4\n")

    def test_list_and_bool_values(self):
        config = build_config(
            overrides={"codec.hidden_widths": "[8, 16]", "stage2.prune": "false"},
            environ={},
            use_dotenv=False,
        )
        assert config.codec.hidden_widths == [8, 16]
        assert config.stage2.prune is False

    def test_snapshot_reproduces_config(self, tmp_path, tiny_config):
        path = write_snapshot(tiny_config, tmp_path)
        assert path.name == SNAPSHOT_NAME
        rerun = build_config(path, environ={}, use_dotenv=False)
        assert rerun == tiny_config
        assert config_to_text(rerun) == path.read_text()

    def test_with_overrides(self, tiny_config):
        changed = with_overrides(tiny_config, {"loss.lambda_id": "0", "stage2.align": "false"})
        assert changed.loss.lambda_id == 0
        assert changed.stage2.align is False
        assert tiny_config.stage2.align is True
        with pytest.raises(ConfigError):
            with_overrides(tiny_config, {"nope": "1"})


# ============================================
# Experiment manifests
# ============================================

class TestExperimentManifest:
    def test_from_text(self):
        text = "# loss grid\n\nrun_a\tloss.lambda_id=0, loss.lambda_fs=0\nrun_b\t\n"
        manifest = ExperimentManifest.from_text(text)
        assert [run.run_id for run in manifest.runs] == ["run_a", "run_b"]
        assert manifest.runs[0].overrides == {"loss.lambda_id": "0", "loss.lambda_fs": "0"}
        assert manifest.runs[1].overrides == {}

    def test_duplicate_ids_rejected(self):
        with pytest.raises(ValueError):
            ExperimentManifest.from_text("a\tseed=1\na\tseed=2\n")

    def test_empty(self):
        assert ExperimentManifest.from_text("# nothing\n").runs == []


# ============================================
# Workspace
# ============================================

class TestWorkspace:
    def test_lock_excludes_second_writer(self, tmp_path):
        with open_workspace(tmp_path) as ws:
            assert (ws.root / LOCK_NAME).exists()
            with pytest.raises(WorkspaceLockedError):
                with open_workspace(tmp_path):
                    pass
        assert not (tmp_path / LOCK_NAME).exists()

    def test_lock_released_on_error(self, tmp_path):
        with pytest.raises(RuntimeError):
            with open_workspace(tmp_path):
                raise RuntimeError("boom")
        with open_workspace(tmp_path):
            pass

    def test_require_names_missing_artifact(self, tmp_path):
        ws = Workspace(tmp_path)
        with pytest.raises(MissingArtifactError) as exc_info:
            ws.require_stage("1")
        assert exc_info.value.artifact == "train_manifest"

    def test_require_passes_when_present(self, tmp_path):
        ws = Workspace(tmp_path)
        ws.write_text("x", ws.artifact("train_manifest"))
        ws.require_stage("codec")
        with pytest.raises(MissingArtifactError, match="codec"):
            ws.require_stage("prior")

    def test_unknown_artifact(self, tmp_path):
        with pytest.raises(KeyError):
            Workspace(tmp_path).artifact("weights")


# ============================================
# Seeding
# ============================================

class TestSeeding:
    def test_derive_seed_is_stable(self):
        assert derive_seed(0, "data") == derive_seed(0, "data")
        assert derive_seed(0, "data") != derive_seed(1, "data")
        assert derive_seed(0, "data") != derive_seed(0, "init")
        assert 0 <= derive_seed(123, "x", 4) < 2 ** 63

    def test_substreams_are_independent(self):
        a = numpy_rng(5, "degrade", "img_1").uniform(size=4)
        b = numpy_rng(5, "degrade", "img_1").uniform(size=4)
        c = numpy_rng(5, "degrade", "img_2").uniform(size=4)
        np.testing.assert_array_equal(a, b)
        assert not np.array_equal(a, c)
