"""Checkpoint container: round-trips, checksums, fingerprint guard."""

import pytest
import torch

from expandsqueeze.checkpoint import (
    CheckpointBundle,
    CheckpointError,
    load_checkpoint,
    save_checkpoint,
)


def bundle(**overrides):
    payload = {
        "weights": {"w": torch.randn(4, 3), "b": torch.arange(5, dtype=torch.float32)},
        "rng": {"state": 123},
    }
    fields = dict(stage="phase1", step=10, config_hash="abc123", payload=payload)
    fields.update(overrides)
    return CheckpointBundle(**fields)


class TestRoundTrip:
    def test_tensors_bitwise_equal(self, tmp_path):
        original = bundle()
        path = save_checkpoint(tmp_path / "x.ckpt", original)
        loaded = load_checkpoint(path)
        assert loaded.stage == "phase1" and loaded.step == 10
        assert loaded.config_hash == "abc123"
        for key, tensor in original.payload["weights"].items():
            assert torch.equal(tensor, loaded.payload["weights"][key])
        assert loaded.payload["rng"] == {"state": 123}

    def test_atomic_overwrite(self, tmp_path):
        path = tmp_path / "x.ckpt"
        save_checkpoint(path, bundle(step=1))
        save_checkpoint(path, bundle(step=2))
        assert load_checkpoint(path).step == 2

    def test_unknown_stage_rejected(self, tmp_path):
        with pytest.raises(CheckpointError, match="stage"):
            save_checkpoint(tmp_path / "x.ckpt", bundle(stage="bogus"))


class TestCorruption:
    def test_truncated_file_rejected(self, tmp_path):
        path = save_checkpoint(tmp_path / "x.ckpt", bundle())
        raw = path.read_bytes()
        path.write_bytes(raw[: len(raw) // 2])
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_bitflip_detected_by_checksum(self, tmp_path):
        path = save_checkpoint(tmp_path / "x.ckpt", bundle())
        raw = bytearray(path.read_bytes())
        # flip one byte deep in the payload region
        raw[len(raw) - 100] ^= 0xFF
        path.write_bytes(bytes(raw))
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(CheckpointError, match="no such"):
            load_checkpoint(tmp_path / "absent.ckpt")


class TestFingerprintGuard:
    def test_mismatch_refused_without_force(self, tmp_path):
        path = save_checkpoint(tmp_path / "x.ckpt", bundle(config_hash="aaa"))
        with pytest.raises(CheckpointError, match="different config"):
            load_checkpoint(path, expected_config_hash="bbb")

    def test_force_overrides(self, tmp_path):
        path = save_checkpoint(tmp_path / "x.ckpt", bundle(config_hash="aaa"))
        loaded = load_checkpoint(path, expected_config_hash="bbb", force=True)
        assert loaded.config_hash == "aaa"

    def test_matching_hash_accepted(self, tmp_path):
        path = save_checkpoint(tmp_path / "x.ckpt", bundle(config_hash="aaa"))
        assert load_checkpoint(path, expected_config_hash="aaa").step == 10
