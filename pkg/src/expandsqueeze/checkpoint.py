"""Versioned, checksummed checkpoint container.

A checkpoint is a two-layer file: the payload (parameter tensors,
optimizer slots, RNG states) is serialized to bytes first, hashed, and the
envelope stores the hash plus identifying metadata. Loading verifies the
checksum before deserializing, so a truncated or corrupted file never
yields partial state. Resuming against a config whose fingerprint differs
from the one recorded at save time is refused unless forced.
"""

from __future__ import annotations

import hashlib
import io
import os
from dataclasses import dataclass
from pathlib import Path

import torch

SCHEMA_VERSION = 1

STAGES = ("phase1", "expanded", "squeezed", "pruned")


class CheckpointError(RuntimeError):
    """Raised on schema, checksum or config-fingerprint mismatches."""


@dataclass
class CheckpointBundle:
    stage: str
    step: int
    config_hash: str
    payload: dict
    schema_version: int = SCHEMA_VERSION


def save_checkpoint(path: str | Path, bundle: CheckpointBundle) -> Path:
    """Atomically write a bundle; returns the final path."""
    if bundle.stage not in STAGES:
        raise CheckpointError(f"unknown checkpoint stage '{bundle.stage}'")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    buffer = io.BytesIO()
    torch.save(bundle.payload, buffer)
    blob = buffer.getvalue()
    envelope = {
        "schema_version": bundle.schema_version,
        "stage": bundle.stage,
        "step": bundle.step,
        "config_hash": bundle.config_hash,
        "sha256": hashlib.sha256(blob).hexdigest(),
        "payload": blob,
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(envelope, tmp)
    os.replace(tmp, path)
    return path


def load_checkpoint(
    path: str | Path,
    expected_config_hash: str | None = None,
    force: bool = False,
) -> CheckpointBundle:
    """Verify and deserialize a bundle.

    Raises CheckpointError on corruption, schema mismatch, or (unless
    ``force``) a config fingerprint that differs from ``expected_config_hash``.
    """
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"{path}: no such checkpoint")
    try:
        envelope = torch.load(path, weights_only=False)
    except Exception as exc:
        raise CheckpointError(f"{path}: unreadable checkpoint ({exc})") from exc
    if not isinstance(envelope, dict) or "payload" not in envelope:
        raise CheckpointError(f"{path}: not a checkpoint container")
    if envelope.get("schema_version") != SCHEMA_VERSION:
        raise CheckpointError(
            f"{path}: schema version {envelope.get('schema_version')} "
            f"(expected {SCHEMA_VERSION})"
        )
    blob = envelope["payload"]
    digest = hashlib.sha256(blob).hexdigest()
    if digest != envelope.get("sha256"):
        raise CheckpointError(f"{path}: checksum mismatch, file is corrupt")
    if expected_config_hash is not None and envelope["config_hash"] != expected_config_hash:
        if not force:
            raise CheckpointError(
                f"{path}: checkpoint was written under a different config "
                f"({envelope['config_hash'][:12]} vs {expected_config_hash[:12]}); "
                "pass --force to load anyway"
            )
    payload = torch.load(io.BytesIO(blob), weights_only=False)
    return CheckpointBundle(
        stage=envelope["stage"],
        step=int(envelope["step"]),
        config_hash=envelope["config_hash"],
        payload=payload,
        schema_version=int(envelope["schema_version"]),
    )
