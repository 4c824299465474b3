"""Versioned checkpoint files.

Layout::

    b"PFCK" | version: u32 LE | manifest length: u64 LE | manifest | payload

The manifest is sorted-key JSON holding the config snapshot, the lineage,
per-group metadata, the vocabulary, the tensor index (name -> group, shape,
byte offset) and the SHA-256 of the payload. The payload is the
concatenation of every tensor as little-endian float64, in index order.
Nothing time-dependent is stored, so equal models give equal bytes.
"""

from __future__ import annotations

import hashlib
import logging
import os
import struct
import tempfile
from collections.abc import Iterable, Mapping
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import numpy as np

from peft_fusion.backbone import Backbone
from peft_fusion.config import BackboneConfig
from peft_fusion.exceptions import (
    CheckpointError,
    CheckpointShapeError,
    ChecksumError,
    ErrorContext,
    ManifestError,
    ShapeError,
    UnsupportedVersionError,
    create_error_context,
)
from peft_fusion.fusion import FusionStack
from peft_fusion.numcore import Module
from peft_fusion.peft import AdapterSet
from peft_fusion.serializers import default_serializer
from peft_fusion.training.bundle import ModelBundle

logger = logging.getLogger(__name__)

MAGIC = b"PFCK"
FORMAT_VERSION = 1
SUPPORTED_VERSIONS = frozenset({FORMAT_VERSION})
_HEADER = struct.Struct("<4sIQ")


@dataclass(slots=True)
class Checkpoint:
    manifest: dict[str, Any]
    tensors: dict[str, np.ndarray]

    @property
    def version(self) -> int:
        return int(self.manifest["version"])

    @property
    def config(self) -> dict[str, Any]:
        return self.manifest.get("config", {})

    @property
    def lineage(self) -> dict[str, Any]:
        return self.manifest.get("lineage", {})

    @property
    def vocab(self) -> list[str]:
        return list(self.manifest.get("vocab", []))

    def group_names(self) -> list[str]:
        return list(self.manifest["groups"])

    def group_meta(self, group: str) -> dict[str, Any]:
        try:
            return self.manifest["groups"][group]
        except KeyError as exc:
            raise CheckpointError(
                f"checkpoint has no group '{group}' (groups: {self.group_names()})",
                error_code="CHECKPOINT_GROUP_MISSING",
            ) from exc

    def group_state(self, group: str) -> dict[str, np.ndarray]:
        self.group_meta(group)
        prefix = f"{group}/"
        return {name[len(prefix) :]: value for name, value in self.tensors.items() if name.startswith(prefix)}

    def adapter_groups(self) -> list[str]:
        return [name for name in self.group_names() if name.startswith("adapter.")]

    @property
    def is_fusion(self) -> bool:
        return "fusion" in self.manifest["groups"]


def _group_meta(bundle: ModelBundle) -> dict[str, dict[str, Any]]:
    meta: dict[str, dict[str, Any]] = {}
    for name, module in bundle.groups().items():
        if isinstance(module, Backbone):
            meta[name] = {"config": module.config.model_dump(mode="json"), "seed": module.seed}
        elif isinstance(module, AdapterSet):
            meta[name] = module.meta()
        elif isinstance(module, FusionStack):
            block = module.blocks[0]
            meta[name] = {
                "adapter_order": list(module.adapter_order),
                "mask": sorted(module.mask),
                "mask_mode": block.mask_mode.value,
                "num_layers": len(module.blocks),
                "hidden_size": block.hidden_size,
            }
    return meta


def save_checkpoint(
    path: Path,
    bundle: ModelBundle,
    config: Mapping[str, Any] | None = None,
    lineage: Mapping[str, Any] | None = None,
    vocab: Iterable[str] | None = None,
) -> Path:
    """Write every group of ``bundle`` atomically (temp file + rename)."""
    path = Path(path)
    index = []
    chunks = []
    offset = 0
    for group, module in bundle.groups().items():
        for name, tensor in module.named_parameters():
            raw = np.ascontiguousarray(tensor.data, dtype="<f8").tobytes()
            index.append({"name": f"{group}/{name}", "group": group, "shape": list(tensor.shape), "offset": offset})
            chunks.append(raw)
            offset += len(raw)
    payload = b"".join(chunks)
    manifest = {
        "format": "peft-fusion-checkpoint",
        "version": FORMAT_VERSION,
        "config": dict(config or {}),
        "lineage": dict(lineage or {}),
        "groups": _group_meta(bundle),
        "vocab": list(vocab or []),
        "tensors": index,
        "payload_bytes": len(payload),
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
    }
    blob = default_serializer().dumps(manifest)
    path.parent.mkdir(parents=True, exist_ok=True)
    handle = tempfile.NamedTemporaryFile(dir=path.parent, prefix=f".{path.name}.", delete=False)  # noqa: SIM115
    try:
        with handle:
            handle.write(_HEADER.pack(MAGIC, FORMAT_VERSION, len(blob)))
            handle.write(blob)
            handle.write(payload)
        os.replace(handle.name, path)
    except OSError as exc:
        Path(handle.name).unlink(missing_ok=True)
        raise CheckpointError(f"cannot write checkpoint {path}: {exc}", cause=exc) from exc
    logger.info("saved checkpoint %s (%d tensors, %d bytes)", path, len(index), len(payload))
    return path


def _read_tensor(payload: bytes, entry: Mapping[str, Any], path: Path, context: ErrorContext) -> np.ndarray:
    """Slice one index entry out of the verified payload; the index itself is not covered by the digest."""
    try:
        name = str(entry["name"])
        shape = tuple(int(d) for d in entry["shape"])
        offset = int(entry["offset"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ManifestError(f"{path} has a malformed tensor entry: {exc}", context=context, cause=exc) from exc
    count = int(np.prod(shape, dtype=np.int64))
    if any(d < 0 for d in shape) or offset < 0 or offset + 8 * count > len(payload):
        raise ManifestError(
            f"{path}: tensor '{name}' (shape {list(shape)}, offset {offset}) lies outside the "
            f"{len(payload)}-byte payload",
            context=context,
        )
    values = np.frombuffer(payload, dtype="<f8", count=count, offset=offset)
    return values.astype(np.float64).reshape(shape)


def load_checkpoint(path: Path, groups: Iterable[str] | None = None) -> Checkpoint:
    """Read and verify a checkpoint; ``groups`` restricts which tensors are materialized.

    Raises
    ------
    ManifestError
        Bad magic, unreadable or incomplete manifest, or a tensor entry
        outside the payload.
    UnsupportedVersionError
        Unknown format version.
    ChecksumError
        Payload truncated or altered.

    """
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}", error_code="CHECKPOINT_UNREADABLE") from exc
    context = create_error_context(component="training.checkpoint", path=str(path))
    if len(raw) < _HEADER.size:
        raise ManifestError(f"{path} is too short to be a checkpoint", context=context)
    magic, version, manifest_len = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise ManifestError(f"{path} is not a checkpoint (bad magic {magic!r})", context=context)
    if version not in SUPPORTED_VERSIONS:
        raise UnsupportedVersionError(
            f"{path} has format version {version}; supported: {sorted(SUPPORTED_VERSIONS)}", context=context
        )
    start = _HEADER.size
    try:
        manifest = default_serializer().loads(raw[start : start + manifest_len])
        index = manifest["tensors"]
        expected_sha = manifest["payload_sha256"]
        expected_len = int(manifest["payload_bytes"])
        if not isinstance(manifest["groups"], dict):
            raise TypeError("'groups' must be an object")
    except (ValueError, KeyError, TypeError) as exc:
        raise ManifestError(f"{path} has a corrupt manifest: {exc}", context=context, cause=exc) from exc
    if int(manifest.get("version", -1)) != version:
        raise ManifestError(f"{path}: header and manifest disagree on the version", context=context)
    payload = raw[start + manifest_len :]
    if len(payload) != expected_len or hashlib.sha256(payload).hexdigest() != expected_sha:
        raise ChecksumError(f"{path}: payload does not match its checksum", context=context)
    wanted = set(groups) if groups is not None else None
    tensors: dict[str, np.ndarray] = {}
    for entry in index:
        if wanted is not None and entry["group"] not in wanted:
            continue
        tensors[entry["name"]] = _read_tensor(payload, entry, path, context)
    return Checkpoint(manifest=manifest, tensors=tensors)


def load_group_into(module: Module, checkpoint: Checkpoint, group: str) -> None:
    try:
        module.load_state_dict(checkpoint.group_state(group), strict=True)
    except ShapeError as exc:
        raise CheckpointShapeError(
            f"group '{group}' does not fit the model: {exc.message}", cause=exc
        ) from exc


def restore_backbone(checkpoint: Checkpoint) -> Backbone:
    meta = checkpoint.group_meta("backbone")
    backbone = Backbone(BackboneConfig(**meta["config"]), seed=int(meta.get("seed", 0)))
    load_group_into(backbone, checkpoint, "backbone")
    return backbone.freeze()


def restore_adapter_set(checkpoint: Checkpoint, group: str, backbone_config: BackboneConfig) -> AdapterSet:
    adapter_set = AdapterSet.from_meta(checkpoint.group_meta(group), backbone_config)
    load_group_into(adapter_set, checkpoint, group)
    return adapter_set


def restore_bundle(checkpoint: Checkpoint, include_fusion: bool = True) -> ModelBundle:
    """Rebuild every stored group; backbone and adapters come back frozen, fusion trainable."""
    backbone = restore_backbone(checkpoint)
    adapter_sets = {}
    for group in checkpoint.adapter_groups():
        adapter_set = restore_adapter_set(checkpoint, group, backbone.config)
        adapter_sets[adapter_set.language_tag] = adapter_set.freeze()
    fusion = None
    if include_fusion and checkpoint.is_fusion:
        meta = checkpoint.group_meta("fusion")
        fusion = FusionStack(
            int(meta["num_layers"]),
            int(meta["hidden_size"]),
            meta["adapter_order"],
            mask_mode=meta.get("mask_mode", "exclude"),
        )
        load_group_into(fusion, checkpoint, "fusion")
        fusion.set_mask(meta.get("mask", ()))
    return ModelBundle(backbone=backbone, adapter_sets=adapter_sets, fusion=fusion)
