import struct

import numpy as np
import orjson
import pytest

from peft_fusion.backbone import Backbone
from peft_fusion.exceptions import (
    CheckpointError,
    CheckpointShapeError,
    ChecksumError,
    ManifestError,
    UnsupportedVersionError,
)
from peft_fusion.fusion import FusionStack
from peft_fusion.peft import build_adapter_set
from peft_fusion.training import (
    FORMAT_VERSION,
    ModelBundle,
    load_checkpoint,
    load_group_into,
    restore_bundle,
    save_checkpoint,
)

SPECIALS = ["<pad>", "<bos>", "<eos>", "<sep>", "<unk>"]

HEADER = struct.Struct("<4sIQ")


def _edit_manifest(path, edit) -> None:
    """Rewrite the manifest in place, leaving the payload and its digest untouched."""
    raw = path.read_bytes()
    magic, version, length = HEADER.unpack_from(raw)
    manifest = orjson.loads(raw[HEADER.size : HEADER.size + length])
    edit(manifest)
    blob = orjson.dumps(manifest)
    path.write_bytes(HEADER.pack(magic, version, len(blob)) + blob + raw[HEADER.size + length :])


@pytest.fixture
def bundle(backbone_config, peft_config) -> ModelBundle:
    """Backbone, two compacter sets and a masked fusion stack."""
    backbone = Backbone(backbone_config, seed=1).freeze()
    adapter_sets = {
        tag: build_adapter_set("compacter", tag, backbone_config, peft_config, seed=1).freeze()
        for tag in ("go", "ruby")
    }
    fusion = FusionStack(2, 16, ("go", "ruby"), seed=1, mask_mode="zero").set_mask({"ruby"})
    return ModelBundle(backbone, adapter_sets, fusion)


@pytest.fixture
def saved(tmp_path, bundle):
    return save_checkpoint(
        tmp_path / "model.ckpt", bundle, {"seed": 1}, {"mode": "advfusion"}, SPECIALS
    )


class TestCheckpoint:
    """Versioned checkpoint files"""

    def test_round_trip_restores_every_group(self, saved, bundle):
        """Test that a restored bundle has the same hashes, mask and adapter order"""
        checkpoint = load_checkpoint(saved)
        restored = restore_bundle(checkpoint)
        assert restored.group_hashes() == bundle.group_hashes()
        assert restored.fusion.mask == frozenset({"ruby"})
        assert restored.fusion.adapter_order == ("go", "ruby")
        assert restored.fusion.blocks[0].mask_mode.value == "zero"
        assert checkpoint.lineage == {"mode": "advfusion"}
        assert checkpoint.config == {"seed": 1}
        assert checkpoint.version == FORMAT_VERSION
        assert checkpoint.is_fusion

    def test_restored_model_computes_the_same_logits(self, saved, bundle):
        """Test bit-identical outputs after a round trip"""
        restored = restore_bundle(load_checkpoint(saved))
        expected = bundle.backbone.forward([1, 6, 7], bundle.plugins()).logits.data
        actual = restored.backbone.forward([1, 6, 7], restored.plugins()).logits.data
        np.testing.assert_array_equal(actual, expected)

    def test_same_model_same_bytes(self, tmp_path, saved, bundle):
        """Test that saving twice gives identical files"""
        again = save_checkpoint(
            tmp_path / "again.ckpt", bundle, {"seed": 1}, {"mode": "advfusion"}, SPECIALS
        )
        assert again.read_bytes() == saved.read_bytes()

    def test_group_selection(self, saved):
        """Test that only the requested groups are materialized"""
        checkpoint = load_checkpoint(saved, groups=["fusion"])
        assert checkpoint.tensors
        assert all(name.startswith("fusion/") for name in checkpoint.tensors)
        assert checkpoint.adapter_groups() == ["adapter.compacter.go", "adapter.compacter.ruby"]

    def test_missing_group(self, saved):
        """Test that asking for an absent group is reported"""
        with pytest.raises(CheckpointError) as exc_info:
            load_checkpoint(saved).group_meta("adapter.lora.go")
        assert exc_info.value.error_code == "CHECKPOINT_GROUP_MISSING"

    def test_bad_magic(self, saved):
        """Test that a foreign file is refused"""
        raw = bytearray(saved.read_bytes())
        raw[:4] = b"NOPE"
        saved.write_bytes(bytes(raw))
        with pytest.raises(ManifestError):
            load_checkpoint(saved)

    def test_unsupported_version(self, saved):
        """Test that an unknown format version is refused"""
        raw = bytearray(saved.read_bytes())
        raw[4:8] = struct.pack("<I", FORMAT_VERSION + 1)
        saved.write_bytes(bytes(raw))
        with pytest.raises(UnsupportedVersionError):
            load_checkpoint(saved)

    def test_flipped_payload_byte(self, saved):
        """Test that a corrupted payload fails its checksum"""
        raw = bytearray(saved.read_bytes())
        raw[-1] ^= 0xFF
        saved.write_bytes(bytes(raw))
        with pytest.raises(ChecksumError):
            load_checkpoint(saved)

    def test_truncated_file(self, saved):
        """Test that a truncated payload fails its checksum"""
        saved.write_bytes(saved.read_bytes()[:-8])
        with pytest.raises(ChecksumError):
            load_checkpoint(saved)

    def test_corrupt_manifest(self, saved):
        """Test that an unreadable manifest is reported"""
        raw = bytearray(saved.read_bytes())
        raw[16] = ord("}")
        saved.write_bytes(bytes(raw))
        with pytest.raises(ManifestError):
            load_checkpoint(saved)

    def test_shape_mismatch(self, saved):
        """Test that loading into a differently shaped model fails"""
        checkpoint = load_checkpoint(saved)
        narrower = FusionStack(2, 8, ("go", "ruby"))
        with pytest.raises(CheckpointShapeError):
            load_group_into(narrower, checkpoint, "fusion")

    def test_missing_file(self, tmp_path):
        """Test that an absent path is a checkpoint error"""
        with pytest.raises(CheckpointError) as exc_info:
            load_checkpoint(tmp_path / "absent.ckpt")
        assert exc_info.value.error_code == "CHECKPOINT_UNREADABLE"

    @pytest.mark.parametrize(
        "field, value",
        [("offset", 10**9), ("offset", -8), ("shape", [10**6]), ("shape", [-1]), ("shape", "wide")],
    )
    def test_edited_tensor_entry(self, saved, field, value):
        """Test that an index entry pointing outside the payload is a manifest error"""

        def edit(manifest):
            manifest["tensors"][-1][field] = value

        _edit_manifest(saved, edit)
        with pytest.raises(ManifestError) as exc_info:
            load_checkpoint(saved)
        assert exc_info.value.error_code == "CHECKPOINT_MANIFEST_CORRUPT"

    def test_unedited_manifest_round_trip(self, saved, bundle):
        """Test that rewriting an unchanged manifest still loads"""
        _edit_manifest(saved, lambda manifest: None)
        assert restore_bundle(load_checkpoint(saved)).group_hashes() == bundle.group_hashes()
