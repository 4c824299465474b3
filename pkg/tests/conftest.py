from pathlib import Path
from typing import Any

import numpy as np
import pytest

from peft_fusion.backbone import Backbone
from peft_fusion.config import BackboneConfig, LabConfig, PeftConfig, SynthConfig
from peft_fusion.corpus import Sample, Vocabulary, build_vocab, synth_samples
from peft_fusion.training import TrainingPlan, pretrain_backbone
from peft_fusion.typed import TrainingMode

TINY_OVERRIDES = {
    "backbone.num_layers": 2,
    "backbone.hidden_size": 16,
    "backbone.num_heads": 2,
    "backbone.ffn_size": 32,
    "backbone.max_seq_len": 16,
    "peft.bottleneck_dim": 4,
    "peft.phm_dim": 2,
    "peft.lora_rank": 4,
    "peft.lora_alpha": 4.0,
    "training.batch_size": 4,
    "training.pretrain_lr": 1e-2,
    "training.adapter_lr": 1e-2,
    "training.fusion_lr": 1e-2,
    "training.pretrain_epochs": 2,
    "training.adapter_epochs": 1,
    "training.epochs_per_phase": 1,
    "data.synth.languages": {"go": 8, "ruby": 4},
    "data.synth.pool_size": 8,
    "data.synth.min_len": 2,
    "data.synth.max_len": 3,
    "data.synth.valid_size": 2,
    "data.synth.test_size": 2,
    "evaluation.max_new_tokens": 6,
}


def tiny_config(tmp_path: Path | None = None, **overrides) -> LabConfig:
    merged = dict(TINY_OVERRIDES)
    if tmp_path is not None:
        merged["output.run_root"] = str(tmp_path / "runs")
    merged.update(overrides)
    return LabConfig.from_toml(None, merged)


def _toml_value(value: Any) -> str:
    if isinstance(value, dict):
        return "{ " + ", ".join(f"{key} = {_toml_value(item)}" for key, item in value.items()) + " }"
    if isinstance(value, str | Path):
        return '"' + str(value).replace("\\", "\\\\") + '"'
    return repr(value)


def write_tiny_toml(path: Path, overrides: dict[str, Any] | None = None) -> Path:
    merged = {**TINY_OVERRIDES, **(overrides or {})}
    path.write_text("".join(f"{key} = {_toml_value(value)}\n" for key, value in merged.items()))
    return path


@pytest.fixture(scope="session")
def write_toml():
    """Writer of miniature TOML configuration files (dotted keys)."""
    return write_tiny_toml


@pytest.fixture
def make_config():
    """Factory for miniature configurations with extra dotted overrides."""
    return tiny_config


@pytest.fixture
def lab_config(tmp_path) -> LabConfig:
    """Miniature laboratory configuration writing under ``tmp_path``."""
    return tiny_config(tmp_path)


@pytest.fixture
def backbone_config() -> BackboneConfig:
    return BackboneConfig(vocab_size=32, num_layers=2, hidden_size=16, num_heads=2, ffn_size=32, max_seq_len=16)


@pytest.fixture
def peft_config() -> PeftConfig:
    return PeftConfig(bottleneck_dim=4, phm_dim=2, lora_rank=4, lora_alpha=4.0)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def splits() -> dict[str, list[Sample]]:
    """Seeded two-language toy corpus (train/valid/test)."""
    synth = SynthConfig(
        languages={"go": 8, "ruby": 4}, pool_size=8, min_len=2, max_len=3, valid_size=2, test_size=2
    )
    return synth_samples(synth, seed=0)


@pytest.fixture(scope="session")
def vocab(splits) -> Vocabulary:
    return build_vocab(splits["train"] + splits["valid"] + splits["test"], max_size=4096)


@pytest.fixture(scope="session")
def pretrained(splits, vocab) -> Backbone:
    """Backbone pretrained for two epochs on the toy corpus, frozen afterwards."""
    config = tiny_config()
    backbone = Backbone(config.backbone.with_vocab(len(vocab)), seed=0)
    plan = TrainingPlan.from_config(config, TrainingMode.PRETRAIN)
    pretrain_backbone(backbone, splits["train"], vocab, plan)
    return backbone
