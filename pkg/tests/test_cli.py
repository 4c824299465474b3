import shutil
from pathlib import Path

import orjson
import pytest
from typer.testing import CliRunner

from peft_fusion.cli import app
from peft_fusion.cli.app import parse_overrides
from peft_fusion.exceptions import EXIT_RUNTIME, EXIT_USAGE, ConfigError

runner = CliRunner()


def _run(*args):
    return runner.invoke(app, [str(arg) for arg in args])


def _ok(*args):
    result = _run(*args)
    assert result.exit_code == 0, result.output
    return result


def _events(run_dir: Path) -> list[dict]:
    return [orjson.loads(line) for line in (run_dir / "events.jsonl").read_bytes().splitlines()]


@pytest.fixture(scope="module")
def lab(tmp_path_factory, write_toml) -> dict[str, Path]:
    """A corpus, a backbone, adapter directories and a fusion checkpoint built through the CLI."""
    root = tmp_path_factory.mktemp("cli")
    bare = write_toml(root / "bare.toml", {"output.run_root": root / "runs"})
    _ok("synth", "-c", bare, "--run-dir", root / "synth")
    corpus = root / "synth" / "corpus"
    config = write_toml(
        root / "lab.toml",
        {
            "output.run_root": root / "runs",
            "data.train": corpus / "train.jsonl",
            "data.valid": corpus / "valid.jsonl",
            "data.test": corpus / "test.jsonl",
        },
    )
    _ok("pretrain", "-c", config, "--run-dir", root / "pretrain")
    backbone = root / "pretrain" / "backbone.ckpt"
    for language in ("go", "ruby"):
        _ok(
            "train-adapter", "--backbone", backbone, "--language", language,
            "-c", config, "--run-dir", root / "bottleneck",
        )
    mixed = root / "mixed"
    mixed.mkdir()
    shutil.copy(root / "bottleneck" / "adapter-bottleneck-go.ckpt", mixed)
    _ok(
        "train-adapter", "--backbone", backbone, "--language", "ruby", "--method", "compacter",
        "-c", config, "--run-dir", mixed,
    )
    _ok(
        "train-fusion", "--adapters", root / "bottleneck", "--mode", "fusion",
        "-c", config, "--run-dir", root / "fusion",
    )
    return {
        "root": root,
        "bare": bare,
        "config": config,
        "backbone": backbone,
        "bottleneck": root / "bottleneck",
        "mixed": mixed,
        "fusion": root / "fusion" / "fusion-bottleneck.ckpt",
    }


class TestOverrides:
    """--set parsing"""

    def test_values_are_toml_scalars(self):
        """Test typed values with a plain-string fallback"""
        parsed = parse_overrides(["training.batch_size=3", "data.train=/tmp/x.jsonl", "peft.lora_alpha=0.5"])
        assert parsed == {"training.batch_size": 3, "data.train": "/tmp/x.jsonl", "peft.lora_alpha": 0.5}
        assert parse_overrides(["evaluation.metrics=['bleu4']"]) == {"evaluation.metrics": ["bleu4"]}

    def test_pair_without_equals(self):
        """Test that a malformed override is a config error"""
        with pytest.raises(ConfigError):
            parse_overrides(["training.batch_size"])


class TestCommands:
    """Exit codes and artifacts of the command-line surface"""

    def test_pipeline_artifacts(self, lab):
        """Test the files the module fixture produced"""
        assert sorted(path.name for path in (lab["root"] / "synth" / "corpus").iterdir()) == [
            "test.jsonl",
            "train.jsonl",
            "valid.jsonl",
        ]
        assert (lab["root"] / "synth" / "config.resolved.json").exists()
        assert sorted(path.name for path in lab["bottleneck"].glob("*.ckpt")) == [
            "adapter-bottleneck-go.ckpt",
            "adapter-bottleneck-ruby.ckpt",
        ]
        assert lab["fusion"].exists()

    def test_synth_is_seeded(self, lab, tmp_path):
        """Test that the same seed writes identical bytes and another seed does not"""
        _ok("synth", "-c", lab["bare"], "--run-dir", tmp_path / "a")
        _ok("synth", "-c", lab["bare"], "--run-dir", tmp_path / "b")
        _ok("synth", "-c", lab["bare"], "--run-dir", tmp_path / "c", "--seed", 7)
        first = (tmp_path / "a" / "corpus" / "train.jsonl").read_bytes()
        assert (tmp_path / "b" / "corpus" / "train.jsonl").read_bytes() == first
        assert (tmp_path / "c" / "corpus" / "train.jsonl").read_bytes() != first

    def test_split_partitions_one_file(self, lab, tmp_path):
        """Test that split writes three disjoint files covering the source"""
        source = lab["root"] / "synth" / "corpus" / "train.jsonl"
        _ok("split", source, "-c", lab["bare"], "--run-dir", tmp_path / "split")
        ids = []
        for name in ("train", "valid", "test"):
            lines = (tmp_path / "split" / "corpus" / f"{name}.jsonl").read_bytes().splitlines()
            assert lines
            ids.extend(orjson.loads(line)["id"] for line in lines)
        source_ids = [orjson.loads(line)["id"] for line in source.read_bytes().splitlines()]
        assert sorted(ids) == sorted(source_ids)

    def test_missing_config_file(self, tmp_path):
        """Test that an absent --config is a usage error"""
        result = _run("stats", "-c", tmp_path / "absent.toml")
        assert result.exit_code == EXIT_USAGE

    def test_unset_path_is_named(self, lab):
        """Test that a command needing data.train names the key"""
        result = _run("pretrain", "-c", lab["bare"], "--run-dir", lab["root"] / "nowhere")
        assert result.exit_code == EXIT_USAGE
        assert "data.train" in result.output
        assert "--help" in result.output

    def test_invalid_value_is_named(self, lab):
        """Test that a validation failure names the offending key"""
        result = _run("stats", "-c", lab["config"], "--set", "training.batch_size=0")
        assert result.exit_code == EXIT_USAGE
        assert "training.batch_size" in result.output

    def test_malformed_set(self, lab):
        """Test that --set needs key=value"""
        assert _run("stats", "-c", lab["config"], "--set", "nonsense").exit_code == EXIT_USAGE

    def test_stats(self, lab):
        """Test the per-language table"""
        result = _ok("stats", "-c", lab["config"])
        assert "go" in result.output
        assert "ruby" in result.output

    def test_params(self, lab):
        """Test the parameter table of fresh setups and of a checkpoint"""
        assert "lora" in _ok("params", "-c", lab["bare"]).output
        assert "fusion-bottleneck.ckpt" in _ok("params", "-c", lab["bare"], "--checkpoint", lab["fusion"]).output

    def test_advfusion_without_target(self, lab, tmp_path):
        """Test that advfusion refuses to run without a target language"""
        result = _run(
            "train-fusion", "--adapters", lab["bottleneck"], "--mode", "advfusion", "-c", lab["config"],
            "--run-dir", tmp_path,
        )
        assert result.exit_code == EXIT_USAGE
        assert "TARGET_REQUIRED" in result.output

    def test_advfusion_writes_snapshot(self, lab, tmp_path):
        """Test the final checkpoint and the phase-1 snapshot"""
        _ok(
            "train-fusion", "--adapters", lab["bottleneck"], "--mode", "advfusion", "--target", "ruby",
            "-c", lab["config"], "--run-dir", tmp_path,
        )
        assert (tmp_path / "advfusion-bottleneck.ckpt").exists()
        assert (tmp_path / "advfusion-bottleneck-phase1.ckpt").exists()

    def test_mixed_adapter_kinds(self, lab, tmp_path):
        """Test that fusing a bottleneck and a compacter adapter is a usage error"""
        result = _run("train-fusion", "--adapters", lab["mixed"], "-c", lab["config"], "--run-dir", tmp_path)
        assert result.exit_code == EXIT_USAGE
        assert "FUSION_KIND_MISMATCH" in result.output

    def test_unknown_metric(self, lab, tmp_path):
        """Test that an unknown metric name is a usage error"""
        result = _run(
            "evaluate", "--checkpoint", lab["fusion"], "--metrics", "meteor", "-c", lab["config"],
            "--run-dir", tmp_path,
        )
        assert result.exit_code == EXIT_USAGE
        assert "UNKNOWN_METRIC" in result.output

    def test_evaluate_report_is_deterministic(self, lab, tmp_path):
        """Test that two evaluations of one checkpoint write identical reports"""
        for name in ("a", "b"):
            _ok("evaluate", "--checkpoint", lab["fusion"], "-c", lab["config"], "--run-dir", tmp_path / name)
        report = (tmp_path / "a" / "report.jsonl").read_bytes()
        assert report == (tmp_path / "b" / "report.jsonl").read_bytes()
        records = [orjson.loads(line) for line in report.splitlines()]
        assert records[0]["record"] == "summary"
        assert len(records) == 1 + 2 * 2

    def test_corrupt_checkpoint(self, lab, tmp_path):
        """Test that a damaged checkpoint is a runtime failure"""
        broken = tmp_path / "broken.ckpt"
        raw = bytearray(lab["fusion"].read_bytes())
        raw[-1] ^= 0xFF
        broken.write_bytes(bytes(raw))
        result = _run("evaluate", "--checkpoint", broken, "-c", lab["config"], "--run-dir", tmp_path / "run")
        assert result.exit_code == EXIT_RUNTIME
        assert "CHECKPOINT_CHECKSUM_MISMATCH" in result.output
        assert "--help" not in result.output

    def test_analyze_needs_fusion(self, lab, tmp_path):
        """Test that a backbone checkpoint cannot be analyzed"""
        result = _run("analyze", "--checkpoint", lab["backbone"], "-c", lab["config"], "--run-dir", tmp_path)
        assert result.exit_code == EXIT_USAGE
        assert "NOT_A_FUSION_CHECKPOINT" in result.output

    def test_analyze_exports_trace_and_heatmap(self, lab, tmp_path):
        """Test the trace CSV and a per-token heatmap"""
        _ok(
            "analyze", "--checkpoint", lab["fusion"], "--language", "ruby", "--heatmap", "ruby-test-00000",
            "-c", lab["config"], "--run-dir", tmp_path,
        )
        lines = (tmp_path / "attention.csv").read_text().splitlines()
        assert lines[0] == "layer,tag,raw,normalized,percent"
        assert len(lines) == 1 + 2 * 2
        assert (tmp_path / "heatmap-ruby-test-00000.csv").exists()

    def test_every_run_dir_has_an_event_log(self, lab, tmp_path):
        """Test that non-training commands bracket their run with start and end records"""
        _ok("evaluate", "--checkpoint", lab["fusion"], "-c", lab["config"], "--run-dir", tmp_path / "evaluate")
        _ok("analyze", "--checkpoint", lab["fusion"], "-c", lab["config"], "--run-dir", tmp_path / "analyze")
        for command in ("evaluate", "analyze"):
            records = _events(tmp_path / command)
            assert records[0] == {"type": "run", "event": "run_start", "command": command, "seed": 0}
            assert records[-1]["event"] == "run_end"
            assert records[-1]["status"] == "ok"
        for run_dir in ("synth", "pretrain", "bottleneck", "fusion"):
            assert _events(lab["root"] / run_dir)[-1]["event"] == "run_end"

    def test_training_run_log_counts_steps(self, lab):
        """Test that the end record of a training run carries its step count"""
        records = _events(lab["root"] / "pretrain")
        steps = [record for record in records if record.get("event") == "step"]
        assert steps
        assert records[-1]["steps"] == len(steps)

    def test_failed_command_ends_its_log_with_the_error(self, lab, tmp_path):
        """Test that the error record is the last line of a failed command's event log"""
        result = _run("analyze", "--checkpoint", lab["backbone"], "-c", lab["config"], "--run-dir", tmp_path)
        assert result.exit_code == EXIT_USAGE
        records = _events(tmp_path)
        assert records[0]["event"] == "run_start"
        assert records[-1]["type"] == "error"
        assert records[-1]["error_code"] == "NOT_A_FUSION_CHECKPOINT"
        assert records[-1]["exit_code"] == EXIT_USAGE

    def test_json_serializer_writes_the_same_corpus(self, lab, tmp_path):
        """Test that output.serializer=json writes byte-identical corpus files"""
        _ok("synth", "-c", lab["bare"], "--run-dir", tmp_path / "orjson")
        _ok("synth", "-c", lab["bare"], "--run-dir", tmp_path / "json", "--set", "output.serializer=json")
        for name in ("train", "valid", "test"):
            expected = (tmp_path / "orjson" / "corpus" / f"{name}.jsonl").read_bytes()
            assert (tmp_path / "json" / "corpus" / f"{name}.jsonl").read_bytes() == expected

    def test_unknown_serializer(self, lab):
        """Test that an unregistered serializer name is rejected"""
        result = _run("synth", "-c", lab["bare"], "--set", "output.serializer=pickle")
        assert result.exit_code == EXIT_USAGE
        assert "output.serializer" in result.output
