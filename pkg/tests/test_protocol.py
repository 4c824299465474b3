import csv

import pytest

from peft_fusion.cli import workflow
from peft_fusion.config import LabConfig


@pytest.mark.slow
class TestProtocol:
    """End-to-end comparison of the seven configurations on a toy corpus"""

    @pytest.fixture(scope="class")
    def result(self, tmp_path_factory, write_toml):
        root = tmp_path_factory.mktemp("protocol")
        config = LabConfig.from_toml(write_toml(root / "lab.toml", {"output.run_root": root / "runs"}))
        with workflow.RunDir.open(config, root / "run", "protocol") as run:
            return workflow.protocol(config, run)

    def test_target_is_the_smallest_language(self, result):
        """Test that the low-resource language is picked as target"""
        assert result.target == "ruby"

    def test_comparison_table(self, result):
        """Test one row per configuration, in order, with the baseline at zero"""
        with result.comparison.open(newline="") as handle:
            rows = list(csv.DictReader(handle))
        assert [row["config"] for row in rows] == [name for name, _, _ in workflow.PROTOCOL_CONFIGS]
        assert list(rows[0]) == [
            "config", "mode", "kind", "bleu4", "rougeL", "trainable", "total", "ratio", "bleu4_rel", "rougeL_rel",
        ]
        baseline = next(row for row in rows if row["config"] == workflow.PROTOCOL_BASELINE)
        for name in workflow.PROTOCOL_METRICS:
            assert baseline[f"{name}_rel"] in ("", "0")
        for row in rows:
            assert 0.0 <= float(row["bleu4"]) <= 100.0
            assert 0 < int(row["trainable"]) < int(row["total"])

    def test_fusion_trains_fewer_parameters_than_it_holds(self, result):
        """Test that fusion rows count only the fusion layers as trainable"""
        by_name = {row.name: row for row in result.rows}
        assert by_name["AdvFusion"].params.trainable == by_name["AdapterFusion"].params.trainable
        assert by_name["AdvFusion"].params.total == by_name["AdapterFusion"].params.total
        assert by_name["LoRA"].params.trainable < by_name["AdapterFusion"].params.total

    def test_attention_comparison(self, result):
        """Test the side-by-side attention shares of both fusion variants"""
        with result.attention.open(newline="") as handle:
            rows = list(csv.reader(handle))
        assert rows[0] == ["layer", "tag", "AdapterFusion", "AdvFusion"]
        assert len(rows) == 1 + 2 * 2
        for layer in (0, 1):
            shares = [float(row[3]) for row in rows[1:] if row[0] == str(layer)]
            assert sum(shares) == pytest.approx(100.0)
