import numpy as np
import pytest

from peft_fusion.backbone import Backbone, LayerPlugins
from peft_fusion.config import PeftConfig
from peft_fusion.exceptions import ShapeError, UsageError
from peft_fusion.numcore import Tensor, derive_rng
from peft_fusion.peft import (
    AdapterSet,
    BottleneckAdapter,
    CompacterAdapter,
    LoRAAdapter,
    PHMRule,
    bottleneck_forward,
    build_adapter_set,
    check_phm_divisibility,
    lora_forward,
    param_count,
    parse_adapter_kind,
    phm_compose,
)
from peft_fusion.training import ModelBundle
from peft_fusion.typed import AdapterKind


def _brute_force_kron(rules: list[np.ndarray], blocks: list[np.ndarray]) -> np.ndarray:
    n = len(rules)
    p, q = blocks[0].shape
    out = np.zeros((n * p, n * q))
    for rule, block in zip(rules, blocks, strict=True):
        for i in range(n):
            for j in range(n):
                out[i * p : (i + 1) * p, j * q : (j + 1) * q] += rule[i, j] * block
    return out


class TestBottleneck:
    """Sequential bottleneck adapter"""

    def test_two_by_two_oracle(self):
        """Test z = U relu(D h + b_D) + b_U + r against hand-computed values"""
        adapter = BottleneckAdapter("go", 0, hidden_size=2, bottleneck_dim=2)
        adapter.load_state_dict(
            {
                "down.weight": np.array([[1.0, -1.0], [2.0, 0.5]]),
                "down.bias": np.array([0.0, 1.0]),
                "up.weight": np.array([[1.0, 0.0], [0.0, 2.0]]),
                "up.bias": np.array([0.5, -0.5]),
            }
        )
        h = Tensor([[1.0, 1.0]])
        r = Tensor([[10.0, 20.0]])
        # down: [1 + 2, -1 + 0.5 + 1] = [3, 0.5]; up: [3, 1.0] + bias -> [3.5, 0.5]
        out = bottleneck_forward(h, r, adapter)
        np.testing.assert_allclose(out.data, [[13.5, 20.5]])

    def test_fresh_adapter_passes_residual(self):
        """Test that the zero-initialized up projection gives z = r"""
        adapter = BottleneckAdapter("go", 0, hidden_size=8, bottleneck_dim=2, seed=3)
        rng = np.random.default_rng(0)
        h, r = Tensor(rng.normal(size=(3, 8))), Tensor(rng.normal(size=(3, 8)))
        np.testing.assert_array_equal(adapter(h, r).data, r.data)
        np.testing.assert_array_equal(adapter.pass_through(h, r).data, r.data)

    def test_width_mismatch(self):
        """Test that inputs of the wrong width are rejected"""
        adapter = BottleneckAdapter("go", 0, hidden_size=8, bottleneck_dim=2)
        with pytest.raises(ShapeError):
            adapter(Tensor(np.ones((2, 4))), Tensor(np.ones((2, 4))))

    def test_empty_language_tag(self):
        """Test that an adapter needs a language"""
        with pytest.raises(UsageError):
            BottleneckAdapter("", 0, hidden_size=8, bottleneck_dim=2)


class TestCompacter:
    """Kronecker-composed Compacter projections"""

    @pytest.mark.parametrize("n", [1, 2, 4])
    def test_phm_compose_matches_brute_force(self, n):
        """Test the composed weight on fifty random instances"""
        for instance in range(50):
            rng = derive_rng(11, "phm", n, instance)
            rules = [rng.normal(size=(n, n)) for _ in range(n)]
            blocks = [rng.normal(size=(8 // n, 4 // n)) for _ in range(n)]
            composed = phm_compose([Tensor(a) for a in rules], [Tensor(b) for b in blocks], shape=(8, 4))
            np.testing.assert_allclose(composed.data, _brute_force_kron(rules, blocks), rtol=0, atol=1e-12)

    def test_divisibility(self):
        """Test that phm_dim must divide both sides"""
        check_phm_divisibility(8, 4, 4)
        with pytest.raises(ShapeError) as exc_info:
            check_phm_divisibility(8, 6, 4)
        assert exc_info.value.error_code == "PHM_NOT_DIVISIBLE"

    def test_rule_shared_across_layers(self, backbone_config, peft_config):
        """Test that a language's layers share one rule and the set counts it once"""
        adapter_set = build_adapter_set("compacter", "go", backbone_config, peft_config)
        first = adapter_set.slot_adapter(0)
        second = adapter_set.slot_adapter(1)
        assert isinstance(first, CompacterAdapter)
        assert first.rule is second.rule
        names = [name for name, _ in adapter_set.named_parameters()]
        assert sum(1 for name in names if name.startswith("phm_rule.")) == peft_config.phm_dim
        assert not any(".rule." in name for name in names)

    def test_rule_init_range(self):
        """Test that rule entries are drawn from [-1, 1]"""
        rule = PHMRule(4, "go", seed=0)
        values = np.concatenate([matrix.data.ravel() for matrix in rule.matrices()])
        assert values.min() >= -1.0
        assert values.max() <= 1.0

    def test_fresh_compacter_passes_residual(self, backbone_config, peft_config):
        """Test that the zero right factors give z = r"""
        adapter = build_adapter_set("compacter", "go", backbone_config, peft_config).slot_adapter(0)
        rng = np.random.default_rng(2)
        h, r = Tensor(rng.normal(size=(2, 16))), Tensor(rng.normal(size=(2, 16)))
        np.testing.assert_allclose(adapter(h, r).data, r.data, atol=0)


class TestLoRA:
    """Low-rank projection updates"""

    def test_fresh_lora_is_a_no_op(self):
        """Test that lora_B = 0 reproduces the frozen projection"""
        lora = LoRAAdapter("go", 0, "query", 6, 6, rank=2, alpha=2.0)
        rng = np.random.default_rng(0)
        x, w, b = Tensor(rng.normal(size=(3, 6))), Tensor(rng.normal(size=(6, 6))), Tensor(rng.normal(size=6))
        np.testing.assert_array_equal(lora_forward(x, w, lora, b).data, x.data @ w.data + b.data)

    def test_update_scaled_by_alpha_over_rank(self):
        """Test that alpha = r gives an unscaled update"""
        lora = LoRAAdapter("go", 0, "value", 2, 2, rank=1, alpha=1.0)
        assert lora.scaling == 1.0
        lora.load_state_dict({"lora_A": np.array([[1.0], [2.0]]), "lora_B": np.array([[3.0, -1.0]])})
        x = Tensor([[1.0, 1.0]])
        out = lora_forward(x, Tensor(np.zeros((2, 2))), lora)
        np.testing.assert_allclose(out.data, [[9.0, -3.0]])

    def test_rank_bounds(self):
        """Test that the rank cannot exceed the adapted matrix"""
        with pytest.raises(ShapeError) as exc_info:
            LoRAAdapter("go", 0, "query", 4, 4, rank=5)
        assert exc_info.value.error_code == "LORA_RANK_TOO_LARGE"

    def test_wrong_base_shape(self):
        """Test that the frozen weight must match the module"""
        lora = LoRAAdapter("go", 0, "query", 4, 4, rank=2)
        with pytest.raises(ShapeError):
            lora_forward(Tensor(np.ones((1, 4))), Tensor(np.ones((4, 3))), lora)

    def test_lora_set_targets_query_and_value(self, backbone_config, peft_config):
        """Test that a LoRA set rewrites query and value only and has no slot output"""
        adapter_set = build_adapter_set(AdapterKind.LORA, "go", backbone_config, peft_config)
        assert set(adapter_set.projections(0)) == {"query", "value"}
        with pytest.raises(UsageError):
            adapter_set.slot_adapter(0)
        plugins = adapter_set.plugins()
        assert all(not layer.adapters for layer in plugins)


class TestAdapterSet:
    """Per-language module sets and parameter efficiency"""

    @pytest.mark.parametrize("kind", list(AdapterKind))
    def test_fresh_set_leaves_backbone_output_unchanged(self, kind, backbone_config, peft_config):
        """Test that every freshly initialized family is a no-op on the logits"""
        backbone = Backbone(backbone_config, seed=0).freeze()
        adapter_set = build_adapter_set(kind, "go", backbone_config, peft_config)
        plain = backbone.forward([1, 4, 9, 2]).logits.data
        adapted = backbone.forward([1, 4, 9, 2], adapter_set.plugins()).logits.data
        np.testing.assert_allclose(adapted, plain, rtol=0, atol=1e-12)

    def test_meta_round_trip(self, backbone_config, peft_config):
        """Test rebuilding a set from its metadata"""
        adapter_set = build_adapter_set("bottleneck", "ruby", backbone_config, peft_config, seed=2)
        rebuilt = AdapterSet.from_meta(adapter_set.meta(), backbone_config, seed=2)
        assert rebuilt.content_hash() == adapter_set.content_hash()

    def test_unknown_method(self, backbone_config, peft_config):
        """Test that an unknown family is a usage error"""
        with pytest.raises(UsageError) as exc_info:
            build_adapter_set("prefix", "go", backbone_config, peft_config)
        assert exc_info.value.error_code == "UNKNOWN_METHOD"
        assert parse_adapter_kind("lora") is AdapterKind.LORA

    def test_two_slot_adapters_need_a_mixer(self, backbone_config, peft_config):
        """Test that two unfused slot adapters on one layer are rejected"""
        backbone = Backbone(backbone_config, seed=0)
        go = build_adapter_set("bottleneck", "go", backbone_config, peft_config).slot_adapter(0)
        ruby = build_adapter_set("bottleneck", "ruby", backbone_config, peft_config).slot_adapter(0)
        plugins = [LayerPlugins(adapters={"go": go, "ruby": ruby}), LayerPlugins()]
        with pytest.raises(UsageError):
            backbone.forward([1, 2], plugins)

    def test_param_count_oracle(self):
        """Test the bottleneck count 2hd + d + h"""
        assert param_count(BottleneckAdapter("go", 0, 64, 16)).trainable == 0
        adapter = BottleneckAdapter("go", 0, 64, 16).unfreeze()
        assert param_count(adapter).trainable == 2 * 64 * 16 + 16 + 64

    @pytest.mark.parametrize("kind", list(AdapterKind))
    def test_trainable_ratio_at_most_twenty_percent(self, kind, backbone_config):
        """Test that every family trains at most a fifth of the parameters"""
        backbone_config = backbone_config.model_copy(update={"vocab_size": 128, "hidden_size": 64, "ffn_size": 256})
        peft = PeftConfig(phm_dim=4, lora_rank=16, lora_alpha=16.0)
        backbone = Backbone(backbone_config, seed=0).freeze()
        adapter_set = build_adapter_set(kind, "go", backbone_config, peft)
        counts = param_count(ModelBundle(backbone, {"go": adapter_set}).view())
        assert 0 < counts.ratio <= 0.20
        assert counts.groups["backbone"][0] == 0
