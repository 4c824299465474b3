import math

import numpy as np
import pytest

from peft_fusion.backbone import Backbone
from peft_fusion.exceptions import MaskError, UsageError
from peft_fusion.fusion import FusionBlock, FusionStack, capture_attention, fusion_forward
from peft_fusion.numcore import Tensor, derive_rng, gradcheck, no_grad, ops
from peft_fusion.peft import build_adapter_set
from peft_fusion.typed import MaskMode


def _scalar_block(q: float, k: float, v: float, mask_mode: MaskMode = MaskMode.EXCLUDE) -> FusionBlock:
    block = FusionBlock(0, 1, ("a", "b"), mask_mode=mask_mode)
    block.load_state_dict({"query.weight": [[q]], "key.weight": [[k]], "value.weight": [[v]]})
    return block


@pytest.fixture
def fused(backbone_config, peft_config):
    """Backbone, two trained-looking bottleneck sets and a fusion stack over them."""
    backbone = Backbone(backbone_config, seed=0).freeze()
    adapter_sets = {}
    for tag in ("go", "ruby"):
        adapter_set = build_adapter_set("bottleneck", tag, backbone_config, peft_config, seed=1)
        rng = derive_rng(5, "perturb", tag)
        state = adapter_set.state_dict()
        adapter_set.load_state_dict(
            {name: value + rng.normal(scale=0.5, size=value.shape) for name, value in state.items()}
        )
        adapter_sets[tag] = adapter_set.freeze()
    stack = FusionStack(backbone_config.num_layers, backbone_config.hidden_size, ("go", "ruby"), seed=0, init_std=0.5)
    return backbone, adapter_sets, stack


class TestFusionBlock:
    """AdapterFusion attention over adapter outputs"""

    def test_scalar_oracle(self):
        """Test h = 1, N = 2 against a hand-computed softmax mixture"""
        q, k, v = 0.7, -1.3, 2.0
        a, b1, b2 = 1.5, 0.4, -0.9
        block = _scalar_block(q, k, v)
        out = fusion_forward(Tensor([[a]]), {"a": Tensor([[b1]]), "b": Tensor([[b2]])}, block)
        s1, s2 = (a * q) * (b1 * k), (a * q) * (b2 * k)
        w1 = math.exp(s1) / (math.exp(s1) + math.exp(s2))
        w2 = 1.0 - w1
        assert out.weights.data[0, 0] == pytest.approx(w1, abs=1e-12)
        assert out.weights.data[0, 1] == pytest.approx(w2, abs=1e-12)
        assert out.output.data[0, 0] == pytest.approx(w1 * b1 * v + w2 * b2 * v, abs=1e-12)

    def test_weights_form_a_distribution(self):
        """Test that every token's weights are non-negative and sum to one over 1000 forwards"""
        block = FusionBlock(0, 4, ("a", "b", "c"), seed=0, init_std=1.0)
        for index in range(1000):
            rng = derive_rng(3, "dist", index)
            h = Tensor(rng.normal(size=(3, 4)))
            z = {tag: Tensor(rng.normal(size=(3, 4))) for tag in ("a", "b", "c")}
            weights = fusion_forward(h, z, block).weights.data
            assert np.all(weights >= 0.0)
            np.testing.assert_allclose(weights.sum(axis=1), 1.0, rtol=0, atol=1e-12)

    def test_value_starts_near_identity(self):
        """Test the V initializer"""
        block = FusionBlock(0, 8, ("a", "b"))
        np.testing.assert_allclose(block._parameters["value.weight"].data, np.eye(8), atol=1e-4)  # noqa: SLF001

    def test_gradients_through_fusion(self):
        """Test fusion output gradients against finite differences"""
        block = FusionBlock(0, 3, ("a", "b"), seed=2, init_std=0.8)
        rng = np.random.default_rng(4)
        inputs = [rng.normal(size=(2, 3)) for _ in range(3)]
        probe = Tensor(rng.normal(size=(2, 3)))

        def fn(h, za, zb):
            return ops.multiply(fusion_forward(h, {"a": za, "b": zb}, block).output, probe)

        assert gradcheck(fn, inputs).passed(1e-4)

    def test_excluded_adapter_leaves_the_softmax(self):
        """Test that exclusion masking drops the adapter and renormalizes the rest"""
        block = FusionBlock(0, 2, ("a", "b", "c"), seed=0, init_std=1.0).set_mask({"b"})
        rng = np.random.default_rng(0)
        z = {tag: Tensor(rng.normal(size=(4, 2))) for tag in ("a", "c")}
        out = fusion_forward(Tensor(rng.normal(size=(4, 2))), z, block)
        assert out.tags == ("a", "c")
        full = out.full_weights(block.adapter_order)
        assert np.all(full[:, 1] == 0.0)
        np.testing.assert_allclose(full.sum(axis=1), 1.0)

    def test_zero_mode_keeps_masked_column(self):
        """Test that zero-mode masking attends over the residual for masked adapters"""
        block = FusionBlock(0, 2, ("a", "b"), seed=0, mask_mode=MaskMode.ZERO).set_mask({"a"})
        assert block.attending_tags() == ("a", "b")
        r = Tensor([[1.0, 2.0]])
        calls = []

        def adapter(h, residual):
            calls.append(h)
            return ops.scale(residual, 3.0)

        _, out, outputs = block.mix(Tensor([[0.5, 0.5]]), r, {"a": adapter, "b": adapter})
        assert len(calls) == 1
        assert outputs["a"] is r
        assert out.weights.shape == (1, 2)

    def test_mask_validation(self):
        """Test unknown tags and masking every adapter"""
        block = FusionBlock(0, 2, ("a", "b"))
        with pytest.raises(MaskError):
            block.set_mask({"zz"})
        with pytest.raises(MaskError) as exc_info:
            block.set_mask({"a", "b"})
        assert exc_info.value.error_code == "FUSION_ALL_MASKED"

    def test_order_validation(self):
        """Test empty and duplicate adapter orders"""
        with pytest.raises(UsageError) as empty:
            FusionBlock(0, 2, ())
        assert empty.value.error_code == "FUSION_EMPTY"
        with pytest.raises(UsageError) as dup:
            FusionBlock(0, 2, ("a", "a"))
        assert dup.value.error_code == "FUSION_DUPLICATE_TAGS"

    def test_missing_unmasked_output(self):
        """Test that every attending adapter must supply an output"""
        block = FusionBlock(0, 2, ("a", "b"))
        with pytest.raises(UsageError):
            fusion_forward(Tensor(np.ones((1, 2))), {"a": Tensor(np.ones((1, 2)))}, block)


class TestFusionStack:
    """Fusion wired into the backbone"""

    def test_stack_plugins_fuse_every_layer(self, fused):
        """Test that each layer records fusion weights over both adapters"""
        backbone, adapter_sets, stack = fused
        result = backbone.forward([1, 5, 6, 2], stack.plugins(adapter_sets))
        for state in result.layer_states:
            assert state.fusion is not None
            assert state.fusion.tags == ("go", "ruby")
            assert set(state.adapter_outputs) == {"go", "ruby"}

    def test_capture_is_passive(self, fused):
        """Test that capturing attention leaves the logits bit-identical"""
        backbone, adapter_sets, stack = fused
        plugins = stack.plugins(adapter_sets)
        plain = backbone.forward([1, 5, 6, 2], plugins).logits.data
        with no_grad(), capture_attention(stack) as capture:
            capture.begin_sample("s1", "go")
            captured = backbone.forward([1, 5, 6, 2], plugins).logits.data
            capture.begin_sample("s2", "ruby")
            backbone.forward([1, 7], plugins)
            samples = capture.finish()
        np.testing.assert_array_equal(plain, captured)
        assert [sample.sample_id for sample in samples] == ["s1", "s2"]
        assert samples[0].weights.shape == (2, 4, 2)
        assert samples[1].weights.shape == (2, 2, 2)
        np.testing.assert_allclose(samples[0].weights.sum(axis=2), 1.0)
        assert all(block.capture is None for block in stack.blocks)

    def test_masked_adapter_captured_as_zero(self, fused):
        """Test that an excluded adapter shows up with zero weight"""
        backbone, adapter_sets, stack = fused
        stack.set_mask({"go"})
        with capture_attention(stack) as capture:
            backbone.forward([1, 5, 6], stack.plugins(adapter_sets))
            (sample,) = capture.finish()
        assert np.all(sample.weights[:, :, 0] == 0.0)
        np.testing.assert_allclose(sample.weights[:, :, 1], 1.0)

    def test_capture_without_forward(self, fused):
        """Test that an empty capture is reported"""
        _, _, stack = fused
        with capture_attention(stack) as capture, pytest.raises(UsageError) as exc_info:
            capture.finish()
        assert exc_info.value.error_code == "CAPTURE_EMPTY"

    def test_kind_mismatch(self, backbone_config, peft_config):
        """Test that fusion composes a single slot-adapter kind"""
        stack = FusionStack(2, 16, ("go", "ruby"))
        mixed = {
            "go": build_adapter_set("bottleneck", "go", backbone_config, peft_config),
            "ruby": build_adapter_set("compacter", "ruby", backbone_config, peft_config),
        }
        with pytest.raises(UsageError) as exc_info:
            stack.plugins(mixed)
        assert exc_info.value.error_code == "FUSION_KIND_MISMATCH"
        lora = {tag: build_adapter_set("lora", tag, backbone_config, peft_config) for tag in ("go", "ruby")}
        with pytest.raises(UsageError):
            stack.plugins(lora)

    def test_missing_adapter_set(self, backbone_config, peft_config):
        """Test that every fused tag needs an adapter set"""
        stack = FusionStack(2, 16, ("go", "ruby"))
        with pytest.raises(UsageError) as exc_info:
            stack.plugins({"go": build_adapter_set("bottleneck", "go", backbone_config, peft_config)})
        assert exc_info.value.error_code == "FUSION_ADAPTER_MISSING"
