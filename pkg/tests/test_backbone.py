import numpy as np
import pytest

from peft_fusion.backbone import Backbone, LayerPlugins, empty_plugins
from peft_fusion.config import BackboneConfig
from peft_fusion.exceptions import ConfigError, ShapeError
from peft_fusion.numcore import Tensor, gradcheck, ops


@pytest.fixture
def backbone(backbone_config) -> Backbone:
    return Backbone(backbone_config, seed=0)


class TestBackbone:
    """Miniature decoder-only transformer"""

    def test_forward_shapes(self, backbone):
        """Test logits and per-layer state shapes"""
        result = backbone.forward([1, 5, 7, 2])
        assert result.logits.shape == (4, 32)
        assert len(result.layer_states) == 2
        for state in result.layer_states:
            assert state.h.shape == (4, 16)
            assert state.slot_output is state.r

    def test_causal_mask(self, backbone):
        """Test that changing a later token leaves earlier logits untouched"""
        a = backbone.forward([1, 5, 7, 9]).logits.data
        b = backbone.forward([1, 5, 7, 11]).logits.data
        np.testing.assert_array_equal(a[:3], b[:3])
        assert not np.array_equal(a[3], b[3])

    def test_same_seed_same_weights(self, backbone_config):
        """Test that initialization is a function of the seed"""
        assert Backbone(backbone_config, seed=4).content_hash() == Backbone(backbone_config, seed=4).content_hash()
        assert Backbone(backbone_config, seed=4).content_hash() != Backbone(backbone_config, seed=5).content_hash()

    def test_empty_plugins_match_plain_forward(self, backbone):
        """Test that an empty plugin list is the plain backbone"""
        plain = backbone.forward([1, 6, 3]).logits.data
        plugged = backbone.forward([1, 6, 3], empty_plugins(2)).logits.data
        np.testing.assert_array_equal(plain, plugged)
        assert all(plugins.is_empty for plugins in empty_plugins(2))
        assert not LayerPlugins(mixer=object()).is_empty

    def test_rejects_bad_sequences(self, backbone):
        """Test empty, over-long and out-of-vocabulary inputs"""
        with pytest.raises(ShapeError):
            backbone.forward([])
        with pytest.raises(ShapeError) as too_long:
            backbone.forward([1] * 17)
        assert too_long.value.error_code == "SEQUENCE_TOO_LONG"
        with pytest.raises(ShapeError) as oov:
            backbone.forward([1, 32])
        assert oov.value.error_code == "TOKEN_OUT_OF_VOCAB"

    def test_plugin_count_must_match_layers(self, backbone):
        """Test that one plugin set per layer is required"""
        with pytest.raises(ShapeError):
            backbone.forward([1, 2], [LayerPlugins()])

    def test_unresolved_vocab(self):
        """Test that a backbone needs a vocabulary size"""
        with pytest.raises(ConfigError):
            Backbone(BackboneConfig(num_layers=1, hidden_size=8, num_heads=2, ffn_size=8))

    def test_generate_greedy_respects_limits(self, backbone):
        """Test that greedy decoding stops at max_new or at the sequence limit"""
        out = backbone.generate_greedy([1, 5], max_new=3, stop_token=-1)
        assert len(out) == 5
        assert out[:2] == [1, 5]
        capped = backbone.generate_greedy([1, 5], max_new=50, stop_token=-1)
        assert len(capped) == 16

    def test_generate_greedy_keeps_stop_token(self, backbone):
        """Test that decoding ends right after the stop token"""
        first = backbone.generate_greedy([1, 5], max_new=1, stop_token=-1)[-1]
        out = backbone.generate_greedy([1, 5], max_new=5, stop_token=first)
        assert out == [1, 5, first]

    def test_layer_gradient_with_respect_to_input(self):
        """Test a decoder layer end to end against finite differences"""
        config = BackboneConfig(vocab_size=8, num_layers=1, hidden_size=4, num_heads=2, ffn_size=6, max_seq_len=4)
        layer = Backbone(config, seed=3).layers[0]
        rng = np.random.default_rng(0)
        x = rng.normal(size=(3, 4))
        probe = Tensor(rng.normal(size=(3, 4)))
        result = gradcheck(lambda t: ops.multiply(layer.forward(t, LayerPlugins())[0], probe), [x])
        assert result.passed(1e-4)

    def test_generation_does_not_record(self, backbone):
        """Test that generation leaves no gradients behind"""
        backbone.unfreeze()
        backbone.generate_greedy([1, 2], max_new=2, stop_token=-1)
        assert all(tensor.grad is None for tensor in backbone.parameters())
        assert isinstance(backbone.forward([1]).logits, Tensor)
