from __future__ import annotations

from peft_fusion.exceptions import ShapeError, UsageError, create_error_context
from peft_fusion.numcore import Module, Tensor
from peft_fusion.typed import AdapterKind


class AdapterModule(Module):
    """One trainable PEFT unit, owned by exactly one language.

    Parameters
    ----------
    kind : AdapterKind
        Module family.
    language_tag : str
        Language whose data trains the module.
    layer_index : int
        Decoder layer the module attaches to.
    hidden_size : int
        Backbone width ``h``.

    """

    kind: AdapterKind

    def __init__(self, language_tag: str, layer_index: int, hidden_size: int):
        super().__init__()
        if not language_tag:
            raise UsageError(
                "adapter needs a non-empty language tag",
                context=create_error_context(component="peft"),
            )
        self.language_tag = language_tag
        self.layer_index = layer_index
        self.hidden_size = hidden_size

    def _expect_kind(self, kind: AdapterKind, op: str) -> None:
        if self.kind is not kind:
            raise UsageError(
                f"{op} needs a {kind.value} module, got {self.kind.value}",
                context=create_error_context(component="peft", op=op),
            )

    def _expect_width(self, op: str, *tensors: Tensor) -> None:
        for tensor in tensors:
            if tensor.ndim != 2 or tensor.shape[1] != self.hidden_size:
                raise ShapeError(
                    f"{op}: expected [T x {self.hidden_size}] input, got {tensor.shape}",
                    context=create_error_context(component="peft", op=op),
                )


class SlotAdapterModule(AdapterModule):
    """Adapter that fills the layer slot: ``z = up(act(down(h))) + r``."""

    def pass_through(self, h: Tensor, r: Tensor) -> Tensor:  # noqa: ARG002
        """Output the module would give with every weight and bias set to zero."""
        return r

    def __call__(self, h: Tensor, r: Tensor) -> Tensor:
        raise NotImplementedError
