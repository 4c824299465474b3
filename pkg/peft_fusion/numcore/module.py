from __future__ import annotations

import hashlib
from collections.abc import Iterator, Mapping

import numpy as np

from peft_fusion.exceptions import ShapeError, create_error_context
from peft_fusion.numcore.tensor import DTYPE, Tensor


class Module:
    """Named registry of parameter tensors and child modules.

    Children registered under several parents (a shared parameter table) are
    reported once, under the first name that reaches them.
    """

    def __init__(self) -> None:
        self._parameters: dict[str, Tensor] = {}
        self._children: dict[str, Module] = {}

    def register_parameter(self, name: str, value: np.ndarray | Tensor) -> Tensor:
        tensor = value if isinstance(value, Tensor) else Tensor(value)
        tensor.name = tensor.name or name
        self._parameters[name] = tensor
        return tensor

    def add_module(self, name: str, module: Module) -> Module:
        self._children[name] = module
        return module

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        seen: set[int] = set()
        yield from self._walk(prefix, seen)

    def _walk(self, prefix: str, seen: set[int]) -> Iterator[tuple[str, Tensor]]:
        for name, tensor in self._parameters.items():
            if id(tensor) not in seen:
                seen.add(id(tensor))
                yield f"{prefix}{name}", tensor
        for name, child in self._children.items():
            yield from child._walk(f"{prefix}{name}.", seen)  # noqa: SLF001

    def parameters(self) -> list[Tensor]:
        return [tensor for _, tensor in self.named_parameters()]

    def trainable_parameters(self) -> list[Tensor]:
        return [tensor for tensor in self.parameters() if tensor.requires_grad]

    def freeze(self) -> Module:
        for tensor in self.parameters():
            tensor.requires_grad = False
            tensor.grad = None
        return self

    def unfreeze(self) -> Module:
        for tensor in self.parameters():
            tensor.requires_grad = True
        return self

    def zero_grad(self) -> None:
        for tensor in self.parameters():
            tensor.grad = None

    def num_parameters(self) -> int:
        return sum(tensor.size for tensor in self.parameters())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: tensor.numpy() for name, tensor in self.named_parameters()}

    def load_state_dict(self, state: Mapping[str, np.ndarray], strict: bool = True) -> list[str]:
        """Copy values into the registered tensors; returns the names that were loaded."""
        params = dict(self.named_parameters())
        missing = sorted(set(params) - set(state))
        if strict and missing:
            raise ShapeError(
                f"state is missing {len(missing)} parameter(s), first: {missing[0]}",
                error_code="STATE_MISSING_KEYS",
                context=create_error_context(component="numcore.module", missing=missing[:10]),
            )
        loaded = []
        for name, tensor in params.items():
            if name not in state:
                continue
            value = np.asarray(state[name], dtype=DTYPE)
            if value.shape != tensor.shape:
                raise ShapeError(
                    f"parameter '{name}' has shape {tensor.shape}, state holds {value.shape}",
                    context=create_error_context(component="numcore.module", parameter=name),
                )
            tensor.data = value
            loaded.append(name)
        return loaded

    def content_hash(self) -> str:
        return content_hash(self.named_parameters())


def content_hash(named: Iterator[tuple[str, Tensor]] | Mapping[str, Tensor]) -> str:
    """SHA-256 over sorted names, shapes and little-endian float64 bytes."""
    items = named.items() if isinstance(named, Mapping) else named
    digest = hashlib.sha256()
    for name, tensor in sorted(items, key=lambda item: item[0]):
        digest.update(name.encode("utf-8"))
        digest.update(repr(tensor.shape).encode("ascii"))
        digest.update(np.ascontiguousarray(tensor.data, dtype="<f8").tobytes())
    return digest.hexdigest()
