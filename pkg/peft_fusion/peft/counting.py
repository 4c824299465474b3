from __future__ import annotations

from collections.abc import Mapping
from dataclasses import dataclass, field

from peft_fusion.numcore import Module


@dataclass(slots=True)
class ParamCount:
    """Trainable and total parameter counts of a model view.

    ``groups`` maps each view name to ``(trainable, total)``; tensors shared
    between views are counted once, under the first view that reaches them.
    """

    trainable: int
    total: int
    groups: dict[str, tuple[int, int]] = field(default_factory=dict)

    @property
    def ratio(self) -> float:
        return self.trainable / self.total if self.total else 0.0

    def to_dict(self) -> dict[str, object]:
        return {
            "trainable": self.trainable,
            "total": self.total,
            "ratio": self.ratio,
            "groups": {name: {"trainable": t, "total": n} for name, (t, n) in self.groups.items()},
        }


def param_count(view: Module | Mapping[str, Module]) -> ParamCount:
    """Count parameters of one module or of a named collection of modules.

    Examples
    --------
    >>> param_count(BottleneckAdapter("go", 0, 64, 16)).total
    2128

    """
    views = {"model": view} if isinstance(view, Module) else dict(view)
    seen: set[int] = set()
    trainable = total = 0
    groups: dict[str, tuple[int, int]] = {}
    for name, module in views.items():
        group_trainable = group_total = 0
        for _, tensor in module.named_parameters():
            if id(tensor) in seen:
                continue
            seen.add(id(tensor))
            group_total += tensor.size
            if tensor.requires_grad:
                group_trainable += tensor.size
        groups[name] = (group_trainable, group_total)
        trainable += group_trainable
        total += group_total
    return ParamCount(trainable=trainable, total=total, groups=groups)
