from dataclasses import dataclass
from enum import Enum
from typing import Any


class AdapterKind(Enum):
    BOTTLENECK = "bottleneck"
    COMPACTER = "compacter"
    LORA = "lora"

    @property
    def has_slot_output(self) -> bool:
        """Slot adapters produce a ``z_{l,n}`` a fusion block can attend over."""
        return self is not AdapterKind.LORA


class TrainingMode(Enum):
    PRETRAIN = "pretrain"
    ADAPTER = "adapter"
    FUSION = "fusion"
    ADVFUSION = "advfusion"


class Phase(Enum):
    PRETRAIN = "pretrain"
    ADAPTER = "adapter"
    FUSION = "fusion"
    ADVERSARIAL = "adversarial"
    FINETUNE = "finetune"


class MaskMode(Enum):
    EXCLUDE = "exclude"
    ZERO = "zero"


@dataclass(slots=True)
class TrainingEvent:
    """One line of a training event log.

    Parameters
    ----------
    event : str
        ``"step"`` for optimizer steps, ``"epoch_end"``, ``"phase_start"`` or
        ``"mask_flip"`` for schedule boundaries.
    step : int
        Global optimizer step count at the time of the event.
    epoch : int
        1-based epoch index across the whole run.
    phase : Phase
        Training phase the event belongs to.
    loss : float | None
        Mean batch loss for step events, mean epoch loss for epoch ends.
    lr : float
        Learning rate in effect.
    language : str | None
        Language of the batch (step events of fusion runs).
    masked : tuple[str, ...]
        Adapter tags excluded from fusion while the event happened.
    frozen_grad_max : float
        Largest absolute gradient entry seen on frozen tensors (must stay 0).

    Examples
    --------
    >>> TrainingEvent(event="step", step=3, epoch=1, phase=Phase.ADVERSARIAL, loss=2.1, lr=5e-4)

    """

    event: str
    step: int
    epoch: int
    phase: Phase
    loss: float | None = None
    lr: float = 0.0
    language: str | None = None
    masked: tuple[str, ...] = ()
    frozen_grad_max: float = 0.0

    def to_dict(self) -> dict[str, Any]:
        return {
            "event": self.event,
            "step": self.step,
            "epoch": self.epoch,
            "phase": self.phase.value,
            "loss": self.loss,
            "lr": self.lr,
            "language": self.language,
            "masked": list(self.masked),
            "frozen_grad_max": self.frozen_grad_max,
        }

    @classmethod
    def from_dict(cls, payload: dict[str, Any]) -> "TrainingEvent":
        return cls(
            event=payload["event"],
            step=int(payload["step"]),
            epoch=int(payload["epoch"]),
            phase=Phase(payload["phase"]),
            loss=payload.get("loss"),
            lr=float(payload.get("lr", 0.0)),
            language=payload.get("language"),
            masked=tuple(payload.get("masked", ())),
            frozen_grad_max=float(payload.get("frozen_grad_max", 0.0)),
        )
