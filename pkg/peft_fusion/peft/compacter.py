"""Compacter: adapters whose projections are sums of Kronecker products.

A projection ``W [in x out]`` is composed as ``sum_i A_i (x) B_i`` where the
``n`` rule matrices ``A_i [n x n]`` are shared by every Compacter module of one
language set and each ``B_i [(in/n) x (out/n)]`` is the product of a left
factor ``[(in/n) x k]`` and a right factor ``[k x (out/n)]`` (rank ``k``,
default 1).
"""

from __future__ import annotations

import math
from collections.abc import Sequence

import numpy as np

from peft_fusion.exceptions import ShapeError, create_error_context
from peft_fusion.numcore import Module, Tensor, derive_rng, ops
from peft_fusion.peft.base import SlotAdapterModule
from peft_fusion.typed import AdapterKind


def check_phm_divisibility(in_features: int, out_features: int, phm_dim: int) -> None:
    if phm_dim < 1 or in_features % phm_dim or out_features % phm_dim:
        raise ShapeError(
            f"phm_dim {phm_dim} must divide both projection sizes ({in_features} x {out_features})",
            error_code="PHM_NOT_DIVISIBLE",
            context=create_error_context(component="peft.compacter", phm_dim=phm_dim),
        )


def phm_compose(
    rules: Sequence[Tensor],
    blocks: Sequence[Tensor],
    shape: tuple[int, int] | None = None,
) -> Tensor:
    """Compose ``W = sum_i A_i (x) B_i``.

    Parameters
    ----------
    rules : Sequence[Tensor]
        ``n`` rule matrices, each ``[n x n]``.
    blocks : Sequence[Tensor]
        ``n`` block matrices, all of one shape ``[(in/n) x (out/n)]``.
    shape : tuple[int, int] | None
        Expected ``(in, out)`` of the result; checked for divisibility by ``n``.

    Returns
    -------
    Tensor
        ``[in x out]`` composed weight.

    Examples
    --------
    >>> phm_compose([Tensor([[2.0]])], [Tensor([[1.0, 3.0]])]).data
    array([[2., 6.]])

    """
    n = len(rules)
    if n == 0 or len(blocks) != n:
        raise ShapeError(
            f"phm_compose needs n rules and n blocks, got {n} and {len(blocks)}",
            context=create_error_context(component="peft.compacter"),
        )
    for rule in rules:
        if rule.shape != (n, n):
            raise ShapeError(
                f"rule matrices must be [{n} x {n}], got {rule.shape}",
                context=create_error_context(component="peft.compacter"),
            )
    block_shape = blocks[0].shape
    if any(block.shape != block_shape for block in blocks) or len(block_shape) != 2:
        raise ShapeError(
            "all block matrices must share one 2-d shape",
            context=create_error_context(component="peft.compacter"),
        )
    if shape is not None:
        check_phm_divisibility(shape[0], shape[1], n)
        if (shape[0] // n, shape[1] // n) != block_shape:
            raise ShapeError(
                f"blocks of {block_shape} do not compose a {shape[0]} x {shape[1]} weight with n={n}",
                context=create_error_context(component="peft.compacter"),
            )
    composed = ops.kron(rules[0], blocks[0])
    for rule, block in zip(rules[1:], blocks[1:], strict=True):
        composed = ops.add(composed, ops.kron(rule, block))
    return composed


def _glorot_uniform(rng: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray:
    fan_in, fan_out = shape[-2], shape[-1]
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


class PHMRule(Module):
    """The ``n`` shared ``[n x n]`` rule matrices of one language's Compacter set."""

    def __init__(self, phm_dim: int, language_tag: str, seed: int = 0):
        super().__init__()
        self.phm_dim = phm_dim
        rng = derive_rng(seed, "phm_rule", language_tag)
        for i in range(phm_dim):
            self.register_parameter(f"{i}", rng.uniform(-1.0, 1.0, size=(phm_dim, phm_dim)))

    def matrices(self) -> list[Tensor]:
        return [self._parameters[f"{i}"] for i in range(self.phm_dim)]


class PHMProjection(Module):
    """Low-rank PHM projection of ``in_features`` onto ``out_features``."""

    def __init__(
        self,
        rule: PHMRule,
        in_features: int,
        out_features: int,
        rank: int,
        rng: np.random.Generator,
        zero_right: bool = False,
    ):
        super().__init__()
        n = rule.phm_dim
        check_phm_divisibility(in_features, out_features, n)
        self.rule = rule
        self.in_features = in_features
        self.out_features = out_features
        self.rank = rank
        rows, cols = in_features // n, out_features // n
        for i in range(n):
            self.register_parameter(f"left.{i}", _glorot_uniform(rng, (rows, rank)))
            right = np.zeros((rank, cols)) if zero_right else _glorot_uniform(rng, (rank, cols))
            self.register_parameter(f"right.{i}", right)
        self.register_parameter("bias", np.zeros(out_features))

    def weight(self) -> Tensor:
        n = self.rule.phm_dim
        blocks = [
            ops.matmul(self._parameters[f"left.{i}"], self._parameters[f"right.{i}"]) for i in range(n)
        ]
        return phm_compose(self.rule.matrices(), blocks, shape=(self.in_features, self.out_features))

    def __call__(self, x: Tensor) -> Tensor:
        return ops.linear(x, self.weight(), self._parameters["bias"])


class CompacterAdapter(SlotAdapterModule):
    """Bottleneck adapter with PHM down and up projections.

    The rule matrices live in ``rule`` and are registered by the owning
    adapter set; the module's own parameters are the low-rank factors and
    biases. The up-projection's right factors start at zero, so a fresh
    module passes the residual through unchanged.
    """

    kind = AdapterKind.COMPACTER

    def __init__(
        self,
        language_tag: str,
        layer_index: int,
        hidden_size: int,
        bottleneck_dim: int,
        rule: PHMRule,
        phm_rank: int = 1,
        seed: int = 0,
    ):
        super().__init__(language_tag, layer_index, hidden_size)
        self.bottleneck_dim = bottleneck_dim
        self.phm_dim = rule.phm_dim
        self.rule = rule
        rng = derive_rng(seed, "compacter", language_tag, layer_index)
        self.down = PHMProjection(rule, hidden_size, bottleneck_dim, phm_rank, rng)
        self.up = PHMProjection(rule, bottleneck_dim, hidden_size, phm_rank, rng, zero_right=True)
        # the shared rule is registered once, by the adapter set
        self.add_module("down", self.down)
        self.add_module("up", self.up)

    def __call__(self, h: Tensor, r: Tensor) -> Tensor:
        self._expect_width("compacter_forward", h, r)
        return ops.add(self.up(ops.relu(self.down(h))), r)
