"""Differentiable operations over :class:`~peft_fusion.numcore.tensor.Tensor`.

Shapes must conform exactly; the only implicit expansion is a bias of shape
``x.shape[1:]`` added across the leading axis.
"""

from __future__ import annotations

from collections.abc import Sequence

import numpy as np

from peft_fusion.exceptions import ShapeError, create_error_context
from peft_fusion.numcore.tensor import DTYPE, Tensor, record


def _shape_error(op: str, message: str, *shapes: tuple[int, ...]) -> ShapeError:
    return ShapeError(
        f"{op}: {message}",
        context=create_error_context(component="numcore.ops", op=op, shapes=[list(s) for s in shapes]),
    )


def _require_ndim(op: str, tensor: Tensor, ndim: int) -> None:
    if tensor.ndim != ndim:
        raise _shape_error(op, f"expected a {ndim}-d operand, got shape {tensor.shape}", tensor.shape)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    _require_ndim("matmul", a, 2)
    _require_ndim("matmul", b, 2)
    if a.shape[1] != b.shape[0]:
        raise _shape_error(
            "matmul",
            f"inner dimensions differ ({a.shape[0]}x{a.shape[1]} @ {b.shape[0]}x{b.shape[1]})",
            a.shape,
            b.shape,
        )
    av, bv = a.data, b.data

    def rule(g: np.ndarray):
        return g @ bv.T, av.T @ g

    return record("matmul", av @ bv, (a, b), rule)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; ``b`` may also be a bias of shape ``a.shape[1:]``."""
    if a.shape == b.shape:

        def rule(g: np.ndarray):
            return g, g

        return record("add", a.data + b.data, (a, b), rule)
    if a.ndim >= 1 and b.shape == a.shape[1:]:

        def bias_rule(g: np.ndarray):
            return g, g.sum(axis=0)

        return record("add", a.data + b.data, (a, b), bias_rule)
    raise _shape_error("add", f"shapes {a.shape} and {b.shape} do not conform", a.shape, b.shape)


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise _shape_error("sub", f"shapes {a.shape} and {b.shape} differ", a.shape, b.shape)

    def rule(g: np.ndarray):
        return g, -g

    return record("sub", a.data - b.data, (a, b), rule)


def multiply(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise _shape_error("multiply", f"shapes {a.shape} and {b.shape} differ", a.shape, b.shape)
    av, bv = a.data, b.data

    def rule(g: np.ndarray):
        return g * bv, g * av

    return record("multiply", av * bv, (a, b), rule)


def scale(a: Tensor, factor: float) -> Tensor:
    def rule(g: np.ndarray):
        return (g * factor,)

    return record("scale", a.data * factor, (a,), rule)


def scale_rows(x: Tensor, weights: Tensor) -> Tensor:
    """Multiply row ``t`` of a ``[T x h]`` tensor by ``weights[t]`` (shape ``[T x 1]``)."""
    _require_ndim("scale_rows", x, 2)
    if weights.shape != (x.shape[0], 1):
        raise _shape_error(
            "scale_rows", f"weights must be [{x.shape[0]} x 1], got {weights.shape}", x.shape, weights.shape
        )
    xv, wv = x.data, weights.data

    def rule(g: np.ndarray):
        return g * wv, (g * xv).sum(axis=1, keepdims=True)

    return record("scale_rows", xv * wv, (x, weights), rule)


def relu(a: Tensor) -> Tensor:
    active = a.data > 0

    def rule(g: np.ndarray):
        return (g * active,)

    return record("relu", np.where(active, a.data, 0.0), (a,), rule)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply elementwise gain and shift."""
    if eps <= 0:
        raise _shape_error("layer_norm", f"epsilon must be positive, got {eps}")
    width = x.shape[-1]
    if gamma.shape != (width,) or beta.shape != (width,):
        raise _shape_error(
            "layer_norm",
            f"gain/shift must have shape ({width},), got {gamma.shape} and {beta.shape}",
            x.shape,
            gamma.shape,
            beta.shape,
        )
    xv, gv = x.data, gamma.data
    mean = xv.mean(axis=-1, keepdims=True)
    centered = xv - mean
    var = (centered**2).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    normed = centered * inv_std
    out = normed * gv + beta.data

    def rule(g: np.ndarray):
        g_normed = g * gv
        g_x = inv_std * (
            g_normed
            - g_normed.mean(axis=-1, keepdims=True)
            - normed * (g_normed * normed).mean(axis=-1, keepdims=True)
        )
        reduce_axes = tuple(range(g.ndim - 1))
        return g_x, (g * normed).sum(axis=reduce_axes), g.sum(axis=reduce_axes)

    return record("layer_norm", out, (x, gamma, beta), rule)


def embedding_lookup(table: Tensor, ids: Sequence[int]) -> Tensor:
    _require_ndim("embedding_lookup", table, 2)
    index = np.asarray(ids, dtype=np.int64).reshape(-1)
    if index.size and (index.min() < 0 or index.max() >= table.shape[0]):
        raise _shape_error(
            "embedding_lookup",
            f"index out of range for a table of {table.shape[0]} rows",
            table.shape,
        )
    rows = table.shape[0]

    def rule(g: np.ndarray):
        g_table = np.zeros((rows, g.shape[1]), dtype=DTYPE)
        np.add.at(g_table, index, g)
        return (g_table,)

    return record("embedding_lookup", table.data[index], (table,), rule)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise _shape_error("concat", "nothing to concatenate")
    first = tensors[0]
    axis = axis % first.ndim
    for other in tensors[1:]:
        if other.ndim != first.ndim or any(
            a != b for i, (a, b) in enumerate(zip(first.shape, other.shape, strict=True)) if i != axis
        ):
            raise _shape_error(
                "concat", f"shapes {first.shape} and {other.shape} differ off axis {axis}", first.shape, other.shape
            )
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def rule(g: np.ndarray):
        return tuple(np.split(g, bounds, axis=axis))

    return record("concat", np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), rule)


def transpose(a: Tensor) -> Tensor:
    _require_ndim("transpose", a, 2)

    def rule(g: np.ndarray):
        return (g.T,)

    return record("transpose", a.data.T, (a,), rule)


def slice_columns(a: Tensor, start: int, stop: int) -> Tensor:
    _require_ndim("slice_columns", a, 2)
    if not 0 <= start < stop <= a.shape[1]:
        raise _shape_error("slice_columns", f"columns [{start}:{stop}) outside width {a.shape[1]}", a.shape)
    shape = a.shape

    def rule(g: np.ndarray):
        full = np.zeros(shape, dtype=DTYPE)
        full[:, start:stop] = g
        return (full,)

    return record("slice_columns", a.data[:, start:stop], (a,), rule)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    if int(np.prod(shape, dtype=np.int64)) != a.size:
        raise _shape_error("reshape", f"cannot reshape {a.shape} to {shape}", a.shape)
    original = a.shape

    def rule(g: np.ndarray):
        return (g.reshape(original),)

    return record("reshape", a.data.reshape(shape), (a,), rule)


def sum(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    shape = a.shape

    def rule(g: np.ndarray):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return record("sum", np.sum(a.data, axis=axis, keepdims=keepdims), (a,), rule)


def mean(a: Tensor) -> Tensor:
    count = a.size
    shape = a.shape

    def rule(g: np.ndarray):
        return (np.full(shape, float(g.reshape(-1)[0]) / count, dtype=DTYPE),)

    return record("mean", np.asarray(a.data.mean()), (a,), rule)


def kron(a: Tensor, b: Tensor) -> Tensor:
    """Kronecker product of two matrices: ``out[i*p+k, j*q+l] = a[i,j] * b[k,l]``."""
    _require_ndim("kron", a, 2)
    _require_ndim("kron", b, 2)
    (m, n), (p, q) = a.shape, b.shape
    av, bv = a.data, b.data

    def rule(g: np.ndarray):
        blocks = g.reshape(m, p, n, q)
        return np.einsum("ipjq,pq->ij", blocks, bv), np.einsum("ipjq,ij->pq", blocks, av)

    return record("kron", np.kron(av, bv), (a, b), rule)


def softmax(v: Tensor, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Softmax along ``axis`` with max-subtraction.

    ``mask`` (same shape as ``v``, True = excluded) removes entries from the
    normalization entirely; excluded entries come out as exactly zero. Every
    slice along ``axis`` must keep at least one entry.
    """
    if v.ndim == 0:
        raise _shape_error("softmax", "softmax of a 0-d tensor")
    axis = axis % v.ndim
    if v.shape[axis] == 0:
        raise _shape_error("softmax", f"axis {axis} is empty", v.shape)
    values = v.data
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != v.shape:
            raise _shape_error("softmax", f"mask shape {mask.shape} differs from {v.shape}", v.shape)
        if np.any(mask.all(axis=axis)):
            raise _shape_error("softmax", "a slice has every entry masked", v.shape)
        values = np.where(mask, -np.inf, values)
    shifted = values - values.max(axis=axis, keepdims=True)
    weights = np.exp(shifted)
    if mask is not None:
        weights = np.where(mask, 0.0, weights)
    out = weights / weights.sum(axis=axis, keepdims=True)

    def rule(g: np.ndarray):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return record("softmax", out, (v,), rule)


def cross_entropy(logits: Tensor, targets: Sequence[int], ignore_index: int = -100) -> Tensor:
    """Mean negative log-softmax of ``targets`` over the non-ignored rows of ``[T x V]`` logits."""
    _require_ndim("cross_entropy", logits, 2)
    rows, classes = logits.shape
    target = np.asarray(targets, dtype=np.int64).reshape(-1)
    if target.size != rows:
        raise _shape_error("cross_entropy", f"{target.size} targets for {rows} rows", logits.shape)
    active = target != ignore_index
    if np.any((target[active] < 0) | (target[active] >= classes)):
        raise _shape_error("cross_entropy", f"target outside [0, {classes})", logits.shape)
    count = int(active.sum())
    if count == 0:

        def empty_rule(g: np.ndarray):
            return (np.zeros((rows, classes), dtype=DTYPE),)

        return record("cross_entropy", np.asarray(0.0), (logits,), empty_rule)

    lv = logits.data[active]
    shifted = lv - lv.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - log_norm
    picked = target[active]
    loss = -log_probs[np.arange(count), picked].mean()
    probs = np.exp(log_probs)

    def rule(g: np.ndarray):
        local = probs.copy()
        local[np.arange(count), picked] -= 1.0
        full = np.zeros((rows, classes), dtype=DTYPE)
        full[active] = local * (float(g.reshape(-1)[0]) / count)
        return (full,)

    return record("cross_entropy", np.asarray(loss), (logits,), rule)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    out = matmul(x, weight)
    return add(out, bias) if bias is not None else out
