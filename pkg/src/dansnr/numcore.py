"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations only record onto a :class:`Tape` while one is active and at least
one input requires a gradient; outside a tape the same functions act as plain
numpy kernels, which is what inference uses.

    with Tape() as tape:
        loss = total(mul(x, x))
    tape.backward(loss)
"""

from __future__ import annotations

import os
from typing import Callable, Sequence

import numpy as np

_DEBUG = os.environ.get("DANSNR_DEBUG", "") not in ("", "0")
_ACTIVE: list["Tape"] = []


def set_debug(flag: bool) -> None:
    """Toggle the non-finite trap that runs after every op."""
    global _DEBUG
    _DEBUG = bool(flag)


def debug_enabled() -> bool:
    return _DEBUG


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def zero_grad(self) -> None:
        self.grad = None

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def __repr__(self) -> str:
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"


class Tape:
    """Ordered record of differentiable ops for one forward pass."""

    def __init__(self):
        self.records: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self._consumed = False

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.remove(self)

    def __len__(self) -> int:
        return len(self.records)

    def backward(self, loss: Tensor) -> None:
        """Populate ``.grad`` on every input that requires it.

        Gradients accumulate into existing ``.grad`` arrays, so callers zero
        parameters between steps.
        """
        if self._consumed:
            raise RuntimeError("tape already consumed; run a fresh forward pass before backward")
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        self._consumed = True
        # intermediates keep their grads in a side table; leaves get .grad
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        produced = {id(out) for out, _, _ in self.records}
        for out, inputs, fn in reversed(self.records):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for inp, gi in zip(inputs, fn(g)):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in produced:
                    if key in grads:
                        grads[key] = grads[key] + gi
                    else:
                        grads[key] = gi
                elif inp.grad is None:
                    inp.grad = np.array(gi, dtype=np.float64)
                else:
                    inp.grad += gi
        if id(loss) in grads and loss.requires_grad and id(loss) not in produced:
            loss.grad = grads[id(loss)]


def _emit(data: np.ndarray, inputs: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    if _DEBUG and not np.all(np.isfinite(data)):
        raise FloatingPointError(f"non-finite output from {op}")
    needs = any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs and bool(_ACTIVE))
    if out.requires_grad:
        _ACTIVE[-1].records.append((out, tuple(inputs), backward))
    return out


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` over leading broadcast axes."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------- kernels


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``np.matmul`` semantics; a 2-D operand may pair with a stacked one."""
    if a.data.ndim < 2 or b.data.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    a_data, b_data = a.data, b.data

    def back(g):
        ga = g @ np.swapaxes(b_data, -1, -2) if a.requires_grad else None
        gb = np.swapaxes(a_data, -1, -2) @ g if b.requires_grad else None
        return (
            None if ga is None else _unbroadcast(ga, a_data.shape),
            None if gb is None else _unbroadcast(gb, b_data.shape),
        )

    return _emit(np.matmul(a_data, b_data), (a, b), back, "matmul")


def transpose(a: Tensor) -> Tensor:
    """Swap the last two axes."""
    if a.data.ndim < 2:
        raise ShapeError(f"transpose needs >= 2 dims, got {a.shape}")
    return _emit(np.swapaxes(a.data, -1, -2), (a,), lambda g: (np.swapaxes(g, -1, -2),), "transpose")


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum. ``b`` may also be a row bias matching ``a``'s last axis."""
    if a.shape != b.shape and not (b.data.ndim == 1 and a.shape[-1:] == b.shape):
        raise ShapeError(f"add shape mismatch: {a.shape} + {b.shape}")
    b_shape = b.shape
    return _emit(a.data + b.data, (a, b), lambda g: (g, _unbroadcast(g, b_shape)), "add")


def add_n(terms: Sequence[Tensor]) -> Tensor:
    out = terms[0]
    for t in terms[1:]:
        out = add(out, t)
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"sub shape mismatch: {a.shape} - {b.shape}")
    return _emit(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul shape mismatch: {a.shape} * {b.shape}")
    a_data, b_data = a.data, b.data
    return _emit(a_data * b_data, (a, b), lambda g: (g * b_data, g * a_data), "mul")


def scale(a: Tensor, c) -> Tensor:
    """Multiply by a constant scalar or a constant array broadcastable to ``a``."""
    c = np.asarray(c, dtype=np.float64)
    if c.ndim and np.broadcast_shapes(a.shape, c.shape) != a.shape:
        raise ShapeError(f"scale constant {c.shape} does not broadcast to {a.shape}")
    return _emit(a.data * c, (a,), lambda g: (g * c,), "scale")


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x))
    y = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _emit(y, (a,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def relu(a: Tensor) -> Tensor:
    pos = a.data > 0
    return _emit(np.where(pos, a.data, 0.0), (a,), lambda g: (g * pos,), "relu")


def softplus(a: Tensor) -> Tensor:
    """ln(1 + e^x), stable for large |x|."""
    x = a.data
    y = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))

    def back(g):
        e = np.exp(-np.abs(x))
        return (g * np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)),)

    return _emit(y, (a,), back, "softplus")


def softmax(a: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis with max subtraction.

    ``mask`` is boolean and broadcastable to ``a``; False entries get weight
    exactly 0 and are excluded from the normaliser.
    """
    x = a.data
    if mask is None:
        y = x.copy()
    else:
        mask = np.asarray(mask, dtype=bool)
        np.broadcast_shapes(mask.shape, x.shape)
        # checked before broadcasting; the rows of the broadcast mask are copies of these
        if not mask.any(axis=-1).all():
            raise ValueError("softmax row with every position masked")
        y = np.where(mask, x, -np.inf)
    y -= y.max(axis=-1, keepdims=True)
    np.exp(y, out=y)
    y /= y.sum(axis=-1, keepdims=True)

    def back(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _emit(y, (a,), back, "softmax")


def softmax_row(v: Tensor) -> Tensor:
    if v.data.ndim != 1:
        raise ShapeError(f"softmax_row expects a vector, got {v.shape}")
    return softmax(v)


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalise each vector along the last axis, then apply gain and bias."""
    d = a.shape[-1]
    if d < 2 or gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm shapes: x {a.shape}, gain {gain.shape}, bias {bias.shape}")
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    gd = gain.data

    def back(g):
        gx = g * gd
        dx = inv * (gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        return dx, _unbroadcast(g * xhat, (d,)), _unbroadcast(g, (d,))

    return _emit(xhat * gd + bias.data, (a, gain, bias), back, "layer_norm")


def concat_last(parts: Sequence[Tensor]) -> Tensor:
    lead = parts[0].shape[:-1]
    for p in parts:
        if p.shape[:-1] != lead:
            raise ShapeError(f"concat shape mismatch: {parts[0].shape} vs {p.shape}")
    cuts = np.cumsum([p.shape[-1] for p in parts])[:-1]
    out = np.concatenate([p.data for p in parts], axis=-1)
    return _emit(out, tuple(parts), lambda g: tuple(np.split(g, cuts, axis=-1)), "concat")


def split_heads(a: Tensor, heads: int) -> Tensor:
    """(..., n, d) -> (..., heads, n, d // heads), slicing the last axis in order."""
    *lead, n, d = a.shape
    if d % heads:
        raise ShapeError(f"cannot split last dim {d} of {a.shape} into {heads} heads")
    dh = d // heads
    out = np.moveaxis(a.data.reshape(*lead, n, heads, dh), -2, -3)

    def back(g):
        return (np.moveaxis(g, -3, -2).reshape(*lead, n, d),)

    return _emit(out, (a,), back, "split_heads")


def merge_heads(a: Tensor) -> Tensor:
    """Inverse of :func:`split_heads`: concatenates heads along the last axis."""
    *lead, h, n, dh = a.shape
    out = np.moveaxis(a.data, -3, -2).reshape(*lead, n, h * dh)

    def back(g):
        return (np.moveaxis(g.reshape(*lead, n, h, dh), -2, -3),)

    return _emit(out, (a,), back, "merge_heads")


def gather(table: Tensor, index: np.ndarray) -> Tensor:
    """Row lookup ``table[index]``; repeated rows accumulate gradient."""
    index = np.asarray(index, dtype=np.int64)
    rows = table.shape[0]
    if index.size and (index.min() < 0 or index.max() >= rows):
        raise IndexError(f"gather index out of range for table with {rows} rows")

    def back(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, index, g)
        return (gt,)

    return _emit(table.data[index], (table,), back, "gather")


def total(a: Tensor) -> Tensor:
    shape = a.shape
    return _emit(np.array(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, shape).copy(),), "sum")


def sum_last(a: Tensor) -> Tensor:
    shape = a.shape
    return _emit(a.data.sum(axis=-1), (a,), lambda g: (np.broadcast_to(g[..., None], shape).copy(),), "sum_last")


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    old = a.shape
    return _emit(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


# ---------------------------------------------------------------- checking


def grad_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    eps: float = 1e-5,
    coords: dict[int, np.ndarray] | None = None,
) -> float:
    """Max relative error between tape gradients and central differences.

    ``f`` is re-evaluated with each coordinate of each tensor in ``params``
    nudged by +/- ``eps``. ``coords`` optionally restricts the checked flat
    indices per parameter position.
    """
    for p in params:
        p.grad = None
        p.requires_grad = True
    with Tape() as tape:
        out = f()
    tape.backward(out)
    worst = 0.0
    for i, p in enumerate(params):
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad
        flat = p.data.reshape(-1)
        idx = range(flat.size) if coords is None or i not in coords else coords[i]
        for j in idx:
            orig = flat[j]
            flat[j] = orig + eps
            up = float(f().data)
            flat[j] = orig - eps
            down = float(f().data)
            flat[j] = orig
            num = (up - down) / (2 * eps)
            a = float(analytic.reshape(-1)[j])
            err = abs(a - num) / max(abs(a), abs(num), 1e-8)
            worst = max(worst, err)
    return worst
