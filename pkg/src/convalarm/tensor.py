"""Dense float tensors with tape-based reverse-mode automatic differentiation.

The engine is deliberately small: a :class:`Tensor` wraps a numpy array plus
an optional gradient slot, and every differentiable operation executed inside
a ``with Tape() as tape:`` block appends one node to the tape, in execution
order.  :func:`backward` replays the nodes in reverse to populate ``grad`` on
every tensor that ``requires_grad`` and is reachable from the loss.

Training runs in float32; float64 inputs are accepted and propagated so that
high-precision finite-difference checks can reuse the same code path.
Outside a tape no recording happens, which doubles as inference mode.
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "ShapeError",
    "Tensor",
    "Tape",
    "backward",
    "add",
    "sub",
    "mul",
    "neg",
    "exp",
    "log",
    "clamp",
    "sigmoid",
    "relu",
    "elu",
    "elementwise",
    "linear",
    "reshape",
    "flatten",
    "reshape_split_stack",
    "slice_cols",
    "sum_all",
    "mean_all",
    "sum_axes",
    "mean_axes",
    "mse",
    "per_sample_mse",
    "bce",
    "BCE_EPS",
]

BCE_EPS = 1e-7


class ShapeError(ValueError):
    """Operand shapes violate an operation's contract."""


class Tensor:
    """N-dimensional float tensor stored row-major, with a gradient slot.

    ``requires_grad`` marks leaves whose gradient the caller wants; it is
    propagated automatically to op outputs recorded on a tape.  ``grad`` is
    ``None`` until a backward pass populates it and always matches ``data``
    in shape.  ``data`` is treated as immutable by the ops; optimizers
    rebind it wholesale.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{flag})"

    # small operator sugar; the functional forms below are the real API
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)


class _Node:
    __slots__ = ("op", "inputs", "output", "backward")

    def __init__(self, op: str, inputs: tuple[Tensor, ...], output: Tensor,
                 backward: Callable[[np.ndarray], tuple]):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward = backward


class _TapeStack(threading.local):
    # per-thread stack: independent tapes may run on independent threads
    def __init__(self):
        self.stack: list["Tape"] = []


_TAPES = _TapeStack()


class Tape:
    """Execution-ordered record of differentiable operations.

    One tape serves exactly one backward pass; replaying its nodes in
    reverse execution order is a valid reverse topological order because
    every op's inputs necessarily exist before its output.  A tape is
    active only on the thread that entered it.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.consumed = False
        self._output_ids: set[int] = set()

    def __enter__(self) -> "Tape":
        _TAPES.stack.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _TAPES.stack.pop()
        if popped is not self:  # pragma: no cover - misuse guard
            raise RuntimeError("tape context exited out of order")
        return False


def _active_tape() -> Tape | None:
    return _TAPES.stack[-1] if _TAPES.stack else None


def apply_op(op: str, inputs: Sequence[Tensor], out_data: np.ndarray,
             backward_fn: Callable[[np.ndarray], tuple]) -> Tensor:
    """Wrap an op result, recording it on the active tape when grads flow."""
    out = Tensor(out_data)
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.nodes.append(_Node(op, tuple(inputs), out, backward_fn))
        tape._output_ids.add(id(out))
    return out


def backward(loss: Tensor, tape: Tape) -> None:
    """Populate ``grad`` on every ``requires_grad`` tensor reachable from ``loss``.

    The loss must be a scalar produced on ``tape``; the tape is consumed.
    Gradients accumulate into existing ``grad`` arrays (callers reset them
    between steps).
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if tape.consumed:
        raise RuntimeError("tape already consumed by a previous backward pass")
    if id(loss) not in tape._output_ids:
        raise ValueError("loss was not produced on this tape")
    tape.consumed = True

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    touched: dict[int, Tensor] = {id(loss): loss}
    for node in reversed(tape.nodes):
        g_out = grads.get(id(node.output))
        if g_out is None:
            continue  # branch not on a path to the loss
        for t, g in zip(node.inputs, node.backward(g_out)):
            if g is None or not t.requires_grad:
                continue
            held = grads.get(id(t))
            grads[id(t)] = g if held is None else held + g
            touched[id(t)] = t
    for tid, t in touched.items():
        g = grads[tid]
        t.grad = g if t.grad is None else t.grad + g


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else np.float32
    return Tensor(np.asarray(x, dtype=dtype))


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient over broadcast axes back down to ``shape``."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape))
                 if s == 1 and g != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# arithmetic


def add(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)
    out = a.data + b.data

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return apply_op("add", (a, b), out, bwd)


def sub(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)
    out = a.data - b.data

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return apply_op("sub", (a, b), out, bwd)


def mul(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)
    out = a.data * b.data
    ad, bd = a.data, b.data

    def bwd(g):
        return _unbroadcast(g * bd, a.shape), _unbroadcast(g * ad, b.shape)

    return apply_op("mul", (a, b), out, bwd)


def neg(x: Tensor) -> Tensor:
    def bwd(g):
        return (-g,)

    return apply_op("neg", (x,), -x.data, bwd)


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)

    def bwd(g):
        return (g * y,)

    return apply_op("exp", (x,), y, bwd)


def log(x: Tensor) -> Tensor:
    xd = x.data

    def bwd(g):
        return (g / xd,)

    return apply_op("log", (x,), np.log(xd), bwd)


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    # gradient passes through wherever the value was not clipped
    mask = (x.data >= lo) & (x.data <= hi)

    def bwd(g):
        return (g * mask,)

    return apply_op("clamp", (x,), np.clip(x.data, lo, hi), bwd)


# ---------------------------------------------------------------------------
# activations


def sigmoid(x: Tensor) -> Tensor:
    xd = x.data
    y = np.empty_like(xd)
    pos = xd >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-xd[pos]))
    e = np.exp(xd[~pos])
    y[~pos] = e / (1.0 + e)

    def bwd(g):
        return (g * y * (1.0 - y),)

    return apply_op("sigmoid", (x,), y, bwd)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def bwd(g):
        return (g * mask,)

    return apply_op("relu", (x,), np.maximum(x.data, 0), bwd)


def elu(x: Tensor) -> Tensor:
    """elu(x) = x for x > 0, exp(x) - 1 otherwise (alpha = 1)."""
    xd = x.data
    y = np.where(xd > 0, xd, np.expm1(xd))

    def bwd(g):
        # for x <= 0 the local derivative exp(x) equals y + 1
        return (g * np.where(xd > 0, np.asarray(1.0, dtype=y.dtype), y + 1.0),)

    return apply_op("elu", (x,), y, bwd)


_ELEMENTWISE = {"elu": elu, "sigmoid": sigmoid, "relu": relu}


def elementwise(name: str, x: Tensor) -> Tensor:
    """Apply a named activation: one of ``elu``, ``sigmoid``, ``relu``."""
    try:
        fn = _ELEMENTWISE[name]
    except KeyError:
        raise ValueError(f"unknown elementwise op {name!r}; "
                         f"expected one of {sorted(_ELEMENTWISE)}") from None
    return fn(x)


# ---------------------------------------------------------------------------
# linear algebra and shape ops


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Affine map ``x @ w + b`` for ``x`` of shape (N, D), ``w`` (D, M), ``b`` (M,)."""
    if x.ndim != 2 or w.ndim != 2:
        raise ShapeError(f"linear expects 2-D operands, got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[0]:
        raise ShapeError(f"linear: input {x.shape} does not match weight {w.shape}")
    if b.shape != (w.shape[1],):
        raise ShapeError(f"linear: bias {b.shape} does not match weight {w.shape}")
    xd, wd = x.data, w.data
    out = xd @ wd + b.data

    def bwd(g):
        return g @ wd.T, xd.T @ g, g.sum(axis=0)

    return apply_op("linear", (x, w, b), out, bwd)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"cannot reshape {x.shape} ({x.size} elements) to {shape}") from None
    in_shape = x.shape

    def bwd(g):
        return (g.reshape(in_shape),)

    return apply_op("reshape", (x,), out, bwd)


def flatten(x: Tensor) -> Tensor:
    """Collapse all but the leading (batch) axis."""
    return reshape(x, (x.shape[0], -1 if x.ndim > 1 else 1))


def reshape_split_stack(x: Tensor, k: int) -> Tensor:
    """Split each row of an (N, D) tensor into ``k`` equal parts stacked as channels.

    Row ``r`` of the output's k-axis holds input elements ``[r*D/k, (r+1)*D/k)``;
    flattening back restores the original exactly.
    """
    if x.ndim != 2:
        raise ShapeError(f"reshape_split_stack expects an (N, D) tensor, got {x.shape}")
    n, d = x.shape
    if k < 1 or d % k != 0:
        raise ShapeError(f"split count k={k} does not divide feature width D={d}")
    return reshape(x, (n, k, d // k))


def slice_cols(x: Tensor, start: int, stop: int) -> Tensor:
    """Slice columns [start, stop) of a 2-D tensor (copying)."""
    if x.ndim != 2:
        raise ShapeError(f"slice_cols expects a 2-D tensor, got {x.shape}")
    out = x.data[:, start:stop].copy()
    in_shape = x.shape

    def bwd(g):
        gx = np.zeros(in_shape, dtype=g.dtype)
        gx[:, start:stop] = g
        return (gx,)

    return apply_op("slice_cols", (x,), out, bwd)


# ---------------------------------------------------------------------------
# reductions


def sum_all(x: Tensor) -> Tensor:
    in_shape, dtype = x.shape, x.dtype

    def bwd(g):
        return (np.broadcast_to(g, in_shape).astype(dtype, copy=True),)

    return apply_op("sum", (x,), x.data.sum(), bwd)


def mean_all(x: Tensor) -> Tensor:
    in_shape, n = x.shape, x.size

    def bwd(g):
        return (np.broadcast_to(g / n, in_shape).copy(),)

    return apply_op("mean", (x,), x.data.mean(), bwd)


def _normalize_axes(axes, ndim: int) -> tuple[int, ...]:
    if isinstance(axes, int):
        axes = (axes,)
    return tuple(sorted(a % ndim for a in axes))


def sum_axes(x: Tensor, axes) -> Tensor:
    axes = _normalize_axes(axes, x.ndim)
    in_shape = x.shape

    def bwd(g):
        return (np.broadcast_to(np.expand_dims(g, axes), in_shape).copy(),)

    return apply_op("sum_axes", (x,), x.data.sum(axis=axes), bwd)


def mean_axes(x: Tensor, axes) -> Tensor:
    axes = _normalize_axes(axes, x.ndim)
    in_shape = x.shape
    count = int(np.prod([in_shape[a] for a in axes]))

    def bwd(g):
        return (np.broadcast_to(np.expand_dims(g / count, axes), in_shape).copy(),)

    return apply_op("mean_axes", (x,), x.data.mean(axis=axes), bwd)


# ---------------------------------------------------------------------------
# losses


def mse(x: Tensor, xhat: Tensor) -> Tensor:
    """Mean over all elements of the squared difference."""
    if x.shape != xhat.shape:
        raise ShapeError(f"mse: shapes {x.shape} and {xhat.shape} differ")
    d = sub(x, xhat)
    return mean_all(mul(d, d))


def per_sample_mse(x: Tensor, xhat: Tensor) -> Tensor:
    """Per-sample mean squared difference, reduced over all non-batch axes."""
    if x.shape != xhat.shape:
        raise ShapeError(f"per_sample_mse: shapes {x.shape} and {xhat.shape} differ")
    if x.ndim < 2:
        raise ShapeError(f"per_sample_mse expects a batched tensor, got {x.shape}")
    d = sub(x, xhat)
    return mean_axes(mul(d, d), tuple(range(1, x.ndim)))


def bce(y, yhat: Tensor) -> Tensor:
    """Mean binary cross-entropy; predictions are clamped to [eps, 1 - eps].

    ``y`` holds hard 0/1 targets and gets no gradient; ``yhat`` must lie in
    (0, 1) (a final sigmoid guarantees this).
    """
    y = _as_tensor(y, like=yhat)
    if y.shape != yhat.shape:
        raise ShapeError(f"bce: shapes {y.shape} and {yhat.shape} differ")
    p = clamp(yhat, BCE_EPS, 1.0 - BCE_EPS)
    yd = Tensor(y.data)  # constant copy: targets never receive gradient
    one = Tensor(np.asarray(1.0, dtype=yhat.dtype))
    term = add(mul(yd, log(p)), mul(sub(one, yd), log(sub(one, p))))
    return neg(mean_all(term))
