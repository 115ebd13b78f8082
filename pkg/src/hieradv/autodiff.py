"""Reverse-mode automatic differentiation over dense float64 tensors.

The design is a classic tape: every primitive applied to differentiable
tensors records, on the tape its operands live on, a closure that maps the
output gradient to input-gradient contributions.  ``Tape.backward`` replays
those closures once, in reverse recording order, which makes gradients
deterministic and gives every registered leaf exactly one gradient (exact
zeros when the loss does not reach it).

A tape is single-writer and meant to live for one forward/backward episode.
Tensors are value objects; no operation mutates an existing tensor's data.
"""

from __future__ import annotations

import weakref
from typing import Callable, Sequence

import numpy as np

DTYPE = np.float64

# L2 norms below this are treated as exactly zero when scaling perturbation
# directions; dividing by anything smaller would only amplify noise.
DEGENERATE_NORM = 1e-12

GradientMap = dict[str, np.ndarray]


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class Tensor:
    """A dense float64 array, optionally recorded on a :class:`Tape`.

    ``requires_grad`` is true for leaves, watched tensors, and anything
    computed from them; only such tensors receive gradients.
    """

    __slots__ = ("data", "grad", "_tape_ref", "requires_grad", "name")

    def __init__(self, data, tape: "Tape | None" = None, requires_grad: bool = False,
                 name: str | None = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad: np.ndarray | None = None
        # Weak reference: the tape already owns its tensors through the node
        # list, and a strong back-pointer would create reference cycles that
        # keep whole tapes (and every intermediate array) alive until a
        # generational collection.
        self._tape_ref = None if tape is None else weakref.ref(tape)
        self.requires_grad = bool(requires_grad)
        self.name = name

    @property
    def tape(self) -> "Tape | None":
        return self._tape_ref() if self._tape_ref is not None else None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def _accumulate(self, g: np.ndarray) -> None:
        self.grad = g if self.grad is None else self.grad + g

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __sub__(self, other):
        return add(self, -_as_tensor(other))

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag})"


class Tape:
    """Ordered record of differentiable operations plus a leaf registry."""

    def __init__(self):
        self._nodes: list[tuple[Tensor, Callable[[np.ndarray], None]]] = []
        self._registry: dict[str, Tensor] = {}

    def leaf(self, data, name: str) -> Tensor:
        """Create a differentiable leaf registered under ``name``."""
        if name in self._registry:
            raise ValueError(f"leaf name already registered: {name!r}")
        t = Tensor(data, tape=self, requires_grad=True, name=name)
        self._registry[name] = t
        return t

    def constant(self, data) -> Tensor:
        """Wrap data as a non-differentiable tensor on this tape."""
        return Tensor(data, tape=self, requires_grad=False)

    def watch(self, tensor: Tensor, name: str) -> Tensor:
        """Register an intermediate tensor as an additional gradient target.

        The tensor keeps its place in the graph, so gradients still flow
        through it to upstream leaves; ``backward`` additionally reports the
        gradient with respect to it under ``name``.
        """
        if tensor.tape is not self:
            raise ValueError("cannot watch a tensor that lives on another tape")
        if name in self._registry:
            raise ValueError(f"leaf name already registered: {name!r}")
        tensor.requires_grad = True
        tensor.name = name
        self._registry[name] = tensor
        return tensor

    def registered(self) -> dict[str, Tensor]:
        return dict(self._registry)

    def _record(self, out: Tensor, backward_fn: Callable[[np.ndarray], None]) -> None:
        self._nodes.append((out, backward_fn))

    def backward(self, loss: Tensor) -> GradientMap:
        """Return d(loss)/d(leaf) for every registered leaf and watched tensor.

        May be called repeatedly on the same tape (gradients are reset at the
        start of every sweep); repeated sweeps are bitwise identical.
        """
        if loss.tape is not self:
            raise ValueError("loss was not produced on this tape")
        if loss.shape != ():
            raise ValueError(f"backward expects a scalar loss, got shape {loss.shape}")
        for out, _ in self._nodes:
            out.grad = None
        for t in self._registry.values():
            t.grad = np.zeros(t.shape, dtype=DTYPE)
        loss._accumulate(np.ones((), dtype=DTYPE))
        for out, backward_fn in reversed(self._nodes):
            if out.grad is not None:
                backward_fn(out.grad)
        return {name: t.grad.copy() for name, t in self._registry.items()}

    def grad_wrt(self, loss: Tensor, target: Tensor) -> np.ndarray:
        """Gradient of ``loss`` with respect to one registered tensor."""
        if target.name is None or self._registry.get(target.name) is not target:
            raise ValueError("target is not a registered leaf of this tape")
        return self.backward(loss)[target.name]


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result_tape(*tensors: Tensor) -> Tape | None:
    tape = None
    for t in tensors:
        if t.tape is not None:
            if tape is None:
                tape = t.tape
            elif tape is not t.tape:
                raise ValueError("operands were recorded on different tapes")
    return tape


def _emit(tape: Tape | None, data: np.ndarray, requires_grad: bool,
          backward_fn: Callable[[np.ndarray], None]) -> Tensor:
    out = Tensor(data, tape=tape, requires_grad=requires_grad)
    if requires_grad:
        if tape is None:
            raise ValueError("differentiable result requires a tape")
        tape._record(out, backward_fn)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape``, undoing numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def add(a, b) -> Tensor:
    """Elementwise addition with numpy broadcasting."""
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} do not broadcast") from exc
    tape = _result_tape(a, b)
    requires = a.requires_grad or b.requires_grad

    def backward_fn(g: np.ndarray) -> None:
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _emit(tape, a.data + b.data, requires, backward_fn)


def mul(a, b) -> Tensor:
    """Elementwise (Hadamard) product with numpy broadcasting."""
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} do not broadcast") from exc
    tape = _result_tape(a, b)
    requires = a.requires_grad or b.requires_grad

    def backward_fn(g: np.ndarray) -> None:
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _emit(tape, a.data * b.data, requires, backward_fn)


def scale(t, factor: float) -> Tensor:
    """Multiply by a plain Python scalar (recorded, but the scalar is constant)."""
    t = _as_tensor(t)
    factor = float(factor)

    def backward_fn(g: np.ndarray) -> None:
        t._accumulate(factor * g)

    return _emit(t.tape, factor * t.data, t.requires_grad, backward_fn)


def matmul(a, b) -> Tensor:
    """2-D matrix product."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    tape = _result_tape(a, b)
    requires = a.requires_grad or b.requires_grad

    def backward_fn(g: np.ndarray) -> None:
        if a.requires_grad:
            a._accumulate(g @ b.data.T)
        if b.requires_grad:
            b._accumulate(a.data.T @ g)

    return _emit(tape, a.data @ b.data, requires, backward_fn)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    """Concatenate along ``axis``."""
    ts = [_as_tensor(t) for t in tensors]
    if not ts:
        raise ValueError("concat requires at least one tensor")
    ref = ts[0].shape
    for t in ts[1:]:
        if t.ndim != len(ref) or any(
            t.shape[i] != ref[i] for i in range(t.ndim) if i != axis % t.ndim
        ):
            raise ShapeError(
                f"concat: shapes {[t.shape for t in ts]} differ off axis {axis}"
            )
    tape = _result_tape(*ts)
    requires = any(t.requires_grad for t in ts)
    sizes = [t.shape[axis] for t in ts]

    def backward_fn(g: np.ndarray) -> None:
        start = 0
        for t, n in zip(ts, sizes):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(start, start + n)
                t._accumulate(g[tuple(sl)])
            start += n

    return _emit(tape, np.concatenate([t.data for t in ts], axis=axis), requires, backward_fn)


def sigmoid(t) -> Tensor:
    """Logistic function, computed in the numerically stable branch form."""
    t = _as_tensor(t)
    x = t.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)

    def backward_fn(g: np.ndarray) -> None:
        t._accumulate(g * out * (1.0 - out))

    return _emit(t.tape, out, t.requires_grad, backward_fn)


def tanh(t) -> Tensor:
    t = _as_tensor(t)
    out = np.tanh(t.data)

    def backward_fn(g: np.ndarray) -> None:
        t._accumulate(g * (1.0 - out * out))

    return _emit(t.tape, out, t.requires_grad, backward_fn)


def softmax(t, axis: int = -1) -> Tensor:
    """Softmax along ``axis`` (rows by default), shifted for stability."""
    t = _as_tensor(t)
    z = t.data - t.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward_fn(g: np.ndarray) -> None:
        inner = (g * out).sum(axis=axis, keepdims=True)
        t._accumulate(out * (g - inner))

    return _emit(t.tape, out, t.requires_grad, backward_fn)


def log(t) -> Tensor:
    """Natural logarithm; rejects non-positive entries to keep results finite."""
    t = _as_tensor(t)
    if not (t.data > 0).all():
        raise ValueError("log requires strictly positive entries")
    out = np.log(t.data)

    def backward_fn(g: np.ndarray) -> None:
        t._accumulate(g / t.data)

    return _emit(t.tape, out, t.requires_grad, backward_fn)


def clip(t, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; gradient passes through wherever lo <= x <= hi."""
    t = _as_tensor(t)
    if not lo < hi:
        raise ValueError(f"clip: lo must be below hi, got [{lo}, {hi}]")
    out = np.clip(t.data, lo, hi)
    passthrough = (t.data >= lo) & (t.data <= hi)

    def backward_fn(g: np.ndarray) -> None:
        t._accumulate(g * passthrough)

    return _emit(t.tape, out, t.requires_grad, backward_fn)


def mean(t, axis: int | None = None) -> Tensor:
    """Arithmetic mean over one axis, or over all entries when axis is None."""
    t = _as_tensor(t)
    if axis is not None and not -t.ndim <= axis < t.ndim:
        raise ShapeError(f"mean: axis {axis} out of range for shape {t.shape}")
    out = t.data.mean(axis=axis)
    n = t.size if axis is None else t.shape[axis]

    def backward_fn(g: np.ndarray) -> None:
        if axis is None:
            t._accumulate(np.full(t.shape, g / n, dtype=DTYPE))
        else:
            t._accumulate(np.broadcast_to(np.expand_dims(g / n, axis), t.shape))

    return _emit(t.tape, out, t.requires_grad, backward_fn)


def sum_(t, axis: int | None = None) -> Tensor:
    """Sum over one axis, or over all entries when axis is None."""
    t = _as_tensor(t)
    if axis is not None and not -t.ndim <= axis < t.ndim:
        raise ShapeError(f"sum: axis {axis} out of range for shape {t.shape}")
    out = t.data.sum(axis=axis)

    def backward_fn(g: np.ndarray) -> None:
        if axis is None:
            t._accumulate(np.full(t.shape, g, dtype=DTYPE))
        else:
            t._accumulate(np.broadcast_to(np.expand_dims(g, axis), t.shape))

    return _emit(t.tape, out, t.requires_grad, backward_fn)


def narrow(t, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice of ``length`` entries along ``axis`` starting at ``start``."""
    t = _as_tensor(t)
    if not 0 <= axis < t.ndim:
        raise ShapeError(f"narrow: axis {axis} out of range for shape {t.shape}")
    if length < 1 or start < 0 or start + length > t.shape[axis]:
        raise ShapeError(
            f"narrow: slice [{start}, {start + length}) invalid for axis {axis} of shape {t.shape}"
        )
    sl = [slice(None)] * t.ndim
    sl[axis] = slice(start, start + length)
    index = tuple(sl)

    def backward_fn(g: np.ndarray) -> None:
        full = np.zeros(t.shape, dtype=DTYPE)
        full[index] = g
        t._accumulate(full)

    return _emit(t.tape, t.data[index], t.requires_grad, backward_fn)


def select_rows(t, indices) -> Tensor:
    """Gather rows of a 2-D tensor; gradient scatter-adds into the source rows."""
    t = _as_tensor(t)
    if t.ndim != 2:
        raise ShapeError(f"select_rows: expected a 2-D tensor, got shape {t.shape}")
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= t.shape[0]):
        bad = idx[(idx < 0) | (idx >= t.shape[0])][0]
        raise ValueError(f"select_rows: index {bad} out of range for {t.shape[0]} rows")
    cols = t.shape[1]
    flat_idx = idx.ravel()
    # Duplicate indices need the unbuffered scatter-add; unique ones can use
    # plain assignment, which is much cheaper.
    unique = np.unique(flat_idx).size == flat_idx.size

    def backward_fn(g: np.ndarray) -> None:
        full = np.zeros(t.shape, dtype=DTYPE)
        if unique:
            full[flat_idx] = g.reshape(-1, cols)
        else:
            np.add.at(full, flat_idx, g.reshape(-1, cols))
        t._accumulate(full)

    return _emit(t.tape, t.data[idx], t.requires_grad, backward_fn)


def scatter_rows(t, indices, num_rows: int) -> Tensor:
    """Place the rows of a 2-D tensor into a zero block of ``num_rows`` rows.

    ``indices`` must be unique; rows not addressed stay exactly zero.  This is
    the inverse of :func:`select_rows` for unique indices (gradient gathers).
    """
    t = _as_tensor(t)
    if t.ndim != 2:
        raise ShapeError(f"scatter_rows: expected a 2-D tensor, got shape {t.shape}")
    idx = np.asarray(indices, dtype=np.int64).ravel()
    if idx.shape[0] != t.shape[0]:
        raise ShapeError(
            f"scatter_rows: {idx.shape[0]} indices for {t.shape[0]} rows"
        )
    if idx.size:
        if idx.min() < 0 or idx.max() >= num_rows:
            raise ValueError(f"scatter_rows: index out of range for {num_rows} rows")
        if np.unique(idx).size != idx.size:
            raise ValueError("scatter_rows: indices must be unique")
    data = np.zeros((num_rows, t.shape[1]), dtype=DTYPE)
    data[idx] = t.data

    def backward_fn(g: np.ndarray) -> None:
        t._accumulate(g[idx])

    return _emit(t.tape, data, t.requires_grad, backward_fn)


def reshape(t, shape: Sequence[int]) -> Tensor:
    t = _as_tensor(t)
    shape = tuple(shape)
    try:
        data = t.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot view {t.shape} as {shape}") from exc

    def backward_fn(g: np.ndarray) -> None:
        t._accumulate(g.reshape(t.shape))

    return _emit(t.tape, data, t.requires_grad, backward_fn)


def transpose(t) -> Tensor:
    """2-D transpose."""
    t = _as_tensor(t)
    if t.ndim != 2:
        raise ShapeError(f"transpose: expected a 2-D tensor, got shape {t.shape}")

    def backward_fn(g: np.ndarray) -> None:
        t._accumulate(g.T)

    return _emit(t.tape, t.data.T, t.requires_grad, backward_fn)


def normalize_scale(g, epsilon: float) -> np.ndarray:
    """Scale ``g`` to L2 norm ``epsilon`` over all entries.

    Degenerate inputs (norm below ``DEGENERATE_NORM``) map to the zero
    tensor: a vanishing gradient direction carries no usable ascent
    information, and a zero perturbation degrades gracefully to the
    unperturbed pass.
    """
    if epsilon < 0:
        raise ValueError(f"normalize_scale: epsilon must be nonnegative, got {epsilon}")
    arr = np.asarray(g.data if isinstance(g, Tensor) else g, dtype=DTYPE)
    norm = float(np.linalg.norm(arr.ravel()))
    if norm < DEGENERATE_NORM:
        return np.zeros_like(arr)
    return (epsilon / norm) * arr
