"""
Dense tensors with reverse-mode differentiation.

Every operation below computes its value with numpy and, when a Tape is
active and one of its inputs requires a gradient, records a backward rule on
that tape. Outside a Tape the same code runs as plain inference.

    with Tape() as tape:
        loss = tensor.sum(tensor.mul(x, x))
        tape.backward(loss)
    x.grad  # dL/dx

Gradients accumulate into `grad`; callers reset them between optimizer steps.
"""

import threading
from contextlib import contextmanager
from typing import Callable, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np

from control.errors import ContractError, EmbeddingIndexError, ShapeError


_state = threading.local()
_DEFAULT_DTYPE = np.float32
_DEBUG_CHECKS = False


def set_default_dtype(dtype):
    global _DEFAULT_DTYPE
    _DEFAULT_DTYPE = np.dtype(dtype).type


def get_default_dtype():
    return _DEFAULT_DTYPE


@contextmanager
def default_dtype(dtype):
    previous = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(previous)


def set_debug_checks(enabled: bool):
    """Verify every operation output is finite (used by the test-suite)."""
    global _DEBUG_CHECKS
    _DEBUG_CHECKS = bool(enabled)


class Tensor:
    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str = None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype.kind == 'f' else _DEFAULT_DTYPE
        self.data = np.ascontiguousarray(data, dtype=dtype)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._tape = None

    @property
    def shape(self) -> Tuple[int, ...]:
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

    def is_leaf(self) -> bool:
        return self._tape is None

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f'item() needs a single element, shape is {self.shape}')
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        label = f', name={self.name!r}' if self.name else ''
        return f'Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad}{label})'

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def constant(data, like: Tensor = None) -> Tensor:
    dtype = like.dtype if like is not None else None
    if dtype is None and not (isinstance(data, np.ndarray) and data.dtype.kind == 'f'):
        dtype = _DEFAULT_DTYPE
    return Tensor(np.asarray(data, dtype=dtype), requires_grad=False)


def _as_tensor(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=like.dtype), requires_grad=False)


# ------------------------------- tape --------------------------------

class TapeEntry(NamedTuple):
    inputs: Tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]
    op: str


def _tape_stack() -> List['Tape']:
    if not hasattr(_state, 'tapes'):
        _state.tapes = []
    return _state.tapes


def current_tape() -> Optional['Tape']:
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tape:
    """Ordered record of executed operations, confined to one thread."""

    def __init__(self):
        self.entries: List[TapeEntry] = []

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()
        return False

    def __len__(self):
        return len(self.entries)

    def record(self, op: str, inputs: Tuple[Tensor, ...], output: Tensor, backward_fn):
        output._tape = self
        output.requires_grad = True
        self.entries.append(TapeEntry(inputs, output, backward_fn, op))

    def backward(self, loss: Tensor):
        if loss.data.size != 1 or loss.ndim > 1:
            raise ContractError(f'backward needs a scalar loss, got shape {loss.shape}')
        if loss._tape is not self:
            if loss.is_leaf() and loss.requires_grad:
                _accumulate(loss, np.ones_like(loss.data))
                return
            raise ContractError('loss was not produced on this tape')

        pending = {id(loss): np.ones_like(loss.data)}
        for entry in reversed(self.entries):
            upstream = pending.pop(id(entry.output), None)
            if upstream is None:
                continue
            input_grads = entry.backward(upstream)
            for tensor, grad in zip(entry.inputs, input_grads):
                if grad is None or not tensor.requires_grad:
                    continue
                if tensor._tape is self:
                    key = id(tensor)
                    if key in pending:
                        pending[key] = pending[key] + grad
                    else:
                        pending[key] = grad
                else:
                    _accumulate(tensor, grad)


def _accumulate(tensor: Tensor, grad: np.ndarray):
    grad = np.asarray(grad, dtype=tensor.dtype).reshape(tensor.shape)
    if tensor.grad is None:
        tensor.grad = grad.copy()
    else:
        tensor.grad = tensor.grad + grad


def backward(loss: Tensor):
    """Populate grad of every requires_grad leaf reachable from loss."""
    tape = loss._tape
    if tape is None:
        if loss.requires_grad and loss.data.size == 1:
            _accumulate(loss, np.ones_like(loss.data))
            return
        raise ContractError('loss was not produced on a tape')
    tape.backward(loss)


def _finish(op: str, out_data: np.ndarray, inputs: Tuple[Tensor, ...], backward_fn) -> Tensor:
    if _DEBUG_CHECKS and not np.all(np.isfinite(out_data)):
        if all(np.all(np.isfinite(t.data)) for t in inputs):
            raise ContractError(f'{op} produced non-finite values from finite inputs')
    out = Tensor(out_data, dtype=out_data.dtype)
    tape = current_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        tape.record(op, inputs, out, backward_fn)
    return out


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if grad.shape == tuple(shape):
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> Tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f'{op}: shapes {a.shape} and {b.shape} do not broadcast')


# ----------------------------- elementwise -----------------------------

def add(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a = _as_tensor(a, b)
    b = _as_tensor(b, a)
    _broadcast_shape(a, b, 'add')

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _finish('add', a.data + b.data, (a, b), back)


def sub(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a = _as_tensor(a, b)
    b = _as_tensor(b, a)
    _broadcast_shape(a, b, 'sub')

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _finish('sub', a.data - b.data, (a, b), back)


def mul(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a = _as_tensor(a, b)
    b = _as_tensor(b, a)
    _broadcast_shape(a, b, 'mul')

    def back(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _finish('mul', a.data * b.data, (a, b), back)


def neg(a: Tensor) -> Tensor:
    return _finish('neg', -a.data, (a,), lambda g: (-g,))


def scale(a: Tensor, factor: float) -> Tensor:
    factor = a.dtype.type(factor)
    return _finish('scale', a.data * factor, (a,), lambda g: (g * factor,))


def relu(a: Tensor) -> Tensor:
    positive = a.data > 0
    return _finish('relu', np.where(positive, a.data, 0).astype(a.dtype), (a,),
                   lambda g: (g * positive,))


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    e = np.exp(-np.abs(x))
    y = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(a.dtype)
    return _finish('sigmoid', y, (a,), lambda g: (g * y * (1 - y),))


def log(a: Tensor, floor: float = 1e-12) -> Tensor:
    """Natural log clamped at `floor` so a zero probability gives a large finite value."""
    clamped = np.maximum(a.data, a.dtype.type(floor))
    inside = a.data > floor

    def back(g):
        return (np.where(inside, g / clamped, 0).astype(a.dtype),)

    return _finish('log', np.log(clamped), (a,), back)


# ------------------------------ structural ------------------------------

def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f'reshape: cannot view {a.shape} as {tuple(shape)}')
    return _finish('reshape', out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _finish('transpose', np.transpose(a.data, axes), (a,),
                   lambda g: (np.transpose(g, inverse),))


def swap_last(a: Tensor) -> Tensor:
    axes = list(range(a.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, axes)


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    axis = axis % a.ndim
    if start < 0 or start + length > a.shape[axis]:
        raise ShapeError(f'narrow: [{start}, {start + length}) outside axis {axis} of {a.shape}')
    index = [slice(None)] * a.ndim
    index[axis] = slice(start, start + length)
    index = tuple(index)

    def back(g):
        full = np.zeros(a.shape, dtype=a.dtype)
        full[index] = g
        return (full,)

    return _finish('narrow', a.data[index], (a,), back)


def concat_last_dim(tensors: Sequence[Tensor]) -> Tensor:
    tensors = tuple(tensors)
    if not tensors:
        raise ShapeError('concat_last_dim needs at least one tensor')
    lead = tensors[0].shape[:-1]
    for t in tensors[1:]:
        if t.shape[:-1] != lead:
            raise ShapeError(f'concat_last_dim: leading shapes {tensors[0].shape} and {t.shape} differ')
    widths = [t.shape[-1] for t in tensors]
    bounds = np.cumsum(widths)[:-1]

    def back(g):
        return tuple(np.split(g, bounds, axis=-1))

    return _finish('concat', np.concatenate([t.data for t in tensors], axis=-1), tensors, back)


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).astype(a.dtype),)

    return _finish('sum', np.asarray(out, dtype=a.dtype), (a,), back)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return scale(sum(a, axis=axis, keepdims=keepdims), 1.0 / float(count))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f'matmul needs matrices, got {a.shape} and {b.shape}')
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f'matmul inner dimensions differ: {a.shape} and {b.shape}')
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f'matmul batch dimensions do not broadcast: {a.shape} and {b.shape}')

    def back(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _finish('matmul', np.matmul(a.data, b.data), (a, b), back)


def embedding_lookup(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    rows = table.shape[0]
    bad = (ids < 0) | (ids >= rows)
    if np.any(bad):
        raise EmbeddingIndexError(int(ids[bad].reshape(-1)[0]), rows)

    def back(g):
        full = np.zeros(table.shape, dtype=table.dtype)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[-1]))
        return (full,)

    return _finish('embedding', table.data[ids], (table,), back)


def gather_last(a: Tensor, ids) -> Tensor:
    """out[..., i] = a[..., ids[..., i]] along the last axis."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim != a.ndim:
        ids = ids[..., None]
    if np.any(ids < 0) or np.any(ids >= a.shape[-1]):
        bad = ids[(ids < 0) | (ids >= a.shape[-1])].reshape(-1)[0]
        raise EmbeddingIndexError(int(bad), a.shape[-1])
    out = np.take_along_axis(a.data, ids, axis=-1)

    def back(g):
        full = np.zeros(a.shape, dtype=a.dtype)
        flat_rows = full.reshape(-1, a.shape[-1])
        # repeated ids must accumulate, hence add.at
        np.add.at(flat_rows,
                  (np.repeat(np.arange(flat_rows.shape[0]), ids.shape[-1]), ids.reshape(-1)),
                  g.reshape(-1))
        return (full,)

    return _finish('gather', out, (a,), back)


# ------------------------------ neural ------------------------------

def softmax(x: Tensor, axis: int = -1, mask=None) -> Tensor:
    """
    Normalized exponentials along `axis`.

    `mask` is a boolean array broadcastable to x where True marks a visible
    position; hidden positions come out exactly 0. A slice with no visible
    position is a contract violation.
    """
    data = x.data
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), data.shape)
        if not np.all(np.any(mask, axis=axis)):
            raise ContractError(f'softmax: a slice along axis {axis} is fully masked')
        data = np.where(mask, data, -np.inf)
    shifted = data - np.max(data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = (e / np.sum(e, axis=axis, keepdims=True)).astype(x.dtype)

    def back(g):
        return (y * (g - np.sum(g * y, axis=axis, keepdims=True)),)

    return _finish('softmax', y, (x,), back)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-6) -> Tensor:
    width = x.shape[-1]
    if gain.shape != (width,) or bias.shape != (width,):
        raise ShapeError(f'layer_norm: gain {gain.shape} / bias {bias.shape} do not match last dim of {x.shape}')
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out = xhat * gain.data + bias.data

    def back(g):
        dxhat = g * gain.data
        dx = inv / width * (width * dxhat
                            - dxhat.sum(axis=-1, keepdims=True)
                            - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True))
        lead = tuple(range(x.ndim - 1))
        return dx.astype(x.dtype), (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _finish('layer_norm', out.astype(x.dtype), (x, gain, bias), back)


def dropout(x: Tensor, p: float, training: bool, rng: np.random.Generator = None) -> Tensor:
    """Inverted dropout: kept units are scaled by 1/(1-p), inference is identity."""
    if not 0.0 <= p < 1.0:
        raise ContractError(f'dropout probability must be in [0, 1), got {p}')
    if not training or p == 0.0:
        return x
    if rng is None:
        raise ContractError('dropout in training mode needs a seeded generator')
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / x.dtype.type(1.0 - p)
    return _finish('dropout', x.data * keep, (x,), lambda g: (g * keep,))


# ------------------------------ checking ------------------------------

TensorArg = Union[Tensor, Sequence[Tensor]]


def finite_diff_check(f: Callable[[TensorArg], Tensor], x: TensorArg, h: float = 1e-5,
                      floor: float = 1e-8) -> float:
    """
    Worst relative error between the autodiff gradient of f at x and central
    differences (f(x+h e_i) - f(x-h e_i)) / 2h, using the denominator
    max(|analytic|, |numeric|, floor); gradients below the floor are
    compared absolutely. x may be one tensor or a list of them.
    """
    tensors = [x] if isinstance(x, Tensor) else list(x)
    for t in tensors:
        t.requires_grad = True
        t.grad = None

    with Tape() as tape:
        out = f(x)
        tape.backward(out)
    analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in tensors]

    worst = 0.0
    for t, grad in zip(tensors, analytic):
        flat = t.data.reshape(-1)
        grad = grad.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            plus = f(x).item()
            flat[i] = orig - h
            minus = f(x).item()
            flat[i] = orig
            numeric = (plus - minus) / (2.0 * h)
            a = float(grad[i])
            denom = max(abs(a), abs(numeric), floor)
            worst = max(worst, abs(a - numeric) / denom)
    for t in tensors:
        t.grad = None
    return worst
