"""Dense float64 tensors with reverse-mode autodiff on an execution-ordered tape.

The engine is intentionally small. Tensors wrap numpy arrays, every
differentiable primitive appends one entry to the module-level tape, and
``backward`` replays that tape once in reverse, accumulating gradients by
summation wherever a tensor fans out. There is no implicit broadcasting in
the elementwise ops; shape changes go through explicit ``tile`` / ``reshape``
/ ``concat`` calls. All arithmetic is float64. Binary tensor files use the
"RTFM" container (float32 payload, see ``write_tensor``).

Randomness everywhere in the package comes from numpy's Philox generator, a
counter-based RNG keyed by ``(seed, stream)``, so identical seeds reproduce
identical draws regardless of how many values other streams consumed.
"""
from __future__ import annotations

import struct
from contextlib import contextmanager
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor", "Tape", "TensorFormatError", "create", "zeros",
    "add", "sub", "mul", "scale", "add_bias", "matmul", "relu", "absolute",
    "softmax", "concat", "reshape", "transpose", "tile", "reduce_sum",
    "backward", "no_grad", "active_tape",
    "Adam", "xavier_init", "make_rng",
    "read_tensor", "write_tensor",
]


class TensorFormatError(ValueError):
    """Raised when a binary tensor file is malformed or truncated."""


class Tensor:
    """A dense float64 array plus an optional gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
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

    def item(self) -> float:
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    # Convenience operators. Elementwise ops are strict about shapes;
    # scalars go through `scale`.
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return NotImplemented

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / float(other))
        return NotImplemented

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, shape) -> "Tensor":
        return reshape(self, shape)

    def __repr__(self) -> str:
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"


# --------------------------------------------------------------------------
# Tape machinery

class Tape:
    """Execution-ordered record of differentiable primitive applications.

    Each entry is ``(output, inputs, backward_fn)`` where ``backward_fn``
    maps the output gradient to a tuple of input gradients (``None`` for
    inputs that need none). Replaying entries in reverse visits every
    operation exactly once, after all consumers of its output.
    """

    __slots__ = ("entries",)

    def __init__(self):
        self.entries: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []

    def __len__(self) -> int:
        return len(self.entries)

    def clear(self) -> None:
        self.entries.clear()


_TAPE = Tape()
_GRAD_ENABLED = True


def active_tape() -> Tape:
    return _TAPE


@contextmanager
def no_grad():
    """Disable tape recording inside the block (forward-only evaluation)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def recording(*tensors: Tensor) -> bool:
    return _GRAD_ENABLED and any(t.requires_grad for t in tensors)


def record(out: Tensor, inputs: tuple[Tensor, ...], backward_fn: Callable) -> Tensor:
    """Mark ``out`` as differentiable and push one tape entry."""
    out.requires_grad = True
    _TAPE.entries.append((out, inputs, backward_fn))
    return out


def backward(loss: Tensor) -> None:
    """Reverse-replay the active tape from a scalar loss.

    Gradients accumulate into every tensor with ``requires_grad``. The tape
    is cleared afterwards, so each recorded graph supports one backward pass.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss is not connected to the active tape")
    loss.grad = np.ones_like(loss.data)
    for out, inputs, fn in reversed(_TAPE.entries):
        g = out.grad
        if g is None:
            continue
        grads = fn(g)
        for t, dt in zip(inputs, grads):
            if dt is None or not t.requires_grad:
                continue
            # Never mutate in place: `dt` may alias the output gradient.
            t.grad = dt if t.grad is None else t.grad + dt
    _TAPE.clear()


# --------------------------------------------------------------------------
# Construction

def create(shape: Sequence[int], fill=0.0, requires_grad: bool = False) -> Tensor:
    """Build a tensor of ``shape`` from a scalar fill or a flat value list."""
    shape = tuple(int(s) for s in shape)
    if any(s < 0 for s in shape):
        raise ValueError(f"negative extent in shape {shape}")
    if np.isscalar(fill):
        data = np.full(shape, float(fill))
    else:
        values = np.asarray(fill, dtype=np.float64).ravel()
        count = int(np.prod(shape)) if shape else 1
        if values.size != count:
            raise ValueError(
                f"fill has {values.size} values, shape {shape} needs {count}")
        data = values.reshape(shape)
    return Tensor(data, requires_grad)


def zeros(shape: Sequence[int], requires_grad: bool = False) -> Tensor:
    return create(shape, 0.0, requires_grad)


# --------------------------------------------------------------------------
# Elementwise primitives

def _check_same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("add", a, b)
    out = Tensor(a.data + b.data)
    if recording(a, b):
        record(out, (a, b), lambda g: (g, g))
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("sub", a, b)
    out = Tensor(a.data - b.data)
    if recording(a, b):
        record(out, (a, b), lambda g: (g, -g))
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("mul", a, b)
    out = Tensor(a.data * b.data)
    if recording(a, b):
        record(out, (a, b), lambda g: (g * b.data, g * a.data))
    return out


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    out = Tensor(x.data * c)
    if recording(x):
        record(out, (x,), lambda g: (g * c,))
    return out


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add a per-channel bias along the last axis (the one sanctioned broadcast)."""
    if b.ndim != 1 or b.shape[0] != x.shape[-1]:
        raise ValueError(f"add_bias: bias {b.shape} does not match channels of {x.shape}")
    out = Tensor(x.data + b.data)
    if recording(x, b):
        axes = tuple(range(x.ndim - 1))
        record(out, (x, b), lambda g: (g, g.sum(axis=axes)))
    return out


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = Tensor(x.data * mask)
    if recording(x):
        record(out, (x,), lambda g: (g * mask,))
    return out


def absolute(x: Tensor) -> Tensor:
    sign = np.sign(x.data)
    out = Tensor(np.abs(x.data))
    if recording(x):
        record(out, (x,), lambda g: (g * sign,))
    return out


def softmax(x: Tensor) -> Tensor:
    """Numerically stable softmax over the last axis."""
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(y)
    if recording(x):
        def fn(g):
            dot = (g * y).sum(axis=-1, keepdims=True)
            return (y * (g - dot),)
        record(out, (x,), fn)
    return out


# --------------------------------------------------------------------------
# Linear algebra and structure

def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul operands must have rank >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: inner extents differ, {a.shape} @ {b.shape}")
    out = Tensor(np.matmul(a.data, b.data))
    if recording(a, b):
        def fn(g):
            da = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
            db = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
            return (da, db)
        record(out, (a, b), fn)
    return out


def concat(parts: Sequence[Tensor], axis: int) -> Tensor:
    if not parts:
        raise ValueError("concat of zero tensors")
    ref = parts[0].shape
    axis = axis % len(ref)
    for p in parts[1:]:
        other = p.shape
        if len(other) != len(ref) or any(
                i != axis and other[i] != ref[i] for i in range(len(ref))):
            raise ValueError(f"concat: incompatible shapes {ref} vs {other}")
    out = Tensor(np.concatenate([p.data for p in parts], axis=axis))
    if recording(*parts):
        offsets = np.cumsum([p.shape[axis] for p in parts])[:-1]
        def fn(g):
            return tuple(np.split(g, offsets, axis=axis))
        record(out, tuple(parts), fn)
    return out


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    try:
        data = x.data.reshape(shape)
    except ValueError as exc:
        raise ValueError(f"reshape: {x.shape} -> {shape}: {exc}") from None
    out = Tensor(data)
    if recording(x):
        record(out, (x,), lambda g: (g.reshape(x.shape),))
    return out


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(int(a) for a in axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ValueError(f"transpose: {axes} is not a permutation of rank {x.ndim}")
    out = Tensor(x.data.transpose(axes))
    if recording(x):
        inverse = tuple(np.argsort(axes))
        record(out, (x,), lambda g: (g.transpose(inverse),))
    return out


def tile(x: Tensor, reps: Sequence[int]) -> Tensor:
    """Repeat a tensor along each axis; gradient sums over the copies."""
    reps = tuple(int(r) for r in reps)
    if len(reps) != x.ndim:
        raise ValueError(f"tile: reps {reps} must match rank {x.ndim}")
    if any(r < 1 for r in reps):
        raise ValueError(f"tile: nonpositive repeat in {reps}")
    out = Tensor(np.tile(x.data, reps))
    if recording(x):
        interleaved = tuple(v for pair in zip(reps, x.shape) for v in pair)
        sum_axes = tuple(range(0, 2 * x.ndim, 2))
        def fn(g):
            return (g.reshape(interleaved).sum(axis=sum_axes),)
        record(out, (x,), fn)
    return out


def reduce_sum(x: Tensor, axes: Sequence[int] | None = None,
               keepdims: bool = False) -> Tensor:
    if axes is None:
        out = Tensor(x.data.sum())
        if recording(x):
            record(out, (x,), lambda g: (np.broadcast_to(g, x.shape),))
        return out
    axes = tuple(int(a) % x.ndim for a in axes)
    out = Tensor(x.data.sum(axis=axes, keepdims=keepdims))
    if recording(x):
        def fn(g):
            gg = g if keepdims else np.expand_dims(g, axes)
            return (np.broadcast_to(gg, x.shape),)
        record(out, (x,), fn)
    return out


# --------------------------------------------------------------------------
# Optimizer and initialization

class Adam:
    """Adam with bias correction. ``step`` applies updates and clears grads."""

    def __init__(self, params: Iterable[Tensor], lr: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        if lr <= 0:
            raise ValueError(f"learning rate must be positive, got {lr}")
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for i, p in enumerate(self.params):
            g = p.grad
            if g is None:
                g = 0.0
            elif g.shape != p.data.shape:
                raise ValueError(
                    f"gradient shape {g.shape} does not match parameter {p.data.shape}")
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * (g * g)
            m_hat = self.m[i] / c1
            v_hat = self.v[i] / c2
            p.data -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
            p.grad = None


def make_rng(seed: int, stream: int = 0) -> np.random.Generator:
    """Philox generator keyed by (seed, stream); independent per stream."""
    key = np.array([np.uint64(seed & 0xFFFFFFFFFFFFFFFF),
                    np.uint64(stream & 0xFFFFFFFFFFFFFFFF)], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def xavier_init(shape: Sequence[int], fan_in: int, fan_out: int,
                rng: np.random.Generator | int) -> Tensor:
    """Uniform init on +-sqrt(6 / (fan_in + fan_out))."""
    if fan_in <= 0 or fan_out <= 0:
        raise ValueError(f"fans must be positive, got {fan_in}, {fan_out}")
    if isinstance(rng, (int, np.integer)):
        rng = make_rng(int(rng))
    bound = float(np.sqrt(6.0 / (fan_in + fan_out)))
    data = rng.uniform(-bound, bound, size=tuple(shape))
    return Tensor(data, requires_grad=True)


# --------------------------------------------------------------------------
# Binary tensor container
#
#   magic "RTFM" | version u16 LE | rank u16 LE | extents u32 LE * rank |
#   payload float32 LE, row-major
#
# Values are float64 in memory and float32 on disk, so a write/read cycle
# quantizes to float32 and is bit-stable afterwards.

_MAGIC = b"RTFM"
_VERSION = 1


def write_tensor(path, array) -> None:
    arr = np.asarray(array, dtype=np.float64)
    header = _MAGIC + struct.pack("<HH", _VERSION, arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    payload = np.ascontiguousarray(arr, dtype="<f4").tobytes()
    Path(path).write_bytes(header + payload)


def read_tensor(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 8:
        raise TensorFormatError(f"{path}: truncated header")
    if raw[:4] != _MAGIC:
        raise TensorFormatError(f"{path}: bad magic {raw[:4]!r}")
    version, rank = struct.unpack("<HH", raw[4:8])
    if version != _VERSION:
        raise TensorFormatError(f"{path}: unsupported version {version}")
    offset = 8 + 4 * rank
    if len(raw) < offset:
        raise TensorFormatError(f"{path}: truncated extent list")
    shape = struct.unpack(f"<{rank}I", raw[8:offset])
    count = int(np.prod(shape)) if rank else 1
    if len(raw) != offset + 4 * count:
        raise TensorFormatError(
            f"{path}: payload is {len(raw) - offset} bytes, expected {4 * count}")
    data = np.frombuffer(raw, dtype="<f4", count=count, offset=offset)
    return data.astype(np.float64).reshape(shape)
