"""
Dense tensor kernel with a reverse-mode gradient tape.

Every numeric quantity in crossdiff is a ``Tensor``: an immutable, row-major
NumPy array plus a ``requires_grad`` flag. Operations executed while a
``GradTape`` is active are recorded in creation order, which is a valid
topological order, so ``GradTape.gradient`` simply replays the record
backwards. Nothing is recorded outside a tape.

Broadcasting is limited to three cases: equal shapes, a 0-d scalar against
anything, and a 1-d vector against the last axis of the other operand.
"""

import logging
import struct
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO, Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import NonFiniteError, ShapeError

logger = logging.getLogger(__name__)

MAGIC = b"PCXD"

_DTYPES = {"float64": np.float64, "float32": np.float32}
_default_dtype = np.float64

Number = Union[int, float]
Operand = Union["Tensor", Number]
Backward = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]


def set_default_dtype(name: str):
    """Select the floating point precision of newly created tensors."""
    global _default_dtype
    if name not in _DTYPES:
        raise ValueError(f"Unsupported dtype '{name}', expected one of {sorted(_DTYPES)}")
    _default_dtype = _DTYPES[name]


def get_default_dtype() -> str:
    for name, dtype in _DTYPES.items():
        if dtype is _default_dtype:
            return name
    return "float64"


class Tensor:
    """Immutable dense array that may participate in gradient recording."""

    __slots__ = ("_data", "requires_grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        arr = np.array(data, dtype=_default_dtype)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError("tensor", [name or ""], "input data is not finite")
        arr.setflags(write=False)
        self._data = arr
        self.requires_grad = requires_grad
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool) -> "Tensor":
        t = cls.__new__(cls)
        arr = np.asarray(arr, dtype=_default_dtype)
        arr.setflags(write=False)
        t._data = arr
        t.requires_grad = requires_grad
        t.name = None
        return t

    @property
    def data(self) -> np.ndarray:
        return self._data

    @property
    def shape(self) -> Tuple[int, ...]:
        return self._data.shape

    @property
    def size(self) -> int:
        return int(self._data.size)

    @property
    def ndim(self) -> int:
        return self._data.ndim

    def numpy(self) -> np.ndarray:
        """Writable copy of the values."""
        return self._data.copy()

    def item(self) -> float:
        if self._data.size != 1:
            raise ShapeError(f"item() needs a single element, tensor has shape {self.shape}")
        return float(self._data.reshape(-1)[0])

    def assign(self, values):
        """Rebind the values of a leaf tensor (optimizer updates, finite differences)."""
        arr = np.array(values, dtype=_default_dtype)
        if arr.shape != self._data.shape:
            raise ShapeError(f"assign: shape {arr.shape} does not match {self._data.shape}")
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError("assign", [self.name or ""])
        arr.setflags(write=False)
        self._data = arr

    def detach(self) -> "Tensor":
        return Tensor._wrap(self._data, False)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return self._data.shape[0]

    def __add__(self, other: Operand) -> "Tensor":
        return add(self, other)

    def __radd__(self, other: Operand) -> "Tensor":
        return add(other, self)

    def __sub__(self, other: Operand) -> "Tensor":
        return sub(self, other)

    def __rsub__(self, other: Operand) -> "Tensor":
        return sub(other, self)

    def __mul__(self, other: Operand) -> "Tensor":
        return mul(self, other)

    def __rmul__(self, other: Operand) -> "Tensor":
        return mul(other, self)

    def __truediv__(self, other: Operand) -> "Tensor":
        return div(self, other)

    def __rtruediv__(self, other: Operand) -> "Tensor":
        return div(other, self)

    def __neg__(self) -> "Tensor":
        return neg(self)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __getitem__(self, key) -> "Tensor":
        return getitem(self, key)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


@dataclass
class _Node:
    op: str
    output: Tensor
    inputs: Tuple[Tensor, ...]
    backward: Backward


class GradTape:
    """
    Ordered record of the primitive operations of one computation.

    Usage::

        with GradTape() as tape:
            loss = f(params)
        grads = tape.gradient(loss, params)

    ``gradient`` may be called several times on the same tape, e.g. once per
    task loss, and always visits nodes in exact reverse creation order.
    """

    _local = threading.local()

    def __init__(self):
        self._nodes: List[_Node] = []

    def __enter__(self) -> "GradTape":
        stack = self._stack()
        stack.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        stack = self._stack()
        if stack and stack[-1] is self:
            stack.pop()
        return False

    def __len__(self) -> int:
        return len(self._nodes)

    @classmethod
    def _stack(cls) -> List["GradTape"]:
        if not hasattr(cls._local, "stack"):
            cls._local.stack = []
        return cls._local.stack

    @classmethod
    def active(cls) -> Optional["GradTape"]:
        stack = cls._stack()
        return stack[-1] if stack else None

    def ops(self) -> List[str]:
        """Names of the recorded operations in recording order."""
        return [node.op for node in self._nodes]

    def _append(self, node: _Node):
        self._nodes.append(node)

    def gradient(self, target: Tensor, sources: Sequence[Tensor]) -> List[np.ndarray]:
        """Gradients of a scalar ``target`` with respect to each of ``sources``."""
        if target.size != 1:
            raise ShapeError(f"gradient target must be a scalar, got shape {target.shape}")
        grads: Dict[int, np.ndarray] = {id(target): np.ones_like(target.data)}
        for node in reversed(self._nodes):
            g_out = grads.get(id(node.output))
            if g_out is None:
                continue
            input_grads = node.backward(g_out)
            for tensor, g in zip(node.inputs, input_grads):
                if g is None or not tensor.requires_grad:
                    continue
                key = id(tensor)
                if key in grads:
                    grads[key] = grads[key] + g
                else:
                    grads[key] = g
        result = []
        for src in sources:
            g = grads.get(id(src))
            result.append(np.zeros_like(src.data) if g is None else np.array(g, dtype=src.data.dtype))
        return result


def _as_tensor(x: Operand) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor._wrap(np.asarray(x, dtype=_default_dtype), False)


def _record(op: str, out: np.ndarray, inputs: Sequence[Tensor], backward: Backward) -> Tensor:
    out = np.asarray(out, dtype=_default_dtype)
    if not np.all(np.isfinite(out)):
        raise NonFiniteError(op, [t.name or "" for t in inputs])
    tape = GradTape.active()
    tracked = tape is not None and any(t.requires_grad for t in inputs)
    result = Tensor._wrap(out, tracked)
    if tracked:
        tape._append(_Node(op, result, tuple(inputs), backward))
    return result


def _check_broadcast(op: str, a: np.ndarray, b: np.ndarray):
    if a.shape == b.shape or a.ndim == 0 or b.ndim == 0:
        return
    if a.ndim == 1 and b.ndim >= 1 and a.shape[0] == b.shape[-1]:
        return
    if b.ndim == 1 and a.ndim >= 1 and b.shape[0] == a.shape[-1]:
        return
    raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def _unbroadcast(g: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    if len(shape) == 0:
        return np.asarray(g.sum())
    return g.reshape(-1, shape[0]).sum(axis=0)


# ---------------------------------------------------------------------------
# Elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a: Operand, b: Operand) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("add", a.data, b.data)
    sa, sb = a.shape, b.shape
    return _record("add", a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a: Operand, b: Operand) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("sub", a.data, b.data)
    sa, sb = a.shape, b.shape
    return _record("sub", a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a: Operand, b: Operand) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("mul", a.data, b.data)
    av, bv = a.data, b.data
    return _record("mul", av * bv, (a, b),
                   lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))


def div(a: Operand, b: Operand) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("div", a.data, b.data)
    av, bv = a.data, b.data
    out = av / bv
    return _record("div", out, (a, b),
                   lambda g: (_unbroadcast(g / bv, av.shape),
                              _unbroadcast(-g * out / bv, bv.shape)))


def neg(a: Tensor) -> Tensor:
    return _record("neg", -a.data, (a,), lambda g: (-g,))


def maximum(a: Operand, b: Operand) -> Tensor:
    """Elementwise maximum; ties send the gradient to ``a``."""
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("maximum", a.data, b.data)
    take_a = a.data >= b.data
    sa, sb = a.shape, b.shape
    return _record("maximum", np.where(take_a, a.data, b.data), (a, b),
                   lambda g: (_unbroadcast(np.where(take_a, g, 0.0), sa),
                              _unbroadcast(np.where(take_a, 0.0, g), sb)))


def minimum(a: Operand, b: Operand) -> Tensor:
    """Elementwise minimum; ties send the gradient to ``a``."""
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("minimum", a.data, b.data)
    take_a = a.data <= b.data
    sa, sb = a.shape, b.shape
    return _record("minimum", np.where(take_a, a.data, b.data), (a, b),
                   lambda g: (_unbroadcast(np.where(take_a, g, 0.0), sa),
                              _unbroadcast(np.where(take_a, 0.0, g), sb)))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _record("exp", out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    av = a.data
    if np.any(av <= 0):
        raise NonFiniteError("log", [a.name or ""], "argument must be positive")
    return _record("log", np.log(av), (a,), lambda g: (g / av,))


def abs(a: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    sign = np.sign(a.data)
    return _record("abs", np.abs(a.data), (a,), lambda g: (g * sign,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _record("relu", np.where(mask, a.data, 0.0), (a,), lambda g: (np.where(mask, g, 0.0),))


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _record("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    inside = (a.data >= lo) & (a.data <= hi)
    return _record("clamp", np.clip(a.data, lo, hi), (a,), lambda g: (np.where(inside, g, 0.0),))


# ---------------------------------------------------------------------------
# Reductions and layout
# ---------------------------------------------------------------------------

def sum(a: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    shape = a.shape
    return _record("sum", np.asarray(a.data.sum()), (a,), lambda g: (np.full(shape, float(g)),))


def mean(a: Tensor) -> Tensor:
    shape, n = a.shape, a.size
    return _record("mean", np.asarray(a.data.mean()), (a,), lambda g: (np.full(shape, float(g) / n),))


def max_rows(a: Tensor) -> Tensor:
    """Column-wise maximum over the rows of a matrix; ties go to the lowest row."""
    if a.ndim != 2 or a.shape[0] == 0:
        raise ShapeError(f"max_rows needs a non-empty matrix, got shape {a.shape}")
    arg = np.argmax(a.data, axis=0)
    cols = np.arange(a.shape[1])
    shape = a.shape

    def backward(g):
        grad = np.zeros(shape)
        grad[arg, cols] = g
        return (grad,)

    return _record("max_rows", a.data[arg, cols], (a,), backward)


def segment_max(a: Tensor, groups: Sequence[Sequence[int]]) -> Tensor:
    """Row-group maximum: output row ``i`` is the column-wise max over ``a[groups[i]]``."""
    if a.ndim != 2:
        raise ShapeError(f"segment_max needs a matrix, got shape {a.shape}")
    n = a.shape[0]
    out = np.empty((len(groups), a.shape[1]))
    winners = []
    for i, members in enumerate(groups):
        idx = np.asarray(members, dtype=np.int64)
        if idx.size == 0:
            raise ShapeError(f"segment_max: group {i} is empty")
        if idx.min() < 0 or idx.max() >= n:
            raise ShapeError(f"segment_max: group {i} indexes outside {n} rows")
        block = a.data[idx]
        arg = np.argmax(block, axis=0)
        winners.append(idx[arg])
        out[i] = block[arg, np.arange(a.shape[1])]
    rows = np.stack(winners) if winners else np.zeros((0, a.shape[1]), dtype=np.int64)
    cols = np.arange(a.shape[1])
    shape = a.shape

    def backward(g):
        grad = np.zeros(shape)
        for i in range(rows.shape[0]):
            np.add.at(grad, (rows[i], cols), g[i])
        return (grad,)

    return _record("segment_max", out, (a,), backward)


def gather_rows(a: Tensor, index: Sequence[int]) -> Tensor:
    idx = np.asarray(index, dtype=np.int64)
    n = a.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise ShapeError(f"gather_rows: index out of range for {n} rows")
    shape = a.shape

    def backward(g):
        grad = np.zeros(shape)
        np.add.at(grad, idx, g)
        return (grad,)

    return _record("gather_rows", a.data[idx], (a,), backward)


def getitem(a: Tensor, key) -> Tensor:
    """Basic (int/slice) indexing."""
    parts = key if isinstance(key, tuple) else (key,)
    for part in parts:
        if not isinstance(part, (int, slice, np.integer)):
            raise ShapeError("getitem supports only integer and slice indices")
    shape = a.shape

    def backward(g):
        grad = np.zeros(shape)
        grad[key] = g
        return (grad,)

    return _record("getitem", a.data[key], (a,), backward)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.shape
    try:
        out = a.data.reshape(tuple(shape))
    except ValueError as e:
        raise ShapeError(f"reshape: {e}") from e
    return _record("reshape", out, (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ShapeError(f"transpose needs a matrix, got shape {a.shape}")
    return _record("transpose", a.data.T, (a,), lambda g: (g.T,))


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    if not parts:
        raise ShapeError("concat_cols needs at least one tensor")
    rows = {p.shape[0] for p in parts}
    if len(rows) != 1 or any(p.ndim != 2 for p in parts):
        raise ShapeError(f"concat_cols: mismatched shapes {[p.shape for p in parts]}")
    widths = np.cumsum([0] + [p.shape[1] for p in parts])

    def backward(g):
        return tuple(g[:, widths[i]:widths[i + 1]] for i in range(len(parts)))

    return _record("concat_cols", np.concatenate([p.data for p in parts], axis=1), tuple(parts), backward)


def stack(parts: Sequence[Tensor]) -> Tensor:
    if not parts:
        raise ShapeError("stack needs at least one tensor")
    if len({p.shape for p in parts}) != 1:
        raise ShapeError(f"stack: mismatched shapes {[p.shape for p in parts]}")
    return _record("stack", np.stack([p.data for p in parts]), tuple(parts),
                   lambda g: tuple(g[i] for i in range(len(parts))))


# ---------------------------------------------------------------------------
# Linear algebra and normalisation
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul needs matrices, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions differ ({a.shape} x {b.shape})")
    av, bv = a.data, b.data
    return _record("matmul", av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g))


def softmax_rows(x: Tensor) -> Tensor:
    """Row-wise softmax with per-row max subtraction."""
    if x.ndim not in (1, 2):
        raise ShapeError(f"softmax_rows needs a vector or matrix, got {x.shape}")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _record("softmax_rows", out, (x,), backward)


def log_softmax(x: Tensor) -> Tensor:
    if x.ndim not in (1, 2):
        raise ShapeError(f"log_softmax needs a vector or matrix, got {x.shape}")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    soft = np.exp(out)

    def backward(g):
        return (g - soft * g.sum(axis=-1, keepdims=True),)

    return _record("log_softmax", out, (x,), backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise the last axis to zero mean / unit variance, then apply gain and bias."""
    d = x.shape[-1]
    if d < 1:
        raise ShapeError("layer_norm needs a non-empty last axis")
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: gain/bias must have shape ({d},)")
    xv = x.data
    mu = xv.mean(axis=-1, keepdims=True)
    centered = xv - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    gv = gain.data

    def backward(g):
        dxhat = g * gv
        dx = inv_std / d * (d * dxhat - dxhat.sum(axis=-1, keepdims=True)
                            - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True))
        dgain = (g * xhat).reshape(-1, d).sum(axis=0)
        dbias = g.reshape(-1, d).sum(axis=0)
        return (dx, dgain, dbias)

    return _record("layer_norm", xhat * gv + bias.data, (x, gain, bias), backward)


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------

@dataclass
class GradCheckReport:
    """Per-parameter maximum relative error between tape and finite-difference gradients."""

    errors: Dict[str, float] = field(default_factory=dict)
    tol: float = 1e-4
    step: float = 1e-5

    @property
    def passed(self) -> bool:
        return all(err <= self.tol for err in self.errors.values())

    @property
    def max_error(self) -> float:
        return max(self.errors.values()) if self.errors else 0.0

    def failures(self) -> List[str]:
        return [name for name, err in self.errors.items() if err > self.tol]


def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor],
               step: float = 1e-5, tol: float = 1e-4) -> GradCheckReport:
    """
    Compare tape gradients of the scalar ``f()`` against central differences.

    The relative error of one element is ``|a - n| / max(|a|, |n|, 1)``; the
    report keeps the maximum per parameter.

    Args:
        f: Pure, deterministic computation returning a scalar tensor.
        params: Leaf tensors with ``requires_grad=True`` that ``f`` reads.
        step: Finite-difference step.
        tol: Pass threshold.
    """
    with GradTape() as tape:
        out = f()
    if out.size != 1:
        raise ShapeError(f"grad_check needs a scalar objective, got shape {out.shape}")
    analytic = tape.gradient(out, params)

    report = GradCheckReport(tol=tol, step=step)
    for i, (param, grad) in enumerate(zip(params, analytic)):
        name = param.name or f"param{i}"
        if name in report.errors:
            name = f"{name}#{i}"
        original = param.numpy()
        numeric = np.zeros_like(original)
        flat = original.reshape(-1)
        for j in range(flat.size):
            bumped = flat.copy()
            bumped[j] = flat[j] + step
            param.assign(bumped.reshape(original.shape))
            f_plus = f().item()
            bumped[j] = flat[j] - step
            param.assign(bumped.reshape(original.shape))
            f_minus = f().item()
            numeric.reshape(-1)[j] = (f_plus - f_minus) / (2.0 * step)
        param.assign(original)
        denom = np.maximum(np.maximum(np.abs(grad), np.abs(numeric)), 1.0)
        err = float(np.max(np.abs(grad - numeric) / denom)) if grad.size else 0.0
        report.errors[name] = err
        logger.debug("grad_check %s: max rel err %.3e", name, err)
    return report


# ---------------------------------------------------------------------------
# Golden dump format
# ---------------------------------------------------------------------------

def write_tensor(stream: BinaryIO, value: Union[Tensor, np.ndarray]):
    """Write ``PCXD | u32 rank | u32 dims[rank] | f64 LE row-major payload``."""
    arr = value.data if isinstance(value, Tensor) else np.asarray(value)
    stream.write(MAGIC)
    stream.write(struct.pack("<I", arr.ndim))
    if arr.ndim:
        stream.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    stream.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def read_tensor(stream: BinaryIO) -> Tensor:
    magic = stream.read(4)
    if magic != MAGIC:
        raise ValueError(f"Not a tensor dump (magic {magic!r})")
    (rank,) = struct.unpack("<I", stream.read(4))
    dims = struct.unpack(f"<{rank}I", stream.read(4 * rank)) if rank else ()
    count = int(np.prod(dims)) if rank else 1
    payload = stream.read(8 * count)
    if len(payload) != 8 * count:
        raise ValueError("Truncated tensor dump")
    return Tensor(np.frombuffer(payload, dtype="<f8").reshape(dims))


def save_tensor(path: Union[str, Path], value: Union[Tensor, np.ndarray]):
    with open(path, "wb") as f:
        write_tensor(f, value)


def load_tensor(path: Union[str, Path]) -> Tensor:
    with open(path, "rb") as f:
        return read_tensor(f)
