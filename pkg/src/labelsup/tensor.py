"""Dense tensors with tape-based reverse-mode differentiation.

Every differentiable operation appends a :class:`Record` to the graph as it
runs.  Records carry a global sequence number, so sorting the records
reachable from an output by that number yields a topological order; replaying
that tape in reverse accumulates gradients into every ancestor tensor that has
``requires_grad`` set.

Broadcasting is deliberately absent.  The only implicit expansion is the
row-vector bias in :func:`add_bias`.
"""

from __future__ import annotations

import contextlib
import itertools
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32

_seq = itertools.count()
_grad_enabled = True


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


class LabelError(ValueError):
    """Raised when a class label is outside the valid range."""


class ContractError(ValueError):
    """Raised when a caller violates an operation's precondition."""


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable tape recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


@dataclass(eq=False)
class Record:
    op: str
    inputs: tuple["Tensor", ...]
    output_id: int
    seq: int
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass(eq=False)
class ComputationTape:
    """Topologically ordered records that produced one output tensor."""

    records: list[Record] = field(default_factory=list)

    @classmethod
    def from_output(cls, out: "Tensor") -> "ComputationTape":
        seen: set[int] = set()
        found: list[Record] = []
        stack = [out]
        while stack:
            t = stack.pop()
            rec = t._record
            if rec is None or id(rec) in seen:
                continue
            seen.add(id(rec))
            found.append(rec)
            stack.extend(rec.inputs)
        found.sort(key=lambda r: r.seq)
        return cls(found)

    def __len__(self) -> int:
        return len(self.records)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_record", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and not (isinstance(data, (np.ndarray, np.floating)) and np.issubdtype(arr.dtype, np.floating)):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data: np.ndarray = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._record: Record | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad: np.ndarray | None = None) -> ComputationTape:
        """Replay the tape in reverse, filling ``.grad`` on every leaf and
        intermediate tensor that requires it.  Returns the replayed tape."""
        if grad is None:
            if self.data.size != 1:
                raise ContractError(f"backward() without a seed gradient needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        tape = ComputationTape.from_output(self)
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.dtype)}
        tensors: dict[int, Tensor] = {id(self): self}
        for rec in reversed(tape.records):
            g_out = grads.get(rec.output_id)
            if g_out is None:
                continue
            for inp, g in zip(rec.inputs, rec.backward(g_out)):
                if g is None or not inp.requires_grad:
                    continue
                key = id(inp)
                tensors[key] = inp
                grads[key] = grads[key] + g if key in grads else g
        for key, g in grads.items():
            t = tensors[key]
            t.grad = g if t.grad is None else t.grad + g
        return tape

    # operator sugar; all delegate to the functions below
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self):
        return sum_all(self)

    def mean(self):
        return mean_all(self)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)

    def transpose(self, *axes):
        return transpose(self, axes)


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def _make(out: np.ndarray, op: str, inputs: tuple[Tensor, ...], backward) -> Tensor:
    needs = _grad_enabled and any(t.requires_grad for t in inputs)
    t = Tensor(out, requires_grad=needs)
    if needs:
        t._record = Record(op, inputs, id(t), next(_seq), backward)
    return t


def _check_same(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ")


# ---------------------------------------------------------------- elementwise

def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "add")
    return _make(a.data + b.data, "add", (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "sub")
    return _make(a.data - b.data, "sub", (a, b), lambda g: (g, -g))


def mul(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        c = np.asarray(b, dtype=a.dtype)
        if c.ndim != 0:
            raise DimensionError("mul: non-tensor operand must be a scalar")
        return _make(a.data * c, "scale", (a,), lambda g: (g * c,))
    _check_same(a, b, "mul")
    ad, bd = a.data, b.data
    return _make(ad * bd, "mul", (a, b), lambda g: (g * bd, g * ad))


def mul_const(a: Tensor, c: np.ndarray) -> Tensor:
    """Multiply by a same-shape constant array (dropout masks, rotary tables)."""
    if c.shape != a.shape:
        raise DimensionError(f"mul_const: shapes {a.shape} and {c.shape} differ")
    return _make(a.data * c, "mul_const", (a,), lambda g: (g * c,))


def add_const(a: Tensor, c: np.ndarray) -> Tensor:
    """Add a non-differentiable array whose shape is a suffix-compatible mask.

    Used only for additive attention masks: ``c`` must broadcast to ``a``.
    """
    out = a.data + c
    if out.shape != a.shape:
        raise DimensionError(f"add_const: mask {c.shape} does not fit {a.shape}")
    return _make(out.astype(a.dtype, copy=False), "add_const", (a,), lambda g: (g,))


def add_bias(x: Tensor, bias: Tensor) -> Tensor:
    """``x[..., n] + bias[n]``, the one permitted broadcast."""
    if bias.ndim != 1 or x.shape[-1] != bias.shape[0]:
        raise DimensionError(f"add_bias: bias {bias.shape} does not match trailing dim of {x.shape}")
    lead = tuple(range(x.ndim - 1))
    return _make(x.data + bias.data, "add_bias", (x, bias), lambda g: (g, g.sum(axis=lead)))


def silu(x: Tensor) -> Tensor:
    xd = x.data
    sig = 1.0 / (1.0 + np.exp(-xd))
    return _make(xd * sig, "silu", (x,), lambda g: (g * (sig * (1.0 + xd * (1.0 - sig))),))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _make(y, "tanh", (x,), lambda g: (g * (1.0 - y * y),))


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return _make(y, "exp", (x,), lambda g: (g * y,))


def log(x: Tensor) -> Tensor:
    xd = x.data
    return _make(np.log(xd), "log", (x,), lambda g: (g / xd,))


# ------------------------------------------------------------------ reductions

def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return _make(np.asarray(x.data.sum()), "sum", (x,), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean_all(x: Tensor) -> Tensor:
    shape, n = x.shape, x.data.size
    return _make(np.asarray(x.data.mean()), "mean", (x,), lambda g: (np.full(shape, g / n, dtype=x.dtype),))


# ---------------------------------------------------------------- shape ops

def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _make(x.data.reshape(shape), "reshape", (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes) if axes else tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    return _make(np.ascontiguousarray(x.data.transpose(axes)), "transpose", (x,), lambda g: (g.transpose(inv),))


def take_rows(table: Tensor, ids: np.ndarray) -> Tensor:
    """Embedding lookup: ``table[ids]`` with scatter-add gradient."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise DimensionError(f"take_rows: ids outside [0, {table.shape[0]})")
    n_rows = table.shape[0]

    def backward(g):
        gt = np.zeros((n_rows,) + g.shape[ids.ndim:], dtype=g.dtype)
        np.add.at(gt, ids.reshape(-1), g.reshape((-1,) + g.shape[ids.ndim:]))
        return (gt,)

    return _make(table.data[ids], "take_rows", (table,), backward)


def gather_positions(x: Tensor, positions: np.ndarray) -> Tensor:
    """``x[b, positions[b], :]`` for a (b, s, d) tensor."""
    b = np.arange(x.shape[0])
    shape = x.shape

    def backward(g):
        gx = np.zeros(shape, dtype=g.dtype)
        gx[b, positions] = g
        return (gx,)

    return _make(x.data[b, positions], "gather_positions", (x,), backward)


# ----------------------------------------------------------------- products

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes must match exactly."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        return g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g

    return _make(ad @ bd, "matmul", (a, b), backward)


def linear(x: Tensor, weight: Tensor) -> Tensor:
    """``x[..., d_in] @ weight[d_out, d_in]ᵀ``; the weight is shared over leading axes."""
    if weight.ndim != 2 or x.shape[-1] != weight.shape[1]:
        raise DimensionError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    xd, wd = x.data, weight.data

    def backward(g):
        gx = g @ wd
        gw = g.reshape(-1, g.shape[-1]).T @ xd.reshape(-1, xd.shape[-1])
        return gx, gw

    return _make(xd @ wd.T, "linear", (x, weight), backward)


# ------------------------------------------------------ normalisation / prob

def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis, stabilised by max subtraction."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _make(y, "softmax", (x,), backward)


def log_softmax(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    y = z - lse
    p = np.exp(y)
    return _make(y, "log_softmax", (x,), lambda g: (g - p * g.sum(axis=-1, keepdims=True),))


def rms_norm(x: Tensor, weight: Tensor, eps: float) -> Tensor:
    """``x / sqrt(mean(x²) + eps) * weight`` over the last axis."""
    if weight.shape != (x.shape[-1],):
        raise DimensionError(f"rms_norm: weight {weight.shape} vs input {x.shape}")
    xd, wd = x.data, weight.data
    d = xd.shape[-1]
    inv = 1.0 / np.sqrt((xd * xd).mean(axis=-1, keepdims=True) + eps)
    xhat = xd * inv

    def backward(g):
        gw = (g * xhat).reshape(-1, d).sum(axis=0)
        gh = g * wd
        gx = inv * (gh - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, gw

    return _make(xhat * wd, "rms_norm", (x, weight), backward)


def cross_entropy(logits: Tensor, labels, ignore_index: int = -100) -> Tensor:
    """Mean negative log-likelihood of the gold class over non-ignored rows."""
    if logits.ndim != 2:
        raise DimensionError(f"cross_entropy: logits must be (b, c), got {logits.shape}")
    labels = np.asarray(labels, dtype=np.int64)
    n, c = logits.shape
    if labels.shape != (n,):
        raise DimensionError(f"cross_entropy: {labels.shape[0] if labels.ndim else 0} labels for {n} rows")
    keep = labels != ignore_index
    bad = keep & ((labels < 0) | (labels >= c))
    if bad.any():
        raise LabelError(f"cross_entropy: label {labels[bad][0]} outside [0, {c})")
    count = int(keep.sum())
    if count == 0:
        raise ContractError("cross_entropy: every label is ignore_index; mean is undefined")
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - lse
    rows = np.nonzero(keep)[0]
    loss = -logp[rows, labels[rows]].sum() / count

    def backward(g):
        gl = np.exp(logp)
        gl[rows, labels[rows]] -= 1.0
        gl[~keep] = 0.0
        return (gl * (g / count),)

    return _make(np.asarray(loss, dtype=logits.dtype), "cross_entropy", (logits,), backward)


# --------------------------------------------------------- special-purpose

def rotate_half(a: np.ndarray) -> np.ndarray:
    h = a.shape[-1] // 2
    return np.concatenate([-a[..., h:], a[..., :h]], axis=-1)


def _rotate_half_t(a: np.ndarray) -> np.ndarray:
    h = a.shape[-1] // 2
    return np.concatenate([a[..., h:], -a[..., :h]], axis=-1)


def rotary(x: Tensor, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    """Rotary position embedding on the last axis of a (..., s, d_h) tensor."""
    if x.shape[-2:] != cos.shape or cos.shape != sin.shape or x.shape[-1] % 2:
        raise DimensionError(f"rotary: table {cos.shape} does not fit {x.shape}")
    xd = x.data
    out = xd * cos + rotate_half(xd) * sin
    return _make(out, "rotary", (x,), lambda g: (g * cos + _rotate_half_t(g * sin),))


def masked_max(x: Tensor, valid: np.ndarray) -> Tensor:
    """Max over axis 1 of a (b, s, d) tensor, considering only ``valid[b, s]``."""
    filled = np.where(valid[:, :, None], x.data, -np.inf)
    idx = filled.argmax(axis=1)
    out = np.take_along_axis(x.data, idx[:, None, :], axis=1)[:, 0, :]
    shape = x.shape

    def backward(g):
        gx = np.zeros(shape, dtype=g.dtype)
        np.put_along_axis(gx, idx[:, None, :], g[:, None, :], axis=1)
        return (gx,)

    return _make(out, "masked_max", (x,), backward)


def masked_mean(x: Tensor, valid: np.ndarray) -> Tensor:
    """Mean over axis 1 of a (b, s, d) tensor over ``valid[b, s]`` positions."""
    w = valid.astype(x.dtype)
    w = w / w.sum(axis=1, keepdims=True)
    out = np.einsum("bs,bsd->bd", w, x.data)
    return _make(out, "masked_mean", (x,), lambda g: (w[:, :, None] * g[:, None, :],))


# ----------------------------------------------------------- gradient oracle

def finite_difference_check(f: Callable[[Tensor], Tensor], x: Tensor, epsilon: float = 1e-5,
                            atol: float = 1e-8, elementwise: bool = False) -> float:
    """Relative error between the analytic gradient of a scalar function and
    central differences.

    By default this is ``max|a - n| / max(max|a|, max|n|)`` over the whole
    tensor: entries far smaller than the largest gradient are dominated by
    the O(u/epsilon) rounding error of the differences, so a per-entry ratio
    would measure floating-point noise rather than the derivative.  With
    ``elementwise`` the worst per-entry ratio is returned instead.  ``atol``
    floors every denominator.

    ``f`` must close over any other parameters; only ``x`` is perturbed.
    """
    if x.dtype != np.float64:
        raise ContractError("finite_difference_check requires a float64 tensor")
    x.data = np.ascontiguousarray(x.data)
    x.requires_grad = True
    x.grad = None
    out = f(x)
    if out.data.size != 1:
        raise ContractError(f"finite_difference_check: f must be scalar-valued, got shape {out.shape}")
    out.backward()
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()

    numeric = np.empty_like(x.data)
    flat = x.data.reshape(-1)
    num_flat = numeric.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            hi = float(f(x).data)
            flat[i] = orig - epsilon
            lo = float(f(x).data)
            flat[i] = orig
            num_flat[i] = (hi - lo) / (2 * epsilon)
    diff = np.abs(analytic - numeric)
    if elementwise:
        return float((diff / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), atol)).max())
    scale = max(float(np.abs(analytic).max()), float(np.abs(numeric).max()), atol)
    return float(diff.max() / scale)
