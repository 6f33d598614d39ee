"""Minimal dense-tensor library with reverse-mode automatic differentiation.

Data lives in float64 numpy arrays; the computation graph is built dynamically
by every operation whose inputs require gradients and is dropped once the loss
tensor goes out of scope. ``backward`` accumulates into leaf ``grad`` buffers
until they are explicitly zeroed, so optimizers own the zeroing step.

Only the operations the rest of the package needs are provided; there is no
general broadcasting beyond numpy-compatible suffix/broadcast shapes, no views,
and no graph reuse machinery.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operands with incompatible shapes."""


class GraphError(RuntimeError):
    """Misuse of the computation graph (non-scalar backward, ...)."""


class NondeterminismError(RuntimeError):
    """A function re-evaluated at the same point produced a different value."""


class _Node:
    """One op in the graph: the input tensors and a vector-Jacobian closure."""

    __slots__ = ("inputs", "vjp")

    def __init__(self, inputs: tuple["Tensor", ...], vjp: Callable):
        self.inputs = inputs
        self.vjp = vjp


class Tensor:
    """Dense float64 array with optional gradient tracking.

    ``grad`` is allocated for gradient-requiring leaves; op outputs carry a
    ``node`` back-reference instead and receive their adjoints transiently
    during ``backward``. Detached tensors have neither.
    """

    __slots__ = ("data", "requires_grad", "grad", "node")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self.node: _Node | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad[...] = 0.0

    def detach(self) -> "Tensor":
        return detach(self)

    def reshape(self, *shape) -> "Tensor":
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], (tuple, list)) else shape)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tmean(self, axis=axis, keepdims=keepdims)

    def __repr__(self) -> str:
        flags = []
        if self.requires_grad:
            flags.append("grad")
        if self.node is not None:
            flags.append("op")
        tag = f" [{','.join(flags)}]" if flags else ""
        return f"Tensor(shape={self.shape}{tag})"

    # arithmetic sugar; scalars and arrays are wrapped as constants
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __neg__(self):
        return neg(self)

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(as_tensor(other), self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return power(self, p)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def constant(x) -> Tensor:
    """Constant leaf: never tracked, never receives gradient."""
    return Tensor(x, requires_grad=False)


def _from_op(data: np.ndarray, inputs: tuple[Tensor, ...], vjp: Callable) -> Tensor:
    # Graphs rooted entirely in constants are pruned at construction.
    if not any(t.requires_grad for t in inputs):
        return Tensor(data)
    out = Tensor(data)
    out.requires_grad = True
    out.node = _Node(inputs, vjp)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcasted gradient back to ``shape``."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise and reduction ops


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data

    def vjp(g):
        return (
            _unbroadcast(g, a.shape) if a.requires_grad else None,
            _unbroadcast(g, b.shape) if b.requires_grad else None,
        )

    return _from_op(out, (a, b), vjp)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _from_op(-a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data

    def vjp(g):
        return (
            _unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
            _unbroadcast(g * a.data, b.shape) if b.requires_grad else None,
        )

    return _from_op(out, (a, b), vjp)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def vjp(g):
        return (
            _unbroadcast(g / b.data, a.shape) if a.requires_grad else None,
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape) if b.requires_grad else None,
        )

    return _from_op(out, (a, b), vjp)


def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    p = float(p)
    out = a.data**p
    return _from_op(out, (a,), lambda g: (g * p * a.data ** (p - 1.0),))


def absolute(a) -> Tensor:
    a = as_tensor(a)
    return _from_op(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _from_op(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    return _from_op(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _from_op(out, (a,), lambda g: (g * 0.5 / out,))


def relu(a) -> Tensor:
    a = as_tensor(a)
    return _from_op(np.maximum(a.data, 0.0), (a,), lambda g: (g * (a.data > 0.0),))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _from_op(out, (a,), lambda g: (g * out * (1.0 - out),))


def softplus(a) -> Tensor:
    """log(1 + e^x), overflow-safe."""
    a = as_tensor(a)
    out = np.logaddexp(0.0, a.data)

    def vjp(g):
        return (g * sigmoid(constant(a.data)).data,)

    return _from_op(out, (a,), vjp)


def clamp(a, lo: float, hi: float) -> Tensor:
    """Clip values to [lo, hi]; gradient passes only through the interior."""
    a = as_tensor(a)
    out = np.clip(a.data, lo, hi)
    inside = (a.data >= lo) & (a.data <= hi)
    return _from_op(out, (a,), lambda g: (g * inside,))


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _from_op(out, (a,), vjp)


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size if axis is None else a.data.shape[axis]

    def vjp(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape) / count,)

    return _from_op(out, (a,), vjp)


# ---------------------------------------------------------------------------
# linear algebra and structural ops


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} x {b.shape}")
    out = a.data @ b.data

    def vjp(g):
        return (
            g @ b.data.T if a.requires_grad else None,
            a.data.T @ g if b.requires_grad else None,
        )

    return _from_op(out, (a, b), vjp)


def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeError(f"transpose expects a matrix, got shape {a.shape}")
    return _from_op(a.data.T.copy(), (a,), lambda g: (g.T,))


def permute(a, axes: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _from_op(np.transpose(a.data, axes).copy(), (a,), lambda g: (np.transpose(g, inv),))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    out = a.data.reshape(shape)

    def vjp(g):
        return (g.reshape(a.shape),)

    return _from_op(out.copy(), (a,), vjp)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.data.shape[axis] for t in ts]
    offsets = np.cumsum(sizes)[:-1]

    def vjp(g):
        pieces = np.split(g, offsets, axis=axis)
        return tuple(p if t.requires_grad else None for p, t in zip(pieces, ts))

    return _from_op(out, tuple(ts), vjp)


def gather_rows(a, idx) -> Tensor:
    """Select rows along axis 0; duplicate indices accumulate gradient."""
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.intp)
    out = a.data[idx]

    def vjp(g):
        buf = np.zeros_like(a.data)
        np.add.at(buf, idx, g)
        return (buf,)

    return _from_op(out.copy(), (a,), vjp)


def gather_flat(a, idx: np.ndarray, out_shape: tuple[int, ...]) -> Tensor:
    """Gather arbitrary elements from the flattened tensor into ``out_shape``."""
    a = as_tensor(a)
    flat_idx = idx.ravel()
    out = a.data.ravel()[flat_idx].reshape(out_shape)

    def vjp(g):
        buf = np.bincount(flat_idx, weights=g.ravel(), minlength=a.data.size)
        return (buf.reshape(a.shape),)

    return _from_op(out, (a,), vjp)


def slice_last(a, start: int, stop: int) -> Tensor:
    a = as_tensor(a)
    out = a.data[..., start:stop].copy()

    def vjp(g):
        buf = np.zeros_like(a.data)
        buf[..., start:stop] = g
        return (buf,)

    return _from_op(out, (a,), vjp)


def pad_hw(a, pad: int) -> Tensor:
    """Zero-pad the H and W axes of a [..., H, W, C] tensor."""
    a = as_tensor(a)
    if pad == 0:
        return _from_op(a.data.copy(), (a,), lambda g: (g,))
    width = [(0, 0)] * a.data.ndim
    width[-3] = (pad, pad)
    width[-2] = (pad, pad)
    out = np.pad(a.data, width)

    def vjp(g):
        sl = [slice(None)] * a.data.ndim
        sl[-3] = slice(pad, -pad)
        sl[-2] = slice(pad, -pad)
        return (g[tuple(sl)],)

    return _from_op(out, (a,), vjp)


def softmax(x, axis: int = -1) -> Tensor:
    """Softmax along ``axis`` with max-subtraction for stability."""
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        inner = (g * out).sum(axis=axis, keepdims=True)
        return ((g - inner) * out,)

    return _from_op(out, (x,), vjp)


def layernorm_pf(x, eps: float = 1e-5) -> Tensor:
    """Parameter-free row standardization: zero mean, unit population variance.

    Works on the last axis; composed from primitive ops so the gradient falls
    out of the graph. Constant rows map to zero rows (eps keeps it finite).
    """
    x = as_tensor(x)
    if x.data.shape[-1] < 1:
        raise ShapeError("layernorm_pf needs a non-empty last axis")
    mu = tmean(x, axis=-1, keepdims=True)
    centered = x - mu
    var = tmean(centered * centered, axis=-1, keepdims=True)
    return centered / sqrt(var + eps)


def detach(x) -> Tensor:
    """Value copy with no graph node; backward never traverses past it."""
    x = as_tensor(x)
    return Tensor(x.data.copy())


# ---------------------------------------------------------------------------
# reverse-mode differentiation


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in seen or t.node is None:
            continue
        seen.add(id(t))
        stack.append((t, True))
        for inp in t.node.inputs:
            if inp.node is not None and id(inp) not in seen:
                stack.append((inp, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable gradient-requiring leaf.

    Repeated calls keep accumulating; unreachable leaves are untouched.
    """
    if loss.data.size != 1:
        raise GraphError(f"backward requires a scalar loss, got shape {loss.shape}")
    if loss.node is None:
        if loss.requires_grad:
            loss.grad += 1.0
        return
    adjoint: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for t in reversed(_topo_order(loss)):
        g = adjoint.pop(id(t), None)
        if g is None:
            continue
        for inp, gi in zip(t.node.inputs, t.node.vjp(g)):
            if gi is None or not inp.requires_grad:
                continue
            gi = np.asarray(gi, dtype=np.float64)
            if inp.node is None:
                inp.grad += gi
            elif id(inp) in adjoint:
                adjoint[id(inp)] = adjoint[id(inp)] + gi
            else:
                adjoint[id(inp)] = gi


# ---------------------------------------------------------------------------
# parameter bookkeeping


GROUP_NAMES = ("teacher", "student", "decoder", "aux")


class ParamGroup:
    """Named, ordered collection of trainable tensors.

    Every trainable tensor in a training context belongs to exactly one group;
    the teacher group is frozen for distillation, after which its tensors stop
    requiring gradients entirely.
    """

    def __init__(self, name: str):
        if name not in GROUP_NAMES:
            raise ValueError(f"unknown group {name!r}; expected one of {GROUP_NAMES}")
        self.name = name
        self.params: dict[str, Tensor] = {}

    def add(self, name: str, t: Tensor) -> Tensor:
        if name in self.params:
            raise ValueError(f"duplicate parameter name {name!r} in group {self.name!r}")
        if not t.requires_grad:
            raise ValueError(f"parameter {name!r} must require grad at registration")
        self.params[name] = t
        return t

    def named(self) -> Iterable[tuple[str, Tensor]]:
        return self.params.items()

    def tensors(self) -> list[Tensor]:
        return list(self.params.values())

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.zero_grad()

    def freeze(self) -> None:
        for t in self.params.values():
            t.requires_grad = False
            t.grad = None

    def max_abs_grad(self) -> float:
        worst = 0.0
        for t in self.params.values():
            if t.grad is not None and t.grad.size:
                worst = max(worst, float(np.abs(t.grad).max()))
        return worst

    def __len__(self) -> int:
        return len(self.params)

    def __repr__(self) -> str:
        return f"ParamGroup({self.name!r}, {len(self.params)} params)"


# ---------------------------------------------------------------------------
# finite-difference verification


@dataclass
class GradCheckEntry:
    param: str
    max_rel_err: float
    passed: bool


@dataclass
class GradCheckReport:
    entries: list[GradCheckEntry] = field(default_factory=list)
    tol: float = 0.0

    @property
    def passed(self) -> bool:
        return all(e.passed for e in self.entries)

    @property
    def worst(self) -> float:
        return max((e.max_rel_err for e in self.entries), default=0.0)

    def __str__(self) -> str:
        lines = [f"gradient check vs central differences (tol {self.tol:g})"]
        for e in self.entries:
            lines.append(f"  {'ok  ' if e.passed else 'FAIL'} {e.param:<40s} max_rel_err={e.max_rel_err:.3e}")
        lines.append(f"  => {'PASS' if self.passed else 'FAIL'} (worst {self.worst:.3e})")
        return "\n".join(lines)


# Below this magnitude the comparison is absolute: central differences carry
# ~|f|*1e-16/step of roundoff noise, meaningless as a relative target.
_REL_FLOOR = 1e-4


def finite_diff_check(
    f: Callable[[], Tensor],
    params: ParamGroup | dict[str, Tensor],
    step: float = 1e-5,
    tol: float = 1e-4,
) -> GradCheckReport:
    """Compare autodiff gradients of ``f()`` against central finite differences.

    ``f`` must be deterministic for fixed parameters; it is probed twice and
    the check aborts with ``NondeterminismError`` on any discrepancy.
    """
    named = list(params.named()) if isinstance(params, ParamGroup) else list(params.items())
    base = float(f().data.reshape(()))
    again = float(f().data.reshape(()))
    if base != again:
        raise NondeterminismError(
            f"f() is not deterministic: {base!r} != {again!r}; freeze RNG state before checking"
        )

    for _, t in named:
        t.zero_grad()
    backward(f())
    grads = {name: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data)) for name, t in named}

    report = GradCheckReport(tol=tol)
    for name, t in named:
        flat = t.data.reshape(-1)
        fd = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = float(f().data.reshape(()))
            flat[i] = orig - step
            fm = float(f().data.reshape(()))
            flat[i] = orig
            fd[i] = (fp - fm) / (2.0 * step)
        ad = grads[name].reshape(-1)
        denom = np.maximum(np.maximum(np.abs(ad), np.abs(fd)), _REL_FLOOR)
        err = float(np.max(np.abs(ad - fd) / denom)) if flat.size else 0.0
        report.entries.append(GradCheckEntry(name, err, err < tol))
    return report
