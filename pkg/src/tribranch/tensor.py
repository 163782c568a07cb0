"""Dense float tensors with reverse-mode automatic differentiation.

The engine is deliberately small: tensors wrap contiguous numpy arrays,
every operation records its inputs and a backward closure, and
``backward()`` walks the recorded graph once in reverse topological
order.  Graphs are rebuilt on every forward pass (define-by-run), which
keeps the semantics of a training loop trivially correct.

Broadcasting is restricted to scalar-with-tensor; anything fancier must
be spelled out by the caller.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ComputeGraph",
    "no_grad",
    "apply_op",
    "elementwise",
    "add",
    "sub",
    "mul",
    "negate",
    "relu",
    "exp",
    "log",
    "matmul",
    "tsum",
    "reshape",
    "concat",
    "softmax_channel",
    "grad_check",
    "GradCheckReport",
]

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference / finite differences)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """N-dimensional dense float array, optionally tracked by the autodiff graph.

    ``data`` is always a contiguous row-major numpy array of a floating
    dtype.  ``grad`` stays ``None`` until a backward pass deposits
    something; repeated backward passes accumulate into it.  Only leaf
    tensors (no parents) receive ``grad``.
    """

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float32)
        if arr.ndim and not arr.flags["C_CONTIGUOUS"]:
            # ascontiguousarray would also promote 0-d scalars to shape (1,)
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Optional[Callable[[np.ndarray], list]] = None
        self._op: str = "leaf"

    # -- bookkeeping ---------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.size == 1 else self._not_scalar()

    def _not_scalar(self):
        raise ValueError(f"item() on tensor of shape {self.shape}")

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, op={self._op!r})"

    # -- operator sugar --------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return negate(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def relu(self):
        return relu(self)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sum(self, axis=None):
        return tsum(self, axis=axis)

    def reshape(self, shape):
        return reshape(self, shape)

    def backward(self):
        backward(self)


def apply_op(
    data: np.ndarray,
    parents: Sequence[Tensor],
    backward_fn: Callable[[np.ndarray], list],
    op: str,
) -> Tensor:
    """Wrap an op result into the graph.

    ``backward_fn`` receives the upstream gradient and returns
    ``[(parent, grad_contribution), ...]`` for every parent that needs
    one.  This is the extension point used by the convolution and the
    fused loss ops outside this module.
    """
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
        out._op = op
    return out


# -- graph -----------------------------------------------------------------


@dataclass
class GraphNode:
    op: str
    input_ids: tuple[int, ...]
    tensor: Tensor


class ComputeGraph:
    """Topologically ordered view of everything reachable from a root tensor."""

    def __init__(self, nodes: list[GraphNode]):
        self.nodes = nodes

    @classmethod
    def from_root(cls, root: Tensor) -> "ComputeGraph":
        order: list[GraphNode] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            t, expanded = stack.pop()
            if expanded:
                order.append(GraphNode(t._op, tuple(id(p) for p in t._parents), t))
                continue
            if id(t) in seen:
                continue
            seen.add(id(t))
            stack.append((t, True))
            for p in t._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        return cls(order)


def backward(root: Tensor):
    """Populate ``grad`` on every requires-grad leaf reachable from ``root``.

    ``root`` must be scalar.  Repeated calls accumulate (grads are not
    reset here; see ``SgdOptimizer.step`` / ``zero_grad``).
    """
    if root.size != 1:
        raise ValueError(f"backward() root must be scalar, got shape {root.shape}")
    if not root.requires_grad:
        return
    graph = ComputeGraph.from_root(root)
    flowing: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    for node in reversed(graph.nodes):
        t = node.tensor
        g = flowing.pop(id(t), None)
        if g is None:
            continue
        if t._backward is not None:
            for parent, contrib in t._backward(g):
                if not parent.requires_grad:
                    continue
                pid = id(parent)
                if pid in flowing:
                    flowing[pid] = flowing[pid] + contrib
                else:
                    flowing[pid] = (
                        contrib if contrib.shape == parent.data.shape else np.broadcast_to(contrib, parent.data.shape).copy()
                    )
        elif t.requires_grad and t.is_leaf:
            if t.grad is None:
                t.grad = np.array(g, dtype=t.dtype, copy=True).reshape(t.shape)
            else:
                t.grad = t.grad + g.reshape(t.shape)


# -- elementwise ops ---------------------------------------------------------


def _lift(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def _check_pair(a: Tensor, b: Tensor, op: str):
    if a.dtype != b.dtype:
        raise ValueError(f"{op}: dtype mismatch {a.dtype} vs {b.dtype}")
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _to_operand_shape(g: np.ndarray, t: Tensor) -> np.ndarray:
    # Undo the scalar broadcast: a scalar operand collects the full sum.
    if g.shape == t.data.shape:
        return g
    return np.asarray(g.sum(), dtype=g.dtype).reshape(t.data.shape)


def add(a: Tensor, b) -> Tensor:
    b = _lift(b, a)
    _check_pair(a, b, "add")
    return apply_op(
        a.data + b.data,
        (a, b),
        lambda g: [(a, _to_operand_shape(g, a)), (b, _to_operand_shape(g, b))],
        "add",
    )


def sub(a: Tensor, b) -> Tensor:
    b = _lift(b, a)
    _check_pair(a, b, "sub")
    return apply_op(
        a.data - b.data,
        (a, b),
        lambda g: [(a, _to_operand_shape(g, a)), (b, _to_operand_shape(-g, b))],
        "sub",
    )


def mul(a: Tensor, b) -> Tensor:
    b = _lift(b, a)
    _check_pair(a, b, "mul")
    return apply_op(
        a.data * b.data,
        (a, b),
        lambda g: [(a, _to_operand_shape(g * b.data, a)), (b, _to_operand_shape(g * a.data, b))],
        "mul",
    )


def negate(a: Tensor) -> Tensor:
    return apply_op(-a.data, (a,), lambda g: [(a, -g)], "negate")


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0)
    return apply_op(out, (a,), lambda g: [(a, g * (a.data > 0))], "relu")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return apply_op(out, (a,), lambda g: [(a, g * out)], "exp")


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise ValueError("log: non-positive input")
    return apply_op(np.log(a.data), (a,), lambda g: [(a, g / a.data)], "log")


_ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "negate": negate,
    "relu": relu,
    "exp": exp,
    "log": log,
}


def elementwise(op: str, a: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """Dispatch-by-name front end over the elementwise op set."""
    if op not in _ELEMENTWISE:
        raise ValueError(f"unknown elementwise op {op!r}")
    fn = _ELEMENTWISE[op]
    if op in ("add", "sub", "mul"):
        if b is None:
            raise ValueError(f"{op} needs two operands")
        return fn(a, b)
    if b is not None:
        raise ValueError(f"{op} is unary")
    return fn(a)


# -- structural ops ----------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError(f"matmul: expected 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: inner dimensions disagree, {a.shape} x {b.shape}")
    if a.dtype != b.dtype:
        raise ValueError(f"matmul: dtype mismatch {a.dtype} vs {b.dtype}")
    return apply_op(
        a.data @ b.data,
        (a, b),
        lambda g: [(a, g @ b.data.T), (b, a.data.T @ g)],
        "matmul",
    )


def tsum(a: Tensor, axis: Optional[int] = None) -> Tensor:
    """Sum over one axis, or over everything (scalar result)."""
    if axis is None:
        out = np.asarray(a.data.sum(), dtype=a.dtype)

        def back(g):
            return [(a, np.broadcast_to(g, a.data.shape))]

        return apply_op(out, (a,), back, "sum")
    ax = axis if axis >= 0 else a.data.ndim + axis

    def back_axis(g):
        return [(a, np.broadcast_to(np.expand_dims(g, ax), a.data.shape))]

    return apply_op(a.data.sum(axis=ax), (a,), back_axis, "sum")


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    return apply_op(
        a.data.reshape(shape),
        (a,),
        lambda g: [(a, g.reshape(a.data.shape))],
        "reshape",
    )


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    if not tensors:
        raise ValueError("concat of nothing")
    ax = axis if axis >= 0 else tensors[0].data.ndim + axis
    dt = tensors[0].dtype
    for t in tensors[1:]:
        if t.dtype != dt:
            raise ValueError("concat: dtype mismatch")
    out = np.concatenate([t.data for t in tensors], axis=ax)
    sizes = [t.data.shape[ax] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def back(g):
        contribs = []
        sl = [slice(None)] * g.ndim
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            sl[ax] = slice(lo, hi)
            contribs.append((t, np.ascontiguousarray(g[tuple(sl)])))
        return contribs

    return apply_op(out, tuple(tensors), back, "concat")


def softmax_channel(logits: Tensor) -> Tensor:
    """Softmax over the trailing (channel) axis, stabilized per pixel."""
    x = logits.data
    if not np.all(np.isfinite(x)):
        raise ValueError("softmax_channel: non-finite input")
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        dot = (g * y).sum(axis=-1, keepdims=True)
        return [(logits, y * (g - dot))]

    return apply_op(y, (logits,), back, "softmax_channel")


# -- gradient checking -------------------------------------------------------


@dataclass
class GradCheckEntry:
    name: str
    max_rel_error: float
    ok: bool


@dataclass
class GradCheckReport:
    entries: list[GradCheckEntry]
    tolerance: float

    @property
    def passed(self) -> bool:
        return all(e.ok for e in self.entries)

    @property
    def worst(self) -> float:
        return max((e.max_rel_error for e in self.entries), default=0.0)

    def lines(self) -> list[str]:
        return [
            f"{'ok  ' if e.ok else 'FAIL'} {e.name}: max rel err {e.max_rel_error:.3e}"
            for e in self.entries
        ]


def _rel_error(a: float, n: float, zero_tol: float) -> float:
    m = max(abs(a), abs(n))
    if m < zero_tol:
        return 0.0
    return abs(a - n) / m


def grad_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    step: float = 1e-5,
    tolerance: float = 1e-4,
    names: Optional[Sequence[str]] = None,
    zero_tol: float = 1e-5,
) -> GradCheckReport:
    """Compare analytic gradients of scalar ``f()`` against central differences.

    ``f`` must be a deterministic function of the current values of
    ``params`` (it is re-evaluated many times).  Run this with float64
    tensors; float32 cannot separate truncation error from real bugs.
    """
    for p in params:
        p.zero_grad()
    root = f()
    root.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    entries = []
    for idx, p in enumerate(params):
        name = names[idx] if names else f"param{idx}"
        worst = 0.0
        flat = p.data.reshape(-1)
        ana = analytic[idx].reshape(-1)
        for i in range(flat.size):
            keep = flat[i]
            with no_grad():
                flat[i] = keep + step
                f_plus = f().item()
                flat[i] = keep - step
                f_minus = f().item()
            flat[i] = keep
            numeric = (f_plus - f_minus) / (2.0 * step)
            worst = max(worst, _rel_error(float(ana[i]), numeric, zero_tol))
        entries.append(GradCheckEntry(name, worst, worst < tolerance))
    return GradCheckReport(entries, tolerance)
