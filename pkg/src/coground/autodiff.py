"""Dense float64 tensors with reverse-mode automatic differentiation.

Operations record onto an explicit :class:`Tape` used as a context manager;
outside any active tape they are plain numpy computations, which keeps the
finite-difference oracle cheap. Everything is double precision: the point of
this package is verification, not speed, and the gradient-check tolerances
assume f64.
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, DimensionError

_LOCAL = threading.local()


def _tape_stack() -> list["Tape"]:
    stack = getattr(_LOCAL, "stack", None)
    if stack is None:
        stack = []
        _LOCAL.stack = stack
    return stack


def active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """A dense float64 array, immutable by convention after creation.

    ``requires_grad`` marks trainable leaves; operation outputs inherit the
    flag so downstream ops keep recording. ``grad`` accumulates across
    backward passes until :meth:`zero_grad`.
    """

    __slots__ = ("data", "requires_grad", "grad", "_produced")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._produced = False  # True when created by a recorded op

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.data.shape)

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a scalar, got shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        """A view of the same values that does not propagate gradients."""
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __neg__(self) -> "Tensor":
        return neg(self)

    def __mul__(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)


class _Node:
    __slots__ = ("inputs", "output", "vjp")

    def __init__(self, inputs: tuple[Tensor, ...], output: Tensor, vjp):
        self.inputs = inputs
        self.output = output
        self.vjp = vjp


class Tape:
    """Ordered record of operations.

    Nodes are appended in creation order, so the list is already a
    topological sort; backward walks it once in reverse. Distinct tapes may
    run concurrently (the active-tape stack is thread local), but a single
    tape is strictly single-threaded.
    """

    def __init__(self):
        self._nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> bool:
        popped = _tape_stack().pop()
        if popped is not self:
            raise RuntimeError("tapes exited out of order")
        return False

    def __len__(self) -> int:
        return len(self._nodes)

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(leaf) into every requires_grad leaf.

        Repeated calls keep accumulating until the leaves are zeroed.
        """
        if loss.data.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        flows: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        holders: dict[int, Tensor] = {id(loss): loss}
        for node in reversed(self._nodes):
            g = flows.pop(id(node.output), None)
            holders.pop(id(node.output), None)
            if g is None:
                continue
            for t, gi in zip(node.inputs, node.vjp(g)):
                if gi is None:
                    continue
                key = id(t)
                if key in flows:
                    flows[key] = flows[key] + gi
                else:
                    flows[key] = gi
                    holders[key] = t
        # whatever was never produced by a node on this tape is a leaf
        for key, g in flows.items():
            t = holders[key]
            if t.requires_grad and not t._produced:
                t.grad = g.copy() if t.grad is None else t.grad + g


def backward(loss: Tensor, tape: Tape) -> None:
    tape.backward(loss)


def _forward(inputs: tuple[Tensor, ...], out_data: np.ndarray, vjp) -> Tensor:
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out = Tensor(out_data, requires_grad=True)
        out._produced = True
        tape._nodes.append(_Node(inputs, out, vjp))
        return out
    return Tensor(out_data)


# ---------------------------------------------------------------------------
# elementwise and linear algebra
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; also accepts a 1-D bias broadcast over matrix rows."""
    if a.data.shape == b.data.shape:
        def vjp(g):
            return g, g
    elif a.data.ndim == 2 and b.data.ndim == 1 and a.data.shape[1] == b.data.shape[0]:
        def vjp(g):
            return g, g.sum(axis=0)
    else:
        raise DimensionError(f"add: incompatible shapes {a.shape} vs {b.shape}")
    return _forward((a, b), a.data + b.data, vjp)


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise DimensionError(f"sub: incompatible shapes {a.shape} vs {b.shape}")

    def vjp(g):
        return g, -g

    return _forward((a, b), a.data - b.data, vjp)


def neg(a: Tensor) -> Tensor:
    return _forward((a,), -a.data, lambda g: (-g,))


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise (Hadamard) product of same-shape tensors."""
    if a.data.shape != b.data.shape:
        raise DimensionError(f"mul: incompatible shapes {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data

    def vjp(g):
        return g * bd, g * ad

    return _forward((a, b), ad * bd, vjp)


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    return _forward((a,), a.data * s, lambda g: (g * s,))


def shift(a: Tensor, s: float) -> Tensor:
    """Add a python constant elementwise (gradient passes through)."""
    return _forward((a,), a.data + float(s), lambda g: (g,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data

    def vjp(g):
        return g @ bd.T, ad.T @ g

    return _forward((a, b), ad @ bd, vjp)


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise DimensionError(f"transpose: need a matrix, got shape {a.shape}")
    return _forward((a,), a.data.T.copy(), lambda g: (g.T,))


def split_heads(a: Tensor, n_heads: int) -> Tensor:
    """(T, D) -> (n_heads, T, D // n_heads), a pure index permutation."""
    t, d = a.data.shape
    if d % n_heads != 0:
        raise DimensionError(f"split_heads: width {d} not divisible by {n_heads} heads")
    dh = d // n_heads
    out = a.data.reshape(t, n_heads, dh).transpose(1, 0, 2).copy()
    return _forward((a,), out, lambda g: (g.transpose(1, 0, 2).reshape(t, d),))


def merge_heads(a: Tensor) -> Tensor:
    """(n_heads, T, dh) -> (T, n_heads * dh), inverse of split_heads."""
    h, t, dh = a.data.shape
    out = a.data.transpose(1, 0, 2).reshape(t, h * dh).copy()
    return _forward((a,), out, lambda g: (g.reshape(t, h, dh).transpose(1, 0, 2),))


def swap_last_axes(a: Tensor) -> Tensor:
    out = a.data.swapaxes(-1, -2).copy()
    return _forward((a,), out, lambda g: (g.swapaxes(-1, -2),))


def bmm(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over the leading axis."""
    if a.data.ndim != 3 or b.data.ndim != 3 or a.data.shape[2] != b.data.shape[1] or a.data.shape[0] != b.data.shape[0]:
        raise DimensionError(f"bmm: incompatible shapes {a.shape} vs {b.shape}")
    ad_, bd = a.data, b.data

    def vjp(g):
        return g @ bd.swapaxes(-1, -2), ad_.swapaxes(-1, -2) @ g

    return _forward((a, b), ad_ @ bd, vjp)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _forward((a,), np.where(mask, a.data, 0.0), lambda g: (g * mask,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _forward((a,), out, lambda g: (g * out,))


def log(a: Tensor, floor: float | None = None) -> Tensor:
    """Natural log; with ``floor`` the argument is clamped from below first.

    Clamped coordinates get zero gradient, which keeps cross-entropies
    finite and checkable even on degenerate inputs.
    """
    if floor is not None:
        clamped = np.maximum(a.data, floor)
        mask = a.data > floor
        return _forward((a,), np.log(clamped), lambda g: (g * mask / clamped,))
    ad = a.data
    return _forward((a,), np.log(ad), lambda g: (g / ad,))


def sum_all(a: Tensor) -> Tensor:
    shape = a.data.shape
    return _forward((a,), np.asarray(a.data.sum()), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size
    shape = a.data.shape
    return _forward(
        (a,), np.asarray(a.data.mean()), lambda g: (np.broadcast_to(g / n, shape).copy(),)
    )


def sum_axis(a: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.data.shape).copy(),)

    return _forward((a,), a.data.sum(axis=axis, keepdims=keepdims), vjp)


def dot(a: Tensor, b: Tensor) -> Tensor:
    """Inner product of two same-shape tensors, as a scalar."""
    return sum_all(mul(a, b))


# ---------------------------------------------------------------------------
# normalization and softmax family
# ---------------------------------------------------------------------------


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Stable softmax along ``axis`` (max-subtraction before exponentiation)."""
    if a.data.size == 0:
        return _forward((a,), a.data.copy(), lambda g: (g,))
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        inner = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - inner),)

    return _forward((a,), out, vjp)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    if a.data.size == 0:
        return _forward((a,), a.data.copy(), lambda g: (g,))
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse

    def vjp(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _forward((a,), out, vjp)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit population variance.

    ``eps`` sits inside the square root; with unit gain and zero bias a
    constant row maps to zeros.
    """
    d = x.data.shape[-1]
    if gain.data.shape != (d,) or bias.data.shape != (d,):
        raise DimensionError(
            f"layer_norm: gain/bias shapes {gain.shape}/{bias.shape} do not match last dim {d}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = xhat * gain.data + bias.data
    gd = gain.data

    def vjp(g):
        dxhat = g * gd
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        dx = inv * (dxhat - m1 - xhat * m2)
        axes = tuple(range(x.data.ndim - 1))
        return dx, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    return _forward((x, gain, bias), out, vjp)


def l2_normalize(a: Tensor, eps: float = 1e-12) -> Tensor:
    """Scale each row (last axis) to unit Euclidean norm."""
    norm = np.sqrt((a.data * a.data).sum(axis=-1, keepdims=True))
    norm = np.maximum(norm, eps)
    out = a.data / norm

    def vjp(g):
        inner = (g * out).sum(axis=-1, keepdims=True)
        return ((g - out * inner) / norm,)

    return _forward((a,), out, vjp)


# ---------------------------------------------------------------------------
# shape plumbing
# ---------------------------------------------------------------------------


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not parts:
        raise ContractError("concat of zero tensors")
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        slicer = [slice(None)] * g.ndim
        grads = []
        for i in range(len(sizes)):
            slicer[axis] = slice(offsets[i], offsets[i + 1])
            grads.append(g[tuple(slicer)])
        return tuple(grads)

    return _forward(tuple(parts), np.concatenate([p.data for p in parts], axis=axis), vjp)


def narrow(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    slicer = [slice(None)] * a.data.ndim
    slicer[axis] = slice(start, stop)
    slicer = tuple(slicer)
    shape = a.data.shape

    def vjp(g):
        full = np.zeros(shape)
        full[slicer] = g
        return (full,)

    return _forward((a,), a.data[slicer].copy(), vjp)


def gather_rows(a: Tensor, idx) -> Tensor:
    """Select rows of a matrix; duplicate indices are allowed."""
    idx = np.asarray(idx, dtype=np.intp)
    shape = a.data.shape

    def vjp(g):
        full = np.zeros(shape)
        np.add.at(full, idx, g)
        return (full,)

    return _forward((a,), a.data[idx].copy(), vjp)


def embedding_lookup(table: Tensor, ids) -> Tensor:
    """Rows of an embedding table for a sequence of integer ids."""
    return gather_rows(table, ids)


def gather_last(a: Tensor, idx) -> Tensor:
    """Index the last axis of a 2-D tensor with an index matrix.

    a is (H, M) and idx is (T, S); the result is (H, T, S) with
    out[h, i, j] = a[h, idx[i, j]]. Duplicate indices accumulate on the
    way back.
    """
    idx = np.asarray(idx, dtype=np.intp)
    if a.data.ndim != 2 or idx.ndim != 2:
        raise DimensionError(f"gather_last: need (H, M) and (T, S), got {a.shape} and {idx.shape}")
    shape = a.data.shape

    def vjp(g):
        full = np.zeros(shape)
        for h in range(shape[0]):
            np.add.at(full[h], idx.reshape(-1), g[h].reshape(-1))
        return (full,)

    return _forward((a,), a.data[:, idx].copy(), vjp)


def pool_rows(a: Tensor, groups: Sequence[Sequence[int]]) -> Tensor:
    """Mean over each group of rows; one output row per group.

    An empty group list yields a 0-row matrix, which downstream ops accept.
    """
    d = a.data.shape[1]
    out = np.zeros((len(groups), d))
    for i, grp in enumerate(groups):
        if len(grp) == 0:
            raise ContractError("pool_rows: empty group")
        out[i] = a.data[list(grp)].mean(axis=0)
    shape = a.data.shape

    def vjp(g):
        full = np.zeros(shape)
        for i, grp in enumerate(groups):
            full[list(grp)] += g[i] / len(grp)
        return (full,)

    return _forward((a,), out, vjp)


def select(a: Tensor, rows, cols) -> Tensor:
    """Pick matrix entries at (rows[i], cols[i]) pairs, as a vector."""
    rows = np.asarray(rows, dtype=np.intp)
    cols = np.asarray(cols, dtype=np.intp)
    shape = a.data.shape

    def vjp(g):
        full = np.zeros(shape)
        np.add.at(full, (rows, cols), g)
        return (full,)

    return _forward((a,), a.data[rows, cols].copy(), vjp)


def smooth_l1(a: Tensor, beta: float = 1.0) -> Tensor:
    """Elementwise smooth-L1: 0.5 x^2 / beta inside |x| < beta, |x| - beta/2 outside."""
    absx = np.abs(a.data)
    inside = absx < beta
    out = np.where(inside, 0.5 * a.data * a.data / beta, absx - 0.5 * beta)

    def vjp(g):
        return (g * np.where(inside, a.data / beta, np.sign(a.data)),)

    return _forward((a,), out, vjp)


# ---------------------------------------------------------------------------
# finite-difference oracle
# ---------------------------------------------------------------------------


def finite_diff(loss_fn: Callable[[], float], param: Tensor, step: float = 1e-5) -> np.ndarray:
    """Central-difference gradient estimate of ``loss_fn`` w.r.t. ``param``.

    ``loss_fn`` must be deterministic and re-read ``param.data`` on every
    call; the parameter is perturbed in place one coordinate at a time and
    restored afterwards. Single-threaded by design.
    """
    if step <= 0:
        raise ContractError("finite_diff: step must be positive")
    flat = param.data.reshape(-1)
    grad = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        f_plus = float(loss_fn())
        flat[i] = orig - step
        f_minus = float(loss_fn())
        flat[i] = orig
        grad[i] = (f_plus - f_minus) / (2.0 * step)
    return grad.reshape(param.data.shape)


def max_rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """max over coordinates of |a - n| / max(1e-8, |a| + |n|)."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(1e-8, np.abs(a) + np.abs(n))
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - n) / denom))


def gradient_check(
    loss_builder: Callable[[], Tensor],
    params: dict[str, Tensor],
    step: float = 1e-5,
) -> dict[str, float]:
    """Max relative error between tape gradients and finite differences.

    ``loss_builder`` rebuilds the loss from scratch (it is called once under
    a fresh tape for the analytic pass and many times tape-free for the
    numeric pass). Returns one error per parameter name.
    """
    for p in params.values():
        p.zero_grad()
    with Tape() as tape:
        loss = loss_builder()
    tape.backward(loss)
    analytic = {
        name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
        for name, p in params.items()
    }
    for p in params.values():
        p.zero_grad()

    def value() -> float:
        return loss_builder().item()

    return {
        name: max_rel_error(analytic[name], finite_diff(value, p, step))
        for name, p in params.items()
    }
