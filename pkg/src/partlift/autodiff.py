"""Dense float64 tensors with tape-based reverse-mode autodiff and Adam.

Everything trainable in this package (the affinity field, the asset field)
runs on this substrate. Tensors are immutable after construction; gradients
are computed by recording primitive applications on an explicit ``Tape``
and replaying it backwards. Tapes are cheap to rebuild, so optimization
loops construct a fresh tape every step.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes do not conform for the requested primitive."""


class DomainError(ValueError):
    """Input outside a primitive's domain (e.g. log of a non-positive value)."""


class TapeError(RuntimeError):
    """Tape misuse: consumed twice, or loss not a scalar produced on the tape."""


class NondeterministicFunctionError(RuntimeError):
    """A function handed to the gradient checker returned differing values."""


# ---------------------------------------------------------------------------
# Tensor

class Tensor:
    """Immutable dense float64 array.

    ``requires_grad`` marks optimization leaves; ``grad`` is populated by
    :func:`backward`. Construction rejects NaN/Inf unless ``scratch=True``.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, *, scratch: bool = False):
        arr = np.array(data, dtype=np.float64, order="C", copy=True)
        if not scratch and arr.size and not np.isfinite(arr).all():
            raise ValueError("tensor data contains NaN/Inf (pass scratch=True for scratch buffers)")
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None

    @classmethod
    def _wrap(cls, arr: np.ndarray, *, check: bool = True) -> "Tensor":
        # Internal fast path for op outputs: takes ownership of ``arr``.
        if check and arr.size and not np.isfinite(arr).all():
            raise DomainError("primitive produced a non-finite value (overflow?); clamp inputs first")
        out = cls.__new__(cls)
        # note: not ascontiguousarray, which would promote 0-d scalars to 1-d
        arr = np.asarray(arr, dtype=np.float64, order="C")
        if not arr.flags.owndata:
            arr = arr.copy()
        arr.flags.writeable = False
        out.data = arr
        out.requires_grad = False
        out.grad = None
        return out

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

    def __repr__(self) -> str:
        req = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{req})"

    # Operator sugar; scalars are promoted to constant tensors.
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other))

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, shape) -> "Tensor":
        return reshape(self, shape)


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


def constant(data) -> Tensor:
    return Tensor(data, requires_grad=False)


def asconst(arr: np.ndarray) -> Tensor:
    """Wrap a freshly computed float64 array as a constant tensor, no copy.

    Hot-path helper for renderers: the caller hands over ownership and must
    not mutate ``arr`` afterwards. No finiteness validation is performed.
    """
    out = Tensor.__new__(Tensor)
    arr = np.asarray(arr, dtype=np.float64)
    arr.flags.writeable = False
    out.data = arr
    out.requires_grad = False
    out.grad = None
    return out


def parameter(data) -> Tensor:
    return Tensor(data, requires_grad=True)


# ---------------------------------------------------------------------------
# Tape

@dataclass
class _Node:
    inputs: tuple[Tensor, ...]
    output: Tensor
    # grad_fn(g, needs) maps the output gradient to one gradient per input;
    # it may return None for inputs whose ``needs`` flag is False (and for
    # inputs that cannot carry gradient at all), skipping that work.
    grad_fn: Callable[[np.ndarray, tuple[bool, ...]], tuple[Optional[np.ndarray], ...]]


_TAPE_STACK: list["Tape"] = []


class Tape:
    """Ordered record of primitive applications (inputs precede outputs).

    Use as a context manager; primitives executed inside record themselves
    onto the innermost active tape. A tape can be differentiated once.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _TAPE_STACK.pop()
        assert popped is self

    def _record(self, inputs, output, grad_fn) -> None:
        self.nodes.append(_Node(tuple(inputs), output, grad_fn))


def _active_tape() -> Optional[Tape]:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def _emit(inputs: Sequence[Tensor], out_arr: np.ndarray, grad_fn, *, check: bool = False) -> Tensor:
    out = Tensor._wrap(out_arr, check=check)
    tape = _active_tape()
    if tape is not None:
        tape._record(inputs, out, grad_fn)
    return out


def backward(tape: Tape, loss: Tensor, params: Optional[Sequence[Tensor]] = None) -> dict[Tensor, np.ndarray]:
    """Reverse sweep over ``tape`` seeding d(loss)/d(loss) = 1.

    Returns gradients for every requires_grad leaf encountered (or, when
    ``params`` is given, exactly one entry per param, zero-filled for params
    the loss does not depend on). Leaf tensors also get ``.grad`` set;
    non-parameter leaves are left untouched.
    """
    if tape.consumed:
        raise TapeError("tape already consumed by a previous backward pass")
    if loss.data.ndim != 0:
        raise TapeError(f"loss must be scalar, got shape {loss.shape}")
    produced = {id(n.output) for n in tape.nodes}
    if id(loss) not in produced:
        raise TapeError("loss was not produced on this tape")
    tape.consumed = True

    # A tensor needs a gradient if it is a requires_grad leaf or feeds one
    # transitively; nodes whose output is not needed are skipped entirely.
    needed: set[int] = set()
    for node in tape.nodes:
        if any(t.requires_grad or id(t) in needed for t in node.inputs):
            needed.add(id(node.output))

    grads: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=np.float64)}
    outputs = produced
    for node in reversed(tape.nodes):
        g_out = grads.pop(id(node.output), None)
        if g_out is None or id(node.output) not in needed:
            continue
        needs = tuple(t.requires_grad or id(t) in needed for t in node.inputs)
        in_grads = node.grad_fn(g_out, needs)
        for tensor, g in zip(node.inputs, in_grads):
            if g is None:
                continue
            key = id(tensor)
            if key in grads:
                grads[key] = grads[key] + g
            else:
                grads[key] = g

    # Collect per-leaf gradients. A leaf is a tensor that never appears as a
    # node output; only requires_grad leaves are reported/mutated.
    result: dict[Tensor, np.ndarray] = {}
    seen: set[int] = set()
    for node in tape.nodes:
        for tensor in node.inputs:
            key = id(tensor)
            if key in seen or key in outputs or not tensor.requires_grad:
                continue
            seen.add(key)
            g = grads.get(key)
            if g is None:
                g = np.zeros(tensor.shape, dtype=np.float64)
            g = np.broadcast_to(g, tensor.shape).astype(np.float64, copy=True)
            tensor.grad = g
            result[tensor] = g

    if params is not None:
        full: dict[Tensor, np.ndarray] = {}
        for p in params:
            if p in result:
                full[p] = result[p]
            else:
                z = np.zeros(p.shape, dtype=np.float64)
                p.grad = z
                full[p] = z
        return full
    return result


# ---------------------------------------------------------------------------
# Primitives

def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (adjoint of numpy broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from exc


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "add")

    def grad_fn(g, needs):
        return (
            _unbroadcast(g, a.shape) if needs[0] else None,
            _unbroadcast(g, b.shape) if needs[1] else None,
        )

    return _emit((a, b), a.data + b.data, grad_fn)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "sub")

    def grad_fn(g, needs):
        return (
            _unbroadcast(g, a.shape) if needs[0] else None,
            _unbroadcast(-g, b.shape) if needs[1] else None,
        )

    return _emit((a, b), a.data - b.data, grad_fn)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "mul")

    def grad_fn(g, needs):
        return (
            _unbroadcast(g * b.data, a.shape) if needs[0] else None,
            _unbroadcast(g * a.data, b.shape) if needs[1] else None,
        )

    return _emit((a, b), a.data * b.data, grad_fn)


def neg(a: Tensor) -> Tensor:
    return _emit((a,), -a.data, lambda g, needs: (-g,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dims differ, {a.shape} @ {b.shape}")

    def grad_fn(g, needs):
        return (
            g @ b.data.T if needs[0] else None,
            a.data.T @ g if needs[1] else None,
        )

    return _emit((a, b), a.data @ b.data, grad_fn)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0.0

    def grad_fn(g, needs):
        return (g * mask,)

    return _emit((a,), np.where(mask, a.data, 0.0), grad_fn)


def _stable_logistic(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    out = _stable_logistic(a.data)

    def grad_fn(g, needs):
        return (g * out * (1.0 - out),)

    return _emit((a,), out, grad_fn)


def softplus(a: Tensor) -> Tensor:
    out = np.logaddexp(0.0, a.data)
    x = a.data

    def grad_fn(g, needs):
        return (g * _stable_logistic(x),)

    return _emit((a,), out, grad_fn)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)

    def grad_fn(g, needs):
        return (g * out,)

    # exp is the one primitive that overflows silently; keep its check on
    return _emit((a,), out, grad_fn, check=True)


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0.0):
        raise DomainError("log requires strictly positive input; clamp first")
    out = np.log(a.data)

    def grad_fn(g, needs):
        return (g / a.data,)

    return _emit((a,), out, grad_fn)


def sin(a: Tensor) -> Tensor:
    return _emit((a,), np.sin(a.data), lambda g, needs: (g * np.cos(a.data),))


def cos(a: Tensor) -> Tensor:
    return _emit((a,), np.cos(a.data), lambda g, needs: (-g * np.sin(a.data),))


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def grad_fn(g, needs):
        g = np.asarray(g, dtype=np.float64)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _emit((a,), np.asarray(out, dtype=np.float64), grad_fn)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size if axis is None else np.prod(
        [a.shape[ax] for ax in (axis if isinstance(axis, tuple) else (axis,))]
    )

    def grad_fn(g, needs):
        g = np.asarray(g, dtype=np.float64) / count
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _emit((a,), np.asarray(out, dtype=np.float64), grad_fn)


def cumsum(a: Tensor, axis: int = -1) -> Tensor:
    out = np.cumsum(a.data, axis=axis)

    def grad_fn(g, needs):
        return (np.flip(np.cumsum(np.flip(g, axis=axis), axis=axis), axis=axis),)

    return _emit((a,), out, grad_fn)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in (shape if np.iterable(shape) else (shape,)))
    out = a.data.reshape(shape)

    def grad_fn(g, needs):
        return (g.reshape(a.shape),)

    return _emit((a,), out.copy(), grad_fn)


def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis, numerically stabilized by the row max."""
    x = a.data
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def grad_fn(g, needs):
        dot = (g * out).sum(axis=-1, keepdims=True)
        return (out * (g - dot),)

    return _emit((a,), out, grad_fn)


def mse(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mse: shapes {a.shape} vs {b.shape} must match exactly")
    diff = a.data - b.data
    out = np.asarray(np.mean(diff * diff), dtype=np.float64)
    n = max(a.data.size, 1)

    def grad_fn(g, needs):
        base = g * 2.0 * diff / n
        return (base if needs[0] else None, -base if needs[1] else None)

    return _emit((a, b), out, grad_fn)


# ---------------------------------------------------------------------------
# Adam

@dataclass
class AdamState:
    """Per-parameter Adam moments, keyed by position in the param list."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray], state: AdamState) -> list[Tensor]:
    """One bias-corrected Adam update. Returns fresh parameter tensors."""
    if len(params) != len(grads):
        raise ShapeError(f"adam_step: {len(params)} params vs {len(grads)} grads")
    if not state.m:
        state.m = [np.zeros(p.shape) for p in params]
        state.v = [np.zeros(p.shape) for p in params]
    if len(state.m) != len(params):
        raise ShapeError("adam_step: state was initialized for a different param list")
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    new_params: list[Tensor] = []
    for i, (p, g) in enumerate(zip(params, grads)):
        g = np.asarray(g, dtype=np.float64)
        if g.shape != p.shape or state.m[i].shape != p.shape:
            raise ShapeError(f"adam_step: grad/moment shape {g.shape} vs param {p.shape}")
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * (g * g)
        m_hat = state.m[i] / bc1
        v_hat = state.v[i] / bc2
        new_data = p.data - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
        q = Tensor._wrap(new_data)
        q.requires_grad = p.requires_grad
        new_params.append(q)
    return new_params


# ---------------------------------------------------------------------------
# Finite-difference gradient checking

@dataclass
class GradCheckEntry:
    name: str
    max_rel_error: float
    max_abs_error: float


@dataclass
class GradCheckReport:
    entries: list[GradCheckEntry]
    tolerance: float

    @property
    def max_rel_error(self) -> float:
        return max((e.max_rel_error for e in self.entries), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def _rel_err(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # Relative where gradients are O(1)+, absolute below that; keeps finite
    # difference cancellation noise from drowning legitimately tiny gradients.
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1.0)
    return np.abs(a - b) / denom


def finite_diff_check(
    fn: Callable[[Sequence[Tensor]], Tensor],
    params: Sequence[Tensor],
    h: float = 1e-5,
    tolerance: float = 1e-6,
    names: Optional[Sequence[str]] = None,
) -> GradCheckReport:
    """Compare tape gradients of ``fn(params)`` against central differences.

    ``fn`` must be deterministic and scalar-valued; determinism is verified by
    evaluating twice and demanding bit-identical results.
    """
    params = list(params)
    with Tape() as tape:
        loss = fn(params)
    loss2 = fn(params)
    if loss.item() != loss2.item():
        raise NondeterministicFunctionError(
            f"fn returned {loss.item()!r} then {loss2.item()!r} on identical inputs"
        )
    grads = backward(tape, loss, params=params)

    entries: list[GradCheckEntry] = []
    for k, p in enumerate(params):
        tape_grad = grads[p]
        fd = np.zeros(p.shape)
        flat = p.data.reshape(-1)
        fd_flat = fd.reshape(-1)
        for j in range(flat.size):
            bumped = flat.copy()
            bumped[j] = flat[j] + h
            plus = fn(_replace_at(params, k, Tensor(bumped.reshape(p.shape), requires_grad=True))).item()
            bumped[j] = flat[j] - h
            minus = fn(_replace_at(params, k, Tensor(bumped.reshape(p.shape), requires_grad=True))).item()
            fd_flat[j] = (plus - minus) / (2.0 * h)
        err = _rel_err(tape_grad, fd)
        name = names[k] if names else f"param{k}"
        entries.append(GradCheckEntry(name, float(err.max(initial=0.0)), float(np.abs(tape_grad - fd).max(initial=0.0))))
    return GradCheckReport(entries, tolerance)


def _replace_at(params: Sequence[Tensor], index: int, value: Tensor) -> list[Tensor]:
    out = list(params)
    out[index] = value
    return out
