"""Dense float64 tensors with a reverse-mode autodiff tape and AdamW.

Every differentiable operation executed while at least one input requires a
gradient appends a node to the calling thread's tape.  ``backward`` walks the
tape once in reverse, accumulates gradients into leaf tensors and clears it.

    >>> x = Tensor([3.0], requires_grad=True)
    >>> backward((x * x).sum())
    >>> x.grad
    array([6.])
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import MissingGradientError, NonFiniteError, ShapeError, TapeError, FrozenModelError

LAYER_NORM_EPS = 1e-5
LEAKY_SLOPE = 0.01
MASK_FILL = -1e9

_state = threading.local()


def _tape() -> list:
    tape = getattr(_state, "tape", None)
    if tape is None:
        tape = _state.tape = []
    return tape


def grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable tape recording in the current thread."""
    prev = grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


def tape_size() -> int:
    return len(_tape())


def clear_tape() -> None:
    _tape().clear()


def _check_finite(arr: np.ndarray, what: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite value in {what}")


class Tensor:
    """A row-major float64 array with optional gradient tracking."""

    __slots__ = ("data", "requires_grad", "grad", "frozen", "name", "_node")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, _check: bool = True):
        arr = np.array(data, dtype=np.float64) if not isinstance(data, np.ndarray) or data.dtype != np.float64 else data
        if _check:
            _check_finite(arr, f"tensor {name or ''}".strip())
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.frozen = False
        self.name = name
        self._node = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, _check=False)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


@dataclass
class _Node:
    out: Tensor
    parents: tuple
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    op: str


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn, op: str) -> Tensor:
    _check_finite(data, f"output of {op}")
    out = Tensor(data, _check=False)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        node = _Node(out, parents, backward_fn, op)
        out._node = node
        _tape().append(node)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(op: str, *shapes) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(*shapes)
    except ValueError:
        raise ShapeError(f"{op}: shapes {' and '.join(map(str, shapes))} do not broadcast") from None


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a.shape, b.shape)
    sa, sb = a.shape, b.shape
    ra, rb = a.requires_grad, b.requires_grad
    return _result(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, sa) if ra else None, _unbroadcast(g, sb) if rb else None),
        "add",
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return _result(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a.shape, b.shape)
    ad, bd = a.data, b.data
    ra, rb = a.requires_grad, b.requires_grad
    return _result(
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape) if ra else None, _unbroadcast(g * ad, bd.shape) if rb else None),
        "mul",
    )


def relu(x: Tensor) -> Tensor:
    # derivative at exactly 0 is 0, matching the >0 activation-state rule
    active = x.data > 0
    return _result(np.where(active, x.data, 0.0), (x,), lambda g: (g * active,), "relu")


def leaky_relu(x: Tensor, slope: float = LEAKY_SLOPE) -> Tensor:
    factor = np.where(x.data > 0, 1.0, slope)
    return _result(x.data * factor, (x,), lambda g: (g * factor,), "leaky_relu")


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _result(y, (x,), lambda g: (g * (1.0 - y * y),), "tanh")


def sqrt(x: Tensor) -> Tensor:
    if (x.data < 0).any():
        raise NonFiniteError("sqrt of a negative value")
    y = np.sqrt(x.data)
    safe = np.where(y > 0, y, 1.0)
    return _result(y, (x,), lambda g: (np.where(y > 0, g / (2.0 * safe), 0.0),), "sqrt")


# ---------------------------------------------------------------------------
# linear algebra and shape


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul: batch dims of {a.shape} and {b.shape} do not broadcast") from None
    ad, bd = a.data, b.data
    if bd.ndim == 2 and ad.ndim > 2:
        # fold leading dims into one GEMM
        a2 = ad.reshape(-1, ad.shape[-1])

        def backward_2d(g):
            g2 = g.reshape(-1, g.shape[-1])
            ga = (g2 @ bd.T).reshape(ad.shape) if a.requires_grad else None
            gb = a2.T @ g2 if b.requires_grad else None
            return ga, gb

        return _result((a2 @ bd).reshape(ad.shape[:-1] + bd.shape[-1:]), (a, b), backward_2d, "matmul")

    def backward(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if b.requires_grad else None
        return ga, gb

    return _result(ad @ bd, (a, b), backward, "matmul")


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        y = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {x.shape} as {tuple(shape)}") from None
    src = x.shape
    return _result(y, (x,), lambda g: (g.reshape(src),), "reshape")


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    axes = tuple(range(x.ndim))[::-1] if axes is None else tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError(f"transpose: axes {axes} invalid for shape {x.shape}")
    inverse = tuple(np.argsort(axes))
    return _result(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inverse),), "transpose")


def broadcast_to(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    _broadcast_shape("broadcast_to", x.shape, shape)
    src = x.shape
    return _result(np.broadcast_to(x.data, shape).copy(), (x,), lambda g: (_unbroadcast(g, src),), "broadcast_to")


def take(x: Tensor, index) -> Tensor:
    """Basic or advanced indexing; gradients scatter back with ``np.add.at``."""
    try:
        y = x.data[index]
    except IndexError as exc:
        raise ShapeError(f"index {index!r} invalid for shape {x.shape}: {exc}") from None
    src = x.shape

    parts = index if isinstance(index, tuple) else (index,)
    fancy = any(isinstance(i, (list, np.ndarray)) for i in parts)

    def backward(g):
        out = np.zeros(src)
        if fancy:
            np.add.at(out, index, g)
        else:
            out[index] = g
        return (out,)

    return _result(np.array(y, dtype=np.float64), (x,), backward, "take")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat: no inputs")
    nd = tensors[0].ndim
    ax = axis % nd if nd else 0
    for t in tensors:
        if t.ndim != nd or t.shape[:ax] + t.shape[ax + 1 :] != tensors[0].shape[:ax] + tensors[0].shape[ax + 1 :]:
            raise ShapeError(f"concat along axis {axis}: shapes {[t.shape for t in tensors]} disagree")
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _result(np.concatenate([t.data for t in tensors], axis=ax), tuple(tensors), backward, "concat")


def embedding(table: Tensor, ids) -> Tensor:
    """Gather rows of ``table`` (V, d) for integer ``ids`` of any shape."""
    ids = np.asarray(ids)
    if ids.dtype.kind not in "iu":
        raise ShapeError(f"embedding: ids must be integers, got {ids.dtype}")
    if table.ndim != 2:
        raise ShapeError(f"embedding: table must be 2-D, got {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(f"embedding: id out of range for table {table.shape}")
    src = table.shape

    def backward(g):
        out = np.zeros(src)
        np.add.at(out, ids.reshape(-1), g.reshape(-1, src[1]))
        return (out,)

    return _result(table.data[ids], (table,), backward, "embedding")


# ---------------------------------------------------------------------------
# reductions and normalisation


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    src = x.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return _result(np.asarray(x.data.sum(axis=axis, keepdims=keepdims), dtype=np.float64), (x,), backward, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(tsum(x, axis, keepdims), 1.0 / count)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    return _result(y, (x,), lambda g: (y * (g - (g * y).sum(axis=axis, keepdims=True)),), "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse
    p = np.exp(y)
    return _result(y, (x,), lambda g: (g - p * g.sum(axis=axis, keepdims=True),), "log_softmax")


def layer_norm(x: Tensor, gain: Tensor | None = None, bias: Tensor | None = None, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalise over the last axis; an all-equal row maps to zeros."""
    if gain is not None and gain.shape != x.shape[-1:]:
        raise ShapeError(f"layer_norm: gain {gain.shape} does not match feature dim of {x.shape}")
    if bias is not None and bias.shape != x.shape[-1:]:
        raise ShapeError(f"layer_norm: bias {bias.shape} does not match feature dim of {x.shape}")
    n = x.shape[-1]
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def backward(g):
        gx = g if gain is None else g * gain.data
        dx = inv * (gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        grads = [dx]
        if gain is not None:
            grads.append((g * xhat).reshape(-1, n).sum(axis=0) if gain.requires_grad else None)
        if bias is not None:
            grads.append(g.reshape(-1, n).sum(axis=0) if bias.requires_grad else None)
        return grads

    y = xhat
    if gain is not None:
        y = y * gain.data
    if bias is not None:
        y = y + bias.data
    parents = tuple(t for t in (x, gain, bias) if t is not None)
    return _result(y, parents, backward, "layer_norm")


def l2_norm(x: Tensor, axis=None) -> Tensor:
    """Euclidean norm; the gradient at the origin is taken as zero."""
    sq = (x.data * x.data).sum(axis=axis, keepdims=True)
    norm = np.sqrt(sq)
    safe = np.where(norm > 0, norm, 1.0)
    out = norm.reshape(()) if axis is None else np.squeeze(norm, axis=axis)

    def backward(g):
        g = np.asarray(g).reshape(norm.shape) if axis is None else np.expand_dims(g, axis)
        return (np.where(norm > 0, g * x.data / safe, 0.0),)

    return _result(np.asarray(out, dtype=np.float64), (x,), backward, "l2_norm")


def cross_entropy(logits: Tensor, targets, weights=None) -> Tensor:
    """Mean negative log-likelihood of integer ``targets`` under ``logits`` (N, V).

    ``weights`` (N,) optionally reweights rows, e.g. zero for padded positions;
    the mean is taken over the weight mass.
    """
    targets = np.asarray(targets)
    if logits.ndim != 2 or targets.shape != logits.shape[:1]:
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs targets {targets.shape}")
    if targets.size and (targets.min() < 0 or targets.max() >= logits.shape[1]):
        raise ShapeError("cross_entropy: target id out of range")
    w = np.ones(len(targets)) if weights is None else np.asarray(weights, dtype=np.float64)
    mass = w.sum()
    if mass <= 0:
        raise ShapeError("cross_entropy: no positions carry weight")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(len(targets))
    nll = lse - z[rows, targets]
    loss = float((w * nll).sum() / mass)

    def backward(g):
        p = np.exp(z - lse[:, None])
        p[rows, targets] -= 1.0
        return (p * (w / mass)[:, None] * g,)

    return _result(np.asarray(loss), (logits,), backward, "cross_entropy")


_OPS: dict[str, Callable] = {
    "matmul": matmul,
    "add": add,
    "sub": sub,
    "mul": mul,
    "relu": relu,
    "leaky_relu": leaky_relu,
    "tanh": tanh,
    "sqrt": sqrt,
    "softmax": softmax,
    "log_softmax": log_softmax,
    "layer_norm": layer_norm,
    "embedding": embedding,
    "concat": lambda *ts, axis=0: concat(ts, axis=axis),
    "cross_entropy": cross_entropy,
    "reshape": reshape,
    "transpose": transpose,
    "broadcast_to": broadcast_to,
    "sum": tsum,
    "mean": mean,
    "l2_norm": l2_norm,
    "take": take,
}


def forward_op(op_kind: str, *inputs, **kwargs) -> Tensor:
    """Run a named operation, e.g. ``forward_op("relu", x)``."""
    try:
        fn = _OPS[op_kind]
    except KeyError:
        raise ValueError(f"unknown op {op_kind!r}; known: {sorted(_OPS)}") from None
    return fn(*inputs, **kwargs)


# ---------------------------------------------------------------------------
# backward


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every leaf reachable from the scalar ``loss``."""
    if loss.data.size != 1:
        raise TapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = _tape()
    if loss._node is None:
        if not tape and not loss.requires_grad:
            raise TapeError("backward called with an empty tape")
        if loss.requires_grad:
            loss.grad = np.ones_like(loss.data) if loss.grad is None else loss.grad + 1.0
        tape.clear()
        return
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        for parent, pg in zip(node.parents, node.backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if parent._node is None:
                pg = np.asarray(pg, dtype=np.float64).reshape(parent.shape)
                parent.grad = pg.copy() if parent.grad is None else parent.grad + pg
            else:
                key = id(parent)
                grads[key] = grads[key] + pg if key in grads else pg
    tape.clear()


# ---------------------------------------------------------------------------
# optimiser


@dataclass
class AdamW:
    """Decoupled-weight-decay Adam over a fixed parameter list."""

    params: list[Tensor]
    learning_rate: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    weight_decay: float = 0.01
    step_count: int = 0
    first_moment: list[np.ndarray] = field(default_factory=list)
    second_moment: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        self.params = list(self.params)
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("betas must lie in (0, 1)")
        if self.weight_decay < 0 or self.epsilon <= 0:
            raise ValueError("weight_decay must be >= 0 and epsilon > 0")
        for p in self.params:
            if p.frozen:
                raise FrozenModelError(f"parameter {p.name or '?'} belongs to a frozen model")
        self.first_moment = [np.zeros_like(p.data) for p in self.params]
        self.second_moment = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        for i, p in enumerate(self.params):
            if p.grad is None:
                raise MissingGradientError(f"parameter {p.name or i} has no gradient")
        self.step_count += 1
        t = self.step_count
        lr = self.learning_rate
        c1 = 1.0 - self.beta1**t
        c2 = 1.0 - self.beta2**t
        for p, m, v in zip(self.params, self.first_moment, self.second_moment):
            g = p.grad
            if self.weight_decay:
                p.data *= 1.0 - lr * self.weight_decay
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.epsilon)
            _check_finite(p.data, f"parameter {p.name or ''} after AdamW step")


def adamw_step(state: AdamW, params: Iterable[Tensor] | None = None) -> None:
    """Apply one update; ``params`` must match the ones ``state`` was built with."""
    if params is not None and [id(p) for p in params] != [id(p) for p in state.params]:
        raise ValueError("params differ from those registered with the optimizer")
    state.step()
