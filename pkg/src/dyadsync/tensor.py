"""Dense float64 tensors with a reverse-mode gradient tape.

The engine is deliberately small.  A :class:`Tensor` wraps a numpy
float64 array plus an optional handle into a :class:`Tape`; the tape
records one node per primitive operation during the forward pass
(define-by-run, a fresh tape per training step) and ``Tape.backward``
walks the records in reverse order to accumulate gradients.  Because
nodes are appended in execution order, reverse index order is already a
reverse topological order.

Everything the transformer and the classifier heads need is expressible
with the primitives below; broadcasting follows numpy semantics with
gradient reduction handled by :func:`_unbroadcast`.  Tensors are treated
as immutable values: no operation writes into an input array, so they
are safe to share read-only across threads.
"""

from __future__ import annotations

import math
from typing import Callable, Optional

import numpy as np

from .errors import ContractError, DimensionError, NumericalError, ParameterError
from .rng import stream


class Tensor:
    """Immutable dense float64 array, optionally tracked on a tape."""

    __slots__ = ("data", "tape", "node_id")

    def __init__(self, data, tape: Optional["Tape"] = None, node_id: Optional[int] = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.tape = tape
        self.node_id = node_id

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def tracked(self) -> bool:
        return self.tape is not None

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes) -> "Tensor":
        return transpose(self, axes)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return reduce_mean(self, axis=axis, keepdims=keepdims)

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return subtract(self, other)

    def __rsub__(self, other):
        return subtract(other, self)

    def __mul__(self, other):
        return multiply(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return negative(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise ContractError("tensor/tensor division is not part of the engine; multiply by a reciprocal")
        return multiply(self, 1.0 / float(other))

    def __repr__(self):
        tag = f", node={self.node_id}" if self.tracked else ""
        return f"Tensor(shape={self.shape}{tag})"


class Tape:
    """Ordered record of forward operations for reverse-mode differentiation.

    Each node stores the node ids of its parents (``None`` for untracked
    constants) and a backward callable mapping the node's output gradient
    to one gradient array per parent.  Leaf nodes (parameters, inputs)
    have no backward callable.

    Backward callables must close over bare numpy arrays, never Tensor
    objects: tensors point back at the tape, so capturing one would make
    every finished graph a reference cycle that lingers until a full GC
    pass instead of being freed as soon as the caller drops it.
    """

    __slots__ = ("_parents", "_backwards", "_leaves")

    def __init__(self):
        self._parents: list[tuple] = []
        self._backwards: list[Optional[Callable]] = []
        self._leaves: dict[str, int] = {}

    def __len__(self) -> int:
        return len(self._parents)

    def record(self, parents: tuple, backward: Optional[Callable]) -> int:
        self._parents.append(parents)
        self._backwards.append(backward)
        return len(self._parents) - 1

    def leaf(self, data) -> Tensor:
        """Register raw data as a tracked leaf tensor."""
        arr = np.asarray(data, dtype=np.float64)
        return Tensor(arr, self, self.record((), None))

    def backward(self, output: Tensor) -> list:
        """Gradients of ``output`` w.r.t. every node, indexed by node id.

        ``output`` is seeded with a gradient of ones (a plain 1.0 for the
        scalar losses this package differentiates).  Nodes unreachable
        from ``output`` keep gradient ``None``.
        """
        if output.tape is not self:
            raise ContractError("output tensor does not belong to this tape")
        grads: list = [None] * len(self._parents)
        grads[output.node_id] = np.ones_like(output.data)
        for nid in range(output.node_id, -1, -1):
            grad = grads[nid]
            if grad is None:
                continue
            fn = self._backwards[nid]
            if fn is None:
                continue
            for pid, pgrad in zip(self._parents[nid], fn(grad)):
                if pid is None or pgrad is None:
                    continue
                grads[pid] = pgrad if grads[pid] is None else grads[pid] + pgrad
        return grads


class ParamStore:
    """Named parameter tensors with deterministic (name-sorted) iteration.

    Initialization draws come from the ``init/<scope>`` stream of the
    store's seed, so the same construction order reproduces the same
    parameters bit for bit.
    """

    def __init__(self, seed: int = 0, scope: str = ""):
        self._values: dict[str, Tensor] = {}
        self.rng_seed = seed
        purpose = f"init/{scope}" if scope else "init"
        self._init_rng = stream(seed, purpose)

    def __len__(self) -> int:
        return len(self._values)

    def __contains__(self, name: str) -> bool:
        return name in self._values

    def __getitem__(self, name: str) -> Tensor:
        return self._values[name]

    def names(self) -> list:
        return sorted(self._values)

    def items(self):
        for name in self.names():
            yield name, self._values[name]

    def add(self, name: str, data) -> Tensor:
        if name in self._values:
            raise ContractError(f"parameter {name!r} already exists")
        t = Tensor(data)
        self._values[name] = t
        return t

    def add_uniform(self, name: str, shape) -> Tensor:
        """Add a parameter drawn uniform in [-a, a], a = sqrt(6/(fan_in+fan_out)).

        For 2-d shapes fan_in/fan_out are the two extents; tables and
        vectors fall back to the first and last extents of the shape.
        """
        shape = tuple(shape)
        fan_in = shape[0] if shape else 1
        fan_out = shape[-1] if shape else 1
        a = math.sqrt(6.0 / (fan_in + fan_out))
        return self.add(name, self._init_rng.uniform(-a, a, size=shape))

    def add_zeros(self, name: str, shape) -> Tensor:
        return self.add(name, np.zeros(shape))

    def add_ones(self, name: str, shape) -> Tensor:
        return self.add(name, np.ones(shape))

    def replace(self, name: str, data) -> None:
        """Swap in a new value for an existing parameter (functional update)."""
        if name not in self._values:
            raise ContractError(f"unknown parameter {name!r}")
        self._values[name] = Tensor(data)

    def tracked(self, tape: Optional[Tape]):
        """Map of name -> tensor; tracked leaves when a tape is given.

        With ``tape=None`` the raw (untracked) tensors are returned, which
        gives a gradient-free forward pass.  Leaves are registered on the
        tape under their parameter names so :func:`gradient_of` can find
        them.  Use a fresh tape per forward pass.
        """
        if tape is None:
            return dict(self._values)
        out = {}
        for name, value in self._values.items():
            if name in tape._leaves:
                out[name] = Tensor(value.data, tape, tape._leaves[name])
            else:
                t = tape.leaf(value.data)
                tape._leaves[name] = t.node_id
                out[name] = t
        return out

    def copy_values(self) -> dict:
        return {name: value.data.copy() for name, value in self._values.items()}

    def load_values(self, mapping) -> None:
        for name, data in mapping.items():
            self.replace(name, np.array(data, dtype=np.float64))

    def total_size(self) -> int:
        return sum(v.size for v in self._values.values())


# ---------------------------------------------------------------------------
# primitive operations
# ---------------------------------------------------------------------------


def _wrap(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _tape_of(*tensors) -> Optional[Tape]:
    tape = None
    for t in tensors:
        if t.tape is None:
            continue
        if tape is None:
            tape = t.tape
        elif tape is not t.tape:
            raise ContractError("operands live on different tapes")
    return tape


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum-reduce ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = a.data + b.data
    tape = _tape_of(a, b)
    if tape is None:
        return Tensor(out)
    a_shape, b_shape = a.data.shape, b.data.shape

    def backward(g):
        return _unbroadcast(g, a_shape), _unbroadcast(g, b_shape)

    return Tensor(out, tape, tape.record((a.node_id, b.node_id), backward))


def subtract(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = a.data - b.data
    tape = _tape_of(a, b)
    if tape is None:
        return Tensor(out)
    a_shape, b_shape = a.data.shape, b.data.shape

    def backward(g):
        return _unbroadcast(g, a_shape), _unbroadcast(-g, b_shape)

    return Tensor(out, tape, tape.record((a.node_id, b.node_id), backward))


def multiply(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = a.data * b.data
    tape = _tape_of(a, b)
    if tape is None:
        return Tensor(out)
    ad, bd = a.data, b.data

    def backward(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return Tensor(out, tape, tape.record((a.node_id, b.node_id), backward))


def negative(x) -> Tensor:
    x = _wrap(x)
    if x.tape is None:
        return Tensor(-x.data)

    def backward(g):
        return (-g,)

    return Tensor(-x.data, x.tape, x.tape.record((x.node_id,), backward))


def matmul(a, b) -> Tensor:
    """Matrix product with numpy's stacked-matrix broadcasting.

    Both operands must have ndim >= 2; leading (batch) dimensions
    broadcast and are sum-reduced in the backward pass.
    """
    a, b = _wrap(a), _wrap(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise DimensionError(f"matmul needs ndim >= 2 operands, got {a.shape} and {b.shape}")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise DimensionError(f"cannot contract {a.shape} with {b.shape}")
    out = a.data @ b.data
    tape = _tape_of(a, b)
    if tape is None:
        return Tensor(out)
    ad, bd = a.data, b.data

    def backward(g):
        ga = _unbroadcast(g @ bd.swapaxes(-1, -2), ad.shape)
        gb = _unbroadcast(ad.swapaxes(-1, -2) @ g, bd.shape)
        return ga, gb

    return Tensor(out, tape, tape.record((a.node_id, b.node_id), backward))


def reshape(x, shape) -> Tensor:
    x = _wrap(x)
    out = x.data.reshape(shape)
    if x.tape is None:
        return Tensor(out)
    in_shape = x.data.shape

    def backward(g):
        return (g.reshape(in_shape),)

    return Tensor(out, x.tape, x.tape.record((x.node_id,), backward))


def transpose(x, axes) -> Tensor:
    x = _wrap(x)
    axes = tuple(axes)
    out = x.data.transpose(axes)
    if x.tape is None:
        return Tensor(out)
    inverse = tuple(np.argsort(axes))

    def backward(g):
        return (g.transpose(inverse),)

    return Tensor(out, x.tape, x.tape.record((x.node_id,), backward))


def _expand_reduced(g: np.ndarray, shape: tuple, axis, keepdims: bool) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(g, shape)
    axes = axis if isinstance(axis, tuple) else (axis,)
    axes = tuple(a % len(shape) for a in axes)
    if not keepdims:
        for a in sorted(axes):
            g = np.expand_dims(g, a)
    return np.broadcast_to(g, shape)


def reduce_sum(x, axis=None, keepdims: bool = False) -> Tensor:
    x = _wrap(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)
    if x.tape is None:
        return Tensor(out)
    in_shape = x.data.shape

    def backward(g):
        return (_expand_reduced(g, in_shape, axis, keepdims),)

    return Tensor(out, x.tape, x.tape.record((x.node_id,), backward))


def reduce_mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = _wrap(x)
    out = x.data.mean(axis=axis, keepdims=keepdims)
    if x.tape is None:
        return Tensor(out)
    count = x.data.size if axis is None else np.prod(
        [x.data.shape[a % x.data.ndim] for a in (axis if isinstance(axis, tuple) else (axis,))]
    )
    in_shape = x.data.shape

    def backward(g):
        return (_expand_reduced(g, in_shape, axis, keepdims) / count,)

    return Tensor(out, x.tape, x.tape.record((x.node_id,), backward))


def linear_apply(x, weight, bias) -> Tensor:
    """Affine map ``x @ weight + bias`` over the trailing axis of ``x``."""
    x, weight, bias = _wrap(x), _wrap(weight), _wrap(bias)
    if x.data.shape[-1] != weight.data.shape[-2]:
        raise DimensionError(
            f"linear_apply: input {x.shape} does not match weight {weight.shape}"
        )
    if bias.data.shape != weight.data.shape[-1:]:
        raise DimensionError(
            f"linear_apply: bias {bias.shape} does not match weight {weight.shape}"
        )
    return add(matmul(x, weight), bias)


def softmax_rows(x) -> Tensor:
    """Softmax along the last axis, computed with per-row max subtraction."""
    x = _wrap(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)
    if x.tape is None:
        return Tensor(out)

    def backward(g):
        inner = (g * out).sum(axis=-1, keepdims=True)
        return ((g - inner) * out,)

    return Tensor(out, x.tape, x.tape.record((x.node_id,), backward))


def log_softmax(x) -> Tensor:
    """Log of softmax along the last axis; stable for extreme logits."""
    x = _wrap(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    if x.tape is None:
        return Tensor(out)
    soft = np.exp(out)

    def backward(g):
        return (g - soft * g.sum(axis=-1, keepdims=True),)

    return Tensor(out, x.tape, x.tape.record((x.node_id,), backward))


_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


def gelu(x) -> Tensor:
    """Smooth gated nonlinearity, tanh form: 0.5*x*(1 + tanh(c*(x + a*x^3)))."""
    x = _wrap(x)
    v = x.data
    inner = _GELU_C * (v + _GELU_A * v**3)
    t = np.tanh(inner)
    out = 0.5 * v * (1.0 + t)
    if x.tape is None:
        return Tensor(out)

    def backward(g):
        d_inner = _GELU_C * (1.0 + 3.0 * _GELU_A * v**2)
        deriv = 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t**2) * d_inner
        return (g * deriv,)

    return Tensor(out, x.tape, x.tape.record((x.node_id,), backward))


def layer_norm(x, gain, shift, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then scale+shift."""
    x, gain, shift = _wrap(x), _wrap(gain), _wrap(shift)
    v = x.data
    mu = v.mean(axis=-1, keepdims=True)
    centered = v - mu
    var = (centered**2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out = gain.data * xhat + shift.data
    tape = _tape_of(x, gain, shift)
    if tape is None:
        return Tensor(out)
    gd, gain_shape, shift_shape = gain.data, gain.data.shape, shift.data.shape

    def backward(g):
        g_shift = _unbroadcast(g, shift_shape)
        g_gain = _unbroadcast(g * xhat, gain_shape)
        g_hat = g * gd
        g_x = inv * (
            g_hat
            - g_hat.mean(axis=-1, keepdims=True)
            - xhat * (g_hat * xhat).mean(axis=-1, keepdims=True)
        )
        return g_x, g_gain, g_shift

    parents = (x.node_id, gain.node_id, shift.node_id)
    return Tensor(out, tape, tape.record(parents, backward))


def dropout_apply(x, rate: float, training: bool, rng=None) -> Tensor:
    """Zero elements with probability ``rate`` and rescale survivors.

    In eval mode (or at rate 0) the input tensor is returned unchanged,
    bit for bit.  An active dropout needs an explicit generator so runs
    stay reproducible.
    """
    if not 0.0 <= rate < 1.0:
        raise ParameterError(f"dropout rate must lie in [0, 1), got {rate}")
    x = _wrap(x)
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ContractError("active dropout requires a random generator")
    scale = 1.0 / (1.0 - rate)
    mask = (rng.random(x.data.shape) >= rate) * scale
    out = x.data * mask
    if x.tape is None:
        return Tensor(out)

    def backward(g):
        return (g * mask,)

    return Tensor(out, x.tape, x.tape.record((x.node_id,), backward))


# ---------------------------------------------------------------------------
# gradients
# ---------------------------------------------------------------------------


def gradient_of(loss: Tensor, params: ParamStore) -> dict:
    """d(loss)/d(param) for every parameter in the store.

    Parameters that never entered the computation get zero gradients of
    matching shape.  ``loss`` must be a scalar tracked on a tape that the
    parameters were registered on via ``ParamStore.tracked``.
    """
    if loss.tape is None:
        raise ContractError("loss is not tracked on any tape")
    if loss.size != 1:
        raise ContractError(f"loss must be scalar, got shape {loss.shape}")
    grads = loss.tape.backward(loss)
    out = {}
    for name, value in params.items():
        nid = loss.tape._leaves.get(name)
        g = grads[nid] if nid is not None else None
        out[name] = Tensor(g if g is not None else np.zeros_like(value.data))
    return out


def check_gradients(f, point: ParamStore, eps: float = 1e-5) -> float:
    """Max relative error between analytic gradients and central differences.

    ``f(params, tape)`` must return a scalar tensor and be deterministic
    (no active dropout).  With ``tape=None`` it is evaluated value-only.
    The relative error per parameter element is
    ``|analytic - numeric| / max(1, |numeric|)``.
    """
    tape = Tape()
    loss = f(point, tape)
    analytic = gradient_of(loss, point)

    worst = 0.0
    for name, value in point.items():
        base = value.data
        flat_analytic = analytic[name].data.ravel()
        for idx in range(base.size):
            orig = base.flat[idx]
            shifted = base.copy()
            shifted.flat[idx] = orig + eps
            point.replace(name, shifted)
            up = f(point, None).item()
            shifted = base.copy()
            shifted.flat[idx] = orig - eps
            point.replace(name, shifted)
            down = f(point, None).item()
            point.replace(name, base)
            if not (math.isfinite(up) and math.isfinite(down)):
                raise NumericalError(f"non-finite evaluation while perturbing {name!r}")
            numeric = (up - down) / (2.0 * eps)
            if not math.isfinite(flat_analytic[idx]):
                raise NumericalError(f"non-finite analytic gradient for {name!r}")
            err = abs(flat_analytic[idx] - numeric) / max(1.0, abs(numeric))
            if err > worst:
                worst = err
    return worst
