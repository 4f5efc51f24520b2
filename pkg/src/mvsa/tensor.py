"""Dense float64 tensors with reverse-mode automatic differentiation.

Just enough of an array substrate for the models in this package: each
operation records its inputs and a backward closure, and Tensor.backward()
propagates gradients from a scalar loss through the recorded graph in
reverse topological order.  Everything computes in float64 so that the
finite-difference checks in grad_check are decisive; numpy supplies the
raw array arithmetic underneath.

Tensors may be handed between threads, but a single graph must only be
mutated by one thread at a time.  Forward evaluation under no_grad() over
shared immutable parameters is safe to run concurrently.
"""

from __future__ import annotations

from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError, DataError, NumericError, ShapeError
from .rng import RngState

_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block (forward-only evaluation)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """A dense float64 array plus an optional gradient buffer.

    Non-leaf tensors remember their parents and a closure that scatters the
    incoming gradient back onto them.  requires_grad marks trainable leaves;
    it propagates to results of any operation that touches one.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    # -- basic introspection ------------------------------------------------

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
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # -- autodiff -----------------------------------------------------------

    def backward(self) -> None:
        """Propagate gradients from this scalar back through the graph."""
        if self.data.size != 1:
            raise ShapeError(f"backward() starts from a scalar, got shape {self.shape}")
        if not np.isfinite(self.data).all():
            raise NumericError("backward() from a non-finite loss")
        order = _toposort(self)
        for t in order:
            if t.grad is None:
                t.grad = np.zeros_like(t.data)
        self.grad = np.ones_like(self.data)
        for t in reversed(order):
            if t._backward is not None:
                t._backward(t.grad)

    # -- operator sugar -----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(other, mul(self, -1.0))

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent):
        return pow_(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean_(self, axis, keepdims)

    def exp(self) -> "Tensor":
        return exp(self)

    def log(self) -> "Tensor":
        return log(self)

    def sqrt(self) -> "Tensor":
        return sqrt(self)

    def tanh(self) -> "Tensor":
        return tanh(self)


def _toposort(root: Tensor) -> list[Tensor]:
    """Iterative post-order DFS over the recorded graph."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    """Build a result tensor, recording the graph only when grad is enabled."""
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad or p._parents for p in parents):
        out.requires_grad = any(p.requires_grad for p in parents)
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient down to the shape the operand had before broadcasting."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _accum(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


# -- elementwise arithmetic ------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data + b.data

    def backward(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(g, b.shape))

    return _make(out, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data * b.data

    def backward(g):
        _accum(a, _unbroadcast(g * b.data, a.shape))
        _accum(b, _unbroadcast(g * a.data, b.shape))

    return _make(out, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data / b.data

    def backward(g):
        _accum(a, _unbroadcast(g / b.data, a.shape))
        _accum(b, _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _make(out, (a, b), backward)


def pow_(a, exponent: float) -> Tensor:
    a = _as_tensor(a)
    e = float(exponent)
    out = a.data ** e

    def backward(g):
        _accum(a, g * e * a.data ** (e - 1.0))

    return _make(out, (a,), backward)


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.data)

    def backward(g):
        _accum(a, g * out)

    return _make(out, (a,), backward)


def log(a) -> Tensor:
    a = _as_tensor(a)
    out = np.log(a.data)

    def backward(g):
        _accum(a, g / a.data)

    return _make(out, (a,), backward)


def sqrt(a) -> Tensor:
    a = _as_tensor(a)
    out = np.sqrt(a.data)

    def backward(g):
        _accum(a, g * 0.5 / out)

    return _make(out, (a,), backward)


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    out = np.tanh(a.data)

    def backward(g):
        _accum(a, g * (1.0 - out * out))

    return _make(out, (a,), backward)


def relu(a) -> Tensor:
    a = _as_tensor(a)
    out = np.maximum(a.data, 0.0)

    def backward(g):
        _accum(a, g * (a.data > 0.0))

    return _make(out, (a,), backward)


def clamp_min(a, floor: float) -> Tensor:
    """max(a, floor); gradient is zero wherever the floor is active."""
    a = _as_tensor(a)
    out = np.maximum(a.data, float(floor))

    def backward(g):
        _accum(a, g * (a.data > float(floor)))

    return _make(out, (a,), backward)


def masked_fill(a, keep: np.ndarray, value: float) -> Tensor:
    """Replace entries where keep == 0 by value; gradients flow only to kept entries.

    keep is a plain ndarray (no gradient); value may be -inf, which later
    turns into an exact zero weight under softmax.
    """
    a = _as_tensor(a)
    keep_bool = np.asarray(keep) != 0
    out = np.where(keep_bool, a.data, value)

    def backward(g):
        _accum(a, _unbroadcast(np.where(keep_bool, g, 0.0), a.shape))

    return _make(out, (a,), backward)


# -- shape manipulation ----------------------------------------------------


def reshape(a, shape: tuple[int, ...]) -> Tensor:
    a = _as_tensor(a)
    out = a.data.reshape(shape)

    def backward(g):
        _accum(a, g.reshape(a.shape))

    return _make(out, (a,), backward)


def transpose(a, axes: tuple[int, ...]) -> Tensor:
    a = _as_tensor(a)
    out = a.data.transpose(axes)
    inverse = np.argsort(axes)

    def backward(g):
        _accum(a, g.transpose(inverse))

    return _make(out, (a,), backward)


def take(a, index) -> Tensor:
    """Basic slicing/indexing (ints, slices, tuples thereof) with gradient."""
    a = _as_tensor(a)
    out = a.data[index]

    def backward(g):
        if a.grad is None:
            a.grad = np.zeros_like(a.data)
        a.grad[index] += g

    return _make(out, (a,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            _accum(t, g[tuple(idx)])

    return _make(out, tuple(tensors), backward)


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(g, a.shape).copy())

    return _make(out, (a,), backward)


def mean_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    out = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size if axis is None else a.data.shape[axis]

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(g, a.shape) / count)

    return _make(out, (a,), backward)


# -- linear algebra ---------------------------------------------------------


def matmul(a, b) -> Tensor:
    """Batched matrix product over the last two axes, broadcasting the rest."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} vs {b.shape}")
    out = np.matmul(a.data, b.data)

    def backward(g):
        _accum(a, _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape))
        _accum(b, _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape))

    return _make(out, (a, b), backward)


def linear(x, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """x @ weight + bias with weight of shape [in, out]."""
    out = matmul(x, weight)
    if bias is not None:
        out = add(out, bias)
    return out


def embedding_lookup(table: Tensor, ids: np.ndarray) -> Tensor:
    """Gather rows of table by integer ids; backward scatter-adds."""
    table = _as_tensor(table)
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise ShapeError(f"embedding ids must be integers, got dtype {ids.dtype}")
    out = table.data[ids]

    def backward(g):
        if table.grad is None:
            table.grad = np.zeros_like(table.data)
        np.add.at(table.grad, ids, g)

    return _make(out, (table,), backward)


# -- normalization and probability ops ---------------------------------------


def softmax(a, axis: int = -1) -> Tensor:
    """Numerically stable softmax along axis.

    NaN or +inf input is rejected; -inf is admitted (it yields an exact zero
    weight, which is how hard pre-softmax masks are realized) as long as at
    least one finite entry remains per row.
    """
    a = _as_tensor(a)
    if np.isnan(a.data).any() or np.isposinf(a.data).any():
        raise NumericError("softmax input contains NaN or +inf")
    with np.errstate(invalid="ignore"):  # an all--inf row yields NaN, caught below
        shifted = a.data - a.data.max(axis=axis, keepdims=True)
        e = np.exp(shifted)
        denom = e.sum(axis=axis, keepdims=True)
        if (denom == 0.0).any() or np.isnan(denom).any():
            raise NumericError("softmax row with no admissible entries")
        out = e / denom

    def backward(g):
        inner = (g * out).sum(axis=axis, keepdims=True)
        _accum(a, out * (g - inner))

    return _make(out, (a,), backward)


def log_softmax(a, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    if np.isnan(a.data).any() or np.isposinf(a.data).any():
        raise NumericError("log_softmax input contains NaN or +inf")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def backward(g):
        soft = np.exp(out)
        _accum(a, g - soft * g.sum(axis=axis, keepdims=True))

    return _make(out, (a,), backward)


def layer_norm(x, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean and unit variance, then affine."""
    x = _as_tensor(x)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm affine shapes {gain.shape}/{bias.shape} do not match feature dim {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xn = xc * inv
    out = xn * gain.data + bias.data

    def backward(g):
        dxn = g * gain.data
        dx = inv * (dxn - dxn.mean(axis=-1, keepdims=True) - xn * (dxn * xn).mean(axis=-1, keepdims=True))
        _accum(x, dx)
        reduce_axes = tuple(range(g.ndim - 1))
        _accum(gain, (g * xn).sum(axis=reduce_axes))
        _accum(bias, g.sum(axis=reduce_axes))

    return _make(out, (x, gain, bias), backward)


def dropout(x, p: float, rng: RngState | None, training: bool) -> Tensor:
    """Zero entries with probability p and scale survivors by 1/(1-p).

    Identity (the same tensor object) in eval mode or at p == 0.
    """
    if not 0.0 <= p < 1.0:
        raise ConfigError(f"dropout probability must lie in [0, 1), got {p}")
    x = _as_tensor(x)
    if not training or p == 0.0:
        return x
    if rng is None:
        raise ConfigError("dropout in training mode needs an RngState")
    keep = (rng.uniform(size=x.shape) >= p) / (1.0 - p)
    out = x.data * keep

    def backward(g):
        _accum(x, g * keep)

    return _make(out, (x,), backward)


# -- convolution -------------------------------------------------------------


def conv1d(x, kernel: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """1-D convolution over time: [B,T,Cin] (or [T,Cin]) with kernel [k,Cin,Cout].

    Output length is floor((T + 2*padding - k)/stride) + 1.
    """
    x = _as_tensor(x)
    kernel = _as_tensor(kernel)
    if kernel.ndim != 3:
        raise ShapeError(f"conv1d kernel must be [k,Cin,Cout], got {kernel.shape}")
    k, cin, cout = kernel.shape
    if k < 1 or stride < 1 or padding < 0:
        raise ConfigError(f"conv1d needs k>=1, stride>=1, padding>=0, got k={k}, stride={stride}, padding={padding}")
    squeeze = x.ndim == 2
    xb = x.data[None] if squeeze else x.data
    if xb.ndim != 3 or xb.shape[-1] != cin:
        raise ShapeError(f"conv1d input {x.shape} incompatible with kernel {kernel.shape}")
    b, t, _ = xb.shape
    t_out = (t + 2 * padding - k) // stride + 1
    if t_out < 1:
        raise DataError(f"conv1d input too short: T={t} with k={k}, stride={stride}, padding={padding}")
    xp = np.pad(xb, ((0, 0), (padding, padding), (0, 0))) if padding else xb
    # windows: [B, T_out, k, Cin], flattened so the product is a single GEMM
    win = np.lib.stride_tricks.sliding_window_view(xp, k, axis=1)[:, ::stride]
    win = np.ascontiguousarray(win.transpose(0, 1, 3, 2)).reshape(b * t_out, k * cin)
    out = (win @ kernel.data.reshape(k * cin, cout)).reshape(b, t_out, cout)
    if squeeze:
        out = out[0]

    def backward(g):
        gb = (g[None] if squeeze else g).reshape(b * t_out, cout)
        _accum(kernel, (win.T @ gb).reshape(k, cin, cout))
        dwin = (gb @ kernel.data.reshape(k * cin, cout).T).reshape(b, t_out, k, cin)
        dxp = np.zeros((b, t + 2 * padding, cin))
        for j in range(k):
            dxp[:, j : j + stride * t_out : stride] += dwin[:, :, j]
        dx = dxp[:, padding : padding + t] if padding else dxp
        _accum(x, dx[0] if squeeze else dx)

    return _make(out, (x, kernel), backward)


# -- verification ------------------------------------------------------------


def grad_check(
    f: Callable[[], Tensor],
    tensors: Sequence[Tensor],
    h: float = 1e-5,
    coords_per_tensor: int = 6,
    rng: RngState | None = None,
) -> float:
    """Compare analytic gradients of a scalar-valued f against central differences.

    f is re-evaluated with individual coordinates of the given tensors
    perturbed by +-h, so it must be deterministic (run with dropout off or a
    frozen rng).  Up to coords_per_tensor coordinates are sampled per tensor.
    Returns the max over sampled coordinates of
    |analytic - numeric| / max(1, |numeric|).
    """
    rng = rng or RngState(0)
    loss = f()
    if loss.size != 1:
        raise ShapeError(f"grad_check needs a scalar loss, got shape {loss.shape}")
    if not np.isfinite(loss.data).all():
        raise NumericError("grad_check loss is not finite")
    for t in tensors:
        t.zero_grad()
    loss.backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in tensors]

    max_err = 0.0
    for t, ana in zip(tensors, analytic):
        n = t.data.size
        if n <= coords_per_tensor:
            coords = np.arange(n)
        else:
            coords = np.unique(rng.integers(0, n, size=coords_per_tensor))
        flat = t.data.reshape(-1)
        for c in coords:
            orig = flat[c]
            with no_grad():
                flat[c] = orig + h
                up = f().item()
                flat[c] = orig - h
                down = f().item()
            flat[c] = orig
            numeric = (up - down) / (2.0 * h)
            err = abs(ana.reshape(-1)[c] - numeric) / max(1.0, abs(numeric))
            max_err = max(max_err, err)
    return max_err
