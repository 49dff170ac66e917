"""Minimal reverse-mode differentiation over dense float64 arrays.

Operations executed inside a ``with Tape() as tape:`` block are recorded
when at least one input requires a gradient. ``backward(tape, loss)`` then
walks the recorded nodes in exact reverse order, so gradients are
deterministic for a given tape.

Non-differentiable binarizers (``sign_ste``, ``threshold_ste``) use
straight-through surrogates: the upstream gradient passes where the input
lies inside a closed clip window and is zeroed outside it.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

COUNTERS: Counter = Counter()

_TAPES: list["Tape"] = []


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or Inf."""


class ContractError(RuntimeError):
    """An API precondition was violated."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / other)
        return NotImplemented

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

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

    def __getitem__(self, idx):
        return getitem(self, idx)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Node:
    __slots__ = ("op", "inputs", "out", "backward_fn")

    def __init__(self, op, inputs, out, backward_fn):
        self.op = op
        self.inputs = inputs
        self.out = out
        self.backward_fn = backward_fn


class Tape:
    """Ordered record of differentiable operations."""

    def __init__(self):
        self.nodes: list[Node] = []
        self.backward_done = False

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.remove(self)
        return False

    def __len__(self):
        return len(self.nodes)


def current_tape() -> Tape | None:
    return _TAPES[-1] if _TAPES else None


def custom_op(
    op: str,
    out_data: np.ndarray,
    inputs: Sequence[Tensor],
    backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]],
) -> Tensor:
    """Wrap a forward result and register its vector-Jacobian product.

    ``backward_fn(g)`` receives the gradient of the output and returns one
    gradient (or ``None``) per input, each shaped like that input.
    """
    out_data = np.asarray(out_data, dtype=np.float64)
    if not np.isfinite(out_data).all():
        raise NonFiniteError(f"{op} produced non-finite values")
    out = Tensor(out_data)
    tape = current_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.nodes.append(Node(op, tuple(inputs), out, backward_fn))
    return out


def backward(tape: Tape, loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Accumulate d(loss)/d(leaf) for every leaf that requires a gradient.

    Leaf gradients are also stored on ``leaf.grad`` (overwriting). Returns a
    mapping from leaf tensor to gradient array.
    """
    if loss.data.size != 1:
        raise ContractError(f"loss must be scalar, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    owners: dict[int, Tensor] = {id(loss): loss}
    produced = {id(node.out) for node in tape.nodes}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.backward_fn(g)):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = np.array(gi, dtype=np.float64, copy=True)
                owners[key] = inp
    tape.backward_done = True
    result = {}
    for key, g in grads.items():
        if key in produced:
            continue
        leaf = owners[key]
        leaf.grad = g
        result[leaf] = g
    return result


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == tuple(shape):
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# -- elementwise --------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return custom_op(
        "add", a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb))
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return custom_op(
        "sub", a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb))
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return custom_op(
        "mul",
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
    )


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return custom_op("scale", a.data * c, (a,), lambda g: (g * c,))


# -- shape ---------------------------------------------------------------------


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return custom_op("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return custom_op("transpose", a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def swap_last(a) -> Tensor:
    axes = tuple(range(a.ndim - 2)) + (a.ndim - 1, a.ndim - 2)
    return transpose(a, axes)


def getitem(a, idx) -> Tensor:
    a = as_tensor(a)

    def bw(g):
        out = np.zeros_like(a.data)
        np.add.at(out, idx, g)
        return (out,)

    return custom_op("getitem", a.data[idx], (a,), bw)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]
    return custom_op(
        "concat",
        np.concatenate([t.data for t in tensors], axis=axis),
        tensors,
        lambda g: tuple(np.split(g, cuts, axis=axis)),
    )


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return custom_op("sum", a.data.sum(axis=axis, keepdims=keepdims), (a,), bw)


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return scale(tsum(a, axis, keepdims), 1.0 / n)


# -- linear algebra -------------------------------------------------------------


def matmul(a, b) -> Tensor:
    """Batched matrix product with numpy broadcasting of leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ValueError(f"matmul shape mismatch {a.shape} @ {b.shape}")
    COUNTERS["dense_matmul"] += 1
    ad, bd = a.data, b.data

    def bw(g):
        if bd.ndim == 2 and ad.ndim > 2:
            ga = g @ bd.T
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            return ga, gb
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return custom_op("matmul", ad @ bd, (a, b), bw)


# -- nonlinearities ---------------------------------------------------------------


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    # full Jacobian y_i (delta_ij - y_j), applied as a vector product
    return custom_op(
        "softmax", y, (x,), lambda g: (y * (g - (g * y).sum(axis=axis, keepdims=True)),)
    )


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(x) -> Tensor:
    """Tanh-approximated GELU."""
    x = as_tensor(x)
    xd = x.data
    u = _GELU_C * (xd + 0.044715 * xd**3)
    t = np.tanh(u)

    def bw(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * xd**2)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * du),)

    return custom_op("gelu", 0.5 * xd * (1.0 + t), (x,), bw)


def layernorm(x, gamma, beta, eps: float = 1e-6) -> Tensor:
    """Normalise over the last axis, then apply an affine map."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    gd = gamma.data

    def bw(g):
        dxhat = g * gd
        dx = inv * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        flat = g.reshape(-1, g.shape[-1])
        dgamma = (flat * xhat.reshape(flat.shape)).sum(axis=0)
        dbeta = flat.sum(axis=0)
        return dx, dgamma, dbeta

    return custom_op("layernorm", xhat * gd + beta.data, (x, gamma, beta), bw)


# -- straight-through binarizers ---------------------------------------------------


@dataclass(frozen=True)
class SteSpec:
    """Clip half-width of a straight-through sign; broadcastable to its input."""

    alpha: object = 1.0

    def __post_init__(self):
        a = np.asarray(self.alpha.data if isinstance(self.alpha, Tensor) else self.alpha)
        if np.any(~(a > 0)):
            raise ValueError("STE clip width must be positive")


def _alpha_data(alpha) -> np.ndarray:
    if isinstance(alpha, SteSpec):
        alpha = alpha.alpha
    return alpha.data if isinstance(alpha, Tensor) else np.asarray(alpha, dtype=np.float64)


def sign_ste(x, spec=1.0) -> Tensor:
    """sign(x / alpha) forward; gradient gated by 1{|x| <= alpha} backward.

    The clip bound is closed, so points with ``|x| == alpha`` pass gradient.
    ``alpha`` receives no gradient through this op.
    """
    x = as_tensor(x)
    alpha = _alpha_data(spec)
    if np.any(~(alpha > 0)):
        raise ValueError("STE clip width must be positive")
    mask = np.abs(x.data) <= alpha
    # alpha > 0, so sign(x / alpha) == sign(x)
    out = (x.data >= 0) * 2.0 - 1.0
    return custom_op("sign_ste", out, (x,), lambda g: (g * mask,))


def threshold_ste(x, tau, alpha) -> Tensor:
    """{0, 1} step at ``tau`` with a straight-through window of half-width alpha.

    Backward passes ``g`` to ``x`` and ``-g`` to ``tau`` where
    ``|x - tau| <= alpha``.
    """
    x, tau = as_tensor(x), as_tensor(tau)
    alpha = _alpha_data(alpha)
    d = x.data - tau.data
    mask = np.abs(d) <= alpha
    ts = tau.shape
    return custom_op(
        "threshold_ste",
        (d >= 0).astype(np.float64),
        (x, tau),
        lambda g: (g * mask, -_unbroadcast(g * mask, ts)),
    )


# -- checking -----------------------------------------------------------------------


def numerical_grad(f: Callable[[], float], t: Tensor, eps: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar ``f()`` w.r.t. ``t.data`` (in place)."""
    g = np.zeros_like(t.data)
    flat, gflat = t.data.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        fp = f()
        flat[i] = old - eps
        fm = f()
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * eps)
    return g


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """Max elementwise |a - n| / max(|a|, |n|, floor)."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0
