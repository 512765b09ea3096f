"""Dense float64 tensors with reverse-mode differentiation.

Every op records its parents and a closure that maps the output gradient to
parent gradients. Shapes must match exactly; the only implicit expansion is
multiplication by a Python scalar. Row-wise bias addition and tiling across a
batch are explicit ops (``add_bias``, ``repeat``) so the graph stays auditable.
"""

from __future__ import annotations

import contextlib
import contextvars
import math
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

from .errors import ContractError, DegenerateInputError, DimensionError, NumericalError

_GRAD_ENABLED = contextvars.ContextVar("grad_enabled", default=True)


@contextlib.contextmanager
def no_grad():
    """Evaluate ops without recording a graph."""
    token = _GRAD_ENABLED.set(False)
    try:
        yield
    finally:
        _GRAD_ENABLED.reset(token)


class Tensor:
    """An n-dimensional float64 array, optionally tracked for gradients."""

    __slots__ = ("data", "requires_grad", "grad", "op", "_parents", "_backward", "__weakref__")

    def __init__(self, data, requires_grad=False):
        arr = np.array(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NumericalError("tensor data contains NaN or Inf")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.op = "leaf"
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self):
        return self.data

    def detach(self):
        return Tensor(self.data.copy())

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise DimensionError("tensor / tensor is not supported; divide by a Python scalar")
        return scale(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)


def tensor(data, requires_grad=False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _result(data, parents, backward_fn, op) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NumericalError(f"{op} produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    track = _GRAD_ENABLED.get() and any(p.requires_grad for p in parents)
    out.requires_grad = track
    out._parents = tuple(parents) if track else ()
    out._backward = backward_fn if track else None
    return out


def _check_same(a: Tensor, b: Tensor, op: str):
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ")


# --------------------------------------------------------------------------- elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "add")
    return _result(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "sub")
    return _result(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "mul")
    ad, bd = a.data, b.data
    return _result(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _result(a.data * c, (a,), lambda g: (g * c,), "scale")


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add a vector of length ``x.shape[-1]`` to every row of ``x``."""
    if b.ndim != 1 or x.shape[-1] != b.shape[0]:
        raise DimensionError(f"add_bias: bias {b.shape} does not match rows of {x.shape}")
    n = b.shape[0]
    return _result(x.data + b.data, (x, b), lambda g: (g, g.reshape(-1, n).sum(axis=0)), "add_bias")


def gelu(x: Tensor) -> Tensor:
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd / math.sqrt(2.0)))

    def backward(g):
        pdf = np.exp(-0.5 * xd * xd) / math.sqrt(2.0 * math.pi)
        return (g * (cdf + xd * pdf),)

    return _result(xd * cdf, (x,), backward, "gelu")


def exp(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        y = np.exp(x.data)
    return _result(y, (x,), lambda g: (g * y,), "exp")


# --------------------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes must be identical."""
    if a.ndim < 2 or b.ndim < 2 or a.ndim != b.ndim or a.shape[:-2] != b.shape[:-2] \
            or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        return g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g

    return _result(ad @ bd, (a, b), backward, "matmul")


def transpose(a: Tensor) -> Tensor:
    """Swap the last two axes."""
    if a.ndim < 2:
        raise DimensionError(f"transpose needs at least 2 axes, got {a.shape}")
    return _result(np.swapaxes(a.data, -1, -2).copy(), (a,),
                   lambda g: (np.swapaxes(g, -1, -2),), "transpose")


def permute(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise DimensionError(f"permute: {axes} is not a permutation of {a.ndim} axes")
    inverse = tuple(np.argsort(axes))
    return _result(np.transpose(a.data, axes).copy(), (a,),
                   lambda g: (np.transpose(g, inverse),), "permute")


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != a.size:
        raise DimensionError(f"reshape: cannot view {a.shape} as {shape}")
    old = a.shape
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w (+ b)`` applied to the last axis of an arbitrarily batched ``x``."""
    if w.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise DimensionError(f"linear: input {x.shape} does not match weight {w.shape}")
    lead = x.shape[:-1]
    flat = x if x.ndim == 2 else reshape(x, (int(np.prod(lead)), x.shape[-1]))
    out = matmul(flat, w)
    if b is not None:
        out = add_bias(out, b)
    return out if x.ndim == 2 else reshape(out, lead + (w.shape[1],))


# --------------------------------------------------------------------------- structure


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise DimensionError("concat of an empty list")
    nd = tensors[0].ndim
    axis = axis % nd
    for t in tensors[1:]:
        if t.ndim != nd or t.shape[:axis] != tensors[0].shape[:axis] \
                or t.shape[axis + 1:] != tensors[0].shape[axis + 1:]:
            raise DimensionError(
                f"concat along axis {axis}: shapes {[t.shape for t in tensors]} do not conform")
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward, "concat")


def slice_axis(a: Tensor, start: int, stop: int, axis: int = 0) -> Tensor:
    axis = axis % a.ndim
    if not 0 <= start <= stop <= a.shape[axis]:
        raise DimensionError(f"slice [{start}:{stop}] out of range for axis {axis} of {a.shape}")
    index = (slice(None),) * axis + (slice(start, stop),)
    shape = a.shape

    def backward(g):
        full = np.zeros(shape)
        full[index] = g
        return (full,)

    return _result(a.data[index].copy(), (a,), backward, "slice")


def split(a: Tensor, sizes: Sequence[int], axis: int = 0) -> list[Tensor]:
    if sum(sizes) != a.shape[axis]:
        raise DimensionError(f"split sizes {list(sizes)} do not sum to extent {a.shape[axis]}")
    out, start = [], 0
    for s in sizes:
        out.append(slice_axis(a, start, start + s, axis))
        start += s
    return out


def select(a: Tensor, index: int, axis: int = 0) -> Tensor:
    """Pick one position along ``axis`` and drop that axis."""
    axis = axis % a.ndim
    n = a.shape[axis]
    if not -n <= index < n:
        raise IndexError(f"index {index} out of range for axis {axis} of {a.shape}")
    index = index % n
    key = (slice(None),) * axis + (index,)
    shape = a.shape

    def backward(g):
        full = np.zeros(shape)
        full[key] = g
        return (full,)

    return _result(a.data[key].copy(), (a,), backward, "select")


def repeat(a: Tensor, n: int) -> Tensor:
    """Stack ``n`` copies of ``a`` along a new leading axis."""
    if n < 1:
        raise DimensionError(f"repeat count must be positive, got {n}")
    data = np.broadcast_to(a.data, (n,) + a.shape).copy()
    return _result(data, (a,), lambda g: (g.sum(axis=0),), "repeat")


def embedding(table: Tensor, ids) -> Tensor:
    """Gather rows of ``table`` for integer ``ids`` of any shape."""
    ids = np.asarray(ids)
    if ids.dtype.kind not in "iu":
        raise TypeError("embedding ids must be integers")
    if table.ndim != 2:
        raise DimensionError(f"embedding table must be 2-D, got {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"token id out of range for vocabulary of {table.shape[0]}")
    shape = table.shape

    def backward(g):
        full = np.zeros(shape)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, shape[1]))
        return (full,)

    return _result(table.data[ids], (table,), backward, "embedding")


# --------------------------------------------------------------------------- reductions


def sum_all(a: Tensor) -> Tensor:
    shape = a.shape
    return _result(np.array(a.data.sum()), (a,), lambda g: (np.full(shape, float(g)),), "sum")


def mean(a: Tensor, axis: int | None = None) -> Tensor:
    """Arithmetic mean over one axis (or all elements when ``axis`` is None)."""
    shape = a.shape
    if axis is None:
        n = a.size
        return _result(np.array(a.data.mean()), (a,),
                       lambda g: (np.full(shape, float(g) / n),), "mean")
    axis = axis % a.ndim
    n = shape[axis]

    def backward(g):
        return (np.broadcast_to(np.expand_dims(g, axis), shape) / n,)

    return _result(a.data.mean(axis=axis), (a,), backward, "mean")


# --------------------------------------------------------------------------- normalisation


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _result(y, (x,), backward, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    y = shifted - lse
    p = np.exp(y)

    def backward(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return _result(y, (x,), backward, "log_softmax")


def cross_entropy(logits: Tensor, label) -> Tensor:
    """``-log softmax(logits)[label]``.

    ``logits`` of shape (C,) takes an int label; shape (B, C) takes B labels and
    returns the batch mean.
    """
    if logits.ndim == 1:
        labels = np.array([label])
        z = logits.data[None, :]
    elif logits.ndim == 2:
        labels = np.asarray(label).reshape(-1)
        if labels.shape[0] != logits.shape[0]:
            raise DimensionError(f"{labels.shape[0]} labels for {logits.shape[0]} rows of logits")
        z = logits.data
    else:
        raise DimensionError(f"cross_entropy expects (C,) or (B, C) logits, got {logits.shape}")
    C = z.shape[1]
    if labels.dtype.kind not in "iu" or labels.min() < 0 or labels.max() >= C:
        raise IndexError(f"label(s) {labels.tolist()} out of range for {C} classes")
    B = z.shape[0]
    shifted = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(B)
    loss = np.mean(lse - shifted[rows, labels])
    p = np.exp(shifted - lse[:, None])
    shape = logits.shape

    def backward(g):
        d = p.copy()
        d[rows, labels] -= 1.0
        return ((float(g) / B) * d.reshape(shape),)

    return _result(np.array(loss), (logits,), backward, "cross_entropy")


def l2_normalize(x: Tensor, axis: int = -1) -> Tensor:
    norm = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True))
    if np.any(norm == 0.0):
        raise DegenerateInputError("cannot normalise a zero-norm vector")
    y = x.data / norm

    def backward(g):
        return ((g - y * (g * y).sum(axis=axis, keepdims=True)) / norm,)

    return _result(y, (x,), backward, "l2_normalize")


def cosine_sim(u: Tensor, v: Tensor) -> Tensor:
    """Cosine similarity of two vectors as a scalar tensor."""
    if u.ndim != 1 or u.shape != v.shape:
        raise DimensionError(f"cosine_sim expects equal-length vectors, got {u.shape} and {v.shape}")
    return sum_all(mul(l2_normalize(u), l2_normalize(v)))


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layer_norm: parameters {gain.shape}/{bias.shape} vs width {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    centred = x.data - mu
    inv = 1.0 / np.sqrt((centred * centred).mean(axis=-1, keepdims=True) + eps)
    xhat = centred * inv
    gd = gain.data

    def backward(g):
        gx = g * gd
        dx = inv * (gx - gx.mean(axis=-1, keepdims=True)
                    - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        flat_g = g.reshape(-1, d)
        return dx, (flat_g * xhat.reshape(-1, d)).sum(axis=0), flat_g.sum(axis=0)

    return _result(xhat * gd + bias.data, (x, gain, bias), backward, "layer_norm")


# --------------------------------------------------------------------------- attention


def scaled_dot_product_attention(q: Tensor, k: Tensor, v: Tensor, scale_by: float | None = None) -> Tensor:
    """``softmax(q kᵀ / s) v`` over the last two axes; ``s`` defaults to sqrt(width)."""
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise DimensionError(f"attention: q {q.shape}, k {k.shape}, v {v.shape} do not conform")
    s = math.sqrt(q.shape[-1]) if scale_by is None else float(scale_by)
    weights = softmax(scale(matmul(q, transpose(k)), 1.0 / s), axis=-1)
    return matmul(weights, v)


def multi_head_self_attention(x: Tensor, params: dict, heads: int) -> Tensor:
    """Self-attention over tokens of ``x`` (T×d or B×T×d).

    ``params`` holds ``wq, bq, wk, bk, wv, bv, wo, bo``.
    """
    d = x.shape[-1]
    if d % heads:
        raise DimensionError(f"width {d} is not divisible by {heads} heads")
    batched = x.ndim == 3
    xb = x if batched else reshape(x, (1,) + x.shape)
    B, T, _ = xb.shape
    dh = d // heads

    def heads_first(t):
        return permute(reshape(t, (B, T, heads, dh)), (0, 2, 1, 3))

    q = heads_first(linear(xb, params["wq"], params["bq"]))
    k = heads_first(linear(xb, params["wk"], params["bk"]))
    v = heads_first(linear(xb, params["wv"], params["bv"]))
    ctx = scaled_dot_product_attention(q, k, v)
    merged = reshape(permute(ctx, (0, 2, 1, 3)), (B, T, d))
    out = linear(merged, params["wo"], params["bo"])
    return out if batched else reshape(out, (T, d))


# --------------------------------------------------------------------------- reverse mode


def _topological_order(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor, leaves: Sequence[Tensor] = ()) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable tracked leaf.

    Leaves passed in ``leaves`` that the loss does not depend on receive a zero
    gradient instead of staying ``None``.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.requires_grad:
        grads = {id(loss): np.ones_like(loss.data)}
        for node in reversed(_topological_order(loss)):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if not node._parents:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                pg = np.asarray(pg, dtype=np.float64).reshape(parent.shape)
                prev = grads.get(id(parent))
                grads[id(parent)] = pg if prev is None else prev + pg
    for leaf in leaves:
        if leaf.grad is None:
            leaf.grad = np.zeros_like(leaf.data)


def finite_diff_gradient(f: Callable[..., Tensor], params: Sequence[Tensor], eps: float = 1e-6) -> list[np.ndarray]:
    """Central-difference gradient of scalar ``f(*params)`` w.r.t. each parameter."""
    out = []
    with no_grad():
        for p in params:
            g = np.zeros_like(p.data)
            flat, gflat = p.data.reshape(-1), g.reshape(-1)
            for j in range(flat.size):
                keep = flat[j]
                flat[j] = keep + eps
                up = f(*params).item()
                flat[j] = keep - eps
                down = f(*params).item()
                flat[j] = keep
                gflat[j] = (up - down) / (2.0 * eps)
            out.append(g)
    return out


def finite_diff_check(f: Callable[..., Tensor], theta, eps: float = 1e-6) -> float:
    """Max over coordinates of |analytic - central| / max(1, |central|).

    ``theta`` is a tensor or a list of tensors; ``f`` is called as ``f(*theta)``.
    """
    params = [theta] if isinstance(theta, Tensor) else list(theta)
    saved = [(p.requires_grad, p.grad) for p in params]
    for p in params:
        p.requires_grad = True
        p.grad = None
    try:
        backward(f(*params), leaves=params)
        analytic = [p.grad for p in params]
        numeric = finite_diff_gradient(f, params, eps)
    finally:
        for p, (flag, grad) in zip(params, saved):
            p.requires_grad, p.grad = flag, grad
    worst = 0.0
    for a, n in zip(analytic, numeric):
        if a.size:
            worst = max(worst, float(np.max(np.abs(a - n) / np.maximum(1.0, np.abs(n)))))
    return worst
