"""Small reverse-mode autodiff on top of numpy.

Every op returns a new :class:`Tensor` that remembers its parents and a
closure mapping the output gradient to parent gradients.  Calling
:func:`backward` on a scalar walks that graph in reverse topological order,
so the graph recorded during one forward pass acts as the tape for that step.
Nothing is mutated in place once recorded.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

__all__ = [
    "Tensor",
    "ParamStore",
    "ShapeMismatch",
    "NotScalar",
    "as_tensor",
    "matmul",
    "add",
    "sub",
    "mul",
    "scale",
    "concat",
    "mean_over_axis",
    "sum_all",
    "relu",
    "softmax",
    "linear",
    "reshape",
    "swapaxes",
    "take",
    "backward",
    "finite_difference_check",
    "save_params",
    "load_params",
]


class ShapeMismatch(ValueError):
    pass


class NotScalar(ValueError):
    pass


class Tensor:
    """Dense float64 array plus an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None

    @classmethod
    def from_op(cls, data, parents, backward_fn):
        out = cls(data)
        out._parents = tuple(parents)
        out._backward = backward_fn
        out.requires_grad = any(p.requires_grad for p in out._parents)
        return out

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` (reverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _check_broadcast(a, b, what):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatch(f"{what}: cannot broadcast {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor.from_op(a.data + b.data, (a, b), bw)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")

    def bw(g):
        return _unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)

    return Tensor.from_op(a.data - b.data, (a, b), bw)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return Tensor.from_op(a.data * b.data, (a, b), bw)


def scale(a, c):
    a = as_tensor(a)
    c = float(c)
    return Tensor.from_op(a.data * c, (a,), lambda g: (g * c,))


def relu(a):
    a = as_tensor(a)
    mask = a.data > 0

    return Tensor.from_op(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


# ---------------------------------------------------------------------------
# reductions / shape ops
# ---------------------------------------------------------------------------

def sum_all(a):
    a = as_tensor(a)
    return Tensor.from_op(a.data.sum(), (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),))


def mean_over_axis(a, axis, keepdims=False):
    a = as_tensor(a)
    axes = (axis,) if np.isscalar(axis) else tuple(axis)
    axes = tuple(ax % a.ndim for ax in axes)
    count = int(np.prod([a.shape[ax] for ax in axes]))
    out = a.data.mean(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, a.shape).copy(),)

    return Tensor.from_op(out, (a,), bw)


def reshape(a, shape):
    a = as_tensor(a)
    src = a.shape
    return Tensor.from_op(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),))


def swapaxes(a, ax1, ax2):
    a = as_tensor(a)
    return Tensor.from_op(np.swapaxes(a.data, ax1, ax2), (a,), lambda g: (np.swapaxes(g, ax1, ax2),))


def take(a, index, axis):
    """Select a single ``index`` along ``axis`` (the axis is dropped)."""
    a = as_tensor(a)
    axis = axis % a.ndim

    def bw(g):
        full = np.zeros(a.shape)
        sl = [slice(None)] * a.ndim
        sl[axis] = index
        full[tuple(sl)] = g
        return (full,)

    return Tensor.from_op(np.take(a.data, index, axis=axis), (a,), bw)


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeMismatch(f"concat: {exc}") from None
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, sizes, axis=axis))

    return Tensor.from_op(out, tensors, bw)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a, b):
    """Batched matrix product with numpy ``matmul`` broadcasting rules."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeMismatch(f"matmul: {a.shape} @ {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise ShapeMismatch(f"matmul: {exc}") from None

    def bw(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        return ga, _rhs_grad(g, a.data, b.shape)

    return Tensor.from_op(out, (a, b), bw)


def _rhs_grad(g, a, b_shape):
    """Gradient of the right operand of ``a @ b``.

    When ``b`` is shared across extra leading batch axes (a weight applied
    to a whole batch), those axes are folded into the contraction instead of
    materialising a full-size gradient and summing it afterwards.
    """
    extra = g.ndim - len(b_shape)
    if extra > 0 and a.shape[:-2] == g.shape[:-2] and tuple(b_shape[:-2]) == g.shape[extra:-2]:
        batch = g.shape[extra:-2]

        def fold(x):
            # (L..., B..., r, c) -> (B..., L*r, c)
            x = x.reshape((-1,) + x.shape[extra:])
            x = np.moveaxis(x, 0, len(batch))
            return x.reshape(batch + (-1, x.shape[-1]))

        return np.matmul(np.swapaxes(fold(a), -1, -2), fold(g))
    return _unbroadcast(np.matmul(np.swapaxes(a, -1, -2), g), b_shape)


def linear(x, weight, bias=None):
    """``x @ weight + bias`` over the trailing dimension of ``x``.

    ``weight`` is (in, out).  Leading dimensions of ``x`` are flattened so the
    weight gradient is a single 2-D product rather than a broadcast sum.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if weight.ndim != 2 or x.shape[-1] != weight.shape[0]:
        raise ShapeMismatch(f"linear: input {x.shape} vs weight {weight.shape}")
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (weight.shape[1],):
            raise ShapeMismatch(f"linear: bias {bias.shape} vs weight {weight.shape}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, weight.shape[0])
    out = x2 @ weight.data
    if bias is not None:
        out = out + bias.data
    out = out.reshape(lead + (weight.shape[1],))

    def bw(g):
        g2 = g.reshape(-1, weight.shape[1])
        gx = (g2 @ weight.data.T).reshape(x.shape)
        gw = x2.T @ g2
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor.from_op(out, parents, bw)


def softmax(x, axis=-1):
    x = as_tensor(x)
    if x.shape[axis] == 0:
        raise ShapeMismatch("softmax over an empty axis")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return Tensor.from_op(y, (x,), bw)


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------

def _topo_order(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss, params=None):
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf that requires grad.

    If ``params`` is given, parameters that the loss does not reach get an
    explicit zero gradient.
    """
    if loss.data.size != 1:
        raise NotScalar(f"backward needs a scalar loss, got shape {loss.shape}")
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topo_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.requires_grad:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg
    if params is not None:
        for t in params.values():
            if t.grad is None:
                t.grad = np.zeros_like(t.data)


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------

class ParamStore(dict):
    """Ordered name -> Tensor map of trainable parameters."""

    def __setitem__(self, name, value):
        value = as_tensor(value)
        # finite_difference_check perturbs through a flat view
        value.data = np.ascontiguousarray(value.data)
        value.requires_grad = True
        super().__setitem__(name, value)

    def zero_grad(self):
        for t in self.values():
            t.grad = None

    def numel(self):
        return int(sum(t.data.size for t in self.values()))

    def copy(self):
        out = ParamStore()
        for name, t in self.items():
            out[name] = Tensor(t.data.copy())
        return out

    def arrays(self):
        return {name: t.data for name, t in self.items()}


_CKPT_MAGIC = b"HFCK"
_CKPT_VERSION = 1


def save_params(params, path):
    """Write a checkpoint: magic, version, manifest length, JSON manifest, payload.

    Layout (little-endian)::

        4s   magic  b"HFCK"
        u32  version (1)
        u64  manifest byte length L
        L    UTF-8 JSON list of {"name", "shape", "offset"}; offsets are
             relative to the payload start
        ...  concatenated float64 arrays in C order
    """
    manifest, offset = [], 0
    for name, t in params.items():
        manifest.append({"name": name, "shape": list(t.shape), "offset": offset})
        offset += t.data.size * 8
    blob = json.dumps(manifest, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<IQ", _CKPT_VERSION, len(blob)))
        fh.write(blob)
        for t in params.values():
            fh.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())


def load_params(path):
    raw = Path(path).read_bytes()
    if raw[:4] != _CKPT_MAGIC or len(raw) < 16:
        raise ValueError(f"{path}: not a parameter checkpoint")
    version, mlen = struct.unpack_from("<IQ", raw, 4)
    if version != _CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    start = 16 + mlen
    manifest = json.loads(raw[16:start].decode("utf-8"))
    params = ParamStore()
    for entry in manifest:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape, dtype=np.int64))
        lo = start + entry["offset"]
        if lo + 8 * count > len(raw):
            raise ValueError(f"{path}: truncated payload for {entry['name']}")
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=lo).reshape(shape)
        params[entry["name"]] = Tensor(arr.astype(np.float64))
    return params


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

def finite_difference_check(f, params, eps=1e-5, samples=64, seed=0, floor=1e-6):
    """Max relative error between ``backward`` grads and central differences.

    ``f(params)`` must return a scalar Tensor.  Tensors with more than
    ``samples`` entries are checked on a seeded random subset of coordinates.
    Gradients smaller than ``floor`` are compared in absolute terms: central
    differences at ``eps=1e-5`` carry roundoff of order 1e-11, which would
    swamp a relative comparison of an exactly-zero gradient.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    params.zero_grad()
    backward(f(params), params)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for t in params.values():
        flat = t.data.reshape(-1)
        if flat.size > samples:
            coords = rng.choice(flat.size, size=samples, replace=False)
        else:
            coords = np.arange(flat.size)
        analytic = t.grad.reshape(-1)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + eps
            fp = float(f(params).data)
            flat[i] = orig - eps
            fm = float(f(params).data)
            flat[i] = orig
            numeric = (fp - fm) / (2 * eps)
            a = analytic[i]
            err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
            worst = max(worst, err)
    return worst
