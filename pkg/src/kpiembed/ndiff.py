"""Dense float64 tensors with reverse-mode automatic differentiation.

A small tape-based engine: every operation returns a new ``Tensor`` carrying
the forward value plus a closure that routes output gradients to the
operation's inputs.  The implicit DAG formed by the parent links is the
computation graph; ``Tensor.backward`` walks it once in reverse topological
order.

Conventions (fixed for test stability):
  * all values are 64-bit floats;
  * every op output is checked for NaN/Inf and raises ``NumericError``
    naming the op;
  * broadcasting is limited to bias-style adds/muls: ``(..., n) op (n,)``;
  * repeated ``backward`` calls accumulate into ``.grad`` (call
    ``zero_grad`` between steps).

Graphs are built and differentiated on a single thread; disjoint graphs may
live on separate threads.  ``no_grad`` suppresses tape recording for
inference passes.
"""

from contextlib import contextmanager

import numpy as np

from .errors import ContractError, DimensionError, NumericError

_GRAD_ENABLED = True


@contextmanager
def no_grad():
    """Disable tape recording inside the block (forward values only)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _check_finite(data, op):
    # fast path: a finite sum implies all entries finite (NaN/Inf propagate);
    # only on a non-finite sum pay for the exact elementwise scan
    if not np.isfinite(np.sum(data)) and not np.all(np.isfinite(data)):
        raise NumericError(f"non-finite values produced by op '{op}'")


class Tensor:
    """A dense float64 array node in the computation graph.

    ``requires_grad`` marks leaves that should receive gradients; op outputs
    inherit it from their parents.  ``frozen`` is set when the owning model
    is frozen; optimizers refuse to step frozen tensors.
    """

    __slots__ = ("data", "grad", "requires_grad", "frozen", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        _check_finite(self.data, "tensor")
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.frozen = False
        self._parents = ()
        self._backward = None
        self._op = "leaf"

    @property
    def shape(self):
        return self.data.shape

    def zero_grad(self):
        self.grad = None

    def item(self):
        return float(self.data)

    def backward(self):
        """Accumulate d(self)/d(node) into ``.grad`` of every tracked node.

        ``self`` must be a scalar.  Each call pushes one unit of seed
        gradient through the graph, so repeated calls accumulate.
        """
        if self.data.size != 1:
            raise ContractError(
                f"backward requires a scalar loss, got shape {self.data.shape}"
            )
        order = _toposort(self)
        sweep = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = sweep.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad:
                node.grad = g if node.grad is None else node.grad + g
            if node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                sweep[key] = pg if key not in sweep else sweep[key] + pg

    # -- operator sugar ----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, scale(other, -1.0))

    def __neg__(self):
        return scale(self, -1.0)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self._op}, requires_grad={self.requires_grad})"


def _result(data, op, parents, backward):
    _check_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.frozen = False
    out._op = op
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _toposort(root):
    """Post-order DFS: parents appear before their consumers."""
    order, seen, stack = [], set(), [(root, False)]
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
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss, params=None):
    """Functional wrapper around ``loss.backward()``.

    Returns a map ``{tensor: grad}`` for ``params`` (or, when omitted, for
    every tracked leaf reachable from ``loss``).
    """
    if params is None:
        params = [n for n in _toposort(loss) if n.requires_grad and not n._parents]
    loss.backward()
    return {p: p.grad for p in params}


# -- elementwise / broadcast helpers ----------------------------------------

def _bias_compatible(a_shape, b_shape):
    if a_shape == b_shape:
        return True
    # bias-add style only: (..., n) with (n,)
    if len(b_shape) == 1 and len(a_shape) >= 1 and a_shape[-1] == b_shape[0]:
        return True
    return False


def _reduce_to(g, shape):
    """Sum a broadcast gradient back down to ``shape``."""
    if g.shape == shape:
        return g
    return g.reshape(-1, *shape).sum(axis=0)


def add(a, b):
    if not (_bias_compatible(a.shape, b.shape) or _bias_compatible(b.shape, a.shape)):
        raise DimensionError(f"add: incompatible shapes {a.shape} and {b.shape}")
    out = a.data + b.data

    def bwd(g):
        return _reduce_to(g, a.data.shape), _reduce_to(g, b.data.shape)

    return _result(out, "add", (a, b), bwd)


def mul(a, b):
    if not (_bias_compatible(a.shape, b.shape) or _bias_compatible(b.shape, a.shape)):
        raise DimensionError(f"mul: incompatible shapes {a.shape} and {b.shape}")
    out = a.data * b.data

    def bwd(g):
        return _reduce_to(g * b.data, a.data.shape), _reduce_to(g * a.data, b.data.shape)

    return _result(out, "mul", (a, b), bwd)


def scale(a, c):
    c = float(c)
    out = a.data * c

    def bwd(g):
        return (g * c,)

    return _result(out, "scale", (a,), bwd)


def matmul(a, b):
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise DimensionError(f"matmul: operands must be >= 2-D, got {ad.shape} and {bd.shape}")
    if ad.shape[-1] != bd.shape[-2]:
        raise DimensionError(f"matmul: incompatible shapes {ad.shape} and {bd.shape}")
    if ad.ndim == bd.ndim:
        if ad.shape[:-2] != bd.shape[:-2]:
            raise DimensionError(f"matmul: mismatched batch dims {ad.shape} and {bd.shape}")
    elif bd.ndim != 2:
        raise DimensionError(f"matmul: unsupported ranks {ad.shape} and {bd.shape}")
    out = ad @ bd

    def bwd(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        if bd.ndim == ad.ndim:
            gb = np.swapaxes(ad, -1, -2) @ g
        else:  # stacked @ shared 2-D weight: fold the batch dims
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        return ga, gb

    return _result(out, "matmul", (a, b), bwd)


def tanh(a):
    out = np.tanh(a.data)

    def bwd(g):
        return (g * (1.0 - out * out),)

    return _result(out, "tanh", (a,), bwd)


def relu(a):
    out = np.maximum(a.data, 0.0)
    mask = a.data > 0.0

    def bwd(g):
        return (g * mask,)

    return _result(out, "relu", (a,), bwd)


def softmax(a, axis=-1):
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        inner = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - inner),)

    return _result(out, "softmax", (a,), bwd)


def layer_norm(a, axis=-1, eps=1e-5):
    """Normalize along ``axis`` to zero mean / unit variance (no affine)."""
    mu = a.data.mean(axis=axis, keepdims=True)
    var = a.data.var(axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    out = (a.data - mu) * inv

    def bwd(g):
        gm = g.mean(axis=axis, keepdims=True)
        gx = (g * out).mean(axis=axis, keepdims=True)
        return (inv * (g - gm - out * gx),)

    return _result(out, "layer_norm", (a,), bwd)


def concat(tensors, axis=0):
    tensors = tuple(tensors)
    if not tensors:
        raise DimensionError("concat: empty tensor list")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, splits, axis=axis))

    return _result(out, "concat", tensors, bwd)


def reshape(a, shape):
    out = a.data.reshape(shape)
    orig = a.data.shape

    def bwd(g):
        return (g.reshape(orig),)

    return _result(out, "reshape", (a,), bwd)


def transpose(a, axes=None):
    out = np.transpose(a.data, axes)
    inv = None if axes is None else tuple(np.argsort(axes))

    def bwd(g):
        return (np.transpose(g, inv),)

    return _result(out, "transpose", (a,), bwd)


def slice_axis(a, axis, start, stop):
    dim = a.data.shape[axis]
    if not (0 <= start < stop <= dim):
        raise DimensionError(f"slice: [{start}:{stop}] out of range for axis {axis} of {a.shape}")
    key = [slice(None)] * a.data.ndim
    key[axis] = slice(start, stop)
    key = tuple(key)
    out = a.data[key]

    def bwd(g):
        ga = np.zeros_like(a.data)
        ga[key] = g
        return (ga,)

    return _result(out, "slice", (a,), bwd)


def mean(a, axis=None, keepdims=False):
    out = a.data.mean(axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is None:
            return (np.full_like(a.data, float(g) / a.data.size),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg / a.data.shape[axis], a.data.shape).copy(),)

    return _result(out, "mean", (a,), bwd)


def trace(a):
    if a.data.ndim != 2 or a.data.shape[0] != a.data.shape[1]:
        raise DimensionError(f"trace: expected a square matrix, got {a.shape}")
    out = np.trace(a.data)
    n = a.data.shape[0]

    def bwd(g):
        return (float(g) * np.eye(n),)

    return _result(np.asarray(out), "trace", (a,), bwd)


def batch_covariance(f, g):
    """Empirical cross-covariance of two (n, b) feature batches.

    Columns are samples.  Both batches are centered by their batch mean and
    the result uses 1/b scaling: ``cov = (F - mF)(G - mG)^T / b``.
    """
    fd, gd = f.data, g.data
    if fd.ndim != 2 or gd.ndim != 2 or fd.shape != gd.shape:
        raise DimensionError(f"batch_covariance: expected matching (n, b) matrices, got {f.shape} and {g.shape}")
    b = fd.shape[1]
    fc = fd - fd.mean(axis=1, keepdims=True)
    gc = gd - gd.mean(axis=1, keepdims=True)
    out = fc @ gc.T / b

    # Centering makes the mean-term contribution vanish: rows of fc/gc sum to 0.
    def bwd(grad):
        return grad @ gc / b, grad.T @ fc / b

    return _result(out, "batch_covariance", (f, g), bwd)


# -- gradient checking -------------------------------------------------------

def grad_check(fn, point, eps=1e-5):
    """Compare analytic gradients of ``fn`` against central differences.

    ``fn`` maps a 1-D parameter ``Tensor`` to a scalar ``Tensor``.  Returns
    the max over coordinates of ``|a - n| / max(|a|, |n|, 1e-8)``.
    """
    point = np.asarray(point, dtype=np.float64)
    if point.ndim != 1:
        raise ContractError(f"grad_check expects a 1-D point, got shape {point.shape}")
    t = Tensor(point.copy(), requires_grad=True)
    out = fn(t)
    if out.data.size != 1:
        raise ContractError(f"grad_check fn must return a scalar, got shape {out.data.shape}")
    out.backward()
    analytic = np.zeros_like(point) if t.grad is None else t.grad.reshape(-1)

    numeric = np.zeros_like(point)
    with no_grad():
        for i in range(point.size):
            bump = np.zeros_like(point)
            bump[i] = eps
            hi = float(fn(Tensor(point + bump)).data)
            lo = float(fn(Tensor(point - bump)).data)
            if not (np.isfinite(hi) and np.isfinite(lo)):
                raise NumericError(f"grad_check: fn returned non-finite value at coordinate {i}")
            numeric[i] = (hi - lo) / (2.0 * eps)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))
