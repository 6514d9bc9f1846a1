"""Dense tensors with tape-based reverse-mode automatic differentiation.

The Graph records every differentiable operation in execution order, which
is already a topological order, and backward() replays the tape in reverse.
Gradients accumulate into .grad slots and are never overwritten, so calling
backward repeatedly (gradient accumulation across micro-batches) works
without extra machinery; intermediates are cleared at the start of each
backward pass, leaves are not.

Training runs in float32; gradient verification builds float64 graphs
(Graph(dtype=np.float64)) because central differences need the headroom.
"""

import threading

import numpy as np

from .errors import ContractError, NumericError, ShapeError

_tls = threading.local()


def _graph_stack():
    if not hasattr(_tls, "stack"):
        _tls.stack = []
    return _tls.stack


def _active_graph():
    stack = _graph_stack()
    return stack[-1] if stack else None


def _grad_enabled():
    return not getattr(_tls, "no_grad", False)


class no_grad:
    """Context manager that disables tape recording (eval-mode forwards)."""

    def __enter__(self):
        self._prev = getattr(_tls, "no_grad", False)
        _tls.no_grad = True
        return self

    def __exit__(self, *exc):
        _tls.no_grad = self._prev
        return False


class Graph:
    """Tape of recorded operations plus the default dtype for new leaves."""

    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self.nodes = []  # (output Tensor, backward closure)

    def __enter__(self):
        _graph_stack().append(self)
        return self

    def __exit__(self, *exc):
        _graph_stack().pop()
        return False

    def record(self, out, backward):
        self.nodes.append((out, backward))

    def backward(self, loss):
        """Populate .grad for every requires_grad tensor reachable from loss."""
        if not isinstance(loss, Tensor):
            raise ContractError("backward expects a Tensor loss")
        if loss.data.size != 1:
            raise ContractError(f"loss must be scalar, got shape {loss.shape}")
        for out, _ in self.nodes:
            out.grad = None
        loss.grad = np.ones_like(loss.data)
        for out, bwd in reversed(self.nodes):
            if out.grad is not None:
                bwd()


def backward(loss):
    """Run backward on the innermost active graph."""
    g = _active_graph()
    if g is None:
        raise ContractError("backward called with no active Graph")
    g.backward(loss)


class Tensor:
    """N-dimensional array with an optional gradient slot."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad=False, dtype=None):
        if dtype is None:
            g = _active_graph()
            dtype = g.dtype if g is not None else np.float32
        self.data = np.array(data, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.grad = None

    @classmethod
    def _wrap(cls, data, requires_grad):
        t = cls.__new__(cls)
        t.data = data
        t.requires_grad = requires_grad
        t.grad = None
        return t

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self):
        return float(self.data.reshape(()))

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        if np.isscalar(other):
            return smul(self, other)
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return smul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other))


def constant(data, dtype=None):
    """Leaf with no gradient (network inputs, targets, fixed masks)."""
    return Tensor(data, requires_grad=False, dtype=dtype)


def _as_tensor(x):
    if isinstance(x, Tensor):
        return x
    return constant(x)


def _accum(t, grad):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(grad, dtype=t.data.dtype)
    else:
        t.grad = t.grad + grad


def _make(data, inputs, backward):
    """Create the output tensor and record the node if grads are live."""
    track = _grad_enabled() and any(t.requires_grad for t in inputs)
    out = Tensor._wrap(data, track)
    if track:
        g = _active_graph()
        if g is None:
            raise ContractError("differentiable op outside any Graph context")
        g.record(out, backward(out))
    return out


def _unbroadcast(grad, shape):
    """Sum grad down to `shape` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# --- elementwise and arithmetic ---

def add(a, b):
    data = a.data + b.data

    def bwd(out):
        def run():
            _accum(a, _unbroadcast(out.grad, a.data.shape))
            _accum(b, _unbroadcast(out.grad, b.data.shape))
        return run

    return _make(data, (a, b), bwd)


def sub(a, b):
    data = a.data - b.data

    def bwd(out):
        def run():
            _accum(a, _unbroadcast(out.grad, a.data.shape))
            _accum(b, _unbroadcast(-out.grad, b.data.shape))
        return run

    return _make(data, (a, b), bwd)


def mul(a, b):
    data = a.data * b.data

    def bwd(out):
        def run():
            _accum(a, _unbroadcast(out.grad * b.data, a.data.shape))
            _accum(b, _unbroadcast(out.grad * a.data, b.data.shape))
        return run

    return _make(data, (a, b), bwd)


def smul(a, c):
    c = float(c)
    data = a.data * c

    def bwd(out):
        def run():
            _accum(a, out.grad * c)
        return run

    return _make(data, (a,), bwd)


def matmul(a, b):
    if a.ndim not in (1, 2) or b.ndim not in (1, 2):
        raise ShapeError(f"matmul supports 1D/2D operands, got {a.shape} @ {b.shape}")
    a2 = a.data if a.ndim == 2 else a.data[None, :]
    b2 = b.data if b.ndim == 2 else b.data[:, None]
    if a2.shape[1] != b2.shape[0]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    out2 = a2 @ b2
    data = out2
    if a.ndim == 1:
        data = data[0]
    if b.ndim == 1:
        data = data[..., 0] if a.ndim == 1 else data[:, 0]

    def bwd(out):
        def run():
            g = out.grad
            g2 = g
            if a.ndim == 1:
                g2 = g2[None, ...]
            if b.ndim == 1:
                g2 = g2[..., None]
            ga = g2 @ b2.T
            gb = a2.T @ g2
            _accum(a, ga[0] if a.ndim == 1 else ga)
            _accum(b, gb[:, 0] if b.ndim == 1 else gb)
        return run

    return _make(data, (a, b), bwd)


def transpose(a):
    if a.ndim != 2:
        raise ShapeError("transpose expects a 2D tensor")
    data = a.data.T.copy()

    def bwd(out):
        def run():
            _accum(a, out.grad.T)
        return run

    return _make(data, (a,), bwd)


# --- shape ops ---

def concat(tensors, axis=-1):
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat of zero tensors")
    data = np.concatenate([t.data for t in tensors], axis=axis)
    ax = axis if axis >= 0 else data.ndim + axis
    sizes = [t.data.shape[ax] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(out):
        def run():
            for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
                idx = [slice(None)] * data.ndim
                idx[ax] = slice(lo, hi)
                _accum(t, out.grad[tuple(idx)])
        return run

    return _make(data, tuple(tensors), bwd)


def slice_last(a, lo, hi):
    """View [..., lo:hi] along the last axis (as a copy)."""
    data = a.data[..., lo:hi].copy()

    def bwd(out):
        def run():
            g = np.zeros_like(a.data)
            g[..., lo:hi] = out.grad
            _accum(a, g)
        return run

    return _make(data, (a,), bwd)


def slice_rows(a, lo, hi):
    """Rows [lo:hi] along the first axis (as a copy)."""
    data = a.data[lo:hi].copy()

    def bwd(out):
        def run():
            g = np.zeros_like(a.data)
            g[lo:hi] = out.grad
            _accum(a, g)
        return run

    return _make(data, (a,), bwd)


def stack_rows(vectors):
    """Stack (d,) vectors into a (k, d) matrix."""
    vectors = list(vectors)
    if not vectors:
        raise ShapeError("stack_rows of zero vectors")
    data = np.stack([v.data for v in vectors], axis=0)

    def bwd(out):
        def run():
            for i, v in enumerate(vectors):
                _accum(v, out.grad[i])
        return run

    return _make(data, tuple(vectors), bwd)


def split(a, sizes, axis=-1):
    """Inverse of concat along the last axis; returns a list of tensors."""
    if axis not in (-1, a.ndim - 1):
        raise ShapeError("split currently supports the last axis only")
    if sum(sizes) != a.data.shape[-1]:
        raise ShapeError(f"split sizes {sizes} do not cover extent {a.data.shape[-1]}")
    pieces = []
    lo = 0
    for s in sizes:
        pieces.append(slice_last(a, lo, lo + s))
        lo += s
    return pieces


# --- reductions ---

def tsum(a, axis=None):
    data = a.data.sum(axis=axis)

    def bwd(out):
        def run():
            if axis is None:
                _accum(a, np.broadcast_to(out.grad, a.data.shape))
            else:
                _accum(a, np.broadcast_to(np.expand_dims(out.grad, axis), a.data.shape))
        return run

    return _make(data, (a,), bwd)


def mean(a, axis=None):
    n = a.data.size if axis is None else a.data.shape[axis]
    data = a.data.mean(axis=axis)

    def bwd(out):
        def run():
            if axis is None:
                _accum(a, np.broadcast_to(out.grad / n, a.data.shape))
            else:
                _accum(a, np.broadcast_to(np.expand_dims(out.grad / n, axis), a.data.shape))
        return run

    return _make(data, (a,), bwd)


# --- nonlinearities ---

def relu(a):
    data = np.maximum(a.data, 0)

    def bwd(out):
        def run():
            _accum(a, out.grad * (a.data > 0))
        return run

    return _make(data, (a,), bwd)


def tanh(a):
    data = np.tanh(a.data)

    def bwd(out):
        def run():
            _accum(a, out.grad * (1.0 - data * data))
        return run

    return _make(data, (a,), bwd)


def sigmoid(a):
    data = 1.0 / (1.0 + np.exp(-a.data))

    def bwd(out):
        def run():
            _accum(a, out.grad * data * (1.0 - data))
        return run

    return _make(data, (a,), bwd)


def log(a):
    if np.any(a.data <= 0):
        raise NumericError("log requires strictly positive input")
    data = np.log(a.data)

    def bwd(out):
        def run():
            _accum(a, out.grad / a.data)
        return run

    return _make(data, (a,), bwd)


def clamp_min(a, floor):
    """max(a, floor); gradient passes where a >= floor."""
    data = np.maximum(a.data, floor)

    def bwd(out):
        def run():
            _accum(a, out.grad * (a.data >= floor))
        return run

    return _make(data, (a,), bwd)


def softmax(a, axis=-1):
    if not np.all(np.isfinite(a.data)):
        raise NumericError("softmax input must be finite")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)

    def bwd(out):
        def run():
            g = out.grad
            dot = (g * data).sum(axis=axis, keepdims=True)
            _accum(a, data * (g - dot))
        return run

    return _make(data, (a,), bwd)


def layer_norm(a, gamma, beta, eps=1e-5):
    """Normalize the last axis with population variance, then affine."""
    d = a.data.shape[-1]
    if gamma.data.shape != (d,) or beta.data.shape != (d,):
        raise ShapeError(
            f"layer_norm affine params must have shape ({d},), "
            f"got {gamma.data.shape} and {beta.data.shape}")
    if eps <= 0:
        raise ContractError("layer_norm eps must be positive")
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    data = gamma.data * xhat + beta.data

    def bwd(out):
        def run():
            g = out.grad
            batch_axes = tuple(range(g.ndim - 1))
            _accum(gamma, (g * xhat).sum(axis=batch_axes))
            _accum(beta, g.sum(axis=batch_axes))
            dxhat = g * gamma.data
            m1 = dxhat.mean(axis=-1, keepdims=True)
            m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
            _accum(a, inv * (dxhat - m1 - xhat * m2))
        return run

    return _make(data, (a, gamma, beta), bwd)


def dropout(a, p, rng, train):
    """Inverted dropout: scales by 1/(1-p) at train time, identity in eval."""
    if not train or p == 0.0:
        return a
    if not 0.0 <= p < 1.0:
        raise ContractError(f"dropout rate must be in [0,1), got {p}")
    keep = (rng.uniform(a.data.shape) >= p).astype(a.data.dtype)
    scale = keep / (1.0 - p)
    data = a.data * scale

    def bwd(out):
        def run():
            _accum(a, out.grad * scale)
        return run

    return _make(data, (a,), bwd)


def grl(a, lam):
    """Gradient reversal: identity forward, grad scaled by -lam backward."""
    if lam < 0:
        raise ContractError("grl lambda must be >= 0")
    data = a.data

    def bwd(out):
        def run():
            _accum(a, out.grad * (-lam))
        return run

    return _make(data, (a,), bwd)


# --- verification ---

def grad_check(f, x, h=1e-4):
    """Max relative error between analytic and central-difference gradients.

    f must map the leaf tensor x to a scalar Tensor and be deterministic
    across calls (fix any dropout rng inside f).  Everything runs in
    float64.
    """
    if not 1e-6 <= h <= 1e-3:
        raise ContractError(f"step size h={h} outside [1e-6, 1e-3]")
    if x.data.dtype != np.float64:
        raise ContractError("grad_check requires a float64 leaf")
    x.grad = None
    g = Graph(dtype=np.float64)
    with g:
        loss = f(x)
    g.backward(loss)
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()

    flat = x.data.reshape(-1)
    fd = np.empty(flat.size, dtype=np.float64)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        with no_grad(), Graph(dtype=np.float64):
            fp = f(x).item()
        flat[i] = orig - h
        with no_grad(), Graph(dtype=np.float64):
            fm = f(x).item()
        flat[i] = orig
        fd[i] = (fp - fm) / (2.0 * h)
    rel = np.abs(analytic.reshape(-1) - fd) / np.maximum(1.0, np.abs(fd))
    return float(rel.max())
