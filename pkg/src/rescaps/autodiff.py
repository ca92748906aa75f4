"""Dense tensors with reverse-mode automatic differentiation.

Every differentiable value in the network is a Tensor wrapping a numpy
array. Each primitive records its parents plus a backward closure, so the
chain of executed operations forms an implicit tape; Tensor.backward()
replays that tape in reverse topological order and accumulates gradients
into every leaf created with requires_grad=True.

Training runs at float32. Gradient checking rebuilds the same graph at
float64 by constructing all leaves with dtype=np.float64; primitives never
change the dtype they are given.
"""

from __future__ import annotations

import math
from contextlib import contextmanager

import numpy as np

DEFAULT_DTYPE = np.float32

# Added under the square root wherever a vector norm is differentiated, so
# the gradient stays finite at zero vectors.
NORM_EPS = 1e-7


class ShapeError(ValueError):
    """Operand dimensions are incompatible with the requested operation."""


class UsageError(RuntimeError):
    """The autodiff API was used outside its contract."""


class NonFiniteError(FloatingPointError):
    """A forward operation produced NaN or Inf while checks were enabled."""


_grad_enabled = True
_finite_checks = False


def set_finite_checks(enabled: bool) -> None:
    """Validate every primitive's output for NaN/Inf. Slow; meant for tests
    and gradient checking, not the training loop (which checks the loss and
    gradients instead)."""
    global _finite_checks
    _finite_checks = bool(enabled)


@contextmanager
def no_grad():
    """Disable tape recording, e.g. for evaluation passes."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
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

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    def backward(self):
        """Reverse pass from a scalar node; fills .grad on every reachable
        leaf that requires gradients."""
        if not self.requires_grad:
            raise UsageError("backward through a tensor that is not part of a recorded graph")
        if self.data.size != 1:
            raise UsageError(f"backward requires a scalar, got shape {self.data.shape}")

        topo = []
        seen = set()
        stack = [(self, False)]
        while stack:  # iterative DFS; graphs are too deep for recursion
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is None:
                continue
            for parent, g in zip(node._parents, node._backward(node.grad)):
                if g is None or not parent.requires_grad:
                    continue
                if parent.grad is None:
                    parent.grad = g
                else:
                    # fresh array on purpose: closures may hand back views
                    parent.grad = parent.grad + g

    # -- operator sugar --------------------------------------------------

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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


def _lift(x, like=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else DEFAULT_DTYPE
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data, parents, backward_fn):
    if _finite_checks and not np.all(np.isfinite(data)):
        raise NonFiniteError("forward operation produced a non-finite value")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(g, shape):
    """Reduce the gradient of a broadcast operand back to its shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- elementwise primitives ----------------------------------------------


def add(a, b):
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)

    def bw(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _make(a.data + b.data, (a, b), bw)


def sub(a, b):
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)

    def bw(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return _make(a.data - b.data, (a, b), bw)


def mul(a, b):
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)

    def bw(g):
        return _unbroadcast(g * b.data, a.data.shape), _unbroadcast(g * a.data, b.data.shape)

    return _make(a.data * b.data, (a, b), bw)


def div(a, b):
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)

    def bw(g):
        return (
            _unbroadcast(g / b.data, a.data.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape),
        )

    return _make(a.data / b.data, (a, b), bw)


def neg(a):
    a = _lift(a)

    def bw(g):
        return (-g,)

    return _make(-a.data, (a,), bw)


def exp(a):
    a = _lift(a)
    out_data = np.exp(a.data)

    def bw(g):
        return (g * out_data,)

    return _make(out_data, (a,), bw)


def log(a):
    a = _lift(a)

    def bw(g):
        return (g / a.data,)

    return _make(np.log(a.data), (a,), bw)


def sqrt(a):
    a = _lift(a)
    out_data = np.sqrt(a.data)

    def bw(g):
        return (g * (0.5 / out_data),)

    return _make(out_data, (a,), bw)


def relu(a):
    a = _lift(a)

    def bw(g):
        return (g * (a.data > 0),)

    return _make(np.maximum(a.data, 0), (a,), bw)


def sigmoid(a):
    a = _lift(a)
    # split by sign to avoid exp overflow on large negatives
    out_data = np.empty_like(a.data)
    pos = a.data >= 0
    out_data[pos] = 1.0 / (1.0 + np.exp(-a.data[pos]))
    e = np.exp(a.data[~pos])
    out_data[~pos] = e / (1.0 + e)

    def bw(g):
        return (g * out_data * (1.0 - out_data),)

    return _make(out_data, (a,), bw)


def maximum(a, b):
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    take_a = a.data >= b.data  # ties go to the first operand

    def bw(g):
        return (
            _unbroadcast(g * take_a, a.data.shape),
            _unbroadcast(g * ~take_a, b.data.shape),
        )

    return _make(np.maximum(a.data, b.data), (a, b), bw)


def minimum(a, b):
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    take_a = a.data <= b.data

    def bw(g):
        return (
            _unbroadcast(g * take_a, a.data.shape),
            _unbroadcast(g * ~take_a, b.data.shape),
        )

    return _make(np.minimum(a.data, b.data), (a, b), bw)


# -- reductions and shape ops ----------------------------------------------


def tsum(a, axis=None, keepdims=False):
    a = _lift(a)

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, a.data.shape),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.data.shape),)

    return _make(a.data.sum(axis=axis, keepdims=keepdims), (a,), bw)


def tmean(a, axis=None, keepdims=False):
    a = _lift(a)
    if axis is None:
        count = a.data.size
    elif isinstance(axis, tuple):
        count = int(np.prod([a.data.shape[i] for i in axis]))
    else:
        count = a.data.shape[axis]
    return mul(tsum(a, axis, keepdims), 1.0 / count)


def reshape(a, shape):
    a = _lift(a)

    def bw(g):
        return (g.reshape(a.data.shape),)

    return _make(a.data.reshape(shape), (a,), bw)


def getitem(a, idx):
    """Basic (slice/int) indexing; used for crops and views."""
    a = _lift(a)

    def bw(g):
        full = np.zeros_like(a.data)
        full[idx] = g
        return (full,)

    return _make(a.data[idx], (a,), bw)


def broadcast_to(a, shape):
    a = _lift(a)

    def bw(g):
        return (_unbroadcast(g, a.data.shape),)

    return _make(np.broadcast_to(a.data, shape).copy(), (a,), bw)


# -- linear algebra ----------------------------------------------------------


def matmul(a, b):
    """2-D matrix product (batch-of-rows times weight matrix)."""
    a = _lift(a)
    b = _lift(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.data.shape} @ {b.data.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul inner dims differ: {a.data.shape} @ {b.data.shape}")

    def bw(g):
        return g @ b.data.T, a.data.T @ g

    return _make(a.data @ b.data, (a, b), bw)


def affine_votes(poses, weights):
    """Per-pair linear vote: out[b,i,j,:] = weights[i,j] @ poses[b,i,:].

    poses: (B, I, d_in), weights: (I, J, d_out, d_in) -> (B, I, J, d_out).
    Internally a matmul batched over the child axis, which BLAS handles far
    faster than the equivalent einsum.
    """
    poses = _lift(poses)
    weights = _lift(weights)
    if poses.data.ndim != 3 or weights.data.ndim != 4:
        raise ShapeError("affine_votes expects poses (B,I,d) and weights (I,J,d_out,d_in)")
    if poses.data.shape[1] != weights.data.shape[0] or poses.data.shape[2] != weights.data.shape[3]:
        raise ShapeError(
            f"affine_votes dim mismatch: poses {poses.data.shape} vs weights {weights.data.shape}"
        )
    B, I, d_in = poses.data.shape
    _, J, d_out, _ = weights.data.shape
    w_mat = weights.data.transpose(0, 3, 1, 2).reshape(I, d_in, J * d_out)
    out = np.matmul(poses.data.transpose(1, 0, 2), w_mat)  # (I, B, J*d_out)
    out_data = np.ascontiguousarray(out.transpose(1, 0, 2)).reshape(B, I, J, d_out)

    def bw(g):
        g_i = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(I, B, J * d_out)
        u_i = poses.data.transpose(1, 0, 2)                      # (I, B, d_in)
        dw = np.matmul(g_i.transpose(0, 2, 1), u_i).reshape(I, J, d_out, d_in)
        dp = np.matmul(g_i, weights.data.reshape(I, J * d_out, d_in))
        return np.ascontiguousarray(dp.transpose(1, 0, 2)), dw

    return _make(out_data, (poses, weights), bw)


def coupled_sum(coupling, votes):
    """Coupling-weighted vote sum over children:
    out[b,j,:] = sum_i coupling[b,i,j] * votes[b,i,j,:].

    Fused so the (B,I,J,d) product is never materialized in the forward.
    """
    coupling = _lift(coupling)
    votes = _lift(votes)
    if coupling.data.shape != votes.data.shape[:3]:
        raise ShapeError(
            f"coupled_sum shape mismatch: {coupling.data.shape} vs {votes.data.shape}"
        )
    out_data = np.einsum("bij,bijd->bjd", coupling.data, votes.data, optimize=True)

    def bw(g):
        dc = np.einsum("bjd,bijd->bij", g, votes.data, optimize=True)
        dv = coupling.data[:, :, :, None] * g[:, None, :, :]
        return dc, dv

    return _make(out_data, (coupling, votes), bw)


def vote_dot(votes, poses):
    """Per-pair agreement: out[b,i,j] = sum_d votes[b,i,j,d] * poses[b,j,d]."""
    votes = _lift(votes)
    poses = _lift(poses)
    B, I, J, d = votes.data.shape
    if poses.data.shape != (B, J, d):
        raise ShapeError(f"vote_dot shapes: votes {votes.data.shape} vs poses {poses.data.shape}")
    out_data = np.einsum("bijd,bjd->bij", votes.data, poses.data, optimize=True)

    def bw(g):
        dvotes = g[:, :, :, None] * poses.data[:, None, :, :]
        dposes = np.einsum("bij,bijd->bjd", g, votes.data, optimize=True)
        return dvotes, dposes

    return _make(out_data, (votes, poses), bw)


def conv2d(x, kernels, bias=None, stride=1):
    """Valid cross-correlation over channels-last images.

    x: (B, H, W, Cin), kernels: (k, k, Cin, Cout) -> (B, H', W', Cout) with
    H' = (H - k)//stride + 1. No padding; per-channel bias optional.
    """
    x = _lift(x)
    kernels = _lift(kernels)
    if x.data.ndim != 4 or kernels.data.ndim != 4:
        raise ShapeError("conv2d expects x (B,H,W,C) and kernels (k,k,Cin,Cout)")
    B, H, W, C = x.data.shape
    k, k2, cin, cout = kernels.data.shape
    if k != k2:
        raise ShapeError(f"conv2d kernels must be square, got {k}x{k2}")
    if cin != C:
        raise ShapeError(f"conv2d channel mismatch: input {C}, kernels {cin}")
    if k > H or k > W:
        raise ShapeError(f"conv2d kernel {k} larger than input {H}x{W}")
    if stride < 1:
        raise ShapeError("conv2d stride must be >= 1")
    ho = (H - k) // stride + 1
    wo = (W - k) // stride + 1

    win = np.lib.stride_tricks.sliding_window_view(x.data, (k, k), axis=(1, 2))
    win = win[:, ::stride, ::stride]  # (B, ho, wo, C, k, k)
    cols = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(B * ho * wo, k * k * C)
    kmat = kernels.data.reshape(k * k * C, cout)
    out_data = (cols @ kmat).reshape(B, ho, wo, cout)

    def bw(g):
        gm = g.reshape(B * ho * wo, cout)
        dk = (cols.T @ gm).reshape(k, k, C, cout)
        dcols = (gm @ kmat.T).reshape(B, ho, wo, k, k, C)
        dx = np.zeros_like(x.data)
        for di in range(k):
            for dj in range(k):
                dx[:, di : di + stride * ho : stride, dj : dj + stride * wo : stride, :] += dcols[
                    :, :, :, di, dj, :
                ]
        return dx, dk

    out = _make(out_data, (x, kernels), bw)
    if bias is not None:
        out = add(out, bias)
    return out


# -- composite network math ---------------------------------------------------


def softmax(x, axis):
    """Probability-normalize along an axis, max-shifted for stability."""
    x = _lift(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        dot = (g * out_data).sum(axis=axis, keepdims=True)
        return (out_data * (g - dot),)

    return _make(out_data, (x,), bw)


def eps_norm(x, axis=-1, keepdims=False):
    """sqrt(sum(x^2) + NORM_EPS): a norm whose gradient is finite at zero."""
    ss = tsum(mul(x, x), axis=axis, keepdims=keepdims)
    return sqrt(add(ss, NORM_EPS))


def squash(s, axis=-1):
    """Shrink a vector to norm ||s||^2/(1+||s||^2), direction preserved.

    Computed as s * n / (1 + ||s||^2) with n = sqrt(||s||^2 + NORM_EPS), the
    algebraically equivalent form whose gradient is defined at s = 0.
    """
    ss = tsum(mul(s, s), axis=axis, keepdims=True)
    n = sqrt(add(ss, NORM_EPS))
    return mul(s, div(n, add(ss, 1.0)))


def affine_vote(weight, pose):
    """Single child-to-parent vote: weight (d_out, d_in) @ pose (d_in,)."""
    weight = _lift(weight)
    pose = _lift(pose)
    if weight.data.ndim != 2 or pose.data.ndim != 1:
        raise ShapeError("affine_vote expects a matrix and a vector")
    if weight.data.shape[1] != pose.data.shape[0]:
        raise ShapeError(
            f"affine_vote dim mismatch: {weight.data.shape} @ {pose.data.shape}"
        )
    batched = affine_votes(
        reshape(pose, (1, 1, pose.data.shape[0])),
        reshape(weight, (1, 1) + weight.data.shape),
    )
    return reshape(batched, (weight.data.shape[0],))


def glorot_uniform(rng, shape, fan_in, fan_out, dtype=DEFAULT_DTYPE):
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)
