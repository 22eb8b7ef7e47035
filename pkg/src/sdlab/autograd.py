"""Small reverse-mode autodiff over numpy arrays.

Operations executed inside an active :class:`Tape` are appended to it in
execution order, which is already a topological order, so ``backward`` is a
single reverse sweep. Outside a tape, ops just compute values.

Broadcasting is deliberately limited to bias-add (a 1-D vector over the last
axis) and scalar add/scale. Everything else needs matching shapes; reshape
explicitly.
"""
import math

import numpy as np

from . import _kernels

DTYPE = np.float32


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad=False, dtype=DTYPE, name=None):
        arr = np.asarray(data, dtype=dtype)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    # operator sugar; all dispatch to the module functions below
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)


class _Node:
    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out, inputs, backward):
        self.out = out
        self.inputs = inputs
        self.backward = backward


_ACTIVE = []


class Tape:
    """Ordered record of differentiable ops.

    >>> with Tape() as tape:
    ...     loss = ...
    >>> tape.backward(loss)
    """

    def __init__(self):
        self.nodes = []

    def __enter__(self):
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE.remove(self)
        return False

    def __len__(self):
        return len(self.nodes)

    def backward(self, loss, grad=None):
        if grad is None:
            if loss.data.size != 1:
                raise ShapeError(f"backward needs a scalar loss or an explicit grad, got shape {loss.shape}")
            grad = np.ones_like(loss.data)
        loss.grad = np.asarray(grad, dtype=loss.data.dtype)
        for node in reversed(self.nodes):
            g = node.out.grad
            if g is None:
                continue
            in_grads = node.backward(g)
            for t, gi in zip(node.inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                if t.grad is None:
                    fresh = gi is not g and gi.flags.owndata and gi.dtype == t.data.dtype
                    t.grad = gi if fresh else np.array(gi, dtype=t.data.dtype, copy=True)
                else:
                    t.grad += gi
            # intermediates are never user-held leaves; free their grads
            if node.out is not loss:
                node.out.grad = None


def backward(tape, loss, grad=None):
    tape.backward(loss, grad)


def _op(data, inputs, backward):
    req = any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=req, dtype=data.dtype)
    if req and _ACTIVE:
        _ACTIVE[-1].nodes.append(_Node(out, inputs, backward))
    return out


def parameter(data, name=None, dtype=DTYPE):
    return Tensor(data, requires_grad=True, dtype=dtype, name=name)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# linear algebra / structural


def _swap(a):
    return np.swapaxes(a, -1, -2)


def matmul(a, b):
    """(..., m, k) @ (..., k, n) with identical leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2 or a.shape[-1] != b.shape[-2] or a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    out = np.matmul(ad, bd)

    def back(g):
        ga = np.matmul(g, _swap(bd)) if a.requires_grad else None
        gb = np.matmul(_swap(ad), g) if b.requires_grad else None
        return ga, gb

    return _op(out, (a, b), back)


def transpose(a, axes=None):
    """Permute axes; default swaps the last two."""
    a = as_tensor(a)
    if axes is None:
        axes = list(range(a.data.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(np.transpose(a.data, axes))

    def back(g):
        return (np.transpose(g, inv),)

    return _op(out, (a,), back)


def reshape(a, shape):
    a = as_tensor(a)
    old = a.shape
    out = np.reshape(a.data, shape)

    def back(g):
        return (np.reshape(g, old),)

    return _op(out, (a,), back)


def add(a, b):
    """Elementwise sum; ``b`` may be a bias vector over the last axis."""
    a, b = as_tensor(a), as_tensor(b)
    bias = b.data.ndim == 1 and a.data.ndim > 1 and b.shape[0] == a.shape[-1]
    if a.shape != b.shape and not bias:
        raise ShapeError(f"add shape mismatch: {a.shape} + {b.shape}")
    out = a.data + b.data

    def back(g):
        gb = None
        if b.requires_grad:
            gb = g.reshape(-1, g.shape[-1]).sum(axis=0) if bias else g
        return g, gb

    return _op(out, (a, b), back)


def add_scalar(a, c):
    a = as_tensor(a)
    return _op(a.data + np.asarray(c, dtype=a.data.dtype), (a,), lambda g: (g,))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"sub shape mismatch: {a.shape} - {b.shape}")
    return _op(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"mul shape mismatch: {a.shape} * {b.shape}")
    ad, bd = a.data, b.data

    def back(g):
        return (g * bd if a.requires_grad else None, g * ad if b.requires_grad else None)

    return _op(ad * bd, (a, b), back)


def scale(a, c):
    a = as_tensor(a)
    c = float(c)
    return _op(a.data * a.data.dtype.type(c), (a,), lambda g: (g * g.dtype.type(c),))


def skew(a):
    """(A - A^T) / 2 over the last two axes."""
    a = as_tensor(a)
    out = 0.5 * (a.data - _swap(a.data))
    return _op(out, (a,), lambda g: (0.5 * (g - _swap(g)),))


def sym(a):
    """(A + A^T) / 2 over the last two axes."""
    a = as_tensor(a)
    out = 0.5 * (a.data + _swap(a.data))
    return _op(out, (a,), lambda g: (0.5 * (g + _swap(g)),))


def sub_diagonal(a, d):
    """A - diag(d) for A (..., N, N) and d (..., N)."""
    a, d = as_tensor(a), as_tensor(d)
    n = a.shape[-1]
    if a.shape[-2] != n or d.shape != a.shape[:-1]:
        raise ShapeError(f"sub_diagonal shape mismatch: {a.shape} vs {d.shape}")
    out = a.data.copy()
    idx = np.arange(n)
    out[..., idx, idx] -= d.data

    def back(g):
        return g, (-g[..., idx, idx] if d.requires_grad else None)

    return _op(out, (a, d), back)


def sum_all(a):
    a = as_tensor(a)
    shape = a.shape
    return _op(np.asarray(a.data.sum(dtype=np.float64), dtype=a.data.dtype), (a,),
               lambda g: (np.broadcast_to(g, shape).copy(),))


def mean_all(a):
    a = as_tensor(a)
    shape, n = a.shape, a.data.size
    return _op(np.asarray(a.data.mean(dtype=np.float64), dtype=a.data.dtype), (a,),
               lambda g: (np.full(shape, g / n, dtype=g.dtype),))


def sum_rows(a):
    """Sum over the last axis, keeping it as extent 1."""
    a = as_tensor(a)
    shape = a.shape
    return _op(a.data.sum(axis=-1, keepdims=True), (a,), lambda g: (np.broadcast_to(g, shape).copy(),))


def sum_cols(a):
    """Sum over the second-to-last axis, keeping it as extent 1."""
    a = as_tensor(a)
    shape = a.shape
    return _op(a.data.sum(axis=-2, keepdims=True), (a,), lambda g: (np.broadcast_to(g, shape).copy(),))


# ---------------------------------------------------------------------------
# elementwise nonlinearities


def softplus(a):
    """log(1 + exp(x)); returns x directly above 30."""
    a = as_tensor(a)
    x = a.data
    big = x > 30.0
    safe = np.where(big, 0.0, x)
    out = np.where(big, x, np.log1p(np.exp(safe))).astype(x.dtype)

    def back(g):
        sig = 0.5 * (1.0 + np.tanh(0.5 * x))  # sigmoid without overflow
        return (g * sig.astype(x.dtype),)

    return _op(out, (a,), back)


def elu(a, alpha=1.0):
    a = as_tensor(a)
    x = a.data
    neg = x < 0
    em1 = np.expm1(np.minimum(x, 0.0))
    out = np.where(neg, alpha * em1, x).astype(x.dtype)

    def back(g):
        return (g * np.where(neg, alpha * (em1 + 1.0), 1.0).astype(x.dtype),)

    return _op(out, (a,), back)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a):
    """tanh approximation, as in GPT-2."""
    a = as_tensor(a)
    x = a.data
    x2 = x * x
    t = np.tanh(x * (_GELU_C + (_GELU_C * 0.044715) * x2))
    out = 0.5 * x * (1.0 + t)

    def back(g):
        dinner = _GELU_C + (3 * _GELU_C * 0.044715) * x2
        d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
        return (g * d,)

    return _op(out, (a,), back)


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.data)
    return _op(out, (a,), lambda g: (g * out,))


# ---------------------------------------------------------------------------
# fused layers


class FullyMaskedRowError(ValueError):
    pass


def softmax_rows(a, causal=True):
    """Row softmax over the last axis of (..., N, N) scores.

    With ``causal`` the strict upper triangle is treated as -inf; the
    diagonal is never masked.
    """
    a = as_tensor(a)
    shape = a.shape
    if a.data.ndim < 2 or shape[-1] != shape[-2]:
        raise ShapeError(f"softmax_rows expects square trailing axes, got {shape}")
    x = a.data.reshape((-1,) + shape[-2:])
    with np.errstate(invalid="ignore"):  # all -inf rows are diagnosed below
        if causal:
            y = _kernels.causal_softmax(x)
        else:
            z = x - x.max(axis=-1, keepdims=True)
            e = np.exp(z)
            y = e / e.sum(axis=-1, keepdims=True)
    bad = ~np.isfinite(y).all(axis=-1)
    if bad.any():
        xm = np.where(np.tril(np.ones(shape[-2:], dtype=bool)), x, -np.inf) if causal else x
        if np.isneginf(xm[bad]).all(axis=-1).any():
            raise FullyMaskedRowError("softmax row has every entry masked")

    def back(g):
        g3 = g.reshape(y.shape)
        if causal:
            dx = _kernels.causal_softmax_backward(y, g3)
        else:
            dx = y * (g3 - (g3 * y).sum(axis=-1, keepdims=True))
        return (dx.reshape(shape),)

    return _op(y.reshape(shape), (a,), back)


def layer_norm(x, gamma, beta, eps=1e-5):
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat * gamma.data + beta.data
    n = xd.shape[-1]

    def back(g):
        flat = g.reshape(-1, n)
        gg = flat.sum(axis=0) if beta.requires_grad else None
        ggam = (flat * xhat.reshape(-1, n)).sum(axis=0) if gamma.requires_grad else None
        gx = None
        if x.requires_grad:
            dxhat = g * gamma.data
            gx = rstd * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                         - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return gx, ggam, gg

    return _op(out.astype(xd.dtype, copy=False), (x, gamma, beta), back)


def embedding(weight, idx):
    weight = as_tensor(weight)
    idx = np.asarray(idx)
    if idx.size and (idx.min() < 0 or idx.max() >= weight.shape[0]):
        raise IndexError(f"embedding index out of range [0, {weight.shape[0]})")
    out = weight.data[idx]
    vocab, dim = weight.shape

    def back(g):
        gw = np.zeros((vocab, dim), dtype=g.dtype)
        np.add.at(gw, idx.reshape(-1), g.reshape(-1, dim))
        return (gw,)

    return _op(out, (weight,), back)


def cross_entropy(logits, targets):
    """Mean next-token NLL for logits (M, V) and integer targets (M,)."""
    logits = as_tensor(logits)
    t = np.asarray(targets).reshape(-1)
    x = logits.data
    if x.ndim != 2 or x.shape[0] != t.shape[0]:
        raise ShapeError(f"cross_entropy expects (M, V) logits and (M,) targets, got {x.shape}, {t.shape}")
    m = x.shape[0]
    z = x - x.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    nll = lse - z[np.arange(m), t]
    out = np.asarray(nll.mean(dtype=np.float64), dtype=x.dtype)

    def back(g):
        p = np.exp(z - lse[:, None])
        p[np.arange(m), t] -= 1.0
        return (p * (g / m),)

    return _op(out, (logits,), back)


def causal_linear_attention(phi_q, phi_k, v, floor=_kernels.DENOM_FLOOR):
    """ELU+1 style linear attention on pre-mapped features (M, N, D)."""
    phi_q, phi_k, v = as_tensor(phi_q), as_tensor(phi_k), as_tensor(v)
    if phi_q.shape != phi_k.shape or phi_q.shape[:2] != v.shape[:2]:
        raise ShapeError(f"linear attention shapes: q {phi_q.shape}, k {phi_k.shape}, v {v.shape}")
    qd, kd, vd = phi_q.data, phi_k.data, v.data
    out, den = _kernels.linear_attention(qd, kd, vd, floor)

    def back(g):
        return _kernels.linear_attention_backward(qd, kd, vd, out, den, g, floor)

    return _op(out, (phi_q, phi_k, v), back)
