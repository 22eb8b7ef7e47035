"""Interchangeable attention cores: softmax, S-D, and ELU+1 causal linear.

The S-D core replaces the raw score matrix with L = S - diag(d), where
S = (P - P^T)/2 is the skew part of P = Q K^T / sqrt(d_head) and
d_i = softplus(w_d . x_i + b_d) + epsilon > 0. Any such L has every
eigenvalue in the closed left half-plane.

Layer forwards operate on autograd tensors with heads folded into the batch
axis, i.e. scores are (B*H, N, N). A ``hook`` may intercept the unmasked
scores at inference time (see ``surgery`` and ``probe``).
"""
import math
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from ._kernels import DENOM_FLOOR

MECHANISMS = ("standard", "sd", "linear")
DEFAULT_EPSILON = 0.05


class UnknownMechanismError(ValueError):
    pass


@dataclass
class SDHeadParams:
    W_Q: np.ndarray
    W_K: np.ndarray
    W_V: np.ndarray
    W_O: np.ndarray
    w_d: np.ndarray
    b_d: float = 0.0
    epsilon: float = DEFAULT_EPSILON

    def __post_init__(self):
        if self.epsilon < 0:
            raise ValueError(f"epsilon must be >= 0, got {self.epsilon}")


@dataclass
class InteractionMatrix:
    L: np.ndarray
    S: np.ndarray
    d: np.ndarray


def _f32(a):
    return np.asarray(a, dtype=np.float32)


def _check_x(X, W):
    if X.ndim != 2 or X.shape[1] != W.shape[0]:
        raise ag.ShapeError(f"X must be N x {W.shape[0]}, got {X.shape}")


def standard_scores(X, W_Q, W_K, d_head):
    """Unmasked Q K^T / sqrt(d_head) for one head."""
    X, W_Q, W_K = _f32(X), _f32(W_Q), _f32(W_K)
    _check_x(X, W_Q)
    if W_Q.shape != W_K.shape:
        raise ag.ShapeError(f"W_Q {W_Q.shape} and W_K {W_K.shape} differ")
    q, k = X @ W_Q, X @ W_K
    return (q @ k.T) / np.float32(math.sqrt(d_head))


def damping(X, w_d, b_d, epsilon):
    z = ag.Tensor(_f32(X) @ _f32(w_d).reshape(-1) + np.float32(b_d))
    return ag.softplus(z).data + np.float32(epsilon)


def sd_scores(X, params):
    """S - diag(d) for one head, before masking."""
    d_head = params.W_Q.shape[1]
    P = standard_scores(X, params.W_Q, params.W_K, d_head)
    S = 0.5 * (P - P.T)
    d = damping(X, params.w_d, params.b_d, params.epsilon)
    L = S.copy()
    idx = np.arange(L.shape[0])
    L[idx, idx] -= d
    return InteractionMatrix(L=L, S=S, d=d)


def elu_plus_one(x):
    x = np.asarray(x)
    return np.where(x > 0, x + 1.0, np.exp(np.minimum(x, 0.0))).astype(x.dtype)


def linear_attention(X, W_Q, W_K, W_V, W_O, heads=1):
    """ELU+1 causal linear attention via the O(N) running-state recurrence."""
    X = _f32(X)
    _check_x(X, _f32(W_Q))
    n = X.shape[0]
    inner = W_Q.shape[1]
    dh = inner // heads

    def split(t):
        return np.ascontiguousarray(t.reshape(n, heads, dh).transpose(1, 0, 2))

    q = split(elu_plus_one(X @ _f32(W_Q)))
    k = split(elu_plus_one(X @ _f32(W_K)))
    v = split(X @ _f32(W_V))
    o = ag.causal_linear_attention(q, k, v).data
    return o.transpose(1, 0, 2).reshape(n, inner) @ _f32(W_O)


def linear_attention_quadratic(X, W_Q, W_K, W_V, W_O, heads=1, floor=DENOM_FLOOR):
    """Reference: materialize phi(Q) phi(K)^T, mask, row-normalize, apply to V."""
    X = np.asarray(X, dtype=np.float64)
    n = X.shape[0]
    inner = W_Q.shape[1]
    dh = inner // heads
    q = elu_plus_one(X @ W_Q)
    k = elu_plus_one(X @ W_K)
    v = X @ W_V
    out = np.zeros((n, inner))
    tri = np.tril(np.ones((n, n)))
    for h in range(heads):
        sl = slice(h * dh, (h + 1) * dh)
        w = (q[:, sl] @ k[:, sl].T) * tri
        den = np.maximum(w.sum(axis=1, keepdims=True), floor)
        out[:, sl] = (w / den) @ v[:, sl]
    return out @ W_O


# ---------------------------------------------------------------------------
# layer cores on autograd tensors


class ScoreHook:
    """Inference-time interceptor. Return None to leave scores untouched."""

    def standard(self, layer, A):
        return None

    def sd(self, layer, S, d):
        return None

    def linear(self, layer, phi_q, phi_k):
        return None


def _split_heads(t, B, N, H, dh):
    t = ag.reshape(t, (B, N, H, dh))
    t = ag.transpose(t, (0, 2, 1, 3))
    return ag.reshape(t, (B * H, N, dh))


def _merge_heads(t, B, N, H, dh):
    t = ag.reshape(t, (B, H, N, dh))
    t = ag.transpose(t, (0, 2, 1, 3))
    return ag.reshape(t, (B * N, H * dh))


def attention_layer_forward(x, params, spec, epsilon=DEFAULT_EPSILON, hook=None, layer=0):
    """x: Tensor (B, N, d_model) -> Tensor (B, N, d_model).

    ``params`` maps w_q, w_k, w_v (d_model x H*d_head), w_o (H*d_head x
    d_model) and, for the S-D core, w_d (d_model x H) and b_d (H,).
    """
    mech = spec.mechanism
    if mech not in MECHANISMS:
        raise UnknownMechanismError(f"unknown attention mechanism {mech!r}; expected one of {MECHANISMS}")
    B, N, D = x.shape
    H, dh = spec.heads, spec.d_head
    x2 = ag.reshape(x, (B * N, D))
    q = _split_heads(ag.matmul(x2, params["w_q"]), B, N, H, dh)
    k = _split_heads(ag.matmul(x2, params["w_k"]), B, N, H, dh)
    v = _split_heads(ag.matmul(x2, params["w_v"]), B, N, H, dh)

    if mech == "linear":
        pq = ag.add_scalar(ag.elu(q), 1.0)
        pk = ag.add_scalar(ag.elu(k), 1.0)
        if hook is not None:
            hook.linear(layer, pq.data.reshape(B, H, N, dh), pk.data.reshape(B, H, N, dh))
        o = ag.causal_linear_attention(pq, pk, v)
    else:
        P = ag.scale(ag.matmul(q, ag.transpose(k)), 1.0 / math.sqrt(dh))
        if mech == "standard":
            L = P
            if hook is not None:
                rep = hook.standard(layer, P.data.reshape(B, H, N, N))
                if rep is not None:
                    L = ag.Tensor(np.asarray(rep, dtype=P.data.dtype).reshape(P.shape))
        else:
            S = ag.skew(P)
            z = ag.add(ag.matmul(x2, params["w_d"]), params["b_d"])  # (B*N, H)
            d = ag.add_scalar(ag.softplus(z), epsilon)
            d = ag.reshape(ag.transpose(ag.reshape(d, (B, N, H)), (0, 2, 1)), (B * H, N))
            if hook is not None:
                rep = hook.sd(layer, S.data.reshape(B, H, N, N), d.data.reshape(B, H, N))
                if rep is not None:
                    S_new, d_new = rep
                    S = ag.Tensor(np.asarray(S_new, dtype=S.data.dtype).reshape(S.shape))
                    d = ag.Tensor(np.asarray(d_new, dtype=d.data.dtype).reshape(d.shape))
            L = ag.sub_diagonal(S, d)
        # mask after the full interaction is built; diagonal stays unmasked
        A = ag.softmax_rows(L, causal=True)
        o = ag.matmul(A, v)
    o = _merge_heads(o, B, N, H, dh)
    return ag.reshape(ag.matmul(o, params["w_o"]), (B, N, D))
