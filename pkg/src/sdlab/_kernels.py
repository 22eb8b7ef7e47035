"""Hot inner loops: causal row softmax and the ELU+1 linear-attention recurrence.

Each kernel exists twice, a numba ``@njit`` loop and a vectorized numpy
version. The numba path is used when numba imports cleanly and the
environment variable ``SDLAB_DISABLE_NUMBA`` is unset (or "0"). Both paths
are always importable so tests and ``benchmarks/bench_kernels.py`` can compare
them directly.

All arrays are batched over a leading axis: scores are (M, N, N), features
are (M, N, D).
"""
import os

import numpy as np

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        def wrapper(f):
            return f

        if len(args) == 1 and callable(args[0]):
            return args[0]
        return wrapper


DENOM_FLOOR = 1e-6


def numba_enabled():
    flag = os.environ.get("SDLAB_DISABLE_NUMBA", "0").strip().lower()
    return HAVE_NUMBA and flag in ("", "0", "false", "no")


# ---------------------------------------------------------------------------
# causal softmax


def causal_softmax_numpy(x):
    n = x.shape[-1]
    mask = np.triu(np.ones((n, n), dtype=bool), k=1)
    z = np.where(mask, -np.inf, x)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def causal_softmax_backward_numpy(y, g):
    # y is exactly zero above the diagonal, so the masked entries drop out.
    return y * (g - (g * y).sum(axis=-1, keepdims=True))


@njit(cache=True)
def causal_softmax_numba(x):
    m_, n, _ = x.shape
    y = np.zeros_like(x)
    for m in range(m_):
        for i in range(n):
            mx = x[m, i, 0]
            for j in range(1, i + 1):
                if x[m, i, j] > mx:
                    mx = x[m, i, j]
            s = 0.0
            for j in range(i + 1):
                e = np.exp(x[m, i, j] - mx)
                y[m, i, j] = e
                s += e
            inv = 1.0 / s
            for j in range(i + 1):
                y[m, i, j] *= inv
    return y


@njit(cache=True)
def causal_softmax_backward_numba(y, g):
    m_, n, _ = y.shape
    dx = np.zeros_like(y)
    for m in range(m_):
        for i in range(n):
            dot = 0.0
            for j in range(i + 1):
                dot += g[m, i, j] * y[m, i, j]
            for j in range(i + 1):
                dx[m, i, j] = y[m, i, j] * (g[m, i, j] - dot)
    return dx


def causal_softmax(x):
    x = np.ascontiguousarray(x)
    if numba_enabled():
        return causal_softmax_numba(x)
    return causal_softmax_numpy(x)


def causal_softmax_backward(y, g):
    y = np.ascontiguousarray(y)
    g = np.ascontiguousarray(g, dtype=y.dtype)
    if numba_enabled():
        return causal_softmax_backward_numba(y, g)
    return causal_softmax_backward_numpy(y, g)


# ---------------------------------------------------------------------------
# causal linear attention
#
#   out_i = (q_i . sum_{j<=i} k_j v_j^T) / max(q_i . sum_{j<=i} k_j, floor)
#
# q and k are already feature-mapped (strictly positive for ELU+1).


def linear_attention_numpy(q, k, v, floor=DENOM_FLOOR):
    """Returns (out, raw_denominator)."""
    kv = np.cumsum(k[..., :, None] * v[..., None, :], axis=1)  # (M, N, D, E)
    z = np.cumsum(k, axis=1)  # (M, N, D)
    num = np.einsum("mnd,mnde->mne", q, kv)
    den = np.einsum("mnd,mnd->mn", q, z)
    out = num / np.maximum(den, floor)[..., None]
    return out.astype(q.dtype, copy=False), den.astype(q.dtype, copy=False)


def linear_attention_backward_numpy(q, k, v, out, den, g, floor=DENOM_FLOOR):
    dclamp = np.maximum(den, floor)[..., None]
    dnum = g / dclamp  # (M, N, E)
    dden = np.where(den > floor, -(g * out).sum(-1) / dclamp[..., 0], 0.0)  # (M, N)
    kv = np.cumsum(k[..., :, None] * v[..., None, :], axis=1)
    z = np.cumsum(k, axis=1)
    dq = np.einsum("mnde,mne->mnd", kv, dnum) + z * dden[..., None]
    # reverse cumulative sums over i >= j
    gs = np.cumsum((q[..., :, None] * dnum[..., None, :])[:, ::-1], axis=1)[:, ::-1]
    hs = np.cumsum((q * dden[..., None])[:, ::-1], axis=1)[:, ::-1]
    dk = np.einsum("mnde,mne->mnd", gs, v) + hs
    dv = np.einsum("mnde,mnd->mne", gs, k)
    cast = q.dtype
    return dq.astype(cast, copy=False), dk.astype(cast, copy=False), dv.astype(cast, copy=False)


@njit(cache=True)
def linear_attention_numba(q, k, v, floor):
    m_, n, d = q.shape
    e_ = v.shape[2]
    out = np.zeros((m_, n, e_), dtype=q.dtype)
    den = np.zeros((m_, n), dtype=q.dtype)
    for m in range(m_):
        s = np.zeros((d, e_), dtype=np.float64)
        z = np.zeros(d, dtype=np.float64)
        for i in range(n):
            for a in range(d):
                ka = k[m, i, a]
                z[a] += ka
                for b in range(e_):
                    s[a, b] += ka * v[m, i, b]
            dn = 0.0
            for a in range(d):
                dn += q[m, i, a] * z[a]
            den[m, i] = dn
            dc = dn if dn > floor else floor
            for b in range(e_):
                acc = 0.0
                for a in range(d):
                    acc += q[m, i, a] * s[a, b]
                out[m, i, b] = acc / dc
    return out, den


@njit(cache=True)
def linear_attention_backward_numba(q, k, v, out, den, g, floor):
    m_, n, d = q.shape
    e_ = v.shape[2]
    dq = np.zeros_like(q)
    dk = np.zeros_like(k)
    dv = np.zeros_like(v)
    dnum = np.zeros(e_, dtype=np.float64)
    for m in range(m_):
        # forward sweep: dq needs the prefix states
        s = np.zeros((d, e_), dtype=np.float64)
        z = np.zeros(d, dtype=np.float64)
        dden = np.zeros(n, dtype=np.float64)
        for i in range(n):
            for a in range(d):
                ka = k[m, i, a]
                z[a] += ka
                for b in range(e_):
                    s[a, b] += ka * v[m, i, b]
            dc = den[m, i] if den[m, i] > floor else floor
            go = 0.0
            for b in range(e_):
                go += g[m, i, b] * out[m, i, b]
            dd = -go / dc if den[m, i] > floor else 0.0
            dden[i] = dd
            for a in range(d):
                acc = z[a] * dd
                for b in range(e_):
                    acc += s[a, b] * g[m, i, b] / dc
                dq[m, i, a] = acc
        # reverse sweep: suffix sums for dk, dv
        gs = np.zeros((d, e_), dtype=np.float64)
        hs = np.zeros(d, dtype=np.float64)
        for i in range(n - 1, -1, -1):
            dc = den[m, i] if den[m, i] > floor else floor
            for b in range(e_):
                dnum[b] = g[m, i, b] / dc
            for a in range(d):
                qa = q[m, i, a]
                hs[a] += qa * dden[i]
                for b in range(e_):
                    gs[a, b] += qa * dnum[b]
            for a in range(d):
                acc = hs[a]
                for b in range(e_):
                    acc += gs[a, b] * v[m, i, b]
                dk[m, i, a] = acc
            for b in range(e_):
                acc = 0.0
                for a in range(d):
                    acc += gs[a, b] * k[m, i, a]
                dv[m, i, b] = acc
    return dq, dk, dv


def linear_attention(q, k, v, floor=DENOM_FLOOR):
    q, k, v = (np.ascontiguousarray(a) for a in (q, k, v))
    if numba_enabled():
        return linear_attention_numba(q, k, v, floor)
    return linear_attention_numpy(q, k, v, floor)


def linear_attention_backward(q, k, v, out, den, g, floor=DENOM_FLOOR):
    args = [np.ascontiguousarray(a) for a in (q, k, v, out, den)]
    g = np.ascontiguousarray(g, dtype=q.dtype)
    if numba_enabled():
        return linear_attention_backward_numba(*args, g, floor)
    return linear_attention_backward_numpy(*args, g, floor)
