"""Routing/filtering split of interaction matrices and their spectra.

Everything here runs in float64 regardless of the dtype handed in.

A square score matrix A splits uniquely into a symmetric part
F = (A + A^T)/2 (filtering: undirected mutual relevance) and a skew part
R = (A - A^T)/2 (routing: directional, zero-sum transport). Singular values of
R come in equal pairs, one pair per rotation plane.
"""
import logging
import math
from dataclasses import dataclass

import numpy as np

log = logging.getLogger(__name__)

RHO_INF = math.inf
ZERO_NORM = 1e-15

ROUTING = "routing"
FILTERING = "filtering"


class SpectralError(ValueError):
    pass


class ConvergenceError(ArithmeticError):
    """LAPACK did not converge; carries conditioning diagnostics."""

    def __init__(self, what, matrix):
        m = np.asarray(matrix, dtype=np.float64)
        try:
            cond = float(np.linalg.cond(m)) if m.ndim == 2 else float("nan")
        except np.linalg.LinAlgError:
            cond = float("inf")
        self.norm = float(np.linalg.norm(m))
        self.cond = cond
        self.shape = m.shape
        super().__init__(f"{what} did not converge (shape={m.shape}, fro_norm={self.norm:.3e}, cond={cond:.3e})")


@dataclass(frozen=True)
class Decomposition:
    R: np.ndarray
    F: np.ndarray

    def recombine(self):
        return self.R + self.F


@dataclass(frozen=True)
class SpectralReport:
    singular_values_R: np.ndarray
    singular_values_F: np.ndarray
    effrank_R: float
    effrank_F: float
    rho: float
    max_re_lambda: float

    def as_dict(self):
        return {
            "effrank_R": self.effrank_R,
            "effrank_F": self.effrank_F,
            "rho": self.rho,
            "max_re_lambda": self.max_re_lambda,
            "singular_values_R": self.singular_values_R.tolist(),
            "singular_values_F": self.singular_values_F.tolist(),
        }


@dataclass(frozen=True)
class WeightKernel:
    M: np.ndarray
    layer: int = 0
    head: int = 0


def _as_square(a, what="matrix"):
    a = np.asarray(a, dtype=np.float64)
    if a.ndim < 2 or a.shape[-1] != a.shape[-2]:
        raise SpectralError(f"{what} must be square, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise SpectralError(f"{what} has non-finite entries")
    return a


def decompose(A):
    """Split A into (R skew, F symmetric). Works on stacks (..., n, n)."""
    A = _as_square(A)
    At = np.swapaxes(A, -1, -2)
    return Decomposition(R=(A - At) / 2.0, F=(A + At) / 2.0)


def singular_values(M):
    M = np.asarray(M, dtype=np.float64)
    try:
        return np.linalg.svd(M, compute_uv=False)
    except np.linalg.LinAlgError as exc:
        raise ConvergenceError("svd", M) from exc


def effective_rank(M=None, *, sv=None):
    """sum(sigma) / sigma_max; 0 for the zero matrix.

    Pass ``sv`` to reuse singular values already computed. Stacks give one
    value per matrix.
    """
    if sv is None:
        M = np.asarray(M, dtype=np.float64)
        if not np.all(np.isfinite(M)):
            raise SpectralError("effective_rank needs finite entries")
        sv = singular_values(M)
    sv = np.asarray(sv, dtype=np.float64)
    smax = sv.max(axis=-1) if sv.shape[-1] else np.zeros(sv.shape[:-1])
    total = sv.sum(axis=-1)
    safe = np.where(smax > 0, smax, 1.0)
    er = np.where(smax > 0, total / safe, 0.0)
    return float(er) if np.ndim(er) == 0 else er


def rho(d):
    """||R||_F / ||F||_F with +inf when F vanishes and R does not."""
    nr = float(np.linalg.norm(d.R))
    nf = float(np.linalg.norm(d.F))
    if nf < ZERO_NORM:
        return RHO_INF if nr >= ZERO_NORM else 0.0
    return nr / nf


def max_real_eigenvalue(M):
    """Largest real part over the (complex) spectrum of a real square matrix.

    LAPACK dgeev: Hessenberg reduction followed by shifted QR.
    Stacks return an array.
    """
    M = _as_square(M)
    try:
        ev = np.linalg.eigvals(M)
    except np.linalg.LinAlgError as exc:
        raise ConvergenceError("eigenvalue iteration", M) from exc
    out = ev.real.max(axis=-1)
    return float(out) if np.ndim(out) == 0 else out


def spectral_norm(M):
    M = np.asarray(M, dtype=np.float64)
    if M.size == 0:
        return 0.0
    out = singular_values(M).max(axis=-1)
    return float(out) if np.ndim(out) == 0 else out


def svd(M):
    """Full SVD (U, s, Vt) in float64, singular values descending."""
    M = np.asarray(M, dtype=np.float64)
    if not np.all(np.isfinite(M)):
        raise SpectralError("svd needs finite entries")
    try:
        return np.linalg.svd(M, full_matrices=False)
    except np.linalg.LinAlgError as exc:
        raise ConvergenceError("svd", M) from exc


def _even(k):
    return k - (k % 2)


def truncate_rank(M, k, component_kind=ROUTING):
    """Keep the top-k singular triplets of M (stacks allowed).

    For routing, k is rounded down to even: rotation planes come in pairs.
    The result is re-skewed / re-symmetrized to remove rounding drift.
    """
    if k < 0:
        raise SpectralError(f"truncation rank must be >= 0, got {k}")
    if component_kind not in (ROUTING, FILTERING):
        raise SpectralError(f"unknown component kind {component_kind!r}")
    M = _as_square(M)
    k = int(k)
    if component_kind == ROUTING and k % 2:
        log.info("routing rank %d rounded down to %d (rotation planes pair)", k, _even(k))
        k = _even(k)
    n = M.shape[-1]
    if k == 0:
        T = np.zeros_like(M)
    elif k >= n:
        T = M.copy()
    else:
        U, s, Vt = svd(M)
        T = np.matmul(U[..., :, :k] * s[..., None, :k], Vt[..., :k, :])
    Tt = np.swapaxes(T, -1, -2)
    if component_kind == ROUTING:
        return (T - Tt) / 2.0
    return (T + Tt) / 2.0


def weight_kernel(W_Q, W_K, d_head, layer=0, head=0):
    """Per-head kernel M = W_Q^T W_K / sqrt(d_head) from d_model x d_head slices."""
    W_Q = np.asarray(W_Q, dtype=np.float64)
    W_K = np.asarray(W_K, dtype=np.float64)
    if W_Q.ndim != 2 or W_Q.shape != W_K.shape or W_Q.shape[1] != d_head:
        raise SpectralError(f"weight_kernel expects two d_model x {d_head} projections, got {W_Q.shape} and {W_K.shape}")
    return WeightKernel(M=W_Q.T @ W_K / math.sqrt(d_head), layer=layer, head=head)


def spectral_report(A):
    """Full report for one score matrix or weight kernel."""
    d = decompose(A)
    sr = singular_values(d.R)
    sf = singular_values(d.F)
    return SpectralReport(
        singular_values_R=sr,
        singular_values_F=sf,
        effrank_R=effective_rank(sv=sr),
        effrank_F=effective_rank(sv=sf),
        rho=rho(d),
        max_re_lambda=max_real_eigenvalue(A),
    )


def routing_effrank(M):
    """Effective rank of the skew part; the cascade's per-head quantity."""
    return effective_rank(decompose(M).R)
