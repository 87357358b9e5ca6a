"""Client affinity graphs and the Laplacian coupling of membership vectors."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class AffinityGraph:
    """Symmetric nonnegative affinity ``W`` with degrees ``d_ii = sum_j w_ij``.

    ``psd`` is ``True`` when the construction guarantees a positive
    semi-definite ``W`` (cosine Gram, all-ones), ``False`` when a check found a
    negative eigenvalue and ``None`` when unknown.
    """

    W: np.ndarray
    degrees: np.ndarray
    psd: bool | None = None
    source: str = "user"

    @property
    def M(self) -> int:
        return self.W.shape[0]


def _build(W, psd, source) -> AffinityGraph:
    W = np.array(W, dtype=np.float64)
    if W.ndim != 2 or W.shape[0] != W.shape[1]:
        raise ValueError("affinity matrix must be square")
    if not np.all(np.isfinite(W)):
        raise ValueError("affinity matrix has non-finite entries")
    if np.any(W < 0):
        raise ValueError("affinity entries must be nonnegative")
    if not np.array_equal(W, W.T):
        raise ValueError("affinity matrix must be symmetric")
    W.setflags(write=False)
    degrees = W.sum(axis=1)
    degrees.setflags(write=False)
    return AffinityGraph(W, degrees, psd, source)


def all_ones(M: int) -> AffinityGraph:
    """Every pair (diagonal included) has unit affinity."""
    return _build(np.ones((M, M)), True, "all_ones")


def empty(M: int) -> AffinityGraph:
    return _build(np.zeros((M, M)), True, "empty")


def affinity_from_label_histograms(shards, zero_diagonal: bool = False) -> AffinityGraph:
    """Cosine similarity of the clients' training label-frequency vectors.

    The diagonal (self-similarity 1) is kept by default: it cancels in the
    Laplacian ``D - W`` but keeps ``W`` a Gram matrix, which the majorizing
    surrogate of the membership update needs.
    """
    if len(shards) < 2:
        raise ValueError("need at least two clients")
    if shards[0].task == "regression":
        raise ValueError("label histograms need a classification task")
    H = np.stack([s.train.label_histogram() for s in shards])
    norms = np.linalg.norm(H, axis=1)
    if np.any(norms == 0):
        bad = int(np.flatnonzero(norms == 0)[0])
        raise ValueError(f"client {bad} has an empty label histogram")
    U = H / norms[:, None]
    W = U @ U.T
    W = np.clip(0.5 * (W + W.T), 0.0, None)
    if zero_diagonal:
        np.fill_diagonal(W, 0.0)
        return _build(W, None, "cosine_zero_diag")
    np.fill_diagonal(W, 1.0)
    return _build(W, True, "cosine")


def from_matrix(W, check_psd: bool = True) -> AffinityGraph:
    """User-supplied affinity; warns when it is not PSD."""
    g = _build(W, None, "user")
    if not check_psd:
        return g
    lam_min = min_eigenvalue(g.W)
    scale = max(1.0, float(np.abs(g.W).max()))
    psd = lam_min >= -1e-9 * scale
    if not psd:
        warnings.warn(
            f"affinity matrix is not PSD (min eigenvalue ~ {lam_min:.3g}); "
            "the membership surrogate may not majorize the objective",
            RuntimeWarning, stacklevel=2)
    return AffinityGraph(g.W, g.degrees, psd, "user")


def load_affinity_csv(path) -> AffinityGraph:
    W = np.loadtxt(path, delimiter=",", dtype=np.float64, ndmin=2)
    return from_matrix(W)


def default_affinity(shards) -> AffinityGraph:
    """Cosine label affinity for classification, all-ones for regression."""
    if shards[0].task == "regression" or len(shards) < 2:
        return all_ones(len(shards))
    return affinity_from_label_histograms(shards)


def _power(A, iters=1000, tol=1e-12):
    v = np.ones(A.shape[0]) + np.linspace(0.0, 1e-3, A.shape[0])
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(iters):
        w = A @ v
        nrm = np.linalg.norm(w)
        if nrm == 0.0:
            return 0.0
        v_next = w / nrm
        lam_next = float(v_next @ (A @ v_next))
        if abs(lam_next - lam) <= tol * max(1.0, abs(lam_next)):
            return lam_next
        v, lam = v_next, lam_next
    return lam


def min_eigenvalue(W) -> float:
    """Smallest eigenvalue of a symmetric matrix by shifted power iteration."""
    W = np.asarray(W, dtype=np.float64)
    r = float(np.abs(W).sum(axis=1).max())  # Gershgorin bound on the spectral radius
    if r == 0.0:
        return 0.0
    return r - _power(r * np.eye(W.shape[0]) - W)


def _as_blocks(g: AffinityGraph, C) -> np.ndarray:
    C = np.asarray(C, dtype=np.float64)
    if C.ndim == 1:
        if C.size % g.M:
            raise ValueError("stacked membership vector length is not a multiple of M")
        C = C.reshape(g.M, -1)
    if C.shape[0] != g.M:
        raise ValueError(f"membership matrix has {C.shape[0]} blocks, graph has {g.M} clients")
    return C


def laplacian_apply(g: AffinityGraph, C) -> np.ndarray:
    """Blocks ``(LC)_i = d_ii c_i - sum_j w_ij c_j`` as an ``M x K`` array."""
    C = _as_blocks(g, C)
    return g.degrees[:, None] * C - g.W @ C


def laplacian_pairwise(g: AffinityGraph, C) -> float:
    """``1/2 sum_ij w_ij ||c_i - c_j||^2`` by direct summation."""
    C = _as_blocks(g, C)
    total = 0.0
    for i in range(g.M):
        diff = C[i][None, :] - C
        total += float(g.W[i] @ np.einsum("jk,jk->j", diff, diff))
    return 0.5 * total


def laplacian_quadratic(g: AffinityGraph, C, check: bool = False) -> float:
    """``C' L C``; with ``check`` the pairwise form is evaluated and compared."""
    C = _as_blocks(g, C)
    q = float(np.sum(C * laplacian_apply(g, C)))
    if check:
        p = laplacian_pairwise(g, C)
        if abs(p - q) > 1e-10 * (1.0 + abs(q)):
            raise ArithmeticError(f"Laplacian forms disagree: {q!r} vs {p!r}")
    return q
