"""Mirror-descent block updates, MM surrogate and stationarity criterion."""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from ..core import LabeledDataset, RngStream, shard_weights
from ..graph import AffinityGraph, laplacian_apply, laplacian_quadratic
from ..model import value_and_grads

EPS_FLOOR = 1e-6


class StepSizeError(ValueError):
    """Step size outside the range covered by the convergence guarantee."""

    def __init__(self, message: str, bound: float):
        super().__init__(message)
        self.bound = bound


@dataclass(frozen=True)
class StepSizes:
    eta_t: float
    E: int = 1
    c_scale: float = 1.0

    def __post_init__(self):
        if not self.eta_t > 0:
            raise ValueError("eta_t must be positive")

    @property
    def eta1_t(self) -> float:
        return self.eta_t / self.E

    @property
    def eta2_t(self) -> float:
        return self.eta_t * self.c_scale

    @property
    def gamma1_t(self) -> float:
        return 4.0 * self.eta_t

    @property
    def gamma2_t(self) -> float:
        return self.eta2_t / 2.0


@dataclass(frozen=True)
class SmoothnessEstimates:
    L1: float
    L2: float
    source: str = "power_iteration"

    def __post_init__(self):
        if not (self.L1 > 0 and self.L2 > 0):
            raise ValueError("smoothness constants must be positive")


@dataclass(frozen=True)
class CriterionRecord:
    grad_theta_norm_sq: float
    prox_c_norm1_sq: float

    @property
    def composite(self) -> float:
        return self.grad_theta_norm_sq + self.prox_c_norm1_sq


class ClientPool:
    """Maps a per-client function; results always come back in client order."""

    def __init__(self, threads: int = 1):
        self.threads = int(threads)
        self._ex = ThreadPoolExecutor(self.threads) if self.threads > 1 else None

    def map(self, fn, items):
        if self._ex is None:
            return [fn(x) for x in items]
        return list(self._ex.map(fn, items))

    def close(self):
        if self._ex is not None:
            self._ex.shutdown()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


_SERIAL = ClientPool(1)


# ---------------------------------------------------------------------------
# Simplex mirror step


def floor_simplex(c: np.ndarray, floor: float = EPS_FLOOR) -> np.ndarray:
    """Raise entries below ``floor`` to it and rescale the rest to keep sum 1."""
    c = np.asarray(c, dtype=np.float64)
    K = c.shape[0]
    if floor * K >= 1.0:
        raise ValueError("floor too large for the simplex dimension")
    low = c < floor
    if not low.any():
        return c / c.sum()
    out = c.copy()
    while True:
        free = ~low
        out[low] = floor
        target = 1.0 - floor * low.sum()
        out[free] = c[free] * (target / c[free].sum())
        newly = free & (out < floor)
        if not newly.any():
            return out
        low |= newly


def exp_grad_step(c, g, eta: float, floor: float = EPS_FLOOR) -> np.ndarray:
    """Entropic mirror step ``c * exp(-eta g) / <c, exp(-eta g)>`` plus floor."""
    if not eta > 0:
        raise ValueError("eta must be positive")
    g = np.asarray(g, dtype=np.float64)
    if not np.all(np.isfinite(g)):
        raise ValueError("non-finite gradient")
    a = -eta * g
    w = np.asarray(c, dtype=np.float64) * np.exp(a - a.max())
    return floor_simplex(w / w.sum(), floor)


# ---------------------------------------------------------------------------
# Objective and surrogate


def data_term(theta, C, shards, arch, pool: ClientPool = _SERIAL) -> float:
    losses = pool.map(lambda i: value_and_grads(theta, C[i], shards[i].train, arch,
                                                want_theta=False, want_c=False)[0],
                      range(len(shards)))
    return float(sum(s.weight * l for s, l in zip(shards, losses)))


def objective(theta, C, shards, graph: AffinityGraph, lam: float, arch: str,
              pool: ClientPool = _SERIAL) -> float:
    """``F = sum_i p_i f_i(theta, c_i) + lam * C'LC`` on training data."""
    return data_term(theta, C, shards, arch, pool) + lam * laplacian_quadratic(graph, C)


def surrogate_value(C, C_anchor, theta, shards, graph: AffinityGraph, lam: float,
                    arch: str = "prediction") -> float:
    """Linearized-coupling majorizer of the objective in ``C`` at ``C_anchor``."""
    C = np.asarray(C, dtype=np.float64)
    A = np.asarray(C_anchor, dtype=np.float64)
    WA = graph.W @ A
    coupling = (float(np.sum(graph.degrees[:, None] * C * C))
                - float(np.sum(A * WA))
                - 2.0 * float(np.sum(WA * (C - A))))
    return data_term(theta, C, shards, arch) + lam * coupling


# ---------------------------------------------------------------------------
# Membership (C) block


def membership_gradients(theta, C, datasets, weights, graph, lam, arch,
                         pool: ClientPool = _SERIAL) -> np.ndarray:
    """Rows ``p_i grad_c f_i(c_i) + 2 lam (LC)_i`` with ``LC`` frozen at ``C``."""
    LC = laplacian_apply(graph, C)
    grads = pool.map(lambda i: value_and_grads(theta, C[i], datasets[i], arch,
                                               want_theta=False, want_c=True)[2],
                     range(len(datasets)))
    return np.stack([weights[i] * grads[i] + 2.0 * lam * LC[i] for i in range(len(datasets))])


def c_update(C, theta, shards, graph: AffinityGraph, lam: float, eta2: float,
             arch: str = "prediction", batches=None, floor: float = EPS_FLOOR,
             pool: ClientPool = _SERIAL) -> np.ndarray:
    """Simultaneous mirror step on every membership vector.

    ``batches`` optionally replaces each client's training set by a sampled
    batch; the Laplacian slices always use the pre-update ``C``.
    """
    C = np.asarray(C, dtype=np.float64)
    datasets = batches if batches is not None else [s.train for s in shards]
    G = membership_gradients(theta, C, datasets, shard_weights(shards), graph, lam, arch, pool)
    return np.stack([exp_grad_step(C[i], G[i], eta2, floor) for i in range(C.shape[0])])


# ---------------------------------------------------------------------------
# Canonical-model (theta) block


def sample_batch(data: LabeledDataset, batch_size, gen: np.random.Generator | None) -> LabeledDataset:
    if batch_size == "full" or batch_size >= data.n:
        return data
    return data.subset(gen.choice(data.n, size=int(batch_size), replace=False))


def theta_local_steps(theta, c_i, data: LabeledDataset, E: int, eta1: float,
                      arch: str = "prediction", rng: RngStream | None = None,
                      batch_size="full") -> np.ndarray:
    """Run ``E`` local (S)GD steps from ``theta``; return ``theta_E - theta``."""
    if E < 1:
        raise ValueError("E must be >= 1")
    gen = rng.generator() if (rng is not None and batch_size != "full") else None
    if gen is None and batch_size != "full" and batch_size < data.n:
        raise ValueError("stochastic batches need an RNG stream")
    local = np.array(theta, dtype=np.float64)
    acc = np.zeros_like(local)
    for _ in range(E):
        batch = sample_batch(data, batch_size, gen)
        g = value_and_grads(local, c_i, batch, arch, want_theta=True, want_c=False)[1]
        step = eta1 * g
        local = local - step
        acc = acc - step
    return acc


def theta_aggregate(theta, deltas) -> np.ndarray:
    """``theta + sum_i w_i delta_i`` summed in the given (client) order."""
    deltas = list(deltas)
    total_w = sum(w for w, _ in deltas)
    if abs(total_w - 1.0) > 1e-9:
        raise ValueError(f"aggregation weights sum to {total_w!r}, expected 1")
    update = np.zeros_like(np.asarray(theta, dtype=np.float64))
    for w, delta in deltas:
        update += w * delta
    return theta + update


# ---------------------------------------------------------------------------
# Stationarity criterion


def criterion(theta, C, shards, graph: AffinityGraph, lam: float, eta: float,
              arch: str = "prediction", floor: float = EPS_FLOOR,
              pool: ClientPool = _SERIAL) -> CriterionRecord:
    """Squared theta-gradient norm plus squared l1 prox-mapping distance.

    Always evaluated with full local gradients.
    """
    C = np.asarray(C, dtype=np.float64)
    p = shard_weights(shards)
    LC = laplacian_apply(graph, C)

    def one(i):
        _, gt, gc = value_and_grads(theta, C[i], shards[i].train, arch)
        c_plus = exp_grad_step(C[i], p[i] * gc + 2.0 * lam * LC[i], eta, floor)
        return gt, float(np.abs(C[i] - c_plus).sum())

    parts = pool.map(one, range(len(shards)))
    grad = np.zeros_like(np.asarray(theta, dtype=np.float64))
    dist = 0.0
    for i, (gt, dc) in enumerate(parts):
        grad += p[i] * gt
        dist += dc
    return CriterionRecord(float(np.sum(grad * grad)), (dist / eta) ** 2)


# ---------------------------------------------------------------------------
# Smoothness constants and step-size rules

CURVATURE = {"identity": 1.0, "logit": 0.25, "softmax": 0.5}


def top_eigenvalue(A, iters: int = 2000, tol: float = 1e-13) -> float:
    """Largest eigenvalue of a symmetric PSD matrix by power iteration."""
    A = np.asarray(A, dtype=np.float64)
    v = np.ones(A.shape[0]) + np.linspace(0.0, 1e-2, A.shape[0])
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(iters):
        w = A @ v
        nrm = np.linalg.norm(w)
        if nrm == 0.0:
            return 0.0
        v = w / nrm
        lam_next = float(v @ (A @ v))
        if abs(lam_next - lam) <= tol * max(1.0, lam_next):
            return lam_next
        lam = lam_next
    return lam


def _membership_curvature(theta, data: LabeledDataset, arch: str) -> float:
    """Bound on the l1->linf norm of the Hessian of f_i in c over the simplex."""
    if arch == "loss":
        return 0.0
    X, n = data.X, data.n
    if data.task == "regression":
        Z = X @ theta
        return float(np.max(np.mean(Z * Z, axis=0)))
    if data.task == "binary":
        Z = X @ theta
        if arch == "parameter":
            return 0.25 * float(np.max(np.mean(Z * Z, axis=0)))
        S = 0.5 * (1.0 + np.tanh(0.5 * np.clip(Z, -30, 30)))
        y = data.y.astype(np.float64)
        w = y / S.min(axis=1) ** 2 + (1.0 - y) / (1.0 - S.max(axis=1)) ** 2
        return float(np.max(np.mean(w[:, None] * S * S, axis=0)))
    K, C = theta.shape[1], data.n_classes
    blocks = theta.T.reshape(K, X.shape[1], C)
    Z = np.einsum("nd,kdc->knc", X, blocks)
    if arch == "parameter":
        return 0.5 * float(np.max(np.mean(np.sum(Z * Z, axis=2), axis=1)))
    Zc = np.clip(Z, -30, 30)
    P = np.exp(Zc - Zc.max(axis=2, keepdims=True))
    P /= P.sum(axis=2, keepdims=True)
    q = P[:, np.arange(n), data.y]
    return float(np.max(np.mean(q * q / q.min(axis=0) ** 2, axis=1)))


def estimate_smoothness(shards, config, theta=None, graph: AffinityGraph | None = None) -> SmoothnessEstimates:
    """Conservative L1 (theta) and L2 (membership) smoothness constants.

    L1 is the link curvature bound times the largest eigenvalue of
    ``X_i'X_i / n_i`` over clients. L2 bounds the membership Hessian at the
    given ``theta`` (zeros when omitted) plus the Laplacian degree term.
    """
    task = shards[0].task
    link = {"regression": "identity", "binary": "logit", "multiclass": "softmax"}[task]
    eig = max(top_eigenvalue(s.train.X.T @ s.train.X / s.train.n) for s in shards)
    L1 = CURVATURE[link] * eig
    M = len(shards)
    if theta is None:
        Lc = np.zeros(M)
    else:
        theta = np.asarray(theta, dtype=np.float64)
        Lc = np.array([_membership_curvature(theta, s.train, config.architecture) for s in shards])
    degrees = graph.degrees if graph is not None else np.zeros(M)
    L2 = float(np.max(shard_weights(shards) * Lc + 2.0 * config.lam * degrees))
    L1 = config.L1 if config.L1 is not None else max(L1, 1e-12)
    L2 = config.L2 if config.L2 is not None else max(L2, 1e-12)
    source = "user" if (config.L1 is not None and config.L2 is not None) else "power_iteration"
    return SmoothnessEstimates(float(L1), float(L2), source)


def rbcd_step_bound(E: int, L: SmoothnessEstimates) -> float:
    """Largest constant step covered by the RBCD guarantee."""
    return min(1.0 / (32.0 * E * L.L1), 2.0 / L.L2)


def alternating_step_bound(L: SmoothnessEstimates, T: int = 1, sigma1_sq=None,
                           delta_sq=None, delta_F=None) -> float:
    """Step rule of the alternating variant; noise terms enter only when supplied."""
    bound = min(1.0 / (16.0 * L.L1), 1.0 / L.L2)
    if delta_F is not None and T > 0:
        if sigma1_sq:
            bound = min(bound, math.sqrt(4.0 * delta_F / (4.0 * L.L1 * sigma1_sq * T)))
        if delta_sq:
            bound = min(bound, (4.0 * delta_F / (128.0 * L.L1 ** 2 * delta_sq * T)) ** (1.0 / 3.0))
    return bound


def output_weights(config, L: SmoothnessEstimates) -> np.ndarray:
    """Unnormalized output-index weights ``eta_t min_h rho_h (1 - gamma_h L_h)``.

    Blocks with zero selection probability are left out of the minimum.
    """
    rho1, rho2 = config.rho
    w = np.empty(config.T)
    for t in range(config.T):
        s = StepSizes(config.step_size(t), config.E, config.c_step_scale)
        terms = []
        if rho1 > 0:
            terms.append(rho1 * (1.0 - s.gamma1_t * L.L1))
        if rho2 > 0:
            terms.append(rho2 * (1.0 - s.gamma2_t * L.L2))
        w[t] = s.eta_t * min(terms)
    return w


def sample_output_index(weights, rng: RngStream, size: int | None = None):
    """Draw a round index with probability proportional to ``weights``.

    Returns an int, or an array of ``size`` independent draws.
    """
    weights = np.asarray(weights, dtype=np.float64)
    total = weights.sum()
    if np.any(weights < 0) or not total > 0:
        raise ValueError("output weights must be nonnegative with positive sum")
    draws = rng.generator().choice(weights.shape[0], size=size, p=weights / total)
    return int(draws) if size is None else draws
