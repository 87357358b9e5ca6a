"""Bulk-synchronous federation simulator.

Messages are not sent anywhere; each round records how many floats a real
deployment would move (server broadcast, client upload, end-of-round sync,
all counted over every client).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .core import ClientShard, RngStream, make_shards, rng_derive, shard_weights
from .graph import AffinityGraph, laplacian_apply
from .model import CanonicalEnsemble, link_for, predict_labels, value_and_grads
from .optim.updates import (ClientPool, StepSizes, c_update, exp_grad_step, sample_batch,
                            theta_aggregate, theta_local_steps)

__all__ = ["ClientShard", "make_shards", "CommLedger", "round_protocol_rbcd",
           "round_protocol_alternating", "evaluate"]


# ---------------------------------------------------------------------------
# Communication accounting


def rbcd_theta_round_floats(p: int, K: int, M: int):
    """(broadcast, upload, sync) of an RBCD round updating the canonical models."""
    return p * K * M, p * K * M, p * K * M


def rbcd_c_round_floats(K: int, M: int):
    """(broadcast, upload, sync) of an RBCD round updating the memberships."""
    return K * M, K * M, K * M


def alternating_round_floats(p: int, K: int, M: int):
    return (p * K + K) * M, (p * K + K) * M, 0


def clustered_round_floats(p: int, K: int, M: int):
    """All K cluster models go to every client; each uploads one model delta."""
    return K * p * M, p * M, 0


def replicated_ensemble_ratio(p: int, K: int) -> float:
    """Per-client per-round broadcast of PPFL over a K-replica ensemble.

    PPFL ships the stacked canonical models (``p*K``) plus one Laplacian slice
    (``K``); an ensemble that replicates the whole ``p*K`` model for each of
    its K components ships ``K*p*K``.
    """
    return (p * K + K) / (K * p * K)


@dataclass
class CommLedger:
    model_dim: int
    K: int
    M: int
    canonical_dim: int | None = None
    broadcast: list = field(default_factory=list)
    upload: list = field(default_factory=list)
    sync: list = field(default_factory=list)

    def record(self, broadcast: int, upload: int, sync: int):
        self.broadcast.append(int(broadcast))
        self.upload.append(int(upload))
        self.sync.append(int(sync))

    @property
    def rounds(self) -> int:
        return len(self.broadcast)

    def totals(self) -> dict:
        b, u, s = sum(self.broadcast), sum(self.upload), sum(self.sync)
        return {"broadcast": b, "upload": u, "sync": s, "total": b + u + s}


def normalized_weights(p) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    return p / p.sum()


# ---------------------------------------------------------------------------
# Round protocols


def theta_round(theta, C, shards, config, t: int, root: RngStream, pool: ClientPool):
    """Local steps on every client followed by weighted delta aggregation."""
    steps = StepSizes(config.step_size(t), config.E, config.c_step_scale)
    arch = config.architecture

    def local(i):
        return theta_local_steps(theta, C[i], shards[i].train, config.E, steps.eta1_t, arch,
                                 rng_derive(root, t, i, "theta"), config.batch_size)

    deltas = pool.map(local, range(len(shards)))
    w = normalized_weights(shard_weights(shards))
    return theta_aggregate(theta, zip(w, deltas))


def c_round(theta, C, shards, graph, config, t: int, root: RngStream, pool: ClientPool):
    steps = StepSizes(config.step_size(t), config.E, config.c_step_scale)
    batches = None
    if not config.full_batch:
        batches = [sample_batch(s.train, config.batch_size, rng_derive(root, t, i, "c_batch").generator())
                   for i, s in enumerate(shards)]
    return c_update(C, theta, shards, graph, config.lam, steps.eta2_t, config.architecture,
                    batches, config.epsilon_floor, pool)


def round_protocol_rbcd(theta, C, h: int, shards, graph: AffinityGraph, config, t: int,
                        root: RngStream, pool: ClientPool | None = None):
    """One RBCD round on block ``h`` (1: canonical models, 2: memberships).

    Returns ``(theta, C, (broadcast, upload, sync))``.
    """
    pool = pool or ClientPool(1)
    M, K = C.shape
    if h == 1:
        return theta_round(theta, C, shards, config, t, root, pool), C, \
            rbcd_theta_round_floats(theta.shape[0], K, M)
    if h == 2:
        return theta, c_round(theta, C, shards, graph, config, t, root, pool), rbcd_c_round_floats(K, M)
    raise ValueError(f"unknown block {h}")


def round_protocol_alternating(theta, C, shards, graph: AffinityGraph, config, t: int,
                               root: RngStream, pool: ClientPool | None = None):
    """Membership step (full gradient) then local theta steps on every client."""
    pool = pool or ClientPool(1)
    M, K = C.shape
    steps = StepSizes(config.step_size(t), config.E, config.c_step_scale)
    arch = config.architecture
    p = shard_weights(shards)
    # what the server broadcasts alongside theta: lam * (LC)_i
    slices = config.lam * laplacian_apply(graph, C)

    def client(i):
        gc = value_and_grads(theta, C[i], shards[i].train, arch, want_theta=False, want_c=True)[2]
        c_new = exp_grad_step(C[i], p[i] * gc + 2.0 * slices[i], steps.eta2_t, config.epsilon_floor)
        delta = theta_local_steps(theta, c_new, shards[i].train, config.E, steps.eta1_t, arch,
                                  rng_derive(root, t, i, "theta"), config.batch_size)
        return c_new, delta

    out = pool.map(client, range(M))
    C_new = np.stack([c for c, _ in out])
    w = normalized_weights(p)
    theta_new = theta_aggregate(theta, zip(w, (d for _, d in out)))
    return theta_new, C_new, alternating_round_floats(theta.shape[0], K, M)


# ---------------------------------------------------------------------------
# Evaluation


def client_metric(theta, c, data, arch: str) -> float:
    ens = CanonicalEnsemble(theta, link_for(data.task), data.n_classes)
    pred = predict_labels(ens, c, data.X, arch)
    if data.task == "regression":
        return float(np.mean((pred - data.y) ** 2))
    return float(np.mean(pred == data.y))


def evaluate(theta, C, shards, arch: str = "prediction", split: str = "test") -> dict:
    """Accuracy (classification) or MSE (regression) per client and averaged.

    Clients with an empty split are skipped with a warning; the weighted
    average renormalizes ``p_i`` over the remaining clients.
    """
    per_client = np.full(len(shards), np.nan)
    for i, s in enumerate(shards):
        data = s.test if split == "test" else s.train
        if data.n == 0:
            warnings.warn(f"client {i} has an empty {split} split; excluded", RuntimeWarning, stacklevel=2)
            continue
        per_client[i] = client_metric(theta, C[i], data, arch)
    ok = ~np.isnan(per_client)
    if not ok.any():
        raise ValueError(f"every client has an empty {split} split")
    p = shard_weights(shards)[ok]
    return {
        "metric": "mse" if shards[0].task == "regression" else "accuracy",
        "per_client": per_client,
        "weighted": float(np.sum(p * per_client[ok]) / p.sum()),
        "mean": float(per_client[ok].mean()),
    }
