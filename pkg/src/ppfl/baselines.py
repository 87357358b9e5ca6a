"""Reference methods: purely local training, FedAvg and loss-based clustered FL."""

from __future__ import annotations

import numpy as np

from . import fedsim
from .core import RngStream, RunConfig, rng_derive, shard_weights
from .graph import empty
from .metrics import RunTrajectory
from .model import value_and_grads
from .optim.drivers import check_shards, drive, init_theta
from .optim.updates import (ClientPool, StepSizes, estimate_smoothness, rbcd_step_bound,
                            theta_aggregate, theta_local_steps)
from .optim import drivers


def _config(config) -> RunConfig:
    return RunConfig.from_dict(config) if isinstance(config, dict) else config


def _metric_of(shards, values_fn, split):
    """Weighted client average of ``values_fn(i, data)`` over non-empty splits."""
    p = shard_weights(shards)
    vals, ws = [], []
    for i, s in enumerate(shards):
        data = s.test if split == "test" else s.train
        if data.n == 0:
            continue
        vals.append(values_fn(i, data))
        ws.append(p[i])
    if not vals:
        return float("nan")
    ws = np.array(ws)
    return float(np.sum(ws * np.array(vals)) / ws.sum())


def run_fedavg(shards, config) -> RunTrajectory:
    """One global GLM trained with E local steps and weighted delta averaging.

    Runs the RBCD driver with a single canonical model that is always the
    updated block and no graph coupling.
    """
    config = _config(config).with_(K=1, rho=(1.0, 0.0), lam=0.0, algorithm="fedavg")
    return drivers.rbcd_run(config, shards, empty(len(shards)))


def run_local(shards, config) -> RunTrajectory:
    """Every client fits its own single GLM; nothing is communicated."""
    config = _config(config).with_(algorithm="local", K=1)
    check_shards(shards)
    M = len(shards)
    arch = config.architecture
    root = RngStream(config.seed)
    one = np.ones(1)
    start = init_theta(config, shards, K=M)
    thetas = [start[:, [i]] for i in range(M)]
    p = shard_weights(shards)

    def measure(st, t):
        F = 0.0
        grad = 0.0
        for i, s in enumerate(shards):
            loss, gt, _ = value_and_grads(st[i], one, s.train, arch, want_c=False)
            F += s.weight * loss
            grad += p[i] * float(np.sum(gt * gt))
        return {
            "F": F, "grad_theta_norm_sq": grad, "prox_c_norm1_sq": 0.0, "composite": grad + 0.0,
            "train_metric": _metric_of(shards, lambda i, d: fedsim.client_metric(st[i], one, d, arch), "train"),
            "test_metric": _metric_of(shards, lambda i, d: fedsim.client_metric(st[i], one, d, arch), "test"),
        }

    def advance(st, t):
        eta1 = StepSizes(config.step_size(t), config.E).eta1_t
        new = []
        for i, s in enumerate(shards):
            delta = theta_local_steps(st[i], one, s.train, config.E, eta1, arch,
                                      rng_derive(root, t, i, "theta"), config.batch_size)
            new.append(theta_aggregate(st[i], [(1.0, delta)]))
        return new, 1, (0, 0, 0)

    return drive(config, shards, "local", thetas, measure, advance, lambda st: None, None,
                 theta_of=lambda st: np.hstack(st))


def cluster_assign(theta, shards, arch: str) -> np.ndarray:
    """Index of the cluster model with the lowest training loss (ties: lowest index)."""
    K = theta.shape[1]
    one = np.ones(1)
    out = np.empty(len(shards), dtype=np.int64)
    for i, s in enumerate(shards):
        losses = [value_and_grads(theta[:, [k]], one, s.train, arch, want_theta=False, want_c=False)[0]
                  for k in range(K)]
        out[i] = int(np.argmin(losses))
    return out


def run_clustered_fl(shards, config, K: int | None = None) -> RunTrajectory:
    """K cluster models; clients join the cluster whose model fits them best
    each round and FedAvg runs within every cluster.

    A cluster nobody joins keeps its model unchanged.
    """
    config = _config(config)
    K = config.K if K is None else int(K)
    if K < 1:
        raise ValueError("K must be >= 1")
    config = config.with_(K=K, algorithm="clustered", lam=0.0, rho=(1.0, 0.0))
    check_shards(shards)
    M = len(shards)
    arch = config.architecture
    root = RngStream(config.seed)
    one = np.ones(1)
    p = shard_weights(shards)
    theta0 = init_theta(config, shards, K=K)
    L = estimate_smoothness(shards, config)
    weights = None
    if config.enforce_step_bound:
        weights = drivers.validate_rbcd_steps(config, L)
    smooth = {"L1": L.L1, "L2": L.L2, "source": L.source, "step_bound": rbcd_step_bound(config.E, L)}

    def onehot(assign):
        C = np.zeros((M, K))
        C[np.arange(M), assign] = 1.0
        return C

    def measure(theta, t):
        assign = cluster_assign(theta, shards, arch)
        F = 0.0
        grad = np.zeros_like(theta)
        for i, s in enumerate(shards):
            k = assign[i]
            loss, gt, _ = value_and_grads(theta[:, [k]], one, s.train, arch, want_c=False)
            F += s.weight * loss
            grad[:, [k]] += p[i] * gt
        g2 = float(np.sum(grad * grad))
        metric = lambda i, d: fedsim.client_metric(theta[:, [assign[i]]], one, d, arch)
        return {"F": F, "grad_theta_norm_sq": g2, "prox_c_norm1_sq": 0.0, "composite": g2 + 0.0,
                "train_metric": _metric_of(shards, metric, "train"),
                "test_metric": _metric_of(shards, metric, "test")}

    with ClientPool(config.threads) as pool:
        def advance(theta, t):
            assign = cluster_assign(theta, shards, arch)
            eta1 = StepSizes(config.step_size(t), config.E).eta1_t

            def local(i):
                return theta_local_steps(theta[:, [assign[i]]], one, shards[i].train, config.E, eta1,
                                         arch, rng_derive(root, t, i, "theta"), config.batch_size)

            deltas = pool.map(local, range(M))
            new = theta.copy()
            for k in range(K):
                members = np.flatnonzero(assign == k)
                if members.size == 0:
                    continue
                w = fedsim.normalized_weights(p[members])
                new[:, [k]] = theta_aggregate(theta[:, [k]], zip(w, (deltas[i] for i in members)))
            return new, 1, fedsim.clustered_round_floats(theta.shape[0], K, M)

        traj = drive(config, shards, "clustered", theta0, measure, advance,
                     lambda th: onehot(cluster_assign(th, shards, arch)), weights, smooth,
                     theta_of=lambda th: th)
    traj.extras["assignment"] = cluster_assign(traj.final_theta, shards, arch).tolist()
    return traj
