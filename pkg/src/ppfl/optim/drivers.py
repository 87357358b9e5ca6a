"""Training loops: randomized block coordinate descent and the alternating variant."""

from __future__ import annotations

import time

import numpy as np

from .. import fedsim
from ..core import RngStream, RunConfig, rng_derive
from ..graph import AffinityGraph, default_affinity
from ..metrics import RunTrajectory
from ..model import param_rows
from .updates import (ClientPool, StepSizeError, StepSizes, alternating_step_bound, criterion,
                      estimate_smoothness, objective, output_weights, rbcd_step_bound,
                      sample_output_index)

# relative slack when comparing a step size against its bound
_BOUND_SLACK = 1e-12


def check_shards(shards):
    if not shards:
        raise ValueError("no clients")
    task, d, nc = shards[0].task, shards[0].train.d, shards[0].n_classes
    for s in shards:
        if s.task != task or s.train.d != d or s.n_classes != nc:
            raise ValueError(f"client {s.id} disagrees on task, feature dimension or class count")
        if s.train.n == 0:
            raise ValueError(f"client {s.id}: empty shard")
    w = np.array([s.weight for s in shards])
    if np.any(w <= 0) or abs(w.sum() - 1.0) > 1e-9:
        raise ValueError("client weights must be positive and sum to 1")


def init_theta(config: RunConfig, shards, K: int | None = None) -> np.ndarray:
    """Uniform entries in ``[-init_scale, init_scale]`` from the server init stream."""
    s = shards[0]
    rows = param_rows(s.train.d, s.task, s.n_classes)
    K = config.K if K is None else K
    gen = rng_derive(RngStream(config.seed), 0, -1, "init").generator()
    return gen.uniform(-config.init_scale, config.init_scale, size=(rows, K))


def init_state(config: RunConfig, shards, init=None):
    """``(theta, C)`` from ``init`` (a pair or a dict) or the default initialization."""
    M, K = len(shards), config.K
    theta, C = None, None
    if isinstance(init, dict):
        theta, C = init.get("theta"), init.get("C")
    elif init is not None:
        theta, C = init
    theta = init_theta(config, shards) if theta is None else np.array(theta, dtype=np.float64)
    C = np.full((M, K), 1.0 / K) if C is None else np.array(C, dtype=np.float64)
    rows = param_rows(shards[0].train.d, shards[0].task, shards[0].n_classes)
    if theta.shape != (rows, K):
        raise ValueError(f"initial theta has shape {theta.shape}, expected {(rows, K)}")
    if C.shape != (M, K):
        raise ValueError(f"initial C has shape {C.shape}, expected {(M, K)}")
    if np.any(C < 0) or np.max(np.abs(C.sum(axis=1) - 1.0)) > 1e-9:
        raise ValueError("initial membership rows must lie in the simplex")
    return theta, C


def snapshot_rounds(config: RunConfig) -> set:
    if config.snapshot_rounds is not None:
        return {t for t in config.snapshot_rounds if 0 <= t <= config.T}
    return {0, config.T // 2, config.T}


def _violation(bound: float, L) -> StepSizeError:
    return StepSizeError(
        f"step size violates the RBCD convergence bound: eta must be <= {bound:.6g} "
        f"(L1={L.L1:.6g}, L2={L.L2:.6g})", bound)


def validate_rbcd_steps(config: RunConfig, L) -> np.ndarray:
    """Check the RBCD step rule and return the output-index weights."""
    rho1, rho2 = config.rho
    eta = config.step_size(0)
    bound = rbcd_step_bound(config.E, L)
    if rho1 > 0 and eta > (1.0 + _BOUND_SLACK) / (32.0 * config.E * L.L1):
        raise _violation(bound, L)
    if rho2 > 0 and eta * config.c_step_scale > (1.0 + _BOUND_SLACK) * 2.0 / L.L2:
        raise _violation(bound, L)
    w = output_weights(config, L)
    if config.T > 0 and (np.any(w < 0) or not w.sum() > 0):
        raise _violation(bound, L)
    return w


def validate_alternating_steps(config: RunConfig, L) -> np.ndarray:
    bound = alternating_step_bound(L, config.T, config.sigma1_sq, config.delta_sq, config.delta_F)
    eta = config.step_size(0)
    if eta > (1.0 + _BOUND_SLACK) * bound or eta * config.c_step_scale > (1.0 + _BOUND_SLACK) / L.L2:
        raise StepSizeError(
            f"step size violates the alternating convergence bound: eta must be <= {bound:.6g} "
            f"(L1={L.L1:.6g}, L2={L.L2:.6g})", bound)
    return np.array([config.step_size(t) for t in range(config.T)])


# ---------------------------------------------------------------------------
# Generic loop


def measure_state(theta, C, shards, graph, config: RunConfig, t: int, pool) -> dict:
    """Objective, criterion and train/test metrics of the state entering round ``t``."""
    eta_c = StepSizes(config.step_size(t), config.E, config.c_step_scale).eta2_t
    crit = criterion(theta, C, shards, graph, config.lam, eta_c, config.architecture,
                     config.epsilon_floor, pool)
    return {
        "F": objective(theta, C, shards, graph, config.lam, config.architecture, pool),
        "grad_theta_norm_sq": crit.grad_theta_norm_sq,
        "prox_c_norm1_sq": crit.prox_c_norm1_sq,
        "composite": crit.composite,
        "train_metric": fedsim.evaluate(theta, C, shards, config.architecture, "train")["weighted"],
        "test_metric": _test_metric(theta, C, shards, config.architecture),
    }


def _test_metric(theta, C, shards, arch) -> float:
    if all(s.test.n == 0 for s in shards):
        return float("nan")
    return fedsim.evaluate(theta, C, shards, arch, "test")["weighted"]


def drive(config: RunConfig, shards, algorithm: str, state, measure, advance, membership,
          weights, smoothness: dict | None = None, theta_of=lambda s: s[0]) -> RunTrajectory:
    """Run ``config.T`` rounds and collect a :class:`RunTrajectory`.

    ``measure(state, t)`` returns the round diagnostics, ``advance(state, t)``
    returns ``(state, block, (broadcast, upload, sync))`` and ``membership``
    maps a state to the matrix stored in snapshots (or ``None``). ``weights``
    are the output-index weights over rounds ``0..T-1``; ``None`` outputs the
    final state.
    """
    start = time.perf_counter()
    root = RngStream(config.seed)
    metric = "mse" if shards[0].task == "regression" else "accuracy"
    traj = RunTrajectory(algorithm, config.architecture, metric, config.to_dict(),
                         smoothness=smoothness)
    if weights is not None and config.T > 0:
        t_out = sample_output_index(weights, rng_derive(root, 0, -1, "output"))
    else:
        t_out = config.T
    snaps = snapshot_rounds(config)

    def capture(t, st):
        if t not in snaps and t != t_out:
            return
        C = membership(st)
        if t in snaps and C is not None:
            traj.snapshots[t] = np.array(C)
        if t == t_out:
            traj.output_index = t
            traj.output_theta = np.array(theta_of(st))
            traj.output_C = None if C is None else np.array(C)

    for t in range(config.T):
        capture(t, state)
        row = {"round": t}
        row.update(measure(state, t))
        state, block, (b, u, s) = advance(state, t)
        row.update(block=block, broadcast=b, upload=u, sync=s)
        traj.rounds.append(row)
    capture(config.T, state)
    final = measure(state, config.T)
    traj.final_theta = np.array(theta_of(state))
    C = membership(state)
    traj.final_C = None if C is None else np.array(C)
    traj.final_F = final["F"]
    traj.final_composite = final["composite"]
    traj.final_train_metric = final["train_metric"]
    traj.final_test_metric = final["test_metric"]
    traj.wall_time = time.perf_counter() - start
    return traj


# ---------------------------------------------------------------------------
# Public drivers


def _setup(config, shards, graph, init):
    if isinstance(config, dict):
        config = RunConfig.from_dict(config)
    check_shards(shards)
    graph = default_affinity(shards) if graph is None else graph
    if graph.M != len(shards):
        raise ValueError(f"graph has {graph.M} clients, shards have {len(shards)}")
    theta, C = init_state(config, shards, init)
    L = estimate_smoothness(shards, config, theta, graph)
    return config, graph, theta, C, L


def rbcd_run(config, shards, graph: AffinityGraph | None = None, init=None) -> RunTrajectory:
    """Randomized block coordinate descent over ``(theta, C)``.

    Each round the server draws block 1 (canonical models) with probability
    ``rho[0]`` or block 2 (memberships) with ``rho[1]``. The output state is
    drawn from the trajectory with probability proportional to
    ``eta_t min_h rho_h (1 - gamma_h L_h)``.
    """
    config, graph, theta, C, L = _setup(config, shards, graph, init)
    weights = validate_rbcd_steps(config, L) if config.enforce_step_bound else None
    root = RngStream(config.seed)
    block_rng = rng_derive(root, 0, -1, "block").generator()
    blocks = block_rng.choice(np.array([1, 2]), size=config.T, p=np.array(config.rho))
    smooth = {"L1": L.L1, "L2": L.L2, "source": L.source, "step_bound": rbcd_step_bound(config.E, L)}

    with ClientPool(config.threads) as pool:
        def measure(st, t):
            return measure_state(st[0], st[1], shards, graph, config, t, pool)

        def advance(st, t):
            h = int(blocks[t])
            th, Cn, floats = fedsim.round_protocol_rbcd(st[0], st[1], h, shards, graph, config, t, root, pool)
            return (th, Cn), h, floats

        return drive(config, shards, config.algorithm if config.algorithm == "fedavg" else "rbcd",
                     (theta, C), measure, advance, lambda st: st[1], weights, smooth)


def alternating_run(config, shards, graph: AffinityGraph | None = None, init=None) -> RunTrajectory:
    """Per round: every client takes a full-gradient membership step, then E
    local theta steps under its new membership; the server averages theta."""
    config, graph, theta, C, L = _setup(config, shards, graph, init)
    weights = validate_alternating_steps(config, L) if config.enforce_step_bound else None
    root = RngStream(config.seed)
    smooth = {"L1": L.L1, "L2": L.L2, "source": L.source,
              "step_bound": alternating_step_bound(L, config.T, config.sigma1_sq,
                                                   config.delta_sq, config.delta_F)}

    with ClientPool(config.threads) as pool:
        def measure(st, t):
            return measure_state(st[0], st[1], shards, graph, config, t, pool)

        def advance(st, t):
            th, Cn, floats = fedsim.round_protocol_alternating(st[0], st[1], shards, graph, config, t, root, pool)
            return (th, Cn), 0, floats

        return drive(config, shards, "alternating", (theta, C), measure, advance,
                     lambda st: st[1], weights, smooth)
