"""Run trajectories, membership diagnostics, the GLMM check and export formats."""

from __future__ import annotations

import itertools
import json
import os
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from .core import ClientShard
from .model import value_and_grads

ROUND_FIELDS = ("round", "block", "F", "grad_theta_norm_sq", "prox_c_norm1_sq",
                "composite", "train_metric", "test_metric",
                "broadcast", "upload", "sync")
CSV_COLUMNS = ("round", "block", "F", "grad_theta_norm_sq", "prox_c_norm1_sq",
               "composite", "train_metric", "test_metric",
               "cum_broadcast", "cum_upload", "cum_sync", "cum_floats")


@dataclass
class RunTrajectory:
    """Per-round record of a run plus its final and sampled-output states.

    Round ``t`` rows describe the state *entering* round ``t`` (objective,
    criterion, metrics) and the block updated during it, together with the
    floats that round exchanged.
    """

    algorithm: str
    architecture: str
    metric_name: str
    config: dict = field(default_factory=dict)
    rounds: list = field(default_factory=list)
    snapshots: dict = field(default_factory=dict)
    output_index: int | None = None
    output_theta: np.ndarray | None = None
    output_C: np.ndarray | None = None
    final_theta: np.ndarray | None = None
    final_C: np.ndarray | None = None
    final_F: float | None = None
    final_train_metric: float | None = None
    final_test_metric: float | None = None
    final_composite: float | None = None
    smoothness: dict | None = None
    wall_time: float = 0.0
    extras: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.rounds)

    def column(self, name: str) -> np.ndarray:
        return np.array([r[name] for r in self.rounds], dtype=np.float64)

    @property
    def composite(self) -> np.ndarray:
        return self.column("composite")

    def min_composite(self, upto: int | None = None) -> float:
        """Smallest composite criterion over rounds ``0..upto-1`` (all if None)."""
        vals = self.composite if upto is None else self.composite[:upto]
        return float(vals.min())

    def ledger_totals(self) -> dict:
        out = {k: int(sum(r[k] for r in self.rounds)) for k in ("broadcast", "upload", "sync")}
        out["total"] = out["broadcast"] + out["upload"] + out["sync"]
        return out

    def numeric_signature(self):
        """Everything except accounting and timing, for reproducibility checks."""
        rows = [tuple(r[k] for k in ROUND_FIELDS if k not in ("broadcast", "upload", "sync"))
                for r in self.rounds]
        return rows, self.final_theta, self.final_C


# ---------------------------------------------------------------------------
# Membership diagnostics


def _column_cost(C_hat, alpha):
    # cost[k, j] = sum_i |alpha_ik - c_hat_ij|
    return np.abs(alpha[:, :, None] - C_hat[:, None, :]).sum(axis=0)


def best_column_permutation(C_hat, alpha) -> np.ndarray:
    """Permutation ``perm`` minimizing the total gap of ``C_hat[:, perm]`` vs ``alpha``.

    Exhaustive for K <= 6, linear assignment beyond (the total gap is a sum
    over matched column pairs, so the assignment is exact as well).
    """
    cost = _column_cost(C_hat, alpha)
    K = cost.shape[0]
    if K <= 6:
        best, best_val = None, np.inf
        for perm in itertools.permutations(range(K)):
            val = cost[np.arange(K), perm].sum()
            if val < best_val - 1e-15:
                best, best_val = perm, val
        return np.array(best)
    rows, cols = linear_sum_assignment(cost)
    return cols[np.argsort(rows)]


def membership_recovery_gap(C_hat, alpha_truth):
    """Per-client total-variation gaps ``sum_k |alpha_ik - c_ik| / 2`` and their mean."""
    C_hat = np.asarray(C_hat, dtype=np.float64)
    alpha = np.asarray(alpha_truth, dtype=np.float64)
    if C_hat.shape != alpha.shape or C_hat.ndim != 2:
        raise ValueError(f"shape mismatch: {C_hat.shape} vs {alpha.shape}")
    perm = best_column_permutation(C_hat, alpha)
    gaps = np.abs(alpha - C_hat[:, perm]).sum(axis=1) / 2.0
    gaps = np.clip(gaps, 0.0, 1.0)
    return gaps, float(gaps.mean())


def group_identification_rate(C_hat, group_truth) -> float:
    """Fraction of clients whose dominant canonical model maps to their group.

    Canonical models are matched to groups by the assignment maximizing the
    number of agreeing clients; argmax ties go to the lowest index.
    """
    C_hat = np.asarray(C_hat, dtype=np.float64)
    groups = np.asarray(group_truth, dtype=np.int64)
    if C_hat.ndim != 2 or C_hat.shape[0] != groups.shape[0]:
        raise ValueError("C_hat rows must match the number of clients")
    top = np.argmax(C_hat, axis=1)
    G = int(groups.max()) + 1
    counts = np.zeros((C_hat.shape[1], G))
    np.add.at(counts, (top, groups), 1.0)
    rows, cols = linear_sum_assignment(-counts)
    return float(counts[rows, cols].sum() / groups.shape[0])


# ---------------------------------------------------------------------------
# GLMM equivalence


def glmm_equivalence_check(theta, C, shards: list[ClientShard], lam: float):
    """Objective with all-ones affinity in its PPFL and GLMM forms.

    The PPFL side uses the parameter-mixture loss and the pairwise Laplacian
    penalty; the GLMM side evaluates each client's loss at its coefficient
    vector ``b_i = theta c_i`` and penalizes deviations from the mean
    coefficient in the metric ``(theta^+)' theta^+``. With ``lam = 1/M`` the
    second form is the GLMM objective with random-effect covariance
    ``theta theta'``. Returns ``(F_ppfl, F_glmm, |F_ppfl - F_glmm|)``.
    """
    theta = np.asarray(theta, dtype=np.float64)
    C = np.asarray(C, dtype=np.float64)
    M, K = C.shape
    if theta.shape[1] != K or len(shards) != M:
        raise ValueError("theta, C and shards disagree on K or M")
    if np.linalg.matrix_rank(theta) < K:
        raise ValueError("pseudo-inverse undefined under stated construction: theta is rank deficient")
    sizes = np.array([s.train.n for s in shards], dtype=np.float64)
    p = sizes / sizes.sum()
    weights = np.array([s.weight for s in shards])
    if np.max(np.abs(weights - p)) > 1e-12:
        raise ValueError("client weights must equal n_i / n")

    loss_ppfl = sum(p[i] * value_and_grads(theta, C[i], shards[i].train, "parameter",
                                           want_theta=False, want_c=False)[0] for i in range(M))
    diffs = C[:, None, :] - C[None, :, :]
    penalty_ppfl = 0.5 * lam * float(np.einsum("ijk,ijk->", diffs, diffs))
    F_ppfl = loss_ppfl + penalty_ppfl

    B = C @ theta.T  # rows b_i = theta c_i
    loss_glmm = sum(p[i] * value_and_grads(B[i][:, None], [1.0], shards[i].train, "parameter",
                                           want_theta=False, want_c=False)[0] for i in range(M))
    pinv = np.linalg.solve(theta.T @ theta, theta.T)
    metric = pinv.T @ pinv
    dev = B - B.mean(axis=0)
    penalty_glmm = lam * M * float(np.einsum("ij,jk,ik->", dev, metric, dev))
    F_glmm = loss_glmm + penalty_glmm
    return float(F_ppfl), float(F_glmm), abs(float(F_ppfl) - float(F_glmm))


# ---------------------------------------------------------------------------
# Export


def _fmt(x) -> str:
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return format(float(x), ".17g")


def _write_matrix_csv(path, A):
    with open(path, "w", newline="") as fh:
        for row in np.asarray(A, dtype=np.float64):
            fh.write(",".join(_fmt(v) for v in row) + "\n")


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    return obj


def export_run(traj: RunTrajectory, out_dir) -> list[str]:
    """Write ``metrics.csv``, ``c_snapshots/round_<t>.csv`` and ``summary.json``."""
    os.makedirs(out_dir, exist_ok=True)
    written = []
    path = os.path.join(out_dir, "metrics.csv")
    cum = {"broadcast": 0, "upload": 0, "sync": 0}
    with open(path, "w", newline="") as fh:
        fh.write(",".join(CSV_COLUMNS) + "\n")
        for r in traj.rounds:
            for k in cum:
                cum[k] += int(r[k])
            vals = [r["round"], r["block"], r["F"], r["grad_theta_norm_sq"], r["prox_c_norm1_sq"],
                    r["composite"], r["train_metric"], r["test_metric"],
                    cum["broadcast"], cum["upload"], cum["sync"], sum(cum.values())]
            fh.write(",".join(_fmt(v) for v in vals) + "\n")
    written.append(path)

    snap_dir = os.path.join(out_dir, "c_snapshots")
    if traj.snapshots:
        os.makedirs(snap_dir, exist_ok=True)
    for t in sorted(traj.snapshots):
        p = os.path.join(snap_dir, f"round_{t}.csv")
        _write_matrix_csv(p, traj.snapshots[t])
        written.append(p)

    summary = {
        "algorithm": traj.algorithm,
        "architecture": traj.architecture,
        "metric": traj.metric_name,
        "config": traj.config,
        "rounds": len(traj.rounds),
        "output_index": traj.output_index,
        "final": {
            "F": traj.final_F,
            "composite": traj.final_composite,
            "train_metric": traj.final_train_metric,
            "test_metric": traj.final_test_metric,
        },
        "ledger": traj.ledger_totals(),
        "smoothness": traj.smoothness,
        "extras": traj.extras,
        "wall_time_s": traj.wall_time,
    }
    path = os.path.join(out_dir, "summary.json")
    with open(path, "w") as fh:
        json.dump(_jsonable(summary), fh, indent=2, sort_keys=True)
        fh.write("\n")
    written.append(path)
    return written
