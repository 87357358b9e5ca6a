"""Datasets, client shards, deterministic RNG streams and run configuration."""

from __future__ import annotations

import math
import zlib
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Any

import numpy as np

TASKS = ("regression", "binary", "multiclass")
ARCHITECTURES = ("prediction", "parameter", "loss")
ALGORITHMS = ("rbcd", "alternating", "fedavg", "local", "clustered")
SCHEDULES = ("constant", "inv_sqrt")


class ConfigError(ValueError):
    """Invalid run configuration; ``path`` names the offending field."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


@dataclass(frozen=True)
class LabeledDataset:
    """Local samples of one client.

    ``y`` holds floats for regression and integer class ids otherwise
    (``{0, 1}`` for binary, ``[0, n_classes)`` for multiclass).
    """

    X: np.ndarray
    y: np.ndarray
    task: str = "regression"
    n_classes: int = 1

    def __post_init__(self):
        X = np.ascontiguousarray(self.X, dtype=np.float64)
        if X.ndim != 2:
            raise ValueError("features must be a 2-d array")
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}")
        if self.task == "regression":
            y = np.asarray(self.y, dtype=np.float64).reshape(-1)
            n_classes = 1
        else:
            y = np.asarray(self.y).reshape(-1).astype(np.int64)
            n_classes = 2 if self.task == "binary" else int(self.n_classes)
            if y.size and (y.min() < 0 or y.max() >= n_classes):
                raise ValueError(f"labels must lie in [0, {n_classes})")
        if X.shape[0] != y.shape[0]:
            raise ValueError(
                f"feature rows ({X.shape[0]}) != label count ({y.shape[0]})")
        if not np.all(np.isfinite(X)) or (self.task == "regression" and not np.all(np.isfinite(y))):
            raise ValueError("non-finite values in dataset")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "n_classes", n_classes)

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def d(self) -> int:
        return self.X.shape[1]

    def subset(self, idx) -> "LabeledDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return LabeledDataset(self.X[idx], self.y[idx], self.task, self.n_classes)

    def label_histogram(self) -> np.ndarray:
        if self.task == "regression":
            raise ValueError("regression shards have no label histogram")
        return np.bincount(self.y, minlength=self.n_classes).astype(np.float64)


@dataclass(frozen=True)
class ClientShard:
    id: int
    train: LabeledDataset
    test: LabeledDataset
    weight: float

    @property
    def task(self) -> str:
        return self.train.task

    @property
    def n_classes(self) -> int:
        return self.train.n_classes


def make_shards(trains, tests, weights=None) -> list[ClientShard]:
    """Bundle per-client splits; weights default to ``n_i / n`` on train sizes."""
    if len(trains) != len(tests):
        raise ValueError("train/test lists differ in length")
    if not trains:
        raise ValueError("no clients")
    if weights is None:
        sizes = np.array([t.n for t in trains], dtype=np.float64)
        weights = sizes / sizes.sum()
    weights = np.asarray(weights, dtype=np.float64)
    if np.any(weights <= 0):
        raise ValueError("client weights must be positive")
    if abs(weights.sum() - 1.0) > 1e-9:
        raise ValueError(f"client weights sum to {weights.sum()!r}, expected 1")
    return [ClientShard(i, tr, te, float(w))
            for i, (tr, te, w) in enumerate(zip(trains, tests, weights))]


def shard_weights(shards) -> np.ndarray:
    return np.array([s.weight for s in shards], dtype=np.float64)


# ---------------------------------------------------------------------------
# RNG streams


def _tag_id(tag: str) -> int:
    return zlib.crc32(tag.encode("utf-8"))


@dataclass(frozen=True)
class RngStream:
    """Value-type handle on a reproducible random stream.

    Two streams with equal ``seed`` and ``lineage`` yield identical draws.
    """

    seed: int
    lineage: tuple = ()

    def generator(self) -> np.random.Generator:
        key = tuple(int(v) & 0xFFFFFFFF for v in self.lineage)
        ss = np.random.SeedSequence(entropy=int(self.seed) & (2**64 - 1), spawn_key=key)
        return np.random.Generator(np.random.PCG64(ss))


def rng_derive(parent: RngStream, round: int, client: int, tag: str) -> RngStream:
    """Child stream keyed by ``(round, client, tag)``.

    ``client=-1`` is used for server-side draws.
    """
    return RngStream(parent.seed, parent.lineage + (round + 1, client + 1, _tag_id(tag)))


def split_train_test(ds: LabeledDataset, frac: float, rng: RngStream):
    """Shuffled disjoint split with ``ceil(frac * n)`` training samples."""
    if not 0.0 < frac < 1.0:
        raise ValueError("frac must lie in (0, 1)")
    if ds.n == 0:
        raise ValueError("empty shard")
    perm = rng.generator().permutation(ds.n)
    n_train = math.ceil(frac * ds.n)
    return ds.subset(np.sort(perm[:n_train])), ds.subset(np.sort(perm[n_train:]))


# ---------------------------------------------------------------------------
# Run configuration


@dataclass(frozen=True)
class RunConfig:
    """Hyperparameters of one training run.

    ``eta`` is the base step size: local theta steps use ``eta / E`` and the
    membership step uses ``eta * c_step_scale`` (``c_step_scale`` is 1 in the
    analysed setting).
    """

    K: int = 3
    T: int = 100
    E: int = 1
    eta: float = 0.01
    eta_schedule: str = "constant"
    lam: float = 0.0
    rho: tuple = (0.5, 0.5)
    batch_size: Any = "full"
    architecture: str = "prediction"
    epsilon_floor: float = 1e-6
    algorithm: str = "rbcd"
    seed: int = 0
    init_scale: float = 0.05
    c_step_scale: float = 1.0
    enforce_step_bound: bool = True
    L1: float | None = None
    L2: float | None = None
    sigma1_sq: float | None = None
    delta_sq: float | None = None
    delta_F: float | None = None
    snapshot_rounds: tuple | None = None
    threads: int = 1

    def __post_init__(self):
        object.__setattr__(self, "rho", tuple(float(r) for r in self.rho))
        if self.snapshot_rounds is not None:
            object.__setattr__(self, "snapshot_rounds", tuple(int(r) for r in self.snapshot_rounds))
        self.validate()

    def validate(self):
        if int(self.K) != self.K or self.K < 1:
            raise ConfigError("K", "must be an integer >= 1")
        if int(self.T) != self.T or self.T < 0:
            raise ConfigError("T", "must be an integer >= 0")
        if int(self.E) != self.E or self.E < 1:
            raise ConfigError("E", "must be an integer >= 1")
        if not (self.eta > 0 and math.isfinite(self.eta)):
            raise ConfigError("eta", "must be positive and finite")
        if self.eta_schedule not in SCHEDULES:
            raise ConfigError("eta_schedule", f"must be one of {SCHEDULES}")
        if not self.lam >= 0:
            raise ConfigError("lambda", "must be >= 0")
        if len(self.rho) != 2 or min(self.rho) < 0 or abs(sum(self.rho) - 1.0) > 1e-12:
            raise ConfigError("rho", "needs two nonnegative probabilities summing to 1")
        if self.batch_size != "full" and (int(self.batch_size) != self.batch_size or self.batch_size < 1):
            raise ConfigError("batch_size", "must be 'full' or a positive integer")
        if self.architecture not in ARCHITECTURES:
            raise ConfigError("architecture", f"must be one of {ARCHITECTURES}")
        if not 0 < self.epsilon_floor < 1.0 / self.K:
            raise ConfigError("epsilon_floor", "must lie in (0, 1/K)")
        if self.algorithm not in ALGORITHMS:
            raise ConfigError("algorithm", f"must be one of {ALGORITHMS}")
        if self.c_step_scale <= 0:
            raise ConfigError("c_step_scale", "must be positive")
        for name in ("L1", "L2"):
            v = getattr(self, name)
            if v is not None and not v > 0:
                raise ConfigError(name, "must be positive")
        if self.threads < 1:
            raise ConfigError("threads", "must be >= 1")

    def step_size(self, t: int) -> float:
        if self.eta_schedule == "constant":
            return float(self.eta)
        return float(self.eta) / math.sqrt(t + 1)

    @property
    def full_batch(self) -> bool:
        return self.batch_size == "full"

    def with_(self, **changes) -> "RunConfig":
        return replace(self, **changes)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["lambda"] = out.pop("lam")
        out["rho"] = list(self.rho)
        if self.snapshot_rounds is not None:
            out["snapshot_rounds"] = list(self.snapshot_rounds)
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        data = dict(data)
        if "lambda" in data:
            data["lam"] = data.pop("lambda")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(unknown[0], "unknown field")
        return cls(**data)
