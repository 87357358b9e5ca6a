"""Synthetic federated benchmarks and partitioners, plus a CSV/JSON benchmark format."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from .core import LabeledDataset, RngStream, make_shards, rng_derive, split_train_test

TRAIN_FRACTION = 0.75
NOISE_STD = 0.1
MANIFEST = "manifest.json"


@dataclass(frozen=True)
class MixtureGroundTruth:
    coefficients: np.ndarray  # d x K_true
    alpha: np.ndarray  # M x K_true, rows on the simplex
    counts: np.ndarray  # M x K_true samples drawn from each source

    @property
    def sizes(self) -> np.ndarray:
        return self.counts.sum(axis=1)


def _as_stream(rng) -> RngStream:
    if isinstance(rng, RngStream):
        return rng
    if rng is None:
        return RngStream(0)
    return RngStream(int(rng))


def _split_all(datasets, stream: RngStream, frac: float):
    trains, tests = [], []
    for i, ds in enumerate(datasets):
        tr, te = split_train_test(ds, frac, rng_derive(stream, 0, i, "split"))
        trains.append(tr)
        tests.append(te)
    return make_shards(trains, tests)


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def gen_mixture_synthetic(M: int = 30, K_true: int = 3, d: int = 20, n_range=(50, 200),
                          dirichlet_alpha: float = 0.5, task: str = "regression", rng=None,
                          noise_std: float = NOISE_STD, train_fraction: float = TRAIN_FRACTION):
    """Clients whose samples come from a client-specific mixture of K_true GLMs.

    Source coefficients are uniform on ``[-1, 1]``; client ``i`` draws
    ``alpha_i ~ Dir(dirichlet_alpha)``, splits its ``n_i`` samples over the
    sources multinomially and labels standard-normal features with the
    chosen source (Gaussian noise for regression, Bernoulli for binary).
    """
    if task not in ("regression", "binary"):
        raise ValueError("mixture benchmark supports regression and binary tasks")
    if K_true < 1 or d < 1 or M < 1:
        raise ValueError("M, K_true and d must be >= 1")
    lo, hi = (n_range, n_range) if np.isscalar(n_range) else n_range
    if not 2 <= lo <= hi:
        raise ValueError(f"invalid sample-count range {n_range!r}")
    if not dirichlet_alpha > 0:
        raise ValueError("dirichlet_alpha must be positive")
    stream = _as_stream(rng)
    gen = rng_derive(stream, 0, -1, "sources").generator()
    beta = gen.uniform(-1.0, 1.0, size=(d, K_true))

    datasets, alphas, counts = [], [], []
    for i in range(M):
        g = rng_derive(stream, 0, i, "client").generator()
        n_i = int(g.integers(lo, hi + 1))
        a = g.dirichlet(np.full(K_true, float(dirichlet_alpha)))
        # guard against underflow to exact zeros for tiny concentrations
        a = np.clip(a, 0.0, None)
        a /= a.sum()
        cnt = g.multinomial(n_i, a)
        src = np.repeat(np.arange(K_true), cnt)
        g.shuffle(src)
        X = g.standard_normal((n_i, d))
        z = np.einsum("nd,dn->n", X, beta[:, src])
        if task == "regression":
            y = z + noise_std * g.standard_normal(n_i)
        else:
            y = (g.random(n_i) < _sigmoid(z)).astype(np.int64)
        datasets.append(LabeledDataset(X, y, task))
        alphas.append(a)
        counts.append(cnt)
    shards = _split_all(datasets, stream, train_fraction)
    return shards, MixtureGroundTruth(beta, np.array(alphas), np.array(counts))


def gen_domain_heterogeneous(M: int = 30, groups: int = 4, classes_per_group: int = 2, d: int = 20,
                             n_per_client=(80, 120), separation: float = 3.0, rng=None,
                             train_fraction: float = TRAIN_FRACTION):
    """Clients that each see only the classes owned by their group.

    Group ``g`` owns labels ``g*classes_per_group .. (g+1)*classes_per_group-1``.
    The ``j``-th class of every group is drawn around the same prototype
    ``separation * u_j`` (orthonormal ``u_j``) with unit-variance noise, so
    features alone do not reveal the group; the label a feature region maps
    to does. Client ``i`` belongs to group ``i mod groups``.
    """
    if groups > M:
        raise ValueError(f"groups ({groups}) exceeds the number of clients ({M})")
    if groups < 1 or classes_per_group < 1:
        raise ValueError("groups and classes_per_group must be >= 1")
    if d < classes_per_group:
        raise ValueError("d must be at least classes_per_group")
    lo, hi = (n_per_client, n_per_client) if np.isscalar(n_per_client) else n_per_client
    if not 2 <= lo <= hi:
        raise ValueError(f"invalid sample-count range {n_per_client!r}")
    stream = _as_stream(rng)
    gen = rng_derive(stream, 0, -1, "prototypes").generator()
    Q, _ = np.linalg.qr(gen.standard_normal((d, classes_per_group)))
    protos = separation * Q.T  # classes_per_group x d
    n_classes = groups * classes_per_group
    task = "binary" if n_classes == 2 else "multiclass"

    assignment = np.arange(M) % groups
    datasets = []
    for i in range(M):
        g = rng_derive(stream, 0, i, "client").generator()
        n_i = int(g.integers(lo, hi + 1))
        j = g.integers(0, classes_per_group, size=n_i)
        X = protos[j] + g.standard_normal((n_i, d))
        y = assignment[i] * classes_per_group + j
        datasets.append(LabeledDataset(X, y, task, n_classes))
    return _split_all(datasets, stream, train_fraction), assignment


def gen_gaussian_classes(n: int, d: int, n_classes: int, separation: float = 3.0, rng=None) -> LabeledDataset:
    """Pooled labelled data with one Gaussian blob per class (means ``separation`` apart
    along random orthonormal directions when ``n_classes <= d``)."""
    if n_classes < 2 or n < n_classes:
        raise ValueError("need at least two classes and one sample per class")
    gen = rng_derive(_as_stream(rng), 0, -1, "pool").generator()
    if n_classes <= d:
        means = separation * np.linalg.qr(gen.standard_normal((d, n_classes)))[0].T
    else:
        means = separation * gen.standard_normal((n_classes, d)) / np.sqrt(d)
    y = np.arange(n) % n_classes
    gen.shuffle(y)
    X = means[y] + gen.standard_normal((n, d))
    return LabeledDataset(X, y, "binary" if n_classes == 2 else "multiclass", n_classes)


def gen_dirichlet_partition(base: LabeledDataset, M: int, alpha: float, rng=None,
                            train_fraction: float = TRAIN_FRACTION, max_attempts: int = 100):
    """Split a labelled pool over M clients with Dir(alpha) class proportions."""
    if not alpha > 0:
        raise ValueError("alpha must be positive")
    if base.task == "regression":
        raise ValueError("Dirichlet partition needs class labels")
    if M < 1:
        raise ValueError("M must be >= 1")
    stream = _as_stream(rng)
    for attempt in range(max_attempts):
        g = rng_derive(stream, attempt, -1, "partition").generator()
        owner = np.empty(base.n, dtype=np.int64)
        for k in range(base.n_classes):
            idx = np.flatnonzero(base.y == k)
            if idx.size == 0:
                continue
            props = g.dirichlet(np.full(M, float(alpha)))
            owner[idx] = g.choice(M, size=idx.size, p=props)
        sizes = np.bincount(owner, minlength=M)
        # each client needs one train and one test sample
        if sizes.min() >= 2:
            parts = [base.subset(np.flatnonzero(owner == i)) for i in range(M)]
            return _split_all(parts, stream, train_fraction)
    raise ValueError(f"could not draw a partition without empty shards in {max_attempts} attempts")


# ---------------------------------------------------------------------------
# Benchmark directories


def _write_split(path, ds: LabeledDataset):
    header = ",".join([f"x{j}" for j in range(ds.d)] + ["y"])
    data = np.column_stack([ds.X, ds.y.astype(np.float64)])
    np.savetxt(path, data, delimiter=",", header=header, comments="", fmt="%.17g")


def _read_split(path, task, n_classes) -> LabeledDataset:
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    if data.shape[0] == 0:
        with open(path) as fh:
            d = len(fh.readline().strip().split(",")) - 1
        data = np.zeros((0, d + 1))
    y = data[:, -1] if task == "regression" else np.rint(data[:, -1]).astype(np.int64)
    return LabeledDataset(data[:, :-1], y, task, n_classes)


def export_benchmark(shards, out_dir, ground_truth: dict | None = None, meta: dict | None = None) -> str:
    """Write ``client_<i>_{train,test}.csv`` per client and ``manifest.json``."""
    os.makedirs(out_dir, exist_ok=True)
    clients = []
    for s in shards:
        tr, te = f"client_{s.id}_train.csv", f"client_{s.id}_test.csv"
        _write_split(os.path.join(out_dir, tr), s.train)
        _write_split(os.path.join(out_dir, te), s.test)
        clients.append({"id": s.id, "train": tr, "test": te, "weight": s.weight,
                        "n_train": s.train.n, "n_test": s.test.n})
    gt = {}
    for k, v in (ground_truth or {}).items():
        gt[k] = np.asarray(v).tolist() if isinstance(v, np.ndarray) else v
    manifest = {
        "task": shards[0].task,
        "n_classes": shards[0].n_classes,
        "d": shards[0].train.d,
        "M": len(shards),
        "clients": clients,
        "ground_truth": gt,
        "meta": meta or {},
    }
    path = os.path.join(out_dir, MANIFEST)
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def load_benchmark(path):
    """Read a benchmark directory; returns ``(shards, manifest)``."""
    mpath = path if path.endswith(".json") else os.path.join(path, MANIFEST)
    root = os.path.dirname(mpath)
    if not os.path.exists(mpath):
        raise FileNotFoundError(f"no benchmark manifest at {mpath}")
    with open(mpath) as fh:
        manifest = json.load(fh)
    task, nc = manifest["task"], manifest["n_classes"]
    trains, tests, weights = [], [], []
    for c in sorted(manifest["clients"], key=lambda c: c["id"]):
        trains.append(_read_split(os.path.join(root, c["train"]), task, nc))
        tests.append(_read_split(os.path.join(root, c["test"]), task, nc))
        weights.append(c["weight"])
    return make_shards(trains, tests, weights), manifest


def mixture_ground_truth_dict(gt: MixtureGroundTruth) -> dict:
    return {"coefficients": gt.coefficients, "alpha_truth": gt.alpha, "counts": gt.counts}
