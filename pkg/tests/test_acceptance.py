"""Acceptance suite: one test per criterion, each printing a pass/fail line.

Run alone with ``pytest tests/test_acceptance.py -v -s``; the summary lines
are also collected at the end of any pytest session.
"""

import json
import time

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES, random_dataset, random_shards
from ppfl import fedsim
from ppfl.baselines import run_clustered_fl, run_fedavg
from ppfl.cli import main
from ppfl.core import LabeledDataset, RngStream, RunConfig, make_shards
from ppfl.datagen import gen_domain_heterogeneous, gen_mixture_synthetic
from ppfl.graph import affinity_from_label_histograms, all_ones, default_affinity, empty
from ppfl.metrics import glmm_equivalence_check, group_identification_rate, membership_recovery_gap
from ppfl.model import param_rows, value_and_grads
from ppfl.optim import (SmoothnessEstimates, alternating_run, alternating_step_bound, c_update,
                        estimate_smoothness, exp_grad_step, objective, output_weights, rbcd_run,
                        sample_output_index, surrogate_value)
from ppfl.optim.drivers import init_theta


def report(number, title, ok, detail):
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {title} ({detail})"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


# ---------------------------------------------------------------------------
# 1. Gradients against central differences

LINKS = {"identity": ("regression", 1), "logit": ("binary", 2), "softmax": ("multiclass", 3)}


def central_difference(fn, x, h):
    g = np.zeros_like(x)
    flat, out = x.reshape(-1), g.reshape(-1)
    for j in range(flat.size):
        old = flat[j]
        flat[j] = old + h
        up = fn()
        flat[j] = old - h
        down = fn()
        flat[j] = old
        out[j] = (up - down) / (2.0 * h)
    return g


def test_criterion_01_gradients_match_finite_differences():
    start = time.perf_counter()
    rng = np.random.default_rng(101)
    worst = 0.0
    for arch in ("prediction", "parameter", "loss"):
        for link, (task, n_classes) in LINKS.items():
            for _ in range(100):
                d, K = int(rng.integers(2, 5)), int(rng.integers(1, 4))
                data = random_dataset(rng, int(rng.integers(5, 15)), d, task, n_classes)
                theta = rng.normal(0.0, 0.5, size=(param_rows(d, task, n_classes), K))
                c = rng.dirichlet(np.ones(K))
                _, g_theta, g_c = value_and_grads(theta, c, data, arch)

                def loss():
                    return value_and_grads(theta, c, data, arch, want_theta=False, want_c=False)[0]

                analytic = np.concatenate([g_theta.ravel(), g_c])
                numeric = np.concatenate([central_difference(loss, theta, 1e-6).ravel(),
                                          central_difference(loss, c, 1e-6)])
                err = np.linalg.norm(analytic - numeric) / max(np.linalg.norm(numeric), 1e-8)
                worst = max(worst, err)
    elapsed = time.perf_counter() - start
    report(1, "gradients vs central differences", worst <= 1e-5 and elapsed < 10.0,
           f"max relative error {worst:.2e} over 900 instances, {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# 2. Mirror steps stay on the floored simplex


def test_criterion_02_mirror_steps_stay_on_simplex():
    start = time.perf_counter()
    rng = np.random.default_rng(202)
    worst_sum, min_entry = 0.0, np.inf
    for _ in range(10_000):
        K = int(rng.integers(2, 12))
        c = rng.dirichlet(np.full(K, rng.uniform(0.05, 2.0)))
        c = np.maximum(c, 1e-300)
        c /= c.sum()
        g = rng.standard_normal(K) * 10.0 ** rng.uniform(-3, 3)
        out = exp_grad_step(c, g, 10.0 ** rng.uniform(-3, 2))
        worst_sum = max(worst_sum, abs(out.sum() - 1.0))
        min_entry = min(min_entry, out.min())
    elapsed = time.perf_counter() - start
    ok = worst_sum <= 1e-9 and min_entry >= 1e-6 and elapsed < 5.0
    report(2, "simplex safety", ok,
           f"max |sum-1| {worst_sum:.1e}, min entry {min_entry:.3g}, {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# 3. Linearized-coupling surrogate majorizes the objective


def skewed_label_shards(rng, M, d, n_classes):
    trains, tests = [], []
    for _ in range(M):
        n = int(rng.integers(8, 20))
        y = rng.choice(n_classes, size=n, p=rng.dirichlet(np.full(n_classes, 0.3)))
        trains.append(LabeledDataset(rng.standard_normal((n, d)), y, "multiclass", n_classes))
        tests.append(LabeledDataset(rng.standard_normal((2, d)), y[:2], "multiclass", n_classes))
    return make_shards(trains, tests)


def test_criterion_03_surrogate_dominates_objective():
    start = time.perf_counter()
    rng = np.random.default_rng(303)
    M, K, d, n_classes = 5, 3, 3, 4
    shard_sets = [skewed_label_shards(rng, M, d, n_classes) for _ in range(10)]
    graphs = [(s, all_ones(M)) for s in shard_sets] + [(s, affinity_from_label_histograms(s))
                                                       for s in shard_sets]
    worst_below, worst_anchor = 0.0, 0.0
    for trial in range(1000):
        shards, graph = graphs[trial % len(graphs)]
        arch = ("prediction", "parameter", "loss")[trial % 3]
        lam = 10.0 ** rng.uniform(-3, 1)
        theta = rng.normal(0.0, 0.5, size=(d * n_classes, K))
        C = rng.dirichlet(np.ones(K), size=M)
        A = rng.dirichlet(np.ones(K), size=M)
        F_C = objective(theta, C, shards, graph, lam, arch)
        S_C = surrogate_value(C, A, theta, shards, graph, lam, arch)
        F_A = objective(theta, A, shards, graph, lam, arch)
        S_A = surrogate_value(A, A, theta, shards, graph, lam, arch)
        worst_below = max(worst_below, F_C - S_C)
        worst_anchor = max(worst_anchor, abs(S_A - F_A))
    elapsed = time.perf_counter() - start
    ok = worst_below <= 1e-10 and worst_anchor <= 1e-10 and elapsed < 10.0
    report(3, "surrogate dominance", ok,
           f"max F-S {worst_below:.2e}, max |S-F| at anchor {worst_anchor:.1e}, {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# 4. Membership step equals the brute-force prox minimizer


def grid_prox(c, g, eta, step=1e-4):
    """Minimize <g, x> + KL(x || c) / eta over a grid of the 2-simplex."""
    u = np.arange(step, 1.0, step)
    x = np.column_stack([u, 1.0 - u])
    vals = x @ g + (x * np.log(x / c)).sum(axis=1) / eta
    return x[np.argmin(vals)]


def test_criterion_04_membership_step_matches_grid_prox():
    start = time.perf_counter()
    rng = np.random.default_rng(404)
    worst = 0.0
    for trial in range(200):
        link = list(LINKS)[trial % 3]
        task, n_classes = LINKS[link]
        arch = ("prediction", "parameter", "loss")[(trial // 3) % 3]
        d = int(rng.integers(2, 5))
        shards = random_shards(rng, 1, int(rng.integers(10, 30)), d, task, n_classes)
        theta = rng.normal(0.0, 1.0, size=(param_rows(d, task, n_classes), 2))
        C = rng.dirichlet(np.ones(2), size=1)
        eta = 10.0 ** rng.uniform(-1, 1)
        got = c_update(C, theta, shards, empty(1), 0.0, eta, arch)[0]
        g = value_and_grads(theta, C[0], shards[0].train, arch, want_theta=False)[2]
        want = grid_prox(C[0], g, eta)
        worst = max(worst, float(np.max(np.abs(got - want))))
    elapsed = time.perf_counter() - start
    report(4, "prox oracle equivalence", worst <= 2e-4 and elapsed < 30.0,
           f"max coordinate gap {worst:.2e} over 200 cases, {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# 5. Reduction identities


def same_trajectory(a, b):
    rows_a, theta_a, _ = a.numeric_signature()
    rows_b, theta_b, _ = b.numeric_signature()
    return rows_a == rows_b and np.array_equal(theta_a, theta_b)


def test_criterion_05_reduction_identities():
    rng = np.random.default_rng(505)
    shards, _ = gen_domain_heterogeneous(M=8, groups=2, d=6, n_per_client=(30, 50), rng=5)
    base = RunConfig(K=1, T=15, E=3, eta=0.2, rho=(1.0, 0.0), lam=0.0, batch_size=8,
                     enforce_step_bound=False, seed=11)
    fedavg = run_fedavg(shards, base)
    a = same_trajectory(rbcd_run(base, shards), fedavg)
    c = same_trajectory(run_clustered_fl(shards, base, 1), fedavg)

    worst = 0.0
    for trial in range(30):
        link = list(LINKS)[trial % 3]
        task, n_classes = LINKS[link]
        arch = ("prediction", "parameter", "loss")[(trial // 3) % 3]
        M, K, d = 4, int(rng.integers(1, 4)), 3
        sh = random_shards(rng, M, 12, d, task, n_classes)
        theta = rng.normal(0.0, 0.5, size=(param_rows(d, task, n_classes), K))
        C = rng.dirichlet(np.ones(K), size=M)
        cfg = RunConfig(K=K, E=1, eta=0.05, architecture=arch, enforce_step_bound=False)
        got, _, _ = fedsim.round_protocol_rbcd(theta, C, 1, sh, all_ones(M), cfg, 0, RngStream(0))
        grad = sum(s.weight * value_and_grads(theta, C[i], s.train, arch, want_c=False)[1]
                   for i, s in enumerate(sh))
        worst = max(worst, float(np.max(np.abs(got - (theta - 0.05 * grad)))))
    b = worst <= 1e-12
    report(5, "reduction identities", a and b and c,
           f"(a) K=1 RBCD == FedAvg: {a}; (b) GD step gap {worst:.1e}; (c) clustered K=1 == FedAvg: {c}")


# ---------------------------------------------------------------------------
# 6. GLMM objective equivalence


def test_criterion_06_glmm_equivalence():
    start = time.perf_counter()
    rng = np.random.default_rng(606)
    worst, worst_objective = 0.0, 0.0
    for _ in range(100):
        M, K = int(rng.integers(2, 7)), int(rng.integers(1, 4))
        d = K + int(rng.integers(0, 4))
        sh = random_shards(rng, M, int(rng.integers(5, 15)), d, "regression")
        theta = rng.standard_normal((d, K))
        C = rng.dirichlet(np.ones(K), size=M)
        f_ppfl, f_glmm, diff = glmm_equivalence_check(theta, C, sh, 1.0 / M)
        worst = max(worst, diff / max(abs(f_ppfl), abs(f_glmm)))
        direct = objective(theta, C, sh, all_ones(M), 1.0 / M, "parameter")
        worst_objective = max(worst_objective, abs(direct - f_glmm) / abs(f_glmm))
    elapsed = time.perf_counter() - start
    ok = worst <= 1e-8 and worst_objective <= 1e-8 and elapsed < 5.0
    report(6, "GLMM objective equivalence", ok,
           f"max relative diff {worst:.1e} (library objective {worst_objective:.1e}), {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# 7. Convergence trend under valid constant steps


def test_criterion_07_composite_criterion_decays():
    start = time.perf_counter()
    shards, _ = gen_mixture_synthetic(M=30, K_true=3, d=20, dirichlet_alpha=0.3, rng=1)
    base = RunConfig(K=3, T=400, E=1, lam=0.01, seed=0)
    L = estimate_smoothness(shards, base, init_theta(base, shards), default_affinity(shards))
    # 1/(32 L1) binding keeps every output weight positive
    runs = (("rbcd", rbcd_run, min(1.0 / (32.0 * L.L1), 1.0 / L.L2)),
            ("alternating", alternating_run, alternating_step_bound(L)))
    details, ok = [], True
    for name, run, eta in runs:
        cfg = base.with_(eta=eta)
        long = run(cfg, shards)
        short = run(cfg.with_(T=25), shards)
        # the T=25 run is the first 25 rounds of the T=400 run
        prefix = long.numeric_signature()[0][:25] == short.numeric_signature()[0]
        m25, m100, m400 = (long.min_composite(t) for t in (25, 100, 400))
        ok = ok and prefix and m400 <= 0.5 * m25 and m25 >= m100 >= m400
        details.append(f"{name}: eta {eta:.3g}, min G {m25:.3g} -> {m100:.3g} -> {m400:.3g}")
    elapsed = time.perf_counter() - start
    report(7, "convergence trend", ok and elapsed < 120.0, "; ".join(details) + f", {elapsed:.0f}s")


# ---------------------------------------------------------------------------
# 8. Membership recovery and personalization gain


def test_criterion_08_membership_recovery():
    start = time.perf_counter()
    shards, groups = gen_domain_heterogeneous(M=30, groups=4, separation=3.0, rng=0)
    practical = dict(T=200, eta=0.1, c_step_scale=100.0, enforce_step_bound=False, seed=0)
    ppfl = rbcd_run(RunConfig(K=4, lam=0.01, **practical), shards)
    fedavg = run_fedavg(shards, RunConfig(K=1, **practical))
    rate = group_identification_rate(ppfl.final_C, groups)
    gain = ppfl.final_test_metric - fedavg.final_test_metric

    ratios = []
    for seed in (0, 1, 2):
        mix, truth = gen_mixture_synthetic(M=30, K_true=3, d=20, rng=seed)
        K = truth.alpha.shape[1]
        _, gap0 = membership_recovery_gap(np.full((30, K), 1.0 / K), truth.alpha)
        tr = alternating_run(RunConfig(K=K, T=400, eta=0.1, c_step_scale=100.0,
                                       enforce_step_bound=False, seed=seed), mix)
        ratios.append(membership_recovery_gap(tr.final_C, truth.alpha)[1] / gap0)
    elapsed = time.perf_counter() - start
    ok = rate >= 0.9 and gain >= 0.05 and max(ratios) <= 0.5 and elapsed < 180.0
    report(8, "membership recovery", ok,
           f"identification {rate:.2f}, accuracy PPFL {ppfl.final_test_metric:.3f} vs FedAvg "
           f"{fedavg.final_test_metric:.3f}, mixture gap ratios "
           + ", ".join(f"{r:.2f}" for r in ratios) + f", {elapsed:.0f}s")


# ---------------------------------------------------------------------------
# 9. Communication ledger


def test_criterion_09_communication_ledger():
    rng = np.random.default_rng(909)
    M, K, T, d = 4, 3, 12, 5
    checks = []
    for task, n_classes, p in (("regression", 1, d), ("multiclass", 3, d * 3)):
        sh = random_shards(rng, M, 15, d, task, n_classes)
        cfg = RunConfig(K=K, T=T, eta=1e-3, enforce_step_bound=False, seed=4)
        tr = rbcd_run(cfg, sh)
        n1 = sum(r["block"] == 1 for r in tr.rounds)
        n2 = T - n1
        per = n1 * p * K * M + n2 * K * M
        checks.append(tr.ledger_totals() == {"broadcast": per, "upload": per, "sync": per, "total": 3 * per})
        checks.append(0 < n1 < T)

        tr = alternating_run(cfg, sh)
        per = T * (p * K + K) * M
        checks.append(tr.ledger_totals() == {"broadcast": per, "upload": per, "sync": 0, "total": 2 * per})
        ratio = tr.ledger_totals()["broadcast"] / (T * M) / (K * p * K)
        checks.append(ratio == fedsim.replicated_ensemble_ratio(p, K) == (p * K + K) / (K * p * K))
        checks.append(ratio < 1.0)

        tr = run_clustered_fl(sh, cfg)
        b, u = T * K * p * M, T * p * M
        checks.append(tr.ledger_totals() == {"broadcast": b, "upload": u, "sync": 0, "total": b + u})
    ok = all(checks)
    report(9, "communication ledger", ok,
           f"{sum(checks)}/{len(checks)} closed-form checks; ensemble ratio "
           f"{fedsim.replicated_ensemble_ratio(d, K):.4f} at p={d}, K={K}")


# ---------------------------------------------------------------------------
# 10. Output-index sampling


def test_criterion_10_output_index_distribution():
    start = time.perf_counter()
    cfg = RunConfig(K=3, T=20, E=2, eta=0.01, eta_schedule="inv_sqrt", rho=(0.7, 0.3))
    w = output_weights(cfg, SmoothnessEstimates(1.0, 40.0))
    target = w / w.sum()
    draws = sample_output_index(w, RngStream(10), size=100_000)
    empirical = np.bincount(draws, minlength=cfg.T) / draws.size
    tv = 0.5 * float(np.abs(empirical - target).sum())
    elapsed = time.perf_counter() - start
    ok = tv <= 0.01 and elapsed < 5.0 and np.ptp(target) > 0
    report(10, "output-index sampling", ok, f"total variation {tv:.4f} over 1e5 draws, {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# 11. Thread-count independence of the CLI


def test_criterion_11_cli_training_is_deterministic(tmp_path):
    gen = tmp_path / "gen.json"
    gen.write_text(json.dumps({"benchmark": "domain", "M": 8, "groups": 2, "d": 5,
                               "n_per_client": [30, 50], "seed": 2}))
    assert main(["generate", "--config", str(gen), "--out", str(tmp_path / "data")]) == 0
    identical = []
    for algorithm in ("rbcd", "alternating", "fedavg", "local", "clustered"):
        cfg = tmp_path / f"{algorithm}.json"
        cfg.write_text(json.dumps({"algorithm": algorithm, "K": 2, "T": 10, "E": 2, "eta": 0.05,
                                   "batch_size": 8, "lambda": 0.01, "c_step_scale": 10.0,
                                   "enforce_step_bound": False, "seed": 3}))
        outputs = []
        for threads in ("1", "8", "8"):
            out = tmp_path / f"{algorithm}_{threads}_{len(outputs)}"
            code = main(["train", "--config", str(cfg), "--data", str(tmp_path / "data"),
                         "--out", str(out), "--threads", threads])
            assert code == 0
            outputs.append((out / "metrics.csv").read_bytes())
        identical.append(outputs[0] == outputs[1] == outputs[2])
    report(11, "determinism across thread counts", all(identical),
           f"{sum(identical)}/5 algorithms byte-identical with --threads 1 and 8")
