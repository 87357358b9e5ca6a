import warnings

import numpy as np
import pytest

from conftest import random_shards
from ppfl.core import LabeledDataset, RngStream, RunConfig, make_shards
from ppfl.fedsim import (CommLedger, alternating_round_floats, clustered_round_floats, evaluate,
                         rbcd_c_round_floats, rbcd_theta_round_floats, replicated_ensemble_ratio,
                         round_protocol_rbcd)
from ppfl.graph import all_ones
from ppfl.optim import c_update, rbcd_run, theta_aggregate, theta_local_steps


def test_closed_form_counts():
    assert rbcd_theta_round_floats(10, 3, 5) == (150, 150, 150)
    assert rbcd_c_round_floats(3, 5) == (15, 15, 15)
    assert alternating_round_floats(10, 3, 5) == (165, 165, 0)
    assert clustered_round_floats(10, 3, 5) == (150, 50, 0)
    assert replicated_ensemble_ratio(10, 3) == pytest.approx(33 / 90)


def test_ledger_totals():
    led = CommLedger(model_dim=4, K=2, M=3)
    assert led.totals() == {"broadcast": 0, "upload": 0, "sync": 0, "total": 0}
    led.record(1, 2, 3)
    led.record(4, 5, 6)
    assert led.rounds == 2 and led.totals()["total"] == 21


def test_protocol_adds_accounting_only(rng):
    shards = random_shards(rng, 3, 10, 2, "regression")
    cfg = RunConfig(K=2, eta=0.1, lam=0.3)
    theta = rng.standard_normal((2, 2))
    C = rng.dirichlet(np.ones(2), size=3)
    g = all_ones(3)
    th1, C1, f1 = round_protocol_rbcd(theta, C, 1, shards, g, cfg, 0, RngStream(0))
    direct = theta_aggregate(theta, [(s.weight, theta_local_steps(theta, C[i], s.train, 1, 0.1))
                                     for i, s in enumerate(shards)])
    np.testing.assert_allclose(th1, direct, rtol=1e-15)
    assert C1 is C and f1 == (12, 12, 12)
    th2, C2, f2 = round_protocol_rbcd(theta, C, 2, shards, g, cfg, 0, RngStream(0))
    np.testing.assert_array_equal(C2, c_update(C, theta, shards, g, 0.3, 0.1))
    assert th2 is theta and f2 == (6, 6, 6)


def test_run_ledger_matches_block_counts(rng):
    shards = random_shards(rng, 5, 10, 4, "binary")
    tr = rbcd_run(RunConfig(K=3, T=30, eta=1e-3), shards)
    blocks = tr.column("block")
    n1, n2 = int((blocks == 1).sum()), int((blocks == 2).sum())
    tot = tr.ledger_totals()
    assert tot["broadcast"] == n1 * 4 * 3 * 5 + n2 * 3 * 5
    assert tot["total"] == 3 * tot["broadcast"]


def test_evaluate_accuracy_and_mse():
    X = np.array([[1.0], [-1.0], [2.0], [-2.0]])
    y = np.array([1, 0, 1, 0])
    ds = LabeledDataset(X, y, "binary")
    shards = make_shards([ds, ds], [ds, ds], [0.3, 0.7])
    res = evaluate(np.array([[5.0]]), np.ones((2, 1)), shards)
    assert res["weighted"] == 1.0 and res["mean"] == 1.0 and res["metric"] == "accuracy"
    reg = LabeledDataset(X, np.zeros(4))
    single = make_shards([reg], [reg])
    r = evaluate(np.array([[1.0]]), np.ones((1, 1)), single)
    assert r["weighted"] == r["mean"] == pytest.approx(np.mean(X[:, 0] ** 2))


def test_constant_half_predictor_on_random_labels(rng):
    y = rng.integers(0, 2, 1000)
    ds = LabeledDataset(rng.standard_normal((1000, 1)), y, "binary")
    res = evaluate(np.zeros((1, 1)), np.ones((1, 1)), make_shards([ds], [ds]))
    assert abs(res["weighted"] - 0.5) <= 0.05


def test_empty_test_split_is_excluded_with_warning():
    ds = LabeledDataset(np.ones((3, 1)), np.ones(3))
    none = LabeledDataset(np.zeros((0, 1)), np.zeros(0))
    shards = make_shards([ds, ds], [ds, none])
    with pytest.warns(RuntimeWarning, match="client 1"):
        res = evaluate(np.ones((1, 1)), np.ones((2, 1)), shards)
    assert np.isnan(res["per_client"][1]) and res["weighted"] == 0.0
