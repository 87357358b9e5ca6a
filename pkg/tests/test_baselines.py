import numpy as np
import pytest

from ppfl.baselines import cluster_assign, run_clustered_fl, run_fedavg, run_local
from ppfl.core import RunConfig, make_shards
from ppfl.datagen import gen_domain_heterogeneous
from ppfl.metrics import group_identification_rate


@pytest.fixture(scope="module")
def domain():
    return gen_domain_heterogeneous(M=8, groups=2, classes_per_group=2, d=6, n_per_client=60, rng=1)


def test_single_client_local_equals_fedavg(domain):
    s = domain[0][0]
    one = make_shards([s.train], [s.test])
    cfg = RunConfig(T=8, eta=0.5, enforce_step_bound=False)
    a, b = run_local(one, cfg), run_fedavg(one, cfg)
    assert a.numeric_signature()[0] == b.numeric_signature()[0]
    np.testing.assert_array_equal(a.final_theta, b.final_theta)


def test_zero_rounds_evaluate_initial_model(domain):
    tr = run_local(domain[0], RunConfig(T=0))
    assert len(tr) == 0 and np.isfinite(tr.final_test_metric)
    assert tr.final_theta.shape[1] == len(domain[0])


def test_local_beats_fedavg_on_heterogeneous_groups(domain):
    cfg = RunConfig(T=60, eta=0.5, enforce_step_bound=False)
    assert run_local(domain[0], cfg).final_test_metric > run_fedavg(domain[0], cfg).final_test_metric + 0.1


def test_clustered_one_cluster_is_fedavg(domain):
    cfg = RunConfig(T=10, eta=0.3, enforce_step_bound=False, batch_size=16)
    a, b = run_clustered_fl(domain[0], cfg, 1), run_fedavg(domain[0], cfg)
    assert a.numeric_signature()[0] == b.numeric_signature()[0]
    np.testing.assert_array_equal(a.final_theta, b.final_theta)


def test_clustered_ledger_and_recovery(domain):
    shards, groups = domain
    cfg = RunConfig(T=40, eta=0.5, enforce_step_bound=False, init_scale=0.5, seed=2)
    tr = run_clustered_fl(shards, cfg, 2)
    p = 6 * 4  # rows of one softmax model: d * n_classes
    assert set(tr.column("broadcast")) == {2 * p * 8}
    assert set(tr.column("upload")) == {p * 8}
    assert group_identification_rate(tr.final_C, groups) == 1.0


def test_empty_cluster_keeps_its_model(domain):
    shards = domain[0]
    theta = np.zeros((shards[0].train.d * 4, 2))
    theta[:, 1] = 50.0  # a model that fits nobody
    assert set(cluster_assign(theta, shards, "prediction")) == {0}
    cfg = RunConfig(T=1, eta=0.1, enforce_step_bound=False, init_scale=0.0)
    tr = run_clustered_fl(shards, cfg, 2)
    # zero init ties: every client joins cluster 0, cluster 1 is carried forward
    assert np.all(tr.final_theta[:, 1] == 0.0) and np.any(tr.final_theta[:, 0] != 0.0)
