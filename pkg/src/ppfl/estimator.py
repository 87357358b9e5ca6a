"""scikit-learn style wrappers around PPFL training.

Samples carry a client id (``groups``); ``fit`` builds one shard per client
and trains canonical models plus membership vectors, ``predict`` routes each
row through its client's personalized model.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, RegressorMixin
from sklearn.utils.multiclass import check_classification_targets
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .core import LabeledDataset, RunConfig, make_shards
from .fedsim import normalized_weights
from .model import CanonicalEnsemble, link_for, predict
from .optim import alternating_run, rbcd_run

_RUNNERS = {"rbcd": rbcd_run, "alternating": alternating_run}


class _PPFLBase(BaseEstimator):
    def __init__(self, K=3, T=100, E=1, eta=0.01, lam=0.0, rho=(0.5, 0.5), architecture="prediction",
                 algorithm="rbcd", c_step_scale=1.0, enforce_step_bound=True, seed=0, graph=None):
        self.K = K
        self.T = T
        self.E = E
        self.eta = eta
        self.lam = lam
        self.rho = rho
        self.architecture = architecture
        self.algorithm = algorithm
        self.c_step_scale = c_step_scale
        self.enforce_step_bound = enforce_step_bound
        self.seed = seed
        self.graph = graph

    def _run_config(self) -> RunConfig:
        if self.algorithm not in _RUNNERS:
            raise ValueError(f"algorithm must be one of {sorted(_RUNNERS)}")
        return RunConfig(K=self.K, T=self.T, E=self.E, eta=self.eta, lam=self.lam, rho=tuple(self.rho),
                         architecture=self.architecture, algorithm=self.algorithm,
                         c_step_scale=self.c_step_scale, enforce_step_bound=self.enforce_step_bound,
                         seed=self.seed)

    def _fit_shards(self, X, y, groups, task, n_classes):
        if groups is None:
            raise ValueError("groups (client id per sample) is required")
        groups = np.asarray(groups)
        if groups.shape[0] != X.shape[0]:
            raise ValueError("groups must have one entry per sample")
        self.clients_ = np.unique(groups)
        data = [LabeledDataset(X[groups == g], y[groups == g], task, n_classes) for g in self.clients_]
        empty_test = [LabeledDataset(np.zeros((0, X.shape[1])), np.zeros(0), task, n_classes)
                      for _ in self.clients_]
        sizes = np.array([d.n for d in data], dtype=np.float64)
        shards = make_shards(data, empty_test, normalized_weights(sizes))
        traj = _RUNNERS[self.algorithm](self._run_config(), shards, self.graph)
        self.theta_ = traj.final_theta
        self.C_ = traj.final_C
        self.trajectory_ = traj
        self.n_features_in_ = X.shape[1]
        self._link = link_for(task)
        self._n_classes = n_classes
        return self

    def _client_rows(self, groups):
        groups = np.asarray(groups)
        index = {g: i for i, g in enumerate(self.clients_)}
        unknown = sorted({g for g in groups.tolist() if g not in index})
        if unknown:
            raise ValueError(f"unknown client ids: {unknown[:5]}")
        return np.array([index[g] for g in groups.tolist()], dtype=np.int64)

    def _raw_predict(self, X, groups):
        check_is_fitted(self, "theta_")
        X = check_array(X)
        if groups is None:
            raise ValueError("groups (client id per sample) is required")
        rows = self._client_rows(groups)
        ens = CanonicalEnsemble(self.theta_, self._link, self._n_classes)
        out = None
        for i in np.unique(rows):
            mask = rows == i
            pred = predict(ens, self.C_[i], X[mask], self.architecture)
            if out is None:
                out = np.zeros((X.shape[0],) + np.shape(pred)[1:])
            out[mask] = pred
        return out

    @property
    def memberships_(self):
        check_is_fitted(self, "C_")
        return self.C_


class PPFLRegressor(RegressorMixin, _PPFLBase):
    """Linear-Gaussian PPFL; ``predict`` returns personalized means."""

    def fit(self, X, y, groups=None):
        X, y = check_X_y(X, y, y_numeric=True)
        return self._fit_shards(X, y.astype(np.float64), groups, "regression", 1)

    def predict(self, X, groups=None):
        return self._raw_predict(X, groups)

    def score(self, X, y, groups=None, sample_weight=None):
        from sklearn.metrics import r2_score
        return r2_score(y, self.predict(X, groups), sample_weight=sample_weight)


class PPFLClassifier(ClassifierMixin, _PPFLBase):
    """Logistic (two classes) or softmax PPFL over arbitrary class labels."""

    def fit(self, X, y, groups=None):
        X, y = check_X_y(X, y)
        check_classification_targets(y)
        self.classes_, codes = np.unique(y, return_inverse=True)
        n = len(self.classes_)
        if n < 2:
            raise ValueError("need at least two classes")
        return self._fit_shards(X, codes, groups, "binary" if n == 2 else "multiclass", n)

    def predict_proba(self, X, groups=None):
        out = self._raw_predict(X, groups)
        if out.ndim == 1:
            return np.column_stack([1.0 - out, out])
        return out

    def predict(self, X, groups=None):
        return self.classes_[np.argmax(self.predict_proba(X, groups), axis=1)]

    def score(self, X, y, groups=None, sample_weight=None):
        from sklearn.metrics import accuracy_score
        return accuracy_score(y, self.predict(X, groups), sample_weight=sample_weight)
