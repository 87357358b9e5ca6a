"""GLM canonical models: predictions, local losses and analytic gradients.

Three ways of combining the K canonical models for client ``i`` with
membership vector ``c``:

* ``"prediction"``: mix the inverse-link outputs, ``sum_k c_k g^-1(x'theta_k)``;
* ``"parameter"``: mix the coefficients, ``g^-1(x' theta c)``;
* ``"loss"``: mix the per-model negative log-likelihoods.

Multiclass models store one ``d x C`` coefficient block per canonical model,
flattened row-major into a column of ``theta`` (shape ``d*C x K``).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import LabeledDataset

LOGIT_CLAMP = 30.0
LINKS = {"regression": "identity", "binary": "logit", "multiclass": "softmax"}


@dataclass(frozen=True)
class CanonicalEnsemble:
    theta: np.ndarray
    link: str = "identity"
    n_classes: int = 1

    def __post_init__(self):
        theta = np.asarray(self.theta, dtype=np.float64)
        if theta.ndim != 2:
            raise ValueError("theta must be a (p, K) matrix")
        if not np.all(np.isfinite(theta)):
            raise ValueError("theta has non-finite entries")
        if self.link not in ("identity", "logit", "softmax"):
            raise ValueError(f"unknown link {self.link!r}")
        object.__setattr__(self, "theta", theta)

    @property
    def K(self) -> int:
        return self.theta.shape[1]

    @property
    def d(self) -> int:
        return self.theta.shape[0] // (self.n_classes if self.link == "softmax" else 1)


def link_for(task: str) -> str:
    return LINKS[task]


def param_rows(d: int, task: str, n_classes: int) -> int:
    return d * n_classes if task == "multiclass" else d


def _theta_of(ens) -> np.ndarray:
    return ens.theta if isinstance(ens, CanonicalEnsemble) else np.asarray(ens, dtype=np.float64)


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _softplus(z):
    return np.logaddexp(0.0, z)


def _clamp(z):
    return np.clip(z, -LOGIT_CLAMP, LOGIT_CLAMP), (np.abs(z) <= LOGIT_CLAMP)


def _softmax(z, axis=-1):
    e = np.exp(z - z.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def _logsumexp(z, axis=-1):
    m = z.max(axis=axis, keepdims=True)
    return (m + np.log(np.exp(z - m).sum(axis=axis, keepdims=True))).squeeze(axis)


def _check(theta, c, data: LabeledDataset):
    c = np.asarray(c, dtype=np.float64).reshape(-1)
    K = theta.shape[1]
    if c.shape[0] != K:
        raise ValueError(f"membership vector has length {c.shape[0]}, expected K={K}")
    rows = param_rows(data.d, data.task, data.n_classes)
    if theta.shape[0] != rows:
        raise ValueError(f"theta has {theta.shape[0]} rows, expected {rows}")
    if data.n == 0:
        raise ValueError("empty shard")
    return c


def value_and_grads(ens, c, data: LabeledDataset, arch: str = "prediction",
                    want_theta: bool = True, want_c: bool = True):
    """Mean local loss and its gradients w.r.t. theta (p x K) and c (K,).

    Gradients not requested are returned as ``None``.
    """
    theta = _theta_of(ens)
    c = _check(theta, c, data)
    if data.task == "regression":
        return _identity(theta, c, data, arch, want_theta, want_c)
    if data.task == "binary":
        return _logit(theta, c, data, arch, want_theta, want_c)
    return _softmax_loss(theta, c, data, arch, want_theta, want_c)


def _identity(theta, c, data, arch, want_theta, want_c):
    X, y, n = data.X, data.y, data.n
    Z = X @ theta
    gt = gc = None
    if arch == "loss":
        R = Z - y[:, None]
        per_model = 0.5 * np.mean(R * R, axis=0)
        loss = float(per_model @ c)
        if want_theta:
            gt = (X.T @ R / n) * c[None, :]
        if want_c:
            gc = per_model
        return loss, gt, gc
    yhat = Z @ c if arch == "prediction" else X @ (theta @ c)
    r = yhat - y
    loss = 0.5 * float(np.mean(r * r))
    if want_theta:
        gt = np.outer(X.T @ r / n, c)
    if want_c:
        gc = Z.T @ r / n
    return loss, gt, gc


def _logit(theta, c, data, arch, want_theta, want_c):
    X, y, n = data.X, data.y.astype(np.float64), data.n
    gt = gc = None
    if arch == "parameter":
        Z = X @ theta
        zc, mask = _clamp(X @ (theta @ c))
        loss = float(np.mean(_softplus(zc) - y * zc))
        g = (_sigmoid(zc) - y) * mask
        if want_theta:
            gt = np.outer(X.T @ g / n, c)
        if want_c:
            gc = Z.T @ g / n
        return loss, gt, gc
    Zc, mask = _clamp(X @ theta)
    S = _sigmoid(Zc)
    if arch == "loss":
        per_sample = _softplus(Zc) - y[:, None] * Zc
        per_model = per_sample.mean(axis=0)
        loss = float(per_model @ c)
        if want_theta:
            gt = (X.T @ ((S - y[:, None]) * mask) / n) * c[None, :]
        if want_c:
            gc = per_model
        return loss, gt, gc
    yhat = S @ c
    loss = float(np.mean(-y * np.log(yhat) - (1.0 - y) * np.log(1.0 - yhat)))
    dl = -y / yhat + (1.0 - y) / (1.0 - yhat)
    if want_theta:
        gt = X.T @ (dl[:, None] * S * (1.0 - S) * mask * c[None, :]) / n
    if want_c:
        gc = S.T @ dl / n
    return loss, gt, gc


def _softmax_loss(theta, c, data, arch, want_theta, want_c):
    X, y, n = data.X, data.y, data.n
    C = data.n_classes
    K = theta.shape[1]
    d = X.shape[1]
    blocks = theta.T.reshape(K, d, C)
    Y = np.zeros((n, C))
    Y[np.arange(n), y] = 1.0
    gt = gc = None
    if arch == "parameter":
        Zk = np.einsum("nd,kdc->knc", X, blocks)
        zc, mask = _clamp(X @ (theta @ c).reshape(d, C))
        loss = float(np.mean(_logsumexp(zc) - zc[np.arange(n), y]))
        G = (_softmax(zc) - Y) * mask
        if want_theta:
            base = (X.T @ G / n).reshape(-1)
            gt = np.outer(base, c)
        if want_c:
            gc = np.einsum("knc,nc->k", Zk, G) / n
        return loss, gt, gc
    Zc, mask = _clamp(np.einsum("nd,kdc->knc", X, blocks))
    P = _softmax(Zc)
    if arch == "loss":
        per_sample = _logsumexp(Zc) - Zc[:, np.arange(n), y]
        per_model = per_sample.mean(axis=1)
        loss = float(per_model @ c)
        if want_theta:
            G = (P - Y[None]) * mask * c[:, None, None]
            gt = np.einsum("nd,knc->kdc", X, G).reshape(K, -1).T / n
        if want_c:
            gc = per_model
        return loss, gt, gc
    py = P[:, np.arange(n), y]
    yhat = c @ py
    loss = float(-np.mean(np.log(yhat)))
    if want_theta:
        wts = c[:, None] * py / yhat[None, :]
        G = wts[:, :, None] * (P - Y[None]) * mask
        gt = np.einsum("nd,knc->kdc", X, G).reshape(K, -1).T / n
    if want_c:
        gc = -(py / yhat[None, :]).mean(axis=1)
    return loss, gt, gc


def local_loss(ens, c, shard: LabeledDataset, arch: str = "prediction") -> float:
    return value_and_grads(ens, c, shard, arch, want_theta=False, want_c=False)[0]


def grad_theta(ens, c, batch: LabeledDataset, arch: str = "prediction") -> np.ndarray:
    return value_and_grads(ens, c, batch, arch, want_theta=True, want_c=False)[1]


def grad_c(ens, c, batch: LabeledDataset, arch: str = "prediction") -> np.ndarray:
    return value_and_grads(ens, c, batch, arch, want_theta=False, want_c=True)[2]


def predict(ens: CanonicalEnsemble, c, x, arch: str = "prediction") -> np.ndarray:
    """Personalized prediction for one feature vector or a batch of rows.

    Regression returns the mean response, binary the probability of class 1
    and multiclass a probability vector. The loss mixture has no prediction
    rule of its own and predicts like the prediction mixture.
    """
    theta = ens.theta
    c = np.asarray(c, dtype=np.float64).reshape(-1)
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    X = x[None, :] if single else x
    if c.shape[0] != theta.shape[1]:
        raise ValueError("membership vector length does not match K")
    if X.shape[1] != ens.d:
        raise ValueError(f"feature vector has length {X.shape[1]}, expected {ens.d}")
    mix_params = arch == "parameter"
    if ens.link == "identity":
        out = X @ (theta @ c) if mix_params else (X @ theta) @ c
    elif ens.link == "logit":
        if mix_params:
            out = _sigmoid(_clamp(X @ (theta @ c))[0])
        else:
            out = _sigmoid(_clamp(X @ theta)[0]) @ c
    else:
        C = ens.n_classes
        if mix_params:
            out = _softmax(_clamp(X @ (theta @ c).reshape(ens.d, C))[0])
        else:
            blocks = theta.T.reshape(theta.shape[1], ens.d, C)
            P = _softmax(_clamp(np.einsum("nd,kdc->knc", X, blocks))[0])
            out = np.einsum("k,knc->nc", c, P)
    return out[0] if single else out


def predict_labels(ens: CanonicalEnsemble, c, X, arch: str = "prediction") -> np.ndarray:
    out = predict(ens, c, X, arch)
    if ens.link == "identity":
        return out
    if ens.link == "logit":
        return (out >= 0.5).astype(np.int64)
    return np.argmax(out, axis=-1)
