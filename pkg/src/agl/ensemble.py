"""Voting and stacking ensembles over trained models."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import List, Sequence

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin

from .autodiff import softmax_np
from .errors import ContractError, NumericalError, ValidationError
from .graph import Graph

__all__ = ["model_identity", "base_probabilities", "vote", "vote_predict", "StackingMeta",
           "stack_fit", "stack_predict", "EnsembleSpec", "VotingEnsemble", "StackingEnsemble"]


def model_identity(model) -> str:
    """Stable identity key: descriptor key plus a digest of the parameter values."""
    h = hashlib.sha1(model.descriptor.key().encode())
    for name, t in model.params.items():
        h.update(name.encode())
        h.update(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
    return h.hexdigest()


def _select(data, indices):
    if isinstance(data, Graph):
        return data, (None if indices is None else np.asarray(indices))
    graphs = list(data) if indices is None else [data[i] for i in np.asarray(indices).tolist()]
    return graphs, None


def base_probabilities(models, data, indices=None):
    """List of ``(rows, C)`` probability matrices, one per model."""
    if not models:
        raise ContractError("no models given")
    C = {m.task.num_classes for m in models}
    if len(C) != 1:
        raise ContractError("models disagree on the number of classes")
    source, rows = _select(data, indices)
    out = []
    for m in models:
        p = m.predict_proba(source)
        out.append(p if rows is None else p[rows])
    return out


def vote(models, data, indices=None):
    """Arithmetic mean of the models' class-probability rows."""
    probs = base_probabilities(models, data, indices)
    # offset form keeps k copies of one model exactly equal to that model
    ref = probs[0]
    return ref + np.sum(np.stack(probs) - ref, axis=0) / len(probs)


def vote_predict(models, data, indices=None):
    """Argmax of :func:`vote`; ties go to the lowest class index."""
    return np.argmax(vote(models, data, indices), axis=1)


@dataclass
class StackingMeta:
    """Multinomial logistic regression on concatenated base probabilities.

    Class 0 is the reference class (its weight column is fixed at zero).
    """

    W: np.ndarray
    keys: tuple
    lam: float
    num_classes: int
    loss_history: List[float] = field(default_factory=list)

    def proba(self, X):
        return softmax_np(np.asarray(X) @ self.W)


def _loss_grad_hess(V, X, Y, lam):
    n, F = X.shape
    C = Y.shape[1]
    W = np.concatenate([np.zeros((F, 1)), V.reshape(F, C - 1)], axis=1)
    Z = X @ W
    Z -= Z.max(axis=1, keepdims=True)
    logp = Z - np.log(np.exp(Z).sum(axis=1, keepdims=True))
    P = np.exp(logp)
    loss = -np.sum(Y * logp) / n + 0.5 * lam * np.sum(V * V)
    G = (X.T @ (P - Y))[:, 1:] / n
    grad = G.ravel() + lam * V
    Pr = P[:, 1:]
    k = C - 1
    H = np.zeros((F * k, F * k))
    for a in range(k):
        for b in range(k):
            s = Pr[:, a] * ((a == b) - Pr[:, b])
            H[a::k, b::k] = (X.T * s) @ X / n
    H += lam * np.eye(F * k)
    return loss, grad, H


def _fit_logistic(X, y, C, lam, max_iter=100, tol=1e-12):
    n, F = X.shape
    if lam < 0:
        raise ContractError("lam must be non-negative")
    if lam == 0 and np.linalg.matrix_rank(X) < F:
        raise NumericalError("stacking design is singular with lam=0; use lam > 0", None)
    Y = np.zeros((n, C))
    Y[np.arange(n), y] = 1.0
    V = np.zeros(F * (C - 1))
    loss, grad, H = _loss_grad_hess(V, X, Y, lam)
    history = [float(loss)]
    for _ in range(max_iter):
        try:
            step = np.linalg.solve(H, grad)
        except np.linalg.LinAlgError as exc:
            raise NumericalError(f"singular Hessian in stacking fit: {exc}", None) from exc
        t = 1.0
        while True:
            cand = V - t * step
            c_loss, c_grad, c_H = _loss_grad_hess(cand, X, Y, lam)
            if c_loss <= loss or t < 1e-12:
                break
            t *= 0.5
        if c_loss > loss:
            break
        V, converged = cand, loss - c_loss <= tol * max(1.0, abs(loss))
        loss, grad, H = c_loss, c_grad, c_H
        history.append(float(loss))
        if converged or np.max(np.abs(grad)) < 1e-12:
            break
    if lam == 0 and np.max(np.abs(grad)) > 1e-6:
        raise NumericalError("stacking fit did not converge with lam=0 (separable data?); "
                             "use lam > 0", float(np.max(np.abs(grad))))
    W = np.concatenate([np.zeros((F, 1)), V.reshape(F, C - 1)], axis=1)
    return W, history


def stack_fit(models, data, val_indices, labels=None, lam=1e-2, max_iter=100):
    """Fit the meta-model on base-model probabilities of the validation items.

    ``labels`` defaults to the labels carried by ``data``.  Validation items
    must not overlap any base model's recorded training indices.
    """
    val_indices = np.asarray(val_indices)
    if val_indices.size == 0:
        raise ContractError("empty validation index")
    for m in models:
        tr = m.train_meta.get("train_index")
        if tr is not None and np.intersect1d(np.asarray(tr), val_indices).size:
            raise ContractError("validation items overlap a base model's training items")
    if labels is None:
        labels = data.y if isinstance(data, Graph) else np.array([g.y for g in data])
    y = np.asarray(labels)[val_indices].astype(np.int64)
    X = np.concatenate(base_probabilities(models, data, val_indices), axis=1)
    C = models[0].task.num_classes
    W, hist = _fit_logistic(X, y, C, lam, max_iter)
    return StackingMeta(W, tuple(model_identity(m) for m in models), lam, C, hist)


def stack_predict(meta: StackingMeta, models, data, indices=None):
    keys = tuple(model_identity(m) for m in models)
    if keys != meta.keys:
        raise ContractError("base models differ from those the meta-model was fitted on "
                            "(identity or order mismatch)")
    X = np.concatenate(base_probabilities(models, data, indices), axis=1)
    return meta.proba(X)


@dataclass
class EnsembleSpec:
    method: str = "voting"
    base_models: Sequence = ()
    meta: str = "glm_logistic"
    lam: float = 1e-2

    def __post_init__(self):
        if self.method not in ("voting", "stacking"):
            raise ContractError(f"unknown ensemble method {self.method!r}")
        if self.meta != "glm_logistic":
            raise ContractError(f"unknown meta-model {self.meta!r}")
        tasks = {(m.task.level, m.task.num_classes) for m in self.base_models}
        if len(tasks) > 1:
            raise ContractError("base models must share a task")

    def to_json(self):
        return {"method": self.method, "meta": self.meta, "lam": self.lam,
                "base_models": [{"identity": model_identity(m), "descriptor": m.descriptor.key()}
                                for m in self.base_models]}


class VotingEnsemble(BaseEstimator, ClassifierMixin):
    """Probability-averaging ensemble over already trained models."""

    def __init__(self, models=()):
        self.models = models

    def fit(self, X=None, y=None):
        if not self.models:
            raise ContractError("no models given")
        self.classes_ = np.arange(self.models[0].task.num_classes)
        return self

    def predict_proba(self, X, index=None):
        return vote(list(self.models), X, index)

    def predict(self, X, index=None):
        return np.argmax(self.predict_proba(X, index), axis=1)


class StackingEnsemble(BaseEstimator, ClassifierMixin):
    """Logistic meta-model over already trained models."""

    def __init__(self, models=(), lam=1e-2):
        self.models = models
        self.lam = lam

    def fit(self, X, val_index, y=None):
        self.meta_ = stack_fit(list(self.models), X, val_index, y, self.lam)
        self.classes_ = np.arange(self.meta_.num_classes)
        return self

    def predict_proba(self, X, index=None):
        if not hasattr(self, "meta_"):
            raise ValidationError("StackingEnsemble is not fitted")
        return stack_predict(self.meta_, list(self.models), X, index)

    def predict(self, X, index=None):
        return np.argmax(self.predict_proba(X, index), axis=1)
