import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.optimize import minimize

from agl.autodiff import softmax_np
from agl.ensemble import (EnsembleSpec, StackingEnsemble, VotingEnsemble, model_identity,
                          stack_fit, stack_predict, vote, vote_predict)
from agl.errors import ContractError, NumericalError
from agl.estimation import Dataset, TrainConfig, evaluate_full
from agl.gnn import ArchitectureDescriptor, MicroChoice, gat_descriptor, gcn_descriptor
from agl.graph import Graph, TaskSpec, generate_sbm


class FixedModel:
    """Stand-in exposing fixed class probabilities through the model interface."""

    def __init__(self, probs, tag=0):
        self.probs = np.asarray(probs, dtype=float)
        self.task = TaskSpec("node", self.probs.shape[1])
        self.descriptor = ArchitectureDescriptor((MicroChoice(dim=4 + tag),))
        self.params = _Params(self.probs)
        self.train_meta = {}

    def predict_proba(self, data):
        return self.probs


class _Params:
    def __init__(self, data):
        self.data = data

    def items(self):
        return [("p", self)]


def graph(n):
    return Graph.from_edges(n, [], x=np.zeros((n, 1)), y=np.zeros(n, dtype=int))


def test_vote_examples():
    g = graph(1)
    p = vote([FixedModel([[1.0, 0.0]]), FixedModel([[0.0, 1.0]])], g)
    np.testing.assert_allclose(p, [[0.5, 0.5]])
    assert vote_predict([FixedModel([[1.0, 0.0]]), FixedModel([[0.0, 1.0]])], g)[0] == 0
    q = [[0.2, 0.5, 0.3]]
    np.testing.assert_allclose(vote([FixedModel(q), FixedModel(q)], g), q)
    with pytest.raises(ContractError):
        vote([], g)
    with pytest.raises(ContractError):
        vote([FixedModel([[1.0, 0.0]]), FixedModel([[1.0, 0.0, 0.0]])], g)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), k=st.integers(1, 5))
def test_vote_invariants(seed, k):
    rng = np.random.default_rng(seed)
    g = graph(6)
    models = [FixedModel(softmax_np(rng.standard_normal((6, 3)) * 3), i) for i in range(k)]
    p = vote(models, g)
    assert np.max(np.abs(p.sum(axis=1) - 1)) <= 1e-12 and np.all(p >= 0)
    perm = rng.permutation(k)
    np.testing.assert_allclose(vote([models[i] for i in perm], g), p, atol=1e-12)
    copies = vote([models[0]] * k, g)
    np.testing.assert_array_equal(copies, models[0].probs)


def _stack_fixture(seed=0, n=40, F_models=2, C=3):
    rng = np.random.default_rng(seed)
    g = graph(n)
    g.y = rng.integers(0, C, n)
    models = [FixedModel(softmax_np(rng.standard_normal((n, C)) + 1.5 * np.eye(C)[g.y]), i)
              for i in range(F_models)]
    return g, models


def _irls_binary(X, y, lam, iters=100):
    """Textbook Newton/IRLS for ridge logistic regression (mean loss)."""
    n, F = X.shape
    w = np.zeros(F)
    for _ in range(iters):
        p = 1 / (1 + np.exp(-X @ w))
        S = p * (1 - p)
        H = (X.T * S) @ X / n + lam * np.eye(F)
        w = w - np.linalg.solve(H, X.T @ (p - y) / n + lam * w)
    return w


def test_stacking_matches_irls_oracle_binary():
    g, models = _stack_fixture(1, n=50, C=2)
    val = np.arange(50)
    meta = stack_fit(models, g, val, lam=0.05)
    X = np.concatenate([m.probs for m in models], axis=1)
    w = _irls_binary(X, g.y, 0.05)
    np.testing.assert_allclose(meta.W[:, 1], w, atol=1e-6)
    np.testing.assert_array_equal(meta.W[:, 0], 0.0)


def test_stacking_matches_direct_minimiser_multiclass():
    g, models = _stack_fixture(2, n=60, C=3)
    val = np.arange(60)
    meta = stack_fit(models, g, val, lam=0.1)
    X = np.concatenate([m.probs for m in models], axis=1)
    Y = np.eye(3)[g.y]

    def f(v):
        W = np.concatenate([np.zeros((X.shape[1], 1)), v.reshape(X.shape[1], 2)], axis=1)
        Z = X @ W
        lse = np.log(np.exp(Z - Z.max(1, keepdims=True)).sum(1)) + Z.max(1)
        return -np.sum(Y * Z) / 60 + np.sum(lse) / 60 + 0.05 * np.sum(v * v)
    res = minimize(f, np.zeros(X.shape[1] * 2), method="BFGS", options={"gtol": 1e-11})
    W = np.concatenate([np.zeros((X.shape[1], 1)), res.x.reshape(X.shape[1], 2)], axis=1)
    np.testing.assert_allclose(meta.proba(X), softmax_np(X @ W), atol=1e-6)


def test_constant_probabilities_predict_majority():
    n = 30
    g = graph(n)
    g.y = np.array([2] * 15 + [0] * 9 + [1] * 6)
    models = [FixedModel(np.tile([0.3, 0.3, 0.4], (n, 1)), i) for i in range(2)]
    meta = stack_fit(models, g, np.arange(n), lam=1e-2)
    pred = np.argmax(stack_predict(meta, models, g), axis=1)
    assert np.all(pred == 2)


def test_meta_loss_non_increasing():
    g, models = _stack_fixture(3)
    meta = stack_fit(models, g, np.arange(40), lam=1e-2)
    assert len(meta.loss_history) > 1
    assert all(b <= a for a, b in zip(meta.loss_history, meta.loss_history[1:]))


def test_singular_design_lambda_zero():
    n = 20
    g = graph(n)
    g.y = np.arange(n) % 2
    rng = np.random.default_rng(0)
    p = softmax_np(rng.standard_normal((n, 2)))
    # rows of probabilities sum to one, so two models' columns are collinear
    models = [FixedModel(p, 0), FixedModel(p, 1)]
    with pytest.raises(NumericalError, match="lam > 0"):
        stack_fit(models, g, np.arange(n), lam=0.0)


def test_identity_keys_guard_order():
    g, models = _stack_fixture(4)
    meta = stack_fit(models, g, np.arange(40))
    with pytest.raises(ContractError):
        stack_predict(meta, models[::-1], g)
    assert model_identity(models[0]) != model_identity(models[1])


def test_stack_predict_permutation_and_distribution():
    g, models = _stack_fixture(5)
    meta = stack_fit(models, g, np.arange(20))
    idx = np.arange(20, 40)
    perm = np.random.default_rng(0).permutation(idx.size)
    a = stack_predict(meta, models, g, idx)
    b = stack_predict(meta, models, g, idx[perm])
    np.testing.assert_array_equal(b[np.argsort(perm)], a)
    assert np.max(np.abs(a.sum(axis=1) - 1)) <= 1e-9


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_stack_outputs_are_distributions(seed):
    g, models = _stack_fixture(seed, n=25)
    meta = stack_fit(models, g, np.arange(25), lam=0.01)
    rng = np.random.default_rng(seed)
    X = rng.random((10, meta.W.shape[0])) * 50
    p = meta.proba(X)
    assert np.max(np.abs(p.sum(axis=1) - 1)) <= 1e-9


def _trained(ds, desc, seed):
    return evaluate_full(None, ds, TrainConfig(epochs=100, seed=seed), desc)[1]


def test_val_overlapping_training_rejected():
    ds = Dataset(*generate_sbm(60, 3, 0.3, 0.02, seed=0))
    m = _trained(ds, gcn_descriptor(), 0)
    with pytest.raises(ContractError):
        stack_fit([m], ds.data, ds.split.train[:5])


def test_single_model_stacking_tracks_base():
    # 300 test nodes so one item is worth a third of a point
    ds = Dataset(*generate_sbm(1500, 3, 0.01, 0.004, seed=0, noise=1.0))
    m = _trained(ds, gcn_descriptor(), 0)
    meta = stack_fit([m], ds.data, ds.split.val, lam=1e-8)
    test = ds.split.test
    y = ds.labels[test]
    base = np.mean(np.argmax(m.predict_proba(ds.data)[test], axis=1) == y)
    stacked = np.mean(np.argmax(stack_predict(meta, [m], ds.data, test), axis=1) == y)
    assert abs(stacked - base) * 100 <= 1.0


def test_sklearn_wrappers_and_spec():
    ds = Dataset(*generate_sbm(60, 3, 0.3, 0.02, seed=0))
    models = [_trained(ds, gcn_descriptor(), 0), _trained(ds, gat_descriptor(), 1)]
    v = VotingEnsemble(models).fit()
    np.testing.assert_allclose(v.predict_proba(ds.data), vote(models, ds.data))
    s = StackingEnsemble(models).fit(ds.data, ds.split.val)
    assert s.predict(ds.data, ds.split.test).shape == (ds.split.test.size,)
    spec = EnsembleSpec("stacking", models)
    blob = json.loads(json.dumps(spec.to_json()))
    assert [b["identity"] for b in blob["base_models"]] == [model_identity(m) for m in models]
    with pytest.raises(ContractError):
        EnsembleSpec("boosting", models)
