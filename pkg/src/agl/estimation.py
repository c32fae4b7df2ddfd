"""Training and performance estimation: full, reduced fidelity, fast score, inheritance."""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, replace
from typing import Optional, Sequence, Union

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin

from . import autodiff as ad
from .errors import BudgetExpired, ContractError, ValidationError
from .graph import DatasetSplit, Graph, TaskSpec, batch_graphs
from .gnn import ArchitectureDescriptor, GraphContext, TrainedModel, assemble_model
from .trials import TrialRecord

__all__ = [
    "TrainConfig", "Dataset", "train_model", "evaluate_model", "evaluate_full",
    "evaluate_low_fidelity", "hesga_fast_score", "inherit_weights", "GNNClassifier",
    "Estimator", "TableEstimator",
]

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.01
    weight_decay: float = 5e-4
    dropout: float = 0.5
    epochs: int = 200
    patience: int = 50
    seed: int = 0
    fidelity: str = "full"

    def __post_init__(self):
        if self.epochs < 1:
            raise ContractError("epochs must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ContractError("dropout must lie in [0, 1)")
        if self.lr <= 0:
            raise ContractError("lr must be positive")
        if self.patience < 1:
            raise ContractError("patience must be >= 1")
        if self.patience > self.epochs:
            object.__setattr__(self, "patience", self.epochs)

    def with_hyper(self, hyper):
        """Copy with hyper-parameter decisions (lr, weight_decay, dropout, epochs) applied."""
        kw = {k: hyper[k] for k in ("lr", "weight_decay", "dropout", "epochs") if k in hyper}
        if "epochs" in kw:
            kw["epochs"] = int(kw["epochs"])
            kw["patience"] = min(self.patience, kw["epochs"])
        return replace(self, **kw)

    def to_json(self):
        return {"lr": self.lr, "weight_decay": self.weight_decay, "dropout": self.dropout,
                "epochs": self.epochs, "patience": self.patience, "seed": self.seed,
                "fidelity": self.fidelity}


class Dataset:
    """A node-level graph or a list of graphs, its split and task."""

    def __init__(self, data: Union[Graph, Sequence[Graph]], split: DatasetSplit,
                 task: Optional[TaskSpec] = None, graph_id="full"):
        self.data = data
        self.split = split
        self.graph_id = graph_id
        self.level = "node" if isinstance(data, Graph) else "graph"
        labels = self.labels
        if task is None:
            task = TaskSpec(self.level, max(2, int(labels.max()) + 1))
        if task.level != self.level:
            raise ContractError(f"task level {task.level} does not match {self.level} data")
        self.task = task
        n = data.num_nodes if self.level == "node" else len(data)
        split.check(n, supervised=False)
        self._ctx = {}

    @property
    def labels(self):
        if self.level == "node":
            if self.data.y is None:
                raise ContractError("graph carries no node labels")
            return np.asarray(self.data.y)
        return np.array([g.y for g in self.data], dtype=np.int64)

    @property
    def in_dim(self):
        g = self.data if self.level == "node" else self.data[0]
        return g.num_features

    def part(self, name, index=None):
        """``(context, row_index_into_logits, labels)`` for a split part."""
        idx = getattr(self.split, name) if index is None else np.asarray(index)
        if self.level == "node":
            return GraphContext.of(self.data), idx, self.labels
        key = (name, idx.tobytes())
        if key not in self._ctx:
            b = batch_graphs([self.data[i] for i in idx.tolist()])
            self._ctx[key] = GraphContext(b.graph, b.graph_index, b.num_graphs)
        return self._ctx[key], np.arange(idx.size), self.labels[idx]

    def with_split(self, split):
        return Dataset(self.data, split, self.task, self.graph_id)


def _accuracy(logits, rows, labels):
    if rows.size == 0:
        return 0.0
    pred = np.argmax(logits[rows], axis=1)
    return float(np.mean(pred == labels[rows]))


def evaluate_model(model: TrainedModel, ds: Dataset, part="test", index=None):
    ctx, rows, labels = ds.part(part, index)
    logits = model.forward(ctx).data
    return _accuracy(logits, rows, labels), float(ad.cross_entropy(logits, labels, rows).data) \
        if rows.size else float("nan")


def train_model(model: TrainedModel, ds: Dataset, cfg: TrainConfig, train_index=None,
                epoch_cap=None, early_stopping=True):
    """Adam training with early stopping on validation accuracy.

    Parameters of the best validation epoch (ties broken by lower validation
    loss, then by the earlier epoch) are restored at the end.  Returns a
    dict with ``epochs_run``, ``best_epoch``, ``best_val``, ``train_loss``
    and ``status`` (``ok`` or ``diverged``).
    """
    rng = np.random.default_rng([cfg.seed, 7919])
    epochs = cfg.epochs if epoch_cap is None else min(cfg.epochs, int(epoch_cap))
    tr_ctx, tr_rows, tr_labels = ds.part("train", train_index)
    if tr_rows.size == 0:
        raise ContractError("empty training set")
    val_ctx, val_rows, val_labels = ds.part("val")
    have_val = val_rows.size > 0
    best = (-1.0, -math.inf)
    best_state, best_epoch = model.params.snapshot(), -1
    last_loss = float("nan")
    epochs_run = 0
    status = "ok"
    for epoch in range(epochs):
        model.params.zero_grad()
        logits = model.forward(tr_ctx, training=True, dropout=cfg.dropout, rng=rng)
        loss = ad.cross_entropy(logits, tr_labels, tr_rows)
        epochs_run = epoch + 1
        if not np.isfinite(loss.data):
            status = "diverged"
            break
        ad.backward(loss)
        ad.adam_step(model.params, model.params.grads(), cfg.lr, weight_decay=cfg.weight_decay)
        last_loss = float(loss.data)
        if not all(np.isfinite(p.data).all() for _, p in model.params.items()):
            status = "diverged"
            break
        if have_val:
            vl = model.forward(val_ctx).data
            acc = _accuracy(vl, val_rows, val_labels)
            vloss = float(ad.cross_entropy(vl, val_labels, val_rows).data)
            score = (acc, -vloss if np.isfinite(vloss) else -math.inf)
        else:
            score = (0.0, -last_loss)
        if score > best:
            best, best_state, best_epoch = score, model.params.snapshot(), epoch
        elif early_stopping and epoch - best_epoch >= cfg.patience:
            break
    if best_epoch >= 0:
        model.params.load(best_state)
    meta = {"epochs_run": epochs_run, "best_epoch": best_epoch, "best_val": best[0],
            "train_loss": last_loss, "status": status, "seed": cfg.seed,
            "train_index": ds.split.train if train_index is None else np.asarray(train_index)}
    model.train_meta.update(meta)
    return meta


def _descriptor_for(assignment, descriptor):
    if assignment is not None and getattr(assignment, "space", None) is not None \
            and assignment.space.base is not None:
        return assignment.descriptor
    if descriptor is None:
        raise ContractError("no architecture: assignment has no descriptor and none was given")
    hyper = dict(assignment or {})
    if "hidden_dim" in hyper:
        layers = tuple(replace(m, dim=int(hyper["hidden_dim"])) for m in descriptor.layers)
        descriptor = ArchitectureDescriptor(layers, descriptor.macro, descriptor.readout)
    return descriptor


def _check_assignment(assignment):
    space = getattr(assignment, "space", None)
    if space is not None:
        bad = space.violations(assignment)
        if bad:
            raise ContractError(f"invalid assignment: {', '.join(bad)}")


def evaluate_full(assignment, ds: Dataset, cfg: TrainConfig, descriptor=None, ledger=None,
                  init_params=None):
    """Train to convergence (early stopping) and report val/test at the restored checkpoint.

    Returns ``(TrialRecord, TrainedModel)``.
    """
    return _evaluate(assignment, ds, cfg, descriptor, ledger, init_params=init_params)


def evaluate_low_fidelity(assignment, ds: Dataset, cfg: TrainConfig, epoch_cap, data_fraction,
                          descriptor=None, ledger=None):
    """Train on a seeded ``ceil(data_fraction * |train|)`` subsample for ``<= epoch_cap`` epochs."""
    if epoch_cap < 1:
        raise ContractError("epoch_cap must be >= 1")
    if not 0.0 < data_fraction <= 1.0:
        raise ContractError("data_fraction must lie in (0, 1]")
    train = ds.split.train
    k = int(math.ceil(data_fraction * train.size))
    if k == 0:
        raise ContractError("training subsample is empty")
    if k < train.size:
        rng = np.random.default_rng([cfg.seed, 104729])
        sub = np.sort(rng.choice(train, size=k, replace=False))
    else:
        sub = train
    fid = "full" if (k == train.size and epoch_cap >= cfg.epochs) \
        else f"low(epochs={int(epoch_cap)},data={data_fraction:g})"
    rec, _ = _evaluate(assignment, ds, cfg, descriptor, ledger, train_index=sub,
                       epoch_cap=epoch_cap, fidelity=fid)
    return rec


def _evaluate(assignment, ds, cfg, descriptor, ledger, train_index=None, epoch_cap=None,
              fidelity="full", init_params=None):
    _check_assignment(assignment)
    cfg = cfg.with_hyper(assignment or {})
    desc = _descriptor_for(assignment, descriptor)
    t0 = time.perf_counter()
    model = assemble_model(desc, ds.task, ds.in_dim, seed=cfg.seed)
    if init_params is not None:
        model.params.load(init_params.snapshot() if isinstance(init_params, ad.ParamStore)
                          else init_params)
    meta = train_model(model, ds, cfg, train_index=train_index, epoch_cap=epoch_cap)
    if meta["status"] != "ok":
        rec = TrialRecord(assignment, fidelity, cfg.seed, 0.0, None, None,
                          time.perf_counter() - t0, meta["epochs_run"], status="failed",
                          reason="diverged", graph_id=ds.graph_id)
    else:
        val, _ = evaluate_model(model, ds, "val")
        test = evaluate_model(model, ds, "test")[0] if ds.split.test.size else None
        rec = TrialRecord(assignment, fidelity, cfg.seed, val, test, meta["train_loss"],
                          time.perf_counter() - t0, meta["epochs_run"], graph_id=ds.graph_id,
                          extra={"best_epoch": meta["best_epoch"]})
    if ledger is not None:
        rec = ledger.append(rec)
    return rec, model


def hesga_fast_score(assignment, ds: Dataset, cfg: TrainConfig, k_epochs=5, descriptor=None):
    """Validation-accuracy gain after ``k_epochs`` of training over the untrained model.

    Both measurements use the same initialisation seed.  Divergence yields
    the sentinel ``-1``.
    """
    if k_epochs < 0:
        raise ContractError("k_epochs must be >= 0")
    _check_assignment(assignment)
    cfg = cfg.with_hyper(assignment or {})
    desc = _descriptor_for(assignment, descriptor)
    model = assemble_model(desc, ds.task, ds.in_dim, seed=cfg.seed)
    before, _ = evaluate_model(model, ds, "val")
    if k_epochs == 0:
        return 0.0
    meta = train_model(model, ds, replace(cfg, epochs=int(k_epochs), patience=int(k_epochs)),
                       early_stopping=False)
    if meta["status"] != "ok":
        return -1.0
    # score the model as trained, not the restored checkpoint
    after, _ = evaluate_model(model, ds, "val")
    return after - before


def _owner(name):
    head = name.split(".", 1)[0]
    return int(head[1:]) if head.startswith("l") and head[1:].isdigit() else None


def inherit_weights(child_desc: ArchitectureDescriptor, parent: TrainedModel, seed=0):
    """Initialise a child model, copying parent tensors that pass the inheritance rules.

    A tensor is copied iff the parent has a tensor of the same name and
    shape and the owning layers agree on weight kind and activation.
    Returns ``(ParamStore, copied_names)``.
    """
    child = assemble_model(child_desc, parent.task, parent.in_dim, seed=seed)
    copied = []
    for name, t in child.params.items():
        if name not in parent.params:
            continue
        src = parent.params[name].data
        if src.shape != t.data.shape:
            continue
        l = _owner(name)
        if l is not None:
            if l > parent.descriptor.num_layers:
                continue
            a, b = child_desc.layers[l - 1], parent.descriptor.layers[l - 1]
            if a.weight_kind != b.weight_kind or a.activation != b.activation:
                continue
        t.data = src.copy()
        copied.append(name)
    return child.params, copied


class Estimator:
    """Callable ``assignment -> TrialRecord`` used by search strategies."""

    def __init__(self, ds: Dataset, cfg: TrainConfig = TrainConfig(), descriptor=None,
                 fidelity="full", epoch_cap=None, data_fraction=1.0, deadline=None):
        self.ds = ds
        self.deadline = deadline
        self.cfg = cfg
        self.descriptor = descriptor
        self.fidelity = fidelity
        self.epoch_cap = epoch_cap
        self.data_fraction = data_fraction
        self.models = {}

    def __call__(self, assignment, seed=None):
        start = None
        if self.deadline is not None:
            if self.deadline.expired():
                raise BudgetExpired("time budget exhausted")
            start = self.deadline.elapsed()
        cfg = self.cfg if seed is None else replace(self.cfg, seed=int(seed))
        if self.fidelity == "low":
            rec = evaluate_low_fidelity(assignment, self.ds, cfg, self.epoch_cap or cfg.epochs,
                                        self.data_fraction, self.descriptor)
        else:
            rec, model = evaluate_full(assignment, self.ds, cfg, self.descriptor)
            self.models[assignment.key() if hasattr(assignment, "key") else None] = model
        if start is not None:
            rec.extra["start_offset"] = start
        return rec


class TableEstimator:
    """Deterministic lookup estimator over a precomputed ``key -> val_metric`` table."""

    def __init__(self, table, test_table=None, epochs=1):
        self.table = dict(table)
        self.test_table = dict(test_table or {})
        self.epochs = epochs
        self.calls = 0

    def __call__(self, assignment, seed=None):
        self.calls += 1
        key = assignment.key()
        if key not in self.table:
            return TrialRecord(assignment, "table", 0 if seed is None else seed, 0.0,
                               status="failed", reason="not in table")
        return TrialRecord(assignment, "table", 0 if seed is None else seed, self.table[key],
                           self.test_table.get(key), epochs=self.epochs)


class GNNClassifier(BaseEstimator, ClassifierMixin):
    """Scikit-learn style wrapper around one descriptor and its training recipe.

    ``fit`` takes a graph (node task) or list of graphs (graph task) plus a
    :class:`DatasetSplit`; prediction methods accept the same data and an
    optional row index.
    """

    def __init__(self, descriptor=None, lr=0.01, weight_decay=5e-4, dropout=0.5, epochs=200,
                 patience=50, seed=0):
        self.descriptor = descriptor
        self.lr = lr
        self.weight_decay = weight_decay
        self.dropout = dropout
        self.epochs = epochs
        self.patience = patience
        self.seed = seed

    def _config(self):
        return TrainConfig(self.lr, self.weight_decay, self.dropout, self.epochs,
                           self.patience, self.seed)

    def fit(self, X, split: DatasetSplit, task: Optional[TaskSpec] = None):
        if self.descriptor is None:
            raise ContractError("GNNClassifier needs a descriptor")
        desc = self.descriptor
        if isinstance(desc, (str, dict)):
            desc = ArchitectureDescriptor.from_json(desc)
        ds = Dataset(X, split, task)
        self.model_ = assemble_model(desc, ds.task, ds.in_dim, seed=self.seed)
        self.train_meta_ = train_model(self.model_, ds, self._config())
        self.classes_ = np.arange(ds.task.num_classes)
        self.dataset_ = ds
        return self

    def predict_proba(self, X, index=None):
        if not hasattr(self, "model_"):
            raise ValidationError("GNNClassifier is not fitted")
        if isinstance(X, Graph):
            p = self.model_.predict_proba(X)
            return p if index is None else p[np.asarray(index)]
        graphs = list(X) if index is None else [X[i] for i in np.asarray(index).tolist()]
        return self.model_.predict_proba(graphs)

    def predict(self, X, index=None):
        return np.argmax(self.predict_proba(X, index), axis=1)

    def score(self, X, y=None, index=None):
        ds = self.dataset_
        if y is None:
            y = ds.labels if index is None else ds.labels[np.asarray(index)]
        return float(np.mean(self.predict(X, index) == np.asarray(y)))
