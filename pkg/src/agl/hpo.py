"""Hyper-parameter optimisation, directly or through sampled-subgraph proxies."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, replace
from typing import List, Optional

import numpy as np

from .errors import ContractError, ProxyError, SearchError
from .estimation import Dataset, Estimator, TrainConfig
from .features import graph_signature
from .graph import Graph, restrict_split, sample_subgraph_rw
from .search import random_search, safe_evaluate, tpe_search, tpe_suggest
from .space import SearchSpace, sample_uniform
from .trials import Ledger, TrialRecord

__all__ = ["ProxyPlan", "Surrogate", "HPOResult", "hpo_run", "proxy_hpo", "config_vector"]

logger = logging.getLogger(__name__)

STRATEGIES = ("random", "tpe")


@dataclass(frozen=True)
class ProxyPlan:
    num_subgraphs: int = 5
    target_ratio: float = 0.15
    num_starts: Optional[int] = None
    walk_len: int = 20
    trials_per_subgraph: int = 10
    fine_tune_trials: int = 3
    kernel_bandwidth: float = 1.0
    config_bandwidth: float = 0.0

    def __post_init__(self):
        if self.num_subgraphs < 1:
            raise ContractError("num_subgraphs must be >= 1")
        if self.fine_tune_trials < 1:
            raise ContractError("fine_tune_trials must be >= 1")
        if not 0.0 < self.target_ratio < 1.0:
            raise ContractError("target_ratio must lie in (0, 1)")
        if self.trials_per_subgraph < 1:
            raise ContractError("trials_per_subgraph must be >= 1")
        if self.kernel_bandwidth <= 0 or self.config_bandwidth < 0:
            raise ContractError("bandwidths must be positive")

    def starts(self, n):
        if self.num_starts is not None:
            return self.num_starts
        return max(1, int(math.ceil(self.target_ratio * n / max(self.walk_len, 1))))

    def to_json(self):
        return dict(self.__dict__)


def config_vector(hyper, space: Optional[SearchSpace] = None):
    """Scale-free embedding ``(log lr, log weight_decay, dropout, epochs in [0, 1])``."""
    cfg = TrainConfig().with_hyper(hyper)
    lo, hi = 1, 400
    if space is not None and "epochs" in space:
        lo, hi = space["epochs"].domain[0], space["epochs"].domain[-1]
    span = max(hi - lo, 1)
    return np.array([math.log(cfg.lr), math.log(max(cfg.weight_decay, 1e-12)), cfg.dropout,
                     (cfg.epochs - lo) / span])


class Surrogate:
    """Kernel-weighted transfer from subgraph observations to a target graph.

    The prediction for a config is a convex combination of its subgraph
    observations.  Subgraph weights come from a Gaussian kernel on the
    Euclidean distance between standardised signatures; standardisation
    uses the mean and std of the subgraph population.  With a positive
    ``config_bandwidth`` observations of nearby configs also contribute.
    """

    def __init__(self, bandwidth=1.0, config_bandwidth=0.0):
        self.bandwidth = bandwidth
        self.config_bandwidth = config_bandwidth
        self.notices: List[str] = []

    def fit(self, signatures, observations):
        """``signatures``: (m, 6); ``observations``: list of ``(subgraph, config_vec, metric)``."""
        sig = np.asarray(signatures, dtype=np.float64)
        if sig.ndim != 2 or sig.shape[0] < 1:
            raise ContractError("signatures must be a non-empty 2-D array")
        self.mean_ = sig.mean(axis=0)
        self.std_ = sig.std(axis=0)
        self.sig_ = sig
        self.obs_ = []
        for i, c, y in observations:
            if not 0.0 <= y <= 1.0:
                raise ContractError(f"metric {y} outside [0, 1]")
            self.obs_.append((int(i), np.asarray(c, dtype=np.float64), float(y)))
        if not self.obs_:
            raise ProxyError("surrogate has no observations")
        return self

    def standardize(self, sig):
        sig = np.asarray(sig, dtype=np.float64)
        live = self.std_ > 0
        out = np.zeros_like(sig)
        out[..., live] = (sig[..., live] - self.mean_[live]) / self.std_[live]
        return out

    def weights(self, target):
        """Normalised per-subgraph weights for ``target`` (uniform when degenerate)."""
        m = self.sig_.shape[0]
        if not np.any(self.std_ > 0):
            if m > 1:
                msg = "signatures have zero variance across subgraphs; uniform weights"
                logger.info(msg)
                self.notices.append(msg)
            return np.full(m, 1.0 / m)
        z = self.standardize(self.sig_)
        t = self.standardize(target)
        d2 = np.sum((z - t) ** 2, axis=1) / (2.0 * self.bandwidth ** 2)
        w = np.exp(-(d2 - d2.min()))
        return w / w.sum()

    def predict(self, config, target):
        w = self.weights(target)
        c = np.asarray(config, dtype=np.float64)
        num = den = 0.0
        for i, ci, y in self.obs_:
            if self.config_bandwidth > 0:
                k = math.exp(-np.sum((ci - c) ** 2) / (2 * self.config_bandwidth ** 2))
            else:
                k = 1.0 if np.array_equal(ci, c) else 0.0
            num += w[i] * k * y
            den += w[i] * k
        return num / den if den > 0 else None


@dataclass
class HPOResult:
    config: TrainConfig
    record: TrialRecord
    ledger: Ledger
    model: object = None
    notices: list = field(default_factory=list)
    predictions: dict = field(default_factory=dict)


def _hyper_space(space: SearchSpace):
    bad = [d.name for d in space.decisions if d.role != "hyper"]
    if bad:
        raise ContractError(f"HPO space contains architecture decisions: {bad}")
    return space


def hpo_run(space: SearchSpace, ds: Dataset, descriptor, strategy="random", budget=10, seed=0,
            cfg: TrainConfig = None, ledger=None, deadline=None):
    """Tune training hyper-parameters of a fixed descriptor on ``ds``."""
    _hyper_space(space)
    if strategy not in STRATEGIES:
        raise ContractError(f"unknown HPO strategy {strategy!r}")
    cfg = cfg or TrainConfig(seed=seed)
    est = Estimator(ds, cfg, descriptor, deadline=deadline)
    run = random_search if strategy == "random" else tpe_search
    best, ledger = run(space, budget, est, seed=seed, ledger=ledger)
    return HPOResult(cfg.with_hyper(best.assignment), best, ledger,
                     est.models.get(best.assignment.key()))


def _full_signature_json(sig):
    return json.dumps(sig.to_json(), sort_keys=True, separators=(",", ":"))


def proxy_hpo(space: SearchSpace, ds: Dataset, descriptor, plan: ProxyPlan = ProxyPlan(),
              strategy="random", seed=0, cfg: TrainConfig = None, ledger=None, deadline=None):
    """Subgraph-proxy HPO with signature-weighted transfer and full-graph fine-tuning.

    Every proposed config is trained on each sampled subgraph; the
    surrogate ranks the configs for the full graph and the top
    ``fine_tune_trials`` are evaluated on the full graph.
    """
    _hyper_space(space)
    if ds.level != "node":
        raise ContractError("proxy HPO needs a node-level dataset")
    if strategy not in STRATEGIES:
        raise ContractError(f"unknown HPO strategy {strategy!r}")
    cfg = cfg or TrainConfig(seed=seed)
    ledger = Ledger() if ledger is None else ledger
    rng = np.random.default_rng(seed)
    g: Graph = ds.data
    labels = ds.labels
    subs = []
    for i in range(plan.num_subgraphs):
        sub, node_map = sample_subgraph_rw(g, plan.starts(g.num_nodes), plan.walk_len,
                                           plan.target_ratio, seed=int(rng.integers(2**31)))
        split = restrict_split(ds.split, node_map, labels[node_map], seed=int(rng.integers(2**31)))
        sig = graph_signature(sub)
        sds = Dataset(sub, split, ds.task, graph_id=f"subgraph-{i}")
        subs.append((sds, sig, Estimator(sds, cfg, descriptor, deadline=deadline)))
    full_sig = graph_signature(g)
    surrogate = Surrogate(plan.kernel_bandwidth, plan.config_bandwidth)
    surrogate.fit([s.vector() for _, s, _ in subs], [(0, np.zeros(4), 0.0)])
    weights = surrogate.weights(full_sig.vector())

    configs, observations, proxy_hist = [], [], Ledger()
    seen = set()
    for step in range(plan.trials_per_subgraph):
        if strategy == "random":
            a = sample_uniform(space, rng)
        else:
            a = tpe_suggest(proxy_hist.records, space, rng,
                            exclude=seen if space.finite else None)
        seen.add(a.key())
        vec = config_vector(a, space)
        scores = []
        for i, (sds, sig, est) in enumerate(subs):
            rec = safe_evaluate(est, a)
            rec = ledger.append(_tag(rec, sds.graph_id, _full_signature_json(sig)))
            if rec.ok:
                observations.append((i, vec, rec.val_metric))
                scores.append((weights[i], rec.val_metric))
        configs.append(a)
        if scores:
            w = np.array([s[0] for s in scores])
            y = np.array([s[1] for s in scores])
            proxy_hist.append(TrialRecord(a, "proxy", seed, float(w @ y / w.sum())))
        else:
            proxy_hist.append(TrialRecord(a, "proxy", seed, 0.0, status="failed",
                                          reason="failed on every subgraph"))
    if not observations:
        raise ProxyError("every subgraph trial failed")
    surrogate.fit([s.vector() for _, s, _ in subs], observations)
    preds = {}
    for k, a in enumerate(configs):
        p = surrogate.predict(config_vector(a, space), full_sig.vector())
        if a.key() not in preds:
            preds[a.key()] = (p, k, a)
    ranked = sorted(preds.values(), key=lambda t: (-(t[0] if t[0] is not None else -1.0), t[1]))
    top = [a for _, _, a in ranked[:plan.fine_tune_trials]]
    while len(top) < plan.fine_tune_trials:
        top.append(top[len(top) % len(ranked)])
    full_est = Estimator(ds, cfg, descriptor, deadline=deadline)
    full_sig_json = _full_signature_json(full_sig)
    fine = []
    for a in top:
        rec = safe_evaluate(full_est, a)
        fine.append(ledger.append(_tag(rec, ds.graph_id, full_sig_json)))
    fine = [r for r in fine if r.ok]
    if not fine:
        raise SearchError("every full-graph fine-tune trial failed")
    best = max(fine, key=lambda r: (r.val_metric, -r.birth_index))
    return HPOResult(cfg.with_hyper(best.assignment), best, ledger,
                     full_est.models.get(best.assignment.key()), list(surrogate.notices),
                     {key: p for key, (p, _, _) in preds.items()})


def _tag(rec, graph_id, signature_json):
    return replace(rec, graph_id=graph_id, signature_json=signature_json)
