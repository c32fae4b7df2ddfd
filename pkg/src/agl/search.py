"""Search strategies: random, TPE, regularized evolution, REINFORCE and one-shot."""
from __future__ import annotations

import logging
import math
import os
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Optional

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Tensor
from .errors import (AGLError, BudgetExpired, ContractError, DerivationError, MutationError,
                     NumericalError, SearchError)
from .gnn import (ATTENTION_KINDS, MicroChoice, aggregate, combine, edge_scores,
                  init_param, mp_param_shapes, readout)
from .space import Assignment, SearchSpace, enumerate_space, sample_uniform
from .trials import Ledger, TrialRecord

__all__ = [
    "random_search", "tpe_suggest", "tpe_search", "Population", "re_step",
    "regularized_evolution", "PolicyState", "policy_sample", "reinforce_update", "rl_search",
    "mixed_op", "OneShotState", "oneshot_train", "oneshot_derive", "safe_evaluate",
]

logger = logging.getLogger(__name__)

Estimator = Callable[[Assignment], TrialRecord]


def _rng(seed):
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def _workers(workers):
    if workers is not None:
        return max(1, int(workers))
    return max(1, int(os.environ.get("AGL_THREADS", "1") or 1))


def safe_evaluate(estimator: Estimator, assignment) -> TrialRecord:
    """Run the estimator; any library or numeric failure becomes a failed record."""
    try:
        rec = estimator(assignment)
    except (AGLError, ValueError, FloatingPointError, ArithmeticError) as exc:
        logger.warning("trial failed: %s", exc)
        return TrialRecord(assignment, status="failed", reason=f"{type(exc).__name__}: {exc}")
    if rec.assignment is None or rec.assignment != assignment:
        rec = replace(rec, assignment=assignment)
    return rec


def _evaluate_batch(estimator, assignments, ledger, workers=1):
    """Evaluate in order; finished trials are kept when the time budget runs out."""
    if workers > 1 and len(assignments) > 1:
        def run(a):
            try:
                return safe_evaluate(estimator, a)
            except BudgetExpired as exc:
                return exc
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, assignments))
        out = [ledger.append(r) for r in results if isinstance(r, TrialRecord)]
        expired = [r for r in results if isinstance(r, BudgetExpired)]
        if expired:
            raise expired[0]
        return out
    return [ledger.append(safe_evaluate(estimator, a)) for a in assignments]


def _finish(ledger):
    if not ledger.successful():
        raise SearchError("every trial failed")
    return ledger.best(), ledger


# ---------------------------------------------------------------------------
# random search


def random_search(space: SearchSpace, budget, estimator: Estimator, seed=0, ledger=None,
                  workers=None, cap=100000):
    """Evaluate ``budget`` uniform valid samples; returns ``(best_record, ledger)``.

    In a finite space whose raw size is at most ``budget`` the samples are a
    seeded permutation of every valid assignment, so no duplicate is spent.
    """
    if budget < 1:
        raise ContractError("budget must be >= 1")
    rng = _rng(seed)
    ledger = Ledger() if ledger is None else ledger
    if space.finite and space.cardinality() <= max(budget, 0) and space.cardinality() <= cap:
        pool = list(enumerate_space(space, cap))
        order = rng.permutation(len(pool))
        picks = [pool[i] for i in order[:budget]]
    else:
        picks = [sample_uniform(space, rng) for _ in range(budget)]
    _evaluate_batch(estimator, picks, ledger, _workers(workers))
    return _finish(ledger)


# ---------------------------------------------------------------------------
# TPE


def _scott(values):
    v = np.asarray(values, dtype=np.float64)
    sd = v.std(ddof=1) if v.size > 1 else 0.0
    return sd * v.size ** (-1.0 / 5.0)


class _Density:
    """Per-decision Parzen density with a uniform prior component of weight ``w``."""

    def __init__(self, decision, observed, prior_weight):
        self.d = decision
        self.w = prior_weight
        self.obs = list(observed)
        if decision.kind == "categorical":
            vals = decision.values()
            counts = np.array([sum(1 for o in self.obs if o == v) for v in vals], dtype=float)
            self.probs = (counts + prior_weight / len(vals)) / (len(self.obs) + prior_weight)
            self.vals = vals
            return
        lo, hi = decision.domain
        self.log = decision.kind == "log_uniform"
        self.lo, self.hi = (math.log(lo), math.log(hi)) if self.log else (lo - 0.5, hi + 0.5)
        self.mu = np.array([self._t(o) for o in self.obs], dtype=float)
        span = self.hi - self.lo
        self.bw = max(_scott(self.mu), span * 1e-2) if self.mu.size else span

    def _t(self, v):
        return math.log(v) if self.log else float(v)

    def _inv(self, t):
        t = min(max(t, self.lo), self.hi)
        if self.log:
            return float(min(max(math.exp(t), self.d.domain[0]), self.d.domain[1]))
        return int(min(max(round(t), self.d.domain[0]), self.d.domain[1]))

    def sample(self, rng):
        if self.d.kind == "categorical":
            return self.vals[int(rng.choice(len(self.vals), p=self.probs))]
        n = self.mu.size
        k = rng.uniform(0, n + self.w)
        if k >= n:
            return self._inv(rng.uniform(self.lo, self.hi))
        return self._inv(rng.normal(self.mu[int(k)], self.bw))

    def logpdf(self, v):
        if self.d.kind == "categorical":
            return math.log(self.probs[self.vals.index(v)])
        t = self._t(v)
        span = self.hi - self.lo
        dens = self.w / span
        if self.mu.size:
            z = (t - self.mu) / self.bw
            dens += np.sum(np.exp(-0.5 * z * z)) / (self.bw * math.sqrt(2 * math.pi))
        return math.log(dens / (self.mu.size + self.w))


def _fresh_uniform(space, rng, exclude, tries=100):
    a = sample_uniform(space, rng)
    for _ in range(tries):
        if a.key() not in exclude:
            break
        a = sample_uniform(space, rng)
    return a


def tpe_suggest(history, space: SearchSpace, seed=0, gamma=0.25, n_startup=10, n_ei=24,
                prior_weight=1.0, notices: Optional[list] = None, exclude=None):
    """Next assignment by the tree-structured Parzen estimator.

    History records whose assignment does not cover every decision of
    ``space`` are ignored.  Fewer than ``n_startup`` usable observations,
    or identical metrics throughout, give a uniform sample.  Keys in
    ``exclude`` are skipped while any alternative turns up.
    """
    rng = _rng(seed)
    exclude = exclude or set()
    recs = [r for r in (history or []) if r.ok and r.assignment is not None
            and all(n in r.assignment for n in space.names)]
    if len(recs) < n_startup:
        return _fresh_uniform(space, rng, exclude) if exclude else sample_uniform(space, rng)
    vals = np.array([r.val_metric for r in recs])
    if np.all(vals == vals[0]):
        msg = "tpe: degenerate history (identical metrics), sampling uniformly"
        logger.info(msg)
        if notices is not None:
            notices.append(msg)
        return _fresh_uniform(space, rng, exclude) if exclude else sample_uniform(space, rng)
    order = sorted(range(len(recs)), key=lambda i: (-vals[i], recs[i].birth_index, i))
    n_good = max(1, int(math.ceil(gamma * len(recs))))
    good = [recs[i].assignment for i in order[:n_good]]
    bad = [recs[i].assignment for i in order[n_good:]]
    l_dens = {d.name: _Density(d, [a[d.name] for a in good], prior_weight)
              for d in space.decisions}
    g_dens = {d.name: _Density(d, [a[d.name] for a in bad], prior_weight)
              for d in space.decisions}
    best, best_score = None, -math.inf
    for _ in range(n_ei):
        cand = Assignment({d.name: l_dens[d.name].sample(rng) for d in space.decisions}, space)
        if space.violations(cand) or cand.key() in exclude:
            continue
        score = sum(l_dens[n].logpdf(cand[n]) - g_dens[n].logpdf(cand[n]) for n in space.names)
        if score > best_score:
            best, best_score = cand, score
    if best is None:
        return _fresh_uniform(space, rng, exclude) if exclude else sample_uniform(space, rng)
    return best


def tpe_search(space: SearchSpace, budget, estimator: Estimator, seed=0, ledger=None,
               **tpe_kw):
    """Sequential TPE loop; returns ``(best_record, ledger)``.

    In a finite space already evaluated assignments are not proposed
    again until every valid one has been tried.
    """
    if budget < 1:
        raise ContractError("budget must be >= 1")
    rng = _rng(seed)
    ledger = Ledger() if ledger is None else ledger
    seen = set()
    for _ in range(budget):
        a = tpe_suggest(ledger.records, space, rng, exclude=seen if space.finite else None,
                        **tpe_kw)
        seen.add(a.key())
        ledger.append(safe_evaluate(estimator, a))
    return _finish(ledger)


# ---------------------------------------------------------------------------
# regularized evolution


class Population:
    """Fixed-capacity FIFO of trial records; the oldest member is evicted first."""

    def __init__(self, capacity=20, records=()):
        if capacity < 1:
            raise ContractError("capacity must be >= 1")
        self.capacity = capacity
        self._q = deque()
        for r in records:
            self.add(r)

    def add(self, record):
        self._q.append(record)
        evicted = None
        if len(self._q) > self.capacity:
            evicted = self._q.popleft()
        return evicted

    def __len__(self):
        return len(self._q)

    def __iter__(self):
        return iter(list(self._q))

    @property
    def members(self):
        return list(self._q)


def _mutate(parent: Assignment, space: SearchSpace, rng, max_tries=100):
    mutable = [d for d in space.decisions if not d.finite or d.size() > 1]
    if not mutable:
        raise MutationError("no decision has more than one value")
    for _ in range(max_tries):
        d = mutable[int(rng.integers(len(mutable)))]
        cur = parent[d.name]
        if d.finite:
            others = [v for v in d.values() if v != cur]
            new = others[int(rng.integers(len(others)))]
        else:
            new = d.sample(rng)
            if new == cur:
                continue
        child = parent.with_value(d.name, new)
        child = Assignment(dict(child), space)
        if not space.violations(child):
            return child
    raise MutationError(f"no valid child after {max_tries} mutations")


def re_step(pop: Population, sample_size, space: SearchSpace, estimator: Estimator, seed=0,
            ledger=None):
    """One aging-evolution step; returns ``(population, child_record)``."""
    if len(pop) == 0:
        raise ContractError("population is empty")
    rng = _rng(seed)
    members = pop.members
    idx = rng.choice(len(members), size=min(sample_size, len(members)), replace=False)
    cands = [members[i] for i in sorted(idx)]
    parent = max(cands, key=lambda r: (r.val_metric if r.ok else -1.0, -r.birth_index))
    child = _mutate(Assignment(dict(parent.assignment), space), space, rng)
    rec = safe_evaluate(estimator, child)
    if ledger is not None:
        rec = ledger.append(rec)
    pop.add(rec)
    return pop, rec


def regularized_evolution(space: SearchSpace, budget, estimator: Estimator, seed=0,
                          population_size=20, sample_size=5, ledger=None, workers=None):
    """Aging evolution with ``budget`` total evaluations; returns ``(best, ledger)``."""
    if budget < 1:
        raise ContractError("budget must be >= 1")
    rng = _rng(seed)
    ledger = Ledger() if ledger is None else ledger
    pop = Population(population_size)
    init = [sample_uniform(space, rng) for _ in range(min(population_size, budget))]
    for r in _evaluate_batch(estimator, init, ledger, _workers(workers)):
        pop.add(r)
    for _ in range(budget - len(init)):
        re_step(pop, sample_size, space, estimator, rng, ledger)
    return _finish(ledger)


# ---------------------------------------------------------------------------
# REINFORCE controller


def _policy_values(decision, grid=8):
    if decision.finite:
        return decision.values()
    lo, hi = decision.domain
    return [float(v) for v in np.exp(np.linspace(math.log(lo), math.log(hi), grid))]


@dataclass(frozen=True)
class PolicyState:
    """Factorised categorical policy: one logit vector per decision."""

    names: tuple
    values: tuple
    logits: tuple
    baseline: float = 0.0
    steps: int = 0

    @classmethod
    def uniform(cls, space: SearchSpace, grid=8):
        vals = tuple(tuple(_policy_values(d, grid)) for d in space.decisions)
        return cls(tuple(space.names), vals, tuple(np.zeros(len(v)) for v in vals))

    def probs(self, name):
        return ad.softmax_np(self.logits[self.names.index(name)][None, :])[0]

    def log_prob(self, assignment):
        total = 0.0
        for n, vals, z in zip(self.names, self.values, self.logits):
            lp = ad.log_softmax_np(z[None, :])[0]
            total += lp[vals.index(assignment[n])]
        return float(total)


def policy_sample(policy: PolicyState, space: SearchSpace, seed=0, max_rejections=100):
    """Draw a valid assignment from the policy (rejection on constraint violations)."""
    rng = _rng(seed)
    for _ in range(max_rejections):
        vals = {}
        for n, options, z in zip(policy.names, policy.values, policy.logits):
            p = ad.softmax_np(z[None, :])[0]
            vals[n] = options[int(rng.choice(len(options), p=p))]
        a = Assignment(vals, space)
        if not space.violations(a):
            return a
    return None


def reinforce_update(policy: PolicyState, trial: TrialRecord, lr=0.05, ema_beta=0.9,
                     entropy_coef=0.01) -> PolicyState:
    """One policy-gradient step with an EMA baseline and an entropy bonus."""
    reward = trial.val_metric if trial.ok else 0.0
    adv = reward - policy.baseline
    new = []
    for n, vals, z in zip(policy.names, policy.values, policy.logits):
        p = ad.softmax_np(z[None, :])[0]
        onehot = np.zeros_like(p)
        onehot[vals.index(trial.assignment[n])] = 1.0
        logp = np.log(np.maximum(p, 1e-300))
        ent = -np.sum(p * logp)
        d_ent = -p * (logp + ent)
        new.append(z + lr * (adv * (onehot - p) + entropy_coef * d_ent))
    baseline = ema_beta * policy.baseline + (1.0 - ema_beta) * reward
    return replace(policy, logits=tuple(new), baseline=float(baseline), steps=policy.steps + 1)


def rl_search(space: SearchSpace, budget, estimator: Estimator, seed=0, ledger=None, lr=0.05,
              ema_beta=0.9, entropy_coef=0.01, grid=8):
    """REINFORCE controller loop; returns ``(best_record, ledger, policy)``."""
    if budget < 1:
        raise ContractError("budget must be >= 1")
    rng = _rng(seed)
    ledger = Ledger() if ledger is None else ledger
    policy = PolicyState.uniform(space, grid)
    for _ in range(budget):
        a = policy_sample(policy, space, rng)
        if a is None:
            # unsatisfiable draw: penalise a raw policy sample
            vals = {n: o[int(rng.choice(len(o), p=policy.probs(n)))]
                    for n, o in zip(policy.names, policy.values)}
            rec = ledger.append(TrialRecord(Assignment(vals, space), status="failed",
                                            reason="invalid sample"))
        else:
            rec = ledger.append(safe_evaluate(estimator, a))
        policy = reinforce_update(policy, rec, lr, ema_beta, entropy_coef)
    best, ledger = _finish(ledger)
    return best, ledger, policy


# ---------------------------------------------------------------------------
# one-shot (differentiable) search


def mixed_op(x, ops, logits, temperature=1.0):
    """``sum_k softmax(logits / T)_k * ops[k](x)`` as a differentiable tensor."""
    z = ad.as_tensor(logits)
    p = ad.softmax_rows(ad.reshape(ad.mul(z, 1.0 / temperature), (1, -1)))
    out = None
    for k, op in enumerate(ops):
        term = ad.mul(op(x), ad.reshape(ad.columns(p, k, k + 1), (1,)))
        out = term if out is None else ad.add(out, term)
    return out


@dataclass
class OneShotState:
    space: SearchSpace
    weights: ParamStore
    logits: ParamStore
    sites: Dict[str, tuple]
    fixed: Dict[str, object]
    temperature: float = 1.0
    norm_log: List[float] = field(default_factory=list)
    history: List[dict] = field(default_factory=list)

    def probs(self, site):
        z = self.logits[site].data / self.temperature
        return ad.softmax_np(z[None, :])[0]


class _Supernet:
    """Mixture forward pass over every choice site of a single-descriptor space."""

    def __init__(self, space: SearchSpace, in_dim, num_classes, rng):
        if space.base is None:
            raise ContractError("one-shot search needs an architecture space")
        for d in space.decisions:
            if d.role != "architecture":
                raise ContractError(f"site {d.name}: hyper decisions are not one-shot searchable")
            if not d.finite:
                raise ContractError(f"site {d.name}: continuous decision")
            if d.name == "num_layers" and d.size() > 1:
                raise ContractError("site num_layers: candidate depths do not share shapes")
            if d.name.endswith(".dim") and d.size() > 1:
                raise ContractError(f"site {d.name}: candidates differ in output dim")
        self.space = space
        self.sites = {d.name: tuple(d.values()) for d in space.decisions if d.size() > 1}
        self.fixed = {d.name: d.values()[0] for d in space.decisions if d.size() == 1}
        base = space.descriptor(Assignment(
            {d.name: d.values()[0] for d in space.decisions}, space))
        self.L = base.num_layers
        self.readout = base.readout
        self.dims = base.dims(in_dim)
        self.in_dim = in_dim
        self.edges = {}
        for j, l, op in base.macro:
            self.edges[(j, l)] = (op,)
        for name, vals in list(self.sites.items()) + list(self.fixed.items()):
            if name.startswith("macro."):
                _, j, l = name.split(".")
                self.edges[(int(j), int(l))] = vals if isinstance(vals, tuple) else (vals,)
        for (j, l), ops in self.edges.items():
            if "identity" in ops and self.dims[j] != self.dims[l]:
                raise ContractError(
                    f"site macro.{j}.{l}: identity needs dim {self.dims[j]} == {self.dims[l]}")
        self.params = ParamStore()
        shapes = {}
        for (j, l), ops in sorted(self.edges.items()):
            prefix = f"l{l}.e{j}"
            if "mp" in ops:
                for K, c in self._variants(l):
                    shapes.update(self._mp_shapes(f"{prefix}.h{K}.{c}", self.dims[j], l, K, c))
            if "mlp" in ops:
                shapes[f"{prefix}.mlp.W"] = (self.dims[j], self.dims[l])
                shapes[f"{prefix}.mlp.b"] = (self.dims[l],)
        shapes["head.W"] = (self.dims[-1], num_classes)
        shapes["head.b"] = (num_classes,)
        for name, shape in shapes.items():
            self.params.add(name, init_param(rng, name, shape))
        self.logits = ParamStore()
        for name, vals in self.sites.items():
            self.logits.add(name, np.zeros(len(vals)))

    def options(self, l, field_):
        name = f"l{l}.{field_}"
        if name in self.sites:
            return self.sites[name]
        if name in self.fixed:
            return (self.fixed[name],)
        return (getattr(self.space.base.layers[min(l, self.space.base.num_layers) - 1], field_),)

    def _variants(self, l):
        return [(K, c) for K in self.options(l, "heads") for c in self.options(l, "combine")]

    def _mp_shapes(self, prefix, d_in, l, K, c):
        d = self.dims[l]
        if c == "concat" and d % K:
            raise ContractError(f"site l{l}.heads: {K} heads do not divide dim {d}")
        aggs = self.options(l, "agg")
        micro = MicroChoice("mlp" if "mlp" in aggs else "sum", "const", K, c, d)
        shapes = mp_param_shapes(prefix, d_in, micro)
        dh = micro.dim // K if c == "concat" else d
        for wk in self.options(l, "weight_kind"):
            if wk in ("gat", "sym_gat"):
                shapes[f"{prefix}.{wk}.att_dst"] = (K, dh)
                shapes[f"{prefix}.{wk}.att_src"] = (K, dh)
            elif wk == "gene_linear":
                shapes[f"{prefix}.{wk}.scale"] = (K,)
        return shapes

    # -- site weights -------------------------------------------------------

    def weights(self, name, options, mode, rng, temperature):
        """List of ``(option, weight)``; weight is a scalar tensor or None (fixed)."""
        if name not in self.sites:
            return [(options[0], None)]
        z = ad.mul(self.logits[name], 1.0 / temperature)
        p = ad.softmax_rows(ad.reshape(z, (1, -1)))
        self._norms.append(abs(float(p.data.sum()) - 1.0))
        if mode == "single":
            k = int(rng.choice(len(options), p=p.data[0]))
            pk = ad.reshape(ad.columns(p, k, k + 1), (1,))
            return [(options[k], ad.div(pk, Tensor(pk.data.copy())))]
        return [(options[k], ad.reshape(ad.columns(p, k, k + 1), (1,)))
                for k in range(len(options))]

    @staticmethod
    def _mix(terms):
        out = None
        for t, w in terms:
            t = t if w is None else ad.mul(t, w)
            out = t if out is None else ad.add(out, t)
        return out

    def _mp(self, H, ctx, l, prefix, mode, rng, T):
        d = self.dims[l]
        d_in = H.shape[1]
        heads = self.weights(f"l{l}.heads", self.options(l, "heads"), mode, rng, T)
        combs = self.weights(f"l{l}.combine", self.options(l, "combine"), mode, rng, T)
        wks = self.weights(f"l{l}.weight_kind", self.options(l, "weight_kind"), mode, rng, T)
        aggs = self.weights(f"l{l}.agg", self.options(l, "agg"), mode, rng, T)
        terms = []
        for K, wK in heads:
            for c, wc in combs:
                p = f"{prefix}.h{K}.{c}"
                dh = d // K if c == "concat" else d
                Z = ad.reshape(ad.matmul(H, self.params[f"{p}.W"]), (ctx.n, K, dh))
                msgs = ad.gather_rows(Z, ctx.src)
                alpha = []
                for wk, ww in wks:
                    raw = edge_scores(wk, Z, ctx, self.params, f"{p}.{wk}", K, dh)
                    if raw is None:
                        a = Tensor(np.ones((ctx.src.size, K)))
                    elif wk in ATTENTION_KINDS:
                        a = ad.segment_softmax(raw, ctx.segs)
                    else:
                        a = raw
                    alpha.append((a, ww))
                a = self._mix(alpha)
                msgs = ad.mul(msgs, ad.reshape(a, (-1, K, 1)))
                merged = []
                for agg, wa in aggs:
                    m = aggregate(agg, msgs, ctx)
                    m = ad.reshape(m, (ctx.n, K * dh)) if c == "concat" else ad.mean(m, axis=1)
                    if agg == "mlp":
                        m = ad.relu(ad.add(ad.matmul(m, self.params[f"{p}.agg1.W"]),
                                           self.params[f"{p}.agg1.b"]))
                        m = ad.add(ad.matmul(m, self.params[f"{p}.agg2.W"]),
                                   self.params[f"{p}.agg2.b"])
                        m = ad.mul(m, ctx.has_nbr)
                    merged.append((m, wa))
                out = combine(c, self._mix(merged), H, self.params, p, d_in, d)
                w = wK if wc is None else (wc if wK is None else ad.mul(wK, wc))
                terms.append((out, w))
        return self._mix(terms)

    def forward(self, ctx, mode="mixture", training=False, dropout=0.0, rng=None,
                temperature=1.0):
        self._norms = []
        hs = [Tensor(ctx.graph.x)]
        for l in range(1, self.L + 1):
            total = None
            for (j, ll), ops in sorted(self.edges.items()):
                if ll != l:
                    continue
                name = f"macro.{j}.{l}"
                prefix = f"l{l}.e{j}"
                choices = self.weights(name, ops, mode, rng, temperature) \
                    if name in self.sites else [(ops[0], None)]
                terms = []
                for op, w in choices:
                    if op == "zero":
                        continue
                    h_in = hs[j]
                    if op == "identity":
                        terms.append((h_in, w))
                        continue
                    h_in = ad.dropout(h_in, dropout, rng, training)
                    if op == "mp":
                        out = self._mp(h_in, ctx, l, prefix, mode, rng, temperature)
                    else:
                        out = ad.add(ad.matmul(h_in, self.params[f"{prefix}.mlp.W"]),
                                     self.params[f"{prefix}.mlp.b"])
                    terms.append((self._act(out, l, mode, rng, temperature), w))
                if terms:
                    t = self._mix(terms)
                    total = t if total is None else ad.add(total, t)
            if total is None:
                total = Tensor(np.zeros((ctx.n, self.dims[l])))
            hs.append(total)
        h = hs[-1]
        if self.readout is not None:
            h = readout(h, self.readout, ctx)
        h = ad.dropout(h, dropout, rng, training)
        return ad.add(ad.matmul(h, self.params["head.W"]), self.params["head.b"])

    def _act(self, out, l, mode, rng, T):
        acts = self.weights(f"l{l}.activation", self.options(l, "activation"), mode, rng, T)
        return self._mix([(ad.activation(a)(out), w) for a, w in acts])


def _adam(store, state, lr, weight_decay=0.0):
    ad.adam_step(store, store.grads(), lr, weight_decay=weight_decay)


def oneshot_train(space: SearchSpace, ds, epochs=100, seed=0, lr=0.01, weight_decay=5e-4,
                  arch_lr=0.05, dropout=0.5, temperature=1.0, single_path=False):
    """Alternating first-order bi-level training of a supernet.

    Each epoch takes one Adam step on the weights (train split, logits
    frozen, dropout on) and one on the architecture logits (validation
    split, weights frozen, eval mode).  ``ds`` is an
    :class:`agl.estimation.Dataset`.
    """
    if epochs < 1:
        raise ContractError("epochs must be >= 1")
    space = space.with_context(input_dim=ds.in_dim, task=ds.task)
    rng = np.random.default_rng(seed)
    net = _Supernet(space, ds.in_dim, ds.task.num_classes, rng)
    state = OneShotState(space, net.params, net.logits, dict(net.sites), dict(net.fixed),
                         temperature)
    tr_ctx, tr_rows, tr_y = ds.part("train")
    va_ctx, va_rows, va_y = ds.part("val")
    if va_rows.size == 0:
        va_ctx, va_rows, va_y = tr_ctx, tr_rows, tr_y
    mode = "single" if single_path else "mixture"
    for epoch in range(epochs):
        net.params.zero_grad()
        net.logits.zero_grad()
        logits = net.forward(tr_ctx, mode, True, dropout, rng, temperature)
        loss = ad.cross_entropy(logits, tr_y, tr_rows)
        ad.backward(loss)
        _adam(net.params, None, lr, weight_decay)
        state.norm_log.append(max(net._norms, default=0.0))
        if net.sites:
            net.params.zero_grad()
            net.logits.zero_grad()
            logits = net.forward(va_ctx, mode, False, 0.0, rng, temperature)
            vloss = ad.cross_entropy(logits, va_y, va_rows)
            ad.backward(vloss)
            _adam(net.logits, None, arch_lr)
            state.norm_log.append(max(net._norms, default=0.0))
            state.history.append({"epoch": epoch, "train_loss": float(loss.data),
                                  "val_loss": float(vloss.data)})
        if not all(np.isfinite(z.data).all() for _, z in net.logits.items()):
            raise NumericalError("architecture logits became non-finite", float("nan"))
    # normalisation after the final update
    for name in net.sites:
        state.norm_log.append(abs(float(state.probs(name).sum()) - 1.0))
    return state


def oneshot_derive(state: OneShotState) -> Assignment:
    """Argmax candidate per site (ties to the lowest index), validated."""
    vals = dict(state.fixed)
    for name, options in state.sites.items():
        vals[name] = options[int(np.argmax(state.logits[name].data))]
    ordered = {n: vals[n] for n in state.space.names}
    a = Assignment(ordered, state.space)
    bad = state.space.violations(a)
    if bad:
        raise DerivationError(f"derived assignment is invalid: {', '.join(bad)}", bad)
    return a
