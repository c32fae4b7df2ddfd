"""End-to-end solver: feature engineering, NAS, HPO, training and ensembling from one config."""
from __future__ import annotations

import copy
import json
import logging
import os
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List

import jsonschema
import numpy as np

from .ensemble import model_identity, stack_fit, stack_predict, vote
from .errors import BudgetExpired, ConfigError, ContractError, SearchError
from .estimation import Dataset, Estimator, TrainConfig, evaluate_full
from .features import FeatureOpSpec, FeaturePipeline
from .gnn import (ArchitectureDescriptor, gat_descriptor, gcn_descriptor, gin_descriptor)
from .graph import (Graph, TaskSpec, dataset_root, generate_graph_task, generate_sbm,
                    load_dataset, split_kfold, stratified_split)
from .hpo import ProxyPlan, hpo_run, proxy_hpo
from .search import (oneshot_derive, oneshot_train, random_search, regularized_evolution,
                     rl_search, tpe_search)
from .space import Assignment, default_spaces
from .trials import Ledger, TrialRecord

__all__ = ["CONFIG_SCHEMA", "REPORT_SCHEMA", "SolverConfig", "RunReport", "Deadline",
           "run_pipeline", "emit_report", "validate_report", "strip_timing", "render_summary",
           "load_report"]

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
STAGES = ("features", "nas", "hpo", "train", "ensemble")
TIMING_KEYS = frozenset({"wall_seconds", "start_offset", "seconds", "stage_seconds",
                         "elapsed_seconds"})
PRESETS = {"gcn": gcn_descriptor, "gat": gat_descriptor, "gin": gin_descriptor}
NAS_STRATEGIES = ("random", "tpe", "re", "rl", "oneshot")
HPO_STRATEGIES = ("random", "tpe", "proxy")

_train_props = {k: {"type": "number"} for k in ("lr", "weight_decay", "dropout")}
_train_props.update({k: {"type": "integer", "minimum": 1} for k in ("epochs", "patience")})

CONFIG_SCHEMA = {
    "type": "object",
    "required": ["version", "dataset", "models"],
    "additionalProperties": False,
    "properties": {
        "version": {"const": FORMAT_VERSION},
        "dataset": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "path": {"type": "string"},
                "synthetic": {"type": "object", "required": ["kind"]},
                "num_classes": {"type": "integer", "minimum": 2},
                "directed": {"type": "boolean"},
            },
            "oneOf": [{"required": ["path"]}, {"required": ["synthetic"]}],
        },
        "features": {"type": "array", "items": {"type": "object", "required": ["kind"]}},
        "models": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "required": ["name"],
                "additionalProperties": False,
                "properties": {
                    "name": {"type": "string", "pattern": "^[A-Za-z0-9_.-]+$"},
                    "preset": {"enum": sorted(PRESETS)},
                    "preset_args": {"type": "object"},
                    "descriptor": {"type": "object"},
                    "space": {"enum": ["micro_full", "micro_small", "various"]},
                    "restrict": {"type": "object"},
                    "num_layers": {"type": "integer", "minimum": 1},
                    "readout": {"enum": ["sum", "mean", "max"]},
                },
            },
        },
        "nas": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "strategy": {"enum": list(NAS_STRATEGIES)},
                "budget": {"type": "integer", "minimum": 0},
                "epochs": {"type": "integer", "minimum": 1},
                "data_fraction": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
                "oneshot_epochs": {"type": "integer", "minimum": 1},
            },
        },
        "hpo": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "strategy": {"enum": list(HPO_STRATEGIES)},
                "budget": {"type": "integer", "minimum": 0},
                "space": {"enum": ["hyper_default"]},
                "restrict": {"type": "object"},
                "proxy": {"type": "object"},
            },
        },
        "train": {"type": "object", "additionalProperties": False, "properties": _train_props},
        "ensemble": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"method": {"enum": ["none", "voting", "stacking"]},
                           "lam": {"type": "number", "minimum": 0}},
        },
        "seeds": {"type": "array", "items": {"type": "integer"}, "minItems": 1},
        "time_budget_seconds": {"type": ["number", "null"], "minimum": 0},
        "protocol": {
            "type": "object",
            "required": ["kind"],
            "additionalProperties": False,
            "properties": {"kind": {"enum": ["fixed_split", "kfold"]},
                           "k": {"type": "integer", "minimum": 2}},
        },
        "threads": {"type": "integer", "minimum": 1},
    },
}

_trial_schema = {"type": "object", "required": ["birth_index", "assignment", "status"]}
REPORT_SCHEMA = {
    "type": "object",
    "required": ["format_version", "config", "budget_truncated", "stages", "trials", "best",
                 "metrics", "protocol"],
    "properties": {
        "format_version": {"const": FORMAT_VERSION},
        "config": {"type": "object"},
        "budget_truncated": {"type": "boolean"},
        "stages": {"type": "object"},
        "trials": {"type": "object",
                   "properties": {s: {"type": "array", "items": _trial_schema}
                                  for s in STAGES[1:]},
                   "required": list(STAGES[1:])},
        "best": {"type": "object"},
        "metrics": {"type": "object"},
        "protocol": {"type": "object"},
        "notices": {"type": "array", "items": {"type": "string"}},
    },
}


class Deadline:
    """Wall-clock budget measured from construction; ``None`` means unlimited."""

    def __init__(self, seconds=None):
        self.seconds = seconds
        self.start = time.perf_counter()
        self.tripped = False

    def elapsed(self):
        return time.perf_counter() - self.start

    def expired(self):
        if self.seconds is not None and self.elapsed() >= self.seconds:
            self.tripped = True
        return self.tripped


@dataclass
class SolverConfig:
    """Validated solver configuration (a single JSON document)."""

    raw: dict
    base_dir: Path = Path(".")

    def __post_init__(self):
        self.raw = copy.deepcopy(self.raw)
        try:
            jsonschema.validate(self.raw, CONFIG_SCHEMA)
        except jsonschema.ValidationError as exc:
            where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
            raise ConfigError(f"config invalid at {where}: {exc.message}") from None
        names = [m["name"] for m in self.raw["models"]]
        if len(set(names)) != len(names):
            raise ConfigError("model names must be unique")
        for m in self.raw["models"]:
            given = [k for k in ("preset", "descriptor", "space") if k in m]
            if not given:
                raise ConfigError(f"model {m['name']}: needs a preset, descriptor or space")
            if "preset" in m and "descriptor" in m:
                raise ConfigError(f"model {m['name']}: preset and descriptor are exclusive")
            if "descriptor" in m:
                try:
                    ArchitectureDescriptor.from_json(m["descriptor"])
                except (TypeError, KeyError, ValueError) as exc:
                    raise ConfigError(f"model {m['name']}: bad descriptor ({exc})") from None
        for f in self.raw.get("features", []):
            try:
                FeatureOpSpec.from_json(f)
            except (ContractError, TypeError) as exc:
                raise ConfigError(f"feature op {f.get('kind')!r}: {exc}") from None
        if "proxy" in self.hpo:
            try:
                ProxyPlan(**self.hpo["proxy"])
            except (ContractError, TypeError) as exc:
                raise ConfigError(f"hpo.proxy: {exc}") from None
        if self.protocol["kind"] == "kfold" and "k" not in self.protocol:
            raise ConfigError("kfold protocol needs k")
        try:
            self.train_config(0)
        except ContractError as exc:
            raise ConfigError(f"train: {exc}") from None

    @classmethod
    def load(cls, path):
        path = Path(path)
        try:
            with open(path, "r", encoding="utf-8") as fh:
                raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: not valid JSON ({exc})") from None
        except OSError as exc:
            raise ConfigError(f"{path}: {exc}") from None
        return cls(raw, path.parent)

    @property
    def nas(self):
        return {"strategy": "random", "budget": 0, **self.raw.get("nas", {})}

    @property
    def hpo(self):
        return {"strategy": "random", "budget": 0, "space": "hyper_default",
                **self.raw.get("hpo", {})}

    @property
    def ensemble(self):
        return {"method": "none", "lam": 1e-2, **self.raw.get("ensemble", {})}

    @property
    def seeds(self):
        return list(self.raw.get("seeds", [0]))

    @property
    def protocol(self):
        return self.raw.get("protocol", {"kind": "fixed_split"})

    @property
    def time_budget(self):
        return self.raw.get("time_budget_seconds")

    @property
    def threads(self):
        return self.raw.get("threads") or int(os.environ.get("AGL_THREADS", "1") or 1)

    def train_config(self, seed):
        return TrainConfig(**self.raw.get("train", {}), seed=int(seed))

    def with_overrides(self, seed=None, time_budget=None):
        raw = copy.deepcopy(self.raw)
        if seed is not None:
            raw["seeds"] = [int(seed)]
        if time_budget is not None:
            raw["time_budget_seconds"] = time_budget
        return SolverConfig(raw, self.base_dir)

    def to_json(self):
        return copy.deepcopy(self.raw)


@dataclass
class RunReport:
    config: dict
    ledgers: Dict[str, Ledger] = field(default_factory=lambda: {s: Ledger() for s in STAGES[1:]})
    stages: Dict[str, dict] = field(default_factory=dict)
    best: Dict[str, dict] = field(default_factory=dict)
    metrics: Dict[str, dict] = field(default_factory=dict)
    protocol: dict = field(default_factory=dict)
    budget_truncated: bool = False
    notices: List[str] = field(default_factory=list)
    models: dict = field(default_factory=dict)

    def to_json(self, timing=True):
        obj = {
            "format_version": FORMAT_VERSION,
            "config": self.config,
            "budget_truncated": self.budget_truncated,
            "protocol": self.protocol,
            "stages": self.stages,
            "trials": {s: [r.to_json(timing) for r in self.ledgers.get(s, [])]
                       for s in STAGES[1:]},
            "best": self.best,
            "metrics": self.metrics,
            "notices": list(self.notices),
        }
        return obj if timing else strip_timing(obj)


def strip_timing(obj):
    """Copy of a report object without wall-clock fields."""
    if isinstance(obj, dict):
        return {k: strip_timing(v) for k, v in obj.items() if k not in TIMING_KEYS}
    if isinstance(obj, list):
        return [strip_timing(v) for v in obj]
    return obj


def validate_report(obj):
    try:
        jsonschema.validate(obj, REPORT_SCHEMA)
    except jsonschema.ValidationError as exc:
        raise ConfigError(f"report invalid: {exc.message}") from None
    return obj


# ---------------------------------------------------------------------------
# data and models


def _load_data(cfg: SolverConfig, seed):
    spec = cfg.raw["dataset"]
    if "synthetic" in spec:
        syn = dict(spec["synthetic"])
        kind = syn.pop("kind")
        try:
            if kind == "sbm":
                syn.setdefault("seed", seed)
                return generate_sbm(**syn)
            if kind == "cycles_vs_paths":
                syn.setdefault("seed", seed)
                graphs = generate_graph_task(kind, **syn)
                return graphs, stratified_split(np.array([g.y for g in graphs]), seed=seed)
        except TypeError as exc:
            raise ConfigError(f"dataset.synthetic: {exc}") from None
        raise ConfigError(f"unknown synthetic dataset kind {kind!r}")
    path = Path(spec["path"])
    candidates = [path] if path.is_absolute() else [cfg.base_dir / path, dataset_root() / path]
    for c in candidates:
        if c.is_dir():
            return load_dataset(c, seed=seed, directed=spec.get("directed", False))
    raise ConfigError(f"dataset {spec['path']!r} not found (looked in "
                      f"{', '.join(str(c) for c in candidates)})")


def _task(cfg, data):
    level = "node" if isinstance(data, Graph) else "graph"
    labels = data.y if level == "node" else np.array([g.y for g in data])
    if labels is None:
        raise ConfigError("dataset carries no labels")
    C = cfg.raw["dataset"].get("num_classes") or max(2, int(np.max(labels)) + 1)
    task = TaskSpec(level, int(C))
    task.check_labels(labels)
    return task


def _fixed_descriptor(entry, task):
    if "descriptor" in entry:
        desc = ArchitectureDescriptor.from_json(entry["descriptor"])
    elif "preset" in entry:
        desc = PRESETS[entry["preset"]](**entry.get("preset_args", {}))
    else:
        return None
    if task.level == "graph" and desc.readout is None:
        desc = ArchitectureDescriptor(desc.layers, desc.macro, entry.get("readout", "sum"))
    if task.level == "node" and desc.readout is not None:
        raise ContractError(f"model {entry['name']}: readout given for a node task")
    return desc


def _entry_space(entry, in_dim, task):
    readout = entry.get("readout", "sum") if task.level == "graph" else None
    space = default_spaces(entry["space"], in_dim, entry.get("num_layers", 2), readout, task)
    if entry.get("restrict"):
        space = space.restrict(**entry["restrict"])
    return space


# ---------------------------------------------------------------------------
# pipeline


def _run_nas(cfg, entry, ds, report, deadline, seed, in_dim):
    nas = cfg.nas
    space = _entry_space(entry, in_dim, ds.task)
    ledger = report.ledgers["nas"]
    tcfg = cfg.train_config(seed)
    if "epochs" in nas:
        tcfg = replace(tcfg, epochs=nas["epochs"], patience=min(tcfg.patience, nas["epochs"]))
    est = Estimator(ds, tcfg, None, fidelity="low" if nas.get("data_fraction", 1.0) < 1 else
                    "full", epoch_cap=tcfg.epochs, data_fraction=nas.get("data_fraction", 1.0),
                    deadline=deadline)
    tagged = _Tagger(est, entry["name"])
    budget = nas["budget"]
    start = len(ledger)
    try:
        if nas["strategy"] == "random":
            random_search(space, budget, tagged, seed, ledger, workers=cfg.threads)
        elif nas["strategy"] == "tpe":
            tpe_search(space, budget, tagged, seed, ledger)
        elif nas["strategy"] == "re":
            regularized_evolution(space, budget, tagged, seed, ledger=ledger,
                                  workers=cfg.threads)
        elif nas["strategy"] == "rl":
            rl_search(space, budget, tagged, seed, ledger)
        else:
            if deadline.expired():
                raise BudgetExpired("time budget exhausted")
            state = oneshot_train(space, ds, nas.get("oneshot_epochs", 100), seed,
                                  lr=tcfg.lr, weight_decay=tcfg.weight_decay,
                                  dropout=tcfg.dropout)
            a = oneshot_derive(state)
            rec, _ = evaluate_full(a, ds, tcfg)
            ledger.append(replace(rec, fidelity="oneshot-derived", entry=entry["name"]))
    except BudgetExpired:
        report.budget_truncated = True
    except SearchError as exc:
        report.notices.append(f"nas/{entry['name']}: {exc}")
    ok = [r for r in ledger.records[start:] if r.ok]
    if not ok:
        raise SearchError(f"nas/{entry['name']}: no successful architecture trial")
    best = max(ok, key=lambda r: (r.val_metric, -r.birth_index))
    return space.descriptor(Assignment(dict(best.assignment), space)), best


class _Tagger:
    """Estimator wrapper stamping the model-list entry on every record."""

    def __init__(self, est, name):
        self.est = est
        self.name = name
        self.models = est.models

    def __call__(self, assignment):
        return replace(self.est(assignment), entry=self.name)


def _run_hpo(cfg, entry, desc, ds, report, deadline, seed):
    hpo = cfg.hpo
    space = default_spaces(hpo["space"])
    if hpo.get("restrict"):
        space = space.restrict(**hpo["restrict"])
    tmp = Ledger()
    tcfg = cfg.train_config(seed)
    try:
        if hpo["strategy"] == "proxy":
            res = proxy_hpo(space, ds, desc, ProxyPlan(**hpo.get("proxy", {})), "random", seed,
                            tcfg, tmp, deadline)
            report.notices.extend(res.notices)
        else:
            hpo_run(space, ds, desc, hpo["strategy"], hpo["budget"], seed, tcfg, tmp, deadline)
    except BudgetExpired:
        report.budget_truncated = True
    except SearchError as exc:
        report.notices.append(f"hpo/{entry['name']}: {exc}")
    recs = [report.ledgers["hpo"].append(replace(r, entry=entry["name"])) for r in tmp]
    full = [r for r in recs if r.ok and r.graph_id == "full"]
    if not full:
        return None, None
    best = max(full, key=lambda r: (r.val_metric, -r.birth_index))
    return dict(best.assignment), best


def _splits(cfg, ds_split, labels, n_items, seed):
    proto = cfg.protocol
    if proto["kind"] == "fixed_split":
        return [ds_split]
    return split_kfold(n_items, proto["k"], seed=seed, labels=labels)


def _accuracy(p, y):
    return float(np.mean(np.argmax(p, axis=1) == y)) if y.size else 0.0


def run_pipeline(cfg: SolverConfig) -> RunReport:
    """Run feature engineering, NAS, HPO, training and ensembling in that order.

    NAS and HPO run once, with the first seed on the first split; training
    and ensembling are repeated for every (seed, split) pair.
    """
    deadline = Deadline(cfg.time_budget)
    seeds = cfg.seeds
    report = RunReport(config=cfg.to_json())
    for s in STAGES:
        report.stages[s] = {"status": "skipped", "seconds": 0.0}

    data, split = _load_data(cfg, seeds[0])
    task = _task(cfg, data)
    entries = cfg.raw["models"]
    fixed = {e["name"]: _fixed_descriptor(e, task) for e in entries}
    for e in entries:
        if fixed[e["name"]] is None and cfg.nas["budget"] == 0:
            raise ContractError(f"model {e['name']}: no fixed descriptor and a zero NAS budget")
    n_items = data.num_nodes if task.level == "node" else len(data)
    labels = data.y if task.level == "node" else np.array([g.y for g in data])
    splits = _splits(cfg, split, labels, n_items, seeds[0])
    report.protocol = {"kind": cfg.protocol["kind"], "num_splits": len(splits),
                       "seeds": seeds,
                       "note": "architecture and hyper-parameter search run once on the first "
                               "split with the first seed; training and ensembling repeat per "
                               "split and seed"}

    # features
    t0 = time.perf_counter()
    if cfg.raw.get("features"):
        before = data.num_features if task.level == "node" else data[0].num_features
        pipe = FeaturePipeline(cfg.raw["features"]).fit(data)
        data = pipe.transform(data)
        after = data.num_features if task.level == "node" else data[0].num_features
        report.stages["features"] = {"status": "done", "features_in": int(before),
                                     "features_out": int(after)}
    report.stages["features"]["seconds"] = time.perf_counter() - t0
    in_dim = data.num_features if task.level == "node" else data[0].num_features
    ds0 = Dataset(data, splits[0], task)

    # NAS
    t0 = time.perf_counter()
    descs, nas_best = dict(fixed), {}
    if cfg.nas["budget"] > 0:
        for e in entries:
            if "space" not in e or fixed[e["name"]] is not None:
                continue
            if deadline.expired():
                report.budget_truncated = True
                raise SearchError(f"nas/{e['name']}: time budget expired before any trial")
            descs[e["name"]], nas_best[e["name"]] = _run_nas(cfg, e, ds0, report, deadline,
                                                             seeds[0], in_dim)
        report.stages["nas"] = {"status": "truncated" if report.budget_truncated else "done"}
    report.stages["nas"]["seconds"] = time.perf_counter() - t0

    # HPO
    t0 = time.perf_counter()
    hypers, hpo_best = {e["name"]: {} for e in entries}, {}
    if cfg.hpo["budget"] > 0:
        for e in entries:
            if deadline.expired():
                report.budget_truncated = True
                break
            hyper, rec = _run_hpo(cfg, e, descs[e["name"]], ds0, report, deadline, seeds[0])
            if hyper is not None:
                hypers[e["name"]], hpo_best[e["name"]] = hyper, rec
        report.stages["hpo"] = {"status": "truncated" if report.budget_truncated else "done"}
    report.stages["hpo"]["seconds"] = time.perf_counter() - t0

    for e in entries:
        name = e["name"]
        report.best[name] = {
            "descriptor": descs[name].to_json(),
            "hyper": hypers[name],
            "nas_trial": nas_best[name].birth_index if name in nas_best else None,
            "hpo_trial": hpo_best[name].birth_index if name in hpo_best else None,
        }

    # train + ensemble per (seed, split)
    t_train = t_ens = 0.0
    method = cfg.ensemble["method"]
    runs = []
    for seed in seeds:
        for k, sp in enumerate(splits):
            ds = Dataset(data, sp, task)
            t0 = time.perf_counter()
            models, recs = [], {}
            for e in entries:
                name = e["name"]
                tcfg = cfg.train_config(seed)
                a = Assignment(hypers[name]) if hypers[name] else None
                rec, model = evaluate_full(a, ds, tcfg, descs[name])
                rec = replace(rec, assignment={"model": name, "split": k, "seed": seed,
                                               "hyper": hypers[name]}, entry=name)
                recs[name] = report.ledgers["train"].append(rec)
                models.append(model)
                report.models[(name, seed, k)] = model
            t_train += time.perf_counter() - t0
            t0 = time.perf_counter()
            ens = None
            ok_models = [m for m, e in zip(models, entries) if recs[e["name"]].ok]
            if method != "none" and ok_models:
                ens = _ensemble(method, cfg.ensemble["lam"], ok_models, ds, seed, k,
                                [e["name"] for e in entries if recs[e["name"]].ok])
                ens = report.ledgers["ensemble"].append(ens)
            t_ens += time.perf_counter() - t0
            runs.append((seed, k, recs, ens))
    report.stages["train"] = {"status": "done", "seconds": t_train}
    if method != "none":
        report.stages["ensemble"] = {"status": "done", "method": method, "seconds": t_ens}
    report.metrics = _metrics(runs, entries, method)
    return report


def _ensemble(method, lam, models, ds, seed, k, names):
    g = ds.data
    test, val = ds.split.test, ds.split.val
    y = ds.labels
    if method == "voting":
        p_val = vote(models, g, val) if val.size else np.zeros((0, 1))
        p_test = vote(models, g, test)
    else:
        meta = stack_fit(models, g, val, lam=lam)
        p_val = stack_predict(meta, models, g, val)
        p_test = stack_predict(meta, models, g, test)
    return TrialRecord({"method": method, "members": names, "split": k, "seed": seed,
                        "identities": [model_identity(m) for m in models]},
                       "ensemble", seed, _accuracy(p_val, y[val]), _accuracy(p_test, y[test]),
                       entry="ensemble")


def _summary(values):
    v = np.array(values, dtype=np.float64) * 100.0
    return {"mean": float(v.mean()) if v.size else None,
            "std": float(v.std()) if v.size else None,
            "values": [float(x) for x in v]}


def _metrics(runs, entries, method):
    per_model = {}
    for e in entries:
        name = e["name"]
        recs = [r[2][name] for r in runs if r[2][name].ok]
        per_model[name] = {"test": _summary([r.test_metric for r in recs]),
                           "val": _summary([r.val_metric for r in recs]),
                           "trials": [r.birth_index for r in recs]}
    if method != "none" and all(r[3] is not None for r in runs):
        recs = [r[3] for r in runs]
        final = {"source": "ensemble", "stage": "ensemble",
                 "test": _summary([r.test_metric for r in recs]),
                 "val": _summary([r.val_metric for r in recs]),
                 "trials": [r.birth_index for r in recs]}
    else:
        chosen = []
        for _, _, recs, _ in runs:
            ok = [recs[e["name"]] for e in entries if recs[e["name"]].ok]
            if ok:
                chosen.append(max(ok, key=lambda r: (r.val_metric, -r.birth_index)))
        final = {"source": "best-val model", "stage": "train",
                 "test": _summary([r.test_metric for r in chosen]),
                 "val": _summary([r.val_metric for r in chosen]),
                 "trials": [r.birth_index for r in chosen]}
    return {"final": final, "models": per_model}


# ---------------------------------------------------------------------------
# output


def _fmt(summary):
    if summary is None or summary.get("mean") is None:
        return "n/a"
    return f"{summary['mean']:.1f} ± {summary['std']:.1f}"


def render_summary(obj) -> str:
    """Markdown tables (mean ± std accuracy in percent) from a report object."""
    lines = ["# Run summary", ""]
    m = obj.get("metrics", {})
    lines += ["| model | val acc (%) | test acc (%) |", "|---|---|---|"]
    for name, s in m.get("models", {}).items():
        lines.append(f"| {name} | {_fmt(s['val'])} | {_fmt(s['test'])} |")
    if "final" in m:
        f = m["final"]
        lines.append(f"| **final ({f['source']})** | {_fmt(f['val'])} | {_fmt(f['test'])} |")
    lines += ["", "| stage | status | trials |", "|---|---|---|"]
    for s in STAGES:
        st = obj.get("stages", {}).get(s, {"status": "skipped"})
        n = len(obj.get("trials", {}).get(s, [])) if s != "features" else "-"
        lines.append(f"| {s} | {st.get('status', 'skipped')} | {n} |")
    if obj.get("budget_truncated"):
        lines += ["", "Time budget expired: remaining search budgets were dropped."]
    p = obj.get("protocol", {})
    if p:
        lines += ["", f"Protocol: {p.get('kind')} over {p.get('num_splits')} split(s), "
                      f"seeds {p.get('seeds')}."]
    return "\n".join(lines) + "\n"


def emit_report(report, out_dir):
    """Write ``report.json``, one ``<stage>/trials.csv`` per stage and ``summary.md``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    obj = report.to_json() if isinstance(report, RunReport) else report
    validate_report(obj)
    paths = []
    p = out / "report.json"
    text = json.dumps(obj, sort_keys=True, indent=2, allow_nan=False) + "\n"
    with open(p, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)
    paths.append(p)
    ledgers = report.ledgers if isinstance(report, RunReport) else {}
    for s in STAGES[1:]:
        d = out / s
        d.mkdir(exist_ok=True)
        paths.append(ledgers.get(s, Ledger()).to_csv(d / "trials.csv"))
    p = out / "summary.md"
    with open(p, "w", encoding="utf-8", newline="\n") as fh:
        # render from the written form so ``agl report`` reproduces it exactly
        fh.write(render_summary(json.loads(text)))
    paths.append(p)
    return paths


def load_report(in_dir):
    with open(Path(in_dir) / "report.json", "r", encoding="utf-8") as fh:
        return validate_report(json.load(fh))
