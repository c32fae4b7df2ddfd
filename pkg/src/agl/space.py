"""Typed decision spaces over architectures and training hyper-parameters."""
from __future__ import annotations

import itertools
import json
import math
from collections.abc import Mapping
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .autodiff import ACTIVATIONS
from .errors import ContractError, SatisfiabilityError, SizeError
from .gnn import (AGGREGATIONS, COMBINES, WEIGHT_KINDS, ArchitectureDescriptor, MicroChoice,
                  descriptor_violations)

__all__ = ["Decision", "SearchSpace", "Assignment", "default_spaces", "validate",
           "sample_uniform", "enumerate_space", "MICRO_FIELDS"]

MICRO_FIELDS = ("agg", "weight_kind", "heads", "combine", "dim", "activation")
HYPER_FIELDS = ("lr", "weight_decay", "dropout", "epochs", "hidden_dim")


@dataclass(frozen=True)
class Decision:
    name: str
    kind: str
    domain: tuple
    role: str = "architecture"

    def __post_init__(self):
        if self.kind not in ("categorical", "integer_range", "log_uniform"):
            raise ContractError(f"{self.name}: unknown decision kind {self.kind!r}")
        dom = tuple(self.domain)
        if not dom:
            raise ContractError(f"{self.name}: empty domain")
        if self.kind != "categorical":
            if len(dom) != 2 or dom[0] > dom[1]:
                raise ContractError(f"{self.name}: bounds must be an ordered pair")
            if self.kind == "log_uniform" and dom[0] <= 0:
                raise ContractError(f"{self.name}: log-uniform bounds must be positive")
        object.__setattr__(self, "domain", dom)
        if self.role not in ("architecture", "hyper"):
            raise ContractError(f"{self.name}: unknown role {self.role!r}")

    @property
    def finite(self):
        return self.kind != "log_uniform"

    def values(self):
        if self.kind == "categorical":
            return list(self.domain)
        if self.kind == "integer_range":
            return list(range(int(self.domain[0]), int(self.domain[1]) + 1))
        raise ContractError(f"{self.name}: continuous decision has no finite domain")

    def size(self):
        return len(self.values()) if self.finite else math.inf

    def contains(self, v):
        if self.kind == "categorical":
            return v in self.domain
        lo, hi = self.domain
        if self.kind == "integer_range":
            return isinstance(v, (int, np.integer)) and lo <= v <= hi
        return lo <= v <= hi

    def sample(self, rng):
        if self.kind == "categorical":
            return _py(self.domain[int(rng.integers(len(self.domain)))])
        lo, hi = self.domain
        if self.kind == "integer_range":
            return int(rng.integers(int(lo), int(hi) + 1))
        return float(math.exp(rng.uniform(math.log(lo), math.log(hi))))

    def to_json(self):
        return {"name": self.name, "kind": self.kind, "domain": list(self.domain),
                "role": self.role}


def _py(v):
    if isinstance(v, np.generic):
        return v.item()
    return v


class Assignment(Mapping):
    """Immutable decision-name -> value map with a canonical JSON identity."""

    def __init__(self, values, space: Optional["SearchSpace"] = None):
        self._values = {k: _py(v) for k, v in dict(values).items()}
        self.space = space

    def __getitem__(self, k):
        return self._values[k]

    def __iter__(self):
        return iter(self._values)

    def __len__(self):
        return len(self._values)

    def __eq__(self, other):
        if isinstance(other, Assignment):
            return self._values == other._values
        return NotImplemented

    def __hash__(self):
        return hash(self.key())

    def __repr__(self):
        return f"Assignment({self._values})"

    def key(self):
        return json.dumps(self._values, sort_keys=True, separators=(",", ":"))

    encode = key

    @classmethod
    def decode(cls, text, space=None):
        return cls(json.loads(text), space)

    def with_value(self, name, value):
        vals = dict(self._values)
        vals[name] = value
        return Assignment(vals, self.space)

    def hyper(self):
        if self.space is None:
            return {k: v for k, v in self._values.items() if k in HYPER_FIELDS}
        return {d.name: self._values[d.name] for d in self.space.decisions if d.role == "hyper"}

    @property
    def descriptor(self):
        if self.space is None:
            raise ContractError("assignment is not bound to a space")
        return self.space.descriptor(self)


class SearchSpace:
    """Ordered decisions plus the template they fill in.

    Architecture decisions are named ``l{layer}.{field}`` for micro choices
    and ``macro.{j}.{l}`` for wiring; a ``hidden_dim`` hyper decision
    overrides every layer's width.  Unsearched fields come from ``base``.
    """

    def __init__(self, decisions, base: Optional[ArchitectureDescriptor] = None,
                 input_dim=None, task=None):
        self.decisions = tuple(decisions)
        names = [d.name for d in self.decisions]
        if len(set(names)) != len(names):
            raise ContractError("decision names must be unique")
        self.base = base
        self.input_dim = input_dim
        self.task = task
        self._by_name = {d.name: d for d in self.decisions}

    def __repr__(self):
        return f"SearchSpace({[d.name for d in self.decisions]})"

    def __contains__(self, name):
        return name in self._by_name

    def __getitem__(self, name):
        return self._by_name[name]

    @property
    def names(self):
        return [d.name for d in self.decisions]

    @property
    def finite(self):
        return all(d.finite for d in self.decisions)

    def cardinality(self):
        return math.prod(d.size() for d in self.decisions)

    def has_architecture(self):
        return self.base is not None

    def __add__(self, other):
        base = self.base if self.base is not None else other.base
        return SearchSpace(self.decisions + other.decisions, base,
                           self.input_dim if self.input_dim is not None else other.input_dim,
                           self.task or other.task)

    def with_context(self, input_dim=None, task=None, base=None):
        return SearchSpace(self.decisions, base if base is not None else self.base,
                           input_dim if input_dim is not None else self.input_dim,
                           task if task is not None else self.task)

    def restrict(self, **domains):
        """Copy with the named decisions narrowed to the given value lists."""
        decisions = []
        for d in self.decisions:
            if d.name.replace(".", "__") in domains or d.name in domains:
                vals = domains.get(d.name, domains.get(d.name.replace(".", "__")))
                vals = vals if isinstance(vals, (list, tuple)) else [vals]
                decisions.append(Decision(d.name, "categorical", tuple(vals), d.role))
            else:
                decisions.append(d)
        return SearchSpace(decisions, self.base, self.input_dim, self.task)

    def descriptor(self, assignment) -> Optional[ArchitectureDescriptor]:
        if self.base is None:
            return None
        layers = []
        n_layers = int(assignment.get("num_layers", self.base.num_layers))
        for l in range(1, n_layers + 1):
            tmpl = self.base.layers[min(l, self.base.num_layers) - 1]
            fields = {f: assignment.get(f"l{l}.{f}", getattr(tmpl, f)) for f in MICRO_FIELDS}
            if "hidden_dim" in assignment:
                fields["dim"] = assignment["hidden_dim"]
            layers.append(MicroChoice(**fields))
        macro = {(l - 1, l): "mp" for l in range(1, n_layers + 1)}
        if "num_layers" not in assignment:
            macro = self.base.macro_map() or macro
        for name, v in assignment.items():
            if name.startswith("macro."):
                _, j, l = name.split(".")
                if int(l) <= n_layers:
                    macro[(int(j), int(l))] = v
        return ArchitectureDescriptor(tuple(layers), macro, self.base.readout)

    def violations(self, assignment):
        unknown = [k for k in assignment if k not in self._by_name]
        if unknown:
            raise ContractError(f"unknown decisions: {unknown}")
        out = []
        for d in self.decisions:
            if d.name not in assignment:
                out.append(f"missing:{d.name}")
            elif not d.contains(assignment[d.name]):
                out.append(f"domain:{d.name}")
        if out or self.base is None:
            return out
        return descriptor_violations(self.descriptor(assignment), self.input_dim, self.task)

    def bind(self, values):
        return Assignment(values, self)

    def to_json(self):
        return {"decisions": [d.to_json() for d in self.decisions],
                "base": None if self.base is None else self.base.to_json(),
                "input_dim": self.input_dim}


def validate(space: SearchSpace, assignment):
    """``[]`` when valid, else the names of every violated constraint."""
    return space.violations(assignment)


def sample_uniform(space: SearchSpace, seed=0, max_rejections=1000):
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    for _ in range(max_rejections + 1):
        a = Assignment({d.name: d.sample(rng) for d in space.decisions}, space)
        if not space.violations(a):
            return a
    raise SatisfiabilityError(f"no valid assignment after {max_rejections} rejections")


def enumerate_space(space: SearchSpace, cap=10000):
    """All valid assignments in lexicographic domain order; raises if more than ``cap``."""
    if not space.finite:
        raise ContractError("cannot enumerate a space with continuous decisions")
    names = space.names
    valid = []
    for combo in itertools.product(*(d.values() for d in space.decisions)):
        a = Assignment(dict(zip(names, combo)), space)
        if not space.violations(a):
            valid.append(a)
    if len(valid) > cap:
        raise SizeError(f"space has {len(valid)} valid assignments, cap is {cap}", len(valid))
    return iter(valid)


def _micro_decisions(layers, agg, wk, heads, combine, dims, acts):
    out = []
    for l in range(1, layers + 1):
        out += [
            Decision(f"l{l}.agg", "categorical", tuple(agg)),
            Decision(f"l{l}.weight_kind", "categorical", tuple(wk)),
            Decision(f"l{l}.heads", "categorical", tuple(heads)),
            Decision(f"l{l}.combine", "categorical", tuple(combine)),
            Decision(f"l{l}.dim", "categorical", tuple(dims)),
            Decision(f"l{l}.activation", "categorical", tuple(acts)),
        ]
    return out


def default_spaces(profile, input_dim=None, num_layers=2, readout=None, task=None):
    """Built-in spaces: ``micro_full``, ``micro_small``, ``various``, ``hyper_default``."""
    base = ArchitectureDescriptor(tuple(MicroChoice() for _ in range(num_layers)),
                                  readout=readout)
    if profile == "micro_full":
        return SearchSpace(_micro_decisions(
            num_layers, AGGREGATIONS, WEIGHT_KINDS, (1, 2, 4, 6, 8, 16), COMBINES,
            (8, 16, 32, 64, 128, 256, 512), tuple(ACTIVATIONS)), base, input_dim, task)
    if profile in ("micro_small", "various"):
        layers = 2 if profile == "micro_small" else 4
        base = ArchitectureDescriptor(tuple(MicroChoice() for _ in range(layers)),
                                      readout=readout)
        decisions = _micro_decisions(layers, ("sum", "mean", "max"),
                                     ("const", "gcn", "gat", "cos"), (1, 2), ("add", "concat"),
                                     (16, 32, 64), ("relu", "tanh", "elu", "identity"))
        decisions.append(Decision("macro.0.2", "categorical", ("zero", "identity", "mlp")))
        if profile == "various":
            decisions.insert(0, Decision("num_layers", "categorical", (2, 3, 4)))
        return SearchSpace(decisions, base, input_dim, task)
    if profile == "hyper_default":
        return SearchSpace([
            Decision("lr", "log_uniform", (1e-4, 1e-1), "hyper"),
            Decision("weight_decay", "log_uniform", (1e-6, 1e-2), "hyper"),
            Decision("dropout", "categorical", (0.0, 0.2, 0.5, 0.8), "hyper"),
            Decision("epochs", "integer_range", (50, 400), "hyper"),
            Decision("hidden_dim", "categorical", (16, 32, 64, 128), "hyper"),
        ], None, input_dim, task)
    raise ContractError(f"unknown space profile {profile!r}")
