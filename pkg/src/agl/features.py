"""Node feature generators, constant-column selection and graph signatures."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components
from sklearn.base import BaseEstimator, TransformerMixin

from .errors import ContractError, NumericalError, SelectionError
from .graph import Graph

__all__ = [
    "FeatureOpSpec", "GraphSignature", "generate_features", "select_features",
    "graph_signature", "pagerank", "eigen_features", "local_degree_profile",
    "FeatureGenerator", "ConstantFilter", "FeaturePipeline",
]

GENERATORS = ("onehot_degree", "pagerank", "eigen", "local_degree_profile",
              "normalize_rows", "onehot_id")
SELECTORS = ("filter_constant",)

_DEFAULTS = {
    "onehot_degree": {"max_degree": None},
    "pagerank": {"damping": 0.85, "tol": 1e-12, "max_iter": 1000},
    "eigen": {"k_eigen": 4, "tol": 1e-8, "max_iter": 10000, "seed": 0},
    "local_degree_profile": {},
    "normalize_rows": {},
    "onehot_id": {},
    "filter_constant": {"variance_floor": 1e-12},
}


@dataclass
class FeatureOpSpec:
    kind: str
    params: dict = field(default_factory=dict)
    replace: bool = False

    def __post_init__(self):
        if self.kind not in _DEFAULTS:
            raise ContractError(f"unknown feature op {self.kind!r}")
        merged = dict(_DEFAULTS[self.kind])
        unknown = set(self.params) - set(merged)
        if unknown:
            raise ContractError(f"{self.kind}: unknown params {sorted(unknown)}")
        merged.update(self.params)
        self.params = merged
        p = merged
        if self.kind == "pagerank" and not 0.0 < p["damping"] < 1.0:
            raise ContractError("pagerank damping must lie in (0, 1)")
        if self.kind == "eigen" and not 1 <= p["k_eigen"] <= 8:
            raise ContractError("k_eigen must lie in [1, 8]")
        if self.kind == "onehot_degree" and p["max_degree"] is not None and p["max_degree"] < 0:
            raise ContractError("max_degree must be non-negative")
        if self.kind == "filter_constant" and p["variance_floor"] < 0:
            raise ContractError("variance_floor must be non-negative")

    @classmethod
    def from_json(cls, obj):
        obj = dict(obj)
        return cls(obj.pop("kind"), obj.pop("params", {}), obj.pop("replace", False))

    def to_json(self):
        return {"kind": self.kind, "params": self.params, "replace": self.replace}


@dataclass(frozen=True)
class GraphSignature:
    num_nodes: int
    num_edges: int
    num_triangles: int
    global_clustering: float
    max_degree: int
    num_components: int

    def vector(self):
        return np.array([self.num_nodes, self.num_edges, self.num_triangles,
                         self.global_clustering, self.max_degree, self.num_components],
                        dtype=np.float64)

    def to_json(self):
        return asdict(self)


def _sym_adjacency(g: Graph):
    """Binary symmetric adjacency without self-loops."""
    a = g.adjacency()
    a = ((a + a.T) > 0).astype(np.float64).tocsr()
    a.setdiag(0)
    a.eliminate_zeros()
    return a


def pagerank(g: Graph, damping=0.85, tol=1e-12, max_iter=1000):
    """Power-iteration PageRank over arcs; dangling mass is spread uniformly."""
    n = g.num_nodes
    if n == 0:
        return np.zeros(0)
    out_deg = g.out_degree().astype(np.float64)
    # T[i, j] = 1/outdeg(j) for arc j -> i
    w = 1.0 / out_deg[g.src]
    T = sp.csr_matrix((w, (g.dst, g.src)), shape=(n, n))
    dangling = out_deg == 0
    r = np.full(n, 1.0 / n)
    resid = np.inf
    for _ in range(max_iter):
        nxt = damping * (T @ r + r[dangling].sum() / n) + (1.0 - damping) / n
        resid = np.abs(nxt - r).sum()
        r = nxt
        if resid < tol:
            return r / r.sum()
    raise NumericalError(f"pagerank did not converge in {max_iter} iterations", resid)


def eigen_features(g: Graph, k_eigen=4, tol=1e-8, max_iter=10000, seed=0):
    """Top-``k`` eigenvectors of the symmetric normalised adjacency.

    Power iteration on ``(I + D^-1/2 A D^-1/2) / 2`` (spectrum in [0, 1])
    with deflation and re-orthogonalisation against earlier vectors.
    """
    n = g.num_nodes
    if k_eigen > n:
        raise ContractError(f"k_eigen={k_eigen} exceeds num_nodes={n}")
    a = _sym_adjacency(g)
    deg = np.asarray(a.sum(axis=1)).ravel()
    inv = np.where(deg > 0, 1.0 / np.sqrt(np.maximum(deg, 1e-300)), 0.0)
    m = sp.diags(inv) @ a @ sp.diags(inv)
    rng = np.random.default_rng(seed)
    vecs = []
    for _ in range(k_eigen):
        v = rng.standard_normal(n)
        resid = np.inf
        for _ in range(max_iter):
            for u in vecs:
                v -= (u @ v) * u
            v /= np.linalg.norm(v)
            mv = 0.5 * (v + m @ v)
            for u in vecs:
                mv -= (u @ mv) * u
            lam = v @ mv
            resid = np.linalg.norm(mv - lam * v)
            if resid < tol:
                break
            v = mv
        else:
            raise NumericalError("eigen power iteration did not converge", resid)
        v = v / np.linalg.norm(v)
        if v[np.argmax(np.abs(v))] < 0:
            v = -v
        vecs.append(v)
    return np.stack(vecs, axis=1)


def local_degree_profile(g: Graph):
    """Own degree and min/max/mean/std of neighbour degrees (0 when isolated)."""
    a = _sym_adjacency(g)
    deg = np.asarray(a.sum(axis=1)).ravel()
    n = g.num_nodes
    out = np.zeros((n, 5))
    out[:, 0] = deg
    a = a.tocsr()
    for i in range(n):
        nb = a.indices[a.indptr[i]:a.indptr[i + 1]]
        if nb.size:
            d = deg[nb]
            out[i, 1:] = (d.min(), d.max(), d.mean(), d.std())
    return out


def _onehot_degree(g: Graph, max_degree):
    deg = g.degree()
    cap = int(deg.max() if deg.size else 0) if max_degree is None else int(max_degree)
    out = np.zeros((g.num_nodes, cap + 1))
    out[np.arange(g.num_nodes), np.minimum(deg, cap)] = 1.0
    return out


def _normalize_rows(x):
    s = np.abs(x).sum(axis=1, keepdims=True)
    return np.where(s > 0, x / np.where(s > 0, s, 1.0), x)


def generate_features(g: Graph, spec: FeatureOpSpec) -> Graph:
    """Append generated columns (or replace the matrix when ``spec.replace``)."""
    p = spec.params
    if spec.kind == "filter_constant":
        return select_features(g, spec)
    if spec.kind == "normalize_rows":
        return g.with_features(_normalize_rows(g.x))
    if spec.kind == "onehot_degree":
        new = _onehot_degree(g, p["max_degree"])
    elif spec.kind == "pagerank":
        new = pagerank(g, p["damping"], p["tol"], p["max_iter"])[:, None]
    elif spec.kind == "eigen":
        new = eigen_features(g, p["k_eigen"], p["tol"], p["max_iter"], p["seed"])
    elif spec.kind == "local_degree_profile":
        new = local_degree_profile(g)
    else:
        new = np.eye(g.num_nodes)
    x = new if spec.replace else np.concatenate([g.x, new], axis=1)
    return g.with_features(x)


def column_variance(x):
    x = np.asarray(x, dtype=np.float64)
    mu = x.mean(axis=0)
    return ((x - mu) ** 2).mean(axis=0)


def select_features(g: Graph, spec: FeatureOpSpec = None) -> Graph:
    """Drop columns whose variance falls below ``variance_floor``."""
    spec = spec or FeatureOpSpec("filter_constant")
    keep = column_variance(g.x) >= spec.params["variance_floor"]
    if not keep.any():
        raise SelectionError("every feature column is constant")
    if keep.all():
        return g
    return g.with_features(g.x[:, keep])


def graph_signature(g: Graph) -> GraphSignature:
    """Six explainable statistics of the undirected simple graph underlying ``g``."""
    n = g.num_nodes
    if n == 0:
        return GraphSignature(0, 0, 0, 0.0, 0, 0)
    a = _sym_adjacency(g)
    deg = np.asarray(a.sum(axis=1)).ravel()
    closed = (a @ a).multiply(a).sum()
    triangles = int(round(closed / 6.0))
    wedges = float(np.sum(deg * (deg - 1) / 2.0))
    clustering = 3.0 * triangles / wedges if wedges > 0 else 0.0
    ncomp, _ = connected_components(a, directed=False)
    return GraphSignature(n, int(a.nnz // 2), triangles, float(clustering),
                          int(deg.max()), int(ncomp))


# ---------------------------------------------------------------------------
# estimator wrappers


def _apply(data, fn):
    if isinstance(data, Graph):
        return fn(data)
    return [fn(g) for g in data]


class FeatureGenerator(BaseEstimator, TransformerMixin):
    """Stateless generator usable inside sklearn-style pipelines of graphs."""

    def __init__(self, kind="pagerank", params=None, replace=False):
        self.kind = kind
        self.params = params
        self.replace = replace

    def fit(self, data, y=None):
        self.spec_ = FeatureOpSpec(self.kind, dict(self.params or {}), self.replace)
        return self

    def transform(self, data):
        spec = getattr(self, "spec_", None) or FeatureOpSpec(self.kind, dict(self.params or {}),
                                                             self.replace)
        return _apply(data, lambda g: generate_features(g, spec))


class ConstantFilter(BaseEstimator, TransformerMixin):
    """Learn which feature columns vary on the fitted data and keep only those."""

    def __init__(self, variance_floor=1e-12):
        self.variance_floor = variance_floor

    def fit(self, data, y=None):
        x = data.x if isinstance(data, Graph) else np.concatenate([g.x for g in data], axis=0)
        self.keep_ = column_variance(x) >= self.variance_floor
        if not self.keep_.any():
            raise SelectionError("every feature column is constant")
        return self

    def transform(self, data):
        return _apply(data, lambda g: g.with_features(g.x[:, self.keep_]))


class FeaturePipeline(BaseEstimator, TransformerMixin):
    """Ordered list of :class:`FeatureOpSpec` applied as in a solver config."""

    def __init__(self, specs=()):
        self.specs = specs

    def _steps(self):
        out = []
        for s in self.specs:
            s = s if isinstance(s, FeatureOpSpec) else FeatureOpSpec.from_json(s)
            if s.kind == "filter_constant":
                out.append(ConstantFilter(s.params["variance_floor"]))
            else:
                out.append(FeatureGenerator(s.kind, s.params, s.replace))
        return out

    def fit(self, data, y=None):
        self.steps_ = []
        for step in self._steps():
            data = step.fit(data).transform(data)
            self.steps_.append(step)
        return self

    def transform(self, data):
        for step in self.steps_:
            data = step.transform(data)
        return data
