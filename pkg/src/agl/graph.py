"""Graph containers, dataset I/O, synthetic generators, splitting and sampling."""
from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import scipy.sparse as sp

from .errors import ContractError, ParseError, ValidationError

__all__ = [
    "Graph",
    "DatasetSplit",
    "TaskSpec",
    "load_dataset",
    "write_dataset",
    "generate_sbm",
    "generate_graph_task",
    "split_kfold",
    "stratified_split",
    "restrict_split",
    "sample_subgraph_rw",
    "batch_graphs",
    "GraphBatch",
]


def _frozen(a, dtype):
    a = np.ascontiguousarray(a, dtype=dtype)
    a.setflags(write=False)
    return a


class Graph:
    """Immutable attributed graph.

    Arcs are stored as parallel ``src``/``dst`` arrays; a message flows from
    ``src`` to ``dst`` so the neighbourhood of node ``i`` is ``src[dst == i]``.
    Undirected graphs hold every edge as two arcs.
    """

    def __init__(self, num_nodes, src, dst, x=None, y=None, edge_attr=None,
                 directed=False, allow_self_loops=False, meta=None):
        num_nodes = int(num_nodes)
        if num_nodes < 0:
            raise ValidationError("num_nodes must be non-negative")
        src = np.asarray(src, dtype=np.int64).reshape(-1)
        dst = np.asarray(dst, dtype=np.int64).reshape(-1)
        if src.shape != dst.shape:
            raise ValidationError("src and dst must have equal length")
        if src.size and (src.min() < 0 or dst.min() < 0
                         or src.max() >= num_nodes or dst.max() >= num_nodes):
            raise ValidationError("arc endpoint out of range [0, num_nodes)")
        if not allow_self_loops and np.any(src == dst):
            raise ValidationError("self-loop present but not flagged as allowed")
        # canonical arc order: by destination, then source
        order = np.lexsort((src, dst))
        src, dst = src[order], dst[order]
        if edge_attr is not None:
            edge_attr = np.asarray(edge_attr, dtype=np.float64)[order]
        if not directed:
            fwd = src * num_nodes + dst
            rev = dst * num_nodes + src
            if not np.array_equal(np.sort(fwd), np.sort(rev)):
                raise ValidationError("undirected graph must store both arcs of each edge")
        if x is None:
            x = np.ones((num_nodes, 1))
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[0] != num_nodes:
            raise ValidationError(
                f"feature matrix has {x.shape[0] if x.ndim else 0} rows, expected {num_nodes}")
        self.num_nodes = num_nodes
        self.src = _frozen(src, np.int64)
        self.dst = _frozen(dst, np.int64)
        self.x = _frozen(x, np.float64)
        self.edge_attr = None if edge_attr is None else _frozen(edge_attr, np.float64)
        if y is not None:
            y = np.asarray(y, dtype=np.int64)
            y = _frozen(y, np.int64) if y.ndim else int(y)
        self.y = y
        self.directed = bool(directed)
        self.allow_self_loops = bool(allow_self_loops)
        self.meta = dict(meta or {})
        self._cache = {}

    @property
    def num_arcs(self):
        return int(self.src.size)

    @property
    def num_edges(self):
        """Undirected edge count (arc pairs) or arc count when directed."""
        if self.directed:
            return self.num_arcs
        loops = int(np.sum(self.src == self.dst))
        return (self.num_arcs - loops) // 2 + loops

    @property
    def num_features(self):
        return int(self.x.shape[1])

    def in_degree(self):
        return np.bincount(self.dst, minlength=self.num_nodes)

    def out_degree(self):
        return np.bincount(self.src, minlength=self.num_nodes)

    def degree(self):
        """Undirected degree (in-degree for undirected graphs)."""
        if not self.directed:
            return self.in_degree()
        a = self.adjacency()
        a = ((a + a.T) > 0).astype(np.int64)
        return np.asarray(a.sum(axis=1)).ravel()

    def adjacency(self):
        """Sparse ``A`` with ``A[dst, src] = 1`` (row i lists the neighbourhood of i)."""
        if "adj" not in self._cache:
            n = self.num_nodes
            a = sp.csr_matrix((np.ones(self.num_arcs), (self.dst, self.src)), shape=(n, n))
            a.sum_duplicates()
            self._cache["adj"] = a
        return self._cache["adj"]

    def out_neighbors(self):
        """CSR pointer and index arrays of out-neighbours, for walks."""
        if "out" not in self._cache:
            order = np.lexsort((self.dst, self.src))
            ptr = np.zeros(self.num_nodes + 1, dtype=np.int64)
            np.cumsum(np.bincount(self.src, minlength=self.num_nodes), out=ptr[1:])
            self._cache["out"] = (ptr, self.dst[order])
        return self._cache["out"]

    def undirected_edges(self):
        """Sorted unique ``(u, v)`` pairs with ``u <= v``."""
        u = np.minimum(self.src, self.dst)
        v = np.maximum(self.src, self.dst)
        pairs = np.unique(np.stack([u, v], axis=1), axis=0) if u.size else np.zeros((0, 2), np.int64)
        return pairs

    def with_features(self, x):
        return Graph(self.num_nodes, self.src, self.dst, x=x, y=self.y,
                     edge_attr=self.edge_attr, directed=self.directed,
                     allow_self_loops=self.allow_self_loops, meta=self.meta)

    def permute(self, perm):
        """Relabel nodes: old node ``i`` becomes ``perm[i]``."""
        perm = np.asarray(perm, dtype=np.int64)
        inv = np.empty_like(perm)
        inv[perm] = np.arange(perm.size)
        y = self.y
        if isinstance(y, np.ndarray):
            y = y[inv]
        return Graph(self.num_nodes, perm[self.src], perm[self.dst], x=self.x[inv], y=y,
                     directed=self.directed, allow_self_loops=self.allow_self_loops,
                     meta=self.meta)

    def subgraph(self, nodes):
        """Induced subgraph on ``nodes`` (kept in the given order)."""
        nodes = np.asarray(nodes, dtype=np.int64)
        remap = np.full(self.num_nodes, -1, dtype=np.int64)
        remap[nodes] = np.arange(nodes.size)
        keep = (remap[self.src] >= 0) & (remap[self.dst] >= 0)
        y = self.y
        if isinstance(y, np.ndarray):
            y = y[nodes]
        ea = None if self.edge_attr is None else self.edge_attr[keep]
        return Graph(nodes.size, remap[self.src[keep]], remap[self.dst[keep]],
                     x=self.x[nodes], y=y, edge_attr=ea, directed=self.directed,
                     allow_self_loops=self.allow_self_loops)

    def __repr__(self):
        return (f"Graph(num_nodes={self.num_nodes}, num_arcs={self.num_arcs}, "
                f"num_features={self.num_features}, directed={self.directed})")

    @classmethod
    def from_edges(cls, num_nodes, edges, directed=False, **kwargs):
        edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
        src, dst = edges[:, 0], edges[:, 1]
        if not directed:
            loops = src == dst
            src, dst = np.concatenate([src, dst[~loops]]), np.concatenate([dst, src[~loops]])
            # drop duplicate arcs produced by edges listed in both directions
            key = np.unique(src * max(num_nodes, 1) + dst)
            src, dst = key // max(num_nodes, 1), key % max(num_nodes, 1)
        return cls(num_nodes, src, dst, directed=directed, **kwargs)


@dataclass(frozen=True)
class DatasetSplit:
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray
    fold_id: Optional[int] = None

    def __post_init__(self):
        for name in ("train", "val", "test"):
            object.__setattr__(self, name, _frozen(getattr(self, name), np.int64))
        sets = [set(self.train.tolist()), set(self.val.tolist()), set(self.test.tolist())]
        if sets[0] & sets[1] or sets[0] & sets[2] or sets[1] & sets[2]:
            raise ValidationError("train/val/test index sets must be pairwise disjoint")

    def check(self, n_items, supervised=True):
        for name in ("train", "val", "test"):
            idx = getattr(self, name)
            if idx.size and (idx.min() < 0 or idx.max() >= n_items):
                raise ValidationError(f"{name} index out of range [0, {n_items})")
            if supervised and idx.size == 0:
                raise ContractError(f"{name} split is empty")
        return self

    def to_json(self):
        out = {"train": self.train.tolist(), "val": self.val.tolist(), "test": self.test.tolist()}
        if self.fold_id is not None:
            out["fold_id"] = self.fold_id
        return out


@dataclass(frozen=True)
class TaskSpec:
    level: str = "node"
    num_classes: int = 2
    metric: str = "accuracy"

    def __post_init__(self):
        if self.level not in ("node", "graph"):
            raise ContractError(f"unknown task level {self.level!r}")
        if self.num_classes < 2:
            raise ContractError("num_classes must be >= 2")
        if self.metric != "accuracy":
            raise ContractError(f"unsupported metric {self.metric!r}")

    def check_labels(self, labels):
        labels = np.asarray(labels)
        if labels.size and (labels.min() < 0 or labels.max() >= self.num_classes):
            raise ValidationError(f"labels must lie in [0, {self.num_classes})")


# ---------------------------------------------------------------------------
# dataset directories


def _read_lines(path):
    with open(path, "r", encoding="utf-8") as fh:
        return fh.read().split("\n")


def _parse_rows(path, cast, width=None):
    rows = []
    for lineno, line in enumerate(_read_lines(path), start=1):
        if not line.strip():
            continue
        try:
            row = [cast(tok) for tok in line.split(",")]
        except ValueError as exc:
            raise ParseError(f"malformed row {line!r} ({exc})", path, lineno) from None
        if width is not None and len(row) != width:
            raise ParseError(f"expected {width} values, got {len(row)}", path, lineno)
        rows.append(row)
    return rows


def load_dataset(path, task: Optional[TaskSpec] = None, seed=0, directed=False):
    """Load a node-level or graph-level dataset directory.

    Node datasets return ``(Graph, DatasetSplit)``; graph datasets (a
    ``graphs.jsonl`` file) return ``(list[Graph], DatasetSplit)``.  When no
    ``splits.json`` is present a stratified 60/20/20 split is drawn from
    ``seed``.
    """
    path = Path(path)
    if (path / "graphs.jsonl").exists():
        graphs = _load_graph_dataset(path / "graphs.jsonl")
        labels = np.array([g.y for g in graphs])
        if task is not None:
            task.check_labels(labels)
        split = _load_or_make_split(path, labels, len(graphs), seed)
        return graphs, split

    edges_path = path / "edges.csv"
    if not edges_path.exists():
        raise ContractError(f"{path} holds neither edges.csv nor graphs.jsonl")
    feats = np.array(_parse_rows(path / "features.csv", float), dtype=np.float64) \
        if (path / "features.csv").exists() else None
    n = feats.shape[0] if feats is not None else None
    labels = None
    if (path / "labels.csv").exists():
        labels = np.array([r[0] for r in _parse_rows(path / "labels.csv", int, width=1)],
                          dtype=np.int64)
        n = labels.size if n is None else n
        if labels.size != n:
            raise ValidationError(f"labels.csv has {labels.size} rows, features.csv has {n}")
    elif task is not None:
        raise ContractError("labels.csv missing for a supervised task")
    raw = _parse_rows(edges_path, int, width=2)
    edges = np.array(raw, dtype=np.int64).reshape(-1, 2)
    if n is None:
        n = int(edges.max()) + 1 if edges.size else 0
    if edges.size and (edges.min() < 0 or edges.max() >= n):
        bad = int(np.argmax((edges.min(axis=1) < 0) | (edges.max(axis=1) >= n)))
        raise ValidationError(f"edges.csv row {bad + 1}: node index out of range [0, {n})")
    loops = int(np.sum(edges[:, 0] == edges[:, 1])) if edges.size else 0
    edges = edges[edges[:, 0] != edges[:, 1]] if edges.size else edges
    g = Graph.from_edges(n, edges, directed=directed, x=feats, y=labels)
    g.meta.update(raw_edge_count=len(raw), dedup_edge_count=g.num_edges, dropped_self_loops=loops)
    if task is not None and labels is not None:
        task.check_labels(labels)
    split = _load_or_make_split(path, labels, n, seed)
    return g, split


def _load_graph_dataset(path):
    graphs = []
    for lineno, line in enumerate(_read_lines(path), start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
            feats = np.asarray(obj["features"], dtype=np.float64)
            edges = np.asarray(obj.get("edges", []), dtype=np.int64).reshape(-1, 2)
            label = int(obj["label"])
        except (ValueError, KeyError, TypeError) as exc:
            raise ParseError(f"malformed graph record ({exc})", path, lineno) from None
        n = feats.shape[0]
        if edges.size and (edges.min() < 0 or edges.max() >= n):
            raise ValidationError(f"{path}:{lineno}: edge endpoint out of range [0, {n})")
        edges = edges[edges[:, 0] != edges[:, 1]]
        graphs.append(Graph.from_edges(n, edges, x=feats, y=label))
    return graphs


def _load_or_make_split(path, labels, n, seed):
    sp_path = path / "splits.json"
    if sp_path.exists():
        with open(sp_path, "r", encoding="utf-8") as fh:
            obj = json.load(fh)
        split = DatasetSplit(np.array(obj["train"], dtype=np.int64),
                             np.array(obj["val"], dtype=np.int64),
                             np.array(obj["test"], dtype=np.int64), obj.get("fold_id"))
        return split.check(n, supervised=False)
    if labels is None:
        labels = np.zeros(n, dtype=np.int64)
    return stratified_split(labels, seed=seed)


def _fmt_float(v):
    return repr(float(v))


def write_dataset(path, data, split: Optional[DatasetSplit] = None):
    """Write ``data`` (a Graph or list of Graphs) in canonical directory form."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    if isinstance(data, Graph):
        g = data
        if g.directed:
            lines = [f"{u},{v}" for u, v in zip(g.src.tolist(), g.dst.tolist())]
        else:
            lines = [f"{u},{v}" for u, v in g.undirected_edges().tolist()]
        _write_text(path / "edges.csv", lines)
        _write_text(path / "features.csv",
                    [",".join(_fmt_float(v) for v in row) for row in g.x.tolist()])
        if isinstance(g.y, np.ndarray):
            _write_text(path / "labels.csv", [str(int(v)) for v in g.y.tolist()])
    else:
        rows = []
        for g in data:
            rows.append(json.dumps({
                "edges": g.undirected_edges().tolist(),
                "features": g.x.tolist(),
                "label": int(g.y),
            }, separators=(",", ":")))
        _write_text(path / "graphs.jsonl", rows)
    if split is not None:
        with open(path / "splits.json", "w", encoding="utf-8", newline="\n") as fh:
            json.dump(split.to_json(), fh, separators=(",", ":"), sort_keys=True)
            fh.write("\n")
    return path


def _write_text(path, lines):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for line in lines:
            fh.write(line + "\n")


# ---------------------------------------------------------------------------
# splitting


def stratified_split(labels, fractions=(0.6, 0.2, 0.2), seed=0):
    """Per-class shuffled split into train/val/test by ``fractions``."""
    labels = np.asarray(labels)
    rng = np.random.default_rng(seed)
    parts = ([], [], [])
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        idx = idx[rng.permutation(idx.size)]
        n_tr = int(round(fractions[0] * idx.size))
        n_va = int(round(fractions[1] * idx.size))
        parts[0].append(idx[:n_tr])
        parts[1].append(idx[n_tr:n_tr + n_va])
        parts[2].append(idx[n_tr + n_va:])
    tr, va, te = (np.sort(np.concatenate(p)) if p else np.zeros(0, np.int64) for p in parts)
    return DatasetSplit(tr, va, te)


def split_kfold(n_items, k, seed=0, labels=None, val_fraction=0.1):
    """``k`` cross-validation splits whose test folds partition ``range(n_items)``.

    The validation set of each split is carved from the remaining items.
    With ``labels`` the folds are stratified by round-robin dealing.
    """
    n_items, k = int(n_items), int(k)
    if k < 2 or k > n_items:
        raise ContractError(f"k must satisfy 2 <= k <= n_items, got k={k}, n_items={n_items}")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n_items)
    if labels is not None:
        labels = np.asarray(labels)
        perm = perm[np.argsort(labels[perm], kind="stable")]
        folds = [perm[i::k] for i in range(k)]
    else:
        folds = np.array_split(perm, k)
    splits = []
    for i, test in enumerate(folds):
        rest = np.concatenate([f for j, f in enumerate(folds) if j != i])
        rest = rest[rng.permutation(rest.size)]
        n_val = max(1, int(round(val_fraction * rest.size))) if rest.size >= 2 else 0
        splits.append(DatasetSplit(np.sort(rest[n_val:]), np.sort(rest[:n_val]),
                                   np.sort(test), fold_id=i))
    return splits


def restrict_split(split: DatasetSplit, node_map, labels=None, seed=0):
    """Map a parent split onto a subgraph; re-split if any part becomes empty."""
    node_map = np.asarray(node_map)
    pos = {int(v): i for i, v in enumerate(node_map.tolist())}
    parts = [np.array(sorted(pos[int(v)] for v in idx.tolist() if int(v) in pos), dtype=np.int64)
             for idx in (split.train, split.val, split.test)]
    if all(p.size for p in parts):
        return DatasetSplit(*parts)
    if labels is None:
        labels = np.zeros(node_map.size, dtype=np.int64)
    return stratified_split(labels, seed=seed)


# ---------------------------------------------------------------------------
# generators


def _sample_pairs(rng, n_pairs, p):
    k = rng.binomial(n_pairs, p) if n_pairs else 0
    if k == 0:
        return np.zeros(0, dtype=np.int64)
    return np.sort(rng.choice(n_pairs, size=k, replace=False))


def generate_sbm(n, blocks, p_in, p_out, f=None, seed=0, noise=1.0,
                 fractions=(0.6, 0.2, 0.2)):
    """Stochastic block model with noisy one-hot block features.

    Returns ``(Graph, DatasetSplit)``; node label is its block id.
    """
    if not (0.0 <= p_out <= p_in <= 1.0):
        raise ContractError("require 0 <= p_out <= p_in <= 1")
    if blocks < 1 or n % blocks:
        raise ContractError("n must be divisible by blocks")
    f = blocks if f is None else int(f)
    if f < blocks:
        raise ContractError("feature dim must be >= blocks")
    rng = np.random.default_rng(seed)
    m = n // blocks
    labels = np.repeat(np.arange(blocks), m)
    us, vs = [], []
    for a in range(blocks):
        for b in range(a, blocks):
            if a == b:
                iu, ju = np.triu_indices(m, k=1)
                pick = _sample_pairs(rng, iu.size, p_in)
                us.append(a * m + iu[pick])
                vs.append(a * m + ju[pick])
            else:
                pick = _sample_pairs(rng, m * m, p_out)
                us.append(a * m + pick // m)
                vs.append(b * m + pick % m)
    edges = np.stack([np.concatenate(us), np.concatenate(vs)], axis=1) if us else np.zeros((0, 2))
    x = np.zeros((n, f))
    x[np.arange(n), labels] = 1.0
    x += noise * rng.standard_normal((n, f))
    g = Graph.from_edges(n, edges, x=x, y=labels)
    split = stratified_split(labels, fractions=fractions, seed=int(rng.integers(2**31)))
    return g, split


def generate_graph_task(kind="cycles_vs_paths", n_graphs=100, size_range=(5, 15), seed=0):
    """Synthetic graph classification: label 0 = cycle, label 1 = path.

    Node features are the one-hot degree (columns for degree 0, 1, 2).
    """
    if kind != "cycles_vs_paths":
        raise ContractError(f"unknown graph task kind {kind!r}")
    if n_graphs <= 0:
        raise ContractError("n_graphs must be positive")
    lo, hi = int(size_range[0]), int(size_range[1])
    if lo < 3 or hi < lo:
        raise ContractError("size_range must satisfy 3 <= min <= max")
    rng = np.random.default_rng(seed)
    labels = np.arange(n_graphs) % 2
    labels = labels[rng.permutation(n_graphs)]
    graphs = []
    for label in labels.tolist():
        size = int(rng.integers(lo, hi + 1))
        edges = [(i, i + 1) for i in range(size - 1)]
        if label == 0:
            edges.append((size - 1, 0))
        g = Graph.from_edges(size, edges)
        deg = np.minimum(g.degree(), 2)
        x = np.zeros((size, 3))
        x[np.arange(size), deg] = 1.0
        graphs.append(Graph(size, g.src, g.dst, x=x, y=label))
    return graphs


# ---------------------------------------------------------------------------
# random-walk subgraph sampling


def sample_subgraph_rw(g: Graph, num_starts, walk_len, target_ratio, seed=0,
                       max_extra_walks=None, origins=None):
    """Multi-start random-walk sampling followed by subgraph induction.

    Walks run from ``num_starts`` uniformly drawn origins; a walk that hits a
    node without out-neighbours restarts at its origin.  If the union of
    visited nodes is still below ``ceil(target_ratio * n)`` further walks are
    started from already-visited nodes; the visit order is then truncated to
    the target size.  ``origins`` pins the walk origins instead of drawing
    them.  Returns ``(subgraph, node_map)`` with ``node_map[i]``
    the parent id of subgraph node ``i``.
    """
    n = g.num_nodes
    if n == 0:
        raise ContractError("cannot sample from an empty graph")
    if not (0.0 < target_ratio <= 1.0):
        raise ContractError("target_ratio must lie in (0, 1]")
    if num_starts < 1 or walk_len < 0:
        raise ContractError("num_starts must be >= 1 and walk_len >= 0")
    rng = np.random.default_rng(seed)
    target = max(1, int(math.ceil(target_ratio * n)))
    ptr, nbr = g.out_neighbors()
    seen = np.zeros(n, dtype=bool)
    order = []

    def visit(v):
        if not seen[v]:
            seen[v] = True
            order.append(v)

    def walk(origin):
        cur = origin
        visit(cur)
        for _ in range(walk_len):
            lo, hi = ptr[cur], ptr[cur + 1]
            if hi == lo:
                cur = origin
            else:
                cur = int(nbr[lo + rng.integers(hi - lo)])
            visit(cur)

    if origins is None:
        origins = rng.integers(0, n, size=num_starts)
    for origin in np.asarray(origins, dtype=np.int64).tolist():
        walk(origin)
    if max_extra_walks is None:
        max_extra_walks = 100 * num_starts + 10 * target
    extra = 0
    while len(order) < target and extra < max_extra_walks:
        walk(order[int(rng.integers(len(order)))])
        extra += 1
    node_map = np.sort(np.array(order[:target], dtype=np.int64))
    return g.subgraph(node_map), node_map


# ---------------------------------------------------------------------------
# batching of graph-level datasets


@dataclass
class GraphBatch:
    """Disjoint union of several graphs with a node-to-graph index."""

    graph: Graph
    graph_index: np.ndarray
    num_graphs: int
    labels: np.ndarray = field(default=None)


def batch_graphs(graphs: Sequence[Graph]) -> GraphBatch:
    if not len(graphs):
        raise ContractError("cannot batch an empty graph list")
    offsets = np.cumsum([0] + [g.num_nodes for g in graphs])
    src = np.concatenate([g.src + o for g, o in zip(graphs, offsets)])
    dst = np.concatenate([g.dst + o for g, o in zip(graphs, offsets)])
    x = np.concatenate([g.x for g in graphs], axis=0)
    gi = np.repeat(np.arange(len(graphs)), [g.num_nodes for g in graphs])
    big = Graph(int(offsets[-1]), src, dst, x=x, directed=graphs[0].directed,
                allow_self_loops=any(g.allow_self_loops for g in graphs))
    labels = np.array([g.y if g.y is not None else -1 for g in graphs], dtype=np.int64)
    return GraphBatch(big, gi, len(graphs), labels)


def dataset_root():
    """Directory searched for converted benchmark datasets (``AGL_DATA``)."""
    return Path(os.environ.get("AGL_DATA", Path.home() / ".agl" / "data"))
