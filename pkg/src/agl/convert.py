"""Converters from common public benchmark formats to the on-disk dataset layout.

Supported inputs:

* Planetoid citation files (``ind.<name>.{x,y,tx,ty,allx,ally,graph,test.index}``),
  converted with the standard split (one train block, 500 validation
  nodes, the listed test nodes).
* TU graph-classification files (``<NAME>_A.txt``, ``_graph_indicator``,
  ``_graph_labels`` and optionally ``_node_labels``); node labels are
  one-hot encoded and graph labels are remapped to ``0..C-1``.
"""
from __future__ import annotations

import logging
import pickle
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .errors import ContractError, ParseError
from .graph import DatasetSplit, Graph, write_dataset

__all__ = ["convert_planetoid", "convert_tu"]

logger = logging.getLogger(__name__)


def _load_pickle(path):
    with open(path, "rb") as fh:
        return pickle.load(fh, encoding="latin1")


def _dense(m):
    return np.asarray(m.todense()) if sp.issparse(m) else np.asarray(m)


def convert_planetoid(raw_dir, name, out_dir):
    """Convert Planetoid files to ``out_dir``; returns a summary dict.

    The summary reports the raw adjacency-list entry count next to the
    deduplicated undirected edge count.
    """
    raw_dir = Path(raw_dir)
    objs = {}
    for key in ("x", "y", "tx", "ty", "allx", "ally", "graph"):
        p = raw_dir / f"ind.{name}.{key}"
        if not p.exists():
            raise ContractError(f"missing Planetoid file {p}")
        objs[key] = _load_pickle(p)
    test_index = []
    with open(raw_dir / f"ind.{name}.test.index", "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if line.strip():
                try:
                    test_index.append(int(line))
                except ValueError:
                    raise ParseError("bad test index", raw_dir / f"ind.{name}.test.index",
                                     lineno) from None
    test_index = np.array(test_index, dtype=np.int64)
    test_sorted = np.sort(test_index)
    tx, ty = _dense(objs["tx"]), _dense(objs["ty"])
    allx, ally = _dense(objs["allx"]), _dense(objs["ally"])
    # some test ids are missing from the graph (isolated); pad with zero rows
    full_range = np.arange(test_sorted.min(), test_sorted.max() + 1)
    if full_range.size != tx.shape[0]:
        tx_ext = np.zeros((full_range.size, tx.shape[1]))
        tx_ext[test_sorted - test_sorted.min()] = tx
        ty_ext = np.zeros((full_range.size, ty.shape[1]))
        ty_ext[test_sorted - test_sorted.min()] = ty
        tx, ty = tx_ext, ty_ext
    x = np.vstack([allx, tx])
    y = np.vstack([ally, ty])
    x[test_index] = x[test_sorted]
    y[test_index] = y[test_sorted]
    n = x.shape[0]
    labels = np.argmax(y, axis=1)
    raw_edges = []
    for u, nbrs in objs["graph"].items():
        for v in nbrs:
            raw_edges.append((int(u), int(v)))
    edges = np.array(raw_edges, dtype=np.int64).reshape(-1, 2)
    n = max(n, int(edges.max()) + 1 if edges.size else 0)
    loops = int(np.sum(edges[:, 0] == edges[:, 1]))
    edges = edges[edges[:, 0] != edges[:, 1]]
    if x.shape[0] < n:
        x = np.vstack([x, np.zeros((n - x.shape[0], x.shape[1]))])
        labels = np.concatenate([labels, np.zeros(n - labels.size, dtype=np.int64)])
    g = Graph.from_edges(n, edges, x=x, y=labels)
    n_train = _dense(objs["y"]).shape[0]
    split = DatasetSplit(np.arange(n_train), np.arange(n_train, n_train + 500), test_sorted)
    write_dataset(out_dir, g, split)
    summary = {"nodes": n, "features": int(x.shape[1]), "classes": int(y.shape[1]),
               "raw_edge_entries": len(raw_edges), "dedup_edges": int(g.num_edges),
               "self_loops_dropped": loops, "train": int(n_train), "val": 500,
               "test": int(test_sorted.size)}
    logger.info("converted %s: %s", name, summary)
    return summary


def _read_ints(path, sep=","):
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                out.append([int(t) for t in line.replace(" ", "").split(sep)])
            except ValueError:
                raise ParseError("expected integers", path, lineno) from None
    return out


def convert_tu(raw_dir, name, out_dir):
    """Convert a TU graph-classification dataset to ``graphs.jsonl``."""
    raw_dir = Path(raw_dir)
    pre = raw_dir / name
    A = np.array(_read_ints(Path(f"{pre}_A.txt")), dtype=np.int64) - 1
    gi = np.array([r[0] for r in _read_ints(Path(f"{pre}_graph_indicator.txt"))]) - 1
    glab = np.array([r[0] for r in _read_ints(Path(f"{pre}_graph_labels.txt"))])
    nl_path = Path(f"{pre}_node_labels.txt")
    if nl_path.exists():
        nlab = np.array([r[0] for r in _read_ints(nl_path)])
        vals = np.unique(nlab)
        feats = (nlab[:, None] == vals[None, :]).astype(np.float64)
    else:
        feats = np.ones((gi.size, 1))
    classes = np.unique(glab)
    remap = {int(c): i for i, c in enumerate(classes.tolist())}
    graphs = []
    for gid in range(int(gi.max()) + 1):
        nodes = np.flatnonzero(gi == gid)
        lo = nodes.min()
        mask = (gi[A[:, 0]] == gid)
        e = A[mask] - lo
        e = e[e[:, 0] != e[:, 1]]
        graphs.append(Graph.from_edges(nodes.size, e, x=feats[nodes], y=remap[int(glab[gid])]))
    write_dataset(out_dir, graphs)
    summary = {"graphs": len(graphs), "classes": len(classes),
               "label_map": {str(k): v for k, v in remap.items()},
               "node_features": int(feats.shape[1])}
    logger.info("converted %s: %s", name, summary)
    return summary
