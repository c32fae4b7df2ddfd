"""Message-passing GNNs assembled from an architecture descriptor.

A descriptor lists one :class:`MicroChoice` per layer, a macro wiring map
``(j, l) -> {mp, zero, identity, mlp}`` with ``j < l`` and an optional
readout for graph-level tasks.  Layer ``l`` computes

    H[l] = sum over j < l of F_jl(H[j]),     H[0] = node features

and a linear classifier head is applied to ``H[L]`` (node tasks) or to the
pooled graph vector (graph tasks).
"""
from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Segments, Tensor
from .errors import ContractError, ValidationError
from .graph import Graph, GraphBatch, TaskSpec, batch_graphs

__all__ = [
    "AGGREGATIONS", "WEIGHT_KINDS", "COMBINES", "MACRO_OPS", "READOUTS",
    "MicroChoice", "ArchitectureDescriptor", "TrainedModel", "GraphContext",
    "aggregation_weight", "message_passing_layer", "readout", "assemble_model",
    "descriptor_violations", "gcn_descriptor", "gat_descriptor", "gin_descriptor",
]

AGGREGATIONS = ("sum", "mean", "max", "mlp")
WEIGHT_KINDS = ("const", "gcn", "gat", "sym_gat", "cos", "linear", "gene_linear")
ATTENTION_KINDS = ("gat", "sym_gat", "cos", "linear", "gene_linear")
COMBINES = ("concat", "add", "mlp")
MACRO_OPS = ("mp", "zero", "identity", "mlp")
READOUTS = ("sum", "mean", "max")


@dataclass(frozen=True)
class MicroChoice:
    agg: str = "sum"
    weight_kind: str = "gcn"
    heads: int = 1
    combine: str = "add"
    dim: int = 16
    activation: str = "relu"

    def to_json(self):
        return {"agg": self.agg, "weight_kind": self.weight_kind, "heads": int(self.heads),
                "combine": self.combine, "dim": int(self.dim), "activation": self.activation}


@dataclass(frozen=True)
class ArchitectureDescriptor:
    layers: tuple
    macro: tuple = None
    readout: Optional[str] = None

    def __post_init__(self):
        layers = tuple(m if isinstance(m, MicroChoice) else MicroChoice(**m) for m in self.layers)
        object.__setattr__(self, "layers", layers)
        if self.macro is None:
            macro = {(l - 1, l): "mp" for l in range(1, len(layers) + 1)}
        elif isinstance(self.macro, dict):
            macro = dict(self.macro)
        else:
            macro = {(int(j), int(l)): op for j, l, op in self.macro}
        canon = tuple(sorted((j, l, op) for (j, l), op in macro.items() if op != "zero"))
        object.__setattr__(self, "macro", canon)

    @property
    def num_layers(self):
        return len(self.layers)

    def macro_map(self):
        return {(j, l): op for j, l, op in self.macro}

    def dims(self, in_dim):
        """``[dim(H0), dim(H1), ..., dim(HL)]``."""
        return [int(in_dim)] + [m.dim for m in self.layers]

    def to_json(self):
        return {
            "layers": [m.to_json() for m in self.layers],
            "macro": [[j, l, op] for j, l, op in self.macro],
            "readout": self.readout,
        }

    def key(self):
        """Canonical JSON string; the identity of the architecture."""
        return json.dumps(self.to_json(), separators=(",", ":"))

    @classmethod
    def from_json(cls, obj):
        if isinstance(obj, str):
            obj = json.loads(obj)
        return cls(tuple(MicroChoice(**m) for m in obj["layers"]),
                   tuple((j, l, op) for j, l, op in obj.get("macro", [])) if "macro" in obj else None,
                   obj.get("readout"))


def descriptor_violations(desc: ArchitectureDescriptor, in_dim=None, task: TaskSpec = None):
    """Names of every violated descriptor constraint (empty when valid)."""
    out = []
    L = desc.num_layers
    if L < 1:
        return ["num-layers"]
    for m in desc.layers:
        if m.agg not in AGGREGATIONS or m.weight_kind not in WEIGHT_KINDS \
                or m.combine not in COMBINES or m.activation not in ad.ACTIVATIONS:
            out.append("unknown-option")
        if m.dim < 1:
            out.append("positive-dim")
        if m.heads < 1:
            out.append("positive-heads")
        elif m.combine == "concat" and m.dim % m.heads:
            out.append("heads-divide-dim")
    dims = desc.dims(in_dim if in_dim is not None else -1)
    for j, l, op in desc.macro:
        if not (0 <= j < l <= L) or op not in MACRO_OPS:
            out.append("macro-edge")
        elif op == "identity" and (dims[j] != dims[l] or dims[j] < 0):
            out.append("identity-dim")
    for l in range(1, L + 1):
        if not any(ll == l for _, ll, _ in desc.macro):
            out.append("layer-input")
    if task is not None:
        if (task.level == "graph") != (desc.readout is not None):
            out.append("readout-task")
    if desc.readout is not None and desc.readout not in READOUTS:
        out.append("unknown-option")
    return sorted(set(out))


def gcn_descriptor(dim=16, layers=2, activation="relu"):
    return ArchitectureDescriptor(tuple(
        MicroChoice("sum", "gcn", 1, "add", dim, activation) for _ in range(layers)))


def gat_descriptor(dim=16, heads=2, layers=2, activation="elu"):
    return ArchitectureDescriptor(tuple(
        MicroChoice("sum", "gat", heads, "concat", dim, activation) for _ in range(layers)))


def gin_descriptor(dim=32, layers=3, readout="sum", activation="relu"):
    return ArchitectureDescriptor(tuple(
        MicroChoice("mlp", "const", 1, "add", dim, activation) for _ in range(layers)),
        readout=readout)


# ---------------------------------------------------------------------------
# aggregation weights


def aggregation_weight(kind, h_i, h_j, deg_i=1, deg_j=1, attn_params=None):
    """Unnormalised score ``a_ij`` for one ``(target i, source j)`` pair.

    ``attn_params`` holds ``W`` (input x hidden) and, depending on the
    kind, ``att_dst``/``att_src`` vectors or the ``scale`` scalar.
    """
    if kind == "const":
        return 1.0
    if kind == "gcn":
        if deg_i < 1 or deg_j < 1:
            raise ContractError("gcn weights need degrees >= 1")
        return 1.0 / math.sqrt(deg_i * deg_j)
    if kind not in ATTENTION_KINDS:
        raise ContractError(f"unknown weight kind {kind!r}")
    if attn_params is None or "W" not in attn_params:
        raise ContractError(f"{kind} weights need attention parameters")
    W = np.asarray(attn_params["W"])
    zi = np.asarray(h_i, dtype=np.float64) @ W
    zj = np.asarray(h_j, dtype=np.float64) @ W
    if kind in ("gat", "sym_gat"):
        a_d, a_s = np.asarray(attn_params["att_dst"]), np.asarray(attn_params["att_src"])
        lrelu = lambda v: v if v > 0 else 0.2 * v
        s = lrelu(float(zi @ a_d + zj @ a_s))
        if kind == "sym_gat":
            s += lrelu(float(zj @ a_d + zi @ a_s))
        return s
    if kind == "cos":
        ni, nj = np.linalg.norm(zi), np.linalg.norm(zj)
        if ni == 0 or nj == 0:
            warnings.warn("cosine weight undefined for a zero vector; using 0", RuntimeWarning)
            return 0.0
        return float(zi @ zj / (ni * nj))
    s = math.tanh(float(np.sum(zi + zj)))
    if kind == "gene_linear":
        s *= float(attn_params.get("scale", 1.0))
    return s


# ---------------------------------------------------------------------------
# graph context and layers


class GraphContext:
    """Per-graph index structures reused by every layer."""

    def __init__(self, graph: Graph, graph_index=None, num_graphs=None):
        self.graph = graph
        self.n = graph.num_nodes
        self.src = np.asarray(graph.src)
        self.dst = np.asarray(graph.dst)
        self.segs = Segments(self.dst, self.n)
        # self-loop counted in the degree only (never as a message)
        deg = graph.in_degree().astype(np.float64) + 1.0
        self.gcn_coef = 1.0 / np.sqrt(deg[self.dst] * deg[self.src])
        self.has_nbr = (self.segs.counts > 0).astype(np.float64)[:, None]
        self.graph_index = graph_index
        self.num_graphs = num_graphs
        self.pool = None if graph_index is None else Segments(graph_index, num_graphs)

    @classmethod
    def of(cls, data):
        if isinstance(data, GraphContext):
            return data
        if isinstance(data, GraphBatch):
            return cls(data.graph, data.graph_index, data.num_graphs)
        if isinstance(data, (list, tuple)):
            b = batch_graphs(data)
            return cls(b.graph, b.graph_index, b.num_graphs)
        ctx = data._cache.get("ctx")
        if ctx is None:
            ctx = data._cache["ctx"] = cls(data)
        return ctx


def _head_dim(micro: MicroChoice):
    return micro.dim // micro.heads if micro.combine == "concat" else micro.dim


def mp_param_shapes(prefix, d_in, micro: MicroChoice):
    """Ordered ``name -> shape`` map for one message-passing edge."""
    K, dh, d = micro.heads, _head_dim(micro), micro.dim
    shapes = {f"{prefix}.W": (d_in, K * dh)}
    if micro.weight_kind in ("gat", "sym_gat"):
        shapes[f"{prefix}.att_dst"] = (K, dh)
        shapes[f"{prefix}.att_src"] = (K, dh)
    elif micro.weight_kind == "gene_linear":
        shapes[f"{prefix}.scale"] = (K,)
    if micro.agg == "mlp":
        shapes[f"{prefix}.agg1.W"] = (d, d)
        shapes[f"{prefix}.agg1.b"] = (d,)
        shapes[f"{prefix}.agg2.W"] = (d, d)
        shapes[f"{prefix}.agg2.b"] = (d,)
    if micro.combine == "add":
        if d_in != d:
            shapes[f"{prefix}.P"] = (d_in, d)
        shapes[f"{prefix}.b"] = (d,)
    elif micro.combine == "concat":
        shapes[f"{prefix}.C"] = (d + d_in, d)
        shapes[f"{prefix}.b"] = (d,)
    else:
        shapes[f"{prefix}.M1"] = (d + d_in, d)
        shapes[f"{prefix}.b1"] = (d,)
        shapes[f"{prefix}.M2"] = (d, d)
        shapes[f"{prefix}.b2"] = (d,)
    return shapes


def init_param(rng, name, shape):
    leaf = name.rsplit(".", 1)[-1]
    if leaf == "scale":
        return np.ones(shape)
    if leaf.startswith("att"):
        return ad.glorot(rng, shape[1], 1, shape)
    if len(shape) == 1:
        return np.zeros(shape)
    return ad.glorot(rng, shape[0], shape[1], shape)


def edge_scores(kind, Z, ctx: GraphContext, params, prefix, K, dh):
    """Per-arc, per-head raw scores ``(E, K)``; None for CONST."""
    if kind == "const":
        return None
    if kind == "gcn":
        return Tensor(np.repeat(ctx.gcn_coef[:, None], K, axis=1))
    Zd = ad.gather_rows(Z, ctx.dst)
    Zs = ad.gather_rows(Z, ctx.src)
    if kind in ("gat", "sym_gat"):
        a_d = ad.reshape(params[f"{prefix}.att_dst"], (1, K, dh))
        a_s = ad.reshape(params[f"{prefix}.att_src"], (1, K, dh))
        e_d = ad.sum_(ad.mul(Z, a_d), axis=2)          # (n, K)
        e_s = ad.sum_(ad.mul(Z, a_s), axis=2)
        s = ad.leaky_relu(ad.add(ad.gather_rows(e_d, ctx.dst), ad.gather_rows(e_s, ctx.src)))
        if kind == "sym_gat":
            s = ad.add(s, ad.leaky_relu(ad.add(ad.gather_rows(e_d, ctx.src),
                                               ad.gather_rows(e_s, ctx.dst))))
        return s
    if kind == "cos":
        dot = ad.sum_(ad.mul(Zd, Zs), axis=2)
        nd = ad.maximum(ad.sqrt(ad.sum_(ad.mul(Zd, Zd), axis=2)), 1e-12)
        ns = ad.maximum(ad.sqrt(ad.sum_(ad.mul(Zs, Zs), axis=2)), 1e-12)
        return ad.div(dot, ad.mul(nd, ns))
    s = ad.tanh(ad.add(ad.sum_(Zd, axis=2), ad.sum_(Zs, axis=2)))
    if kind == "gene_linear":
        s = ad.mul(s, ad.reshape(params[f"{prefix}.scale"], (1, K)))
    return s


def aggregate(agg, msgs, ctx: GraphContext):
    if agg in ("sum", "mlp"):
        return ad.segment_sum(msgs, ctx.segs)
    if agg == "mean":
        return ad.segment_mean(msgs, ctx.segs)
    if agg == "max":
        return ad.segment_max(msgs, ctx.segs)
    raise ContractError(f"unknown aggregation {agg!r}")


def message_passing_layer(H, ctx, micro: MicroChoice, params, prefix="mp", return_scores=False):
    """One message-passing edge: weighted messages, AGG, head merge, COMBINE, activation."""
    ctx = GraphContext.of(ctx)
    H = ad.as_tensor(H)
    W = params[f"{prefix}.W"]
    d_in = W.shape[0]
    if H.shape[1] != d_in:
        raise ContractError(f"{prefix}: input dim {H.shape[1]} != layer input dim {d_in}")
    K, dh, d = micro.heads, _head_dim(micro), micro.dim
    Z = ad.reshape(ad.matmul(H, W), (ctx.n, K, dh))
    msgs = ad.gather_rows(Z, ctx.src)                        # (E, K, dh)
    raw = edge_scores(micro.weight_kind, Z, ctx, params, prefix, K, dh)
    if raw is not None:
        a = ad.segment_softmax(raw, ctx.segs) if micro.weight_kind in ATTENTION_KINDS else raw
        msgs = ad.mul(msgs, ad.reshape(a, (-1, K, 1)))
    m = aggregate(micro.agg, msgs, ctx)                      # (n, K, dh)
    if micro.combine == "concat":
        m = ad.reshape(m, (ctx.n, K * dh))
    else:
        m = ad.mean(m, axis=1)
    if micro.agg == "mlp":
        m = ad.relu(ad.add(ad.matmul(m, params[f"{prefix}.agg1.W"]), params[f"{prefix}.agg1.b"]))
        m = ad.add(ad.matmul(m, params[f"{prefix}.agg2.W"]), params[f"{prefix}.agg2.b"])
        m = ad.mul(m, ctx.has_nbr)                           # empty neighbourhood -> 0
    out = combine(micro.combine, m, H, params, prefix, d_in, d)
    out = ad.activation(micro.activation)(out)
    if return_scores:
        return out, raw
    return out


def combine(kind, m, H, params, prefix, d_in, d):
    if kind == "add":
        h = H if d_in == d else ad.matmul(H, params[f"{prefix}.P"])
        return ad.add(ad.add(m, h), params[f"{prefix}.b"])
    mh = ad.concat([m, H], axis=1)
    if kind == "concat":
        return ad.add(ad.matmul(mh, params[f"{prefix}.C"]), params[f"{prefix}.b"])
    hid = ad.relu(ad.add(ad.matmul(mh, params[f"{prefix}.M1"]), params[f"{prefix}.b1"]))
    return ad.add(ad.matmul(hid, params[f"{prefix}.M2"]), params[f"{prefix}.b2"])


def readout(H, kind, ctx: Optional[GraphContext] = None):
    """Column-wise SUM/MEAN/MAX of node rows, per graph when ``ctx`` has a pool index."""
    H = ad.as_tensor(H)
    if H.shape[0] == 0:
        raise ContractError("readout of an empty graph")
    segs = ctx.pool if ctx is not None and ctx.pool is not None else Segments(
        np.zeros(H.shape[0], dtype=np.int64), 1)
    if kind == "sum":
        return ad.segment_sum(H, segs)
    if kind == "mean":
        return ad.segment_mean(H, segs)
    if kind == "max":
        return ad.segment_max(H, segs)
    raise ContractError(f"unknown readout {kind!r}")


# ---------------------------------------------------------------------------
# models


def model_param_shapes(desc: ArchitectureDescriptor, in_dim, num_classes):
    dims = desc.dims(in_dim)
    shapes = {}
    for j, l, op in desc.macro:
        micro = desc.layers[l - 1]
        prefix = f"l{l}.e{j}"
        if op == "mp":
            shapes.update(mp_param_shapes(prefix, dims[j], micro))
        elif op == "mlp":
            shapes[f"{prefix}.W"] = (dims[j], dims[l])
            shapes[f"{prefix}.b"] = (dims[l],)
    shapes["head.W"] = (dims[-1], num_classes)
    shapes["head.b"] = (num_classes,)
    return shapes


@dataclass
class TrainedModel:
    """Descriptor plus parameters; the unit that is trained, evaluated and ensembled."""

    descriptor: ArchitectureDescriptor
    params: ParamStore
    task: TaskSpec
    in_dim: int
    train_meta: dict = field(default_factory=dict)

    @property
    def key(self):
        return self.descriptor.key()

    def forward(self, data, training=False, dropout=0.0, rng=None, return_hidden=False):
        """Class logits for every node (node task) or every graph (graph task)."""
        ctx = GraphContext.of(data)
        desc = self.descriptor
        p = self.params
        x = ctx.graph.x
        if x.shape[1] != self.in_dim:
            raise ContractError(f"model expects {self.in_dim} input features, got {x.shape[1]}")
        hs = [Tensor(x)]
        incoming = {}
        for j, l, op in desc.macro:
            incoming.setdefault(l, []).append((j, op))
        for l in range(1, desc.num_layers + 1):
            micro = desc.layers[l - 1]
            total = None
            for j, op in incoming.get(l, []):
                prefix = f"l{l}.e{j}"
                h_in = hs[j]
                if op == "identity":
                    out = h_in
                else:
                    h_in = ad.dropout(h_in, dropout, rng, training)
                    if op == "mp":
                        out = message_passing_layer(h_in, ctx, micro, p, prefix)
                    else:
                        out = ad.add(ad.matmul(h_in, p[f"{prefix}.W"]), p[f"{prefix}.b"])
                        out = ad.activation(micro.activation)(out)
                total = out if total is None else ad.add(total, out)
            if total is None:
                total = Tensor(np.zeros((ctx.n, micro.dim)))
            hs.append(total)
        h = hs[-1]
        if desc.readout is not None:
            h = readout(h, desc.readout, ctx)
        h = ad.dropout(h, dropout, rng, training)
        logits = ad.add(ad.matmul(h, p["head.W"]), p["head.b"])
        if return_hidden:
            return logits, hs
        return logits

    def predict_proba(self, data):
        return ad.softmax_np(self.forward(data).data)

    def predict(self, data):
        return np.argmax(self.predict_proba(data), axis=1)


def assemble_model(desc: ArchitectureDescriptor, task: TaskSpec, in_dim, seed=0):
    """Allocate and initialise an untrained :class:`TrainedModel`."""
    bad = descriptor_violations(desc, in_dim, task)
    if bad:
        raise ValidationError(f"invalid descriptor: {', '.join(bad)}")
    rng = np.random.default_rng(seed)
    params = ParamStore()
    for name, shape in model_param_shapes(desc, in_dim, task.num_classes).items():
        params.add(name, init_param(rng, name, shape))
    return TrainedModel(desc, params, task, int(in_dim), {"seed": seed, "epochs_run": 0})
