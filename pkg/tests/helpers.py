"""Shared fixtures and independent oracles for the test suite."""
import itertools

import numpy as np

from agl import autodiff as ad
from agl.autodiff import grad_check
from agl.gnn import (AGGREGATIONS, COMBINES, MACRO_OPS, WEIGHT_KINDS, ArchitectureDescriptor,
                     MicroChoice, assemble_model)
from agl.graph import Graph, TaskSpec

GRAD_COMBOS = list(itertools.product(WEIGHT_KINDS, AGGREGATIONS, COMBINES))


def random_graph(n, p, seed, f=3, isolated=0):
    rng = np.random.default_rng(seed)
    iu, ju = np.triu_indices(n - isolated, k=1)
    keep = rng.random(iu.size) < p
    g = Graph.from_edges(n, np.stack([iu[keep], ju[keep]], axis=1),
                         x=rng.standard_normal((n, f)), y=rng.integers(0, 3, n))
    return g


def gnn_grad_check(weight_kind, agg, combine, seed=0):
    """Max relative error of one single-layer model built from the given options."""
    g = random_graph(7, 0.45, seed, f=3, isolated=1)
    micro = MicroChoice(agg, weight_kind, 2, combine, 4, "tanh")
    desc = ArchitectureDescriptor((micro,))
    model = assemble_model(desc, TaskSpec("node", 3), 3, seed=seed)
    rng = np.random.default_rng(seed + 100)
    for name, t in model.params.items():
        # non-trivial biases and scales so no term is structurally zero
        t.data = t.data + 0.3 * rng.standard_normal(t.data.shape)
    y = g.y

    def fn(p):
        return ad.cross_entropy(model.forward(g), y)
    return grad_check(fn, model.params, max_entries=24, seed=seed)["max_rel_err"]


def count_params_oracle(desc, in_dim, num_classes):
    """Independent parameter count walked from the layer rules."""
    dims = [in_dim] + [m.dim for m in desc.layers]
    total = 0
    for j, l, op in desc.macro:
        m = desc.layers[l - 1]
        d_in, d = dims[j], dims[l]
        if op == "mlp":
            total += d_in * d + d
        elif op == "mp":
            per_head = d // m.heads if m.combine == "concat" else d
            total += d_in * m.heads * per_head
            if m.weight_kind in ("gat", "sym_gat"):
                total += 2 * m.heads * per_head
            if m.weight_kind == "gene_linear":
                total += m.heads
            if m.agg == "mlp":
                total += 2 * (d * d + d)
            if m.combine == "add":
                total += d + (0 if d_in == d else d_in * d)
            elif m.combine == "concat":
                total += (d + d_in) * d + d
            else:
                total += (d + d_in) * d + d + d * d + d
    total += dims[-1] * num_classes + num_classes
    return total


def random_descriptor(rng, in_dim, graph_task=False):
    """Descriptor drawn from the full option lists; may be invalid."""
    L = int(rng.integers(1, 4))
    layers = []
    for _ in range(L):
        heads = int(rng.choice([1, 2, 4]))
        combine = str(rng.choice(COMBINES))
        dim = int(rng.choice([4, 6, 8]))
        layers.append(MicroChoice(str(rng.choice(AGGREGATIONS)), str(rng.choice(WEIGHT_KINDS)),
                                  heads, combine, dim, str(rng.choice(list(ad.ACTIVATIONS)))))
    macro = {(l - 1, l): "mp" for l in range(1, L + 1)}
    for l in range(2, L + 1):
        for j in range(0, l - 1):
            macro[(j, l)] = str(rng.choice(MACRO_OPS))
    readout = str(rng.choice(["sum", "mean", "max"])) if graph_task else None
    return ArchitectureDescriptor(tuple(layers), macro, readout)


def er_graph(n, p, seed):
    rng = np.random.default_rng(seed)
    iu, ju = np.triu_indices(n, k=1)
    keep = rng.random(iu.size) < p
    return Graph.from_edges(n, np.stack([iu[keep], ju[keep]], axis=1))


def brute_triangles(g):
    a = np.zeros((g.num_nodes, g.num_nodes), dtype=bool)
    a[g.src, g.dst] = True
    return sum(1 for i, j, k in itertools.combinations(range(g.num_nodes), 3)
               if a[i, j] and a[j, k] and a[i, k])
