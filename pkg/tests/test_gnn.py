import types

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from agl import autodiff as ad
from agl.autodiff import ParamStore, Tensor
from agl.errors import ContractError, ValidationError
from agl.gnn import (ArchitectureDescriptor, GraphContext, MicroChoice, aggregation_weight,
                     assemble_model, combine, descriptor_violations, gat_descriptor,
                     gcn_descriptor, gin_descriptor, message_passing_layer, mp_param_shapes,
                     readout)
from agl.graph import Graph, TaskSpec, generate_graph_task

from helpers import (GRAD_COMBOS, count_params_oracle, gnn_grad_check, random_descriptor,
                     random_graph)

NODE3 = TaskSpec("node", 3)


def test_weight_const_and_gcn():
    assert aggregation_weight("const", [1.0], [2.0]) == 1.0
    assert aggregation_weight("gcn", None, None, 4, 9) == pytest.approx(1 / 6)
    with pytest.raises(ContractError):
        aggregation_weight("gcn", None, None, 0, 1)


def test_weight_cos_identical_and_zero():
    W = np.eye(2)
    assert aggregation_weight("cos", [1.0, 2.0], [1.0, 2.0], attn_params={"W": W}) == \
        pytest.approx(1.0)
    with pytest.warns(RuntimeWarning):
        assert aggregation_weight("cos", [0.0, 0.0], [1.0, 2.0], attn_params={"W": W}) == 0.0


def test_weight_attention_kinds():
    W = np.array([[1.0, 0.0], [0.0, 2.0]])
    hi, hj = np.array([1.0, -1.0]), np.array([0.5, 0.5])
    p = {"W": W, "att_dst": np.array([1.0, 0.5]), "att_src": np.array([-1.0, 1.0])}
    zi, zj = hi @ W, hj @ W
    lr = lambda v: v if v > 0 else 0.2 * v  # noqa: E731
    gat = lr(zi @ p["att_dst"] + zj @ p["att_src"])
    assert aggregation_weight("gat", hi, hj, attn_params=p) == pytest.approx(gat)
    sym = gat + lr(zj @ p["att_dst"] + zi @ p["att_src"])
    assert aggregation_weight("sym_gat", hi, hj, attn_params=p) == pytest.approx(sym)
    lin = np.tanh(np.sum(zi + zj))
    assert aggregation_weight("linear", hi, hj, attn_params=p) == pytest.approx(lin)
    assert aggregation_weight("gene_linear", hi, hj, attn_params={**p, "scale": 3.0}) == \
        pytest.approx(3 * lin)
    with pytest.raises(ContractError):
        aggregation_weight("gat", hi, hj)


def _single_layer(micro, d_in):
    ps = ParamStore()
    rng = np.random.default_rng(0)
    for name, shape in mp_param_shapes("mp", d_in, micro).items():
        ps.add(name, rng.standard_normal(shape) if len(shape) > 1 else np.zeros(shape))
    return ps


def test_path_const_sum_identity():
    g = Graph.from_edges(3, [(0, 1), (1, 2)], x=np.eye(3))
    micro = MicroChoice("sum", "const", 1, "add", 3, "identity")
    ps = _single_layer(micro, 3)
    ps["mp.W"].data = np.eye(3)
    out = message_passing_layer(g.x, g, micro, ps).data
    np.testing.assert_allclose(out[1], [1.0, 1.0, 1.0])
    np.testing.assert_allclose(out[0], [1.0, 1.0, 0.0])


@pytest.mark.parametrize("kind", ["const", "gcn", "gat", "cos", "linear"])
@pytest.mark.parametrize("comb", ["add", "concat", "mlp"])
def test_isolated_node_gets_zero_message(kind, comb):
    g = Graph.from_edges(3, [(0, 1)], x=np.random.default_rng(1).standard_normal((3, 2)))
    micro = MicroChoice("sum", kind, 2, comb, 4, "tanh")
    ps = _single_layer(micro, 2)
    out = message_passing_layer(g.x, g, micro, ps).data
    h = Tensor(g.x[2:3])
    ref = ad.tanh(combine(comb, Tensor(np.zeros((1, 4))), h, ps, "mp", 2, 4)).data
    np.testing.assert_allclose(out[2], ref[0], atol=1e-12)


def test_gcn_dense_oracle():
    g = random_graph(12, 0.3, seed=3, f=4)
    micro = MicroChoice("sum", "gcn", 1, "add", 4, "identity")
    ps = _single_layer(micro, 4)
    out = message_passing_layer(g.x, g, micro, ps).data
    A = np.zeros((12, 12))
    A[g.dst, g.src] = 1.0
    dt = A.sum(axis=1) + 1.0   # self-loop counted in the degree
    Ahat = A / np.sqrt(np.outer(dt, dt))
    W = ps["mp.W"].data
    oracle = Ahat @ g.x @ W + g.x + ps["mp.b"].data
    np.testing.assert_allclose(out, oracle, atol=1e-6)


def test_mean_max_aggregation_oracle():
    g = random_graph(9, 0.4, seed=5, f=2)
    A = np.zeros((9, 9))
    A[g.dst, g.src] = 1.0
    for agg in ("mean", "max"):
        micro = MicroChoice(agg, "const", 1, "add", 2, "identity")
        ps = _single_layer(micro, 2)
        Z = g.x @ ps["mp.W"].data
        m = np.zeros((9, 2))
        for i in range(9):
            nb = np.flatnonzero(A[i])
            if nb.size:
                m[i] = Z[nb].mean(0) if agg == "mean" else Z[nb].max(0)
        out = message_passing_layer(g.x, g, micro, ps).data
        np.testing.assert_allclose(out, m + g.x, atol=1e-12)


def test_layer_dim_mismatch():
    g = Graph.from_edges(2, [(0, 1)], x=np.ones((2, 3)))
    micro = MicroChoice(dim=4)
    ps = _single_layer(micro, 2)
    with pytest.raises(ContractError):
        message_passing_layer(g.x, g, micro, ps)


def test_readout_examples():
    H = np.array([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_allclose(readout(H, "mean").data, [[2.0, 3.0]])
    np.testing.assert_allclose(readout(H, "sum").data, [[4.0, 6.0]])
    np.testing.assert_allclose(readout(H, "max").data, [[3.0, 4.0]])
    with pytest.raises(ContractError):
        readout(np.zeros((0, 2)), "sum")


def test_sequential_default_macro():
    d = gcn_descriptor()
    assert d.macro == ((0, 1, "mp"), (1, 2, "mp"))
    assert d.key() == ArchitectureDescriptor.from_json(d.key()).key()
    assert d.key().startswith('{"layers":[{"agg":"sum","weight_kind":"gcn"')


def test_identity_residual():
    g = random_graph(10, 0.3, seed=1, f=8)
    layers = (MicroChoice(dim=6), MicroChoice(dim=8))
    seq = assemble_model(ArchitectureDescriptor(layers), NODE3, 8, seed=0)
    res_desc = ArchitectureDescriptor(layers, {(0, 1): "mp", (1, 2): "mp", (0, 2): "identity"})
    res = assemble_model(res_desc, NODE3, 8, seed=0)
    res.params.load(seq.params.snapshot())
    _, hs_seq = seq.forward(g, return_hidden=True)
    _, hs_res = res.forward(g, return_hidden=True)
    np.testing.assert_allclose(hs_res[2].data, hs_seq[2].data + g.x, atol=1e-12)


def test_identity_dim_mismatch_caught_at_assembly():
    layers = (MicroChoice(dim=6), MicroChoice(dim=8))
    bad = ArchitectureDescriptor(layers, {(0, 1): "mp", (1, 2): "mp", (0, 2): "identity"})
    with pytest.raises(ValidationError):
        assemble_model(bad, NODE3, 5)
    assert "identity-dim" in descriptor_violations(bad, 5)


def test_readout_required_iff_graph_task():
    with pytest.raises(ValidationError):
        assemble_model(gcn_descriptor(), TaskSpec("graph", 2), 3)
    with pytest.raises(ValidationError):
        assemble_model(gin_descriptor(), TaskSpec("node", 2), 3)


def test_param_count_matches_shape_walker():
    rng = np.random.default_rng(0)
    checked = 0
    for _ in range(200):
        desc = random_descriptor(rng, 5)
        if descriptor_violations(desc, 5):
            continue
        m = assemble_model(desc, NODE3, 5)
        assert m.params.num_scalars() == count_params_oracle(desc, 5, 3)
        checked += 1
    assert checked > 50
    for d in (gcn_descriptor(), gat_descriptor()):
        assert assemble_model(d, NODE3, 5).params.num_scalars() == count_params_oracle(d, 5, 3)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), combo=st.sampled_from(GRAD_COMBOS))
def test_permutation_equivariance(seed, combo):
    kind, agg, comb = combo
    g = random_graph(10, 0.35, seed, f=3)
    desc = ArchitectureDescriptor((MicroChoice(agg, kind, 2, comb, 4, "elu"),
                                   MicroChoice("sum", "gcn", 1, "add", 4, "tanh")))
    model = assemble_model(desc, NODE3, 3, seed=seed)
    perm = np.random.default_rng(seed).permutation(10)
    a = model.forward(g).data
    b = model.forward(g.permute(perm)).data
    np.testing.assert_allclose(b[perm], a, atol=1e-6)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), kind=st.sampled_from(["sum", "mean", "max"]))
def test_readout_permutation_invariance(seed, kind):
    graphs = generate_graph_task(n_graphs=4, size_range=(4, 9), seed=seed)
    model = assemble_model(gin_descriptor(dim=8, layers=2, readout=kind), TaskSpec("graph", 2),
                           3, seed=seed)
    rng = np.random.default_rng(seed)
    permuted = [g.permute(rng.permutation(g.num_nodes)) for g in graphs]
    np.testing.assert_allclose(model.forward(permuted).data, model.forward(graphs).data,
                               atol=1e-6)


@pytest.mark.parametrize("kind", ["const", "gcn"])
def test_arc_order_independence(kind):
    g = random_graph(10, 0.4, seed=2, f=3)
    micro = MicroChoice("sum", kind, 1, "add", 3, "relu")
    ps = _single_layer(micro, 3)
    base = message_passing_layer(g.x, GraphContext(g), micro, ps).data
    order = np.random.default_rng(0).permutation(g.num_arcs)
    fake = types.SimpleNamespace(num_nodes=g.num_nodes, src=g.src[order], dst=g.dst[order],
                                 in_degree=g.in_degree, x=g.x)
    shuffled = message_passing_layer(g.x, GraphContext(fake), micro, ps).data
    np.testing.assert_allclose(shuffled, base, atol=1e-12)


def test_fuzz_valid_descriptors_run():
    rng = np.random.default_rng(42)
    g = random_graph(10, 0.3, seed=0, f=4)
    ran = 0
    while ran < 500:
        desc = random_descriptor(rng, 4)
        if descriptor_violations(desc, 4, NODE3):
            continue
        model = assemble_model(desc, NODE3, 4, seed=ran)
        loss = ad.cross_entropy(model.forward(g, training=True, dropout=0.2,
                                             rng=np.random.default_rng(ran)), g.y)
        ad.backward(loss)
        assert np.isfinite(float(loss.data))
        ran += 1


@pytest.mark.parametrize("combo", GRAD_COMBOS, ids=lambda c: "-".join(c))
def test_grad_check_combo(combo):
    assert gnn_grad_check(*combo) < 1e-4


def test_descriptor_violation_names():
    micro = MicroChoice("sum", "gcn", 4, "concat", 6, "relu")
    assert "heads-divide-dim" in descriptor_violations(ArchitectureDescriptor((micro,)), 3)
    assert descriptor_violations(gcn_descriptor(), 3) == []
