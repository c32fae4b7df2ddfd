import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import binomtest

from agl import autodiff as ad
from agl.autodiff import Tensor
from agl.errors import ContractError, DerivationError, MutationError, SearchError
from agl.estimation import Dataset, TableEstimator
from agl.graph import generate_sbm
from agl.search import (Population, PolicyState, _Supernet, mixed_op,
                        oneshot_derive, oneshot_train, policy_sample, random_search, re_step,
                        regularized_evolution, reinforce_update, rl_search, tpe_search,
                        tpe_suggest)
from agl.space import Assignment, Decision, SearchSpace, default_spaces, enumerate_space, \
    sample_uniform
from agl.trials import Ledger, TrialRecord


def toy_space():
    return SearchSpace([Decision(f"x{i}", "categorical", tuple(range(5))) for i in range(3)])


def toy_table(space, seed=0):
    """Smooth landscape with one peak plus small seeded noise."""
    rng = np.random.default_rng(seed)
    peak = (3, 1, 4)
    table = {}
    for a in enumerate_space(space):
        dist = sum(abs(a[f"x{i}"] - peak[i]) for i in range(3))
        table[a.key()] = float(np.clip(0.9 - 0.07 * dist + 0.01 * rng.random(), 0, 1))
    return table


def test_random_budget_one():
    space = toy_space()
    best, ledger = random_search(space, 1, TableEstimator(toy_table(space)), seed=0)
    assert len(ledger) == 1 and best.birth_index == 0


def test_random_dedup_finds_optimum():
    space = SearchSpace([Decision("a", "categorical", (0, 1, 2)),
                         Decision("b", "categorical", ("p", "q"))])
    table = {a.key(): 0.1 * i for i, a in enumerate(enumerate_space(space))}
    for seed in range(20):
        best, ledger = random_search(space, 6, TableEstimator(table), seed=seed)
        assert best.val_metric == max(table.values())
        assert len({r.assignment_json for r in ledger}) == 6


def test_random_order_statistic():
    space = toy_space()
    table = toy_table(space)
    vals = np.sort(np.array(list(table.values())))
    N = vals.size
    k = np.arange(1, N + 1)
    pmf = (k / N) ** 10 - ((k - 1) / N) ** 10
    mean = float(np.sum(pmf * vals))
    sd = math.sqrt(float(np.sum(pmf * vals ** 2)) - mean ** 2)
    est = TableEstimator(table)
    bests = [random_search(space, 10, est, seed=s)[0].val_metric for s in range(100)]
    assert abs(np.mean(bests) - mean) < 4 * sd / math.sqrt(100)


def test_search_errors():
    space = toy_space()
    with pytest.raises(ContractError):
        random_search(space, 0, TableEstimator({}))
    with pytest.raises(SearchError):
        random_search(space, 3, TableEstimator({}), seed=0)


def test_failures_recorded_and_search_continues():
    space = toy_space()
    table = toy_table(space)
    keys = list(table)[::2]
    est = TableEstimator({k: table[k] for k in keys})
    best, ledger = random_search(space, 30, est, seed=1)
    failed = [r for r in ledger if not r.ok]
    assert failed and all(r.reason == "not in table" for r in failed)
    assert best.ok


def test_estimator_exception_becomes_failed_record():
    space = toy_space()

    def boom(a):
        if a["x0"] == 0:
            raise ValueError("bad trial")
        return TrialRecord(a, val_metric=0.5)
    _, ledger = random_search(space, 20, boom, seed=0)
    assert any(r.status == "failed" and "bad trial" in r.reason for r in ledger)


def test_tie_break_lower_birth_index():
    space = toy_space()
    table = {k: 0.5 for k in toy_table(space)}
    best, _ = random_search(space, 10, TableEstimator(table), seed=0)
    assert best.birth_index == 0


def test_tpe_cold_start_uniform():
    space = toy_space()
    assert tpe_suggest([], space, seed=5) == sample_uniform(space, seed=5)


def test_tpe_single_value_decision():
    space = SearchSpace([Decision("a", "categorical", ("only",)),
                         Decision("b", "categorical", (0, 1, 2))])
    hist = [TrialRecord(Assignment({"a": "only", "b": i % 3}), val_metric=0.1 * (i % 3),
                        birth_index=i) for i in range(20)]
    for s in range(20):
        assert tpe_suggest(hist, space, seed=s)["a"] == "only"


def test_tpe_degenerate_history_notice():
    space = toy_space()
    hist = [TrialRecord(sample_uniform(space, i), val_metric=0.5, birth_index=i)
            for i in range(15)]
    notices = []
    a = tpe_suggest(hist, space, seed=0, notices=notices)
    assert notices and not space.violations(a)


def test_tpe_prefers_top_quantile_value():
    space = SearchSpace([Decision("c", "categorical", ("A", "B", "C", "D")),
                         Decision("z", "categorical", (0, 1, 2))])
    rng = np.random.default_rng(0)
    hist = []
    for i in range(40):
        if i < 10:
            a, m = {"c": "A", "z": int(rng.integers(3))}, 0.9 + 0.001 * i
        else:
            a, m = {"c": ["B", "C", "D"][i % 3], "z": int(rng.integers(3))}, 0.2 + 0.001 * i
        hist.append(TrialRecord(Assignment(a), val_metric=m, birth_index=i))
    hits = sum(tpe_suggest(hist, space, seed=s)["c"] == "A" for s in range(1000))
    assert hits / 1000 > 0.25
    assert binomtest(hits, 1000, 0.25, alternative="greater").pvalue < 0.01


def test_tpe_continuous_decisions():
    space = default_spaces("hyper_default")

    def est(a):
        return TrialRecord(a, val_metric=float(np.exp(-abs(np.log10(a["lr"]) + 2))))
    best, ledger = tpe_search(space, 25, est, seed=0)
    assert len(ledger) == 25
    assert all(not space.violations(r.assignment) for r in ledger)
    assert best.val_metric == max(r.val_metric for r in ledger)


@pytest.mark.parametrize("seed", range(5))
def test_tpe_finite_space_no_repeats(seed):
    space = toy_space()
    _, ledger = tpe_search(space, 60, TableEstimator(toy_table(space)), seed=seed)
    keys = [r.assignment.key() for r in ledger]
    assert len(set(keys)) == 60
    assert tpe_suggest([], space, 0, exclude=set()).key() == sample_uniform(space, 0).key()
    # an exhausted space still yields a valid assignment
    only = SearchSpace([Decision("x0", "categorical", (0,))])
    a = tpe_suggest([], only, 0, exclude={sample_uniform(only, 0).key()})
    assert a["x0"] == 0


def test_population_eviction():
    pop = Population(3)
    recs = [TrialRecord(Assignment({"i": i}), val_metric=0.1, birth_index=i) for i in range(5)]
    evicted = [pop.add(r) for r in recs]
    assert [e.birth_index for e in evicted if e is not None] == [0, 1]
    assert [m.birth_index for m in pop] == [2, 3, 4]


def test_re_step_size_and_single_mutation():
    space = toy_space()
    est = TableEstimator(toy_table(space))
    ledger = Ledger()
    pop = Population(5)
    for i in range(5):
        pop.add(ledger.append(est(sample_uniform(space, i))))
    for s in range(20):
        before = {r.birth_index: r for r in pop}
        pop, child = re_step(pop, 3, space, est, seed=s, ledger=ledger)
        assert len(pop) == 5
        parents = [r for r in before.values()
                   if sum(r.assignment[n] != child.assignment[n] for n in space.names) == 1]
        assert parents
        assert min(before) not in {r.birth_index for r in pop}  # oldest evicted


def test_mutation_error():
    space = SearchSpace([Decision("a", "categorical", (1,))])
    pop = Population(2, [TrialRecord(Assignment({"a": 1}), val_metric=0.5)])
    with pytest.raises(MutationError):
        re_step(pop, 1, space, TableEstimator({}), seed=0)
    with pytest.raises(ContractError):
        re_step(Population(2), 1, space, TableEstimator({}), seed=0)


def test_re_not_worse_than_random_median():
    space = toy_space()
    est = TableEstimator(toy_table(space))
    re_best = [regularized_evolution(space, 50, est, seed=s)[0].val_metric for s in range(100)]
    rs_best = [random_search(space, 50, est, seed=s)[0].val_metric for s in range(100)]
    assert np.median(re_best) >= np.median(rs_best)


@pytest.mark.parametrize("strategy", ["random", "tpe", "re", "rl"])
def test_strategies_deterministic_and_monotone(strategy):
    space = toy_space()
    est = TableEstimator(toy_table(space))
    fn = {"random": random_search, "tpe": tpe_search, "re": regularized_evolution,
          "rl": lambda *a, **k: rl_search(*a, **k)[:2]}[strategy]
    _, l1 = fn(space, 30, est, seed=3)
    _, l2 = fn(space, 30, est, seed=3)
    assert [r.row() for r in l1] == [r.row() for r in l2]
    rb = l1.running_best()
    assert all(b >= a for a, b in zip(rb, rb[1:]))
    assert [r.birth_index for r in l1] == list(range(30))


def test_parallel_matches_serial():
    space = toy_space()
    est = TableEstimator(toy_table(space))
    _, a = random_search(space, 20, est, seed=2, workers=1)
    _, b = random_search(space, 20, est, seed=2, workers=4)
    assert [r.row() for r in a] == [r.row() for r in b]


def test_reinforce_single_option_and_baseline():
    space = SearchSpace([Decision("a", "categorical", ("x",)),
                         Decision("b", "categorical", (0, 1))])
    pol = PolicyState.uniform(space)
    rec = TrialRecord(Assignment({"a": "x", "b": 1}), val_metric=1.0)
    new = reinforce_update(pol, rec, lr=0.05, ema_beta=0.9, entropy_coef=0.01)
    np.testing.assert_array_equal(new.logits[0], pol.logits[0])
    assert new.baseline == pytest.approx(0.1)
    assert new.steps == 1


def test_reinforce_positive_advantage_raises_taken_actions():
    space = toy_space()
    rng = np.random.default_rng(0)
    pol = PolicyState.uniform(space)
    pol = PolicyState(pol.names, pol.values,
                      tuple(rng.standard_normal(len(v)) for v in pol.values))
    a = policy_sample(pol, space, seed=1)
    rec = TrialRecord(a, val_metric=0.8)
    new = reinforce_update(pol, rec)
    for n in space.names:
        i = pol.values[pol.names.index(n)].index(a[n])
        assert new.probs(n)[i] > pol.probs(n)[i]


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), steps=st.integers(1, 30))
def test_policy_stays_distribution(seed, steps):
    space = toy_space() + default_spaces("hyper_default")
    rng = np.random.default_rng(seed)
    pol = PolicyState.uniform(space)
    for _ in range(steps):
        a = policy_sample(pol, space, rng)
        pol = reinforce_update(pol, TrialRecord(a, val_metric=float(rng.random())))
        for n in pol.names:
            p = pol.probs(n)
            assert np.all(p >= 0) and abs(p.sum() - 1) <= 1e-9
        assert 0.0 <= pol.baseline <= 1.0


def test_rl_search_learns_toy():
    space = toy_space()
    est = TableEstimator(toy_table(space))
    best, ledger, pol = rl_search(space, 60, est, seed=0)
    assert pol.steps == 60 and best.ok


# ---------------------------------------------------------------------------
# one-shot


def small_ds(seed=0, n=60):
    g, split = generate_sbm(n, 3, 0.3, 0.02, seed=seed, noise=1.0)
    return Dataset(g, split)


def oneshot_space(in_dim=3):
    s = default_spaces("micro_small", input_dim=in_dim)
    return s.restrict(l1__dim=[16], l2__dim=[16], macro__0__2=["zero", "mlp"])


def test_mixed_op_equal_logits_and_linear_oracle():
    rng = np.random.default_rng(0)
    x = Tensor(rng.standard_normal((4, 3)))
    Ws = [rng.standard_normal((3, 2)) for _ in range(3)]
    ops = [lambda t, W=W: ad.matmul(t, Tensor(W)) for W in Ws]
    out = mixed_op(x, ops, np.zeros(3)).data
    np.testing.assert_allclose(out, sum(x.data @ W for W in Ws) / 3, atol=1e-12)
    z = np.array([0.3, -1.0, 2.0])
    p = np.exp(z) / np.exp(z).sum()
    out = mixed_op(x, ops, z).data
    np.testing.assert_allclose(out, sum(pk * (x.data @ W) for pk, W in zip(p, Ws)), atol=1e-6)


def test_supernet_equal_logits_uniform():
    ds = small_ds()
    net = _Supernet(oneshot_space().with_context(ds.in_dim, ds.task), ds.in_dim, 3,
                    np.random.default_rng(0))
    net._norms = []
    for name, opts in net.sites.items():
        ws = net.weights(name, opts, "mixture", None, 1.0)
        np.testing.assert_allclose([float(w.data[0]) for _, w in ws], 1 / len(opts))


def test_single_path_frequencies():
    ds = small_ds()
    net = _Supernet(oneshot_space().with_context(ds.in_dim, ds.task), ds.in_dim, 3,
                    np.random.default_rng(0))
    net._norms = []
    name = "l1.weight_kind"
    opts = net.sites[name]
    net.logits[name].data = np.array([0.5, -0.2, 1.0, 0.0])
    p = np.exp(net.logits[name].data) / np.exp(net.logits[name].data).sum()
    rng = np.random.default_rng(1)
    counts = {o: 0 for o in opts}
    for _ in range(10000):
        (o, w), = net.weights(name, opts, "single", rng, 1.0)
        assert float(w.data[0]) == 1.0
        counts[o] += 1
    freq = np.array([counts[o] / 10000 for o in opts])
    assert np.max(np.abs(freq - p)) <= 0.02


def test_single_path_gradient_routes_to_sampled_candidate():
    ds = small_ds()
    net = _Supernet(oneshot_space().with_context(ds.in_dim, ds.task), ds.in_dim, 3,
                    np.random.default_rng(0))
    net._norms = []
    name = "l1.agg"
    opts = net.sites[name]
    rng = np.random.default_rng(3)
    (o, w), = net.weights(name, opts, "single", rng, 1.0)
    ad.backward(ad.sum_(w))
    g = net.logits[name].grad
    k = opts.index(o)
    p = np.full(len(opts), 1 / len(opts))
    expected = -p.copy()
    expected[k] += 1.0
    np.testing.assert_allclose(g, expected, atol=1e-12)


def test_oneshot_train_normalisation_and_derive():
    ds = small_ds()
    state = oneshot_train(oneshot_space(), ds, epochs=5, seed=0)
    assert state.norm_log and max(state.norm_log) <= 1e-6
    a = oneshot_derive(state)
    assert not state.space.violations(a)
    sp = oneshot_train(oneshot_space(), ds, epochs=5, seed=0, single_path=True)
    assert max(sp.norm_log) <= 1e-6


def test_derive_dominant_and_ties():
    ds = small_ds()
    state = oneshot_train(oneshot_space(), ds, epochs=1, seed=0)
    for name, opts in state.sites.items():
        z = np.zeros(len(opts))
        z[-1] = 5.0
        state.logits[name].data = z
    a = oneshot_derive(state)
    for name, opts in state.sites.items():
        assert a[name] == opts[-1]
    for name, opts in state.sites.items():
        state.logits[name].data = np.zeros(len(opts))
    a = oneshot_derive(state)
    for name, opts in state.sites.items():
        assert a[name] == opts[0]


def test_derive_invalid_raises():
    ds = small_ds()
    space = default_spaces("micro_small", input_dim=ds.in_dim).restrict(
        l1__dim=[16], l2__dim=[32], macro__0__2=["zero", "identity"])
    with pytest.raises(ContractError, match="macro.0.2"):
        oneshot_train(space, ds, epochs=1)


def test_derivation_error_lists_violations():
    ds = small_ds()
    state = oneshot_train(oneshot_space(), ds, epochs=1, seed=0)
    state.fixed["l1.dim"] = 30  # corrupt so the derived assignment breaks a rule
    state.fixed["l1.heads"] = 4
    with pytest.raises(DerivationError):
        oneshot_derive(state)


@pytest.mark.parametrize("restrict,site", [
    ({"l1__dim": [16, 32], "l2__dim": [16]}, "l1.dim"),
])
def test_incompatible_space_names_site(restrict, site):
    ds = small_ds()
    space = default_spaces("micro_small", input_dim=ds.in_dim).restrict(**restrict)
    with pytest.raises(ContractError, match=site.replace(".", r"\.")):
        oneshot_train(space, ds, epochs=1)


def test_hyper_space_rejected_for_oneshot():
    ds = small_ds()
    with pytest.raises(ContractError, match="lr"):
        oneshot_train(oneshot_space() + default_spaces("hyper_default"), ds, epochs=1)


def test_oneshot_deterministic():
    ds = small_ds()
    a = oneshot_train(oneshot_space(), ds, epochs=3, seed=4)
    b = oneshot_train(oneshot_space(), ds, epochs=3, seed=4)
    for name in a.sites:
        np.testing.assert_array_equal(a.logits[name].data, b.logits[name].data)
