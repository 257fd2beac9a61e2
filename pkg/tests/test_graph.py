import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kvann.core import ConfigError, ContractError, Counters, IdSet, IndexConfig, NotFoundError, distances
from kvann.harness.datasets import brute_force_topk, recall_at_k

from _util import Graph, clustered_points, exact_schema, run


def cfg(dim, R=16, L=64, **kw):
    return IndexConfig(dimension=dim, degree_bound=R, build_list_size=L, **kw)


def mean_recall(g, Q, truth, k=10, L=64):
    return float(np.mean([recall_at_k(g.search(q, k, L).ids, t, k) for q, t in zip(Q, truth)]))


@pytest.fixture(scope="module")
def built():
    X = clustered_points(1000, 16, seed=1)
    Q = clustered_points(1100, 16, seed=1)[1000:]
    # one coordinate per subspace keeps code loss small, so recall reflects the graph
    g = Graph(X, cfg(16), m=16).insert_all()
    truth, _ = brute_force_topk(X, Q, 10)
    return g, X, Q, truth


# ---------------------------------------------------------------- search

def test_search_on_empty_graph_returns_nothing():
    g = Graph(np.zeros((2, 4), np.float32), cfg(4, R=4, L=8), schema=exact_schema(np.eye(4)))
    assert len(g.search(np.zeros(4), 1, 8).ids) == 0


def test_single_node_graph():
    X = np.array([[1.0, 2.0, 3.0, 4.0]], np.float32)
    g = Graph(X, cfg(4, R=4, L=8), schema=exact_schema(X)).insert_all()
    res = g.search(np.zeros(4), 1, 8)
    assert res.ids.tolist() == [0]
    assert g.meta().start == 0 and g.out(0) == []


def test_exact_match_is_found_at_distance_zero():
    rng = np.random.default_rng(0)
    X = rng.standard_normal((200, 8)).astype(np.float32)
    g = Graph(X, cfg(8, R=12, L=40), schema=exact_schema(X)).insert_all()
    for i in (0, 57, 199):
        res = g.search(X[i], 1, 40)
        assert res.ids.tolist() == [i] and res.dists[0] == pytest.approx(0.0, abs=1e-5)


def test_search_recall_on_small_graph(built):
    g, X, Q, truth = built
    assert mean_recall(g, Q, truth) >= 0.95


def test_search_list_smaller_than_k_rejected(built):
    with pytest.raises(ConfigError):
        built[0].search(built[2][0], 10, 5)


def test_visited_set_holds_the_reported_neighbors(built):
    g, _, Q, _ = built
    res = g.search(Q[0], 10, 64)
    assert set(res.ids.tolist()) <= set(res.visited.ids.tolist())
    assert len(res.expanded) <= len(res.visited.ids)
    assert np.all(np.diff(res.dists) >= 0)


# ---------------------------------------------------------------- prune

def prune_reference(p, cand, vecs, alpha, R):
    """Line-by-line robust prune over exact vectors; ties broken by id."""
    pool = sorted(set(cand) - {p})
    dp = {v: math.dist(vecs[v], vecs[p]) for v in pool}
    pool.sort(key=lambda v: (dp[v], v))
    out = []
    while pool and len(out) < R:
        star = pool.pop(0)
        out.append(star)
        pool = [v for v in pool if not alpha * dp[star] < math.dist(vecs[v], vecs[star])]
        # the printed condition keeps v only while it is no farther from star than alpha * d(p, star)
    return out


def _line_graph():
    X = np.array([[0.0], [1.0], [2.0], [3.0]], np.float32)
    return Graph(X, cfg(1, R=4, L=8, alpha=1.0), schema=exact_schema(X))


def test_prune_on_collinear_points():
    g = _line_graph()
    g.write(range(4))
    assert run(g.engine.robust_prune(g.suite, 0, [1, 2, 3], [])) == [1, 2]


def test_prune_with_empty_pool_and_self_only():
    g = _line_graph()
    g.write(range(4))
    assert run(g.engine.robust_prune(g.suite, 0, [], [])) == []
    assert run(g.engine.robust_prune(g.suite, 0, [0], [])) == []


def test_prune_of_missing_point_raises():
    g = _line_graph()
    g.write([1, 2])
    with pytest.raises(NotFoundError):
        run(g.engine.robust_prune(g.suite, 0, [1, 2], []))


@settings(max_examples=30)
@given(st.integers(0, 10**6), st.sampled_from([1.0, 1.2, 1.5]), st.integers(2, 12))
def test_prune_matches_reference(seed, alpha, R):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((60, 3)).astype(np.float32)
    g = Graph(X, cfg(3, R=R, L=max(R, 16), alpha=alpha), schema=exact_schema(X))
    g.write(range(60))
    cand = rng.choice(np.arange(1, 60), rng.integers(1, 50), replace=False).tolist()
    got = run(g.engine.robust_prune(g.suite, 0, cand, []))
    want = prune_reference(0, cand, X.astype(np.float64), alpha, R)
    assert got == want
    assert len(got) <= R and 0 not in got and len(set(got)) == len(got)


# ---------------------------------------------------------------- insert

def test_second_insert_links_both_ways():
    X = np.array([[0.0, 0.0], [1.0, 1.0]], np.float32)
    g = Graph(X, cfg(2, R=4, L=8), schema=exact_schema(X)).insert_all()
    assert g.out(0) == [1] and g.out(1) == [0]


def test_insert_requires_stored_terms_and_rejects_duplicates():
    X = np.eye(3, dtype=np.float32)
    g = Graph(X, cfg(3, R=4, L=8), schema=exact_schema(X)).insert_all([0])
    with pytest.raises(NotFoundError):
        run(g.engine.insert(g.suite, 1))
    with pytest.raises(ContractError):
        run(g.engine.insert(g.suite, 0))


def test_graph_invariants_after_sequential_inserts(built):
    g, X, _, _ = built
    adj = g.adjacency()
    assert len(adj) == len(X)
    assert all(v not in nb for v, nb in adj.items())
    assert max(len(nb) for nb in adj.values()) <= g.config.max_degree
    assert all(len(set(nb)) == len(nb) for nb in adj.values())
    assert g.reachable() == set(range(len(X)))
    assert g.meta().live_count == len(X)


def test_insert_reads_are_counted(built):
    g = built[0]
    assert g.counters.quant_reads > 0 and g.counters.adj_reads > 0


@pytest.mark.parametrize("use_kernels", [True, False])
def test_fused_and_provider_paths_agree(use_kernels):
    X = clustered_points(300, 8, seed=5)
    a = Graph(X, cfg(8, R=8, L=24), m=4, use_kernels=use_kernels).insert_all()
    b = Graph(X, cfg(8, R=8, L=24), m=4, backend="store").insert_all()
    assert a.adjacency() == b.adjacency()
    assert a.meta().start == b.meta().start


# ---------------------------------------------------------------- mini-batch

def test_batch_of_one_equals_single_insert():
    X = clustered_points(300, 8, seed=2)
    a = Graph(X, cfg(8, R=8, L=24), m=4).insert_all()
    b = Graph(X, cfg(8, R=8, L=24), m=4).insert_all(batch=1)
    assert a.adjacency() == b.adjacency()


def test_minibatch_rejects_duplicates_and_oversize():
    X = clustered_points(20, 8, seed=2)
    g = Graph(X, cfg(8, R=8, L=24, minibatch_max=5), schema=exact_schema(X))
    g.write(range(10))
    with pytest.raises(ContractError):
        run(g.engine.minibatch_insert(g.suite, [1, 1]))
    with pytest.raises(ContractError):
        run(g.engine.minibatch_insert(g.suite, list(range(6))))


@pytest.mark.parametrize("concurrent", [True, False])
def test_minibatch_graph_stays_bounded_and_connected(concurrent):
    X = clustered_points(1000, 16, seed=3)
    g = Graph(X, cfg(16, prune_rule="rng"), m=8, concurrent=concurrent).insert_all(batch=50)
    adj = g.adjacency()
    assert max(len(nb) for nb in adj.values()) <= g.config.max_degree
    assert g.reachable() == set(range(1000))


def test_first_batches_grow_the_graph_one_vertex_at_a_time():
    X = clustered_points(300, 8, seed=2)
    a = Graph(X, cfg(8, R=8, L=24, prune_rule="rng"), m=4)
    a.write(range(40))
    run(a.engine.minibatch_insert(a.suite, list(range(40))))
    # an empty graph cannot absorb 40 vertices at once: the first 20 go in one by one
    b = Graph(X, cfg(8, R=8, L=24, prune_rule="rng"), m=4).insert_all(range(20))
    b.write(range(20, 40))
    run(b.engine.minibatch_insert(b.suite, list(range(20, 40))))
    assert a.adjacency() == b.adjacency()
    assert a.meta().live_count == 40 and a.reachable() == set(range(40))


def test_minibatch_does_not_depend_on_task_scheduling():
    X = clustered_points(400, 8, seed=4)
    a = Graph(X, cfg(8, R=8, L=24), m=4, concurrent=True).insert_all(batch=40)
    b = Graph(X, cfg(8, R=8, L=24), m=4, concurrent=False).insert_all(batch=40)
    assert a.adjacency() == b.adjacency()


# ---------------------------------------------------------------- replace

def test_replace_with_identical_vector_keeps_search_results(built):
    g, X, Q, _ = built
    before = [g.search(q, 10, 64).ids.tolist() for q in Q[:20]]
    run(g.engine.replace(g.suite, 5))
    after = [g.search(q, 10, 64).ids.tolist() for q in Q[:20]]
    overlap = np.mean([len(set(a) & set(b)) for a, b in zip(before, after)])
    assert overlap >= 9.5
    assert g.meta().live_count == len(X)


def test_replaced_vectors_are_found_at_their_new_position():
    rng = np.random.default_rng(9)
    X = rng.standard_normal((240, 6)).astype(np.float32)
    Y = X.copy()
    moved = rng.choice(200, 20, replace=False)
    Y[moved] = X[200 + np.arange(20)] + 0.5
    g = Graph(np.concatenate([X[:200], Y[moved]]), cfg(6, R=10, L=40),
              schema=exact_schema(np.concatenate([X[:200], Y[moved]])))
    g.insert_all(range(200))
    for j, i in enumerate(moved):
        # overwrite vertex i's stored vector and code with the new position (row 200 + j)
        g.X[i] = g.X[200 + j]
        g.codes[i] = g.codes[200 + j]
        g.write([i])
        run(g.engine.replace(g.suite, int(i)))
    # a replaced vertex starts with few out-edges, so the probe uses a roomier list
    for i in moved:
        res = g.search(g.X[i], 1, 80)
        assert res.ids.tolist() == [i]
    assert max(len(nb) for nb in g.adjacency().values()) <= g.config.max_degree


# ---------------------------------------------------------------- delete

@pytest.fixture()
def small():
    X = clustered_points(600, 8, seed=8)
    return Graph(X, cfg(8, R=12, L=40), m=4).insert_all()


def test_inplace_delete_removes_every_trace(small):
    g = small
    victims = list(range(0, 600, 6))
    for v in victims:
        run(g.engine.inplace_delete(g.suite, v))
    adj = g.adjacency()
    assert not set(victims) & set(adj)
    assert not set(victims) & set(g.live())
    assert max(len(nb) for nb in adj.values()) <= g.config.max_degree
    assert g.meta().live_count == 500
    assert all(v not in nb for v, nb in adj.items())


def test_inplace_delete_keeps_graph_navigable(small):
    g = small
    for v in range(0, 600, 3):
        run(g.engine.inplace_delete(g.suite, v))
    live = sorted(g.live())
    assert len(g.reachable()) >= 0.98 * len(live)
    Q = g.X[live[:30]]
    truth, _ = brute_force_topk(g.X[live], Q, 10)
    rec = [recall_at_k(g.search(q, 10, 40).ids, np.array(live)[t], 10) for q, t in zip(Q, truth)]
    assert np.mean(rec) >= 0.9


def test_deleting_the_start_promotes_a_live_vertex(small):
    g = small
    for _ in range(5):
        s = g.meta().start
        run(g.engine.inplace_delete(g.suite, s))
        assert g.meta().start != s and g.meta().start in set(g.live())


def test_deleting_everything_empties_the_graph():
    X = clustered_points(30, 4, seed=1)
    g = Graph(X, cfg(4, R=4, L=8), schema=exact_schema(X)).insert_all()
    for v in range(30):
        run(g.engine.inplace_delete(g.suite, v))
    assert g.meta().start is None and g.meta().live_count == 0
    assert len(g.search(X[0], 1, 8).ids) == 0
    with pytest.raises(NotFoundError):
        run(g.engine.inplace_delete(g.suite, 3))


def test_drop_delete_then_consolidation_cleans_all_edges(small):
    g = small
    victims = set(range(1, 600, 4))
    for v in sorted(victims):
        run(g.engine.drop_delete(g.suite, v))
    dangling = sum(len(set(nb) & victims) for nb in g.adjacency().values())
    assert dangling > 0
    # searches skip ids without a quantized term
    for q in g.X[:10]:
        assert not set(g.search(q, 10, 40).ids.tolist()) & victims
    released, cycles = [], 0
    while g.meta().deleted_pending:
        rep = run(g.engine.consolidate_deleted(g.suite, 64))
        assert rep.scanned <= 64
        released += rep.released
        cycles += rep.cycle_completed
    # ids still referenced during a pass are released by the next clean pass
    assert cycles == 2
    assert sorted(released) == sorted(victims)
    assert sum(len(set(nb) & victims) for nb in g.adjacency().values()) == 0
    assert not g.meta().deleted_pending
    assert run(g.engine.consolidate_deleted(g.suite, 64)).scanned == 0


def test_consolidation_budget_must_be_positive(small):
    with pytest.raises(ConfigError):
        run(small.engine.consolidate_deleted(small.suite, 0))


# ---------------------------------------------------------------- pagination

def _drain(g, q, k, L, matcher=None, beta=1.0):
    pager = g.engine.paginated(g.suite, q, L, matcher, beta)
    pages = []
    while True:
        ids, _ = run(pager.next_page(k))
        if len(ids) == 0:
            return pages, pager
        pages.append(ids.tolist())


def test_pages_never_repeat_and_exhaust_reachable_set(small):
    g = small
    pages, pager = _drain(g, g.X[3], 10, 20)
    flat = [i for p in pages for i in p]
    assert len(flat) == len(set(flat))
    assert set(flat) == g.reachable()
    assert pager.exhausted and len(run(pager.next_page(10))[0]) == 0


def test_first_page_equals_greedy_top_k(small):
    g = small
    for q in g.X[:20] + 0.05:
        first = run(g.engine.paginated(g.suite, q, 40).next_page(10))[0]
        assert first.tolist() == g.search(q, 10, 40).ids.tolist()


def test_page_size_must_be_positive(small):
    with pytest.raises(ConfigError):
        run(small.engine.paginated(small.suite, small.X[0], 20).next_page(0))


# ---------------------------------------------------------------- beta search

def test_beta_one_visits_what_greedy_visits(small):
    g = small
    m = IdSet(range(0, 600, 2))
    for q in g.X[:10] + 0.1:
        a = run(g.engine.beta_search(g.suite, q, m, 10, 40, 1.0))
        b = g.search(q, 10, 40)
        assert set(a.visited.ids.tolist()) == set(b.visited.ids.tolist())
        want = [i for i in b.visited.ids[np.lexsort((b.visited.ids, b.visited.dists))].tolist()
                if i % 2 == 0][:10]
        assert a.ids.tolist() == want


@pytest.mark.parametrize("beta", [0.1, 0.5, 1.0])
def test_beta_has_no_effect_when_everything_matches(small, beta):
    g = small
    m = IdSet(range(600))
    for q in g.X[:10] + 0.1:
        a = run(g.engine.beta_search(g.suite, q, m, 10, 40, beta))
        assert a.ids.tolist() == g.search(q, 10, 40).ids.tolist()


def test_beta_outside_range_rejected(small):
    with pytest.raises(ConfigError):
        run(small.engine.beta_search(small.suite, small.X[0], IdSet([1]), 1, 8, 0.0))
    with pytest.raises(ConfigError):
        small.engine.paginated(small.suite, small.X[0], 8, beta=1.5)


def test_filtered_search_recall():
    X = clustered_points(2000, 16, seed=12)
    g = Graph(X, cfg(16), m=8).insert_all()
    rng = np.random.default_rng(0)
    keep = np.sort(rng.choice(2000, 200, replace=False))
    m = IdSet(keep.tolist())
    Q = X[rng.choice(2000, 40, replace=False)] + 0.05
    truth, _ = brute_force_topk(X[keep], Q, 10)
    rec = []
    for q, t in zip(Q, truth):
        res = run(g.engine.beta_search(g.suite, q, m, 10, 200, 0.3))
        assert set(res.ids.tolist()) <= set(keep.tolist())
        rec.append(recall_at_k(res.ids, keep[t], 10))
    assert np.mean(rec) >= 0.9


def test_beta_visited_keys_are_scaled_only_for_matches(small):
    g = small
    m = IdSet(range(0, 600, 2))
    res = run(g.engine.beta_search(g.suite, g.X[0] + 0.1, m, 10, 40, 0.5))
    v = res.visited
    hit = m.contains(v.ids)
    np.testing.assert_allclose(v.keys[hit], v.dists[hit] * 0.5, rtol=1e-6)
    np.testing.assert_array_equal(v.keys[~hit], v.dists[~hit])


def test_search_counts_whole_out_lists(small):
    g = small
    c = Counters()
    res = run(g.engine.greedy_search(g.suite, g.X[0], 10, 40, c))
    assert c.adj_reads == len(res.expanded)
    assert c.quant_reads >= len(res.visited.ids) - 1
    assert np.all(distances(g.X[0], g.X[res.ids]) >= 0)
