import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from agentcache._validation import ValidationError
from agentcache.cache import RadixCache
from agentcache.forecast import Forecast
from agentcache.scoring import (
    ScoreBook,
    ScoreHeap,
    ScoreParams,
    build_heap,
    hierarchical_key,
    multi_step_score,
    refresh_scores,
    single_step_value,
    survival_probs,
)
from agentcache.theory import NodeAccess, random_forecast

from .oracles import score_by_expansion


def fc(rows):
    return Forecast(np.array(rows, dtype=float))


def random_instance(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 6))
    K = int(rng.integers(1, 6))
    gamma = float(rng.uniform(0.05, 0.95))
    workflows = range(int(rng.integers(1, 4)))
    forecasts = {w: random_forecast(rng, K, n) for w in workflows}
    access = {
        w: {a for a in range(n) if rng.random() < 0.5} for w in workflows if rng.random() < 0.8
    }
    return access, forecasts, K, gamma


def test_survival_examples():
    np.testing.assert_allclose(survival_probs(fc([[0.5, 0.5, 0]] * 3)), [1, 1, 1])
    np.testing.assert_allclose(survival_probs(fc([[0.5, 0.5], [0.5, 0.5], [0.5, 0.5]])), [1, 0.5, 0.25])
    np.testing.assert_allclose(survival_probs(fc([[0, 1], [1, 0], [1, 0]]))[1:], [0, 0])


def test_single_step_examples():
    retired = NodeAccess.of({})
    assert single_step_value(retired, {}) == 0.0
    node = NodeAccess.of({0: [0, 2]})
    f = {0: fc([[0.2, 0.3, 0.5, 0.0]])}
    assert single_step_value(node, f) == pytest.approx(0.7)
    two = NodeAccess.of({0: [0], 1: [1]})
    f = {0: fc([[0.4, 0.0, 0.6]]), 1: fc([[0.0, 0.25, 0.75]])}
    assert single_step_value(two, f) == pytest.approx(0.65)


def test_terminated_workflows_do_not_count():
    node = NodeAccess.of({0: [0], 1: [0]})
    f = {0: fc([[1.0, 0.0]]), 1: fc([[1.0, 0.0]])}
    assert single_step_value(node, f, terminated={1}) == 1.0


def test_three_step_example():
    node = NodeAccess.of({0: [0]})
    f = {0: fc([[0.5, 0.3, 0.2]] * 3)}
    got = multi_step_score(node, f, ScoreParams(K=3, gamma=0.7))
    assert got == pytest.approx(0.5 + 0.7 * 0.8 * 0.5 + 0.49 * 0.64 * 0.5, abs=1e-12)
    assert got == pytest.approx(0.9368, abs=1e-12)


@settings(max_examples=200)
@given(st.integers(0, 2**31 - 1))
def test_matches_term_by_term_expansion(seed):
    access, forecasts, K, gamma = random_instance(seed)
    node = NodeAccess.of(access)
    got = multi_step_score(node, forecasts, ScoreParams(K, gamma))
    want = score_by_expansion(access, {w: f.steps for w, f in forecasts.items()}, K, gamma)
    assert abs(got - want) <= 1e-9


@settings(max_examples=100)
@given(st.integers(0, 2**31 - 1), st.floats(0.01, 0.99))
def test_one_step_horizon_is_value(seed, gamma):
    access, forecasts, _, _ = random_instance(seed)
    node = NodeAccess.of(access)
    assert multi_step_score(node, forecasts, ScoreParams(1, gamma)) == single_step_value(node, forecasts)


@settings(max_examples=100)
@given(st.integers(0, 2**31 - 1))
def test_bounds_monotonicity_additivity(seed):
    access, forecasts, K, gamma = random_instance(seed)
    p = ScoreParams(K, gamma)
    s = multi_step_score(NodeAccess.of(access), forecasts, p)
    assert 0.0 <= s <= sum(gamma**k for k in range(K)) * len(access) + 1e-12
    n = forecasts[0].num_agents
    for w in access:
        grown = {**access, w: access[w] | {n - 1}}
        assert multi_step_score(NodeAccess.of(grown), forecasts, p) >= s - 1e-12
    ws = sorted(access)
    left = {w: access[w] for w in ws[::2]}
    right = {w: access[w] for w in ws[1::2]}
    parts = multi_step_score(NodeAccess.of(left), forecasts, p) + multi_step_score(NodeAccess.of(right), forecasts, p)
    assert s == pytest.approx(parts, abs=1e-12)


def test_params_validation():
    with pytest.raises(ValidationError):
        ScoreParams(K=0)
    with pytest.raises(ValidationError):
        ScoreParams(gamma=1.0)
    assert ScoreParams(3, 0.5).lipschitz == pytest.approx((1 - 0.125) / 1.0)
    with pytest.raises(ValidationError, match="shorter than K"):
        multi_step_score(NodeAccess.of({0: [0]}), {0: fc([[1.0, 0.0]])}, ScoreParams(K=2))


def test_score_book_agrees():
    tree = RadixCache(100)
    tree.insert_suffix((1, 2), 0, 0)
    tree.match_prefix((1, 2), 1, 1)
    node = tree.root.children[1]
    f = {0: fc([[0.3, 0.2, 0.5]] * 3), 1: fc([[0.1, 0.6, 0.3]] * 3)}
    p = ScoreParams()
    book = ScoreBook(p)
    for w, x in f.items():
        book.set_forecast(w, x)
    assert book.score(node) == pytest.approx(multi_step_score(node, f, p))
    assert book.value(node) == pytest.approx(single_step_value(node, f))
    book.drop(1)
    assert book.score(node) == pytest.approx(multi_step_score(NodeAccess.of({0: [0]}), f, p))


def test_refresh_touches_only_the_workflow():
    tree = RadixCache(1000)
    tree.insert_suffix((1, 2, 3), 7, 0)
    tree.insert_suffix((1, 2, 3, 4, 5), 7, 1)
    tree.insert_suffix((9, 9), 7, 1)
    tree.insert_suffix((1, 8), 8, 0)
    f = {w: fc([[0.4, 0.4, 0.2]] * 3) for w in (7, 8)}
    p = ScoreParams()
    heap = build_heap(tree, hierarchical_key)
    mine = sorted(tree.wf_nodes[7])
    assert len(mine) == 4  # (1,), (2,3), (4,5), (9,9) after the split
    tree.on_workflow_terminated(7)
    touched = refresh_scores(tree, 7, f, p, heap)
    assert touched == mine
    for nid in touched:
        node = tree.nodes[nid]
        others = {w: a for w, a in node.access.items() if w != 7}
        assert node.score == pytest.approx(multi_step_score(NodeAccess.of(others), f, p))
    heap.audit()


def test_identical_forecast_keeps_heap_order():
    tree = RadixCache(1000)
    for i in range(6):
        tree.insert_suffix((i + 1, 50), i % 2, i % 2)
    f = {w: fc([[0.3, 0.5, 0.2]] * 3) for w in (0, 1)}
    p = ScoreParams()
    heap = build_heap(tree, hierarchical_key)
    for w in (0, 1):
        refresh_scores(tree, w, f, p, heap)
    before = heap.sorted_items()
    refresh_scores(tree, 0, dict(f), p, heap)
    assert heap.sorted_items() == before


@settings(max_examples=80)
@given(st.lists(st.tuples(st.sampled_from(["push", "update", "remove", "pop"]), st.integers(0, 30), st.integers(-50, 50)), max_size=200))
def test_heap_matches_rebuild(ops):
    heap = ScoreHeap()
    model = {}
    for op, ident, raw in ops:
        key = (raw, ident)  # policy keys always end in the node id, so keys are unique
        if op == "push" and ident not in model:
            heap.push(ident, key)
            model[ident] = key
        elif op == "update" and ident in model:
            heap.update(ident, key)
            model[ident] = key
        elif op == "remove" and ident in model:
            heap.remove(ident)
            del model[ident]
        elif op == "pop" and model:
            ident, key = heap.pop()
            assert key == min(model.values())
            del model[ident]
        assert heap.sift_steps <= heap.depth_bound()
        heap.audit()
    assert heap.sorted_items() == ScoreHeap(model.items()).sorted_items()
    assert [heap.pop() for _ in range(len(heap))] == sorted(model.items(), key=lambda x: x[1])


def test_sift_depth_on_large_heap():
    rng = np.random.default_rng(0)
    heap = ScoreHeap((i, float(rng.random())) for i in range(4096))
    for _ in range(5000):
        heap.update(int(rng.integers(4096)), float(rng.random() * 2 - 0.5))
        assert heap.sift_steps <= heap.depth_bound()
    assert heap.max_sift_steps <= heap.depth_bound()


def test_heap_errors():
    heap = ScoreHeap([(1, 0.0)])
    with pytest.raises(KeyError):
        heap.push(1, 1.0)
    heap.pop()
    with pytest.raises(IndexError):
        heap.pop()
    with pytest.raises(IndexError):
        heap.peek()
