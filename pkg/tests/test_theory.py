import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from agentcache._validation import ValidationError
from agentcache.callgraph import build_call_graph, true_kstep_marginals
from agentcache.forecast import Forecast
from agentcache.predictor import noisy_predict
from agentcache.scoring import ScoreParams
from agentcache.theory import (
    BoundViolation,
    NodeAccess,
    TheoryConfig,
    bottom,
    check_lipschitz,
    check_ranking_stability,
    check_regret,
    emc_monte_carlo,
    expand_units,
    lipschitz_instances,
    node_error,
    random_call_graph,
    random_node,
    random_prefix,
    report_csv,
    run_suite,
    scale_perturbation,
    score,
)

from .conftest import chain_spec, loop_spec
from .oracles import score_by_expansion


def fc(rows):
    return Forecast(np.array(rows, dtype=float))


def test_emc_zero_access():
    g = build_call_graph(loop_spec())
    node = NodeAccess.of({0: []})
    est = emc_monte_carlo(g, node, {0: [0]}, ScoreParams(3, 0.7), 1000, 0)
    assert est.mean == 0.0


def test_emc_deterministic_chain():
    g = build_call_graph(chain_spec())
    est = emc_monte_carlo(g, NodeAccess.of({0: [1]}), {0: [0]}, ScoreParams(2, 0.7), 1000, 0)
    assert est.mean == pytest.approx(1.0)
    assert est.stderr == 0.0
    with pytest.raises(ValidationError):
        emc_monte_carlo(g, NodeAccess.of({0: [1]}), {0: [0]}, ScoreParams(2, 0.7), 0)


@pytest.mark.parametrize("seed", range(8))
def test_emc_agrees_with_expansion(seed):
    rng = np.random.default_rng(seed)
    g = random_call_graph(rng)
    params = ScoreParams(int(rng.integers(1, 5)), float(rng.uniform(0.2, 0.9)))
    prefixes = {w: random_prefix(g, rng) for w in range(2)}
    node = random_node(g, rng, [0, 1])
    exact = score_by_expansion(
        node.access, {w: true_kstep_marginals(g, p, params.K).steps for w, p in prefixes.items()},
        params.K, params.gamma,
    )
    est = emc_monte_carlo(g, node, prefixes, params, 20_000, rng)
    assert abs(est.mean - exact) <= 4 * est.stderr + 1e-12


def test_lipschitz_identical_forecasts():
    f = {0: fc([[0.2, 0.3, 0.5]] * 3)}
    (rep,) = check_lipschitz([(NodeAccess.of({0: [0]}), f, f, ScoreParams())])
    assert rep.delta == rep.eps == 0.0


def test_lipschitz_full_noise_has_slack():
    g = build_call_graph(loop_spec())
    params = ScoreParams(3, 0.7)
    truth = {0: true_kstep_marginals(g, [0, 1], 3)}
    pred = {0: noisy_predict(truth[0], 1.0)}
    (rep,) = check_lipschitz([(NodeAccess.of({0: [2]}), truth, pred, params)])
    assert 0 < rep.delta < rep.bound_tight <= rep.bound_loose


@settings(max_examples=100)
@given(st.integers(0, 2**31 - 1))
def test_lipschitz_bound_with_independent_score(seed):
    node, truth, pred, params = next(lipschitz_instances(1, seed))
    t = score_by_expansion(node.access, {w: f.steps for w, f in truth.items()}, params.K, params.gamma)
    p = score_by_expansion(node.access, {w: f.steps for w, f in pred.items()}, params.K, params.gamma)
    eps = 0.0
    for w in node.access:
        for k in range(params.K):
            eps += params.gamma**k * float(np.abs(truth[w].steps[k] - pred[w].steps[k]).sum())
    bound = (1 - params.gamma**params.K) / (2 * (1 - params.gamma)) * eps
    assert abs(t - p) <= bound + 1e-12
    (rep,) = check_lipschitz([(node, truth, pred, params)])
    assert rep.eps == pytest.approx(eps, abs=1e-12)


def test_lipschitz_shape_mismatch():
    a = {0: fc([[0.5, 0.5]] * 3)}
    b = {0: fc([[0.2, 0.3, 0.5]] * 3)}
    with pytest.raises(ValidationError):
        node_error(NodeAccess.of({0: [0]}), a, b, ScoreParams())


def test_halved_multiplier_is_caught():
    bad = [r for r in check_lipschitz(lipschitz_instances(300, 0), strict=False, error_scale=0.5) if r.violated]
    assert bad
    with pytest.raises(BoundViolation):
        check_lipschitz(lipschitz_instances(300, 0), error_scale=0.5)


def test_ranking_zero_perturbation():
    truth = {0: fc([[0.6, 0.1, 0.3]] * 2)}
    res = check_ranking_stability(NodeAccess.of({0: [0]}), NodeAccess.of({0: [1]}), truth, truth, ScoreParams(2, 0.5))
    assert res.condition_holds and res.order_preserved


def test_ranking_constructed_premise():
    params = ScoreParams(1, 0.5)
    truth = {0: fc([[0.7, 0.2, 0.1]])}
    # moving 0.05 of mass gives an l1 error of 0.1 per node, margin 0.5 * 0.2 = 0.1 < gap 0.5
    pred = {0: fc([[0.65, 0.25, 0.1]])}
    res = check_ranking_stability(NodeAccess.of({0: [0]}), NodeAccess.of({0: [1]}), truth, pred, params)
    assert res.gap == pytest.approx(0.5)
    assert res.condition_holds and res.order_preserved
    with pytest.raises(ValidationError):
        check_ranking_stability(NodeAccess.of({0: [1]}), NodeAccess.of({0: [0]}), truth, pred, params)


def nodes_and_truth(seed, n=8):
    rng = np.random.default_rng(seed)
    params = ScoreParams(int(rng.integers(1, 4)), float(rng.uniform(0.2, 0.9)))
    truth = {w: fc(rng.dirichlet(np.ones(4), size=params.K)) for w in range(2)}
    nodes = [NodeAccess.of({w: np.flatnonzero(rng.random(3) < 0.5).tolist() for w in range(2)}) for _ in range(n)]
    return rng, params, truth, nodes


def test_perfect_prediction_has_zero_regret():
    _, params, truth, nodes = nodes_and_truth(0)
    for rep in check_regret(nodes, truth, truth, params):
        assert rep.regret == 0.0


def test_error_inside_both_sets_costs_nothing():
    params = ScoreParams(1, 0.5)
    truth = {0: fc([[0.0, 0.1, 0.9, 0.0]]), 1: fc([[0.5, 0.5, 0.0, 0.0]])}
    pred = {0: truth[0], 1: fc([[0.3, 0.7, 0.0, 0.0]])}
    # the lowest node is driven only by workflow 1, whose error cannot lift it past the others
    nodes = [NodeAccess.of({1: [0]}), NodeAccess.of({0: [2]}), NodeAccess.of({0: [2], 1: [0, 1]})]
    (rep,) = check_regret(nodes, truth, pred, params, B_range=[1])
    _, eps = node_error(nodes[0], truth, pred, params)
    assert eps > 0 and rep.E_hat == rep.E_star and rep.regret == 0.0


@pytest.mark.parametrize("seed", range(15))
def test_regret_against_enumeration(seed):
    rng, params, truth, nodes = nodes_and_truth(seed, n=int(np.random.default_rng(seed).integers(3, 10)))
    pred = {w: fc(0.6 * f.steps + 0.4 * rng.dirichlet(np.ones(4), size=params.K)) for w, f in truth.items()}
    ts = [score(c, truth, params) for c in nodes]
    for rep in check_regret(nodes, truth, pred, params):
        best = min(sum(ts[i] for i in comb) for comb in itertools.combinations(range(len(nodes)), rep.B))
        assert sum(ts[i] for i in rep.E_star) == pytest.approx(best, abs=1e-12)
        assert -1e-12 <= rep.regret <= rep.bound + 1e-12


def test_regret_budget_range():
    _, params, truth, nodes = nodes_and_truth(1, n=4)
    with pytest.raises(ValidationError):
        check_regret(nodes, truth, truth, params, B_range=[4])


def test_bottom_ties_by_index():
    assert bottom([1.0, 0.0, 0.0, 2.0], 2) == (1, 2)


def test_expand_units():
    a, b = NodeAccess.of({0: [0]}), NodeAccess.of({0: [1]})
    assert expand_units([a, b], [2, 1]) == [a, a, b]
    with pytest.raises(ValidationError):
        expand_units([a], [0])


@settings(max_examples=50)
@given(st.integers(0, 2**31 - 1), st.floats(0, 1))
def test_perturbation_scaling_is_linear(seed, t):
    node, truth, pred, params = next(lipschitz_instances(1, seed))
    _, full = node_error(node, truth, pred, params)
    _, part = node_error(node, truth, scale_perturbation(truth, pred, t), params)
    assert part == pytest.approx(t * full, abs=1e-9)


def small_config(**kw):
    base = dict(emc_instances=3, emc_trajectories=5000, lipschitz_instances=300, ranking_pairs=300, regret_instances=40, max_regret_nodes=10)
    base.update(kw)
    return TheoryConfig(**base)


def test_small_suite_passes():
    res = run_suite(small_config())
    assert res.ok, res.summary()
    csv = report_csv(res).splitlines()
    assert csv[0] == "check,instance_id,delta,eps,bound,ratio,violated"
    assert len(csv) == 1 + len(res.rows)
    assert "violations: 0" in res.summary()


def test_mutated_suite_fails():
    res = run_suite(small_config(error_scale=0.5), checks=("lipschitz", "regret"))
    assert not res.ok


def test_suite_validation():
    with pytest.raises(ValidationError):
        TheoryConfig(lipschitz_instances=0)
    with pytest.raises(ValidationError):
        run_suite(small_config(), checks=("nope",))
