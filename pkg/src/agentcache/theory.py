"""Empirical checks of the score's guarantees against brute-force references.

Four properties are exercised:

* the score of a node equals its expected discounted miss count when the
  node stays evicted for the whole horizon (checked by Monte Carlo);
* the score is Lipschitz in the per-step l1 forecast error;
* a score gap larger than the combined error bound cannot flip a ranking;
* evicting the bottom-B nodes by predicted score costs at most the bound
  summed over the nodes where the predicted and true selections disagree.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from ._validation import ValidationError, check_random_state, check_scalar
from .callgraph import CallGraph, build_call_graph, sample_workflow, true_kstep_marginals
from .forecast import Forecast
from .scoring import ScoreParams, multi_step_score

# absolute slack for float comparisons of sums that are equal in exact arithmetic
ATOL = 1e-12


class BoundViolation(AssertionError):
    pass


@dataclass(frozen=True)
class NodeAccess:
    """Agents of each active workflow that have traversed a node."""

    access: Mapping[int, frozenset]

    @classmethod
    def of(cls, mapping: Mapping[int, Iterable[int]]) -> "NodeAccess":
        return cls({int(w): frozenset(int(a) for a in agents) for w, agents in mapping.items()})


def score(node: NodeAccess, forecasts: Mapping[int, Forecast], params: ScoreParams) -> float:
    return multi_step_score(node, forecasts, params)


def multiplier(params: ScoreParams, error_scale: float = 1.0) -> float:
    """Lipschitz constant of the score in the discounted l1 error.

    ``error_scale`` exists for mutation testing of the checkers only.
    """
    return params.lipschitz * error_scale


# -- expected miss count by simulation --------------------------------------
@dataclass(frozen=True)
class EMCEstimate:
    mean: float
    stderr: float
    trajectories: int

    def agrees(self, exact: float, sigmas: float = 3.0) -> bool:
        return abs(self.mean - exact) <= sigmas * self.stderr + ATOL


def emc_monte_carlo(
    g: CallGraph,
    node: NodeAccess,
    prefixes: Mapping[int, Sequence[int]],
    params: ScoreParams,
    num_trajectories: int,
    random_state=None,
) -> EMCEstimate:
    """Discounted misses on an evicted node, averaged over sampled futures.

    For every workflow tagged on ``node``, ``num_trajectories`` continuations
    of its prefix are drawn from the true kernel; a miss is counted at step
    ``k`` when the workflow is still running and invokes an agent that has
    accessed the node. Workflows are independent, so their variances add.
    """
    check_scalar(num_trajectories, "num_trajectories", kind=int, lo=1)
    rng = check_random_state(random_state)
    space = g.state_space
    cdf = np.cumsum(space.rows, axis=1)
    disc = params.gamma ** np.arange(params.K)
    total = 0.0
    var = 0.0
    for w in sorted(node.access):
        agents = node.access[w]
        if not agents:
            continue
        hit = np.zeros(g.num_agents + 1, dtype=bool)
        hit[list(agents)] = True
        state = np.full(num_trajectories, space.lookup(prefixes[w], g.n_ctx), dtype=np.int64)
        alive = np.ones(num_trajectories, dtype=bool)
        misses = np.zeros(num_trajectories)
        for k in range(params.K):
            u = rng.random(num_trajectories)
            outcome = (u[:, None] >= cdf[state]).sum(axis=1)
            # guard against cumulative sums that round just below 1
            outcome = np.minimum(outcome, g.num_agents)
            misses += disc[k] * (alive & hit[outcome])
            alive &= outcome != g.end
            nxt = np.where(alive, outcome, 0)
            state = np.where(alive, space.successor[state, nxt], state)
        total += misses.mean()
        var += misses.var(ddof=1) / num_trajectories if num_trajectories > 1 else 0.0
    return EMCEstimate(float(total), math.sqrt(var), num_trajectories)


# -- Lipschitz bound ----------------------------------------------------------
@dataclass
class PerturbationReport:
    eps_steps: dict[int, np.ndarray]
    eps: float
    delta: float
    bound_tight: float
    bound_loose: float

    @property
    def ratio(self) -> float:
        if self.bound_tight == 0.0:
            return 0.0 if self.delta <= ATOL else math.inf
        return self.delta / self.bound_tight

    @property
    def violated(self) -> bool:
        return self.delta > self.bound_tight + ATOL or self.bound_tight > self.bound_loose + ATOL


def node_error(
    node: NodeAccess,
    truth: Mapping[int, Forecast],
    pred: Mapping[int, Forecast],
    params: ScoreParams,
) -> tuple[dict[int, np.ndarray], float]:
    """Per-step l1 errors of the node's workflows and their discounted total."""
    disc = params.gamma ** np.arange(params.K)
    per = {}
    eps = 0.0
    for w in sorted(node.access):
        t, p = truth[w].steps[: params.K], pred[w].steps[: params.K]
        if t.shape != p.shape:
            raise ValidationError(f"forecast shapes differ for workflow {w}: {t.shape} vs {p.shape}")
        per[w] = np.abs(t - p).sum(axis=1)
        eps += float(disc @ per[w])
    return per, eps


def lipschitz_report(
    node: NodeAccess,
    truth: Mapping[int, Forecast],
    pred: Mapping[int, Forecast],
    params: ScoreParams,
    error_scale: float = 1.0,
) -> PerturbationReport:
    per, eps = node_error(node, truth, pred, params)
    delta = abs(score(node, truth, params) - score(node, pred, params))
    loose = eps / (2.0 * (1.0 - params.gamma)) * error_scale
    return PerturbationReport(per, eps, delta, multiplier(params, error_scale) * eps, loose)


def check_lipschitz(instances: Iterable, strict: bool = True, error_scale: float = 1.0):
    """Reports for ``(node, truth, pred, params)`` instances.

    With ``strict`` a violated bound raises :class:`BoundViolation`.
    """
    out = []
    for node, truth, pred, params in instances:
        rep = lipschitz_report(node, truth, pred, params, error_scale)
        if strict and rep.violated:
            raise BoundViolation(f"score gap {rep.delta} exceeds bound {rep.bound_tight}")
        out.append(rep)
    return out


# -- ranking stability ---------------------------------------------------------
@dataclass(frozen=True)
class RankingResult:
    gap: float
    margin: float
    condition_holds: bool
    order_preserved: bool

    @property
    def violated(self) -> bool:
        return self.condition_holds and not self.order_preserved


def check_ranking_stability(
    c1: NodeAccess,
    c2: NodeAccess,
    truth: Mapping[int, Forecast],
    pred: Mapping[int, Forecast],
    params: ScoreParams,
    strict: bool = True,
    error_scale: float = 1.0,
) -> RankingResult:
    """Does a true score gap that beats both nodes' error bounds survive prediction?"""
    s1, s2 = score(c1, truth, params), score(c2, truth, params)
    if not s1 > s2:
        raise ValidationError("the first node must have the strictly higher true score")
    _, e1 = node_error(c1, truth, pred, params)
    _, e2 = node_error(c2, truth, pred, params)
    margin = multiplier(params, error_scale) * (e1 + e2)
    gap = s1 - s2
    preserved = score(c1, pred, params) > score(c2, pred, params)
    res = RankingResult(gap, margin, margin < gap, preserved)
    if strict and res.violated:
        raise BoundViolation(f"ranking flipped although gap {gap} > margin {margin}")
    return res


# -- eviction regret ---------------------------------------------------------------
@dataclass(frozen=True)
class RegretReport:
    B: int
    E_hat: tuple
    E_star: tuple
    regret: float
    bound: float

    @property
    def violated(self) -> bool:
        return self.regret < -ATOL or self.regret > self.bound + ATOL

    @property
    def ratio(self) -> float:
        if self.bound == 0.0:
            return 0.0 if abs(self.regret) <= ATOL else math.inf
        return self.regret / self.bound


def bottom(scores: Sequence[float], B: int) -> tuple[int, ...]:
    """Indices of the B smallest scores; ties go to the smaller index."""
    order = sorted(range(len(scores)), key=lambda i: (scores[i], i))
    return tuple(sorted(order[:B]))


def exhaustive_min(scores: Sequence[float], B: int) -> float:
    return min(sum(scores[i] for i in comb) for comb in itertools.combinations(range(len(scores)), B))


def regret_from_scores(
    true_scores: Sequence[float],
    pred_scores: Sequence[float],
    eps: Sequence[float],
    params: ScoreParams,
    B: int,
    error_scale: float = 1.0,
) -> RegretReport:
    n = len(true_scores)
    if not 1 <= B <= n - 1:
        raise ValidationError(f"budget B={B} outside [1, {n - 1}]")
    e_hat = bottom(pred_scores, B)
    e_star = bottom(true_scores, B)
    regret = sum(true_scores[i] for i in e_hat) - sum(true_scores[i] for i in e_star)
    sym = set(e_hat) ^ set(e_star)
    bound = multiplier(params, error_scale) * sum(eps[i] for i in sym)
    return RegretReport(B, e_hat, e_star, float(regret), float(bound))


def check_regret(
    nodes: Sequence[NodeAccess],
    truth: Mapping[int, Forecast],
    pred: Mapping[int, Forecast],
    params: ScoreParams,
    B_range: Iterable[int] | None = None,
    strict: bool = True,
    exhaustive_limit: int = 12,
    error_scale: float = 1.0,
) -> list[RegretReport]:
    """Regret of predicted-score eviction for every budget in ``B_range``.

    Every node counts one unit toward the budget; see :func:`expand_units`
    for nodes of unequal size. For ``len(nodes) <= exhaustive_limit`` the
    true-score selection is cross-checked against all subsets of size B.
    """
    n = len(nodes)
    if n < 2:
        raise ValidationError("regret needs at least two nodes")
    ts = [score(c, truth, params) for c in nodes]
    ps = [score(c, pred, params) for c in nodes]
    eps = [node_error(c, truth, pred, params)[1] for c in nodes]
    budgets = range(1, n) if B_range is None else B_range
    out = []
    for B in budgets:
        rep = regret_from_scores(ts, ps, eps, params, B, error_scale)
        if n <= exhaustive_limit:
            best = exhaustive_min(ts, B)
            star = sum(ts[i] for i in rep.E_star)
            if abs(best - star) > 1e-9:
                raise AssertionError(f"bottom-B selection misses the optimum at B={B}")
        if strict and rep.violated:
            raise BoundViolation(f"regret {rep.regret} outside [0, {rep.bound}] at B={B}")
        out.append(rep)
    return out


def expand_units(nodes: Sequence[NodeAccess], sizes: Sequence[int]) -> list[NodeAccess]:
    """Replace a node of size ``m`` by ``m`` unit copies sharing its access set."""
    if len(nodes) != len(sizes):
        raise ValidationError("one size per node")
    out = []
    for node, m in zip(nodes, sizes):
        check_scalar(m, "size", kind=int, lo=1)
        out.extend([node] * m)
    return out


def scale_perturbation(
    truth: Mapping[int, Forecast], pred: Mapping[int, Forecast], t: float
) -> dict[int, Forecast]:
    """Move each prediction a fraction ``t`` of the way from the truth."""
    check_scalar(t, "t", lo=0.0, hi=1.0)
    return {w: Forecast(truth[w].steps + t * (pred[w].steps - truth[w].steps)) for w in truth}


# -- random instances ----------------------------------------------------------------
def random_call_graph(rng: np.random.Generator, max_agents: int = 6, two_step_context: bool | None = None) -> CallGraph:
    """A random terminating graph; every row keeps some END mass."""
    n = int(rng.integers(2, max_agents + 1))
    names = [f"a{i}" for i in range(n)]
    edges = [(i, j) for i in range(n) for j in range(n) if rng.random() < 0.6]
    succ = {i: [j for a, j in edges if a == i] for i in range(n)}

    def row(last: int) -> dict:
        targets = succ[last]
        w = rng.dirichlet(np.ones(len(targets) + 1))
        # keep END reachable from every state
        w[-1] = max(w[-1], 0.05)
        w = w / w.sum()
        out = {names[j]: float(p) for j, p in zip(targets, w[:-1])}
        out["END"] = float(1.0 - sum(out.values()))
        return out

    kernel = {names[i]: row(i) for i in range(n)}
    if two_step_context is None:
        two_step_context = bool(rng.random() < 0.5)
    if two_step_context:
        for i, j in edges:
            if rng.random() < 0.5:
                kernel[f"{names[i]}>{names[j]}"] = row(j)
    entry = rng.dirichlet(np.ones(n))
    spec = {
        "agents": names,
        "edges": [[names[i], names[j]] for i, j in edges],
        "kernel": kernel,
        "entry": {names[i]: float(p) for i, p in enumerate(entry)},
        "max_steps": 200,
    }
    return build_call_graph(spec)


def random_prefix(g: CallGraph, rng: np.random.Generator) -> list[int]:
    trace = sample_workflow(g, int(rng.integers(2**31)))
    cut = int(rng.integers(1, len(trace) + 1))
    return list(trace.invocations[:cut])


def random_node(g: CallGraph, rng: np.random.Generator, workflows: Sequence[int]) -> NodeAccess:
    access = {}
    for w in workflows:
        mask = rng.random(g.num_agents) < 0.4
        access[w] = np.flatnonzero(mask).tolist()
    return NodeAccess.of(access)


def random_forecast(rng: np.random.Generator, horizon: int, num_agents: int) -> Forecast:
    steps = rng.dirichlet(np.full(num_agents + 1, 0.7), size=horizon)
    return Forecast(steps)


def perturb(rng: np.random.Generator, f: Forecast, node_agents=None, scale: float | None = None) -> Forecast:
    """A random perturbation of ``f``.

    Half of the draws mix toward a random distribution; the rest move mass
    between the node's agents and the other outcomes, which is where the
    bound is tight.
    """
    lam = float(rng.random()) if scale is None else scale
    if node_agents is None or rng.random() < 0.5:
        other = rng.dirichlet(np.ones(f.num_outcomes), size=f.horizon)
        return Forecast((1.0 - lam) * f.steps + lam * other)
    steps = f.steps.copy()
    inside = np.zeros(f.num_outcomes, dtype=bool)
    inside[list(node_agents)] = True
    outside = ~inside
    for k in range(f.horizon):
        src, dst = (inside, outside) if rng.random() < 0.5 else (outside, inside)
        moved = lam * steps[k, src].sum()
        if moved <= 0 or not dst.any():
            continue
        steps[k, src] *= 1.0 - lam
        target = np.zeros(f.num_outcomes)
        target[rng.choice(np.flatnonzero(dst))] = 1.0
        steps[k] += moved * target
    return Forecast(steps)


def random_params(rng: np.random.Generator) -> ScoreParams:
    return ScoreParams(int(rng.integers(1, 6)), float(rng.uniform(0.1, 0.95)))


def _forecast_instance(rng, num_workflows=None, scale=None):
    params = random_params(rng)
    num_agents = int(rng.integers(2, 7))
    nw = int(rng.integers(1, 4)) if num_workflows is None else num_workflows
    access = {w: np.flatnonzero(rng.random(num_agents) < 0.4).tolist() for w in range(nw)}
    node = NodeAccess.of(access)
    truth = {w: random_forecast(rng, params.K, num_agents) for w in range(nw)}
    pred = {w: perturb(rng, truth[w], access[w], scale) for w in range(nw)}
    return node, truth, pred, params


def lipschitz_instances(n: int, random_state=0):
    rng = check_random_state(random_state)
    for _ in range(n):
        yield _forecast_instance(rng)


# -- suite ---------------------------------------------------------------------------
@dataclass(frozen=True)
class TheoryConfig:
    emc_instances: int = 50
    emc_trajectories: int = 100_000
    lipschitz_instances: int = 10_000
    ranking_pairs: int = 10_000
    regret_instances: int = 1_000
    max_regret_nodes: int = 20
    seed: int = 0
    error_scale: float = 1.0

    def __post_init__(self):
        for name in ("emc_instances", "lipschitz_instances", "ranking_pairs", "regret_instances"):
            check_scalar(getattr(self, name), name, kind=int, lo=1)
        check_scalar(self.emc_trajectories, "emc_trajectories", kind=int, lo=2)
        check_scalar(self.max_regret_nodes, "max_regret_nodes", kind=int, lo=2)
        check_scalar(self.error_scale, "error_scale", lo=0.0, lo_open=True)


@dataclass
class TheoryRow:
    check: str
    instance_id: int
    delta: float
    eps: float
    bound: float
    ratio: float
    violated: bool


@dataclass
class TheoryResult:
    rows: list[TheoryRow] = field(default_factory=list)
    max_ratio: dict[str, float] = field(default_factory=dict)
    max_emc_sigmas: float = 0.0
    ranking_premise_count: int = 0

    @property
    def violations(self) -> int:
        return sum(r.violated for r in self.rows)

    @property
    def ok(self) -> bool:
        return self.violations == 0

    def summary(self) -> str:
        parts = [f"{k}: max ratio {v:.4f}" for k, v in sorted(self.max_ratio.items())]
        parts.append(f"emc: max |estimate - score| / stderr {self.max_emc_sigmas:.3f}")
        parts.append(f"ranking pairs meeting the premise: {self.ranking_premise_count}")
        parts.append(f"violations: {self.violations}")
        return "\n".join(parts)


def run_emc(config: TheoryConfig, rng: np.random.Generator, result: TheoryResult) -> None:
    for i in range(config.emc_instances):
        g = random_call_graph(rng)
        params = random_params(rng)
        workflows = list(range(int(rng.integers(1, 4))))
        prefixes = {w: random_prefix(g, rng) for w in workflows}
        node = random_node(g, rng, workflows)
        forecasts = {w: true_kstep_marginals(g, prefixes[w], params.K) for w in workflows}
        exact = score(node, forecasts, params)
        est = emc_monte_carlo(g, node, prefixes, params, config.emc_trajectories, rng)
        dev = abs(est.mean - exact)
        sig = dev / est.stderr if est.stderr > 0 else (0.0 if dev <= ATOL else math.inf)
        result.max_emc_sigmas = max(result.max_emc_sigmas, sig)
        result.rows.append(
            TheoryRow("emc", i, dev, est.stderr, 3.0 * est.stderr, sig / 3.0, not est.agrees(exact))
        )


def run_lipschitz(config: TheoryConfig, rng: np.random.Generator, result: TheoryResult) -> None:
    worst = 0.0
    for i in range(config.lipschitz_instances):
        node, truth, pred, params = _forecast_instance(rng)
        rep = lipschitz_report(node, truth, pred, params, config.error_scale)
        worst = max(worst, rep.ratio)
        result.rows.append(
            TheoryRow("lipschitz", i, rep.delta, rep.eps, rep.bound_tight, rep.ratio, rep.violated)
        )
    result.max_ratio["lipschitz"] = worst


def run_ranking(config: TheoryConfig, rng: np.random.Generator, result: TheoryResult) -> None:
    worst = 0.0
    for i in range(config.ranking_pairs):
        params = random_params(rng)
        num_agents = int(rng.integers(2, 7))
        nw = int(rng.integers(1, 4))
        truth = {w: random_forecast(rng, params.K, num_agents) for w in range(nw)}
        c1 = NodeAccess.of({w: np.flatnonzero(rng.random(num_agents) < 0.5).tolist() for w in range(nw)})
        c2 = NodeAccess.of({w: np.flatnonzero(rng.random(num_agents) < 0.5).tolist() for w in range(nw)})
        # small perturbations so that a fair share of pairs meets the premise
        scale = float(rng.uniform(0.0, 0.3) ** 2)
        pred = {w: perturb(rng, truth[w], None, scale) for w in range(nw)}
        s1, s2 = score(c1, truth, params), score(c2, truth, params)
        if s1 == s2:
            continue
        if s1 < s2:
            c1, c2 = c2, c1
        res = check_ranking_stability(c1, c2, truth, pred, params, False, config.error_scale)
        result.ranking_premise_count += int(res.condition_holds)
        ratio = res.margin / res.gap if res.gap > 0 else math.inf
        if res.condition_holds:
            worst = max(worst, ratio)
        result.rows.append(TheoryRow("ranking", i, res.gap, res.margin, res.margin, ratio, res.violated))
    result.max_ratio["ranking"] = worst


def run_regret(config: TheoryConfig, rng: np.random.Generator, result: TheoryResult) -> None:
    worst = 0.0
    for i in range(config.regret_instances):
        params = random_params(rng)
        num_agents = int(rng.integers(2, 7))
        nw = int(rng.integers(1, 5))
        n = int(rng.integers(2, config.max_regret_nodes + 1))
        truth = {w: random_forecast(rng, params.K, num_agents) for w in range(nw)}
        # every fifth instance has perfect predictions
        perfect = i % 5 == 0
        pred = truth if perfect else {w: perturb(rng, truth[w], None, float(rng.random()) * 0.5) for w in range(nw)}
        nodes = [
            NodeAccess.of({w: np.flatnonzero(rng.random(num_agents) < 0.4).tolist() for w in range(nw) if rng.random() < 0.7})
            for _ in range(n)
        ]
        reports = check_regret(nodes, truth, pred, params, strict=False, error_scale=config.error_scale)
        for rep in reports:
            bad = rep.violated or (perfect and rep.regret != 0.0)
            worst = max(worst, rep.ratio)
            result.rows.append(TheoryRow("regret", i, rep.regret, float(rep.B), rep.bound, rep.ratio, bad))
    result.max_ratio["regret"] = worst


def run_suite(config: TheoryConfig, checks: Sequence[str] = ("emc", "lipschitz", "ranking", "regret")) -> TheoryResult:
    runners = {"emc": run_emc, "lipschitz": run_lipschitz, "ranking": run_ranking, "regret": run_regret}
    result = TheoryResult()
    for offset, name in enumerate(checks):
        try:
            runner = runners[name]
        except KeyError:
            raise ValidationError(f"unknown check {name!r}") from None
        runner(config, np.random.default_rng([config.seed, offset]), result)
    return result


def report_csv(result: TheoryResult) -> str:
    lines = ["check,instance_id,delta,eps,bound,ratio,violated"]
    for r in result.rows:
        lines.append(
            f"{r.check},{r.instance_id},{r.delta:.12g},{r.eps:.12g},{r.bound:.12g},{r.ratio:.12g},{str(r.violated).lower()}"
        )
    return "\n".join(lines) + "\n"
