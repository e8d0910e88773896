"""Step-driven simulation of concurrent workflows sharing a two-tier prefix cache.

Time advances in decode steps. In every step the engine first retires
invocations whose decode finished, then prefills invocations that arrived
(match, evict, reload from host, insert), and, when nothing was prefilled
while something is decoding, lets the prefetcher move host nodes back to
the device. Simulated latency adds the prefill/reload cost of each
invocation to the step in which it was prefilled.
"""

from __future__ import annotations

import dataclasses
import heapq
import io
import json
import logging
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from ._validation import ValidationError, check_scalar
from .cache import RadixCache, Tier
from .callgraph import CallGraph, WorkflowTrace, sample_workflow, static_remaining
from .policies import (
    Policy,
    SELECTORS,
    drain,
    execute_prefetch,
    lru_key,
    plan_aggressive_prefetch,
    plan_conservative_prefetch,
    steps_to_execution,
)
from .predictor import make_predictor
from .scoring import ScoreBook, ScoreHeap, ScoreParams

logger = logging.getLogger(__name__)

PREFETCH_MODES = ("off", "conservative", "aggressive")
PREDICTORS = ("oracle", "noisy", "markov")
GAP_DISTRIBUTIONS = ("uniform", "exponential")


@dataclass(frozen=True)
class CostModel:
    prefill_per_token: float = 1.0
    pcie_per_token: float = 0.1
    decode_step_cost: float = 1.0
    decode_steps_per_invocation: int = 20

    def __post_init__(self):
        check_scalar(self.prefill_per_token, "prefill_per_token", lo=0.0, lo_open=True)
        check_scalar(self.pcie_per_token, "pcie_per_token", lo=0.0)
        check_scalar(self.decode_step_cost, "decode_step_cost", lo=0.0)
        check_scalar(self.decode_steps_per_invocation, "decode_steps_per_invocation", kind=int, lo=1)
        if not self.pcie_per_token < self.prefill_per_token:
            raise ValidationError("reloading over PCIe must be cheaper than re-prefilling")


@dataclass(frozen=True)
class PromptModel:
    """Token layout of an invocation of agent ``a`` at step ``t`` of workflow ``w``.

    ``shared prefix | header(a) | task(w) | output(w, 1) | ... | output(w, t-1)``,
    followed by the generated ``output(w, t)``. Output lengths are drawn
    per invocation as ``output_tokens[a] * U(1 - jitter, 1 + jitter)``.
    """

    shared_prefix_tokens: int = 400
    agent_header_tokens: int = 100
    task_tokens: int = 100
    output_tokens: int | Mapping[str, int] = 100
    output_jitter: float = 0.5

    def __post_init__(self):
        for name in ("shared_prefix_tokens", "agent_header_tokens", "task_tokens"):
            check_scalar(getattr(self, name), name, kind=int, lo=0)
        check_scalar(self.output_jitter, "output_jitter", lo=0.0, hi=1.0, hi_open=True)
        out = self.output_tokens
        if isinstance(out, Mapping):
            for name, n in out.items():
                check_scalar(n, f"output_tokens[{name}]", kind=int, lo=1)
            # a sorted tuple keeps the model hashable
            object.__setattr__(self, "output_tokens", tuple(sorted(out.items())))
        elif not isinstance(out, tuple):
            check_scalar(out, "output_tokens", kind=int, lo=1)

    def output_len(self, graph: CallGraph, agent: int) -> int:
        if isinstance(self.output_tokens, tuple):
            return int(dict(self.output_tokens).get(graph.agents[agent], 100))
        return int(self.output_tokens)


@dataclass(frozen=True)
class SimConfig:
    graph: CallGraph
    num_workflows: int = 200
    concurrency_limit: int = 72
    device_capacity: int | None = None
    device_fraction: float | None = None
    host_capacity: int | None = None
    host_ratio: float = 1.0
    policy: str = "lru"
    prefetch: str | None = None
    rho: float = 0.2
    bandwidth: int = 400
    predictor: str = "oracle"
    noise: float = 0.0
    markov_order: int = 3
    markov_alpha: float = 0.1
    markov_traces: int = 1000
    K: int = 3
    gamma: float = 0.7
    cost: CostModel = field(default_factory=CostModel)
    prompt: PromptModel = field(default_factory=PromptModel)
    gap_steps: int = 10
    gap_distribution: str = "uniform"
    gap_jitter: float = 0.0
    arrival_jitter: int | None = None
    seed: int = 0
    window: int = 50
    audit: bool = False

    def __post_init__(self):
        check_scalar(self.num_workflows, "num_workflows", kind=int, lo=1)
        check_scalar(self.concurrency_limit, "concurrency_limit", kind=int, lo=1)
        Policy.parse(self.policy)
        if self.prefetch_mode not in PREFETCH_MODES:
            raise ValidationError(f"unknown prefetch mode {self.prefetch!r}")
        if self.prefetch_mode != "off" and self.policy_enum not in (Policy.HE, Policy.FULL):
            raise ValidationError("prefetching runs on top of score-driven eviction only")
        if self.predictor not in PREDICTORS:
            raise ValidationError(f"unknown predictor {self.predictor!r}")
        check_scalar(self.rho, "rho", lo=0.0, hi=1.0)
        check_scalar(self.noise, "noise", lo=0.0, hi=1.0)
        check_scalar(self.bandwidth, "bandwidth", kind=int, lo=0)
        check_scalar(self.gap_steps, "gap_steps", kind=int, lo=0)
        check_scalar(self.gap_jitter, "gap_jitter", lo=0.0, hi=1.0, hi_open=True)
        if self.gap_distribution not in GAP_DISTRIBUTIONS:
            raise ValidationError(f"unknown gap distribution {self.gap_distribution!r}")
        check_scalar(self.window, "window", kind=int, lo=1)
        check_scalar(self.host_ratio, "host_ratio", lo=0.0)
        ScoreParams(self.K, self.gamma)
        if (self.device_capacity is None) == (self.device_fraction is None):
            raise ValidationError("give exactly one of device_capacity and device_fraction")
        if self.device_fraction is not None:
            check_scalar(self.device_fraction, "device_fraction", lo=0.0, lo_open=True)
        if self.device_capacity is not None:
            check_scalar(self.device_capacity, "device_capacity", kind=int, lo=1)
            if self.device_capacity <= self.prompt.shared_prefix_tokens:
                raise ValidationError("device capacity must exceed the shared prefix")
        if self.policy_enum == Policy.KVFLOW and not self.graph.is_static():
            raise ValidationError("steps-to-execution eviction needs a static call graph")

    @property
    def policy_enum(self) -> Policy:
        return Policy.parse(self.policy)

    @property
    def prefetch_mode(self) -> str:
        if self.prefetch is not None:
            return self.prefetch
        return "conservative" if Policy.parse(self.policy) == Policy.FULL else "off"

    def replace(self, **changes) -> "SimConfig":
        return dataclasses.replace(self, **changes)


@dataclass
class SimMetrics:
    token_hit_rate: float
    timeseries: list[tuple[int, float]]
    avg_workflow_latency: float
    mean_ttft: float
    ttft_by_agent: dict[str, float]
    evictions: int
    evicted_tokens: int
    prefetches: int
    prefetched_tokens: int
    shortfalls: int
    capped_workflows: int
    host_hit_tokens: int
    prompt_tokens: int
    device_hit_tokens: int
    invocations: int
    steps: int
    pure_decode_steps: int
    max_prefetch_tokens_per_step: int
    device_capacity: int
    markers: dict[str, int | None]

    def row(self) -> dict:
        return {
            "hit_rate": self.token_hit_rate,
            "avg_workflow_latency": self.avg_workflow_latency,
            "mean_ttft": self.mean_ttft,
            "evictions": self.evictions,
            "evicted_tokens": self.evicted_tokens,
            "prefetches": self.prefetches,
            "prefetched_tokens": self.prefetched_tokens,
            "shortfalls": self.shortfalls,
            "capped_workflows": self.capped_workflows,
            "invocations": self.invocations,
            "device_capacity": self.device_capacity,
        }


@dataclass
class SimResult:
    metrics: SimMetrics
    events: list[tuple]
    tree: RadixCache
    hits: list[tuple[int, int]]

    def events_text(self) -> str:
        return format_events(self.events)


def invocation_cost(device_hit: int, host_hit: int, miss: int, decode_steps: int, cost: CostModel):
    """Return ``(ttft, total)``; device hits are free."""
    if min(device_hit, host_hit, miss, decode_steps) < 0:
        raise ValidationError("token counts must be non-negative")
    ttft = host_hit * cost.pcie_per_token + miss * cost.prefill_per_token
    return ttft, ttft + decode_steps * cost.decode_step_cost


def hit_rate_timeseries(hits: Sequence[tuple[int, int]], window: int, markers=None):
    """Token hit rate per window of ``window`` consecutive invocations.

    ``hits`` holds ``(device_hit_tokens, prompt_tokens)`` per invocation.
    Marker positions (invocation indices) are translated to window indices.
    """
    if not hits:
        raise ValidationError("empty log")
    check_scalar(window, "window", kind=int, lo=1)
    curve = []
    for start in range(0, len(hits), window):
        chunk = hits[start : start + window]
        num = sum(h for h, _ in chunk)
        den = sum(p for _, p in chunk)
        curve.append((start // window, num / den if den else 0.0))
    marks = {}
    for name, pos in (markers or {}).items():
        marks[name] = None if pos is None else pos // window
    return curve, marks


class TokenModel:
    """Deterministic token ids for every prompt segment of a run."""

    def __init__(self, config: SimConfig, traces: Sequence[WorkflowTrace]):
        self.config = config
        g = config.graph
        pm = config.prompt
        rng = np.random.default_rng([config.seed, 7])
        self._next = 1
        self._contexts: dict[int, list[tuple]] = {}
        self.shared = self._block(pm.shared_prefix_tokens)
        self.headers = [self._block(pm.agent_header_tokens) for _ in range(g.num_agents)]
        self.tasks: dict[int, tuple] = {}
        self.outputs: dict[int, list[tuple]] = {}
        for t in traces:
            self.tasks[t.workflow_id] = self._block(pm.task_tokens)
            outs = []
            for a in t.invocations:
                base = pm.output_len(g, a)
                j = pm.output_jitter
                n = max(1, int(round(base * rng.uniform(1.0 - j, 1.0 + j))))
                outs.append(self._block(n))
            self.outputs[t.workflow_id] = outs

    def _block(self, n: int) -> tuple:
        b = tuple(range(self._next, self._next + n))
        self._next += n
        return b

    def context(self, w: int, step: int) -> tuple:
        """Task plus the first ``step`` outputs of ``w``."""
        cache = self._contexts.setdefault(w, [self.tasks[w]])
        while len(cache) <= step:
            cache.append(cache[-1] + self.outputs[w][len(cache) - 1])
        return cache[step]

    def prompt(self, w: int, agent: int, step: int) -> tuple:
        return self.shared + self.headers[agent] + self.context(w, step)

    def forget(self, w: int) -> None:
        self._contexts.pop(w, None)

    def output(self, w: int, step: int) -> tuple:
        return self.outputs[w][step]


def sample_traces(config: SimConfig) -> list[WorkflowTrace]:
    ss = np.random.SeedSequence([config.seed, 1])
    seeds = ss.generate_state(config.num_workflows, dtype=np.uint32)
    return [
        sample_workflow(config.graph, int(s), workflow_id=i) for i, s in enumerate(seeds)
    ]


def training_traces(config: SimConfig) -> list[WorkflowTrace]:
    ss = np.random.SeedSequence([config.seed, 2])
    seeds = ss.generate_state(config.markov_traces, dtype=np.uint32)
    return [sample_workflow(config.graph, int(s), workflow_id=i) for i, s in enumerate(seeds)]


@dataclass
class _Flow:
    trace: WorkflowTrace
    pos: int = 0
    admitted_clock: float = 0.0


class Simulator:
    """One run of :class:`SimConfig`; call :meth:`run` once."""

    def __init__(self, config: SimConfig):
        self.config = config
        self.graph = config.graph
        self.policy = config.policy_enum
        self.mode = config.prefetch_mode
        self.params = ScoreParams(config.K, config.gamma)
        self.uses_scores = self.policy in (Policy.HE, Policy.FULL)
        self.key = SELECTORS[self.policy]
        capacity = config.device_capacity
        if capacity is None:
            capacity = max(
                config.prompt.shared_prefix_tokens + 1,
                int(round(config.device_fraction * peak_working_set(config))),
            )
        host = _host_capacity(config, capacity)
        self.capacity = capacity
        self.tree = RadixCache(capacity, host)
        self.heap = ScoreHeap()
        self.host_heap = ScoreHeap()
        self.book = ScoreBook(self.params)
        self.traces = sample_traces(config)
        self.tokens = TokenModel(config, self.traces)
        self.predictor = None
        if self.uses_scores:
            self.predictor = make_predictor(
                config.predictor,
                self.graph,
                config.K,
                noise=config.noise,
                order=config.markov_order,
                alpha=config.markov_alpha,
            )
            train = training_traces(config) if config.predictor == "markov" else None
            self.predictor.fit(train)
        self.static: dict[int, list[int]] = {}
        # one-step values of host nodes, kept current by _flush
        self._value: dict[int, float] = {}
        self.events: list[tuple] = []
        self.hits: list[tuple[int, int]] = []
        self.flows: dict[int, _Flow] = {}
        self.queue: list[tuple[int, int, int, int]] = []
        self._seq = 0
        self.step = 0
        self.clock = 0.0
        self.pool = list(range(len(self.traces)))
        self.pool.reverse()
        self.decoding = 0
        self.latencies: list[float] = []
        self.ttft: list[float] = []
        self.ttft_agent: dict[int, list[float]] = defaultdict(list)
        self.counters = defaultdict(int)
        self.markers: dict[str, int | None] = {
            "first_eviction": None,
            "first_termination": None,
            "retired_drained": None,
        }
        self._saw_retired = False
        self.max_prefetch_step = 0

    # -- event queue ------------------------------------------------------
    def _schedule(self, step: int, kind: int, w: int) -> None:
        self._seq += 1
        heapq.heappush(self.queue, (step, kind, self._seq, w))

    ARRIVE, COMPLETE = 1, 0

    def _log(self, *record) -> None:
        self.events.append((self.step,) + record)

    # -- lifecycle -------------------------------------------------------
    def _admit(self, at_step: int) -> None:
        idx = self.pool.pop()
        t = self.traces[idx]
        self.flows[t.workflow_id] = _Flow(t, 0, self.clock)
        self.tree.register_workflow(t.workflow_id)
        self._log("admit", t.workflow_id)
        self._schedule(at_step, self.ARRIVE, t.workflow_id)

    def _refresh(self, w: int) -> None:
        """New knowledge about ``w``: recompute its forecast and mark its nodes."""
        flow = self.flows.get(w)
        if self.uses_scores:
            if flow is None:
                self.book.drop(w)
            else:
                prefix = flow.trace.invocations[: flow.pos + 1]
                self.book.set_forecast(w, self.predictor.predict(prefix))
        if self.policy == Policy.KVFLOW:
            if flow is None:
                self.static.pop(w, None)
            else:
                prefix = list(flow.trace.invocations[: flow.pos + 1])
                self.static[w] = static_remaining(self.graph, prefix)
        if self.uses_scores or self.policy == Policy.KVFLOW:
            self.tree.dirty.update(self.tree.wf_nodes.get(w, ()))

    def _flush(self) -> None:
        tree = self.tree
        for nid in tree.pop_dirty():
            node = tree.nodes.get(nid)
            if node is None or node is tree.root:
                self.heap.discard(nid)
                self.host_heap.discard(nid)
                self._value.pop(nid, None)
                continue
            if self.uses_scores:
                node.score = self.book.score(node)
            elif self.policy == Policy.KVFLOW:
                node.score = steps_to_execution(node, self.static, tree.terminated)
            if node.tier == Tier.DEVICE:
                self.heap.upsert(nid, self.key(node))
                self.host_heap.discard(nid)
            else:
                self.heap.discard(nid)
                self.host_heap.upsert(nid, lru_key(node))
                if self.mode != "off":
                    self._value[nid] = self.book.value(node)

    def _make_host_room(self, tokens: int) -> None:
        """Drop least recently used host leaves until ``tokens`` fit."""
        tree = self.tree
        if tokens > tree.host_capacity:
            return
        need = tokens - tree.host_free
        if need <= 0:
            return
        self._flush()
        waiting = []
        while tree.host_free < tokens and len(self.host_heap):
            nid, key = self.host_heap.pop()
            node = tree.nodes[nid]
            if node.children or node.lock:
                waiting.append((nid, key))
                continue
            parent = node.parent
            tree.drop_host(node)
            self._log("hostdrop", nid)
            self.counters["host_drops"] += 1
            if parent.tier == Tier.HOST and not parent.children:
                for i, (pid, pkey) in enumerate(waiting):
                    if pid == parent.node_id:
                        waiting.pop(i)
                        self.host_heap.push(pid, pkey)
                        break
        for nid, key in waiting:
            self.host_heap.push(nid, key)

    def _evict(self, needed: int) -> bool:
        self._flush()
        sel = drain(self.tree, self.heap, needed, self.key)
        for v in sel.victims:
            self._make_host_room(v.token_len)
            dest = self.tree.demote_to_host(v)
            self._log("evict", v.node_id, v.token_len, dest.name)
            self.counters["evictions"] += 1
            self.counters["evicted_tokens"] += v.token_len
        if sel.victims and self.markers["first_eviction"] is None:
            self.markers["first_eviction"] = len(self.hits)
        return not sel.shortfall

    def _prefill(self, w: int) -> float:
        flow = self.flows[w]
        t = flow.pos
        agent = flow.trace.invocations[t]
        self._refresh(w)
        tree = self.tree
        prompt = self.tokens.prompt(w, agent, t)
        output = self.tokens.output(w, t)
        res = tree.match_prefix(prompt, w, agent)
        self._log("match", w, agent, t, res.device_hit, res.host_hit, res.miss)
        self.hits.append((res.device_hit, len(prompt)))
        ttft, _ = invocation_cost(
            res.device_hit, res.host_hit, res.miss, self.config.cost.decode_steps_per_invocation,
            self.config.cost,
        )
        self.ttft.append(ttft)
        self.ttft_agent[agent].append(ttft)
        self.counters["device_hit"] += res.device_hit
        self.counters["host_hit"] += res.host_hit
        self.counters["prompt"] += len(prompt)

        path = list(res.path)
        tree.lock_path(path)
        try:
            need = res.host_hit + res.miss + len(output)
            ok = True
            if need > tree.device_free:
                ok = self._evict(need - tree.device_free)
            if ok and need <= tree.device_free:
                for node in res.host_nodes:
                    tree.promote_to_device(node)
                    self._log("promote", node.node_id)
                tree.insert_suffix(prompt + output, w, agent)
                self._log("insert", w, agent, t)
            else:
                self.counters["shortfalls"] += 1
                self._log("shortfall", w, need)
        finally:
            tree.unlock_path(path)
        if self.config.audit:
            self._audit()
        return ttft

    def _gap(self, w: int, pos: int) -> int:
        cfg = self.config
        if cfg.gap_steps == 0 or (cfg.gap_distribution == "uniform" and cfg.gap_jitter == 0.0):
            return cfg.gap_steps
        # keyed per invocation so the draw does not depend on event order
        rng = np.random.default_rng([cfg.seed, 4, w, pos])
        if cfg.gap_distribution == "exponential":
            return round(cfg.gap_steps * rng.exponential())
        return round(cfg.gap_steps * (1.0 + cfg.gap_jitter * (2.0 * rng.random() - 1.0)))

    def _complete(self, w: int) -> None:
        flow = self.flows[w]
        flow.pos += 1
        if flow.pos < len(flow.trace):
            self._schedule(self.step + self._gap(w, flow.pos) + 1, self.ARRIVE, w)
            return
        if not flow.trace.terminated:
            self.counters["capped"] += 1
        del self.flows[w]
        self.tokens.forget(w)
        self.latencies.append(self.clock - flow.admitted_clock)
        newly = self.tree.on_workflow_terminated(w)
        self._log("terminate", w, newly)
        self._refresh(w)
        if self.markers["first_termination"] is None:
            self.markers["first_termination"] = len(self.hits)
        if self.pool:
            self._admit(self.step + 1)

    def _prefetch_round(self) -> int:
        self._flush()
        tree = self.tree
        value = lambda node: self._value[node.node_id]
        if self.mode == "conservative":
            plan = plan_conservative_prefetch(tree, value, self.config.bandwidth)
        else:
            plan = plan_aggressive_prefetch(tree, value, self.config.bandwidth, self.config.rho)
        if not plan.selected:
            return 0
        promoted, victims = execute_prefetch(tree, plan, self.heap, self._make_host_room)
        for v in victims:
            self._log("evict", v.node_id, v.token_len, "PREFETCH")
            self.counters["evictions"] += 1
            self.counters["evicted_tokens"] += v.token_len
        moved = 0
        for nid in promoted:
            size = tree.nodes[nid].token_len
            moved += size
            self._log("prefetch", nid, size)
        self.counters["prefetches"] += len(promoted)
        self.counters["prefetched_tokens"] += moved
        self.max_prefetch_step = max(self.max_prefetch_step, moved)
        if self.config.audit:
            self._audit()
        return moved

    def _audit(self) -> None:
        self.tree.audit()
        self.heap.audit()
        if self.flows and len(self.flows) > self.config.concurrency_limit:
            raise AssertionError("concurrency limit exceeded")

    def _track_retired(self) -> None:
        if self.markers["first_termination"] is None or self.markers["retired_drained"] is not None:
            return
        if self.tree.retired_device_tokens() > 0:
            self._saw_retired = True
        elif self._saw_retired:
            self.markers["retired_drained"] = len(self.hits)

    # -- main loop ---------------------------------------------------------
    def run(self) -> SimResult:
        cfg = self.config
        jitter = cfg.arrival_jitter
        if jitter is None:
            jitter = cfg.cost.decode_steps_per_invocation + cfg.gap_steps
        rng = np.random.default_rng([cfg.seed, 3])
        for _ in range(min(cfg.concurrency_limit, len(self.pool))):
            self._admit(1 + int(rng.integers(0, max(jitter, 1))))
        decode = cfg.cost.decode_steps_per_invocation
        while self.queue:
            nxt = self.queue[0][0]
            if self.mode != "off" and self.decoding and nxt > self.step + 1:
                # idle decode steps between events: prefetch until nothing moves
                while self.step + 1 < nxt:
                    self.step += 1
                    self.clock += cfg.cost.decode_step_cost
                    self.counters["pure_decode"] += 1
                    if self._prefetch_round() == 0:
                        break
            if nxt > self.step + 1:
                idle = nxt - self.step - 1
                if self.decoding:
                    self.counters["pure_decode"] += idle
                self.clock += idle * cfg.cost.decode_step_cost
                self.step = nxt - 1
            self.step += 1
            step_cost = cfg.cost.decode_step_cost
            prefilled = 0
            while self.queue and self.queue[0][0] == self.step:
                _, kind, _, w = heapq.heappop(self.queue)
                if kind == self.COMPLETE:
                    self.decoding -= 1
                    self._complete(w)
                else:
                    step_cost += self._prefill(w)
                    prefilled += 1
                    self.decoding += 1
                    self._schedule(self.step + decode, self.COMPLETE, w)
            self._track_retired()
            if prefilled == 0 and self.decoding:
                self.counters["pure_decode"] += 1
                if self.mode != "off":
                    self._prefetch_round()
            self.clock += step_cost
        return SimResult(self._metrics(), self.events, self.tree, self.hits)

    def _metrics(self) -> SimMetrics:
        c = self.counters
        curve, _ = hit_rate_timeseries(self.hits, self.config.window)
        by_agent = {
            self.graph.agents[a]: float(np.mean(v)) for a, v in sorted(self.ttft_agent.items())
        }
        return SimMetrics(
            token_hit_rate=c["device_hit"] / c["prompt"] if c["prompt"] else 0.0,
            timeseries=curve,
            avg_workflow_latency=float(np.mean(self.latencies)) if self.latencies else 0.0,
            mean_ttft=float(np.mean(self.ttft)) if self.ttft else 0.0,
            ttft_by_agent=by_agent,
            evictions=c["evictions"],
            evicted_tokens=c["evicted_tokens"],
            prefetches=c["prefetches"],
            prefetched_tokens=c["prefetched_tokens"],
            shortfalls=c["shortfalls"],
            capped_workflows=c["capped"],
            host_hit_tokens=c["host_hit"],
            prompt_tokens=c["prompt"],
            device_hit_tokens=c["device_hit"],
            invocations=len(self.hits),
            steps=self.step,
            pure_decode_steps=c["pure_decode"],
            max_prefetch_tokens_per_step=self.max_prefetch_step,
            device_capacity=self.capacity,
            markers=dict(self.markers),
        )


def _host_capacity(config: SimConfig, device: int) -> int:
    if config.host_capacity is not None:
        return config.host_capacity
    return int(round(config.host_ratio * device))


def run(config: SimConfig) -> SimResult:
    return Simulator(config).run()


def _peak_key(config: SimConfig):
    return (
        json.dumps(config.graph.to_spec(), sort_keys=True),
        config.num_workflows,
        config.concurrency_limit,
        config.prompt,
        config.cost.decode_steps_per_invocation,
        config.gap_steps,
        config.gap_distribution,
        config.gap_jitter,
        config.arrival_jitter,
        config.seed,
    )


_PEAK_CACHE: dict = {}


def peak_working_set(config: SimConfig) -> int:
    """Largest volume of non-retired cache over a run with unbounded capacity.

    Retired cache is excluded since it is reclaimable by construction.
    """
    key = _peak_key(config)
    hit = _PEAK_CACHE.get(key)
    if hit is not None:
        return hit
    probe = config.replace(
        device_capacity=10**12, device_fraction=None, host_capacity=0, policy="lru", prefetch=None,
        audit=False,
    )
    sim = Simulator(probe)
    peak = 0
    original = sim.tree.on_workflow_terminated

    def measure(w):
        nonlocal peak
        active = sim.tree.device_used - sim.tree.retired_device_tokens()
        peak = max(peak, active)
        return original(w)

    sim.tree.on_workflow_terminated = measure
    sim.run()
    peak = max(peak, sim.tree.device_used - sim.tree.retired_device_tokens())
    _PEAK_CACHE[key] = peak
    return peak


def format_events(events: Sequence[tuple]) -> str:
    buf = io.StringIO()
    for rec in events:
        buf.write(",".join(str(x) for x in rec))
        buf.write("\n")
    return buf.getvalue()


def replay(config: SimConfig, events: Sequence[tuple], capacity: int) -> RadixCache:
    """Re-apply a run's logged cache operations to a fresh tree."""
    traces = sample_traces(config)
    tokens = TokenModel(config, traces)
    tree = RadixCache(capacity, _host_capacity(config, capacity))
    for rec in events:
        kind = rec[1]
        if kind == "admit":
            tree.register_workflow(rec[2])
        elif kind == "match":
            w, agent, t = rec[2:5]
            tree.match_prefix(tokens.prompt(w, agent, t), w, agent)
        elif kind == "insert":
            w, agent, t = rec[2:5]
            tree.insert_suffix(tokens.prompt(w, agent, t) + tokens.output(w, t), w, agent)
        elif kind == "evict":
            tree.demote_to_host(tree.nodes[rec[2]])
        elif kind in ("promote", "prefetch"):
            tree.promote_to_device(tree.nodes[rec[2]])
        elif kind == "hostdrop":
            tree.drop_host(tree.nodes[rec[2]])
        elif kind == "terminate":
            tree.on_workflow_terminated(rec[2])
    return tree
