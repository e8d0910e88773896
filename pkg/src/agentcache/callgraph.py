"""Global call graphs and the stochastic workflows that run over them."""

from __future__ import annotations

import io
import json
from collections import deque
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Mapping, Sequence, TextIO

import networkx as nx
import numpy as np

from ._validation import STOCHASTIC_ATOL, ValidationError, check_distribution, check_scalar
from .forecast import Forecast, propagate

END_NAME = "END"
CONTEXT_SEP = ">"


@dataclass(frozen=True, eq=False)
class CallGraph:
    """Agents, admissible transitions and the ground-truth step kernel.

    Agents are dense integers ``0..num_agents-1``; END is ``num_agents``.
    ``kernel`` maps a context (tuple of the last ``1..n_ctx`` agents) to a
    distribution of length ``num_agents + 1``. Lookups use the longest suffix
    of the history that has a row.
    """

    agents: tuple[str, ...]
    edges: frozenset
    kernel: Mapping[tuple[int, ...], np.ndarray]
    entry: np.ndarray
    max_steps: int = 64

    @property
    def num_agents(self) -> int:
        return len(self.agents)

    @property
    def end(self) -> int:
        return len(self.agents)

    @cached_property
    def n_ctx(self) -> int:
        return max(len(k) for k in self.kernel)

    def index(self, name: str) -> int:
        if name == END_NAME:
            return self.end
        try:
            return self.agents.index(name)
        except ValueError:
            raise ValidationError(f"unknown agent {name!r}") from None

    def name(self, agent: int) -> str:
        return END_NAME if agent == self.end else self.agents[agent]

    def row(self, history: Sequence[int]) -> np.ndarray:
        """Next-outcome distribution after ``history``."""
        h = tuple(history[-self.n_ctx:])
        for start in range(len(h)):
            r = self.kernel.get(h[start:])
            if r is not None:
                return r
        raise ValidationError(f"no kernel row for history ending in {h!r}")

    def has_cycle(self) -> bool:
        return not nx.is_directed_acyclic_graph(self.to_networkx())

    def to_networkx(self) -> nx.DiGraph:
        g = nx.DiGraph()
        g.add_nodes_from(range(self.num_agents))
        g.add_edges_from(self.edges)
        return g

    @cached_property
    def state_space(self) -> "StateSpace":
        return StateSpace.build(self)

    def is_static(self) -> bool:
        """True when every reachable state has a one-hot kernel row."""
        rows = self.state_space.rows
        return bool(np.all(np.isclose(rows.max(axis=1), 1.0)))

    def to_spec(self) -> dict:
        kernel = {}
        for ctx, r in self.kernel.items():
            key = CONTEXT_SEP.join(self.agents[a] for a in ctx)
            kernel[key] = {self.name(b): float(r[b]) for b in np.flatnonzero(r)}
        return {
            "agents": list(self.agents),
            "edges": sorted([self.agents[a], self.agents[b]] for a, b in self.edges),
            "kernel": kernel,
            "entry": {self.agents[a]: float(self.entry[a]) for a in np.flatnonzero(self.entry)},
            "max_steps": self.max_steps,
        }


@dataclass(frozen=True)
class StateSpace:
    """Reachable raw histories (last ``n_ctx`` agents) indexed densely.

    ``rows[s]`` is the kernel row of state ``s``; ``successor[s, b]`` is the
    state index after invoking agent ``b`` (``-1`` if that transition has
    zero probability). ``entry_states[a]`` is the index of ``(a,)``.
    """

    states: tuple[tuple[int, ...], ...]
    index: dict = field(repr=False)
    rows: np.ndarray = field(repr=False)
    successor: np.ndarray = field(repr=False)

    @classmethod
    def build(cls, g: CallGraph) -> "StateSpace":
        start = [(int(a),) for a in np.flatnonzero(g.entry > 0)]
        index: dict[tuple[int, ...], int] = {}
        order: list[tuple[int, ...]] = []
        queue = deque()
        for s in start:
            index[s] = len(order)
            order.append(s)
            queue.append(s)
        edges = []
        while queue:
            s = queue.popleft()
            r = g.row(s)
            for b in np.flatnonzero(r[: g.end] > 0):
                t = (s + (int(b),))[-g.n_ctx:]
                if t not in index:
                    index[t] = len(order)
                    order.append(t)
                    queue.append(t)
                edges.append((index[s], int(b), index[t]))
        rows = np.array([g.row(s) for s in order])
        successor = -np.ones((len(order), g.num_agents), dtype=np.int64)
        for s, b, t in edges:
            successor[s, b] = t
        return cls(tuple(order), index, rows, successor)

    def lookup(self, history: Sequence[int], n_ctx: int) -> int:
        key = tuple(history[-n_ctx:])
        try:
            return self.index[key]
        except KeyError:
            raise ValidationError(f"history {key!r} is not a reachable state") from None


@dataclass(frozen=True)
class WorkflowTrace:
    workflow_id: int
    invocations: tuple[int, ...]
    terminated: bool

    def __len__(self) -> int:
        return len(self.invocations)


def _parse_context(key: str, agent_index: Mapping[str, int]) -> tuple[int, ...]:
    names = [n.strip() for n in key.split(CONTEXT_SEP)]
    try:
        return tuple(agent_index[n] for n in names)
    except KeyError as exc:
        raise ValidationError(f"kernel context {key!r} names unknown agent {exc.args[0]!r}") from None


def build_call_graph(spec: Mapping) -> CallGraph:
    """Validate a graph-spec document and build a :class:`CallGraph`.

    ``spec`` has ``agents`` (names), ``edges`` (pairs of names), ``kernel``
    (context -> {outcome: prob}; contexts of several agents are joined with
    ``>``), ``entry`` ({agent: prob}) and optionally ``max_steps``.
    """
    for key in ("agents", "edges", "kernel", "entry"):
        if key not in spec:
            raise ValidationError(f"graph spec is missing {key!r}")
    agents = tuple(str(a) for a in spec["agents"])
    if not agents or len(set(agents)) != len(agents) or END_NAME in agents:
        raise ValidationError("agents must be a non-empty list of distinct names other than END")
    idx = {a: i for i, a in enumerate(agents)}
    n = len(agents)

    edges = set()
    for pair in spec["edges"]:
        if len(pair) != 2 or pair[0] not in idx or pair[1] not in idx:
            raise ValidationError(f"edge {pair!r} references an unknown agent")
        edges.add((idx[pair[0]], idx[pair[1]]))

    kernel: dict[tuple[int, ...], np.ndarray] = {}
    for key, outcomes in spec["kernel"].items():
        ctx = _parse_context(key, idx)
        row = np.zeros(n + 1)
        for name, p in outcomes.items():
            if name == END_NAME:
                row[n] += float(p)
                continue
            if name not in idx:
                raise ValidationError(f"kernel row {key!r} targets unknown agent {name!r}")
            b = idx[name]
            if float(p) > 0 and (ctx[-1], b) not in edges:
                raise ValidationError(
                    f"kernel row {key!r} uses edge {agents[ctx[-1]]}->{name} absent from edges"
                )
            row[b] += float(p)
        try:
            row = check_distribution(row, f"kernel row {key!r}", atol=STOCHASTIC_ATOL)
        except ValidationError as exc:
            raise ValidationError(f"non-stochastic {exc}") from None
        kernel[ctx] = row / row.sum()

    entry = np.zeros(n)
    for name, p in spec["entry"].items():
        if name not in idx:
            raise ValidationError(f"entry names unknown agent {name!r}")
        entry[idx[name]] = float(p)
    entry = check_distribution(entry, "entry distribution")
    entry = entry / entry.sum()

    max_steps = check_scalar(spec.get("max_steps", 64), "max_steps", kind=int, lo=1)
    g = CallGraph(agents, frozenset(edges), kernel, entry, max_steps)
    _check_termination(g)
    return g


def _check_termination(g: CallGraph) -> None:
    space = g.state_space
    # dist[s]: fewest further invocations before END can be drawn
    inf = np.iinfo(np.int64).max
    dist = np.full(len(space.states), inf, dtype=np.int64)
    preds: list[list[int]] = [[] for _ in space.states]
    for s in range(len(space.states)):
        for t in space.successor[s]:
            if t >= 0:
                preds[t].append(s)
    queue = deque()
    for s in range(len(space.states)):
        if space.rows[s, g.end] > 0:
            dist[s] = 0
            queue.append(s)
    while queue:
        t = queue.popleft()
        for s in preds[t]:
            if dist[s] == inf:
                dist[s] = dist[t] + 1
                queue.append(s)
    for s, d in enumerate(dist):
        # a trace entering state s already holds len(s) >= 1 invocations
        if d == inf or d + 1 > g.max_steps:
            names = [g.name(a) for a in space.states[s]]
            raise ValidationError(f"END unreachable within max_steps from state {names}")


def load_call_graph(path) -> CallGraph:
    with open(path, encoding="utf-8") as fh:
        return build_call_graph(json.load(fh))


def sample_workflow(g: CallGraph, rng_seed: int, workflow_id: int | None = None) -> WorkflowTrace:
    """Draw one workflow: an entry agent, then kernel steps until END or the cap."""
    rng = np.random.default_rng(rng_seed)
    wid = rng_seed if workflow_id is None else workflow_id
    history = [int(rng.choice(g.num_agents, p=g.entry))]
    while len(history) < g.max_steps:
        nxt = int(rng.choice(g.num_agents + 1, p=g.row(history)))
        if nxt == g.end:
            return WorkflowTrace(wid, tuple(history), True)
        history.append(nxt)
    return WorkflowTrace(wid, tuple(history), False)


def true_kstep_marginals(g: CallGraph, prefix: Sequence[int], K: int) -> Forecast:
    """Exact survival-conditioned marginals of the next ``K`` outcomes.

    The step cap ``max_steps`` is deliberately ignored: it only bounds sampled
    traces, and the marginals describe the kernel itself.
    """
    check_scalar(K, "K", kind=int, lo=1)
    prefix = [int(a) for a in prefix]
    if not prefix:
        raise ValidationError("prefix must be non-empty")
    for a, b in zip(prefix, prefix[1:]):
        if (a, b) not in g.edges:
            raise ValidationError(f"prefix step {g.name(a)}->{g.name(b)} is not an edge")
    if any(not 0 <= a < g.num_agents for a in prefix):
        raise ValidationError("prefix contains an out-of-range agent")
    return propagate(g.row, prefix, K, g.n_ctx, g.num_agents)


def static_remaining(g: CallGraph, history: Sequence[int]) -> list[int]:
    """Deterministic continuation after ``history`` (END excluded).

    Raises if any row on the way is not one-hot, i.e. the workflow is dynamic.
    """
    history = list(history)
    out: list[int] = []
    while len(history) < g.max_steps:
        r = g.row(history)
        b = int(np.argmax(r))
        if not np.isclose(r[b], 1.0):
            raise ValidationError("workflow is not static: a kernel row has several outcomes")
        if b == g.end:
            return out
        out.append(b)
        history.append(b)
    return out


def export_traces(traces: Iterable[WorkflowTrace], fh: TextIO) -> None:
    fh.write("workflow_id,step,agent_id\n")
    for t in traces:
        for step, agent in enumerate(t.invocations):
            fh.write(f"{t.workflow_id},{step},{agent}\n")


def read_traces(fh: TextIO, terminated: bool = True) -> list[WorkflowTrace]:
    """Inverse of :func:`export_traces`. The CSV carries no termination flag."""
    rows: dict[int, list[tuple[int, int]]] = {}
    lines = fh.read().splitlines()
    if not lines or lines[0].strip() != "workflow_id,step,agent_id":
        raise ValidationError("trace file must start with the workflow_id,step,agent_id header")
    for line in lines[1:]:
        if not line.strip():
            continue
        wid, step, agent = (int(x) for x in line.split(","))
        rows.setdefault(wid, []).append((step, agent))
    return [
        WorkflowTrace(wid, tuple(a for _, a in sorted(steps)), terminated)
        for wid, steps in rows.items()
    ]


def traces_to_csv(traces: Iterable[WorkflowTrace]) -> str:
    buf = io.StringIO()
    export_traces(traces, buf)
    return buf.getvalue()
