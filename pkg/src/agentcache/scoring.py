"""Reuse value and K-step lookahead score of cache nodes, plus the score heap."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Collection, Hashable, Iterable, Mapping

import numpy as np

from ._validation import ValidationError, check_scalar
from .cache import CacheNode, RadixCache, Tier
from .forecast import Forecast


@dataclass(frozen=True)
class ScoreParams:
    K: int = 3
    gamma: float = 0.7

    def __post_init__(self):
        check_scalar(self.K, "K", kind=int, lo=1)
        check_scalar(self.gamma, "gamma", lo=0.0, hi=1.0, lo_open=True, hi_open=True)

    @property
    def lipschitz(self) -> float:
        """Shared multiplier ``(1 - gamma^K) / (2 (1 - gamma))``."""
        return (1.0 - self.gamma**self.K) / (2.0 * (1.0 - self.gamma))


def survival_probs(f: Forecast) -> np.ndarray:
    return f.survival


def agent_values(f: Forecast, params: ScoreParams) -> np.ndarray:
    """Discounted, survival-weighted mass of each agent over the first K steps.

    ``A_w(c) . agent_values`` is workflow ``w``'s contribution to a node's score.
    """
    if f.horizon < params.K:
        raise ValidationError(f"forecast horizon {f.horizon} is shorter than K={params.K}")
    steps = f.steps[: params.K, :-1]
    weights = params.gamma ** np.arange(params.K) * f.survival[: params.K]
    return weights @ steps


def _active(node: CacheNode, terminated: Collection[int]) -> list[int]:
    return [w for w in node.access if w not in terminated]


def _forecast_for(forecasts: Mapping[int, Forecast], w: int) -> Forecast:
    try:
        return forecasts[w]
    except KeyError:
        raise ValidationError(f"no forecast for active workflow {w}") from None


def single_step_value(
    node: CacheNode, forecasts: Mapping[int, Forecast], terminated: Collection[int] = ()
) -> float:
    """Probability mass, summed over active workflows, that the next invocation touches ``node``."""
    value = 0.0
    for w in _active(node, terminated):
        p1 = _forecast_for(forecasts, w).steps[0]
        value += sum(p1[a] for a in node.access[w])
    return float(value)


def multi_step_score(
    node: CacheNode,
    forecasts: Mapping[int, Forecast],
    params: ScoreParams,
    terminated: Collection[int] = (),
) -> float:
    score = 0.0
    for w in _active(node, terminated):
        vals = agent_values(_forecast_for(forecasts, w), params)
        score += sum(vals[a] for a in node.access[w])
    return float(score)


class ScoreHeap:
    """Indexed binary min-heap with O(log n) update and removal by id.

    Keys are any totally ordered values (the eviction policies use tuples).
    ``sift_steps`` counts swaps performed by the most recent operation.
    """

    def __init__(self, items: Iterable[tuple[Hashable, object]] = ()):
        self._heap: list[tuple[object, Hashable]] = []
        self._pos: dict[Hashable, int] = {}
        self.sift_steps = 0
        self.max_sift_steps = 0
        for ident, key in items:
            self._pos[ident] = len(self._heap)
            self._heap.append((key, ident))
        for i in reversed(range(len(self._heap) // 2)):
            self._down(i)
        self.sift_steps = self.max_sift_steps = 0

    def __len__(self) -> int:
        return len(self._heap)

    def __contains__(self, ident) -> bool:
        return ident in self._pos

    def key(self, ident):
        return self._heap[self._pos[ident]][0]

    def peek(self):
        if not self._heap:
            raise IndexError("peek from empty heap")
        key, ident = self._heap[0]
        return ident, key

    def push(self, ident, key) -> None:
        if ident in self._pos:
            raise KeyError(f"{ident!r} already in heap")
        self._pos[ident] = len(self._heap)
        self._heap.append((key, ident))
        self.sift_steps = 0
        self._up(len(self._heap) - 1)
        self._record()

    def update(self, ident, key) -> None:
        i = self._pos[ident]
        old = self._heap[i][0]
        self._heap[i] = (key, ident)
        self.sift_steps = 0
        if key < old:
            self._up(i)
        elif old < key:
            self._down(i)
        self._record()

    def upsert(self, ident, key) -> None:
        if ident in self._pos:
            self.update(ident, key)
        else:
            self.push(ident, key)

    def remove(self, ident) -> None:
        i = self._pos.pop(ident)
        last = self._heap.pop()
        self.sift_steps = 0
        if i < len(self._heap):
            self._heap[i] = last
            self._pos[last[1]] = i
            if i > 0 and last[0] < self._heap[(i - 1) >> 1][0]:
                self._up(i)
            else:
                self._down(i)
        self._record()

    def discard(self, ident) -> None:
        if ident in self._pos:
            self.remove(ident)

    def pop(self):
        if not self._heap:
            raise IndexError("pop from empty heap")
        key, ident = self._heap[0]
        self.remove(ident)
        return ident, key

    def items(self) -> list[tuple[Hashable, object]]:
        return [(ident, key) for key, ident in self._heap]

    def sorted_items(self) -> list[tuple[Hashable, object]]:
        return [(ident, key) for key, ident in sorted(self._heap)]

    def audit(self) -> None:
        for i, (key, ident) in enumerate(self._heap):
            if self._pos.get(ident) != i:
                raise AssertionError(f"position index stale for {ident!r}")
            if i and key < self._heap[(i - 1) >> 1][0]:
                raise AssertionError(f"heap order violated at {i}")
        if len(self._pos) != len(self._heap):
            raise AssertionError("position index has stray entries")

    def depth_bound(self) -> int:
        return math.ceil(math.log2(max(len(self._heap), 1))) + 1

    def _record(self) -> None:
        self.max_sift_steps = max(self.max_sift_steps, self.sift_steps)

    def _swap(self, i: int, j: int) -> None:
        h = self._heap
        h[i], h[j] = h[j], h[i]
        self._pos[h[i][1]] = i
        self._pos[h[j][1]] = j
        self.sift_steps += 1

    def _up(self, i: int) -> None:
        h = self._heap
        while i > 0:
            parent = (i - 1) >> 1
            if h[i][0] < h[parent][0]:
                self._swap(i, parent)
                i = parent
            else:
                break

    def _down(self, i: int) -> None:
        h = self._heap
        n = len(h)
        while True:
            left = 2 * i + 1
            if left >= n:
                break
            child = left
            if left + 1 < n and h[left + 1][0] < h[left][0]:
                child = left + 1
            if h[child][0] < h[i][0]:
                self._swap(i, child)
                i = child
            else:
                break


def hierarchical_key(node: CacheNode) -> tuple:
    """Retired nodes first (least popular first), then active nodes by score; LRU breaks ties."""
    if node.retired:
        return (0, node.popularity, node.last_access, node.node_id)
    return (1, node.score, node.last_access, node.node_id)


def build_heap(tree: RadixCache, key: Callable[[CacheNode], object]) -> ScoreHeap:
    return ScoreHeap((n.node_id, key(n)) for n in tree.iter_nodes() if n.tier == Tier.DEVICE)


def refresh_scores(
    tree: RadixCache,
    changed_workflow: int,
    forecasts: Mapping[int, Forecast],
    params: ScoreParams,
    heap: ScoreHeap,
    key: Callable[[CacheNode], object] = hierarchical_key,
) -> list[int]:
    """Recompute the score of every node tagged by ``changed_workflow``.

    Only those nodes can change when one workflow's forecast changes or it
    terminates. Returns the ids recomputed.
    """
    touched = sorted(tree.wf_nodes.get(changed_workflow, ()))
    for nid in touched:
        node = tree.nodes[nid]
        node.score = multi_step_score(node, forecasts, params, tree.terminated)
        if nid in heap:
            heap.update(nid, key(node))
    return touched


class ScoreBook:
    """Per-workflow agent value vectors for fast node scoring.

    Holds, for every active workflow, the K-step ``agent_values`` and the
    step-1 distribution, so scoring a node is a sum over its tags.
    """

    def __init__(self, params: ScoreParams):
        self.params = params
        self.forecasts: dict[int, Forecast] = {}
        self._lookahead: dict[int, np.ndarray] = {}
        self._next: dict[int, np.ndarray] = {}

    def set_forecast(self, workflow_id: int, f: Forecast) -> None:
        self.forecasts[workflow_id] = f
        self._lookahead[workflow_id] = agent_values(f, self.params)
        self._next[workflow_id] = f.steps[0]

    def drop(self, workflow_id: int) -> None:
        self.forecasts.pop(workflow_id, None)
        self._lookahead.pop(workflow_id, None)
        self._next.pop(workflow_id, None)

    def score(self, node: CacheNode) -> float:
        return self._sum(node, self._lookahead)

    def value(self, node: CacheNode) -> float:
        return self._sum(node, self._next)

    @staticmethod
    def _sum(node: CacheNode, table: dict[int, np.ndarray]) -> float:
        access = node.access
        # hot shared nodes carry every workflow ever seen; walk the smaller side
        if len(access) > len(table):
            pairs = ((table[w], access[w]) for w in sorted(table) if w in access)
        else:
            pairs = ((table[w], a) for w, a in access.items() if w in table)
        total = 0.0
        for vals, agents in pairs:
            for a in agents:
                total += vals[a]
        return float(total)
