"""Victim selection and prefetch planning over a :class:`RadixCache`.

Selectors pop candidates from an indexed heap of DEVICE nodes. Victims
come back in an order that is safe to demote one by one (leaves first);
they are removed from the heap, so the caller must demote every victim it
receives. Nodes that were inspected but not chosen are restored.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

from ._validation import ValidationError, check_scalar
from .cache import CacheNode, RadixCache, Tier
from .forecast import Forecast
from .scoring import ScoreHeap, build_heap, hierarchical_key, single_step_value


class Policy(str, enum.Enum):
    LRU = "lru"
    LAE = "lae"
    HE = "he"
    FULL = "full"
    KVFLOW = "kvflow"

    @classmethod
    def parse(cls, name) -> "Policy":
        try:
            return cls(str(name).lower())
        except ValueError:
            raise ValidationError(f"unknown policy {name!r}") from None


@dataclass(frozen=True)
class EvictionRequest:
    needed: int
    policy: Policy

    def __post_init__(self):
        check_scalar(self.needed, "needed", kind=int, lo=1)


@dataclass
class Selection:
    victims: list[CacheNode] = field(default_factory=list)
    freed: int = 0
    shortfall: bool = False


def lru_key(node: CacheNode) -> tuple:
    return (node.last_access, node.node_id)


def lae_key(node: CacheNode) -> tuple:
    if node.retired:
        return (0, node.popularity, node.last_access, node.node_id)
    return (1, 0, node.last_access, node.node_id)


def kvflow_key(node: CacheNode) -> tuple:
    """``node.score`` holds the steps-to-execution distance (``inf`` if never reused)."""
    if node.retired or math.isinf(node.score):
        return (0, 0.0, node.last_access, node.node_id)
    return (1, -node.score, node.last_access, node.node_id)


def drain(
    tree: RadixCache,
    heap: ScoreHeap,
    needed: int,
    key: Callable[[CacheNode], object],
    admissible: Callable[[CacheNode], bool] | None = None,
    limit: int | None = None,
) -> Selection:
    """Pop leaves in key order until ``needed`` tokens are freed.

    ``admissible`` restricts victims to a class that sorts ahead of every
    other node under ``key`` (e.g. retired nodes under the hierarchical
    key), so the scan stops at the first inadmissible node. ``limit`` caps
    the freed volume. Removing a victim can turn its parent into a leaf,
    in which case the parent becomes eligible within the same call.
    """
    sel = Selection()
    chosen: set[int] = set()
    waiting: dict[int, CacheNode] = {}
    while sel.freed < needed and len(heap):
        nid, _ = heap.pop()
        node = tree.nodes[nid]
        blocked = node.lock or any(
            c.tier == Tier.DEVICE and c.node_id not in chosen for c in node.children.values()
        )
        if admissible is not None and not admissible(node):
            waiting[nid] = node
            break
        if blocked:
            waiting[nid] = node
            continue
        if limit is not None and sel.freed + node.token_len > limit:
            waiting[nid] = node
            continue
        chosen.add(nid)
        sel.victims.append(node)
        sel.freed += node.token_len
        parent = node.parent
        if parent.node_id in waiting and not parent.lock and all(
            c.tier != Tier.DEVICE or c.node_id in chosen for c in parent.children.values()
        ):
            del waiting[parent.node_id]
            heap.push(parent.node_id, key(parent))
    for nid, node in waiting.items():
        heap.push(nid, key(node))
    sel.shortfall = sel.freed < needed
    return sel


def _select(tree, needed, heap, key) -> Selection:
    if heap is None:
        heap = build_heap(tree, key)
    return drain(tree, heap, needed, key)


def select_victims_lru(tree: RadixCache, needed: int, heap: ScoreHeap | None = None) -> Selection:
    return _select(tree, needed, heap, lru_key)


def select_victims_lae(tree: RadixCache, needed: int, heap: ScoreHeap | None = None) -> Selection:
    return _select(tree, needed, heap, lae_key)


def select_victims_hierarchical(
    tree: RadixCache, needed: int, heap: ScoreHeap | None = None
) -> Selection:
    """Retired nodes first, then active nodes by ascending ``node.score``.

    Scores must be current (see :func:`agentcache.scoring.refresh_scores`).
    """
    return _select(tree, needed, heap, hierarchical_key)


def steps_to_execution(
    node: CacheNode, static_sequences: Mapping[int, Sequence[int]], terminated=()
) -> float:
    """Fewest steps until any active tagged workflow next invokes an agent that used ``node``."""
    best = math.inf
    for w, agents in node.access.items():
        if w in terminated:
            continue
        try:
            remaining = static_sequences[w]
        except KeyError:
            raise ValidationError(f"workflow {w} has no static sequence") from None
        for i, a in enumerate(remaining, start=1):
            if i >= best:
                break
            if a in agents:
                best = i
                break
    return float(best)


def select_victims_kvflow(
    tree: RadixCache,
    needed: int,
    static_sequences: Mapping[int, Sequence[int]] | None,
    heap: ScoreHeap | None = None,
) -> Selection:
    """Evict the node whose next use is farthest away (retired / never-used first)."""
    if static_sequences is None:
        raise ValidationError("steps-to-execution eviction needs static workflow sequences")
    if heap is None:
        for n in tree.iter_nodes():
            if n.tier == Tier.DEVICE:
                n.score = steps_to_execution(n, static_sequences, tree.terminated)
    return _select(tree, needed, heap, kvflow_key)


SELECTORS = {
    Policy.LRU: lru_key,
    Policy.LAE: lae_key,
    Policy.HE: hierarchical_key,
    Policy.FULL: hierarchical_key,
    Policy.KVFLOW: kvflow_key,
}


@dataclass
class PrefetchPlan:
    candidates: list[tuple[int, float, int]]
    budget_space: int
    budget_bw: int
    selected: list[int] = field(default_factory=list)
    displace_allowance: int = 0

    @property
    def budget(self) -> int:
        return min(self.budget_space, self.budget_bw)

    @property
    def selected_tokens(self) -> int:
        sizes = {nid: size for nid, _, size in self.candidates}
        return sum(sizes[n] for n in self.selected)


def _candidates(tree: RadixCache, value_of: Callable[[CacheNode], float]):
    out = []
    for nid in tree.frontier:
        node = tree.nodes[nid]
        v = value_of(node)
        # a zero-value node has no predicted next-step reuse; moving it only burns bandwidth
        if v > 0.0:
            out.append((nid, v, node.token_len))
    out.sort(key=lambda c: (-c[1], c[0]))
    return out


def _greedy(plan: PrefetchPlan) -> PrefetchPlan:
    room = plan.budget
    for nid, _, size in plan.candidates:
        if size <= room:
            plan.selected.append(nid)
            room -= size
    return plan


def _value_fn(tree: RadixCache, forecasts) -> Callable[[CacheNode], float]:
    if callable(forecasts):
        return forecasts
    return lambda node: single_step_value(node, forecasts, tree.terminated)


def _locked_retired(tree: RadixCache) -> int:
    # locks are only held during a prefill, so this is normally zero
    return sum(
        n.token_len for n in tree.iter_nodes() if n.lock and n.retired and n.tier == Tier.DEVICE
    ) if tree.any_locked() else 0


def plan_conservative_prefetch(
    tree: RadixCache,
    forecasts: Mapping[int, Forecast] | Callable[[CacheNode], float],
    bandwidth: int,
    step_duration: int = 1,
) -> PrefetchPlan:
    """Greedy plan that only uses free device space and retired device cache.

    ``forecasts`` may also be a callable returning a node's one-step value.
    """
    retired = tree.retired_device_tokens() - _locked_retired(tree)
    plan = PrefetchPlan(
        _candidates(tree, _value_fn(tree, forecasts)),
        tree.device_free + retired,
        int(bandwidth * step_duration),
    )
    return _greedy(plan)


def plan_aggressive_prefetch(
    tree: RadixCache,
    forecasts: Mapping[int, Forecast] | Callable[[CacheNode], float],
    bandwidth: int,
    rho: float,
    step_duration: int = 1,
) -> PrefetchPlan:
    """As the conservative plan, plus up to ``rho * device_capacity`` of displaced active cache."""
    check_scalar(rho, "rho", lo=0.0, hi=1.0)
    retired = tree.retired_device_tokens() - _locked_retired(tree)
    active = tree.device_used - tree.retired_device_tokens()
    if tree.any_locked():
        active -= sum(
            n.token_len for n in tree.iter_nodes() if n.lock and not n.retired and n.tier == Tier.DEVICE
        )
    allowance = min(int(rho * tree.device_capacity), active)
    plan = PrefetchPlan(
        _candidates(tree, _value_fn(tree, forecasts)),
        tree.device_free + retired + allowance,
        int(bandwidth * step_duration),
        displace_allowance=allowance,
    )
    return _greedy(plan)


def execute_prefetch(
    tree: RadixCache,
    plan: PrefetchPlan,
    heap: ScoreHeap | None = None,
    make_host_room: Callable[[int], None] | None = None,
) -> tuple[list[int], list[CacheNode]]:
    """Carry out ``plan``: free space, then promote the selected nodes.

    Retired nodes are reclaimed first; active nodes (ascending score) only up
    to ``plan.displace_allowance``. Returns ``(promoted ids, victims)``.
    """
    selected = [tree.nodes[n] for n in plan.selected]
    need = sum(n.token_len for n in selected) - tree.device_free
    victims: list[CacheNode] = []
    if need > 0:
        if heap is None:
            heap = build_heap(tree, hierarchical_key)
        parents = [n.parent for n in selected]
        tree.lock_path(parents)
        try:
            sel = drain(tree, heap, need, hierarchical_key, admissible=lambda n: n.retired)
            victims.extend(sel.victims)
            if sel.shortfall and plan.displace_allowance:
                more = drain(
                    tree, heap, need - sel.freed, hierarchical_key, limit=plan.displace_allowance
                )
                victims.extend(more.victims)
            for v in victims:
                if make_host_room is not None:
                    make_host_room(v.token_len)
                tree.demote_to_host(v)
        finally:
            tree.unlock_path(parents)
    promoted = []
    for node in selected:
        if node.node_id in tree.nodes and node.tier == Tier.HOST and node.token_len <= tree.device_free:
            tree.promote_to_device(node)
            promoted.append(node.node_id)
    return promoted, victims
