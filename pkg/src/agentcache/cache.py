"""Radix-tree prefix cache over a device tier and a host tier."""

from __future__ import annotations

import enum
import io
from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np


class Tier(enum.IntEnum):
    DEVICE = 0
    HOST = 1
    ABSENT = 2


class CacheError(RuntimeError):
    """A tier operation was called with its precondition violated."""


class CapacityError(CacheError):
    pass


class CacheInvariantError(AssertionError):
    pass


class CacheNode:
    __slots__ = (
        "node_id",
        "parent",
        "key",
        "children",
        "tier",
        "access",
        "active",
        "retired",
        "last_access",
        "score",
        "lock",
    )

    def __init__(self, node_id: int, parent: "CacheNode | None", key: tuple, tier: Tier):
        self.node_id = node_id
        self.parent = parent
        self.key = key
        self.children: dict[int, CacheNode] = {}
        self.tier = tier
        # workflow id -> set of agents of that workflow that traversed this node
        self.access: dict[int, set[int]] = {}
        self.active = 0
        self.retired = False
        self.last_access = 0
        self.score = 0.0
        self.lock = 0

    @property
    def token_len(self) -> int:
        return len(self.key)

    @property
    def popularity(self) -> int:
        return len(self.access)

    def access_vector(self, workflow_id: int, num_agents: int) -> np.ndarray:
        a = np.zeros(num_agents)
        for agent in self.access.get(workflow_id, ()):
            a[agent] = 1.0
        return a

    def __repr__(self) -> str:
        return (
            f"CacheNode(id={self.node_id}, len={self.token_len}, tier={self.tier.name}, "
            f"retired={self.retired}, workflows={sorted(self.access)})"
        )


@dataclass(frozen=True)
class MatchResult:
    device_hit: int
    host_hit: int
    miss: int
    path: tuple

    @property
    def host_nodes(self) -> list[CacheNode]:
        return [n for n in self.path if n.tier == Tier.HOST]


class RadixCache:
    """Prefix tree whose nodes live on DEVICE or HOST.

    Tier layout along every root path is ``DEVICE* HOST*``; nodes that fall
    off the host tier are removed from the tree. Node ids of removed nodes
    are never reused.

    ``dirty`` collects ids of nodes whose eviction-relevant state changed
    (tags, timestamps, retirement, tier, existence) so that an external
    priority structure can be refreshed lazily.
    """

    def __init__(self, device_capacity: int, host_capacity: int = 0):
        if device_capacity <= 0 or host_capacity < 0:
            raise ValueError("device capacity must be positive and host capacity non-negative")
        self.device_capacity = device_capacity
        self.host_capacity = host_capacity
        self.device_used = 0
        self.host_used = 0
        self.retired_device_used = 0
        self._locks = 0
        self.root = CacheNode(0, None, (), Tier.DEVICE)
        self.nodes: dict[int, CacheNode] = {0: self.root}
        self._next_id = 1
        self.clock = 0
        self.known_workflows: set[int] = set()
        self.terminated: set[int] = set()
        self.wf_nodes: dict[int, set[int]] = {}
        self.frontier: set[int] = set()
        self.dirty: set[int] = set()
        self.unknown_terminations = 0

    # -- bookkeeping -----------------------------------------------------
    @property
    def device_free(self) -> int:
        return self.device_capacity - self.device_used

    @property
    def host_free(self) -> int:
        return self.host_capacity - self.host_used

    def tick(self) -> int:
        self.clock += 1
        return self.clock

    def register_workflow(self, workflow_id: int) -> None:
        self.known_workflows.add(workflow_id)

    def is_active(self, workflow_id: int) -> bool:
        return workflow_id not in self.terminated

    def active_workflows(self, node: CacheNode) -> list[int]:
        return [w for w in node.access if w not in self.terminated]

    def pop_dirty(self) -> set[int]:
        d, self.dirty = self.dirty, set()
        return d

    def _new_node(self, parent: CacheNode, key: tuple, tier: Tier) -> CacheNode:
        node = CacheNode(self._next_id, parent, key, tier)
        self._next_id += 1
        self.nodes[node.node_id] = node
        parent.children[key[0]] = node
        self.dirty.add(node.node_id)
        return node

    def _tag(self, node: CacheNode, workflow_id: int, agent: int, now: int) -> None:
        agents = node.access.get(workflow_id)
        if agents is None:
            agents = node.access[workflow_id] = set()
            self.known_workflows.add(workflow_id)
            self.wf_nodes.setdefault(workflow_id, set()).add(node.node_id)
            if workflow_id not in self.terminated:
                node.active += 1
                if node.retired and node.tier == Tier.DEVICE:
                    self.retired_device_used -= node.token_len
                node.retired = False
        agents.add(agent)
        node.last_access = now
        self.dirty.add(node.node_id)

    def _split(self, node: CacheNode, at: int) -> CacheNode:
        """Cut ``node`` after ``at`` tokens; returns the new upper half."""
        parent = node.parent
        top = CacheNode(self._next_id, parent, node.key[:at], node.tier)
        self._next_id += 1
        self.nodes[top.node_id] = top
        top.access = {w: set(a) for w, a in node.access.items()}
        top.active = node.active
        top.retired = node.retired
        top.last_access = node.last_access
        top.score = node.score
        top.lock = node.lock
        self._locks += top.lock
        node.key = node.key[at:]
        node.parent = top
        top.children[node.key[0]] = node
        parent.children[top.key[0]] = top
        for w in top.access:
            self.wf_nodes.setdefault(w, set()).add(top.node_id)
        if node.node_id in self.frontier:
            self.frontier.discard(node.node_id)
            self.frontier.add(top.node_id)
        self.dirty.add(top.node_id)
        self.dirty.add(node.node_id)
        return top

    def _walk(self, tokens: tuple) -> tuple[list[CacheNode], int]:
        node = self.root
        path: list[CacheNode] = []
        i = 0
        n = len(tokens)
        while i < n:
            child = node.children.get(tokens[i])
            if child is None:
                break
            seg = child.key
            length = len(seg)
            if tokens[i : i + length] != seg:
                m = 1
                limit = min(length, n - i)
                while m < limit and seg[m] == tokens[i + m]:
                    m += 1
                child = self._split(child, m)
                path.append(child)
                i += m
                break
            path.append(child)
            i += length
            node = child
        return path, i

    # -- public operations ------------------------------------------------
    def match_prefix(self, tokens: Sequence[int], workflow_id: int, agent: int) -> MatchResult:
        """Longest cached prefix of ``tokens``, split by tier; tags the path."""
        tokens = tuple(tokens)
        if not tokens:
            raise ValueError("tokens must be non-empty")
        path, matched = self._walk(tokens)
        now = self.tick()
        device = host = 0
        for node in path:
            self._tag(node, workflow_id, agent, now)
            if node.tier == Tier.DEVICE:
                device += node.token_len
            else:
                host += node.token_len
        return MatchResult(device, host, len(tokens) - matched, tuple(path))

    def insert_suffix(self, tokens: Sequence[int], workflow_id: int, agent: int) -> list[CacheNode]:
        """Insert the uncached suffix of ``tokens`` as a DEVICE leaf.

        The cached prefix must be fully DEVICE-resident and the device tier
        must have room for the suffix; the caller evicts/promotes first.
        """
        tokens = tuple(tokens)
        if not tokens:
            raise ValueError("tokens must be non-empty")
        path, matched = self._walk(tokens)
        if any(n.tier != Tier.DEVICE for n in path):
            raise CacheError("cannot insert below a node that is not on the device tier")
        remaining = len(tokens) - matched
        if remaining > self.device_free:
            raise CapacityError(f"need {remaining} device tokens, only {self.device_free} free")
        now = self.tick()
        for node in path:
            self._tag(node, workflow_id, agent, now)
        if remaining == 0:
            return []
        parent = path[-1] if path else self.root
        leaf = self._new_node(parent, tokens[matched:], Tier.DEVICE)
        self.device_used += remaining
        self._tag(leaf, workflow_id, agent, now)
        return [leaf]

    def on_workflow_terminated(self, workflow_id: int) -> int:
        if workflow_id not in self.known_workflows or workflow_id in self.terminated:
            self.unknown_terminations += 1
            return 0
        self.terminated.add(workflow_id)
        retired = 0
        for nid in self.wf_nodes.get(workflow_id, ()):
            node = self.nodes[nid]
            node.active -= 1
            if node.active == 0 and not node.retired:
                node.retired = True
                retired += 1
                if node.tier == Tier.DEVICE:
                    self.retired_device_used += node.token_len
                self.dirty.add(nid)
        return retired

    def demote_to_host(self, node: CacheNode) -> Tier:
        """Move a DEVICE leaf to HOST, or drop it (and its HOST subtree) if HOST is full."""
        if node is self.root:
            raise CacheError("the root cannot be demoted")
        if node.tier != Tier.DEVICE:
            raise CacheError(f"node {node.node_id} is not on the device tier")
        if node.lock:
            raise CacheError(f"node {node.node_id} is locked")
        if any(c.tier == Tier.DEVICE for c in node.children.values()):
            raise CacheError(f"node {node.node_id} has device-resident children")
        if node.token_len > self.host_free:
            self.device_used -= node.token_len
            self._remove_subtree(node, count_device=False)
            return Tier.ABSENT
        node.tier = Tier.HOST
        self.device_used -= node.token_len
        if node.retired:
            self.retired_device_used -= node.token_len
        self.host_used += node.token_len
        self.frontier.add(node.node_id)
        for c in node.children.values():
            self.frontier.discard(c.node_id)
        self.dirty.add(node.node_id)
        return Tier.HOST

    def promote_to_device(self, node: CacheNode) -> None:
        if node.tier != Tier.HOST:
            raise CacheError(f"node {node.node_id} is not on the host tier")
        if node.parent.tier != Tier.DEVICE:
            raise CacheError(f"node {node.node_id} has a parent off the device tier")
        if node.token_len > self.device_free:
            raise CapacityError(f"promoting {node.token_len} tokens exceeds free device space")
        node.tier = Tier.DEVICE
        self.host_used -= node.token_len
        self.device_used += node.token_len
        if node.retired:
            self.retired_device_used += node.token_len
        self.frontier.discard(node.node_id)
        for c in node.children.values():
            self.frontier.add(c.node_id)
        self.dirty.add(node.node_id)

    def drop_host(self, node: CacheNode) -> None:
        """Remove a HOST leaf from the tree."""
        if node.tier != Tier.HOST or node.children:
            raise CacheError(f"node {node.node_id} is not a host leaf")
        self._remove_subtree(node, count_device=False)

    def _remove_subtree(self, node: CacheNode, count_device: bool) -> None:
        stack = [node]
        while stack:
            n = stack.pop()
            stack.extend(n.children.values())
            if n.tier == Tier.HOST:
                self.host_used -= n.token_len
            else:
                if count_device:
                    self.device_used -= n.token_len
                if n.retired:
                    self.retired_device_used -= n.token_len
            n.tier = Tier.ABSENT
            for w in n.access:
                s = self.wf_nodes.get(w)
                if s is not None:
                    s.discard(n.node_id)
            self.frontier.discard(n.node_id)
            self._locks -= n.lock
            del self.nodes[n.node_id]
            self.dirty.add(n.node_id)
        del node.parent.children[node.key[0]]

    def lock_path(self, path: Sequence[CacheNode]) -> None:
        for n in path:
            n.lock += 1
        self._locks += len(path)

    def unlock_path(self, path: Sequence[CacheNode]) -> None:
        for n in path:
            if n.node_id in self.nodes:
                n.lock -= 1
                self._locks -= 1

    def any_locked(self) -> bool:
        return self._locks > 0

    # -- queries ------------------------------------------------------------
    def iter_nodes(self) -> Iterator[CacheNode]:
        return (n for n in self.nodes.values() if n is not self.root)

    def is_device_leaf(self, node: CacheNode) -> bool:
        return node.tier == Tier.DEVICE and not any(
            c.tier == Tier.DEVICE for c in node.children.values()
        )

    def retired_device_tokens(self) -> int:
        return self.retired_device_used

    def tokens_on(self, tier: Tier) -> int:
        return sum(n.token_len for n in self.iter_nodes() if n.tier == tier)

    def audit(self) -> None:
        """Recompute every derived quantity from scratch and compare."""
        dev = host = retired = 0
        for n in self.iter_nodes():
            if n.tier == Tier.DEVICE:
                dev += n.token_len
                retired += n.token_len if n.retired else 0
                if n.parent.tier != Tier.DEVICE:
                    raise CacheInvariantError(f"device node {n.node_id} under non-device parent")
            elif n.tier == Tier.HOST:
                host += n.token_len
                if n.parent.tier == Tier.ABSENT:
                    raise CacheInvariantError(f"host node {n.node_id} under absent parent")
            else:
                raise CacheInvariantError(f"absent node {n.node_id} still in the tree")
            if not n.key or n.parent.children.get(n.key[0]) is not n:
                raise CacheInvariantError(f"node {n.node_id} is not linked under its parent")
            active = [w for w in n.access if w not in self.terminated]
            if n.active != len(active):
                raise CacheInvariantError(f"node {n.node_id} active count drifted")
            if n.retired != (not active):
                raise CacheInvariantError(f"node {n.node_id} retired flag disagrees with tags")
            for w in active:
                if n.node_id not in self.wf_nodes.get(w, ()):
                    raise CacheInvariantError(f"workflow index misses node {n.node_id}")
            in_frontier = n.tier == Tier.HOST and n.parent.tier == Tier.DEVICE
            if in_frontier != (n.node_id in self.frontier):
                raise CacheInvariantError(f"prefetch frontier disagrees on node {n.node_id}")
        if sum(n.lock for n in self.nodes.values()) != self._locks:
            raise CacheInvariantError("lock count drifted")
        if retired != self.retired_device_used:
            raise CacheInvariantError(
                f"retired accounting drifted: {self.retired_device_used} vs {retired}"
            )
        if dev != self.device_used or host != self.host_used:
            raise CacheInvariantError(
                f"tier accounting drifted: device {self.device_used} vs {dev}, host {self.host_used} vs {host}"
            )
        if self.device_used > self.device_capacity or self.host_used > self.host_capacity:
            raise CacheInvariantError("tier over capacity")
        if self.frontier - set(self.nodes):
            raise CacheInvariantError("frontier holds removed nodes")

    def dump(self) -> str:
        """One CSV row per node: ``node_id,parent_id,token_len,tier,retired,workflows``."""
        buf = io.StringIO()
        buf.write("node_id,parent_id,token_len,tier,retired,workflows\n")
        for nid in sorted(self.nodes):
            n = self.nodes[nid]
            if n is self.root:
                continue
            wfs = ";".join(str(w) for w in sorted(n.access))
            buf.write(
                f"{nid},{n.parent.node_id},{n.token_len},{n.tier.name},{int(n.retired)},{wfs}\n"
            )
        return buf.getvalue()
