"""Exact s-t maximum flow / minimum cut on real-valued capacitated networks.

This is the inner engine behind joint MAP inference: label networks reduce to
s-t cut problems whose capacities are double-precision reals derived from
feature/weight dot products, so the solver works on float capacities directly
(no quantization). Capacities below ``CAPACITY_EPS`` are treated as absent
arcs, which also keeps residual bookkeeping free of float dust.

The algorithm is a shortest-augmenting-path phase solver (Dinic): each phase
runs a BFS on the residual graph and then saturates a blocking flow with an
iterative current-arc DFS. Termination does not depend on capacities being
integral (phase count is bounded by the node count, and every augmentation
saturates at least one arc of its level path), and the hot loops are compiled
with numba.
"""

from __future__ import annotations

from typing import NamedTuple

import numpy as np
from numba import njit

__all__ = [
    "SOURCE",
    "SINK",
    "CAPACITY_EPS",
    "FlowNetwork",
    "MaxFlowResult",
    "MaxFlowError",
    "max_flow",
]

SOURCE = -1
SINK = -2

# Arcs with less residual capacity than this are treated as absent.
CAPACITY_EPS = 1e-12


class MaxFlowError(RuntimeError):
    """Solver diagnostic failure (augmentation safety cap exceeded)."""


class MaxFlowResult(NamedTuple):
    flow_value: float
    source_side: np.ndarray  # bool per interior node: reachable from source


class FlowNetwork:
    """Directed capacitated network over interior nodes plus source/sink.

    Interior nodes are ``0 .. node_count-1``; use the ``SOURCE`` / ``SINK``
    sentinels for the terminals. Arcs are stored as residual pairs, and
    ``add_arc(u, v, cap, rev_cap)`` creates both directions in one pair, so a
    symmetric disagreement edge costs a single pair. Invalid arcs (into the
    source, out of the sink, negative capacity, self loops) are rejected at
    insertion time.
    """

    def __init__(self, node_count: int):
        if node_count < 0:
            raise ValueError(f"node_count must be >= 0, got {node_count}")
        self.node_count = int(node_count)
        self._scalar_u: list[int] = []
        self._scalar_v: list[int] = []
        self._scalar_cap: list[float] = []
        self._scalar_rev: list[float] = []
        self._chunks: list[tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]] = []

    # -- construction ------------------------------------------------------

    def _map_endpoint(self, x: int) -> int:
        if x == SOURCE:
            return self.node_count
        if x == SINK:
            return self.node_count + 1
        if 0 <= x < self.node_count:
            return int(x)
        raise ValueError(f"endpoint {x} out of range for {self.node_count} nodes")

    def add_arc(self, u: int, v: int, cap: float, rev_cap: float = 0.0) -> None:
        if v == SOURCE:
            raise ValueError("arc into the source is not allowed")
        if u == SINK:
            raise ValueError("arc out of the sink is not allowed")
        if cap < 0 or rev_cap < 0:
            raise ValueError(f"negative capacity on arc ({u}, {v})")
        ui, vi = self._map_endpoint(u), self._map_endpoint(v)
        if ui == vi:
            raise ValueError(f"self arc at node {u}")
        self._scalar_u.append(ui)
        self._scalar_v.append(vi)
        self._scalar_cap.append(float(cap))
        self._scalar_rev.append(float(rev_cap))

    def add_arcs(
        self,
        us: np.ndarray,
        vs: np.ndarray,
        caps: np.ndarray,
        rev_caps: np.ndarray | None = None,
    ) -> None:
        """Bulk arc insertion; endpoints must be interior node indices."""
        us = np.asarray(us, dtype=np.int64)
        vs = np.asarray(vs, dtype=np.int64)
        caps = np.asarray(caps, dtype=np.float64)
        if rev_caps is None:
            rev = np.zeros_like(caps)
        else:
            rev = np.asarray(rev_caps, dtype=np.float64)
        if not (us.shape == vs.shape == caps.shape == rev.shape):
            raise ValueError("add_arcs arrays must have identical shapes")
        n = self.node_count
        if us.size:
            if us.min() < 0 or us.max() >= n or vs.min() < 0 or vs.max() >= n:
                raise ValueError("add_arcs endpoints must be interior nodes")
            if np.any(us == vs):
                raise ValueError("self arcs are not allowed")
            if caps.min() < 0 or rev.min() < 0:
                raise ValueError("negative capacities are not allowed")
        self._chunks.append((us, vs, caps, rev))

    def add_source_arcs(self, nodes: np.ndarray, caps: np.ndarray) -> None:
        nodes = np.asarray(nodes, dtype=np.int64)
        caps = np.asarray(caps, dtype=np.float64)
        if nodes.size:
            if nodes.min() < 0 or nodes.max() >= self.node_count:
                raise ValueError("source arcs must target interior nodes")
            if caps.min() < 0:
                raise ValueError("negative capacities are not allowed")
        us = np.full(nodes.shape, self.node_count, dtype=np.int64)
        self._chunks.append((us, nodes, caps, np.zeros_like(caps)))

    def add_sink_arcs(self, nodes: np.ndarray, caps: np.ndarray) -> None:
        nodes = np.asarray(nodes, dtype=np.int64)
        caps = np.asarray(caps, dtype=np.float64)
        if nodes.size:
            if nodes.min() < 0 or nodes.max() >= self.node_count:
                raise ValueError("sink arcs must come from interior nodes")
            if caps.min() < 0:
                raise ValueError("negative capacities are not allowed")
        vs = np.full(nodes.shape, self.node_count + 1, dtype=np.int64)
        self._chunks.append((nodes, vs, caps, np.zeros_like(caps)))

    def _assemble(self) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """Concatenate all arc pairs, dropping pairs below CAPACITY_EPS."""
        parts = list(self._chunks)
        if self._scalar_u:
            parts.append(
                (
                    np.asarray(self._scalar_u, dtype=np.int64),
                    np.asarray(self._scalar_v, dtype=np.int64),
                    np.asarray(self._scalar_cap, dtype=np.float64),
                    np.asarray(self._scalar_rev, dtype=np.float64),
                )
            )
        if not parts:
            e = np.empty(0, dtype=np.int64)
            f = np.empty(0, dtype=np.float64)
            return e, e, f, f
        us = np.concatenate([p[0] for p in parts])
        vs = np.concatenate([p[1] for p in parts])
        caps = np.concatenate([p[2] for p in parts])
        revs = np.concatenate([p[3] for p in parts])
        caps = np.where(caps < CAPACITY_EPS, 0.0, caps)
        revs = np.where(revs < CAPACITY_EPS, 0.0, revs)
        keep = (caps > 0.0) | (revs > 0.0)
        return us[keep], vs[keep], caps[keep], revs[keep]

    @property
    def arc_count(self) -> int:
        n = len(self._scalar_u)
        for chunk in self._chunks:
            n += chunk[0].size
        return n

    # -- solving -----------------------------------------------------------

    def max_flow(self) -> MaxFlowResult:
        return max_flow(self)

    def to_dimacs(self) -> str:
        """DIMACS max-flow text (real capacities; node ids are 1-based,
        source first, sink last)."""
        us, vs, caps, revs = self._assemble()
        n = self.node_count
        lines = []
        arcs = []
        for u, v, c, r in zip(us, vs, caps, revs):
            if c > 0.0:
                arcs.append((int(u), int(v), float(c)))
            if r > 0.0:
                arcs.append((int(v), int(u), float(r)))

        def node_id(x: int) -> int:
            if x == n:  # source
                return 1
            if x == n + 1:  # sink
                return n + 2
            return x + 2

        lines.append(f"p max {n + 2} {len(arcs)}")
        lines.append("n 1 s")
        lines.append(f"n {n + 2} t")
        for u, v, c in arcs:
            lines.append(f"a {node_id(u)} {node_id(v)} {c!r}")
        return "\n".join(lines) + "\n"


@njit(cache=True)
def _dinic(n_total, s, t, arc_to, cap, adj_arcs, adj_start, eps, max_augmentations):
    level = np.empty(n_total, dtype=np.int64)
    cur = np.empty(n_total, dtype=np.int64)
    queue = np.empty(n_total, dtype=np.int64)
    path_nodes = np.empty(n_total + 1, dtype=np.int64)
    path_arcs = np.empty(n_total + 1, dtype=np.int64)

    total = 0.0
    augmentations = 0
    while True:
        # BFS level graph on the residual network.
        for i in range(n_total):
            level[i] = -1
        level[s] = 0
        queue[0] = s
        head, tail = 0, 1
        while head < tail:
            u = queue[head]
            head += 1
            for k in range(adj_start[u], adj_start[u + 1]):
                a = adj_arcs[k]
                v = arc_to[a]
                if cap[a] > eps and level[v] < 0:
                    level[v] = level[u] + 1
                    queue[tail] = v
                    tail += 1
        if level[t] < 0:
            break

        # Blocking flow with current-arc DFS.
        for i in range(n_total):
            cur[i] = adj_start[i]
        while True:
            path_nodes[0] = s
            depth = 0
            found = False
            while True:
                u = path_nodes[depth]
                if u == t:
                    found = True
                    break
                moved = False
                while cur[u] < adj_start[u + 1]:
                    a = adj_arcs[cur[u]]
                    v = arc_to[a]
                    if cap[a] > eps and level[v] == level[u] + 1:
                        path_arcs[depth] = a
                        depth += 1
                        path_nodes[depth] = v
                        moved = True
                        break
                    cur[u] += 1
                if moved:
                    continue
                if depth == 0:
                    break
                depth -= 1
                cur[path_nodes[depth]] += 1
            if not found:
                break
            bottleneck = np.inf
            for d in range(depth):
                a = path_arcs[d]
                if cap[a] < bottleneck:
                    bottleneck = cap[a]
            for d in range(depth):
                a = path_arcs[d]
                cap[a] -= bottleneck
                cap[a ^ 1] += bottleneck
            total += bottleneck
            augmentations += 1
            if augmentations > max_augmentations:
                return total, augmentations, level, 1

    return total, augmentations, level, 0


def max_flow(net: FlowNetwork) -> MaxFlowResult:
    """Solve the network exactly.

    Returns the max-flow value (equal to the min-cut capacity) and the
    source-side indicator per interior node: True iff the node is reachable
    from the source in the final residual graph. Deterministic for a fixed
    arc insertion order.
    """
    us, vs, caps, revs = net._assemble()
    n = net.node_count
    n_total = n + 2
    s, t = n, n + 1

    m = us.size
    if m == 0:
        return MaxFlowResult(0.0, np.zeros(n, dtype=bool))

    # Interleave each pair as arcs 2k (forward) and 2k+1 (reverse).
    arc_to = np.empty(2 * m, dtype=np.int64)
    arc_from = np.empty(2 * m, dtype=np.int64)
    cap = np.empty(2 * m, dtype=np.float64)
    arc_to[0::2] = vs
    arc_to[1::2] = us
    arc_from[0::2] = us
    arc_from[1::2] = vs
    cap[0::2] = caps
    cap[1::2] = revs

    order = np.argsort(arc_from, kind="stable")
    adj_arcs = order.astype(np.int64)
    counts = np.bincount(arc_from, minlength=n_total)
    adj_start = np.zeros(n_total + 1, dtype=np.int64)
    np.cumsum(counts, out=adj_start[1:])

    max_aug = max(1, net.node_count * max(1, m))
    total, augmentations, level, status = _dinic(
        n_total, s, t, arc_to, cap, adj_arcs, adj_start, CAPACITY_EPS, max_aug
    )
    if status != 0:
        raise MaxFlowError(
            f"augmentation safety cap exceeded ({augmentations} > {max_aug}); "
            "network is numerically pathological"
        )
    return MaxFlowResult(float(total), level[:n] >= 0)
