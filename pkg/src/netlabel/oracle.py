"""Brute-force reference implementations for cross-checking the solvers.

Labelings are enumerated exhaustively (hard cap 20 nodes). Ties are broken by
position in the binary-reflected Gray-code sequence over bit masks (bit i set
means node i is +1, the all -1 labeling is first), so oracle outputs are
deterministic and independent of how the enumeration is vectorized.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .learning import ber_biases, loss_augmented_argmax
from .maxflow import FlowNetwork, max_flow
from .model import (
    CategoryModel,
    InstanceGraph,
    N_EDGE_FEATURES,
    as_labeling,
    joint_score,
    map_infer,
)

__all__ = [
    "MAX_ORACLE_NODES",
    "OracleSizeError",
    "OracleReport",
    "brute_force_map",
    "brute_force_loss_augmented",
    "brute_force_min_cut",
    "random_instance",
    "random_truth",
    "random_network",
    "run_map_campaign",
    "run_loss_augmented_campaign",
    "run_min_cut_campaign",
    "instance_to_json",
    "instance_from_json",
]

MAX_ORACLE_NODES = 20
VALUE_TOL = 1e-9


class OracleSizeError(ValueError):
    """Instance too large for exhaustive enumeration."""


@dataclass(frozen=True)
class OracleReport:
    descriptor: dict
    oracle_value: float
    solver_value: float
    labeling_equal: bool

    @property
    def agrees(self) -> bool:
        return abs(self.oracle_value - self.solver_value) <= VALUE_TOL


def _check_size(n: int) -> None:
    if n > MAX_ORACLE_NODES:
        raise OracleSizeError(f"{n} nodes exceeds the oracle cap of {MAX_ORACLE_NODES}")


def _gray_position(masks: np.ndarray) -> np.ndarray:
    """Position of each bit mask within the Gray-code enumeration order."""
    pos = masks.astype(np.uint32).copy()
    for shift in (1, 2, 4, 8, 16):
        pos ^= pos >> shift
    return pos


def _edge_agreement(masks: np.ndarray, i: int, j: int) -> np.ndarray:
    return ((masks >> i) & 1) == ((masks >> j) & 1)


def _best_by_gray(masks: np.ndarray, values: np.ndarray, n: int) -> tuple[np.ndarray, float]:
    best = values.max() if values.size else 0.0
    ties = np.flatnonzero(values == best)
    winner = ties[np.argmin(_gray_position(masks[ties]))]
    bits = (int(winner) >> np.arange(n)) & 1
    labeling = np.where(bits == 1, 1, -1).astype(np.int8)
    return labeling, float(best)


def brute_force_map(graph: InstanceGraph, model: CategoryModel) -> tuple[np.ndarray, float]:
    """Exhaustive maximum of the joint score."""
    n = graph.node_count
    _check_size(n)
    w = graph.unary_scores(model)
    masks = np.arange(1 << n, dtype=np.uint32)
    values = np.zeros(1 << n)
    for i in range(n):
        values += w[i] * np.where((masks >> i) & 1, 1.0, -1.0)
    if graph.edge_count:
        ew = graph.edge_features @ model.theta_edge
        for (i, j), wij in zip(graph.edge_index, ew):
            values += wij * _edge_agreement(masks, int(i), int(j))
    return _best_by_gray(masks, values, n)


def brute_force_loss_augmented(
    graph: InstanceGraph, model: CategoryModel, truth
) -> tuple[np.ndarray, float]:
    """Exhaustive maximum of score plus balanced error, with the loss counted
    directly from false positive / false negative totals."""
    n = graph.node_count
    _check_size(n)
    t = as_labeling(truth, n)
    n_pos = int(np.count_nonzero(t == 1))
    n_neg = n - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("truth must contain both classes")
    w = graph.unary_scores(model)
    masks = np.arange(1 << n, dtype=np.uint32)
    values = np.zeros(1 << n)
    fp = np.zeros(1 << n)
    fn = np.zeros(1 << n)
    for i in range(n):
        bit = ((masks >> i) & 1).astype(np.float64)
        values += w[i] * (2.0 * bit - 1.0)
        if t[i] == 1:
            fn += 1.0 - bit
        else:
            fp += bit
    if graph.edge_count:
        ew = graph.edge_features @ model.theta_edge
        for (i, j), wij in zip(graph.edge_index, ew):
            values += wij * _edge_agreement(masks, int(i), int(j))
    values += 0.5 * (fp / n_neg + fn / n_pos)
    return _best_by_gray(masks, values, n)


def brute_force_min_cut(net: FlowNetwork) -> tuple[np.ndarray, float]:
    """Exhaustive minimum s-t cut: every source-side subset of the interior
    nodes is costed by its crossing capacity."""
    n = net.node_count
    _check_size(n)
    us, vs, caps, revs = net._assemble()
    masks = np.arange(1 << n, dtype=np.uint32)
    cost = np.zeros(1 << n)

    def side(x: int) -> np.ndarray:
        if x == n:  # source
            return np.ones(1 << n, dtype=bool)
        if x == n + 1:  # sink
            return np.zeros(1 << n, dtype=bool)
        return ((masks >> x) & 1).astype(bool)

    for u, v, c, r in zip(us, vs, caps, revs):
        su, sv = side(int(u)), side(int(v))
        if c > 0.0:
            cost += c * (su & ~sv)
        if r > 0.0:
            cost += r * (sv & ~su)
    best = cost.min() if cost.size else 0.0
    ties = np.flatnonzero(cost == best)
    winner = ties[np.argmin(_gray_position(masks[ties]))]
    bits = ((int(winner) >> np.arange(n)) & 1).astype(bool)
    return bits, float(best)


# -- randomized campaign instances -------------------------------------------


def random_instance(
    rng: np.random.Generator,
    n_nodes: int,
    feature_dim: int = 3,
    edge_density: float = 0.5,
    weight_scale: float = 3.0,
) -> tuple[InstanceGraph, CategoryModel]:
    """Random small instance: nonnegative features, signed node weights in
    [-scale, scale], nonnegative edge weights."""
    x = sp.csr_matrix(rng.random((n_nodes, feature_dim)))
    theta_node = rng.uniform(-weight_scale, weight_scale, size=feature_dim)
    pairs = [
        (i, j)
        for i in range(n_nodes)
        for j in range(i + 1, n_nodes)
        if rng.random() < edge_density
    ]
    if pairs:
        ei = np.asarray(pairs, dtype=np.int64)
        ef = rng.random((len(pairs), N_EDGE_FEATURES))
    else:
        ei, ef = None, None
    theta_edge = rng.random(N_EDGE_FEATURES)
    ids = tuple(f"n{k}" for k in range(n_nodes))
    graph = InstanceGraph(ids, x, ei, ef)
    model = CategoryModel("random", theta_node, theta_edge)
    return graph, model


def random_truth(rng: np.random.Generator, n_nodes: int) -> np.ndarray:
    """Random non-degenerate labeling (needs n >= 2)."""
    while True:
        t = np.where(rng.random(n_nodes) < 0.5, 1, -1).astype(np.int8)
        if 0 < np.count_nonzero(t == 1) < n_nodes:
            return t


def random_network(
    rng: np.random.Generator, n_nodes: int, max_capacity: float = 10.0
) -> FlowNetwork:
    net = FlowNetwork(n_nodes)
    for i in range(n_nodes):
        if rng.random() < 0.8:
            net.add_arc(-1, i, float(rng.integers(0, int(max_capacity) + 1)))
        if rng.random() < 0.8:
            net.add_arc(i, -2, float(rng.integers(0, int(max_capacity) + 1)))
    for i in range(n_nodes):
        for j in range(n_nodes):
            if i != j and rng.random() < 0.25:
                net.add_arc(i, j, float(rng.integers(0, int(max_capacity) + 1)))
    return net


def instance_to_json(graph: InstanceGraph, model: CategoryModel, truth=None) -> str:
    """Replayable description of one oracle instance."""
    x = graph.node_features.toarray()
    payload = {
        "node_ids": list(graph.node_ids),
        "node_features": [[float(v) for v in row] for row in x],
        "edges": [
            [int(i), int(j)] + [float(v) for v in f]
            for (i, j), f in zip(graph.edge_index, graph.edge_features)
        ],
        "theta_node": [float(v) for v in model.theta_node],
        "theta_edge": [float(v) for v in model.theta_edge],
        "truth": None if truth is None else [int(v) for v in truth],
    }
    return json.dumps(payload)


def instance_from_json(blob: str) -> tuple[InstanceGraph, CategoryModel, np.ndarray | None]:
    payload = json.loads(blob)
    x = sp.csr_matrix(np.asarray(payload["node_features"], dtype=np.float64))
    edges = payload["edges"]
    if edges:
        arr = np.asarray(edges, dtype=np.float64)
        ei, ef = arr[:, :2].astype(np.int64), arr[:, 2:]
    else:
        ei, ef = None, None
    graph = InstanceGraph(tuple(payload["node_ids"]), x, ei, ef)
    model = CategoryModel(
        "replay",
        np.asarray(payload["theta_node"], dtype=np.float64),
        np.asarray(payload["theta_edge"], dtype=np.float64),
    )
    truth = None
    if payload.get("truth") is not None:
        truth = as_labeling(payload["truth"])
    return graph, model, truth


def run_map_campaign(
    trials: int, seed: int = 0, min_nodes: int = 2, max_nodes: int = 12
) -> list[OracleReport]:
    rng = np.random.default_rng(seed)
    reports = []
    for k in range(trials):
        n = int(rng.integers(min_nodes, max_nodes + 1))
        graph, model = random_instance(rng, n)
        oracle_y, oracle_value = brute_force_map(graph, model)
        solver_y = map_infer(graph, model)
        solver_value = joint_score(graph, model, solver_y)
        reports.append(
            OracleReport(
                {"kind": "map", "trial": k, "n_nodes": n, "seed": seed},
                oracle_value,
                solver_value,
                bool(np.array_equal(oracle_y, solver_y)),
            )
        )
    return reports


def run_loss_augmented_campaign(
    trials: int, seed: int = 0, min_nodes: int = 2, max_nodes: int = 12
) -> list[OracleReport]:
    rng = np.random.default_rng(seed)
    reports = []
    for k in range(trials):
        n = int(rng.integers(min_nodes, max_nodes + 1))
        graph, model = random_instance(rng, n)
        truth = random_truth(rng, n)
        oracle_y, oracle_value = brute_force_loss_augmented(graph, model, truth)
        solver_y, solver_value = loss_augmented_argmax(graph, model, truth)
        reports.append(
            OracleReport(
                {"kind": "loss-augmented", "trial": k, "n_nodes": n, "seed": seed},
                oracle_value,
                solver_value,
                bool(np.array_equal(oracle_y, solver_y)),
            )
        )
    return reports


def run_min_cut_campaign(
    trials: int, seed: int = 0, min_nodes: int = 1, max_nodes: int = 12
) -> list[OracleReport]:
    rng = np.random.default_rng(seed)
    reports = []
    for k in range(trials):
        n = int(rng.integers(min_nodes, max_nodes + 1))
        net = random_network(rng, n)
        _, oracle_value = brute_force_min_cut(net)
        flow, _ = max_flow(net)
        reports.append(
            OracleReport(
                {"kind": "min-cut", "trial": k, "n_nodes": n, "seed": seed},
                oracle_value,
                flow,
                True,
            )
        )
    return reports
