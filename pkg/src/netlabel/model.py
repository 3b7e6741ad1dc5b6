"""Joint binary labeling model over a network of items.

A network instance couples per-item sparse indicator features with
7-component nonnegative relational features on item pairs. A category model
scores a full +/-1 labeling as

    sum_i y_i * <phi(x_i), theta_node>
    + sum_(i,j) [y_i == y_j] * <phi(x_i, x_j), theta_edge>

With nonnegative edge features and nonnegative edge weights, every pairwise
term is supermodular, so the exact argmax is found by a single s-t min cut.

Cut construction (for unaries w_i and agreement weights w_ij >= 0): minimize
the equivalent disagreement energy with node terms +/-w_i by adding an arc
source->i with capacity 2*w_i when w_i > 0, an arc i->sink with capacity
2*|w_i| when w_i < 0, and the residual pair i<->j with capacity w_ij per
direction for every edge. Nodes reachable from the source in the final
residual graph are labeled +1; ties therefore fall to -1 (a node with zero
unary and no edges has no arcs at all).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .maxflow import CAPACITY_EPS, FlowNetwork, max_flow

__all__ = [
    "N_EDGE_FEATURES",
    "EDGE_PROPERTIES",
    "DimensionMismatchError",
    "SupermodularityError",
    "as_labeling",
    "CategoryModel",
    "InstanceGraph",
    "joint_score",
    "map_infer",
    "map_infer_augmented",
    "map_infer_conditioned",
    "save_graph",
    "load_graph",
]

N_EDGE_FEATURES = 7

# Order of the relational pair properties; edge feature column c holds
# property EDGE_PROPERTIES[c].
EDGE_PROPERTIES = (
    "shared_tags",
    "shared_groups",
    "shared_sets",
    "shared_galleries",
    "same_location",
    "same_user",
    "contact",
)

GRAPH_FORMAT_VERSION = 1


class DimensionMismatchError(ValueError):
    """Model, graph, or labeling dimensions disagree."""


class SupermodularityError(ValueError):
    """Negative edge parameters or features: the min-cut reduction is invalid."""


def as_labeling(values, node_count: int | None = None) -> np.ndarray:
    """Validate and return a +/-1 labeling as an int8 array."""
    y = np.asarray(values)
    if y.ndim != 1:
        raise DimensionMismatchError(f"labeling must be 1-d, got shape {y.shape}")
    if node_count is not None and y.shape[0] != node_count:
        raise DimensionMismatchError(
            f"labeling has {y.shape[0]} entries for {node_count} nodes"
        )
    y = y.astype(np.int8, copy=False)
    if y.size and not np.all(np.abs(y) == 1):
        bad = y[np.abs(y) != 1][0]
        raise ValueError(f"labeling entries must be -1 or +1, found {bad}")
    return y


@dataclass(frozen=True)
class CategoryModel:
    """Learned parameters for one category: node weights plus the 7
    nonnegative relational edge weights."""

    category_id: str
    theta_node: np.ndarray
    theta_edge: np.ndarray

    def __post_init__(self):
        tn = np.asarray(self.theta_node, dtype=np.float64).ravel()
        te = np.asarray(self.theta_edge, dtype=np.float64).ravel()
        if te.shape[0] != N_EDGE_FEATURES:
            raise DimensionMismatchError(
                f"theta_edge must have {N_EDGE_FEATURES} components, got {te.shape[0]}"
            )
        if te.size and te.min() < 0.0:
            raise SupermodularityError(
                f"theta_edge must be componentwise nonnegative, min is {te.min()}"
            )
        object.__setattr__(self, "theta_node", tn)
        object.__setattr__(self, "theta_edge", te)

    @property
    def node_dim(self) -> int:
        return int(self.theta_node.shape[0])


def _as_csr(node_features, n_nodes: int) -> sp.csr_matrix:
    x = sp.csr_matrix(node_features, dtype=np.float64)
    if x.shape[0] != n_nodes:
        raise DimensionMismatchError(
            f"feature matrix has {x.shape[0]} rows for {n_nodes} nodes"
        )
    return x


@dataclass(frozen=True)
class InstanceGraph:
    """The scored object: items with sparse nonnegative indicator features and
    undirected relational edges with 7-component nonnegative feature vectors.

    Edges are canonicalized to i < j, sorted, and deduplicated checks are
    enforced at construction; all features must be nonnegative (the
    supermodularity precondition).
    """

    node_ids: tuple[str, ...]
    node_features: sp.csr_matrix
    edge_index: np.ndarray = field(default=None)  # (m, 2) int64, i < j
    edge_features: np.ndarray = field(default=None)  # (m, 7) float64

    def __post_init__(self):
        ids = tuple(str(i) for i in self.node_ids)
        if len(set(ids)) != len(ids):
            raise ValueError("node ids must be unique")
        n = len(ids)
        x = _as_csr(self.node_features, n)
        if x.nnz and x.data.min() < 0.0:
            raise SupermodularityError("node features must be nonnegative")
        ei = self.edge_index
        ef = self.edge_features
        if ei is None:
            ei = np.empty((0, 2), dtype=np.int64)
        if ef is None:
            ef = np.empty((0, N_EDGE_FEATURES), dtype=np.float64)
        ei = np.asarray(ei, dtype=np.int64).reshape(-1, 2)
        ef = np.asarray(ef, dtype=np.float64).reshape(-1, N_EDGE_FEATURES)
        if ei.shape[0] != ef.shape[0]:
            raise DimensionMismatchError(
                f"{ei.shape[0]} edges but {ef.shape[0]} edge feature rows"
            )
        if ei.size:
            if ei.min() < 0 or ei.max() >= n:
                raise ValueError("edge endpoints out of range")
            if np.any(ei[:, 0] == ei[:, 1]):
                raise ValueError("self edges are not allowed")
            lo = np.minimum(ei[:, 0], ei[:, 1])
            hi = np.maximum(ei[:, 0], ei[:, 1])
            ei = np.stack([lo, hi], axis=1)
            order = np.lexsort((ei[:, 1], ei[:, 0]))
            ei = ei[order]
            ef = ef[order]
            if np.any((np.diff(ei[:, 0]) == 0) & (np.diff(ei[:, 1]) == 0)):
                raise ValueError("duplicate edge for an unordered pair")
            if ef.size and ef.min() < 0.0:
                raise SupermodularityError("edge features must be nonnegative")
        object.__setattr__(self, "node_ids", ids)
        object.__setattr__(self, "node_features", x)
        object.__setattr__(self, "edge_index", ei)
        object.__setattr__(self, "edge_features", ef)

    @property
    def node_count(self) -> int:
        return len(self.node_ids)

    @property
    def edge_count(self) -> int:
        return int(self.edge_index.shape[0])

    @property
    def feature_dim(self) -> int:
        return int(self.node_features.shape[1])

    def unary_scores(self, model: CategoryModel) -> np.ndarray:
        if model.node_dim != self.feature_dim:
            raise DimensionMismatchError(
                f"theta_node has {model.node_dim} components for "
                f"feature dimension {self.feature_dim}"
            )
        return np.asarray(self.node_features @ model.theta_node).ravel()

    def edge_weights(self, model: CategoryModel) -> np.ndarray:
        w = self.edge_features @ model.theta_edge
        if w.size and w.min() < -CAPACITY_EPS:
            raise SupermodularityError("negative pairwise weight encountered")
        return np.maximum(w, 0.0)

    def without_edges(self) -> "InstanceGraph":
        return InstanceGraph(self.node_ids, self.node_features)

    def subgraph(self, indices) -> "InstanceGraph":
        """Induced subgraph over ``indices`` (kept in the given order)."""
        idx = np.asarray(indices, dtype=np.int64)
        if idx.size and (idx.min() < 0 or idx.max() >= self.node_count):
            raise ValueError("subgraph indices out of range")
        remap = -np.ones(self.node_count, dtype=np.int64)
        remap[idx] = np.arange(idx.size)
        keep_ids = tuple(self.node_ids[i] for i in idx)
        x = self.node_features[idx]
        if self.edge_count:
            a = remap[self.edge_index[:, 0]]
            b = remap[self.edge_index[:, 1]]
            keep = (a >= 0) & (b >= 0)
            ei = np.stack([a[keep], b[keep]], axis=1)
            ef = self.edge_features[keep]
        else:
            ei, ef = None, None
        return InstanceGraph(keep_ids, x, ei, ef)

    def mask_feature_columns(self, active_columns) -> "InstanceGraph":
        """Graph with node features restricted to ``active_columns`` (other
        columns zeroed; dimension preserved)."""
        mask = np.zeros(self.feature_dim, dtype=bool)
        mask[np.asarray(active_columns, dtype=np.int64)] = True
        diag = sp.diags(mask.astype(np.float64))
        x = (self.node_features @ diag).tocsr()
        x.eliminate_zeros()
        return InstanceGraph(self.node_ids, x, self.edge_index, self.edge_features)


def joint_score(graph: InstanceGraph, model: CategoryModel, labeling) -> float:
    """Exact objective value of a labeling; linear in the parameters."""
    y = as_labeling(labeling, graph.node_count)
    w = graph.unary_scores(model)
    total = float(w @ y)
    if graph.edge_count:
        ew = graph.edge_features @ model.theta_edge
        agree = y[graph.edge_index[:, 0]] == y[graph.edge_index[:, 1]]
        total += float(ew[agree].sum())
    return total


def _solve_cut(graph: InstanceGraph, unaries: np.ndarray, edge_w: np.ndarray) -> np.ndarray:
    net = FlowNetwork(graph.node_count)
    pos = unaries > 0.0
    neg = unaries < 0.0
    nodes = np.arange(graph.node_count, dtype=np.int64)
    net.add_source_arcs(nodes[pos], 2.0 * unaries[pos])
    net.add_sink_arcs(nodes[neg], -2.0 * unaries[neg])
    if graph.edge_count:
        net.add_arcs(
            graph.edge_index[:, 0], graph.edge_index[:, 1], edge_w, rev_caps=edge_w
        )
    _, side = max_flow(net)
    labels = np.where(side, 1, -1).astype(np.int8)
    return labels


def map_infer(graph: InstanceGraph, model: CategoryModel) -> np.ndarray:
    """Exact argmax labeling via the min-cut reduction.

    Requires nonnegative edge parameters (checked); among co-optimal
    labelings, returns the one where exactly the residual-reachable nodes are
    +1.
    """
    w = graph.unary_scores(model)
    ew = graph.edge_weights(model)
    return _solve_cut(graph, w, ew)


def map_infer_augmented(
    graph: InstanceGraph, model: CategoryModel, per_node_bias
) -> np.ndarray:
    """Exact argmax of the joint score plus a node-decomposable additive term.

    ``per_node_bias`` holds one (reward_minus, reward_plus) pair per node: the
    additive reward collected when the node is labeled -1 / +1. The pair is
    folded into the unary (constant offsets do not move the argmax).
    """
    bias = np.asarray(per_node_bias, dtype=np.float64)
    if bias.shape != (graph.node_count, 2):
        raise DimensionMismatchError(
            f"bias must have shape ({graph.node_count}, 2), got {bias.shape}"
        )
    w = graph.unary_scores(model) + 0.5 * (bias[:, 1] - bias[:, 0])
    ew = graph.edge_weights(model)
    return _solve_cut(graph, w, ew)


def map_infer_conditioned(
    graph: InstanceGraph,
    model: CategoryModel,
    observed_idx,
    observed_labels,
) -> np.ndarray:
    """MAP labeling with a subset of nodes clamped to known labels.

    Clamping uses a bias larger than any achievable score change from
    flipping a single node, so every optimum agrees with the observations;
    the remaining nodes get the conditional MAP.
    """
    idx = np.asarray(observed_idx, dtype=np.int64)
    obs = as_labeling(observed_labels, idx.shape[0])
    w = graph.unary_scores(model)
    ew = graph.edge_weights(model)
    clamp = 1.0 + 2.0 * (np.abs(w).sum() + ew.sum())
    bias = np.zeros((graph.node_count, 2))
    bias[idx[obs == 1], 1] = clamp
    bias[idx[obs == -1], 0] = clamp
    return map_infer_augmented(graph, model, bias)


# -- graph artifact --------------------------------------------------------


def save_graph(path, graph: InstanceGraph) -> None:
    x = graph.node_features.tocsr()
    rows = []
    for i in range(graph.node_count):
        lo, hi = x.indptr[i], x.indptr[i + 1]
        rows.append(
            [[int(j), float(v)] for j, v in zip(x.indices[lo:hi], x.data[lo:hi])]
        )
    payload = {
        "format_version": GRAPH_FORMAT_VERSION,
        "kind": "instance-graph",
        "feature_dim": graph.feature_dim,
        "node_ids": list(graph.node_ids),
        "node_features": rows,
        "edges": [
            [int(a), int(b)] + [float(v) for v in f]
            for (a, b), f in zip(graph.edge_index, graph.edge_features)
        ],
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh)
        fh.write("\n")


def load_graph(path) -> InstanceGraph:
    with open(path, encoding="utf-8") as fh:
        payload = json.load(fh)
    if payload.get("kind") != "instance-graph":
        raise ValueError(f"{path}: not an instance-graph file")
    if payload.get("format_version") != GRAPH_FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported format_version")
    n = len(payload["node_ids"])
    dim = int(payload["feature_dim"])
    indptr = [0]
    indices: list[int] = []
    data: list[float] = []
    for row in payload["node_features"]:
        for j, v in row:
            indices.append(j)
            data.append(v)
        indptr.append(len(indices))
    x = sp.csr_matrix(
        (np.asarray(data), np.asarray(indices, dtype=np.int64), np.asarray(indptr)),
        shape=(n, dim),
    )
    edges = payload["edges"]
    if edges:
        arr = np.asarray(edges, dtype=np.float64)
        ei = arr[:, :2].astype(np.int64)
        ef = arr[:, 2:]
    else:
        ei, ef = None, None
    return InstanceGraph(tuple(payload["node_ids"]), x, ei, ef)
