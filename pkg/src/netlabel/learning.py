"""Max-margin structured training of category models.

The estimator minimizes ``xi + lambda * ||Theta||^2`` subject to one margin
constraint per candidate labeling Y:

    <Phi(X, Y_true) - Phi(X, Y), Theta>  >=  loss(Y, Y_true) - xi,

with the edge block of Theta constrained nonnegative throughout so that
inference stays a single min cut. Constraints are generated one per
iteration by loss-augmented inference (the balanced error rate decomposes
over nodes, so the augmented argmax is the same cut problem with shifted
unaries), and the restricted master problem is solved on its dual by
pairwise coordinate ascent with the edge block clipped to the nonnegative
orthant during primal reconstruction.

Traces record the incumbent dual lower bound (nondecreasing by
construction: the dual is warm started and only ascends) and the best
primal upper bound seen; training stops when the relative gap drops below
the configured epsilon.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

from . import features as ft
from .data import atomic_write_text
from .model import (
    CategoryModel,
    InstanceGraph,
    N_EDGE_FEATURES,
    as_labeling,
    joint_score,
    map_infer,
    map_infer_augmented,
    map_infer_conditioned,
)

__all__ = [
    "MODES",
    "LAMBDA_GRID",
    "DegenerateCategoryError",
    "QPSolverError",
    "TrainConfig",
    "CuttingPlaneState",
    "TraceRow",
    "TrainResult",
    "ber_loss",
    "ber_biases",
    "aggregate_features",
    "loss_augmented_argmax",
    "restricted_qp_solve",
    "train_category",
    "train_flat",
    "train_model",
    "select_lambda",
    "predict_labels",
    "apply_mode",
    "trace_to_csv",
    "save_model",
    "load_model",
]

MODES = ("graphical", "flat-tags-only", "flat-all-features")
FLAT_MODES = ("flat-tags-only", "flat-all-features")

# Held-out regularization grid (logarithmic, 1e-4 .. 1e+1).
LAMBDA_GRID = (1e-4, 1e-3, 1e-2, 1e-1, 1.0, 10.0)

MODEL_FORMAT_VERSION = 1

_QP_GAP_TOL = 1e-8
_QP_MAX_STEPS = 500_000


class DegenerateCategoryError(ValueError):
    """Truth is all-positive or all-negative: the balanced loss is undefined."""


class QPSolverError(RuntimeError):
    """Restricted master solve failed; carries the iteration trace."""

    def __init__(self, message: str, trace=None):
        super().__init__(message)
        self.trace = trace or []


@dataclass(frozen=True)
class TrainConfig:
    """Knobs of one training run."""

    reg_lambda: float = 0.01
    epsilon: float = 1e-3
    max_iterations: int = 200
    mode: str = "graphical"

    def __post_init__(self):
        if self.reg_lambda <= 0:
            raise ValueError("reg_lambda must be > 0")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be > 0")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")


# -- loss ------------------------------------------------------------------


def ber_loss(pred, truth) -> float:
    """Balanced error rate: mean of the false positive and false negative
    rates. 0 for perfect predictions, 0.5 for constant or random ones, 1 for
    the complement of the truth."""
    p = as_labeling(pred)
    t = as_labeling(truth, p.shape[0])
    pos = t == 1
    n_pos = int(pos.sum())
    n_neg = t.shape[0] - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DegenerateCategoryError(
            "truth needs at least one positive and one negative"
        )
    fp = int(np.count_nonzero((p == 1) & ~pos))
    fn = int(np.count_nonzero((p == -1) & pos))
    return 0.5 * (fp / n_neg + fn / n_pos)


def ber_biases(truth) -> np.ndarray:
    """Per-node additive rewards whose sum over any labeling equals its
    balanced error rate: a true positive pays 1/(2 n_pos) when labeled -1,
    a true negative pays 1/(2 n_neg) when labeled +1."""
    t = as_labeling(truth)
    pos = t == 1
    n_pos = int(pos.sum())
    n_neg = t.shape[0] - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DegenerateCategoryError(
            "truth needs at least one positive and one negative"
        )
    bias = np.zeros((t.shape[0], 2))
    bias[pos, 0] = 1.0 / (2.0 * n_pos)
    bias[~pos, 1] = 1.0 / (2.0 * n_neg)
    return bias


def aggregate_features(graph: InstanceGraph, labeling) -> np.ndarray:
    """Joint feature map: signed sum of node features stacked on the sum of
    edge features over agreeing pairs; satisfies
    ``joint_score == <aggregate_features, (theta_node; theta_edge)>``."""
    y = as_labeling(labeling, graph.node_count)
    node_block = np.asarray(
        graph.node_features.T @ y.astype(np.float64)
    ).ravel()
    edge_block = np.zeros(N_EDGE_FEATURES)
    if graph.edge_count:
        agree = y[graph.edge_index[:, 0]] == y[graph.edge_index[:, 1]]
        edge_block = graph.edge_features[agree].sum(axis=0)
    return np.concatenate([node_block, edge_block])


def loss_augmented_argmax(
    graph: InstanceGraph, model: CategoryModel, truth
) -> tuple[np.ndarray, float]:
    """Most violating labeling: exact argmax of score(Y) + loss(Y, truth),
    returned with its objective value."""
    t = as_labeling(truth, graph.node_count)
    yhat = map_infer_augmented(graph, model, ber_biases(t))
    value = joint_score(graph, model, yhat) + ber_loss(yhat, t)
    return yhat, value


# -- restricted master problem ----------------------------------------------


@dataclass
class CuttingPlaneState:
    """Accumulated constraints of the restricted master problem plus the
    current primal/dual state. The constraint matrix rows are aggregate
    feature differences (node block first, edge block last)."""

    node_dim: int
    constraints: np.ndarray
    losses: np.ndarray
    alpha: np.ndarray
    theta: np.ndarray
    xi: float = 0.0
    lower_bound: float = 0.0
    upper_bound: float = float("inf")
    gram: np.ndarray = field(default=None, repr=False)

    @classmethod
    def empty(cls, feature_dim: int, node_dim: int) -> "CuttingPlaneState":
        return cls(
            node_dim=node_dim,
            constraints=np.zeros((0, feature_dim)),
            losses=np.zeros(0),
            alpha=np.zeros(0),
            theta=np.zeros(feature_dim),
            gram=np.zeros((0, 0)),
        )

    @property
    def feature_dim(self) -> int:
        return int(self.constraints.shape[1])

    @property
    def constraint_count(self) -> int:
        return int(self.constraints.shape[0])

    def add_constraint(self, a: np.ndarray, loss: float) -> None:
        a = np.asarray(a, dtype=np.float64).ravel()
        if a.shape[0] != self.feature_dim:
            raise ValueError("constraint dimension mismatch")
        an = a[: self.node_dim]
        row = self.constraints[:, : self.node_dim] @ an
        k = self.constraint_count
        gram = np.empty((k + 1, k + 1))
        gram[:k, :k] = self.gram
        gram[k, :k] = row
        gram[:k, k] = row
        gram[k, k] = float(an @ an)
        self.gram = gram
        self.constraints = np.vstack([self.constraints, a[None, :]])
        self.losses = np.append(self.losses, float(loss))
        self.alpha = np.append(self.alpha, 0.0)


def _line_search_root(dbb, dw0, dnn, d_e, v_e, t_max, lam):
    """Exact maximizer of the dual along one exchange direction.

    The derivative is piecewise linear and nonincreasing in t; breakpoints
    come from edge components crossing zero under the clip.
    """

    def deriv(t):
        edge = np.maximum(v_e + t * d_e, 0.0)
        return dbb - (dw0 + t * dnn + float(d_e @ edge)) / (2.0 * lam)

    if deriv(t_max) >= 0.0:
        return t_max
    ts = [0.0]
    for c in range(d_e.shape[0]):
        if d_e[c] != 0.0:
            tc = -v_e[c] / d_e[c]
            if 0.0 < tc < t_max:
                ts.append(tc)
    ts.append(t_max)
    ts = sorted(set(ts))
    prev_t = ts[0]
    prev_g = deriv(prev_t)
    if prev_g <= 0.0:
        return 0.0
    for t in ts[1:]:
        g = deriv(t)
        if g < 0.0:
            if prev_g - g <= 0.0:
                return t
            return prev_t + prev_g * (t - prev_t) / (prev_g - g)
        prev_t, prev_g = t, g
    return t_max


def restricted_qp_solve(
    state: CuttingPlaneState, reg_lambda: float
) -> tuple[np.ndarray, float]:
    """Solve the restricted master problem on its dual.

    Pairwise coordinate ascent over the simplex ``sum(alpha) <= 1``,
    ``alpha >= 0`` (the unused mass is the slack of the implicit zero
    constraint), with second-order working-set selection: the donor
    coordinate maximizes gain^2 / curvature against the best receiver,
    which keeps ill-conditioned constraint sets from zigzagging. The edge
    block of the primal is reconstructed through a clip onto the
    nonnegative orthant, which solves the edge-nonnegativity constraint
    exactly.

    Runs toward a 1e-8 duality gap; if ascent stagnates at machine
    precision first, the current dual point is accepted (it is feasible,
    so the reported bound is still a valid lower bound). Warm starts from
    ``state.alpha``; updates ``state.theta / xi / alpha / lower_bound``
    and returns ``(theta, xi)``.
    """
    k = state.constraint_count
    if k == 0:
        raise ValueError("restricted_qp_solve needs at least one constraint")
    lam = float(reg_lambda)
    if lam <= 0:
        raise ValueError("reg_lambda must be > 0")
    nd = state.node_dim
    a_node = state.constraints[:, :nd]
    a_edge = state.constraints[:, nd:]
    b = state.losses
    gram = state.gram
    gram_diag = np.diag(gram).copy()
    edge_sq = np.einsum("ij,ij->i", a_edge, a_edge)

    alpha = state.alpha.copy()
    w = gram @ alpha
    v_e = a_edge.T @ alpha

    def snapshot():
        theta_e = np.maximum(v_e, 0.0) / (2.0 * lam)
        grad = b - (w / (2.0 * lam) + a_edge @ theta_e)
        xi = max(0.0, float(grad.max()))
        snn = float(alpha @ w)
        see = float(np.maximum(v_e, 0.0) @ np.maximum(v_e, 0.0))
        primal = xi + (snn + see) / (4.0 * lam)
        dual = float(alpha @ b) - (snn + see) / (4.0 * lam)
        return grad, xi, primal, dual

    gap_history = []
    steps = 0
    step_cap = min(_QP_MAX_STEPS, max(5000, 100 * k))
    best_dual = -np.inf
    stagnant_checks = 0
    while True:
        if steps % 64 == 0:
            w = gram @ alpha  # resync against drift
            v_e = a_edge.T @ alpha
            grad, xi, primal, dual = snapshot()
            if not np.isfinite(primal) or not np.isfinite(dual):
                raise QPSolverError(
                    "non-finite objective in restricted master", trace=gap_history
                )
            gap_history.append((steps, primal, dual))
            if primal - dual <= _QP_GAP_TOL * max(1.0, abs(primal)):
                break
            if dual - best_dual <= 1e-12 * max(1.0, abs(dual)):
                stagnant_checks += 1
                if stagnant_checks >= 3:
                    break  # machine-precision stagnation: accept the bound
            else:
                stagnant_checks = 0
            best_dual = max(best_dual, dual)
            if steps >= step_cap:
                break  # warm starts resume the ascent next call
        else:
            theta_e = np.maximum(v_e, 0.0) / (2.0 * lam)
            grad = b - (w / (2.0 * lam) + a_edge @ theta_e)

        slack = 1.0 - float(alpha.sum())
        i = int(np.argmax(grad))
        gi = float(grad[i])
        i_slack = gi < 0.0  # the zero constraint beats every real one
        gi_eff = 0.0 if i_slack else gi

        # Donor candidates: supported constraints, plus the slack mass.
        support = alpha > 0.0
        gains = np.where(support, gi_eff - grad, -np.inf)
        if i_slack:
            curv = (gram_diag + edge_sq) / (2.0 * lam)
        else:
            curv = (
                gram_diag
                - 2.0 * gram[i]
                + gram_diag[i]
                + edge_sq
                - 2.0 * (a_edge @ a_edge[i])
                + edge_sq[i]
            ) / (2.0 * lam)
        scores = np.where(gains > 0.0, gains * gains / np.maximum(curv, 1e-300), -np.inf)
        j = int(np.argmax(scores))
        use_j = np.isfinite(scores[j]) and gains[j] > 1e-14
        slack_gain = gi_eff
        j_slack = (not i_slack) and slack > 1e-15 and slack_gain > 1e-14
        if j_slack and use_j:
            slack_curv = (gram_diag[i] + edge_sq[i]) / (2.0 * lam)
            slack_score = slack_gain * slack_gain / max(slack_curv, 1e-300)
            if scores[j] >= slack_score:
                j_slack = False
        if not j_slack and not use_j:
            grad, xi, primal, dual = snapshot()
            gap_history.append((steps, primal, dual))
            break

        if i_slack:
            dbb, dw0, dnn = -float(b[j]), -float(w[j]), float(gram[j, j])
            d_e = -a_edge[j]
            t_max = float(alpha[j])
        elif j_slack:
            dbb, dw0, dnn = float(b[i]), float(w[i]), float(gram[i, i])
            d_e = a_edge[i].copy()
            t_max = slack
        else:
            dbb = float(b[i] - b[j])
            dw0 = float(w[i] - w[j])
            dnn = float(gram[i, i] - 2.0 * gram[i, j] + gram[j, j])
            d_e = a_edge[i] - a_edge[j]
            t_max = float(alpha[j])

        t = _line_search_root(dbb, dw0, dnn, d_e, v_e, t_max, lam)
        if t > 0.0:
            if not i_slack:
                alpha[i] += t
                w += t * gram[:, i]
            if not j_slack:
                alpha[j] -= t
                if alpha[j] < 0.0:
                    alpha[j] = 0.0
                w -= t * gram[:, j]
            v_e += t * d_e
        steps += 1

    # Exact primal reconstruction from the final dual point.
    v_n = a_node.T @ alpha
    v_e = a_edge.T @ alpha
    theta = np.concatenate([v_n, np.maximum(v_e, 0.0)]) / (2.0 * lam)
    resid = b - state.constraints @ theta
    xi = max(0.0, float(resid.max()))
    snn = float(v_n @ v_n)
    see = float(np.maximum(v_e, 0.0) @ np.maximum(v_e, 0.0))
    dual = float(alpha @ b) - (snn + see) / (4.0 * lam)

    state.alpha = alpha
    state.theta = theta
    state.xi = xi
    state.lower_bound = dual
    return theta, xi


# -- cutting-plane loop ------------------------------------------------------


@dataclass(frozen=True)
class TraceRow:
    iteration: int
    lower_bound: float
    upper_bound: float
    violation: float
    train_ber: float
    min_theta_edge: float
    relative_gap: float


@dataclass(frozen=True)
class TrainResult:
    model: CategoryModel
    converged: bool
    iterations: int
    trace: tuple[TraceRow, ...]
    state: CuttingPlaneState

    @property
    def final_gap(self) -> float:
        return self.trace[-1].relative_gap if self.trace else float("inf")


def trace_to_csv(trace) -> str:
    lines = ["iteration,lower_bound,upper_bound,violation,train_ber,min_theta_edge"]
    for row in trace:
        lines.append(
            f"{row.iteration},{row.lower_bound!r},{row.upper_bound!r},"
            f"{row.violation!r},{row.train_ber!r},{row.min_theta_edge!r}"
        )
    return "\n".join(lines) + "\n"


def _model_from_theta(category_id: str, theta: np.ndarray, node_dim: int) -> CategoryModel:
    return CategoryModel(category_id, theta[:node_dim], theta[node_dim:])


def _cutting_plane(
    graph: InstanceGraph, truth, config: TrainConfig, category_id: str
) -> TrainResult:
    t = as_labeling(truth, graph.node_count)
    n_pos = int(np.count_nonzero(t == 1))
    if n_pos == 0 or n_pos == t.shape[0]:
        raise DegenerateCategoryError(
            f"category {category_id!r}: truth is single-class on this split"
        )
    nd = graph.feature_dim
    state = CuttingPlaneState.empty(nd + N_EDGE_FEATURES, nd)
    phi_true = aggregate_features(graph, t)
    lam = config.reg_lambda

    theta = state.theta
    lower_incumbent = 0.0  # alpha = 0 is dual feasible with value 0
    upper_best = float("inf")
    trace: list[TraceRow] = []
    converged = False
    for iteration in range(1, config.max_iterations + 1):
        model = _model_from_theta(category_id, theta, nd)
        yhat, aug_value = loss_augmented_argmax(graph, model, t)
        violation = aug_value - joint_score(graph, model, t)
        upper = violation + lam * float(theta @ theta)
        upper_best = min(upper_best, upper)

        state.add_constraint(phi_true - aggregate_features(graph, yhat), ber_loss(yhat, t))
        theta, _ = restricted_qp_solve(state, lam)
        lower_incumbent = max(lower_incumbent, state.lower_bound)
        state.upper_bound = upper_best

        min_edge = float(theta[nd:].min())
        if min_edge < 0.0:
            raise AssertionError("edge parameters left the nonnegative orthant")
        current = _model_from_theta(category_id, theta, nd)
        train_ber = ber_loss(map_infer(graph, current), t)
        gap = upper_best - lower_incumbent
        rel = gap / max(1.0, abs(upper_best))
        trace.append(
            TraceRow(iteration, lower_incumbent, upper_best, violation, train_ber, min_edge, rel)
        )
        if rel <= config.epsilon:
            converged = True
            break

    model = _model_from_theta(category_id, theta, nd)
    return TrainResult(model, converged, len(trace), tuple(trace), state)


def apply_mode(
    graph: InstanceGraph, vocab, mode: str
) -> InstanceGraph:
    """Restrict a graph to the node-feature families a mode may use and drop
    edges for flat modes. With no vocabulary the features are left as-is."""
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    g = graph
    if vocab is not None:
        if mode == "graphical":
            families = ft.CORE_FAMILIES
        elif mode == "flat-tags-only":
            families = (ft.TAG,)
        else:  # flat-all-features
            families = tuple(vocab.families)
        g = g.mask_feature_columns(vocab.family_columns(families))
    if mode in FLAT_MODES:
        g = g.without_edges()
    return g


def train_category(
    graph: InstanceGraph,
    truth,
    config: TrainConfig,
    category_id: str = "category",
    vocab=None,
) -> TrainResult:
    """Train the joint (graphical) model by constraint generation."""
    if config.mode != "graphical":
        raise ValueError("train_category trains the graphical mode")
    return _cutting_plane(
        apply_mode(graph, vocab, "graphical"), truth, config, category_id
    )


def train_flat(
    graph: InstanceGraph,
    truth,
    config: TrainConfig,
    category_id: str = "category",
    vocab=None,
) -> TrainResult:
    """Train a flat baseline: identical machinery with the edge set emptied.

    ``flat-tags-only`` restricts node features to the tag family;
    ``flat-all-features`` additionally uses the categorical indicator
    families for sets, galleries, locations, and users.
    """
    if config.mode not in FLAT_MODES:
        raise ValueError(f"train_flat needs a flat mode, got {config.mode!r}")
    return _cutting_plane(
        apply_mode(graph, vocab, config.mode), truth, config, category_id
    )


def train_model(
    graph: InstanceGraph,
    truth,
    config: TrainConfig,
    category_id: str = "category",
    vocab=None,
) -> TrainResult:
    if config.mode == "graphical":
        return train_category(graph, truth, config, category_id, vocab)
    return train_flat(graph, truth, config, category_id, vocab)


def predict_labels(
    graph: InstanceGraph,
    model: CategoryModel,
    mode: str,
    clamp_idx=None,
    clamp_labels=None,
) -> tuple[np.ndarray, np.ndarray]:
    """First-order scores plus predicted labels for every node.

    Flat modes threshold the per-node score at zero (ties to -1). The
    graphical mode runs joint MAP inference, conditioning on clamped nodes
    when given (transductive use: clamp the training nodes to their known
    labels so relational structure can carry them to the rest).
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    scores = graph.unary_scores(model)
    if mode in FLAT_MODES:
        labels = np.where(scores > 0.0, 1, -1).astype(np.int8)
    elif clamp_idx is not None and len(clamp_idx):
        labels = map_infer_conditioned(graph, model, clamp_idx, clamp_labels)
    else:
        labels = map_infer(graph, model)
    return scores, labels


def select_lambda(
    graph: InstanceGraph,
    truth,
    config: TrainConfig,
    category_id: str = "category",
    vocab=None,
    grid=LAMBDA_GRID,
    holdout_fraction: float = 0.2,
    seed: int = 0,
) -> tuple[float, list[dict]]:
    """Pick the regularizer on a held-out slice of the training nodes.

    The holdout is stratified so both classes appear on both sides; each grid
    value trains on the remainder and is scored by balanced error on the
    holdout (graphical models predict with the fit nodes clamped). Ties go to
    the earliest grid entry.
    """
    t = as_labeling(truth, graph.node_count)
    rng = np.random.default_rng(seed)
    pos_idx = np.flatnonzero(t == 1)
    neg_idx = np.flatnonzero(t == -1)
    if pos_idx.size < 2 or neg_idx.size < 2:
        raise DegenerateCategoryError(
            "need two examples of each class to hold out a validation slice"
        )
    hold = []
    fit = []
    for idx in (pos_idx, neg_idx):
        perm = idx[rng.permutation(idx.size)]
        k = max(1, int(round(holdout_fraction * idx.size)))
        k = min(k, idx.size - 1)
        hold.append(perm[:k])
        fit.append(perm[k:])
    hold_idx = np.sort(np.concatenate(hold))
    fit_idx = np.sort(np.concatenate(fit))

    moded = apply_mode(graph, vocab, config.mode)
    table = []
    best_lambda, best_ber = None, float("inf")
    for lam in grid:
        cfg = replace(config, reg_lambda=float(lam))
        result = _cutting_plane(
            moded.subgraph(fit_idx), t[fit_idx], cfg, category_id
        )
        if config.mode == "graphical":
            _, pred = predict_labels(
                moded, result.model, config.mode, fit_idx, t[fit_idx]
            )
        else:
            _, pred = predict_labels(moded, result.model, config.mode)
        ber = ber_loss(pred[hold_idx], t[hold_idx])
        table.append(
            {"reg_lambda": float(lam), "holdout_ber": ber, "converged": result.converged}
        )
        if ber < best_ber - 1e-12:
            best_lambda, best_ber = float(lam), ber
    return best_lambda, table


# -- model files -------------------------------------------------------------


def save_model(path, model: CategoryModel, vocab=None, meta: dict | None = None) -> None:
    payload = {
        "format_version": MODEL_FORMAT_VERSION,
        "kind": "category-model",
        "category_id": model.category_id,
        "theta_node": [float(v) for v in model.theta_node],
        "theta_edge": [float(v) for v in model.theta_edge],
        "vocabulary": vocab.to_json_dict() if vocab is not None else None,
        "meta": meta or {},
    }
    atomic_write_text(path, json.dumps(payload) + "\n")


def load_model(path) -> tuple[CategoryModel, "ft.Vocabulary | None", dict]:
    with open(path, encoding="utf-8") as fh:
        payload = json.load(fh)
    if payload.get("kind") != "category-model":
        raise ValueError(f"{path}: not a category-model file")
    if payload.get("format_version") != MODEL_FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported format_version")
    model = CategoryModel(
        payload["category_id"],
        np.asarray(payload["theta_node"], dtype=np.float64),
        np.asarray(payload["theta_edge"], dtype=np.float64),
    )
    vocab = None
    if payload.get("vocabulary") is not None:
        vocab = ft.Vocabulary.from_json_dict(payload["vocabulary"])
    return model, vocab, payload.get("meta", {})
