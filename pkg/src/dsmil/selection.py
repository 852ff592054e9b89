"""EM-trained proposal selection.

An estimator scores how likely each proposal is to be a *key* proposal
(one that determines the image label); a predictor scores each proposal
per class. They supervise each other: the E-step turns predictor scores
into keyness labels for the estimator, the M-step turns keyness into class
labels for the predictor. Both labelings are gated by image-level labels.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .numerics import ShapeError, Tensor

PHASE_E = "E"
PHASE_M = "M"
PHASE_JOINT = "joint"
# keyness differences this small count as ties against the bag mean, so
# values that are equal in decimal but round differently are not split
TIE_TOL = 1e-12


@dataclass
class SelectionParams:
    est_w: Tensor
    est_b: Tensor
    pred_w: Tensor
    pred_b: Tensor
    est_hidden: tuple[Tensor, Tensor] | None = None
    pred_hidden: tuple[Tensor, Tensor] | None = None

    @classmethod
    def init(cls, rng: np.random.Generator, feature_dim: int, num_classes: int, hidden: int = 0) -> "SelectionParams":
        est_hidden = pred_hidden = None
        width = feature_dim
        if hidden:
            est_hidden = (nx.glorot(rng, feature_dim, hidden, "sel.est_h_w"), nx.zeros_param(1, hidden, "sel.est_h_b"))
            pred_hidden = (nx.glorot(rng, feature_dim, hidden, "sel.pred_h_w"), nx.zeros_param(1, hidden, "sel.pred_h_b"))
            width = hidden
        return cls(
            est_w=nx.glorot(rng, width, 1, "sel.est_w"),
            est_b=nx.zeros_param(1, 1, "sel.est_b"),
            pred_w=nx.glorot(rng, width, num_classes, "sel.pred_w"),
            pred_b=nx.zeros_param(1, num_classes, "sel.pred_b"),
            est_hidden=est_hidden,
            pred_hidden=pred_hidden,
        )

    def estimator_tensors(self) -> list[Tensor]:
        return [*(self.est_hidden or ()), self.est_w, self.est_b]

    def predictor_tensors(self) -> list[Tensor]:
        return [*(self.pred_hidden or ()), self.pred_w, self.pred_b]

    def tensors(self) -> list[Tensor]:
        return self.estimator_tensors() + self.predictor_tensors()


def _linear(x: Tensor, w: Tensor, b: Tensor, hidden) -> Tensor:
    if hidden is not None:
        x = nx.relu(nx.add_row(nx.matmul(x, hidden[0]), hidden[1]))
    return nx.add_row(nx.matmul(x, w), b)


def selection_scores(features: Tensor, params: SelectionParams) -> tuple[Tensor, Tensor]:
    """Keyness ``q`` (n, 1) and per-class predictor scores (n, C), both sigmoid."""
    in_dim = params.est_hidden[0].rows if params.est_hidden else params.est_w.rows
    if features.cols != in_dim:
        raise ShapeError(f"selection: features {features.shape} vs input width {in_dim}")
    q = nx.sigmoid(_linear(features, params.est_w, params.est_b, params.est_hidden))
    cls = nx.sigmoid(_linear(features, params.pred_w, params.pred_b, params.pred_hidden))
    return q, cls


def combined_scores(q: np.ndarray, class_scores: np.ndarray) -> np.ndarray:
    """Re-rank score ``q_i * p(c | R_i)`` used to mine pseudo ground truth."""
    return np.asarray(class_scores) * np.asarray(q).reshape(-1, 1)


def _bag_labels(image_labels, rows: int, group: int) -> np.ndarray:
    y = np.atleast_2d(np.asarray(image_labels)).astype(bool)
    if rows % group or y.shape[0] != rows // group:
        raise ShapeError(f"{y.shape[0]} label rows for {rows} proposals in groups of {group}")
    return np.repeat(y, group, axis=0)


def e_step_labels(class_scores, image_labels, zeta: float = 0.5, group: int | None = None) -> np.ndarray:
    """Keyness pseudo labels: 1 iff some present class scores strictly above ``zeta``."""
    if not 0 < zeta < 1:
        raise ValueError(f"zeta must lie in (0, 1), got {zeta}")
    s = np.asarray(class_scores.value if isinstance(class_scores, Tensor) else class_scores, dtype=np.float64)
    n = s.shape[0] if group is None else group
    y = _bag_labels(image_labels, s.shape[0], n)
    if y.shape != s.shape:
        raise ShapeError(f"e_step_labels: scores {s.shape} vs labels {y.shape}")
    return ((s > zeta) & y).any(axis=1).astype(np.float64)


def m_step_labels(q, image_labels, group: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Class pseudo labels from keyness and the per-bag mean threshold.

    Returns ``(y_hat, xi)`` where ``xi`` holds one threshold per bag.
    """
    qv = np.asarray(q.value if isinstance(q, Tensor) else q, dtype=np.float64).reshape(-1)
    n = qv.shape[0] if group is None else group
    y = _bag_labels(image_labels, qv.shape[0], n)
    xi = qv.reshape(-1, n).mean(axis=1)
    above = qv - np.repeat(xi, n) > TIE_TOL
    return (y & above[:, None]).astype(np.float64), xi


def estimator_loss(q: Tensor, h_hat) -> Tensor:
    return nx.bce(q, np.asarray(h_hat, dtype=np.float64).reshape(q.shape))


def predictor_loss(class_scores: Tensor, y_hat, row_weights=None) -> Tensor:
    """Mean BCE over (proposal, class) pairs.

    ``row_weights`` (one per proposal, 0 or 1) drops bags from the mean;
    the result is renormalized over the kept rows.
    """
    target = np.asarray(y_hat, dtype=np.float64)
    if target.shape != class_scores.shape:
        raise ShapeError(f"predictor_loss: scores {class_scores.shape} vs labels {target.shape}")
    if row_weights is None:
        return nx.bce(class_scores, target)
    w = np.asarray(row_weights, dtype=np.float64).reshape(-1, 1)
    kept = w.sum()
    if kept == 0:
        return nx.scale(nx.total(class_scores), 0.0)
    mat = np.repeat(w, class_scores.cols, axis=1) * (w.size / kept)
    return nx.bce(class_scores, target, mat)


def em_schedule(iteration: int, alternate_every: int = 3000, joint_after: int = 30000) -> str:
    if iteration < 0:
        raise ValueError("iteration must be >= 0")
    if iteration >= joint_after:
        return PHASE_JOINT
    return PHASE_E if (iteration // alternate_every) % 2 == 0 else PHASE_M
