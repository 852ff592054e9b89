"""Cascaded instance-refinement branches with box regression.

Branch ``k`` is supervised by pseudo ground truth mined from the scores of
stage ``k - 1`` (the MIL head for the first branch), re-ranked by selection
keyness. Each branch predicts C + 1 classes (background last) and 4 box
offsets per class.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .evaluation import DetectionResult
from .geometry import decode_targets, encode_targets, iou_matrix, nms
from .numerics import EPS, ShapeError, Tensor

FG_IOU = 0.5


class MiningError(ValueError):
    """The bag has no positive class to mine a seed for."""


@dataclass
class RefinementBranchParams:
    cls_w: Tensor
    cls_b: Tensor
    reg_w: Tensor
    reg_b: Tensor

    @classmethod
    def init(cls, rng: np.random.Generator, feature_dim: int, num_classes: int, k: int = 0) -> "RefinementBranchParams":
        return cls(
            cls_w=nx.glorot(rng, feature_dim, num_classes + 1, f"ref{k}.cls_w"),
            cls_b=nx.zeros_param(1, num_classes + 1, f"ref{k}.cls_b"),
            # regression starts at the identity transform
            reg_w=Tensor(np.zeros((feature_dim, 4 * num_classes)), requires_grad=True, name=f"ref{k}.reg_w"),
            reg_b=nx.zeros_param(1, 4 * num_classes, f"ref{k}.reg_b"),
        )

    def tensors(self) -> list[Tensor]:
        return [self.cls_w, self.cls_b, self.reg_w, self.reg_b]


def branch_forward(features: Tensor, params: RefinementBranchParams) -> tuple[Tensor, Tensor]:
    """Class probabilities (n, C+1) and raw regression offsets (n, 4C)."""
    scores = nx.softmax_rows(nx.add_row(nx.matmul(features, params.cls_w), params.cls_b))
    reg = nx.add_row(nx.matmul(features, params.reg_w), params.reg_b)
    return scores, reg


@dataclass
class PseudoTarget:
    """Mined supervision for a stack of bags (a single bag when B == 1).

    ``seeds[b, c]`` is the in-bag index of the seed for class c, or -1 when
    the class is absent. ``labels`` uses ``num_classes`` for background.
    """

    seeds: np.ndarray  # (B, C) int
    labels: np.ndarray  # (B*n,) int
    reg_targets: np.ndarray  # (B*n, 4); zero rows for background
    weights: np.ndarray  # (B*n,)
    num_classes: int

    @property
    def foreground(self) -> np.ndarray:
        return self.labels < self.num_classes


def mine_batch(prev_scores: np.ndarray, q: np.ndarray, boxes: np.ndarray, image_labels: np.ndarray,
               group: int, overlaps: np.ndarray | None = None) -> PseudoTarget:
    """Vectorized mining over B bags of ``group`` proposals each.

    ``overlaps`` may carry precomputed (B, n, n) proposal IoUs. Bags without
    any positive label get all-background labels and zero weight.
    """
    prev = np.asarray(prev_scores, dtype=np.float64)
    rows, c = prev.shape
    b = rows // group
    if rows % group:
        raise ShapeError(f"mine: {rows} rows do not split into bags of {group}")
    box3 = np.asarray(boxes, dtype=np.float64).reshape(b, group, 4)
    y = np.asarray(image_labels).reshape(b, c).astype(bool)
    if overlaps is None:
        overlaps = np.stack([iou_matrix(bx, bx) for bx in box3])
    combined = (prev * np.asarray(q, dtype=np.float64).reshape(-1, 1)).reshape(b, group, c)
    seeds = np.argmax(combined, axis=1)  # (B, C), lowest index on ties
    # keyness only re-ranks; loss weights keep the previous stage's calibration
    seed_score = np.take_along_axis(prev.reshape(b, group, c), seeds[:, None, :], axis=1)[:, 0, :]
    seeds = np.where(y, seeds, -1)

    # seed_iou[b, c, i] = IoU(box_i, seed box of class c); -1 for absent classes
    safe = np.where(seeds >= 0, seeds, 0)
    seed_iou = np.take_along_axis(overlaps, safe[:, :, None], axis=1)
    seed_iou = np.where(y[:, :, None], seed_iou, -1.0)
    best_cls = np.argmax(seed_iou, axis=1)  # (B, n)
    best_iou = np.take_along_axis(seed_iou, best_cls[:, None, :], axis=1)[:, 0, :]

    # seeds always keep their own class (lowest class when one proposal seeds several)
    bi, ci = np.nonzero(seeds >= 0)
    for bb, cc in sorted(zip(bi.tolist(), ci.tolist()), key=lambda t: (t[0], -t[1])):
        best_cls[bb, seeds[bb, cc]] = cc
        best_iou[bb, seeds[bb, cc]] = 1.0

    fg = best_iou >= FG_IOU
    labels = np.where(fg, best_cls, c)
    has_pos = y.any(axis=1)
    weights = np.where(has_pos[:, None], np.take_along_axis(seed_score, best_cls, axis=1), 0.0)
    labels = np.where(has_pos[:, None], labels, c)

    seed_boxes = np.take_along_axis(box3, np.where(fg, np.take_along_axis(safe, best_cls, axis=1), 0)[:, :, None], axis=1)
    targets = np.zeros((b, group, 4))
    if fg.any():
        targets[fg] = encode_targets(box3[fg], seed_boxes[fg])
    return PseudoTarget(seeds=seeds, labels=labels.reshape(-1), reg_targets=targets.reshape(-1, 4),
                        weights=weights.reshape(-1), num_classes=c)


def mine_pseudo_targets(prev_scores, selection_q, boxes, image_labels) -> PseudoTarget:
    """Mine seeds and per-proposal supervision for one bag.

    Seed for a present class c: argmax of ``prev_scores[:, c] * q``. Every
    proposal with IoU >= 0.5 to a seed takes that seed's class (the
    highest-IoU seed wins); the rest are background. Loss weights are the
    previous-stage score of the seed a proposal is attached to.
    """
    prev = np.atleast_2d(np.asarray(prev_scores, dtype=np.float64))
    y = np.asarray(image_labels).reshape(1, -1)
    if not y.any():
        raise MiningError("bag has no positive class")
    if y.shape[1] != prev.shape[1]:
        raise ShapeError(f"mine: {y.shape[1]} labels for {prev.shape[1]} score columns")
    return mine_batch(prev, np.asarray(selection_q).reshape(-1), np.asarray(boxes).reshape(-1, 4), y, prev.shape[0])


def refine_loss(branch_scores: Tensor, targets: PseudoTarget) -> Tensor:
    """Weighted NLL of each proposal's mined label, averaged over proposals."""
    if branch_scores.rows != targets.labels.shape[0] or branch_scores.cols != targets.num_classes + 1:
        raise ShapeError(f"refine_loss: scores {branch_scores.shape} vs {targets.labels.shape[0]} labels"
                         f" over {targets.num_classes + 1} classes")
    p = nx.clamp(nx.pick(branch_scores, targets.labels), EPS, 1.0)
    nll = nx.mul(nx.log(p), Tensor(targets.weights.reshape(-1, 1)))
    return nx.scale(nx.mean(nll), -1.0)


def regression_loss(predicted: Tensor, targets: PseudoTarget) -> Tensor:
    """Smooth-L1 over the assigned class's 4 offsets, averaged over foreground proposals."""
    c = targets.num_classes
    if predicted.shape != (targets.labels.shape[0], 4 * c):
        raise ShapeError(f"regression_loss: predictions {predicted.shape} vs {targets.labels.shape[0]} x {4 * c}")
    fg = targets.foreground
    n_fg = int(fg.sum())
    if n_fg == 0:
        return nx.scale(nx.total(predicted), 0.0)
    mask = np.zeros(predicted.shape)
    goal = np.zeros(predicted.shape)
    rows = np.nonzero(fg)[0]
    for j in range(4):
        mask[rows, 4 * targets.labels[rows] + j] = 1.0
        goal[rows, 4 * targets.labels[rows] + j] = targets.reg_targets[rows, j]
    diff = nx.sub(predicted, Tensor(goal))
    per = nx.mul(nx.smooth_l1_elementwise(diff), Tensor(mask))
    return nx.scale(nx.total(per), 1.0 / n_fg)


def detection_loss(branches: list[tuple[Tensor, Tensor]], lam: float = 1.0) -> Tensor:
    """Sum over branches of ``refine + lam * regression``."""
    if not branches:
        raise ValueError("detection_loss needs at least one branch")
    if lam <= 0:
        raise ValueError("lambda must be > 0")
    out = None
    for ref, reg in branches:
        term = nx.add(ref, nx.scale(reg, lam))
        out = term if out is None else nx.add(out, term)
    return out


def inference(image_id: str, boxes: np.ndarray, branch_scores: list[np.ndarray], last_regression: np.ndarray | None,
              image_size: tuple[float, float] | None = None, nms_threshold: float = 0.3) -> DetectionResult:
    """Average branch class scores, decode last-branch boxes, NMS per class."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    scores = np.mean([np.asarray(s) for s in branch_scores], axis=0)
    c = scores.shape[1] - 1
    per_class = {}
    for cls in range(c):
        if last_regression is None:
            cand = boxes
        else:
            cand = decode_targets(np.asarray(last_regression)[:, 4 * cls: 4 * cls + 4], boxes, image_size)
        sc = scores[:, cls]
        ok = (cand[:, 2] > cand[:, 0]) & (cand[:, 3] > cand[:, 1])
        idx = np.nonzero(ok)[0]
        keep = nms(cand[idx], sc[idx], nms_threshold)
        per_class[cls] = [(tuple(float(v) for v in cand[idx[k]]), float(sc[idx[k]])) for k in keep]
    return DetectionResult(image_id=image_id, detections=per_class)
