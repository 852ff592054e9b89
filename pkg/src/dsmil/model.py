"""Composed detector: discovery -> MIL head, selection, refinement branches."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .data import ProposalBag
from .discovery import AttentionRecord, DiscoveryParams, discovery_forward
from .evaluation import DetectionResult
from .geometry import iou_matrix
from .mil_head import InstanceScores, MilHeadParams, mil_forward, mil_loss
from .numerics import Tensor
from .refinement import (RefinementBranchParams, branch_forward, detection_loss, inference, mine_batch,
                         refine_loss, regression_loss)
from .selection import (PHASE_E, PHASE_JOINT, PHASE_M, SelectionParams, e_step_labels, estimator_loss,
                        TIE_TOL, m_step_labels, predictor_loss, selection_scores)


@dataclass
class ModelParameters:
    discovery: DiscoveryParams
    mil: MilHeadParams
    branches: list[RefinementBranchParams]
    selection: SelectionParams | None = None

    @classmethod
    def init(cls, seed: int, feature_dim: int, num_classes: int, *, discovery_count: int = 2, branches: int = 3,
             use_selection: bool = True, embed_dim: int | None = None, selection_hidden: int = 0) -> "ModelParameters":
        rng = np.random.default_rng(seed)
        disc = DiscoveryParams.init(rng, feature_dim, discovery_count, embed_dim)
        mil = MilHeadParams.init(rng, feature_dim, num_classes)
        sel = SelectionParams.init(rng, feature_dim, num_classes, selection_hidden) if use_selection else None
        refs = [RefinementBranchParams.init(rng, feature_dim, num_classes, k) for k in range(branches)]
        return cls(disc, mil, refs, sel)

    def tensors(self) -> list[Tensor]:
        out = self.discovery.tensors() + self.mil.tensors()
        if self.selection is not None:
            out += self.selection.tensors()
        for b in self.branches:
            out += b.tensors()
        return out

    def named(self) -> dict[str, Tensor]:
        return {t.name: t for t in self.tensors()}


@dataclass
class Batch:
    """Bags sharing one proposal count, stacked row-wise."""

    bags: list[ProposalBag]
    group: int
    features: np.ndarray  # (B*n, D)
    boxes: np.ndarray  # (B*n, 4)
    labels: np.ndarray  # (B, C)
    overlaps: np.ndarray  # (B, n, n)

    @classmethod
    def from_bags(cls, bags: list[ProposalBag]) -> "Batch":
        n = bags[0].num_proposals
        return cls(
            bags=bags,
            group=n,
            features=np.concatenate([b.features for b in bags]),
            boxes=np.concatenate([b.boxes for b in bags]),
            labels=np.stack([b.labels for b in bags]).astype(np.float64),
            overlaps=np.stack([iou_matrix(b.boxes, b.boxes) for b in bags]),
        )


def make_batches(bags: list[ProposalBag]) -> list[Batch]:
    by_n: dict[int, list[ProposalBag]] = {}
    for b in bags:
        by_n.setdefault(b.num_proposals, []).append(b)
    return [Batch.from_bags(by_n[n]) for n in sorted(by_n)]


@dataclass
class Forward:
    attention: list[AttentionRecord]
    features: Tensor
    mil: InstanceScores
    branch_scores: list[Tensor]
    branch_regression: list[Tensor]
    q: Tensor | None = None
    class_scores: Tensor | None = None
    losses: dict[str, Tensor] = field(default_factory=dict)


def forward(params: ModelParameters, batch: Batch) -> Forward:
    n = batch.group
    x = Tensor(batch.features)
    records = discovery_forward(x, params.discovery, n)
    h = records[-1].output if records else x
    mil = mil_forward(h, params.mil, n)
    q = cls = None
    if params.selection is not None:
        # selection trains on discovered features without steering them
        q, cls = selection_scores(nx.detach(h), params.selection)
    scores, regs = [], []
    for bp in params.branches:
        s, r = branch_forward(h, bp)
        scores.append(s)
        regs.append(r)
    return Forward(records, h, mil, scores, regs, q, cls)


def compute_losses(params: ModelParameters, batch: Batch, fw: Forward, *, phase: str, zeta: float, lam: float,
                   use_regression: bool) -> dict[str, Tensor]:
    n = batch.group
    c = batch.labels.shape[1]
    losses: dict[str, Tensor] = {"cls": mil_loss(fw.mil, batch.labels)}
    if fw.q is not None:
        if phase in (PHASE_E, PHASE_JOINT):
            h_hat = e_step_labels(fw.class_scores.value, batch.labels, zeta, n)
            losses["estimator"] = estimator_loss(fw.q, h_hat)
        if phase in (PHASE_M, PHASE_JOINT):
            y_hat, xi = m_step_labels(fw.q.value, batch.labels, n)
            # bags whose keyness is flat yield no positives; leave them out
            varied = np.repeat(fw.q.value.reshape(-1, n).max(axis=1) - xi > TIE_TOL, n)
            losses["predictor"] = predictor_loss(fw.class_scores, y_hat, varied)
        qv = fw.q.value.reshape(-1)
    else:
        qv = np.ones(batch.features.shape[0])

    prev = fw.mil.joint.value
    terms = []
    refine_total = reg_total = None
    for s, r in zip(fw.branch_scores, fw.branch_regression):
        targets = mine_batch(prev, qv, batch.boxes, batch.labels, n, batch.overlaps)
        ref = refine_loss(s, targets)
        reg = regression_loss(r, targets) if use_regression else nx.scale(nx.total(Tensor(np.zeros((1, 1)))), 0.0)
        terms.append((ref, reg))
        refine_total = ref if refine_total is None else nx.add(refine_total, ref)
        reg_total = reg if reg_total is None else nx.add(reg_total, reg)
        prev = s.value[:, :c]
    losses["det"] = detection_loss(terms, lam)
    losses["refine"] = refine_total
    losses["regression"] = reg_total
    return losses


def predict(params: ModelParameters, batch: Batch, *, use_regression: bool, nms_threshold: float = 0.3) -> list[DetectionResult]:
    fw = forward(params, batch)
    n = batch.group
    out = []
    for i, bag in enumerate(batch.bags):
        sl = slice(i * n, (i + 1) * n)
        scores = [s.value[sl] for s in fw.branch_scores]
        reg = fw.branch_regression[-1].value[sl] if use_regression else None
        out.append(inference(bag.image_id, bag.boxes, scores, reg, bag.image_size, nms_threshold))
    return out
