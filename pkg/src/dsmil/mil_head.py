"""Two-stream MIL image classifier over proposal features.

The classification stream normalizes each proposal's scores across classes,
the detection stream normalizes each class's scores across the proposals of
a bag; their product summed over proposals is the image-level probability.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .numerics import EPS, ShapeError, Tensor


@dataclass
class MilHeadParams:
    w_cls: Tensor
    b_cls: Tensor
    w_det: Tensor
    b_det: Tensor

    @classmethod
    def init(cls, rng: np.random.Generator, feature_dim: int, num_classes: int) -> "MilHeadParams":
        return cls(
            w_cls=nx.glorot(rng, feature_dim, num_classes, "mil.w_cls"),
            b_cls=nx.zeros_param(1, num_classes, "mil.b_cls"),
            w_det=nx.glorot(rng, feature_dim, num_classes, "mil.w_det"),
            b_det=nx.zeros_param(1, num_classes, "mil.b_det"),
        )

    def tensors(self) -> list[Tensor]:
        return [self.w_cls, self.b_cls, self.w_det, self.b_det]


@dataclass
class InstanceScores:
    joint: Tensor  # (B*n, C)
    image_prob: Tensor  # (B, C), clamped
    group: int


def mil_forward(features: Tensor, params: MilHeadParams, group: int | None = None) -> InstanceScores:
    """Score a bag (or a stack of equally sized bags, ``group`` rows each)."""
    n = features.rows if group is None else group
    if features.rows < 1:
        raise ShapeError("mil_forward: bag has no proposals")
    if features.cols != params.w_cls.rows:
        raise ShapeError(f"mil_forward: features {features.shape} vs weights {params.w_cls.shape}")
    cls_prob = nx.softmax_rows(nx.add_row(nx.matmul(features, params.w_cls), params.b_cls))
    det_prob = nx.softmax_groups(nx.add_row(nx.matmul(features, params.w_det), params.b_det), n)
    joint = nx.mul(cls_prob, det_prob)
    image_prob = nx.clamp(nx.sum_groups(joint, n), EPS, 1.0 - EPS)
    return InstanceScores(joint=joint, image_prob=image_prob, group=n)


def mil_loss(scores: InstanceScores, labels) -> Tensor:
    """Image-level BCE summed over classes, averaged over the bags in ``scores``."""
    y = np.atleast_2d(np.asarray(labels, dtype=np.float64))
    p = scores.image_prob
    if y.shape != p.shape:
        raise ShapeError(f"mil_loss: labels {y.shape} vs image probabilities {p.shape}")
    # bce() averages over all B*C entries; rescale to a per-bag sum over classes
    return nx.scale(nx.bce(p, y), float(p.cols))


def top_scoring_proposal(scores: InstanceScores, cls: int) -> int:
    joint = scores.joint.value
    if not 0 <= cls < joint.shape[1]:
        raise IndexError(f"class {cls} out of range for {joint.shape[1]} classes")
    return int(np.argmax(joint[: scores.group, cls]))
