"""Instance-level self-attention without a residual path.

Each proposal's output is the affinity-weighted average of every proposal
feature in its bag; affinities are softmax-normalized inner products of a
shared linear embedding.
"""
from __future__ import annotations

import io
import math
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .numerics import ShapeError, Tensor


@dataclass
class DiscoveryParams:
    embeddings: list[Tensor] = field(default_factory=list)

    @classmethod
    def init(cls, rng: np.random.Generator, feature_dim: int, count: int, embed_dim: int | None = None) -> "DiscoveryParams":
        if count not in (0, 1, 2):
            raise ValueError(f"discovery module count must be 0, 1 or 2, got {count}")
        e = embed_dim or math.ceil(feature_dim / 2)
        return cls([nx.glorot(rng, feature_dim, e, f"discovery{k}.w_embed") for k in range(count)])

    @property
    def count_modules(self) -> int:
        return len(self.embeddings)

    def tensors(self) -> list[Tensor]:
        return list(self.embeddings)


@dataclass
class AttentionRecord:
    weights: Tensor  # (B*n, n); row-stochastic
    output: Tensor  # same shape as the module input


def attend(features: Tensor, w_embed: Tensor, group: int | None = None) -> AttentionRecord:
    n = features.rows if group is None else group
    if features.cols != w_embed.rows:
        raise ShapeError(f"discovery: features {features.shape} vs embedding {w_embed.shape}")
    e = nx.matmul(features, w_embed)
    weights = nx.softmax_rows(nx.gram_groups(e, n))
    return AttentionRecord(weights=weights, output=nx.mix_groups(weights, features, n))


def discovery_forward(features: Tensor, params: DiscoveryParams, group: int | None = None) -> list[AttentionRecord]:
    """Run the stacked modules; the last record's ``output`` feeds the heads.

    Returns an empty list when no module is configured.
    """
    records = []
    x = features
    for w in params.embeddings:
        rec = attend(x, w, group)
        records.append(rec)
        x = rec.output
    return records


def dump_attention(record: AttentionRecord | np.ndarray) -> str:
    """Serialize attention weights as ``i: w_i0,w_i1,...`` lines.

    ``repr`` of a float round-trips exactly, so :func:`parse_attention`
    reproduces the matrix bit for bit.
    """
    w = record.weights.value if isinstance(record, AttentionRecord) else np.asarray(record)
    buf = io.StringIO()
    for i, row in enumerate(w):
        buf.write(f"{i}: " + ",".join(repr(float(v)) for v in row) + "\n")
    return buf.getvalue()


def parse_attention(text: str) -> np.ndarray:
    rows = []
    for line in text.splitlines():
        if not line.strip():
            continue
        idx, _, body = line.partition(":")
        if int(idx) != len(rows):
            raise ValueError(f"attention rows out of order at index {idx}")
        rows.append([float(v) for v in body.split(",")])
    return np.array(rows, dtype=np.float64)
