"""Proposal bags: synthetic planted-object generation and JSON-lines storage.

Each synthetic object of class k owns a discriminative *part* signature and
four *context* signatures, one per half of the object (left, right, top,
bottom). A proposal's feature is built from what it covers:

* part-only proposal:   ``part_k + noise``
* full-object proposal: ``part_k + context_strength * context_k + noise``
* jittered proposal:    part and context halves weighted by covered fraction
* background proposal:  ``noise``

``context_k`` is half the sum of the four halves minus
``context_dilution * part_k``: a box grown from the part to the whole object
pools non-discriminative content, so its part response weakens. This plants
part domination, the failure where part-only boxes outscore the full object
on class evidence alone. Classes are split
into consecutive groups of ``context_group`` that share their context
halves (confusable classes seen in the same surroundings), so context marks
object extent while only the part tells the group members apart.
"""
from __future__ import annotations

import base64
import json
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Iterable

import numpy as np

from .geometry import Box, iou_matrix

FORMAT = "dsmil-bags"
VERSION = 1
_BAG_KEYS = {"image_id", "width", "height", "boxes", "labels", "features_b64", "gt"}
_REQUIRED = _BAG_KEYS - {"gt"}


class DatasetError(ValueError):
    """Malformed dataset file or invalid configuration."""


class DatasetShapeError(DatasetError):
    pass


@dataclass
class ProposalBag:
    image_id: str
    image_size: tuple[int, int]
    boxes: np.ndarray  # (N, 4)
    features: np.ndarray  # (N, D)
    labels: np.ndarray  # (C,) in {0, 1}
    gt_boxes: list[tuple[int, Box]] | None = None

    @property
    def num_proposals(self) -> int:
        return self.boxes.shape[0]

    def positive_classes(self) -> list[int]:
        return [int(c) for c in np.nonzero(self.labels)[0]]

    def __eq__(self, other) -> bool:
        if not isinstance(other, ProposalBag):
            return NotImplemented
        return (
            self.image_id == other.image_id
            and tuple(self.image_size) == tuple(other.image_size)
            and np.array_equal(self.boxes, other.boxes)
            and np.array_equal(self.features, other.features)
            and np.array_equal(self.labels, other.labels)
            and _gt_key(self.gt_boxes) == _gt_key(other.gt_boxes)
        )


def _gt_key(gt):
    return None if gt is None else [(int(c), tuple(map(float, b))) for c, b in gt]


@dataclass
class SyntheticConfig:
    num_images: int = 200
    classes: int = 4
    feature_dim: int = 32
    proposals_per_image: int = 24
    part_fraction: float = 0.5
    context_strength: float = 1.0
    noise_sigma: float = 0.2
    seed: int = 0
    # extensions beyond the core knobs
    image_size: int = 256
    max_objects: int = 3
    jitter_per_object: int = 3
    part_per_object: int = 1
    context_group: int = 2
    context_dilution: float = 0.5

    def validate(self) -> "SyntheticConfig":
        for name in ("num_images", "classes", "feature_dim", "proposals_per_image", "image_size", "max_objects"):
            if getattr(self, name) <= 0:
                raise DatasetError(f"{name} must be positive, got {getattr(self, name)}")
        if not 0 < self.part_fraction < 1:
            raise DatasetError(f"part_fraction must lie in (0, 1), got {self.part_fraction}")
        if self.context_strength < 0 or self.noise_sigma < 0:
            raise DatasetError("context_strength and noise_sigma must be >= 0")
        if self.context_group < 1:
            raise DatasetError("context_group must be >= 1")
        if self.jitter_per_object < 0 or self.part_per_object < 1:
            raise DatasetError("need part_per_object >= 1 and jitter_per_object >= 0")
        per_obj = 1 + self.part_per_object + self.jitter_per_object
        if self.max_objects * per_obj > self.proposals_per_image:
            raise DatasetError(
                f"{self.max_objects} objects x {per_obj} proposals exceed proposals_per_image={self.proposals_per_image}")
        if self.feature_dim < self.classes + 4 * -(-self.classes // self.context_group):
            raise DatasetError("feature_dim too small to hold orthogonal part and context signatures")
        return self

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise DatasetError(f"unknown synthetic config keys: {sorted(unknown)}")
        return cls(**d).validate()


@dataclass
class Signatures:
    part: np.ndarray  # (C, D)
    context: np.ndarray  # (C, 4, D); halves left, right, top, bottom; sums to context_k


def signatures(config: SyntheticConfig) -> Signatures:
    """Orthonormal class signatures; depend only on (seed, classes, feature_dim, context_group)."""
    c, d = config.classes, config.feature_dim
    rng = np.random.default_rng([config.seed, 0x5167])
    basis, _ = np.linalg.qr(rng.standard_normal((d, d)))
    basis = basis.T
    part = basis[:c]
    groups = -(-c // config.context_group)
    halves = basis[c:c + 4 * groups].reshape(groups, 4, d)
    context = halves[np.arange(c) // config.context_group] / 2
    context = context - config.context_dilution / 4 * part[:, None, :]
    return Signatures(part=part, context=context)


def _covered(box: np.ndarray, region: np.ndarray) -> float:
    """Fraction of ``region`` lying inside ``box``."""
    iw = min(box[2], region[2]) - max(box[0], region[0])
    ih = min(box[3], region[3]) - max(box[1], region[1])
    if iw <= 0 or ih <= 0:
        return 0.0
    return iw * ih / ((region[2] - region[0]) * (region[3] - region[1]))


def _halves(g: np.ndarray) -> list[np.ndarray]:
    cx, cy = (g[0] + g[2]) / 2, (g[1] + g[3]) / 2
    return [np.array([g[0], g[1], cx, g[3]]), np.array([cx, g[1], g[2], g[3]]),
            np.array([g[0], g[1], g[2], cy]), np.array([g[0], cy, g[2], g[3]])]


def _jitter(rng: np.random.Generator, g: np.ndarray, size: int) -> np.ndarray:
    w, h = g[2] - g[0], g[3] - g[1]
    for _ in range(100):
        sx, sy = rng.uniform(0.6, 1.15, size=2)
        dx, dy = rng.uniform(-0.3, 0.3, size=2)
        cx, cy = (g[0] + g[2]) / 2 + dx * w, (g[1] + g[3]) / 2 + dy * h
        b = np.array([cx - sx * w / 2, cy - sy * h / 2, cx + sx * w / 2, cy + sy * h / 2])
        b = np.clip(b, 0, size)
        if b[2] - b[0] < 2 or b[3] - b[1] < 2:
            continue
        ov = iou_matrix(b, g)[0, 0]
        if 0.3 <= ov < 0.95:
            return b
    return b


def _object_classes(rng: np.random.Generator, config: SyntheticConfig, counts: list[int]) -> list[list[int]]:
    """Class stream drawn in shuffled blocks of C, so class counts differ by at most one."""
    total = sum(counts)
    stream = np.concatenate([rng.permutation(config.classes) for _ in range(-(-total // config.classes))])
    out, pos = [], 0
    for k in counts:
        out.append([int(c) for c in stream[pos:pos + k]])
        pos += k
    return out


def _make_bag(index: int, classes: list[int], config: SyntheticConfig, sig: Signatures) -> ProposalBag:
    rng = np.random.default_rng([config.seed, index])
    size = config.image_size
    d = config.feature_dim
    gts: list[np.ndarray] = []
    while len(gts) < len(classes):
        w, h = rng.uniform(0.25, 0.55, size=2) * size
        x, y = rng.uniform(0, size - w), rng.uniform(0, size - h)
        g = np.array([x, y, x + w, y + h])
        if gts and iou_matrix(g, np.array(gts)).max() > 0.1:
            continue
        gts.append(g)

    boxes, feats = [], []
    for cls, g in zip(classes, gts):
        w, h = g[2] - g[0], g[3] - g[1]
        pw, ph = w * config.part_fraction, h * config.part_fraction
        px = rng.uniform(g[0], g[2] - pw)
        py = rng.uniform(g[1], g[3] - ph)
        part_box = np.array([px, py, px + pw, py + ph])
        ctx = sig.context[cls].sum(axis=0)

        boxes.append(part_box)
        feats.append(sig.part[cls].copy())
        for _ in range(config.part_per_object - 1):
            jb = part_box + rng.uniform(-0.15, 0.15, size=4) * np.array([pw, ph, pw, ph])
            jb = np.clip(jb, 0, size)
            boxes.append(jb)
            feats.append(sig.part[cls] * _covered(jb, part_box))

        boxes.append(g.copy())
        feats.append(sig.part[cls] + config.context_strength * ctx)

        halves = _halves(g)
        for _ in range(config.jitter_per_object):
            jb = _jitter(rng, g, size)
            f = sig.part[cls] * _covered(jb, part_box)
            cov = np.array([_covered(jb, r) for r in halves])
            f = f + config.context_strength * (cov @ sig.context[cls])
            boxes.append(jb)
            feats.append(f)

    gt_arr = np.array(gts)
    while len(boxes) < config.proposals_per_image:
        w, h = rng.uniform(0.1, 0.5, size=2) * size
        x, y = rng.uniform(0, size - w), rng.uniform(0, size - h)
        b = np.array([x, y, x + w, y + h])
        if iou_matrix(b, gt_arr).max() >= 0.3:
            continue
        boxes.append(b)
        feats.append(np.zeros(d))

    box_arr = np.array(boxes)
    feat_arr = np.array(feats) + config.noise_sigma * rng.standard_normal((len(boxes), d))
    order = rng.permutation(len(boxes))
    labels = np.zeros(config.classes, dtype=np.int64)
    labels[classes] = 1
    return ProposalBag(
        image_id=f"syn{config.seed}_{index:05d}",
        image_size=(size, size),
        boxes=box_arr[order],
        features=feat_arr[order],
        labels=labels,
        gt_boxes=[(c, Box(*map(float, g))) for c, g in zip(classes, gts)],
    )


def generate_dataset(config: SyntheticConfig, start: int = 0) -> list[ProposalBag]:
    """Images ``start .. start + num_images - 1`` of the stream defined by ``config.seed``.

    Splits drawn from disjoint index ranges of one seed share signatures.
    """
    config.validate()
    sig = signatures(config)
    count_rng = np.random.default_rng([config.seed, 0xC0])
    end = start + config.num_images
    counts = [int(k) for k in count_rng.integers(1, config.max_objects + 1, size=end)]
    classes = _object_classes(np.random.default_rng([config.seed, 0xC1]), config, counts)
    return [_make_bag(i, classes[i], config, sig) for i in range(start, end)]


def generate_split(config: SyntheticConfig, num_test: int) -> tuple[list[ProposalBag], list[ProposalBag]]:
    train = generate_dataset(config)
    if num_test <= 0:
        return train, []
    test_cfg = SyntheticConfig(**{**config.__dict__, "num_images": num_test})
    return train, generate_dataset(test_cfg, start=config.num_images)


# ----------------------------------------------------------------------- I/O


def header(classes: int, feature_dim: int) -> dict:
    return {"format": FORMAT, "version": VERSION, "classes": classes, "feature_dim": feature_dim}


def bag_to_json(bag: ProposalBag) -> dict:
    feats = np.ascontiguousarray(bag.features, dtype="<f8")
    obj = {
        "image_id": bag.image_id,
        "width": int(bag.image_size[0]),
        "height": int(bag.image_size[1]),
        "boxes": [[float(v) for v in b] for b in bag.boxes],
        "labels": [int(c) for c in np.nonzero(bag.labels)[0]],
        "features_b64": base64.b64encode(feats.tobytes()).decode("ascii"),
    }
    if bag.gt_boxes is not None:
        obj["gt"] = [{"class": int(c), "box": [float(v) for v in b]} for c, b in bag.gt_boxes]
    return obj


def write_dataset(bags: Iterable[ProposalBag], path, classes: int | None = None, feature_dim: int | None = None) -> None:
    bags = list(bags)
    if classes is None or feature_dim is None:
        if not bags:
            raise DatasetError("classes and feature_dim are required for an empty dataset")
        classes = bags[0].labels.shape[0]
        feature_dim = bags[0].features.shape[1]
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(json.dumps(header(classes, feature_dim)) + "\n")
        for bag in bags:
            fh.write(json.dumps(bag_to_json(bag)) + "\n")


def _bag_from_json(obj: dict, classes: int, dim: int, where: str) -> ProposalBag:
    unknown = set(obj) - _BAG_KEYS
    if unknown:
        raise DatasetError(f"{where}: unknown fields {sorted(unknown)}")
    missing = _REQUIRED - set(obj)
    if missing:
        raise DatasetError(f"{where}: missing fields {sorted(missing)}")
    boxes = np.asarray(obj["boxes"], dtype=np.float64).reshape(-1, 4) if obj["boxes"] else np.zeros((0, 4))
    n = boxes.shape[0]
    if n < 1:
        raise DatasetError(f"{where}: bag has no proposals")
    raw = base64.b64decode(obj["features_b64"], validate=True)
    if len(raw) != 8 * n * dim:
        raise DatasetShapeError(f"{where}: feature block holds {len(raw) // 8} values, expected {n}x{dim}")
    feats = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(n, dim)
    labels = np.zeros(classes, dtype=np.int64)
    for c in obj["labels"]:
        if not 0 <= int(c) < classes:
            raise DatasetError(f"{where}: label {c} outside [0, {classes})")
        labels[int(c)] = 1
    gt = None
    if "gt" in obj:
        gt = []
        for item in obj["gt"]:
            if set(item) != {"class", "box"}:
                raise DatasetError(f"{where}: gt entries need exactly 'class' and 'box'")
            gt.append((int(item["class"]), Box(*map(float, item["box"]))))
    return ProposalBag(str(obj["image_id"]), (int(obj["width"]), int(obj["height"])), boxes, feats, labels, gt)


def read_dataset_with_header(path) -> tuple[dict | None, list[ProposalBag]]:
    data = Path(path).read_bytes()
    if not data.strip():
        return None, []
    bags: list[ProposalBag] = []
    head = None
    offset = 0
    for lineno, raw in enumerate(data.split(b"\n"), start=1):
        start = offset
        offset += len(raw) + 1
        if not raw.strip():
            continue
        where = f"line {lineno} (byte offset {start})"
        try:
            obj = json.loads(raw.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise DatasetError(f"{where}: cannot parse: {exc}") from None
        if not isinstance(obj, dict):
            raise DatasetError(f"{where}: expected a JSON object")
        if head is None:
            if obj.get("format") != FORMAT or set(obj) != {"format", "version", "classes", "feature_dim"}:
                raise DatasetError(f"{where}: bad header {obj}")
            if obj["version"] != VERSION:
                raise DatasetError(f"{where}: unsupported version {obj['version']}")
            head = obj
            continue
        try:
            bags.append(_bag_from_json(obj, int(head["classes"]), int(head["feature_dim"]), where))
        except (TypeError, KeyError, ValueError) as exc:
            if isinstance(exc, DatasetError):
                raise
            raise DatasetError(f"{where}: {exc}") from None
    return head, bags


def read_dataset(path) -> list[ProposalBag]:
    return read_dataset_with_header(path)[1]
