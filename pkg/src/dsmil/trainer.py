"""Training loop, configuration presets and the checkpoint format."""
from __future__ import annotations

import hashlib
import json
import logging
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np

from . import numerics as nx
from .data import ProposalBag, read_dataset_with_header
from .evaluation import evaluate
from .model import ModelParameters, compute_losses, forward, make_batches, predict
from .numerics import Sgd, SgdConfig, Tape
from .selection import em_schedule

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"DSMILCKP"
CHECKPOINT_VERSION = 1
# config keys that describe where things live, not what is trained
_LOCATION_KEYS = ("dataset", "test_dataset", "out")


class ConfigError(ValueError):
    pass


class CompatibilityError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass
class TrainConfig:
    dataset: str = ""
    test_dataset: str = ""
    out: str = "out"
    use_selection: bool = True
    discovery_count: int = 2
    use_regression: bool = True
    K: int = 3
    learning_rate: float = 0.2
    momentum: float = 0.9
    weight_decay: float = 0.0005
    decay_factor: float = 10.0
    decay_steps: list[int] = field(default_factory=lambda: [2500])
    zeta: float = 0.5
    lam: float = 1.0
    max_iterations: int = 5000
    alternate_every: int = 100
    joint_after: int = 1000
    seed: int = 0
    embed_dim: int = 0
    selection_hidden: int = 0
    nms_threshold: float = 0.3
    log_every: int = 1

    def validate(self) -> "TrainConfig":
        if not 1 <= self.K <= 4:
            raise ConfigError(f"K must lie in [1, 4], got {self.K}")
        if self.discovery_count not in (0, 1, 2):
            raise ConfigError(f"discovery_count must be 0, 1 or 2, got {self.discovery_count}")
        if not 0 < self.zeta < 1:
            raise ConfigError(f"zeta must lie in (0, 1), got {self.zeta}")
        if self.lam <= 0:
            raise ConfigError("lambda must be > 0")
        if self.max_iterations < 0 or self.alternate_every < 1 or self.joint_after < 0 or self.log_every < 1:
            raise ConfigError("iteration counts must be non-negative (alternate_every, log_every >= 1)")
        try:
            self.sgd()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        return self

    def sgd(self) -> SgdConfig:
        return SgdConfig(self.learning_rate, self.momentum, self.weight_decay, self.decay_factor, list(self.decay_steps))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lambda"] = d.pop("lam")
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "lambda" in d:
            d["lam"] = d.pop("lambda")
        preset = d.pop("preset", None)
        if preset is not None and preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}; expected one of {sorted(PRESETS)}")
        base = PRESETS[preset] if preset else {}
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**{**base, **d}).validate()

    def identity(self) -> dict:
        """Config content that determines the trained parameters."""
        d = self.to_dict()
        for k in _LOCATION_KEYS:
            d.pop(k)
        d.pop("log_every")
        return d

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.identity(), sort_keys=True).encode()).hexdigest()


# Full-scale schedule: 150k iterations, lr decay at 75k, EM alternation
# every 3000 iterations for the first 30000.
PRESETS = {
    "desk": {},
    "full": {
        "learning_rate": 0.001,
        "momentum": 0.9,
        "weight_decay": 0.0005,
        "decay_factor": 10.0,
        "decay_steps": [75000],
        "max_iterations": 150000,
        "alternate_every": 3000,
        "joint_after": 30000,
        "K": 3,
    },
}


def data_hash(classes: int, feature_dim: int) -> str:
    return hashlib.sha256(f"classes={classes};feature_dim={feature_dim}".encode()).hexdigest()


def build_model(config: TrainConfig, feature_dim: int, num_classes: int) -> ModelParameters:
    return ModelParameters.init(
        config.seed, feature_dim, num_classes,
        discovery_count=config.discovery_count, branches=config.K, use_selection=config.use_selection,
        embed_dim=config.embed_dim or None, selection_hidden=config.selection_hidden,
    )


@dataclass
class TrainResult:
    params: ModelParameters
    log: list[dict]
    classes: int
    feature_dim: int


def train(config: TrainConfig, bags: list[ProposalBag], classes: int, feature_dim: int,
          on_log: Callable[[dict], None] | None = None) -> TrainResult:
    """Full-batch training on ``bags``; returns parameters and the per-iteration log."""
    config.validate()
    for bag in bags:
        if bag.features.shape[1] != feature_dim or bag.labels.shape[0] != classes:
            raise ConfigError(f"bag {bag.image_id} does not match classes={classes}, feature_dim={feature_dim}")
    params = build_model(config, feature_dim, classes)
    train_bags = [b for b in bags if b.labels.any()] or bags
    batches = make_batches(train_bags) if train_bags else []
    total_bags = sum(len(b.bags) for b in batches)
    opt = Sgd(params.tensors(), config.sgd())
    records: list[dict] = []
    for it in range(config.max_iterations):
        phase = em_schedule(it, config.alternate_every, config.joint_after)
        with Tape() as tape:
            parts: dict[str, nx.Tensor] = {}
            for batch in batches:
                fw = forward(params, batch)
                losses = compute_losses(params, batch, fw, phase=phase, zeta=config.zeta, lam=config.lam,
                                        use_regression=config.use_regression)
                share = len(batch.bags) / total_bags
                for k, v in losses.items():
                    v = nx.scale(v, share)
                    parts[k] = v if k not in parts else nx.add(parts[k], v)
            loss = nx.add(parts["cls"], parts["det"])
            for k in ("estimator", "predictor"):
                if k in parts:
                    loss = nx.add(loss, parts[k])
            if not loss.requires_grad:
                raise ConfigError("loss does not depend on any parameter")
            nx.backward(tape, loss)
        lr = opt.step(it, allow_missing=True)
        if it % config.log_every == 0:
            rec = {"iteration": it, "loss": loss.item(), "lr": lr, "phase": phase}
            rec.update({k: v.item() for k, v in parts.items()})
            records.append(rec)
            if on_log is not None:
                on_log(rec)
    return TrainResult(params, records, classes, feature_dim)


def detect(params: ModelParameters, bags: list[ProposalBag], config: TrainConfig):
    results = []
    for batch in make_batches(bags):
        results += predict(params, batch, use_regression=config.use_regression, nms_threshold=config.nms_threshold)
    order = {b.image_id: i for i, b in enumerate(bags)}
    return sorted(results, key=lambda r: order[r.image_id])


def evaluate_model(params: ModelParameters, bags: list[ProposalBag], config: TrainConfig, classes: int) -> dict:
    results = detect(params, bags, config)
    gts = {b.image_id: list(b.gt_boxes or []) for b in bags}
    positive = {b.image_id: b.positive_classes() for b in bags}
    return evaluate(results, gts, positive, classes)


def load_dataset(path) -> tuple[list[ProposalBag], int, int]:
    head, bags = read_dataset_with_header(path)
    if head is None:
        raise ConfigError(f"dataset {path} is empty")
    return bags, int(head["classes"]), int(head["feature_dim"])


# -------------------------------------------------------------- checkpoints


def save_checkpoint(path, params: ModelParameters, config: TrainConfig, classes: int, feature_dim: int) -> None:
    """Write magic, version, a JSON header and little-endian float64 tensor blocks."""
    tensors = params.tensors()
    head = {
        "version": CHECKPOINT_VERSION,
        "config": config.identity(),
        "config_hash": config.hash(),
        "classes": classes,
        "feature_dim": feature_dim,
        "data_hash": data_hash(classes, feature_dim),
        "tensors": [{"name": t.name, "rows": t.rows, "cols": t.cols} for t in tensors],
    }
    blob = json.dumps(head, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(blob)))
        fh.write(blob)
        for t in tensors:
            fh.write(np.ascontiguousarray(t.value, dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[ModelParameters, TrainConfig, dict]:
    data = Path(path).read_bytes()
    if data[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint")
    version, hlen = struct.unpack("<II", data[8:16])
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    head = json.loads(data[16:16 + hlen].decode("utf-8"))
    config = TrainConfig.from_dict(head["config"])
    if config.hash() != head["config_hash"]:
        raise CheckpointError(f"{path}: config hash does not match embedded config")
    params = build_model(config, head["feature_dim"], head["classes"])
    named = params.named()
    pos = 16 + hlen
    for entry in head["tensors"]:
        t = named.get(entry["name"])
        if t is None or t.shape != (entry["rows"], entry["cols"]):
            raise CheckpointError(f"{path}: tensor {entry['name']} does not fit the model")
        size = 8 * entry["rows"] * entry["cols"]
        if pos + size > len(data):
            raise CheckpointError(f"{path}: truncated at tensor {entry['name']}")
        t.value = np.frombuffer(data[pos:pos + size], dtype="<f8").astype(np.float64).reshape(t.shape)
        pos += size
    if pos != len(data):
        raise CheckpointError(f"{path}: {len(data) - pos} trailing bytes")
    return params, config, head


def check_compatible(head: dict, dataset_header: dict) -> None:
    expected = data_hash(int(dataset_header["classes"]), int(dataset_header["feature_dim"]))
    if head["data_hash"] != expected:
        raise CompatibilityError(
            f"checkpoint trained for classes={head['classes']}, feature_dim={head['feature_dim']}; dataset has "
            f"classes={dataset_header['classes']}, feature_dim={dataset_header['feature_dim']}")
