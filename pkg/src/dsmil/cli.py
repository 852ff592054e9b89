"""Command line entry point.

Subcommands: ``generate``, ``train``, ``eval``, ``ablate``, ``dump-attention``.
Each takes an optional JSON config file (``--config``); any config field can
be overridden with ``--field=value`` (values are parsed as JSON when they
parse, otherwise taken as strings). ``DSMIL_SEED`` overrides ``seed``.
Progress goes to stdout as JSON lines; errors go to stderr as a single line
``E_<CODE>: message`` and exit with status 1.
"""
from __future__ import annotations

import argparse
import csv
import json
import os
import statistics
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import plotting
from .data import DatasetError, SyntheticConfig, generate_dataset, generate_split, read_dataset_with_header, write_dataset
from .discovery import discovery_forward
from .model import Batch
from .numerics import Tensor
from .trainer import (
    CheckpointError,
    CompatibilityError,
    ConfigError,
    TrainConfig,
    check_compatible,
    evaluate_model,
    load_checkpoint,
    load_dataset,
    save_checkpoint,
    train,
)

VARIANTS = {
    "baseline": dict(use_selection=False, discovery_count=0, use_regression=False),
    "+S": dict(use_selection=True, discovery_count=0, use_regression=False),
    "+D": dict(use_selection=False, discovery_count=1, use_regression=False),
    "+2D": dict(use_selection=False, discovery_count=2, use_regression=False),
    "+S+2D": dict(use_selection=True, discovery_count=2, use_regression=False),
    "+S+2D+Reg": dict(use_selection=True, discovery_count=2, use_regression=True),
}
# the K sweep varies the branch count of the full model
K_BASE = "+S+2D+Reg"
METRIC_KEYS = ("map", "per_class_ap", "corloc", "per_class_corloc")


class UsageError(ValueError):
    pass


class LookupFailure(LookupError):
    pass


_CODES = [
    (UsageError, "E_USAGE"),
    (ConfigError, "E_CONFIG"),
    (CompatibilityError, "E_COMPAT"),
    (CheckpointError, "E_CHECKPOINT"),
    (DatasetError, "E_DATASET"),
    (LookupError, "E_LOOKUP"),
    (OSError, "E_IO"),
    (ValueError, "E_VALUE"),
]


def error_code(exc: BaseException) -> str:
    for kind, code in _CODES:
        if isinstance(exc, kind):
            return code
    return "E_INTERNAL"


def emit(record: dict) -> None:
    print(json.dumps(record, sort_keys=True), flush=True)


# ------------------------------------------------------------------ config


def parse_overrides(tokens: list[str]) -> dict:
    out = {}
    for tok in tokens:
        if not tok.startswith("--") or "=" not in tok:
            raise UsageError(f"expected --field=value, got {tok!r}")
        key, raw = tok[2:].split("=", 1)
        try:
            out[key.replace("-", "_")] = json.loads(raw)
        except json.JSONDecodeError:
            out[key.replace("-", "_")] = raw
    return out


def load_config(path: str | None, overrides: dict) -> dict:
    cfg = {}
    if path:
        try:
            cfg = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON: {exc}") from None
        if not isinstance(cfg, dict):
            raise ConfigError(f"{path}: config must be a JSON object")
    cfg.update(overrides)
    seed = os.environ.get("DSMIL_SEED")
    if seed is not None:
        try:
            cfg["seed"] = int(seed)
        except ValueError:
            raise ConfigError(f"DSMIL_SEED must be an integer, got {seed!r}") from None
    return cfg


def _take(cfg: dict, key: str, default=None):
    return cfg.pop(key) if key in cfg else default


def _train_config(cfg: dict) -> TrainConfig:
    try:
        return TrainConfig.from_dict(cfg)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def _dataset(path: str, what: str = "dataset"):
    if not path:
        raise ConfigError(f"no {what} path given")
    head, bags = read_dataset_with_header(path)
    if head is None:
        raise DatasetError(f"{path}: dataset is empty")
    return head, bags


# --------------------------------------------------------------- generate


def cmd_generate(cfg: dict) -> dict:
    output = _take(cfg, "output")
    test_output = _take(cfg, "test_output")
    num_test = int(_take(cfg, "num_test", 100))
    if not output:
        raise ConfigError("generate needs --output=PATH")
    try:
        syn = SyntheticConfig.from_dict(cfg)
    except (TypeError, DatasetError) as exc:
        raise ConfigError(str(exc)) from None
    if test_output:
        train_bags, test_bags = generate_split(syn, num_test)
    else:
        train_bags, test_bags = generate_dataset(syn), []
    Path(output).parent.mkdir(parents=True, exist_ok=True)
    write_dataset(train_bags, output, syn.classes, syn.feature_dim)
    summary = {"event": "generated", "path": output, "images": len(train_bags), "classes": syn.classes,
               "proposals": sum(len(b.boxes) for b in train_bags)}
    if test_output:
        Path(test_output).parent.mkdir(parents=True, exist_ok=True)
        write_dataset(test_bags, test_output, syn.classes, syn.feature_dim)
        summary.update(test_path=test_output, test_images=len(test_bags))
    emit(summary)
    return summary


# ------------------------------------------------------------------ train


def cmd_train(cfg: dict) -> dict:
    config = _train_config(cfg)
    head, bags = _dataset(config.dataset)
    classes, dim = int(head["classes"]), int(head["feature_dim"])
    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)
    result = train(config, bags, classes, dim, on_log=emit)
    ckpt = out / "checkpoint.bin"
    save_checkpoint(ckpt, result.params, config, classes, dim)
    with open(out / "log.jsonl", "w", encoding="utf-8") as fh:
        for rec in result.log:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    (out / "config.json").write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n")
    plotting.loss_curve(result.log, out / "loss.png")
    summary = {"event": "trained", "checkpoint": str(ckpt), "iterations": config.max_iterations,
               "config_hash": config.hash()}
    emit(summary)
    return summary


# ------------------------------------------------------------------- eval


def cmd_eval(checkpoint: str, dataset: str, out: str | None) -> dict:
    params, config, head = load_checkpoint(checkpoint)
    data_head, bags = _dataset(dataset)
    check_compatible(head, data_head)
    metrics = evaluate_model(params, bags, config, head["classes"])
    out_dir = Path(out) if out else Path(checkpoint).parent
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "metrics.json").write_text(json.dumps(metrics, indent=2, sort_keys=True) + "\n")
    emit({"event": "evaluated", **metrics})
    return metrics


# ----------------------------------------------------------------- ablate


def ablation_runs(base: TrainConfig, variants: list[str], k_values: list[int], seeds: list[int]) -> list[tuple[str, TrainConfig]]:
    """(row label, config) for every variant/seed, then every K/seed of the full model."""
    runs = []
    for name in variants:
        if name not in VARIANTS:
            raise ConfigError(f"unknown variant {name!r}; choose from {sorted(VARIANTS)}")
        for s in seeds:
            runs.append((name, TrainConfig(**{**asdict(base), **VARIANTS[name], "seed": s}).validate()))
    for k in k_values:
        for s in seeds:
            runs.append((f"K={k}", TrainConfig(**{**asdict(base), **VARIANTS[K_BASE], "K": int(k), "seed": s}).validate()))
    return runs


def _train_and_score(config: TrainConfig, train_bags, test_bags, classes: int, dim: int) -> dict:
    result = train(config, train_bags, classes, dim)
    return evaluate_model(result.params, test_bags, config, classes)


def _worker(args) -> dict:
    config_dict, train_path, test_path = args
    config = TrainConfig.from_dict(config_dict)
    train_bags, classes, dim = load_dataset(train_path)
    test_bags = load_dataset(test_path)[0]
    return _train_and_score(config, train_bags, test_bags, classes, dim)


def run_ablation(base: TrainConfig, train_bags, test_bags, classes: int, dim: int, variants: list[str],
                 k_values: list[int], seeds: list[int], workers: int = 1, on_result=None,
                 paths: tuple[str, str] | None = None) -> list[dict]:
    """Train and score every run; identical configs are trained once.

    Returns one row per variant label with per-seed mAP/CorLoc and medians.
    Parallel workers reload the datasets from ``paths``.
    """
    runs = ablation_runs(base, variants, k_values, seeds)
    unique: dict[str, TrainConfig] = {}
    for _, cfg in runs:
        unique.setdefault(cfg.hash(), cfg)
    scores: dict[str, dict] = {}
    if workers > 1 and paths is not None:
        keys = list(unique)
        with ProcessPoolExecutor(max_workers=workers) as pool:
            jobs = [(unique[k].to_dict(), *paths) for k in keys]
            for k, m in zip(keys, pool.map(_worker, jobs)):
                scores[k] = m
    else:
        for k, cfg in unique.items():
            scores[k] = _train_and_score(cfg, train_bags, test_bags, classes, dim)
    rows: dict[str, dict] = {}
    for label, cfg in runs:
        m = scores[cfg.hash()]
        row = rows.setdefault(label, {"variant": label, "K": cfg.K, "seeds": [], "map": [], "corloc": []})
        row["seeds"].append(cfg.seed)
        row["map"].append(m["map"])
        row["corloc"].append(m["corloc"])
        if on_result is not None:
            on_result({"event": "run", "variant": label, "seed": cfg.seed, "map": m["map"], "corloc": m["corloc"]})
    for row in rows.values():
        row["median_map"] = statistics.median(row["map"])
        row["median_corloc"] = statistics.median(row["corloc"])
    return list(rows.values())


def write_ablation(rows: list[dict], out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "ablation.json").write_text(json.dumps({"rows": rows}, indent=2) + "\n")
    with open(out / "ablation.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["variant", "K", "seed", "map", "corloc"])
        for row in rows:
            for s, m, c in zip(row["seeds"], row["map"], row["corloc"]):
                w.writerow([row["variant"], row["K"], s, repr(m), repr(c)])
            w.writerow([row["variant"], row["K"], "median", repr(row["median_map"]), repr(row["median_corloc"])])
    plotting.ablation_chart(rows, out / "ablation.png")


def cmd_ablate(cfg: dict) -> list[dict]:
    variants = list(_take(cfg, "variants", list(VARIANTS)))
    k_values = [int(k) for k in _take(cfg, "k_values", [1, 2, 3, 4])]
    num_seeds = int(_take(cfg, "num_seeds", 5))
    workers = int(_take(cfg, "workers", 1))
    base = _train_config(cfg)
    if num_seeds < 1:
        raise ConfigError("num_seeds must be >= 1")
    head, train_bags = _dataset(base.dataset)
    test_path = base.test_dataset or base.dataset
    test_head, test_bags = _dataset(test_path, "test dataset")
    if (test_head["classes"], test_head["feature_dim"]) != (head["classes"], head["feature_dim"]):
        raise CompatibilityError(f"{test_path} does not match {base.dataset} in classes/feature_dim")
    seeds = [base.seed + i for i in range(num_seeds)]
    rows = run_ablation(base, train_bags, test_bags, int(head["classes"]), int(head["feature_dim"]), variants,
                        k_values, seeds, workers=workers, on_result=emit, paths=(base.dataset, test_path))
    write_ablation(rows, Path(base.out))
    for row in rows:
        emit({"event": "median", "variant": row["variant"], "map": row["median_map"], "corloc": row["median_corloc"]})
    return rows


# --------------------------------------------------------- dump-attention


def attention_matrices(checkpoint: str, dataset: str, image_id: str):
    params, config, head = load_checkpoint(checkpoint)
    data_head, bags = _dataset(dataset)
    check_compatible(head, data_head)
    bag = next((b for b in bags if b.image_id == image_id), None)
    if bag is None:
        raise LookupFailure(f"image {image_id!r} not in {dataset}")
    batch = Batch.from_bags([bag])
    records = discovery_forward(Tensor(batch.features), params.discovery, batch.group)
    return bag, [r.weights.value for r in records]


def cmd_dump_attention(checkpoint: str, dataset: str, image_id: str, out: str) -> dict:
    bag, mats = attention_matrices(checkpoint, dataset, image_id)
    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "attention.csv"
    n = len(bag.boxes)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        if not mats:
            fh.write("# checkpoint has no discovery modules (discovery_count=0); nothing to dump\n")
        w = csv.writer(fh)
        w.writerow(["module", "proposal", "x1", "y1", "x2", "y2"] + [f"w{j}" for j in range(n)])
        for k, mat in enumerate(mats):
            for i in range(n):
                w.writerow([k, i] + [repr(float(v)) for v in bag.boxes[i]] + [repr(float(v)) for v in mat[i]])
    for k, mat in enumerate(mats):
        plotting.attention_heatmap(mat, out_dir / f"attention_{k}.png", f"{image_id} module {k}")
    summary = {"event": "attention", "path": str(path), "image_id": image_id, "modules": len(mats), "proposals": n}
    emit(summary)
    return summary


def read_attention_csv(path) -> dict[int, np.ndarray]:
    """Module index -> weight matrix, as written by ``dump-attention``."""
    mats: dict[int, list] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    reader = csv.reader(lines)
    next(reader, None)
    for row in reader:
        mats.setdefault(int(row[0]), []).append([float(v) for v in row[6:]])
    return {k: np.array(v) for k, v in mats.items()}


# ------------------------------------------------------------------- main


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="dsmil", description="Weakly supervised detection over proposal feature bags.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in ("generate", "train", "ablate"):
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON config file")
    p = sub.add_parser("eval")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", help="directory for metrics.json (default: next to the checkpoint)")
    p = sub.add_parser("dump-attention")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--image-id", required=True)
    p.add_argument("--out", default=".")
    return parser


def run(argv: list[str]) -> None:
    args, extra = build_parser().parse_known_args(argv)
    if args.command in ("generate", "train", "ablate"):
        cfg = load_config(args.config, parse_overrides(extra))
        {"generate": cmd_generate, "train": cmd_train, "ablate": cmd_ablate}[args.command](cfg)
        return
    if extra:
        raise UsageError(f"unexpected arguments: {' '.join(extra)}")
    if args.command == "eval":
        cmd_eval(args.checkpoint, args.dataset, args.out)
    else:
        cmd_dump_attention(args.checkpoint, args.dataset, args.image_id, args.out)


def main(argv: list[str] | None = None) -> int:
    try:
        run(sys.argv[1:] if argv is None else argv)
    except Exception as exc:  # every failure becomes one parsable line
        msg = " ".join(str(exc).split()) or type(exc).__name__
        print(f"{error_code(exc)}: {msg}", file=sys.stderr)
        return 1
    return 0

