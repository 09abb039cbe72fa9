"""Evaluation protocols: single runs, training-size sweeps, ablation grids
and the parameter / memory / speed report."""

from __future__ import annotations

import csv
import itertools
import logging
import time
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import losses as L
from .glyphs import GlyphDataset, SplitSpec, split_dataset
from .inference import EmbeddingBank, EvalReport, build_bank, evaluate, nearest
from .network import Model, ModelConfig, build_model, count_parameters
from .trainer import TrainConfig, TrainResult, checkpoint_digest, train, validation_images

log = logging.getLogger(__name__)

# loss families as toggled in the ablation; "kcls" drives both branch terms
LOSS_FAMILIES = {
    "hpe": ("hpe",),
    "kcls": ("kcls_d", "kcls_t"),
    "center": ("center",),
    "race": ("race",),
}

# the fifteen non-empty combinations, singles first, then pairs, triples, all
LOSS_COMBINATIONS = (
    ("race",), ("center",), ("kcls",), ("hpe",),
    ("center", "race"), ("kcls", "race"), ("kcls", "center"),
    ("hpe", "race"), ("hpe", "center"), ("hpe", "kcls"),
    ("kcls", "center", "race"), ("hpe", "center", "race"),
    ("hpe", "kcls", "race"), ("hpe", "kcls", "center"),
    ("hpe", "kcls", "center", "race"),
)

REFERENCE_COMPLEXITY = {
    "classes": 27484,
    "params_mb": 46.54,
    "memory": "~900MB",
    "time_gpu_ms": 10,
    "time_cpu_ms": 172,
}


def weights_for(families, base: L.LossWeights | None = None) -> L.LossWeights:
    """Enable exactly the terms of ``families``, keeping the weights of ``base``."""
    unknown = [f for f in families if f not in LOSS_FAMILIES]
    if unknown:
        raise ValueError(f"unknown loss families {unknown}; choose from {sorted(LOSS_FAMILIES)}")
    terms = {t for f in families for t in LOSS_FAMILIES[f]}
    base = base or L.LossWeights()
    return replace(base, enabled={t: t in terms for t in L.TERMS})


@dataclass
class ExperimentResult:
    model: Model
    training: TrainResult
    bank: EmbeddingBank
    report: EvalReport
    split: SplitSpec

    @property
    def accuracy(self) -> float:
        return self.report.accuracy


def model_config_for(base: ModelConfig, dataset: GlyphDataset, split: SplitSpec, **overrides) -> ModelConfig:
    cfg = base.to_dict()
    cfg.update(n_known=len(split.train_ids), n_radical_channels=dataset.n_radicals + 1, input_size=dataset.image_size)
    cfg.update(overrides)
    return ModelConfig(**cfg)


def run_experiment(
    dataset: GlyphDataset,
    split: SplitSpec,
    model_config: ModelConfig,
    train_config: TrainConfig,
    candidate_ids=None,
) -> ExperimentResult:
    """Train on the split, bank every candidate, recognize the unseen test characters."""
    mcfg = model_config_for(model_config, dataset, split)
    model = build_model(mcfg)
    centers = L.Centers.zeros(mcfg.n_known, mcfg.embedding_shape, train_config.center_alpha)
    result = train(model, centers, dataset, split, train_config, candidate_ids)
    candidates = list(dataset.char_ids if candidate_ids is None else candidate_ids)
    bank = build_bank(model, candidates, dataset, provenance={"checkpoint": checkpoint_digest(result.checkpoint)})
    queries = validation_images(dataset, split.test_ids, train_config)
    protocol = {
        "style": train_config.style,
        "train_size": len(split.train_ids),
        "test_size": len(split.test_ids),
        "policy": split.policy,
        "candidates": len(candidates),
        "extra_thinking": mcfg.extra_thinking,
        "losses": "+".join(train_config.loss_weights.active()),
        "blur_sigma": train_config.augmentation.blur_sigma,
        "rotation": train_config.augmentation.rotation,
    }
    report = evaluate(model, bank, split.test_ids, queries, protocol)
    return ExperimentResult(model, result, bank, report, split)


def run_unseen_sweep(
    dataset: GlyphDataset,
    train_sizes,
    model_config: ModelConfig,
    train_config: TrainConfig,
    val_n: int = 50,
    test_n: int = 150,
    policy: str = "radical-covered",
    split_seed: int = 0,
) -> list[dict]:
    """Grow the training set over ``train_sizes`` against one fixed test set."""
    rows = []
    for size in train_sizes:
        try:
            split = split_dataset(dataset.chars, size, val_n, test_n, policy, split_seed)
        except ValueError as exc:
            log.warning("skipping train size %d: %s", size, exc)
            rows.append({"train_size": size, "test_size": test_n, "accuracy": "", "status": f"skipped: {exc}"})
            continue
        res = run_experiment(dataset, split, model_config, train_config)
        rows.append(
            {"train_size": size, "test_size": len(split.test_ids), "accuracy": res.accuracy, "status": "ok"}
        )
        log.info("train size %d: AR %.4f", size, res.accuracy)
    return rows


def run_ablation(
    dataset: GlyphDataset,
    split: SplitSpec,
    model_config: ModelConfig,
    train_config: TrainConfig,
    losses=None,
    extra_thinking=None,
    blur=None,
    rotation=None,
) -> list[dict]:
    """Train and evaluate one model per cell of the requested axes.

    Each axis is a list of values; omitted axes stay at the base
    configuration. ``losses`` holds tuples of loss family names.
    """
    axes = {"losses": losses, "extra_thinking": extra_thinking, "blur": blur, "rotation": rotation}
    varied = {k: v for k, v in axes.items() if v is not None}
    if not varied:
        raise ValueError("run_ablation: vary at least one axis")
    names = list(varied)
    rows = []
    for values in itertools.product(*(varied[n] for n in names)):
        cell = dict(zip(names, values))
        families = tuple(cell.get("losses", ()))
        row = {
            "losses": "+".join(families) if "losses" in cell else "+".join(train_config.loss_weights.active()),
            "extra_thinking": cell.get("extra_thinking", model_config.extra_thinking),
            "blur_sigma": cell.get("blur", train_config.augmentation.blur_sigma),
            "rotation": cell.get("rotation", train_config.augmentation.rotation),
        }
        if "losses" in cell and not families:
            rows.append({**row, "accuracy": "", "status": "invalid: no loss enabled"})
            continue
        tcfg = train_config
        if "losses" in cell:
            tcfg = replace(tcfg, loss_weights=weights_for(families, tcfg.loss_weights))
        if "blur" in cell or "rotation" in cell:
            aug = replace(tcfg.augmentation, blur_sigma=row["blur_sigma"], rotation=row["rotation"])
            tcfg = replace(tcfg, augmentation=aug)
        mcfg = replace(model_config, extra_thinking=row["extra_thinking"])
        res = run_experiment(dataset, split, mcfg, tcfg)
        rows.append({**row, "accuracy": res.accuracy, "status": "ok"})
        log.info("ablation cell %s: AR %.4f", row, res.accuracy)
    return rows


def et_difference(rows: list[dict]) -> list[dict]:
    """Pair with/without-ET cells sharing every other setting; report the signed gap."""
    keyed = {}
    for r in rows:
        if r["status"] != "ok":
            continue
        key = (r["losses"], r["blur_sigma"], r["rotation"])
        keyed.setdefault(key, {})[bool(r["extra_thinking"])] = r["accuracy"]
    out = []
    for (losses, blur, rot), acc in keyed.items():
        if True in acc and False in acc:
            out.append(
                {"losses": losses, "blur_sigma": blur, "rotation": rot,
                 "with_et": acc[True], "without_et": acc[False], "diff": acc[True] - acc[False]}
            )
    return out


def complexity_report(
    model: Model,
    bank: EmbeddingBank,
    queries: np.ndarray,
    checkpoint: bytes | None = None,
    repeats: int = 1,
) -> dict:
    """Parameter count, storage sizes and mean per-character recognition time."""
    if len(queries) < 100:
        raise ValueError(f"complexity_report: time over at least 100 characters, got {len(queries)}")
    from .inference import embed

    params = count_parameters(model)
    timings = []
    for _ in range(repeats):
        start = time.perf_counter()
        for q in queries:
            nearest(bank, embed(model, q[None], "training"))
        timings.append((time.perf_counter() - start) / len(queries))
    return {
        "parameters": params.count,
        "parameter_bytes": params.bytes_fp32,
        "checkpoint_bytes": len(checkpoint) if checkpoint is not None else "",
        "bank_entries": len(bank),
        "bank_bytes": bank.nbytes,
        "seconds_per_char": float(np.mean(timings)),
        "timings": timings,
    }


def format_complexity(report: dict) -> str:
    lines = [
        f"parameters:        {report['parameters']} ({report['parameter_bytes'] / 2**20:.3f} MB fp32)",
        f"checkpoint size:   {report['checkpoint_bytes']} bytes",
        f"bank:              {report['bank_entries']} entries, {report['bank_bytes']} bytes",
        f"time per char:     {1000 * report['seconds_per_char']:.3f} ms (CPU)",
        "reference (full scale, 27484 classes, not comparable): "
        f"{REFERENCE_COMPLEXITY['params_mb']} MB params, {REFERENCE_COMPLEXITY['memory']} memory, "
        f"{REFERENCE_COMPLEXITY['time_cpu_ms']} ms CPU / {REFERENCE_COMPLEXITY['time_gpu_ms']} ms GPU per character",
    ]
    return "\n".join(lines)


def write_rows(path, rows: list[dict]) -> Path:
    path = Path(path)
    fields = list(dict.fromkeys(k for r in rows for k in r))
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    return path
