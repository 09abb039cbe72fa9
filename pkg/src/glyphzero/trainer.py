"""Pair construction, the optimization loop, checkpoints and training logs."""

from __future__ import annotations

import csv
import hashlib
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from . import diffcore as dc
from . import losses as L
from . import serialization
from .glyphs import GlyphDataset, GlyphImage, SplitSpec, augment, render_glyph
from .inference import build_bank, evaluate
from .network import Model, ModelConfig
from .seeding import derive_seed, rng_for

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"GZCKPT\r\n"
LOG_COLUMNS = (
    "step", "epoch", "loss_hpe", "loss_kcls_d", "loss_kcls_t",
    "loss_center", "loss_race", "loss_total", "val_accuracy",
)


@dataclass
class Augmentation:
    blur_sigma: float = 0.0
    rotation: float = 0.0  # uniform angle in [-rotation, rotation] degrees

    @property
    def is_identity(self) -> bool:
        return self.blur_sigma == 0 and self.rotation == 0


@dataclass
class TrainConfig:
    epochs: int = 60
    batch_size: int = 32
    lr: float = 1e-3
    schedule: str = "constant"  # or "cosine"
    optimizer: str = "adam"  # or "sgd"
    momentum: float = 0.9
    betas: tuple[float, float] = (0.9, 0.999)
    weight_decay: float = 1e-4
    loss_weights: L.LossWeights = field(default_factory=L.LossWeights)
    center_alpha: float = 0.5
    style: str = "variant"
    augmentation: Augmentation = field(default_factory=Augmentation)
    fresh_variants: bool = True
    validate_every: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 (batch norm needs two samples)")
        if self.style not in ("variant", "complex"):
            raise ValueError(f"training style must be 'variant' or 'complex', got {self.style!r}")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.schedule not in ("constant", "cosine"):
            raise ValueError(f"unknown schedule {self.schedule!r}")
        self.betas = tuple(self.betas)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d


@dataclass
class SamplePair:
    training_image: GlyphImage
    target_image: GlyphImage
    char_id: int
    radical_counts: np.ndarray


@dataclass
class PairBatch:
    char_ids: np.ndarray
    categories: np.ndarray  # index into the known (training) characters
    training_images: np.ndarray  # (B, S, S)
    target_images: np.ndarray  # (B, S, S), canonical, never augmented
    radical_counts: np.ndarray  # (B, n_radicals)

    def __len__(self) -> int:
        return len(self.char_ids)

    def pairs(self) -> list[SamplePair]:
        return [
            SamplePair(
                GlyphImage(self.training_images[i], "training", int(c)),
                GlyphImage(self.target_images[i], "canonical", int(c)),
                int(c),
                self.radical_counts[i],
            )
            for i, c in enumerate(self.char_ids)
        ]


def training_images(
    dataset: GlyphDataset,
    char_ids,
    style: str,
    augmentation: Augmentation,
    seed: int,
    epoch: int,
    fresh_variants: bool = False,
) -> np.ndarray:
    """Training-branch inputs for one epoch.

    With ``fresh_variants`` the styled glyphs are re-rendered from the atlas
    with an epoch-specific seed, so every epoch sees a new "font" sample.
    """
    if fresh_variants and dataset.atlas is not None:
        render_seed = derive_seed(seed, "variants", epoch)
        base = [render_glyph(dataset.spec(c), dataset.atlas, style, dataset.image_size, render_seed) for c in char_ids]
    else:
        base = [GlyphImage(p, style, int(c)) for c, p in zip(char_ids, dataset.glyphs(style, char_ids))]
    if augmentation.is_identity:
        return np.stack([g.pixels for g in base])
    rot = (-augmentation.rotation, augmentation.rotation)
    return np.stack(
        [augment(g, augmentation.blur_sigma, rot, derive_seed(seed, "augment", epoch, g.char_id)).pixels for g in base]
    )


def make_pairs(
    split: SplitSpec,
    dataset: GlyphDataset,
    style: str = "variant",
    augmentation: Augmentation | None = None,
    seed: int = 0,
    batch_size: int = 32,
    epoch: int = 0,
    fresh_variants: bool = False,
) -> Iterator[PairBatch]:
    """Yield one epoch of (training-style, canonical) pair batches.

    Every training character appears exactly once per epoch in an order fixed
    by ``(seed, epoch)``; a trailing batch with fewer than two pairs is dropped.
    """
    if not split.train_ids:
        raise ValueError("make_pairs: training split is empty")
    if style not in ("variant", "complex"):
        raise ValueError(f"make_pairs: style must be 'variant' or 'complex', got {style!r}")
    augmentation = augmentation or Augmentation()
    known = sorted(split.train_ids)
    category = {c: i for i, c in enumerate(known)}
    order = np.asarray(split.train_ids)[rng_for(seed, "shuffle", epoch).permutation(len(split.train_ids))]
    for start in range(0, len(order), batch_size):
        ids = order[start : start + batch_size]
        if len(ids) < 2:
            break
        yield PairBatch(
            ids.astype(np.int64),
            np.array([category[int(c)] for c in ids], dtype=np.int64),
            training_images(dataset, ids, style, augmentation, seed, epoch, fresh_variants),
            dataset.glyphs("canonical", ids),
            dataset.counts(ids),
        )


# ---------------------------------------------------------------------------
# optimizers


def _decays(name: str) -> bool:
    # conv and affine weights only; norms, slopes and biases are exempt
    return name.endswith(".weight")


class Optimizer:
    """Adam (decoupled weight decay) or momentum SGD over named parameters.

    Parameters whose gradient is identically zero this step are left untouched.
    """

    def __init__(self, params: dict[str, dc.Parameter], config: TrainConfig):
        self.params = params
        self.config = config
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()} if config.optimizer == "adam" else None

    def step(self, lr: float) -> None:
        cfg = self.config
        self.t += 1
        b1, b2 = cfg.betas
        for name, p in self.params.items():
            g = p.grad
            if not np.any(g):
                continue
            dt = p.data.dtype.type
            if _decays(name) and cfg.weight_decay:
                p.data *= dt(1 - lr * cfg.weight_decay)
            if self.v is None:
                self.m[name] = dt(cfg.momentum) * self.m[name] + g
                p.data -= dt(lr) * self.m[name]
                continue
            self.m[name] = dt(b1) * self.m[name] + dt(1 - b1) * g
            self.v[name] = dt(b2) * self.v[name] + dt(1 - b2) * g * g
            mhat = self.m[name] / dt(1 - b1**self.t)
            vhat = self.v[name] / dt(1 - b2**self.t)
            p.data -= dt(lr) * mhat / (np.sqrt(vhat) + dt(1e-8))


def learning_rate(config: TrainConfig, step: int, total_steps: int) -> float:
    if config.schedule == "cosine":
        return 0.5 * config.lr * (1 + math.cos(math.pi * step / max(total_steps, 1)))
    return config.lr


# ---------------------------------------------------------------------------
# single step


def compute_losses(model: Model, centers: L.Centers, batch: PairBatch, weights: L.LossWeights):
    """Forward both branches and assemble the enabled loss terms."""
    out_d, out_t = model.forward_pair(batch.training_images, batch.target_images)
    parts = {}
    if weights.enabled["hpe"]:
        # the canonical embedding is the regression target: hpe trains the training branch only
        parts["hpe"] = L.loss_hpe(out_d.embedding, out_t.embedding.detach())
    if weights.enabled["kcls_d"]:
        parts["kcls_d"] = L.loss_kcls(out_d.category_logits, batch.categories)
    if weights.enabled["kcls_t"]:
        parts["kcls_t"] = L.loss_kcls(out_t.category_logits, batch.categories)
    if weights.enabled["center"]:
        parts["center"] = L.loss_center(out_t.embedding, batch.categories, centers)
    if weights.enabled["race"]:
        parts["race"] = L.loss_race(out_t.radical_map, batch.radical_counts)
    return L.loss_total(parts, weights), out_d, out_t


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, last_good: bytes | None):
        super().__init__(message)
        self.last_good = last_good


@dataclass
class TrainingLog:
    rows: list[dict] = field(default_factory=list)

    def record_step(self, step: int, epoch: int, report: L.LossReport) -> None:
        self.rows.append({"step": step, "epoch": epoch, **report.row(), "val_accuracy": ""})

    def record_epoch(self, step: int, epoch: int, val_accuracy: float) -> None:
        row = {k: "" for k in LOG_COLUMNS}
        row.update(step=step, epoch=epoch, val_accuracy=val_accuracy)
        self.rows.append(row)

    def step_rows(self) -> list[dict]:
        return [r for r in self.rows if r["val_accuracy"] == ""]

    def epoch_rows(self) -> list[dict]:
        return [r for r in self.rows if r["val_accuracy"] != ""]

    def write_csv(self, path) -> Path:
        path = Path(path)
        with path.open("w", newline="", encoding="utf-8") as fh:
            writer = csv.DictWriter(fh, fieldnames=LOG_COLUMNS, lineterminator="\n")
            writer.writeheader()
            for r in self.rows:
                writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
        return path


@dataclass
class TrainResult:
    checkpoint: bytes
    log: TrainingLog
    best_epoch: int
    best_val_accuracy: float | None
    centers: L.Centers


def train(
    model: Model,
    centers: L.Centers,
    dataset: GlyphDataset,
    split: SplitSpec,
    config: TrainConfig,
    candidate_ids=None,
) -> TrainResult:
    """Optimize the weighted objective over the split's training characters.

    After every ``validate_every`` epochs the validation characters are
    recognized against a bank over ``candidate_ids`` (default: every
    character in the dataset) and the best-scoring state is kept. On return
    ``model`` holds that state.
    """
    weights = config.loss_weights
    centers = L.Centers(centers.values.copy(), config.center_alpha)
    known = sorted(split.train_ids)
    if centers.n_known != len(known):
        raise ValueError(f"{centers.n_known} centers for {len(known)} training characters")
    candidate_ids = list(dataset.char_ids if candidate_ids is None else candidate_ids)
    opt = Optimizer(model.params, config)
    steps_per_epoch = sum(1 for s in range(0, len(split.train_ids), config.batch_size) if len(split.train_ids) - s >= 2)
    total_steps = steps_per_epoch * config.epochs
    history = TrainingLog()
    meta = {"train": config.to_dict(), "known_char_ids": known}

    def snapshot() -> bytes:
        return checkpoint_bytes(model, centers, meta)

    best = (snapshot(), -1, None)
    last_good = best[0]
    step = 0
    val_images = validation_images(dataset, split.val_ids, config) if split.val_ids else None
    for epoch in range(config.epochs):
        model.train()
        batches = make_pairs(
            split, dataset, config.style, config.augmentation, config.seed,
            config.batch_size, epoch, config.fresh_variants,
        )
        for batch in batches:
            model.zero_grad()
            report, _, out_t = compute_losses(model, centers, batch, weights)
            if not math.isfinite(report.total):
                raise TrainingDiverged(f"non-finite loss at step {step} (epoch {epoch})", last_good)
            report.total_tensor.backward()
            opt.step(learning_rate(config, step, total_steps))
            if weights.enabled["center"]:
                centers = L.update_centers(centers, out_t.embedding, batch.categories)
            history.record_step(step, epoch, report)
            step += 1
        last_good = snapshot()
        if val_images is None:
            best = (last_good, epoch, None)
        elif (epoch + 1) % config.validate_every == 0 or epoch + 1 == config.epochs:
            bank = build_bank(model, candidate_ids, dataset)
            acc = evaluate(model, bank, split.val_ids, val_images).accuracy
            history.record_epoch(step - 1, epoch, acc)
            log.info("epoch %d: val accuracy %.4f", epoch, acc)
            if best[2] is None or acc > best[2]:
                best = (last_good, epoch, acc)
    blob, best_epoch, best_acc = best
    state = read_checkpoint_bytes(blob)
    model.load_state_arrays(state.arrays)
    model.eval()
    return TrainResult(blob, history, best_epoch, best_acc, state.centers)


def validation_images(dataset: GlyphDataset, char_ids, config: TrainConfig) -> np.ndarray:
    """Query images for held-out characters: the dataset's rendering in the
    training style, with the training augmentation under a separate seed."""
    aug = config.augmentation
    imgs = dataset.glyphs(config.style, char_ids)
    if aug.is_identity:
        return imgs
    rot = (-aug.rotation, aug.rotation)
    return np.stack(
        [
            augment(GlyphImage(p, config.style, int(c)), aug.blur_sigma, rot, derive_seed(config.seed, "eval-augment", int(c))).pixels
            for c, p in zip(char_ids, imgs)
        ]
    )


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class CheckpointState:
    model_config: ModelConfig
    arrays: dict[str, np.ndarray]
    centers: L.Centers
    known_char_ids: list[int]
    metadata: dict

    def build(self) -> Model:
        model = Model(self.model_config)
        model.load_state_arrays(self.arrays)
        return model.eval()


def checkpoint_bytes(model: Model, centers: L.Centers, metadata: dict | None = None) -> bytes:
    meta = dict(metadata or {})
    meta["model"] = model.config.to_dict()
    meta["center_alpha"] = centers.alpha
    center_entries = {"centers.values": centers.values}
    if "known_char_ids" in meta:
        center_entries["centers.char_ids"] = np.asarray(meta["known_char_ids"], dtype=np.int64)
    return serialization.encode(CHECKPOINT_MAGIC, meta, [model.state_arrays(), center_entries])


def read_checkpoint_bytes(data: bytes, source: str = "<bytes>") -> CheckpointState:
    meta, (arrays, center_entries) = serialization.decode(data, CHECKPOINT_MAGIC, 2, source)
    mcfg = meta["model"]
    config = ModelConfig(**mcfg)
    centers = L.Centers(center_entries["centers.values"], meta["center_alpha"])
    known = center_entries.get("centers.char_ids", np.zeros(0, np.int64)).tolist()
    return CheckpointState(config, arrays, centers, known, meta)


def save_checkpoint(model: Model, centers: L.Centers, config: dict | None, path) -> Path:
    path = Path(path)
    path.write_bytes(checkpoint_bytes(model, centers, config))
    return path


def load_checkpoint(path) -> CheckpointState:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return read_checkpoint_bytes(path.read_bytes(), str(path))


def checkpoint_digest(blob: bytes) -> str:
    return hashlib.sha256(blob).hexdigest()
