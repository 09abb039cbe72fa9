"""Zero-shot recognition by nearest neighbour in embedding space.

The bank holds the target-branch embedding of a canonical rendering for
every candidate character, including characters never trained on. A query
image is embedded through the training branch and assigned the candidate
with the smallest L1 distance; ties go to the lowest ``char_id``.
"""

from __future__ import annotations

import time
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import serialization
from .glyphs import GlyphDataset, RadicalAtlas, render_glyph
from .network import Model

BANK_MAGIC = b"GZBANK\r\n"


@dataclass
class EmbeddingBank:
    char_ids: np.ndarray  # (n,) int64, strictly increasing
    embeddings: np.ndarray  # (n, D) float32
    embedding_shape: tuple[int, ...]
    provenance: dict = field(default_factory=dict)
    normalize: bool = False

    def __post_init__(self):
        order = np.argsort(self.char_ids, kind="stable")
        self.char_ids = np.asarray(self.char_ids, dtype=np.int64)[order]
        self.embeddings = np.ascontiguousarray(np.asarray(self.embeddings)[order])
        if len(self.char_ids) == 0:
            raise ValueError("embedding bank is empty")
        if self.embeddings.shape != (len(self.char_ids), int(np.prod(self.embedding_shape))):
            raise ValueError(
                f"bank embeddings {self.embeddings.shape} inconsistent with {len(self.char_ids)} "
                f"entries of shape {self.embedding_shape}"
            )

    def __len__(self) -> int:
        return len(self.char_ids)

    def __contains__(self, char_id) -> bool:
        i = np.searchsorted(self.char_ids, char_id)
        return i < len(self.char_ids) and self.char_ids[i] == char_id

    @property
    def nbytes(self) -> int:
        return len(self) * self.embeddings.shape[1] * 4


def _l1_normalize(x: np.ndarray) -> np.ndarray:
    norms = np.abs(x).sum(axis=1, keepdims=True)
    return x / np.maximum(norms, 1e-12)


def embed(model: Model, images: np.ndarray, branch: str = "target", batch_size: int = 128) -> np.ndarray:
    """Flattened eval-mode embeddings of ``images`` through one branch."""
    was_training = model.training
    model.eval()
    try:
        chunks = []
        for i in range(0, len(images), batch_size):
            part = images[i : i + batch_size]
            a = model.backbone(part)
            if branch == "training":
                a = model.extra_thinking(a)
            elif branch != "target":
                raise ValueError(f"unknown branch {branch!r}")
            chunks.append(a.data.reshape(len(part), -1))
        return np.concatenate(chunks)
    finally:
        model.training = was_training


def build_bank(
    model: Model,
    candidate_chars,
    source: GlyphDataset | RadicalAtlas,
    image_size: int | None = None,
    normalize: bool = False,
    provenance: dict | None = None,
) -> EmbeddingBank:
    """Embed the canonical rendering of every candidate character."""
    chars = list(candidate_chars)
    if not chars:
        raise ValueError("build_bank: candidate set is empty")
    if isinstance(source, GlyphDataset):
        ids = [c if isinstance(c, (int, np.integer)) else c.char_id for c in chars]
        images = source.glyphs("canonical", ids)
    else:
        size = image_size or model.config.input_size
        ids = [c.char_id for c in chars]
        images = np.stack([render_glyph(c, source, "canonical", size).pixels for c in chars])
    emb = embed(model, images, "target")
    if normalize:
        emb = _l1_normalize(emb)
    return EmbeddingBank(np.asarray(ids), emb, model.config.embedding_shape, dict(provenance or {}), normalize)


def nearest(bank: EmbeddingBank, queries: np.ndarray, chunk: int = 16) -> np.ndarray:
    """Index of the L1-nearest bank entry for each flattened query (first on ties)."""
    queries = np.asarray(queries, dtype=bank.embeddings.dtype)
    if bank.normalize:
        queries = _l1_normalize(queries)
    out = np.empty(len(queries), dtype=np.int64)
    for i in range(0, len(queries), chunk):
        q = queries[i : i + chunk]
        dist = np.abs(bank.embeddings[None, :, :] - q[:, None, :]).sum(axis=2)
        out[i : i + chunk] = dist.argmin(axis=1)
    return out


def classify_embeddings(bank: EmbeddingBank, queries: np.ndarray) -> np.ndarray:
    return bank.char_ids[nearest(bank, queries)]


def classify(model: Model, bank: EmbeddingBank, test_image: np.ndarray) -> int:
    q = embed(model, np.asarray(test_image)[None], "training")
    return int(classify_embeddings(bank, q)[0])


@dataclass
class EvalReport:
    accuracy: float
    correct: dict[int, bool]
    predictions: dict[int, int]
    confusions: list[tuple[int, int, int]]
    seconds_per_char: float
    protocol: dict = field(default_factory=dict)

    @property
    def n_correct(self) -> int:
        return sum(self.correct.values())

    @property
    def total(self) -> int:
        return len(self.correct)

    def summary(self) -> str:
        lines = [
            f"AR = {100 * self.accuracy:.2f}% ({self.n_correct}/{self.total})",
            f"time per character: {1000 * self.seconds_per_char:.3f} ms",
        ]
        for k, v in sorted(self.protocol.items()):
            lines.append(f"{k}: {v}")
        if self.confusions:
            lines.append("top confusions (true -> predicted x count):")
            lines += [f"  {t} -> {p} x {n}" for t, p, n in self.confusions]
        return "\n".join(lines)

    def rows(self) -> list[dict]:
        return [
            {"char_id": cid, "predicted": self.predictions[cid], "correct": int(ok)}
            for cid, ok in sorted(self.correct.items())
        ]


def evaluate(
    model: Model,
    bank: EmbeddingBank,
    test_ids,
    test_images: np.ndarray,
    protocol: dict | None = None,
) -> EvalReport:
    test_ids = [int(c) for c in test_ids]
    if not test_ids:
        raise ValueError("evaluate: empty test set")
    absent = [c for c in test_ids if c not in bank]
    if absent:
        raise ValueError(f"evaluate: test characters {absent[:10]} missing from the bank")
    start = time.perf_counter()
    preds = classify_embeddings(bank, embed(model, np.asarray(test_images), "training"))
    elapsed = time.perf_counter() - start
    correct = {c: bool(p == c) for c, p in zip(test_ids, preds)}
    predictions = {c: int(p) for c, p in zip(test_ids, preds)}
    mistakes = Counter((c, int(p)) for c, p in zip(test_ids, preds) if p != c)
    confusions = [(t, p, n) for (t, p), n in mistakes.most_common(5)]
    accuracy = sum(correct.values()) / len(correct)
    return EvalReport(accuracy, correct, predictions, confusions, elapsed / len(test_ids), dict(protocol or {}))


def bank_bytes(bank: EmbeddingBank) -> bytes:
    meta = {
        "embedding_shape": list(bank.embedding_shape),
        "normalize": bank.normalize,
        "provenance": bank.provenance,
    }
    entries = {"char_ids": bank.char_ids, "embeddings": bank.embeddings.astype(np.float32)}
    return serialization.encode(BANK_MAGIC, meta, [entries])


def save_bank(bank: EmbeddingBank, path) -> Path:
    path = Path(path)
    path.write_bytes(bank_bytes(bank))
    return path


def load_bank(path) -> EmbeddingBank:
    path = Path(path)
    meta, (entries,) = serialization.decode(path.read_bytes(), BANK_MAGIC, 1, str(path))
    return EmbeddingBank(
        entries["char_ids"], entries["embeddings"], tuple(meta["embedding_shape"]), meta["provenance"], meta["normalize"]
    )
