"""Training objectives: embedding regression, known-character classification,
center loss with its mini-batch center update, radical aggregation
cross-entropy, and their weighted combination.

All batch reductions are means; per-sample terms follow the usual sums over
the full H x W x C embedding grid.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor

LOG_FLOOR = 1e-12
TERMS = ("hpe", "kcls_d", "kcls_t", "center", "race")


def loss_hpe(a_d: Tensor, a_t: Tensor) -> Tensor:
    """Half squared difference summed over each embedding, averaged over the batch."""
    if a_d.shape != a_t.shape:
        raise ValueError(f"loss_hpe: shape mismatch {a_d.shape} vs {a_t.shape}")
    B = a_d.shape[0]
    return dc.scale(dc.sum(dc.square(a_d - a_t)), 0.5 / B)


def _one_hot(labels: np.ndarray, n: int, dtype) -> np.ndarray:
    out = np.zeros((len(labels), n), dtype=dtype)
    out[np.arange(len(labels)), labels] = 1
    return out


def loss_kcls(logits: Tensor, labels) -> Tensor:
    """Softmax cross-entropy against integer class labels in ``[0, n)``."""
    labels = np.asarray(labels, dtype=np.int64)
    B, n = logits.shape
    if labels.shape != (B,):
        raise ValueError(f"loss_kcls: {labels.shape[0] if labels.ndim else 0} labels for batch of {B}")
    if labels.min() < 0 or labels.max() >= n:
        raise ValueError(f"loss_kcls: labels must lie in [0, {n}), got range [{labels.min()}, {labels.max()}]")
    logp = dc.log(dc.softmax(logits, axis=1), floor=LOG_FLOOR)
    picked = dc.mul(logp, Tensor(_one_hot(labels, n, logits.dtype), dtype=logits.dtype))
    return dc.scale(dc.sum(picked), -1.0 / B)


@dataclass
class Centers:
    """One running center per known category, shaped like an embedding."""

    values: np.ndarray  # (n_known, C, H, W)
    alpha: float = 0.5

    @classmethod
    def zeros(cls, n_known: int, embedding_shape, alpha: float = 0.5, dtype=None) -> "Centers":
        dtype = dtype or dc.default_dtype()
        return cls(np.zeros((n_known, *embedding_shape), dtype=dtype), alpha)

    @property
    def n_known(self) -> int:
        return self.values.shape[0]


def _check_categories(categories, centers: Centers) -> np.ndarray:
    categories = np.asarray(categories, dtype=np.int64)
    if categories.size and (categories.min() < 0 or categories.max() >= centers.n_known):
        bad = sorted(set(categories[(categories < 0) | (categories >= centers.n_known)].tolist()))
        raise KeyError(f"no center for categories {bad} (have {centers.n_known})")
    return categories


def loss_center(a_t: Tensor, categories, centers: Centers) -> Tensor:
    """Half squared distance of each target embedding to its category center.

    Centers enter as constants; they move only through :func:`update_centers`.
    """
    categories = _check_categories(categories, centers)
    if a_t.shape[1:] != centers.values.shape[1:]:
        raise ValueError(f"loss_center: embedding {a_t.shape[1:]} vs center {centers.values.shape[1:]}")
    target = Tensor(centers.values[categories], dtype=a_t.dtype)
    return dc.scale(dc.sum(dc.square(a_t - target)), 0.5 / a_t.shape[0])


def update_centers(centers: Centers, a_t, categories, alpha: float | None = None) -> Centers:
    """Mini-batch center step: ``C_c -= alpha * sum_i (C_c - a_i) / (1 + n_c)``."""
    alpha = centers.alpha if alpha is None else alpha
    if not 0 <= alpha <= 1:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    feats = a_t.data if isinstance(a_t, Tensor) else np.asarray(a_t)
    categories = _check_categories(categories, centers)
    values = centers.values.copy()
    if alpha == 0:
        return Centers(values, centers.alpha)
    for c in np.unique(categories):
        members = feats[categories == c]
        diff = (values[c][None] - members).sum(axis=0)
        values[c] = values[c] - values.dtype.type(alpha) * diff / (1 + len(members))
    return Centers(values, centers.alpha)


def loss_race(radical_logits: Tensor, radical_counts) -> Tensor:
    """Aggregation cross-entropy over the spatial radical map.

    Per position a softmax over the N = radicals + 1 channels; aggregated
    probabilities are normalized by T = H * W and matched against the radical
    counts completed with a blank count ``T - sum(counts)``.
    """
    B, N, H, W = radical_logits.shape
    counts = np.asarray(radical_counts, dtype=np.float64)
    if counts.shape != (B, N - 1):
        raise ValueError(f"loss_race: counts shape {counts.shape}, expected ({B}, {N - 1})")
    T = H * W
    used = counts.sum(axis=1)
    if np.any(used > T):
        raise ValueError(f"loss_race: radical counts {used.max():g} exceed the {T} spatial positions")
    targets = np.concatenate([counts, (T - used)[:, None]], axis=1) / T
    probs = dc.softmax(radical_logits, axis=1)
    aggregated = dc.scale(dc.sum(probs, axis=(2, 3)), 1.0 / T)
    logp = dc.log(aggregated, floor=LOG_FLOOR)
    weighted = dc.mul(logp, Tensor(targets, dtype=radical_logits.dtype))
    return dc.scale(dc.sum(weighted), -1.0 / B)


@dataclass
class LossWeights:
    hpe: float = 1.0
    kcls_d: float = 0.01
    kcls_t: float = 0.01
    center: float = 0.003
    race: float = 1.0
    enabled: dict[str, bool] = field(default_factory=lambda: {t: True for t in TERMS})

    def __post_init__(self):
        unknown = set(self.enabled) - set(TERMS)
        if unknown:
            raise ValueError(f"unknown loss terms {sorted(unknown)}")
        self.enabled = {t: bool(self.enabled.get(t, True)) for t in TERMS}
        for f in fields(self):
            if f.name != "enabled" and getattr(self, f.name) < 0:
                raise ValueError(f"loss weight {f.name} must be non-negative")
        if not any(self.enabled.values()):
            raise ValueError("at least one loss term must be enabled")

    @classmethod
    def only(cls, *terms: str) -> "LossWeights":
        return cls(enabled={t: t in terms for t in TERMS})

    def weight(self, term: str) -> float:
        return getattr(self, term) if self.enabled[term] else 0.0

    def active(self) -> list[str]:
        return [t for t in TERMS if self.enabled[t]]


@dataclass
class LossReport:
    components: dict[str, float]
    total: float
    total_tensor: Tensor | None = None

    def row(self) -> dict[str, float]:
        out = {f"loss_{t}": self.components.get(t, 0.0) for t in TERMS}
        out["loss_total"] = self.total
        return out


def loss_total(components: dict, weights: LossWeights) -> LossReport:
    """Weighted sum of the enabled terms; disabled terms contribute nothing.

    ``components`` maps term names to Tensors (or plain floats).
    """
    if not any(weights.enabled.values()):
        raise ValueError("loss_total: all terms disabled")
    missing = [t for t in weights.active() if t not in components]
    if missing:
        raise ValueError(f"loss_total: enabled terms {missing} have no component")
    values = {}
    total_tensor = None
    total = 0.0
    for t in weights.active():
        c = components[t]
        w = weights.weight(t)
        if isinstance(c, Tensor):
            values[t] = c.item()
            term = dc.scale(c, w)
            total_tensor = term if total_tensor is None else total_tensor + term
        else:
            values[t] = float(c)
        total += w * values[t]
    if total_tensor is not None:
        total = total_tensor.item()
    return LossReport(values, total, total_tensor)
