"""Run configuration: one YAML document with nested sections.

Precedence, lowest to highest: built-in defaults, the config file, then
command-line flags (``--seed``, ``--out``). Unknown keys anywhere are an
error so a typo never silently falls back to a default.

All randomness flows from the single global ``seed`` through named
substreams: ``data`` (atlas, characters, renders, splits), ``init``
(weights) and ``train`` (batch order, fresh variants, augmentation).
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from . import losses as L
from .network import ModelConfig
from .seeding import derive_seed
from .trainer import Augmentation, TrainConfig

DEFAULTS: dict = {
    "seed": 0,
    "out": "runs",
    "data": {
        "dir": None,  # read this dataset directory instead of generating one
        "n_radicals": 40,
        "n_chars": 600,
        "cell_px": 8,
        "image_size": 32,
    },
    "split": {"train": 200, "val": 50, "test": 350, "policy": "radical-covered"},
    "model": {
        "stem_channels": 16,
        "channels": [16, 32, 64],
        "blocks_per_stage": 1,
        "prelu_init_slope": 0.25,
        "extra_thinking": True,
        "et_cells": 1,
        "embedding_norm": "none",
    },
    "train": {
        "epochs": 300,
        "batch_size": 32,
        "lr": 1e-3,
        "schedule": "cosine",
        "optimizer": "adam",
        "momentum": 0.9,
        "betas": [0.9, 0.999],
        "weight_decay": 1e-4,
        "center_alpha": 0.5,
        "style": "variant",
        "fresh_variants": True,
        "validate_every": 10,
        "blur_sigma": 0.0,
        "rotation": 0.0,
        # hpe scaled down against the published 1 / 0.01 / 0.01 / 0.003 / 1 (LossWeights defaults)
        "weights": {"hpe": 0.01, "kcls_d": 1.0, "kcls_t": 1.0, "center": 0.003, "race": 1.0},
        "losses": ["hpe", "kcls_d", "kcls_t", "center", "race"],
    },
    "eval": {"normalize": False, "candidates": "all"},
    "sweep": {"train_sizes": [100, 200, 400], "val": 50, "test": 150},
    "ablate": {
        "losses": None,  # list of loss-family lists, or "all" for the fifteen combinations
        "extra_thinking": None,
        "blur": None,
        "rotation": None,
    },
}


class ConfigError(ValueError):
    pass


def _merge(base: dict, update: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in update.items():
        where = f"{path}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base[key], dict) and key != "weights":
            if not isinstance(value, dict):
                raise ConfigError(f"config key {where!r} must be a section")
            out[key] = _merge(base[key], value, where + ".")
        elif key == "weights":
            unknown = set(value) - set(L.TERMS)
            if unknown:
                raise ConfigError(f"unknown loss weight {sorted(unknown)} under {where!r}")
            out[key].update(value)
        else:
            out[key] = value
    return out


@dataclass
class RunConfig:
    values: dict = field(default_factory=lambda: copy.deepcopy(DEFAULTS))

    @classmethod
    def from_dict(cls, data: dict | None) -> "RunConfig":
        cfg = cls(_merge(DEFAULTS, data or {}))
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        data = yaml.safe_load(path.read_text(encoding="utf-8"))
        if data is not None and not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        return cls.from_dict(data)

    def override(self, **flags) -> "RunConfig":
        """Apply command-line flags; ``None`` means not given."""
        data = copy.deepcopy(self.values)
        for key, value in flags.items():
            if value is not None:
                data[key] = value
        return RunConfig.from_dict(data)

    def validate(self) -> None:
        v = self.values
        if not isinstance(v["seed"], int) or v["seed"] < 0:
            raise ConfigError(f"seed must be a non-negative integer, got {v['seed']!r}")
        if v["split"]["policy"] not in ("radical-covered", "radical-open"):
            raise ConfigError(f"unknown split policy {v['split']['policy']!r}")
        bad = set(v["train"]["losses"]) - set(L.TERMS)
        if bad:
            raise ConfigError(f"unknown loss terms {sorted(bad)}")
        if not v["train"]["losses"]:
            raise ConfigError("train.losses enables no loss term")
        self.model_config()
        self.train_config()

    def __getitem__(self, key):
        return self.values[key]

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.values, sort_keys=True)

    # -- typed views

    @property
    def seed(self) -> int:
        return int(self.values["seed"])

    def data_seed(self) -> int:
        return derive_seed(self.seed, "data")

    def make_dataset(self):
        """Generate the synthetic dataset of the data section, with its split attached."""
        from .glyphs import make_dataset, split_dataset

        d, s = self.values["data"], self.values["split"]
        ds = make_dataset(d["n_radicals"], d["n_chars"], d["cell_px"], d["image_size"], self.data_seed())
        ds.split = split_dataset(ds.chars, s["train"], s["val"], s["test"], s["policy"], self.data_seed())
        return ds

    def model_config(self, **overrides) -> ModelConfig:
        m = self.values["model"]
        d = self.values["data"]
        side = int(d["image_size"])
        for _ in m["channels"]:
            side = (side - 1) // 2 + 1
        try:
            return ModelConfig(
                input_size=int(d["image_size"]),
                stem_channels=m["stem_channels"],
                channels=tuple(m["channels"]),
                blocks_per_stage=m["blocks_per_stage"],
                embedding_hw=(side, side),
                n_known=int(self.values["split"]["train"]),
                n_radical_channels=int(d["n_radicals"]) + 1,
                prelu_init_slope=m["prelu_init_slope"],
                extra_thinking=bool(m["extra_thinking"]),
                et_cells=m["et_cells"],
                embedding_norm=m["embedding_norm"],
                seed=derive_seed(self.seed, "init"),
                **overrides,
            )
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"model section: {exc}") from None

    def train_config(self) -> TrainConfig:
        t = self.values["train"]
        try:
            weights = L.LossWeights(**t["weights"], enabled={term: term in t["losses"] for term in L.TERMS})
            return TrainConfig(
                epochs=int(t["epochs"]),
                batch_size=int(t["batch_size"]),
                lr=float(t["lr"]),
                schedule=t["schedule"],
                optimizer=t["optimizer"],
                momentum=float(t["momentum"]),
                betas=tuple(float(b) for b in t["betas"]),
                weight_decay=float(t["weight_decay"]),
                loss_weights=weights,
                center_alpha=float(t["center_alpha"]),
                style=t["style"],
                augmentation=Augmentation(float(t["blur_sigma"]), float(t["rotation"])),
                fresh_variants=bool(t["fresh_variants"]),
                validate_every=int(t["validate_every"]),
                seed=derive_seed(self.seed, "train"),
            )
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"train section: {exc}") from None
