"""Pseudo-siamese recognition network.

Both branches run the same pre-activation residual backbone (batch norm,
PReLU, conv). The training-style branch additionally passes through one
"extra thinking" residual cell before its heads; with that cell removed
the model is an ordinary weight-shared siamese network.

Heads:
    embedding    A, the backbone output (B, C, H, W)
    category     flatten + affine -> logits over the known training characters
    radical map  1x1 conv C -> N = n_radicals + 1 (target branch only)
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import diffcore as dc
from .diffcore import Parameter, RunningStats, Tensor
from .seeding import rng_for


@dataclass
class ModelConfig:
    input_size: int = 32
    stem_channels: int = 16
    channels: tuple[int, ...] = (16, 32, 64)
    blocks_per_stage: int = 1
    embedding_hw: tuple[int, int] = (4, 4)
    n_known: int = 200
    n_radical_channels: int = 41
    prelu_init_slope: float = 0.25
    extra_thinking: bool = True
    et_cells: int = 1
    embedding_norm: str = "none"
    seed: int = 0

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        self.embedding_hw = tuple(int(v) for v in self.embedding_hw)

    @property
    def embedding_shape(self) -> tuple[int, int, int]:
        return (self.channels[-1], *self.embedding_hw)

    def planned_hw(self) -> tuple[int, int]:
        side = self.input_size
        for _ in self.channels:
            side = (side + 2 - 3) // 2 + 1
        return side, side

    def validate(self) -> None:
        planned = self.planned_hw()
        if planned != self.embedding_hw:
            raise ValueError(
                f"block plan {self.channels} on {self.input_size}px input yields {planned[0]}x{planned[1]} "
                f"but embedding is declared {self.embedding_hw[0]}x{self.embedding_hw[1]}"
            )
        if self.n_radical_channels < 2:
            raise ValueError(f"n_radical_channels must be >= 2 (radicals + blank), got {self.n_radical_channels}")
        if self.n_known < 1:
            raise ValueError(f"n_known must be >= 1, got {self.n_known}")
        if self.embedding_norm not in ("none", "bn", "bn_prelu"):
            raise ValueError(f"unknown embedding_norm {self.embedding_norm!r}")
        if self.blocks_per_stage < 1:
            raise ValueError("blocks_per_stage must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channels"] = list(self.channels)
        d["embedding_hw"] = list(self.embedding_hw)
        return d


@dataclass
class ForwardOutputs:
    embedding: Tensor
    category_logits: Tensor
    radical_map: Tensor | None = None


@dataclass
class ParamReport:
    count: int
    bytes_fp32: int
    per_tensor: dict[str, int] = field(default_factory=dict)

    @property
    def megabytes(self) -> float:
        return self.bytes_fp32 / 2**20


class Model:
    """Parameters, running statistics and the two branch forwards."""

    def __init__(self, config: ModelConfig):
        config.validate()
        self.config = config
        self.params: dict[str, Parameter] = {}
        self.stats: dict[str, RunningStats] = {}
        self.training = True
        self._rng = rng_for(config.seed, "init")
        self._gain_sq = 2.0 / (1.0 + config.prelu_init_slope**2)

        self._conv("stem.weight", config.stem_channels, 1, 3)
        cin = config.stem_channels
        self.cells: list[tuple[str, int, int, int]] = []
        for s, cout in enumerate(config.channels):
            for b in range(config.blocks_per_stage):
                stride = 2 if b == 0 else 1
                name = f"stage{s + 1}.cell{b + 1}"
                self._cell(name, cin, cout, stride)
                self.cells.append((name, cin, cout, stride))
                cin = cout
        if config.embedding_norm != "none":
            self._norm("final", cin, affine=config.embedding_norm == "bn_prelu")
        self.et_cells: list[tuple[str, int, int, int]] = []
        if config.extra_thinking:
            for e in range(config.et_cells):
                name = f"et.cell{e + 1}"
                self._cell(name, cin, cin, 1)
                self.et_cells.append((name, cin, cin, 1))
        C, H, W = config.embedding_shape
        fan = C * H * W
        self._param("kcls.weight", self._rng.standard_normal((config.n_known, fan)) * np.sqrt(1.0 / fan))
        self._param("kcls.bias", np.zeros(config.n_known))
        N = config.n_radical_channels
        self._param("race.weight", self._rng.standard_normal((N, C, 1, 1)) * np.sqrt(1.0 / C))
        self._param("race.bias", np.zeros(N))

    # -- construction helpers

    def _param(self, name: str, value) -> Parameter:
        if name in self.params:
            raise ValueError(f"duplicate parameter name {name!r}")
        p = Parameter(value, name)
        self.params[name] = p
        return p

    def _conv(self, name: str, cout: int, cin: int, k: int) -> None:
        std = np.sqrt(self._gain_sq / (cin * k * k))
        self._param(name, self._rng.standard_normal((cout, cin, k, k)) * std)

    def _norm(self, name: str, channels: int, affine: bool = True) -> None:
        if affine:
            self._param(f"{name}.gamma", np.ones(channels))
            self._param(f"{name}.beta", np.zeros(channels))
            self._param(f"{name}.slope", np.full(channels, self.config.prelu_init_slope))
        self.stats[name] = RunningStats(channels)

    def _cell(self, name: str, cin: int, cout: int, stride: int) -> None:
        self._norm(f"{name}.bn1", cin)
        self._conv(f"{name}.conv1.weight", cout, cin, 3)
        self._norm(f"{name}.bn2", cout)
        self._conv(f"{name}.conv2.weight", cout, cout, 3)
        if stride != 1 or cin != cout:
            self._conv(f"{name}.shortcut.weight", cout, cin, 1)

    # -- modes

    def train(self) -> "Model":
        self.training = True
        return self

    def eval(self) -> "Model":
        self.training = False
        return self

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    # -- forward

    def _norm_act(self, name: str, x: Tensor) -> Tensor:
        p = self.params
        h = dc.batch_norm(x, p[f"{name}.gamma"], p[f"{name}.beta"], self.stats[name], self.training)
        return dc.prelu(h, p[f"{name}.slope"])

    def _apply_cell(self, spec, x: Tensor) -> Tensor:
        name, cin, cout, stride = spec
        p = self.params
        h = self._norm_act(f"{name}.bn1", x)
        if stride != 1 or cin != cout:
            shortcut = dc.conv2d(h, p[f"{name}.shortcut.weight"], stride=stride)
        else:
            shortcut = x
        h = dc.conv2d(h, p[f"{name}.conv1.weight"], stride=stride, padding=1)
        h = self._norm_act(f"{name}.bn2", h)
        h = dc.conv2d(h, p[f"{name}.conv2.weight"], padding=1)
        return shortcut + h

    def _as_input(self, images) -> Tensor:
        x = images.data if isinstance(images, Tensor) else np.asarray(images)
        if x.ndim == 3:
            x = x[:, None]
        S = self.config.input_size
        if x.ndim != 4 or x.shape[1:] != (1, S, S):
            raise ValueError(f"expected images of shape (B, {S}, {S}), got {tuple(np.shape(images))}")
        return Tensor(x)

    def backbone(self, images) -> Tensor:
        h = dc.conv2d(self._as_input(images), self.params["stem.weight"], padding=1)
        for spec in self.cells:
            h = self._apply_cell(spec, h)
        if self.config.embedding_norm == "bn":
            ones = self._unit_affine(h)
            h = dc.batch_norm(h, ones[0], ones[1], self.stats["final"], self.training)
        elif self.config.embedding_norm == "bn_prelu":
            h = self._norm_act("final", h)
        return h

    def _unit_affine(self, h: Tensor) -> tuple[Tensor, Tensor]:
        C = h.shape[1]
        return Tensor(np.ones(C), dtype=h.dtype), Tensor(np.zeros(C), dtype=h.dtype)

    def extra_thinking(self, embedding: Tensor) -> Tensor:
        for spec in self.et_cells:
            embedding = self._apply_cell(spec, embedding)
        return embedding

    def category_logits(self, embedding: Tensor) -> Tensor:
        return dc.linear(dc.flatten(embedding), self.params["kcls.weight"], self.params["kcls.bias"])

    def radical_map(self, embedding: Tensor) -> Tensor:
        """Raw per-position radical logits; the counting loss applies the channel softmax."""
        return dc.conv2d(embedding, self.params["race.weight"], self.params["race.bias"])

    def forward_target(self, images) -> ForwardOutputs:
        a = self.backbone(images)
        return ForwardOutputs(a, self.category_logits(a), self.radical_map(a))

    def forward_training(self, images) -> ForwardOutputs:
        a = self.extra_thinking(self.backbone(images))
        return ForwardOutputs(a, self.category_logits(a))

    def forward_pair(self, training_images, target_images) -> tuple[ForwardOutputs, ForwardOutputs]:
        """Run both branches through one shared backbone pass (joint batch statistics)."""
        B = len(training_images)
        stacked = np.concatenate([np.asarray(training_images), np.asarray(target_images)])
        a = self.backbone(stacked)
        a_d = self.extra_thinking(a[:B])
        a_t = a[B:]
        train_out = ForwardOutputs(a_d, self.category_logits(a_d))
        target_out = ForwardOutputs(a_t, self.category_logits(a_t), self.radical_map(a_t))
        return train_out, target_out

    # -- state

    def state_arrays(self) -> dict[str, np.ndarray]:
        """Every parameter and running statistic keyed by its name path."""
        out = {name: p.data for name, p in self.params.items()}
        for name, st in self.stats.items():
            out[f"{name}.running_mean"] = st.mean
            out[f"{name}.running_var"] = st.var
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        expected = set(self.state_arrays())
        if set(arrays) != expected:
            missing = sorted(expected - set(arrays))
            extra = sorted(set(arrays) - expected)
            raise ValueError(f"state mismatch: missing {missing[:5]}, unexpected {extra[:5]}")
        for name, p in self.params.items():
            _assign(p.data, arrays[name], name)
        for name, st in self.stats.items():
            _assign(st.mean, arrays[f"{name}.running_mean"], name)
            _assign(st.var, arrays[f"{name}.running_var"], name)


def _assign(dst: np.ndarray, src: np.ndarray, name: str) -> None:
    if dst.shape != src.shape:
        raise ValueError(f"{name}: shape {src.shape} does not match model shape {dst.shape}")
    dst[...] = src


def build_model(config: ModelConfig, seed: int | None = None) -> Model:
    if seed is not None:
        config = ModelConfig(**{**config.to_dict(), "seed": seed})
    return Model(config)


def count_parameters(model: Model) -> ParamReport:
    per = {name: int(p.size) for name, p in model.params.items()}
    total = sum(per.values())
    return ParamReport(total, 4 * total, per)
