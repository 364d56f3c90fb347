"""Flat ``key = value`` run configuration.

Blank lines and ``#`` comments are ignored; unknown keys are errors. Every
key has a default, so an empty file is a valid (full-scale) configuration.
"""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, field, fields
from pathlib import Path

from .losses import LossError, LossWeights

METHODS = ("baseline", "offline-pl", "online-pl", "adamatch", "dbacs")
TABLE_METHODS = ("lower-limit", "dbacs", "offline-pl", "online-pl", "adamatch", "oracle")


class ConfigError(ValueError):
    pass


def _parse_bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


def _split_list(text: str) -> list[str]:
    return [part.strip() for part in text.split(",") if part.strip()]


@dataclass
class TrainConfig:
    # data
    side: int = 128
    counts: str = "full"  # "full" or "n_particle,n_point" applied to every domain
    data_seed: int = 1
    data_dir: str = ""
    test_fraction: float = 0.2

    # scenario and run identity
    source: int = 0
    target: int = 1
    mode: str = "uda"
    target_label_fraction: float = 0.05
    method: str = "baseline"
    arch: str = "small-cnn"
    seed: int = 1
    deterministic: bool = True
    results_dir: str = "results"
    runs_dir: str = ""

    # matrix
    methods: list[str] = field(default_factory=lambda: list(TABLE_METHODS))
    archs: list[str] = field(default_factory=list)
    seeds: list[int] = field(default_factory=lambda: [1, 2, 3])
    pairs: list[str] = field(default_factory=list)  # e.g. "0-1, 0-2"; empty = all ordered pairs

    # classifier and baseline protocol
    pretrained: bool = False
    width: int = 16
    optimizer: str = "adam"
    lr: float = 1e-4
    batch_size: int = 64
    epochs_phase1: int = 30
    epochs_phase2: int = 20
    phase2_lr_factor: float = 0.1
    patience: int = 5
    val_fraction: float = 0.2

    # pseudo-labeling
    pl_tau: float = 0.9
    pl_ratio: int = 3
    pl_iterations: int = 10
    pl_alpha_max: float = 1.0
    online_epochs: int = 30

    # AdaMatch
    adamatch_lr: float = 2e-4
    adamatch_weight_decay: float = 1e-3
    adamatch_batch_size: int = 64
    adamatch_tau: float = 0.9
    adamatch_ratio: int = 3
    adamatch_base_steps: int = 65536 // 64
    adamatch_step_divisor: int = 8
    da_window: int = 32

    # DBACS
    dbacs_lr: float = 5e-5
    dbacs_epochs: int = 300
    dbacs_batch_size: int = 64
    dbacs_r_adv: int = 2
    dbacs_steps_per_epoch: int = 0  # 0 = one pass over the larger training domain
    dbacs_ckpt_every: int = 50
    dbacs_identity_warmup: int = 0
    aligner_width: int = 16
    aligner_residual: bool = True
    disc_width: int = 16
    lambda_cc: float = 1.0
    lambda_adv: float = 0.5
    lambda_cyc: float = 0.3
    lambda_id: float = 0.2
    lambda_fm: float = 0.0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for name in ("lr", "adamatch_lr", "dbacs_lr", "batch_size", "adamatch_batch_size", "dbacs_batch_size",
                     "phase2_lr_factor"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        for name in ("pl_ratio", "pl_iterations", "adamatch_ratio", "dbacs_r_adv", "adamatch_step_divisor",
                     "da_window", "patience"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be a positive integer")
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; choose from {METHODS}")
        unknown = set(self.methods) - set(TABLE_METHODS) - set(METHODS)
        if unknown:
            raise ConfigError(f"unknown methods {sorted(unknown)}")
        if self.mode not in ("uda", "ssda"):
            raise ConfigError(f"mode must be uda or ssda, got {self.mode!r}")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"optimizer must be adam or sgd, got {self.optimizer!r}")
        for name in ("pl_tau", "adamatch_tau", "val_fraction", "test_fraction"):
            if not 0 < getattr(self, name) <= 1:
                raise ConfigError(f"{name} must lie in (0, 1]")
        try:
            self.loss_weights
        except LossError as exc:
            raise ConfigError(str(exc)) from exc

    @property
    def loss_weights(self) -> LossWeights:
        return LossWeights(self.lambda_cc, self.lambda_adv, self.lambda_cyc, self.lambda_id, self.lambda_fm)

    @property
    def adamatch_steps(self) -> int:
        return max(1, self.adamatch_base_steps // self.adamatch_step_divisor)

    @property
    def arch_list(self) -> list[str]:
        return self.archs or [self.arch]

    def pair_list(self) -> list[tuple[int, int]]:
        if not self.pairs:
            return [(s, t) for s in range(3) for t in range(3) if s != t]
        out = []
        for item in self.pairs:
            s, _, t = item.partition("-")
            out.append((int(s), int(t)))
        return out

    def domain_counts(self) -> dict[int, tuple[int, int] | None]:
        if self.counts == "full":
            return {d: None for d in range(3)}
        a, b = (int(v) for v in _split_list(self.counts))
        return {d: (a, b) for d in range(3)}

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, list):
                value = ", ".join(str(v) for v in value)
            elif isinstance(value, bool):
                value = str(value).lower()
            lines.append(f"{f.name} = {value}")
        return "\n".join(lines) + "\n"

    def config_hash(self) -> str:
        """Short sha256 of the fully resolved configuration."""
        return hashlib.sha256(self.to_text().encode()).hexdigest()[:12]


_FIELDS = {f.name: f for f in fields(TrainConfig)}


def _coerce(name: str, text: str):
    default = getattr(TrainConfig(), name)
    if isinstance(default, bool):
        return _parse_bool(text)
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    if isinstance(default, list):
        items = _split_list(text)
        return [int(v) for v in items] if name == "seeds" else items
    return text.strip()


def parse_config(text: str, **overrides) -> TrainConfig:
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        if key not in _FIELDS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        try:
            values[key] = _coerce(key, value)
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: bad value for {key}: {exc}") from exc
    values.update(overrides)
    return TrainConfig(**values)


def load_config(path: str | Path, **overrides) -> TrainConfig:
    return parse_config(Path(path).read_text(), **overrides)
