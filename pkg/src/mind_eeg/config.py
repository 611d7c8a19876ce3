"""Model and training hyperparameters, with a flat ``key = value`` text format."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path


class ConfigError(ValueError):
    pass


ABLATIONS = ("global", "intra", "inter", "regional")


@dataclass
class ModelConfig:
    # input geometry
    n: int = 62
    d: int = 5
    classes: int = 4
    partition: str = ""  # empty: shipped 7-region table
    allow_overlap: bool = False

    # codebooks
    k_global: int = 32
    k_intra: int = 64
    k_inter: int = 128
    embed_dim: int = 64
    commitment_weight: float = 0.25
    cosine_codebook: bool = False
    straight_through: bool = True
    codebook_init: str = "data"  # "data": first training batch; "uniform": U(-1/K, 1/K)

    # loss weights on the global / intra / inter codebook losses
    loss_weight_global: float = 0.2
    loss_weight_intra: float = 0.5
    loss_weight_inter: float = 1.0

    # architecture
    adjacency_shift: float = 1.0
    se_reduction: int = 2
    cbam_reduction: int = 4
    magcn_layers: int = 2
    residual: bool = True
    global_out: int = 50
    intra_out: int = 50
    inter_out: int = 60
    inter_bands: int = 5
    shared_region_weight: bool = False
    scaled_attention: bool = True  # divide row-sum scores by rows * sqrt(width)
    head_hidden: tuple[int, ...] = (256, 64)

    # training
    lr: float = 1e-2
    batch_size: int = 32
    epochs: int = 200
    seed: int = 0

    # ablations
    global_removed: bool = False
    intra_removed: bool = False
    inter_removed: bool = False
    regional_removed: bool = False

    def __post_init__(self):
        self.head_hidden = tuple(int(h) for h in self.head_hidden)
        self.validate()

    def validate(self) -> None:
        counts = ["n", "d", "classes", "k_global", "k_intra", "k_inter", "embed_dim", "se_reduction",
                  "cbam_reduction", "magcn_layers", "global_out", "intra_out", "inter_out", "inter_bands",
                  "batch_size"]
        for name in counts:
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.epochs < 0:
            raise ConfigError("epochs must be non-negative")
        for name in ["commitment_weight", "loss_weight_global", "loss_weight_intra", "loss_weight_inter", "lr",
                     "adjacency_shift"]:
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative, got {getattr(self, name)}")
        if self.codebook_init not in ("data", "uniform"):
            raise ConfigError(f"codebook_init must be 'data' or 'uniform', got {self.codebook_init!r}")
        if any(h <= 0 for h in self.head_hidden):
            raise ConfigError("head_hidden widths must be positive")

    # streams -----------------------------------------------------------
    @property
    def use_global(self) -> bool:
        return not self.global_removed

    @property
    def use_intra(self) -> bool:
        return not (self.regional_removed or self.intra_removed)

    @property
    def use_inter(self) -> bool:
        return not (self.regional_removed or self.inter_removed)

    @property
    def use_regional(self) -> bool:
        return not self.regional_removed and (self.use_intra or self.use_inter)

    def with_ablation(self, drop: str) -> "ModelConfig":
        if drop not in ABLATIONS:
            raise ConfigError(f"unknown ablation {drop!r}; choose from {', '.join(ABLATIONS)}")
        return dataclasses.replace(self, **{f"{drop}_removed": True})

    # text format ---------------------------------------------------------
    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if isinstance(value, bool):
                text = "true" if value else "false"
            elif isinstance(value, tuple):
                text = ",".join(str(v) for v in value)
            else:
                text = repr(value) if isinstance(value, float) else str(value)
            lines.append(f"{f.name} = {text}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "ModelConfig":
        defaults = cls()
        known = {f.name for f in dataclasses.fields(cls)}
        values = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
            key, val = (s.strip() for s in line.split("=", 1))
            if key not in known:
                raise ConfigError(f"line {lineno}: unknown config key {key!r}")
            values[key] = _coerce(key, val, getattr(defaults, key), lineno)
        return cls(**values)

    @classmethod
    def load(cls, path: str | Path) -> "ModelConfig":
        return cls.from_text(Path(path).read_text())

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_text())


def _coerce(key: str, text: str, default, lineno: int):
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            return tuple(int(p) for p in text.split(",") if p.strip())
        return text
    except ValueError:
        raise ConfigError(f"line {lineno}: bad value {text!r} for {key}") from None
