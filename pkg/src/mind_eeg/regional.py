"""Brain-region partition, intra-regional encoders, attention fusion, inter-regional encoder."""

from __future__ import annotations

from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .config import ModelConfig
from .encoder import GraphEncoder
from .nn import Linear, Module, fan_in_param, param_rng


class PartitionError(ValueError):
    pass


@dataclass
class RegionPartition:
    names: list[str]
    regions: list[tuple[int, ...]]
    n: int

    def __post_init__(self):
        self.regions = [tuple(int(i) for i in r) for r in self.regions]

    @property
    def Q(self) -> int:
        return len(self.regions)

    @property
    def sizes(self) -> list[int]:
        return [len(r) for r in self.regions]

    def validate(self, allow_overlap: bool = False) -> None:
        if not self.regions:
            raise PartitionError("partition needs at least one region")
        if len(self.names) != len(self.regions):
            raise PartitionError("every region needs a name")
        seen: list[int] = []
        for name, region in zip(self.names, self.regions):
            if not region:
                raise PartitionError(f"region {name!r} is empty")
            if len(set(region)) != len(region):
                raise PartitionError(f"region {name!r} repeats a channel")
            bad = [i for i in region if not 0 <= i < self.n]
            if bad:
                raise PartitionError(f"region {name!r}: channel index {bad[0]} out of range [0, {self.n})")
            seen.extend(region)
        counts = np.bincount(seen, minlength=self.n)
        missing = np.flatnonzero(counts == 0)
        if missing.size:
            raise PartitionError(f"channels not covered by any region: {missing.tolist()}")
        if not allow_overlap and np.any(counts > 1):
            dup = np.flatnonzero(counts > 1).tolist()
            raise PartitionError(f"channels assigned to several regions: {dup} (set allow_overlap to permit)")

    def to_text(self) -> str:
        return "".join(f"{name}: {','.join(map(str, r))}\n" for name, r in zip(self.names, self.regions))

    @classmethod
    def from_text(cls, text: str, n: int = 62, allow_overlap: bool = False) -> "RegionPartition":
        names, regions = [], []
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if ":" not in line:
                raise PartitionError(f"line {lineno}: expected 'name: idx,idx,...'")
            name, rest = line.split(":", 1)
            try:
                idx = [int(tok) for tok in rest.split(",") if tok.strip()]
            except ValueError:
                raise PartitionError(f"line {lineno}: channel indices must be integers") from None
            names.append(name.strip())
            regions.append(tuple(idx))
        part = cls(names, regions, n)
        part.validate(allow_overlap)
        return part

    @classmethod
    def load(cls, path: str | Path, n: int = 62, allow_overlap: bool = False) -> "RegionPartition":
        return cls.from_text(Path(path).read_text(), n=n, allow_overlap=allow_overlap)

    @classmethod
    def default(cls) -> "RegionPartition":
        text = resources.files("mind_eeg").joinpath("data/regions_62.txt").read_text()
        return cls.from_text(text, n=62)

    @classmethod
    def contiguous(cls, n: int, Q: int) -> "RegionPartition":
        """Split ``range(n)`` into ``Q`` nearly equal consecutive blocks."""
        if not 1 <= Q <= n:
            raise PartitionError(f"cannot split {n} channels into {Q} regions")
        blocks = np.array_split(np.arange(n), Q)
        return cls([f"region{i}" for i in range(Q)], [tuple(b.tolist()) for b in blocks], n)

    @classmethod
    def for_config(cls, cfg: ModelConfig) -> "RegionPartition":
        if cfg.partition:
            return cls.load(cfg.partition, n=cfg.n, allow_overlap=cfg.allow_overlap)
        if cfg.n == 62:
            return cls.default()
        return cls.contiguous(cfg.n, min(7, cfg.n))


def partition(X: Tensor, p: RegionPartition) -> list[Tensor]:
    """Row-gather each region's channels from ``(..., n, d)``."""
    if X.shape[-2] != p.n:
        raise ShapeError(f"partition: sample has {X.shape[-2]} channels, partition expects {p.n}")
    return [ad.index_select(X, list(r), axis=-2) for r in p.regions]


def region_attention_fuse(X_Ri: Tensor, W: Tensor, scaled: bool = False) -> Tensor:
    """Collapse ``(..., n_i, f)`` region features to ``(..., 1, f)``.

    Scores ``a = (X W)(X W)^T``, row sums ``C``, then ``softmax(C) @ X``.
    With ``scaled`` the sums are divided by ``n_i * sqrt(f)`` before the softmax.
    """
    if X_Ri.shape[-1] != W.shape[0]:
        raise ShapeError(f"region_attention_fuse: features {X_Ri.shape} vs weight {W.shape}")
    XW = X_Ri @ W
    C = (XW @ XW.T).sum(axis=-1)
    if scaled:
        C = C * (1.0 / (X_Ri.shape[-2] * np.sqrt(X_Ri.shape[-1])))
    weights = ad.softmax(C, axis=-1)
    lead = weights.shape[:-1]
    return weights.reshape(lead + (1, weights.shape[-1])) @ X_Ri


@dataclass
class RegionalFeatures:
    per_region: list[Tensor]
    fused: Tensor
    vq_loss: Tensor | None = None
    index: list[np.ndarray] = field(default_factory=list)


class IntraRegionalEncoder(Module):
    def __init__(self, p: RegionPartition, cfg: ModelConfig):
        self.encoders = [
            GraphEncoder(len(r), cfg.d, cfg.d, cfg.intra_out, cfg.k_intra, cfg, path=f"intra.{i}")
            for i, r in enumerate(p.regions)
        ]


class RegionFusion(Module):
    """Per-region (or one shared) scoring matrix for the attention fusion."""

    def __init__(self, Q: int, width: int, cfg: ModelConfig):
        self.width = width
        self.scaled = cfg.scaled_attention
        rng = param_rng(cfg.seed, f"fusion.{width}")
        count = 1 if cfg.shared_region_weight else Q
        self.weights = [fan_in_param(rng, (width, width), width) for _ in range(count)]

    def weight(self, i: int) -> Tensor:
        return self.weights[min(i, len(self.weights) - 1)]


def intra_regional_forward(X: Tensor, p: RegionPartition, intra: IntraRegionalEncoder | None,
                           fusion: RegionFusion) -> RegionalFeatures:
    """Encode each region (or pass raw slices when ``intra`` is None) and fuse to ``(..., Q, f)``."""
    slices = partition(X, p)
    per_region, losses, index = [], [], []
    if intra is None:
        per_region = slices
    else:
        for enc, xs in zip(intra.encoders, slices):
            out = enc(xs)
            per_region.append(out.features)
            losses.append(out.vq_loss)
            index.append(out.index)
    rows = [region_attention_fuse(f, fusion.weight(i), fusion.scaled) for i, f in enumerate(per_region)]
    fused = ad.concat(rows, axis=-2)
    vq = None
    for loss in losses:
        vq = loss if vq is None else vq + loss
    return RegionalFeatures(per_region=per_region, fused=fused, vq_loss=vq, index=index)


class InterRegionalEncoder(Module):
    """Treats the ``Q`` fused regions as graph nodes.

    A linear map takes the fused width down to ``inter_bands`` band-like
    columns for the adaptive graph encoder; the MAGCN itself runs on the full
    fused features.
    """

    def __init__(self, Q: int, fused_width: int, cfg: ModelConfig):
        self.band_proj = Linear(fused_width, cfg.inter_bands, param_rng(cfg.seed, f"inter.proj.{fused_width}"))
        self.encoder = GraphEncoder(Q, cfg.inter_bands, fused_width, cfg.inter_out, cfg.k_inter, cfg,
                                    path=f"inter.{fused_width}")


def inter_regional_forward(fused: Tensor, inter: InterRegionalEncoder):
    """Return ``(features (..., Q, inter_out), vq_loss, index)``."""
    if fused.shape[-2] != inter.encoder.n:
        raise ShapeError(f"inter_regional_forward: expected {inter.encoder.n} regions, got {fused.shape[-2]}")
    out = inter.encoder(fused, graph_input=inter.band_proj(fused))
    return out.features, out.vq_loss, out.index
