"""Full multi-granularity model, integrative loss, SGD and checkpoints."""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .codebook import GraphCodebook, reset_usage
from .config import ConfigError, ModelConfig
from .encoder import GraphEncoder
from .nn import Linear, Module, fan_in_param, param_rng
from .regional import (
    InterRegionalEncoder,
    IntraRegionalEncoder,
    RegionFusion,
    RegionPartition,
    inter_regional_forward,
    intra_regional_forward,
)

CHECKPOINT_MAGIC = b"MEEG"
CHECKPOINT_VERSION = 1

_STREAM_PREFIXES = {
    "global": ("global_encoder.",),
    "intra": ("intra.",),
    "inter": ("inter.", "inter_out_proj."),
    "regional": ("intra.", "fusion.", "inter.", "inter_out_proj."),
}


@dataclass
class ForwardResult:
    logits: Tensor
    l_bg: Tensor
    l_br1: Tensor
    l_br2: Tensor
    index: dict[str, np.ndarray]


class RowAttentionHead(Module):
    """Row self-attention over the stacked streams, then a 3-layer MLP.

    Row scores are the row sums of ``(S W)(S W)^T``; rows are rescaled by
    ``R * softmax(scores)`` so uniform attention leaves them untouched.
    ``scaled`` divides the scores by ``R * sqrt(width)`` first.
    """

    def __init__(self, rows: int, width: int, hidden: tuple[int, ...], classes: int, seed: int,
                 scaled: bool = False):
        self.rows, self.width, self.scaled = rows, width, scaled
        self.W = fan_in_param(param_rng(seed, "head.W"), (width, width), width)
        dims = [rows * width, *hidden, classes]
        self.layers = [Linear(dims[i], dims[i + 1], param_rng(seed, f"head.fc{i}.{dims[i]}"))
                       for i in range(len(dims) - 1)]

    def attend(self, S: Tensor) -> Tensor:
        SW = S @ self.W
        scores = (SW @ SW.T).sum(axis=-1)
        if self.scaled:
            scores = scores * (1.0 / (self.rows * np.sqrt(self.width)))
        weights = ad.softmax(scores, axis=-1)
        return S * (weights * float(self.rows)).reshape(weights.shape + (1,))

    def __call__(self, S: Tensor) -> Tensor:
        if S.shape[-2:] != (self.rows, self.width):
            raise ShapeError(f"head: expected stacked rows ({self.rows}, {self.width}), got {S.shape}")
        h = self.attend(S).reshape(S.shape[:-2] + (self.rows * self.width,))
        for layer in self.layers[:-1]:
            h = ad.relu(layer(h))
        return self.layers[-1](h)


class MindEegModel(Module):
    """Global, intra-regional and inter-regional graph streams feeding one classifier.

    Every stream is built regardless of the ablation flags so that a given
    seed always yields the same weights; ablated streams are simply left out of
    the forward pass and of :meth:`named_parameters`.
    """

    def __init__(self, cfg: ModelConfig, partition: RegionPartition | None = None):
        cfg.validate()
        if not cfg.use_global and not cfg.use_regional:
            raise ConfigError("every stream is ablated; nothing left to classify")
        self.cfg = cfg
        self.partition_map = partition or RegionPartition.for_config(cfg)
        self.partition_map.validate(cfg.allow_overlap)
        p = self.partition_map
        if p.n != cfg.n:
            raise ConfigError(f"partition covers {p.n} channels but config has n={cfg.n}")

        self.global_encoder = GraphEncoder(cfg.n, cfg.d, cfg.d, cfg.global_out, cfg.k_global, cfg, path="global")
        self.intra = IntraRegionalEncoder(p, cfg)
        fused_width = cfg.intra_out if cfg.use_intra else cfg.d
        self.fusion = RegionFusion(p.Q, fused_width, cfg)
        self.inter = InterRegionalEncoder(p.Q, fused_width, cfg)
        self.inter_out_proj = Linear(cfg.inter_out, cfg.global_out, param_rng(cfg.seed, "inter_out_proj"))

        rows = 0
        if cfg.use_global:
            rows += cfg.n
        if cfg.use_regional:
            rows += p.Q
            if not cfg.use_inter and fused_width != cfg.global_out:
                raise ConfigError("without the inter-regional stream, fused region width must equal global_out")
        self.head = RowAttentionHead(rows, cfg.global_out, cfg.head_hidden, cfg.classes, cfg.seed,
                                     cfg.scaled_attention)

    # parameters --------------------------------------------------------------
    def all_named_parameters(self):
        return super().named_parameters()

    def named_parameters(self, prefix: str = ""):
        cfg = self.cfg
        active = {"global_encoder.": cfg.use_global, "intra.": cfg.use_intra, "fusion.": cfg.use_regional,
                  "inter.": cfg.use_inter, "inter_out_proj.": cfg.use_inter, "head.": True}
        for name, p in super().named_parameters(prefix):
            if active[next(k for k in active if name.startswith(k))]:
                yield name, p

    def stream_parameters(self, stream: str) -> dict[str, Tensor]:
        """Parameters used only by ``stream`` (one of global/intra/inter/regional)."""
        prefixes = _STREAM_PREFIXES[stream]
        return {n: p for n, p in self.all_named_parameters() if n.startswith(prefixes)}

    def codebooks(self) -> dict[str, GraphCodebook]:
        cfg = self.cfg
        books = {}
        if cfg.use_global:
            books["global"] = self.global_encoder.codebook
        if cfg.use_intra:
            for name, enc in zip(self.partition_map.names, self.intra.encoders):
                books[f"intra_{name}"] = enc.codebook
        if cfg.use_inter:
            books["inter"] = self.inter.encoder.codebook
        return books

    def init_codebooks(self, X) -> None:
        """Seed every active codebook from the encodings of ``X`` (one no-grad pass)."""
        books = self.codebooks().values()
        for cb in books:
            cb._pending_init = True
        with ad.no_grad():
            forward(X, self)
        for cb in books:
            reset_usage(cb)

    # forward -----------------------------------------------------------------
    def __call__(self, X) -> ForwardResult:
        return forward(X, self)


def forward(X, model: MindEegModel) -> ForwardResult:
    """Run one sample ``(n, d)`` or a batch ``(B, n, d)``."""
    cfg = model.cfg
    X = X if isinstance(X, Tensor) else Tensor(X)
    if X.shape[-2:] != (cfg.n, cfg.d):
        raise ShapeError(f"forward: sample shape {X.shape[-2:]} does not match config ({cfg.n}, {cfg.d})")
    single = X.ndim == 2
    if single:
        X = X.reshape((1,) + X.shape)
    batch = X.shape[0]
    zeros = Tensor(np.zeros(batch))
    l_bg = l_br1 = l_br2 = zeros
    rows, index = [], {}

    if cfg.use_global:
        g = model.global_encoder(X)
        rows.append(g.features)
        l_bg = g.vq_loss
        index["global"] = g.index
    if cfg.use_regional:
        intra = model.intra if cfg.use_intra else None
        rf = intra_regional_forward(X, model.partition_map, intra, model.fusion)
        if rf.vq_loss is not None:
            l_br1 = rf.vq_loss
        for name, idx in zip(model.partition_map.names, rf.index):
            index[f"intra_{name}"] = idx
        if cfg.use_inter:
            feats, l_br2, index["inter"] = inter_regional_forward(rf.fused, model.inter)
            rows.append(model.inter_out_proj(feats))
        else:
            rows.append(rf.fused)

    stacked = rows[0] if len(rows) == 1 else ad.concat(rows, axis=-2)
    logits = model.head(stacked)
    if single:
        logits = logits.reshape((cfg.classes,))
        l_bg, l_br1, l_br2 = (t.reshape(()) for t in (l_bg, l_br1, l_br2))
        index = {k: v[0] for k, v in index.items()}
    return ForwardResult(logits, l_bg, l_br1, l_br2, index)


# loss & optimizer ------------------------------------------------------------


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Per-sample negative log-likelihood under ``softmax(logits)``."""
    labels = np.atleast_1d(np.asarray(labels))
    if logits.ndim == 1:
        logits = logits.reshape((1, logits.shape[0]))
    C = logits.shape[-1]
    if labels.shape[0] != logits.shape[0]:
        raise ShapeError(f"cross_entropy: {labels.shape[0]} labels for {logits.shape[0]} rows")
    if not np.issubdtype(labels.dtype, np.integer) or labels.min() < 0 or labels.max() >= C:
        raise ValueError(f"labels must be integers in [0, {C}), got {labels.tolist()}")
    logp = ad.log_softmax(logits, axis=-1)
    return -logp[np.arange(labels.shape[0]), labels]


def integrative_loss(logits: Tensor, labels, l_bg, l_br1, l_br2, alpha: float, beta: float,
                     gamma: float) -> Tensor:
    """Batch mean of ``CE + alpha*L_BG + beta*L_BR1 + gamma*L_BR2``."""
    total = cross_entropy(logits, labels)
    for weight, term in ((alpha, l_bg), (beta, l_br1), (gamma, l_br2)):
        if weight:
            total = total + weight * term
    return total.mean()


def model_loss(model: MindEegModel, X, labels) -> tuple[Tensor, ForwardResult]:
    cfg = model.cfg
    out = model(X)
    loss = integrative_loss(out.logits, labels, out.l_bg, out.l_br1, out.l_br2,
                            cfg.loss_weight_global, cfg.loss_weight_intra, cfg.loss_weight_inter)
    return loss, out


def sgd_step(params, lr: float, grads=None) -> None:
    """``p <- p - lr * g`` for every parameter, then clear the gradients."""
    params = list(params)
    if grads is None:
        grads = [p.grad for p in params]
    for p, g in zip(params, grads):
        if g is not None:
            if g.shape != p.shape:
                raise ShapeError(f"sgd_step: gradient {g.shape} for parameter {p.shape}")
            p.data -= lr * g
        p.grad = None


# checkpoints -----------------------------------------------------------------


def checkpoint_bytes(model: MindEegModel, buffers: dict[str, np.ndarray] | None = None) -> bytes:
    """Serialize config text and every named array (little-endian f64)."""
    entries = [(name, p.data) for name, p in model.all_named_parameters()]
    entries += [(f"buffer.{k}", np.asarray(v, dtype=np.float64)) for k, v in sorted((buffers or {}).items())]
    cfg_text = model.cfg.to_text().encode("utf-8")
    out = io.BytesIO()
    out.write(CHECKPOINT_MAGIC)
    out.write(struct.pack("<II", CHECKPOINT_VERSION, len(cfg_text)))
    out.write(cfg_text)
    out.write(struct.pack("<I", len(entries)))
    for name, arr in entries:
        raw = name.encode("utf-8")
        out.write(struct.pack("<I", len(raw)))
        out.write(raw)
        out.write(struct.pack("<I", arr.ndim))
        out.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return out.getvalue()


def save_checkpoint(model: MindEegModel, path: str | Path, buffers=None) -> None:
    Path(path).write_bytes(checkpoint_bytes(model, buffers))


class CheckpointError(ValueError):
    pass


def load_checkpoint_bytes(blob: bytes, partition: RegionPartition | None = None):
    """Rebuild ``(model, buffers)``; every parameter shape is checked against the config."""
    buf = io.BytesIO(blob)

    def take(n: int) -> bytes:
        chunk = buf.read(n)
        if len(chunk) != n:
            raise CheckpointError("checkpoint truncated")
        return chunk

    if take(4) != CHECKPOINT_MAGIC:
        raise CheckpointError("not a model checkpoint (bad magic)")
    version, cfg_len = struct.unpack("<II", take(8))
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    cfg = ModelConfig.from_text(take(cfg_len).decode("utf-8"))
    (count,) = struct.unpack("<I", take(4))
    arrays = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4))
        name = take(name_len).decode("utf-8")
        (ndim,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        size = int(np.prod(shape)) if ndim else 1
        arrays[name] = np.frombuffer(take(8 * size), dtype="<f8").reshape(shape).astype(np.float64)
    if buf.read(1):
        raise CheckpointError("trailing bytes after the last entry")

    model = MindEegModel(cfg, partition)
    params = dict(model.all_named_parameters())
    missing = set(params) - set(arrays)
    if missing:
        raise CheckpointError(f"checkpoint lacks parameters: {sorted(missing)[:5]}")
    unknown = {k for k in arrays if not k.startswith("buffer.")} - set(params)
    if unknown:
        raise CheckpointError(f"checkpoint has parameters the config does not define: {sorted(unknown)[:5]}")
    for name, p in params.items():
        if arrays[name].shape != p.shape:
            raise CheckpointError(f"{name}: checkpoint shape {arrays[name].shape} != model shape {p.shape}")
        p.data[...] = arrays[name]
    buffers = {k[len("buffer."):]: v for k, v in arrays.items() if k.startswith("buffer.")}
    return model, buffers


def load_checkpoint(path: str | Path, partition: RegionPartition | None = None):
    return load_checkpoint_bytes(Path(path).read_bytes(), partition)
