"""Minibatch SGD training, evaluation and codebook-usage export for one split plan."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .. import autodiff as ad
from ..codebook import reset_usage, usage_histogram, write_usage_csv
from ..config import ModelConfig
from ..model import MindEegModel, checkpoint_bytes, model_loss, sgd_step
from ..regional import RegionPartition
from .data import EEGDataset, Normalizer
from .metrics import MetricsReport
from .splits import SplitPlan

log = logging.getLogger(__name__)


@dataclass
class TrainResult:
    model: MindEegModel
    normalizer: Normalizer
    checkpoint: bytes
    report: MetricsReport
    train_report: MetricsReport
    histograms: dict[str, list[tuple[int, float]]]
    epoch_losses: list[float] = field(default_factory=list)


def predict(model: MindEegModel, features: np.ndarray, batch_size: int = 64) -> np.ndarray:
    """Class predictions for normalized ``(N, n, d)`` features; codebook usage is counted."""
    preds = []
    with ad.no_grad():
        for start in range(0, len(features), batch_size):
            out = model(features[start:start + batch_size])
            preds.append(np.argmax(out.logits.data, axis=-1))
    return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)


def evaluate(model: MindEegModel, ds: EEGDataset, ids=None, normalizer: Normalizer | None = None,
             name: str = "") -> MetricsReport:
    """Score ``model`` on ``ds[ids]`` (all samples when ``ids`` is None)."""
    sub = ds if ids is None else ds.subset(ids)
    if len(sub) == 0:
        raise ValueError("evaluate: empty test set")
    feats = sub.features if normalizer is None else normalizer.transform(sub.features)
    return MetricsReport.from_predictions(sub.labels, predict(model, feats), ds.classes, name)


def _check_finite(loss: ad.Tensor, epoch: int, step: int) -> None:
    if np.isfinite(loss.data).all():
        return
    hit = ad.get_tape().first_non_finite()
    where = f"operation #{hit[0]} '{hit[1]}'" if hit else "the loss itself"
    ad.get_tape().clear()
    raise ad.NonFiniteError(f"non-finite loss at epoch {epoch} step {step}; first produced by {where}")


def run_training(cfg: ModelConfig, ds: EEGDataset, plan: SplitPlan | None = None,
                 partition: RegionPartition | None = None, out_dir: str | Path | None = None,
                 usage: str = "test") -> TrainResult:
    """Train on ``plan.train_ids`` and score on ``plan.test_ids``.

    With ``plan=None`` the whole dataset is used for training and the final
    evaluation (and codebook usage) is taken on the training samples.
    ``usage`` picks which final pass ("train" or "test") the exported
    codebook histograms count.
    """
    if usage not in ("train", "test"):
        raise ValueError(f"usage must be 'train' or 'test', got {usage!r}")
    train_ids = np.arange(len(ds)) if plan is None else plan.train_ids
    test_ids = train_ids if plan is None else plan.test_ids
    if len(train_ids) == 0:
        raise ValueError("run_training: no training samples")
    if ds.n != cfg.n or ds.d != cfg.d or ds.classes != cfg.classes:
        raise ValueError(f"dataset geometry (n={ds.n}, d={ds.d}, C={ds.classes}) does not match config "
                         f"(n={cfg.n}, d={cfg.d}, C={cfg.classes})")

    normalizer = Normalizer.fit(ds.features[train_ids])
    feats = normalizer.transform(ds.features)
    labels = ds.labels
    model = MindEegModel(cfg, partition)
    params = model.parameters()
    rng = np.random.default_rng(cfg.seed)
    epoch_losses = []
    if cfg.codebook_init == "data":
        first = rng.permutation(train_ids)[:cfg.batch_size]
        model.init_codebooks(feats[first])

    for epoch in range(cfg.epochs):
        order = rng.permutation(train_ids)
        total = 0.0
        for step, start in enumerate(range(0, len(order), cfg.batch_size)):
            batch = order[start:start + cfg.batch_size]
            loss, _ = model_loss(model, feats[batch], labels[batch])
            _check_finite(loss, epoch, step)
            ad.backward(loss)
            sgd_step(params, cfg.lr)
            total += loss.item() * len(batch)
        epoch_losses.append(total / len(order))
        log.info("epoch %d loss %.6f", epoch, epoch_losses[-1])

    name = "fit" if plan is None else plan.name
    books = model.codebooks()
    passes = {}
    for side, ids in (("train", train_ids), ("test", test_ids)):
        for cb in books.values():
            reset_usage(cb)
        passes[side] = MetricsReport.from_predictions(labels[ids], predict(model, feats[ids]), ds.classes,
                                                      name + (":train" if side == "train" else ""))
        if side == usage:
            counts = {k: cb.usage_counts.copy() for k, cb in books.items()}
    for k, cb in books.items():
        cb.usage_counts[:] = counts[k]
    train_report, report = passes["train"], passes["test"]
    histograms = {k: usage_histogram(cb) for k, cb in books.items()}

    blob = checkpoint_bytes(model, {"norm_mean": normalizer.mean, "norm_std": normalizer.std})
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / f"{name}.ckpt").write_bytes(blob)
        for key, cb in books.items():
            write_usage_csv(cb, out / f"{name}_codebook_{key}.csv")
    return TrainResult(model, normalizer, blob, report, train_report, histograms, epoch_losses)
