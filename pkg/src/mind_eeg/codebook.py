"""Vector quantization of flattened adjacency matrices through a learned codebook."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .nn import Linear, Module, uniform_param


class CodebookConfigError(ValueError):
    pass


@dataclass
class QuantizeResult:
    index: np.ndarray
    quantized_adjacency: Tensor
    vq_loss: Tensor
    encoded: Tensor
    embedding: Tensor


class GraphCodebook(Module):
    """``K`` embeddings of width ``D`` standing in for ``n x n`` brain networks.

    A graph is flattened, projected down to ``D`` by ``down_proj``, snapped to
    its nearest embedding, and projected back up by ``up_proj``.  The up
    projection is followed by ``ELU(.) + shift`` so the reconstruction is a
    valid (strictly positive) adjacency.
    """

    def __init__(
        self,
        n: int,
        K: int,
        D: int,
        rng: np.random.Generator,
        commitment_weight: float = 0.25,
        cosine: bool = False,
        straight_through: bool = True,
        shift: float = 1.0,
    ):
        if K <= 0:
            raise CodebookConfigError(f"codebook needs at least one embedding, got K={K}")
        if D <= 0:
            raise CodebookConfigError(f"embedding width must be positive, got D={D}")
        self.n, self.K, self.D = n, K, D
        self.commitment_weight = commitment_weight
        self.cosine = cosine
        self.straight_through = straight_through
        self.shift = shift
        self.embeddings = uniform_param(rng, (K, D), 1.0 / K)
        self.down_proj = Linear(n * n, D, rng)
        self.up_proj = Linear(D, n * n, rng)
        self._usage = np.zeros(K, dtype=np.int64)
        self._init_rng = rng
        self._pending_init = False

    def init_from(self, encoded: np.ndarray) -> None:
        """Overwrite the embeddings with ``K`` rows drawn from ``encoded`` vectors.

        Rows are drawn without replacement when there are enough of them;
        repeats get a ``uniform(-1/K, 1/K)`` jitter so no two embeddings coincide.
        """
        rows = encoded.reshape(-1, self.D)
        replace = rows.shape[0] < self.K
        pick = self._init_rng.choice(rows.shape[0], size=self.K, replace=replace)
        init = rows[pick].copy()
        if replace:
            init += self._init_rng.uniform(-1.0 / self.K, 1.0 / self.K, size=init.shape)
        self.embeddings.data[...] = init
        self._pending_init = False

    @property
    def usage_counts(self) -> np.ndarray:
        return self._usage

    def nearest(self, encoded: np.ndarray) -> np.ndarray:
        return nearest_embedding(encoded, self.embeddings.data, cosine=self.cosine)

    def __call__(self, A: Tensor) -> QuantizeResult:
        return quantize(A, self)


def nearest_embedding(encoded: np.ndarray, embeddings: np.ndarray, cosine: bool = False) -> np.ndarray:
    """Index of the closest embedding for each row of ``encoded``.

    L2 distance by default, highest cosine similarity with ``cosine=True``.
    ``argmin``/``argmax`` return the first hit, which makes ties go to the
    smallest index.
    """
    if cosine:
        en = encoded / np.maximum(np.linalg.norm(encoded, axis=-1, keepdims=True), 1e-12)
        vn = embeddings / np.maximum(np.linalg.norm(embeddings, axis=-1, keepdims=True), 1e-12)
        return np.argmax(en @ vn.T, axis=-1)
    diff = encoded[..., None, :] - embeddings
    return np.argmin(np.sum(diff * diff, axis=-1), axis=-1)


def loss_vq(encoded: Tensor, embedding: Tensor, commitment_weight: float = 0.25) -> Tensor:
    """``||sg[e] - v||^2 + w * ||e - sg[v]||^2`` over the last axis.

    The first term moves the embedding, the second (the commitment term) moves
    the encoder.
    """
    if encoded.shape != embedding.shape:
        raise ShapeError(f"loss_vq: encoded {encoded.shape} vs embedding {embedding.shape}")
    codebook_term = ad.sq_norm(ad.stop_gradient(encoded) - embedding, axis=-1)
    commit_term = ad.sq_norm(encoded - ad.stop_gradient(embedding), axis=-1)
    return codebook_term + commitment_weight * commit_term


def quantize(A: Tensor, cb: GraphCodebook) -> QuantizeResult:
    """Quantize ``(..., n, n)`` graphs; counts one use per graph."""
    n = cb.n
    if A.shape[-2:] != (n, n):
        raise ShapeError(f"quantize: adjacency {A.shape[-2:]} does not match codebook n={n}")
    lead = A.shape[:-2]
    encoded = cb.down_proj(A.reshape(lead + (n * n,)))
    if cb._pending_init:
        cb.init_from(encoded.data)
    index = ad.freeze_point(cb.nearest(encoded.data))
    np.add.at(cb._usage, np.asarray(index).reshape(-1), 1)
    embedding = ad.gather_rows(cb.embeddings, index)
    z = ad.straight_through(encoded, embedding) if cb.straight_through else embedding
    recon = ad.elu(cb.up_proj(z))
    if cb.shift:
        recon = recon + cb.shift
    return QuantizeResult(
        index=np.asarray(index),
        quantized_adjacency=recon.reshape(lead + (n, n)),
        vq_loss=loss_vq(encoded, embedding, cb.commitment_weight),
        encoded=encoded,
        embedding=embedding,
    )


def usage_histogram(cb: GraphCodebook, total: int | None = None) -> list[tuple[int, float]]:
    """``(index, percent)`` pairs sorted by usage, most used first."""
    counts = cb.usage_counts
    if total is None:
        total = int(counts.sum())
    if total <= 0:
        return []
    order = np.argsort(-counts, kind="stable")
    return [(int(i), 100.0 * counts[i] / total) for i in order]


def reset_usage(cb: GraphCodebook) -> None:
    cb._usage[:] = 0


def write_usage_csv(cb: GraphCodebook, path: str | Path) -> None:
    """Write ``index,count,percent`` rows, most used first."""
    counts = cb.usage_counts
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["index", "count", "percent"])
        for idx, pct in usage_histogram(cb):
            writer.writerow([idx, int(counts[idx]), f"{pct:.6f}"])


def read_usage_csv(path: str | Path) -> list[tuple[int, int, float]]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [(int(r["index"]), int(r["count"]), float(r["percent"])) for r in rows]
