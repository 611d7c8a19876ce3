"""Per-sample band graphs: adaptive encoding, symmetric normalization, SE fusion.

All functions accept an optional leading batch axis, so ``X`` may be ``(n, d)``
or ``(B, n, d)`` and band graphs ``(d, n, n)`` or ``(B, d, n, n)``.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .nn import Module, fan_in_param


class AdaptiveGraphEncoder(Module):
    """Learns one ``n x n`` graph per frequency band from an ``n x d`` sample.

    ``A = ELU((M X + B) N P) + shift``, then the ``n x (n*d)`` result is cut
    into ``d`` column blocks.  ELU alone can go down to -1, so ``shift`` (1.0
    by default) keeps every entry, and hence every degree, strictly positive.
    """

    def __init__(self, n: int, d: int, rng: np.random.Generator, shift: float = 1.0):
        self.n, self.d, self.shift = n, d, shift
        self.M = fan_in_param(rng, (n, n), n)
        self.B = fan_in_param(rng, (n, d), n)
        self.N = fan_in_param(rng, (d, d), d)
        self.P = fan_in_param(rng, (d, n * d), d)

    def __call__(self, X: Tensor) -> Tensor:
        return age_encode(X, self)


def age_encode(X: Tensor, enc: AdaptiveGraphEncoder) -> Tensor:
    """Return band graphs of shape ``(..., d, n, n)``."""
    n, d = enc.n, enc.d
    if X.shape[-2:] != (n, d):
        raise ShapeError(f"age_encode: sample shape {X.shape[-2:]} does not match encoder ({n}, {d})")
    A = ad.elu(((enc.M @ X) + enc.B) @ enc.N @ enc.P)
    if enc.shift:
        A = A + enc.shift
    lead = X.shape[:-2]
    # column index b*n + j  ->  band b, column j
    A = A.reshape(lead + (n, d, n))
    axes = list(range(len(lead))) + [len(lead) + 1, len(lead), len(lead) + 2]
    return A.transpose(axes)


def normalize_adjacency(A: Tensor) -> Tensor:
    """``D^-1/2 A D^-1/2`` with ``D_ii`` the row sums; isolated nodes map to zero rows."""
    if A.shape[-1] != A.shape[-2]:
        raise ShapeError(f"normalize_adjacency: matrix must be square, got {A.shape}")
    r = ad.rsqrt_safe(A.sum(axis=-1))
    lead = r.shape[:-1]
    n = r.shape[-1]
    return A * r.reshape(lead + (n, 1)) * r.reshape(lead + (1, n))


class SqueezeExcitation(Module):
    """Reweights ``d`` band graphs by ``sigmoid(W2 relu(W1 s))`` of their means ``s``."""

    def __init__(self, d: int, rng: np.random.Generator, reduction: int = 2):
        self.d = d
        hidden = max(d // reduction, 1)
        self.W1 = fan_in_param(rng, (d, hidden), d)
        self.b1 = fan_in_param(rng, (hidden,), d)
        self.W2 = fan_in_param(rng, (hidden, d), hidden)
        self.b2 = fan_in_param(rng, (d,), hidden)

    def excitation(self, graphs: Tensor) -> Tensor:
        squeeze = graphs.mean(axis=(-2, -1))
        return ad.sigmoid(ad.relu(squeeze @ self.W1 + self.b1) @ self.W2 + self.b2)

    def __call__(self, graphs: Tensor) -> Tensor:
        return se_fuse(graphs, self)


def se_fuse(graphs: Tensor, se: SqueezeExcitation) -> Tensor:
    """Fuse ``(..., d, n, n)`` band graphs into one normalized ``(..., n, n)`` graph."""
    if graphs.ndim < 3 or graphs.shape[-3] != se.d:
        raise ShapeError(f"se_fuse: expected {se.d} band graphs, got shape {graphs.shape}")
    # 2-D matmul needs a row axis for the unbatched case
    flat = graphs if graphs.ndim > 3 else graphs.reshape((1,) + graphs.shape)
    w = se.excitation(flat)
    fused = (flat * w.reshape(w.shape + (1, 1))).sum(axis=-3)
    if graphs.ndim == 3:
        fused = fused.reshape(fused.shape[1:])
    return normalize_adjacency(fused)
