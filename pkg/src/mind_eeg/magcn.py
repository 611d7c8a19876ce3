"""Attention-refined graph convolution: GCN layer -> CBAM gating -> residual, repeated."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .graph import normalize_adjacency
from .nn import Linear, Module, fan_in_param

_ACTIVATIONS = {"relu": ad.relu, "identity": lambda x: x}


class GCNLayer(Module):
    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator, activation: str = "relu"):
        if activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        self.in_dim, self.out_dim = in_dim, out_dim
        self.activation = activation
        self.W = fan_in_param(rng, (in_dim, out_dim), in_dim)

    def __call__(self, H: Tensor, L: Tensor) -> Tensor:
        return gcn_forward(H, L, self)


def gcn_forward(H: Tensor, L: Tensor, layer: GCNLayer) -> Tensor:
    """``act(L @ H @ W)``."""
    if L.shape[-1] != L.shape[-2] or L.shape[-1] != H.shape[-2]:
        raise ShapeError(f"gcn_forward: propagation matrix {L.shape} does not fit features {H.shape}")
    if H.shape[-1] != layer.in_dim:
        raise ShapeError(f"gcn_forward: feature width {H.shape[-1]} != layer input {layer.in_dim}")
    return _ACTIVATIONS[layer.activation](L @ H @ layer.W)


class CBAMBlock(Module):
    """Node gating followed by feature gating on an ``n x f`` feature map.

    Node attention pools each node's features (mean and max) through a shared
    bottleneck; feature attention pools each feature column over nodes and
    maps the stacked ``[mean, max]`` statistics back to ``f`` gates.
    """

    def __init__(self, n: int, f: int, rng: np.random.Generator, reduction: int = 4):
        self.n, self.f = n, f
        hidden = max(n // reduction, 1)
        self.node_fc1 = Linear(n, hidden, rng)
        self.node_fc2 = Linear(hidden, n, rng)
        self.feature_fc = Linear(2 * f, f, rng)

    def node_attention(self, H: Tensor) -> Tensor:
        def mlp(s):
            return self.node_fc2(ad.relu(self.node_fc1(s)))

        return ad.sigmoid(mlp(H.mean(axis=-1)) + mlp(ad.amax(H, axis=-1)))

    def feature_attention(self, H: Tensor) -> Tensor:
        pooled = ad.concat([H.mean(axis=-2), ad.amax(H, axis=-2)], axis=-1)
        return ad.sigmoid(self.feature_fc(pooled))

    def __call__(self, H: Tensor) -> Tensor:
        return cbam_forward(H, self)


def cbam_forward(H: Tensor, block: CBAMBlock) -> Tensor:
    if H.shape[-2:] != (block.n, block.f):
        raise ShapeError(f"cbam_forward: input {H.shape[-2:]} does not match block ({block.n}, {block.f})")
    node = block.node_attention(H)
    H1 = H * node.reshape(node.shape + (1,))
    feat = block.feature_attention(H1)
    lead = feat.shape[:-1]
    return H1 * feat.reshape(lead + (1, block.f))


class MAGCNBlock(Module):
    def __init__(self, n: int, in_dim: int, out_dim: int, rng: np.random.Generator, reduction: int = 4,
                 activation: str = "relu"):
        self.gcn = GCNLayer(in_dim, out_dim, rng, activation=activation)
        self.cbam = CBAMBlock(n, out_dim, rng, reduction=reduction)
        # identity when widths agree
        self.adapter = None if in_dim == out_dim else Linear(in_dim, out_dim, rng, bias=False)

    def adapt(self, H: Tensor) -> Tensor:
        return H if self.adapter is None else self.adapter(H)


class MAGCNStack(Module):
    def __init__(
        self,
        n: int,
        in_dim: int,
        out_dim: int,
        rng: np.random.Generator,
        layers: int = 2,
        reduction: int = 4,
        residual: bool = True,
        activation: str = "relu",
    ):
        if layers < 1:
            raise ValueError("MAGCN needs at least one layer")
        self.n, self.in_dim, self.out_dim = n, in_dim, out_dim
        self.residual = residual
        dims = [in_dim] + [out_dim] * layers
        self.blocks = [
            MAGCNBlock(n, dims[i], dims[i + 1], rng, reduction=reduction, activation=activation)
            for i in range(layers)
        ]

    def __call__(self, X: Tensor, A_G: Tensor) -> Tensor:
        return magcn_forward(X, A_G, self)


def propagation_matrix(A: Tensor) -> Tensor:
    """Self-looped, symmetrically normalized adjacency: ``norm(A + I)``."""
    return normalize_adjacency(A + np.eye(A.shape[-1]))


def magcn_forward(X: Tensor, A_G: Tensor, stack: MAGCNStack) -> Tensor:
    if X.shape[-2] != stack.n or X.shape[-1] != stack.in_dim:
        raise ShapeError(f"magcn_forward: input {X.shape} does not match stack ({stack.n}, {stack.in_dim})")
    if A_G.shape[-2:] != (stack.n, stack.n):
        raise ShapeError(f"magcn_forward: adjacency {A_G.shape} does not match n={stack.n}")
    L = propagation_matrix(A_G)
    H = X
    for block in stack.blocks:
        out = block.cbam(block.gcn(H, L))
        H = out + block.adapt(H) if stack.residual else out
    return H
