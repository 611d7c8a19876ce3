"""One graph stream: adaptive graphs -> normalize -> codebook -> normalize -> SE fusion -> MAGCN."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor
from .codebook import GraphCodebook
from .config import ModelConfig
from .graph import AdaptiveGraphEncoder, SqueezeExcitation, normalize_adjacency
from .magcn import MAGCNStack
from .nn import Module, param_rng


@dataclass
class EncoderOutput:
    features: Tensor
    vq_loss: Tensor  # summed over bands, one entry per sample
    index: np.ndarray  # (..., bands)
    fused_graph: Tensor


class GraphEncoder(Module):
    """Shared pipeline of the global, intra-regional and inter-regional streams.

    ``graph_dim`` is the band width fed to the adaptive encoder; the MAGCN runs
    on features of width ``feature_dim`` (the same matrix unless the caller
    passes a separate graph input).
    """

    def __init__(self, n: int, graph_dim: int, feature_dim: int, out_dim: int, K: int, cfg: ModelConfig,
                 path: str):
        self.n, self.graph_dim, self.feature_dim, self.out_dim = n, graph_dim, feature_dim, out_dim
        seed = cfg.seed
        self.age = AdaptiveGraphEncoder(n, graph_dim, param_rng(seed, path + ".age"), shift=cfg.adjacency_shift)
        self.codebook = GraphCodebook(
            n, K, cfg.embed_dim, param_rng(seed, path + ".codebook"),
            commitment_weight=cfg.commitment_weight,
            cosine=cfg.cosine_codebook,
            straight_through=cfg.straight_through,
            shift=cfg.adjacency_shift,
        )
        self.se = SqueezeExcitation(graph_dim, param_rng(seed, path + ".se"), reduction=cfg.se_reduction)
        self.magcn = MAGCNStack(
            n, feature_dim, out_dim, param_rng(seed, path + ".magcn"),
            layers=cfg.magcn_layers, reduction=cfg.cbam_reduction, residual=cfg.residual,
        )

    def __call__(self, X: Tensor, graph_input: Tensor | None = None) -> EncoderOutput:
        bands = self.age(X if graph_input is None else graph_input)
        # normalized graphs keep the flattened codebook input at unit scale
        q = self.codebook(normalize_adjacency(bands))
        A_G = self.se(normalize_adjacency(q.quantized_adjacency))
        return EncoderOutput(
            features=self.magcn(X, A_G),
            vq_loss=q.vq_loss.sum(axis=-1),
            index=q.index,
            fused_graph=A_G,
        )
