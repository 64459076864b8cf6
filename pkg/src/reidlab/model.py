"""Small MLP embedder wired the same way as the full training recipe:
optional generalized-mean head, L2-normalized embedding for the distance
branch, and a linear classifier head on the raw embedding."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, l2_normalize, matmul, relu, reshape
from .pooling import GemLayer, gem_pool
from .swag import WeightLayout, WeightVector


@dataclass
class ToyModelConfig:
    input_dim: int = 32
    hidden1: int = 64
    hidden2: int = 64
    embed_dim: int = 16
    num_classes: int = 50
    l2_normalize_output: bool = True
    gem_head: bool = True
    gem_positions: int = 4


class ToyModel:
    """Two relu layers, an embedding head (plain linear or GeM-pooled), and
    a classifier head.  All parameters are autodiff leaves."""

    def __init__(self, cfg: ToyModelConfig, seed):
        self.cfg = cfg
        rng = np.random.default_rng(seed)

        def dense(n_in, n_out):
            scale = np.sqrt(2.0 / n_in)
            return (Tensor(rng.standard_normal((n_in, n_out)) * scale,
                           requires_grad=True),
                    Tensor(np.zeros(n_out), requires_grad=True))

        self.w1, self.b1 = dense(cfg.input_dim, cfg.hidden1)
        self.w2, self.b2 = dense(cfg.hidden1, cfg.hidden2)
        head_out = (cfg.embed_dim * cfg.gem_positions if cfg.gem_head
                    else cfg.embed_dim)
        self.w3, self.b3 = dense(cfg.hidden2, head_out)
        self.wc, self.bc = dense(cfg.embed_dim, cfg.num_classes)
        self.gem = GemLayer.per_channel(cfg.embed_dim) if cfg.gem_head else None

    def parameters(self) -> list[tuple[str, Tensor]]:
        params = [("w1", self.w1), ("b1", self.b1),
                  ("w2", self.w2), ("b2", self.b2),
                  ("w3", self.w3), ("b3", self.b3),
                  ("wc", self.wc), ("bc", self.bc)]
        if self.gem is not None:
            params.append(("gem_p", self.gem.p))
        return params

    def layout(self) -> WeightLayout:
        return WeightLayout(tuple((name, t.shape) for name, t in self.parameters()))

    def get_weights(self) -> WeightVector:
        flat = np.concatenate([t.values.ravel() for _, t in self.parameters()])
        return WeightVector(flat, self.layout())

    def set_weights(self, weights: WeightVector) -> None:
        if weights.layout != self.layout():
            raise ValueError("weight vector layout does not match model")
        for name, t in self.parameters():
            t.values[...] = weights.segment(name)

    def zero_grads(self) -> None:
        for _, t in self.parameters():
            t.zero_grad()

    def _embed_raw(self, x: np.ndarray) -> Tensor:
        h = relu(matmul(Tensor(x), self.w1) + self.b1)
        h = relu(matmul(h, self.w2) + self.b2)
        out = matmul(h, self.w3) + self.b3
        if self.cfg.gem_head:
            out = relu(out)
            b = out.shape[0]
            feats = reshape(out, (b, self.cfg.embed_dim, self.cfg.gem_positions))
            out = gem_pool(feats, self.gem)
        return out

    def forward(self, x: np.ndarray) -> tuple[Tensor, Tensor]:
        """(embedding for distances, classifier logits)."""
        raw = self._embed_raw(x)
        emb = l2_normalize(raw, axis=1) if self.cfg.l2_normalize_output else raw
        logits = matmul(raw, self.wc) + self.bc
        return emb, logits

    def embed(self, x: np.ndarray) -> np.ndarray:
        """Inference embedding values (no gradient bookkeeping kept)."""
        emb, _ = self.forward(x)
        return emb.values.copy()
