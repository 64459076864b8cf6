"""Generalized-mean pooling with a learnable exponent.

Reduces the trailing axis of a (..., C, N) feature tensor to (..., C) via
((1/n) sum x_i^p_k)^(1/p_k).  p=1 gives the arithmetic mean and large p
approaches the maximum.  The exponent can be per-channel or a single
shared scalar and stays positive through projection after updates.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, clamp_min, power, reshape, tensor_mean


@dataclass
class GemLayer:
    """Learnable pooling exponent plus the input clamp floor.

    The clamp keeps inputs strictly positive so the exponent gradient
    (which involves ln x) stays finite, and the projection floor keeps the
    power mean well-defined if updates drive p toward zero.
    """
    p: Tensor
    epsilon: float = 1e-6
    min_p: float = 0.1

    @classmethod
    def per_channel(cls, channels: int, init: float = 3.0, **kw) -> "GemLayer":
        return cls(p=Tensor(np.full(channels, init), requires_grad=True), **kw)

    @classmethod
    def shared(cls, init: float = 3.0, **kw) -> "GemLayer":
        return cls(p=Tensor(np.full(1, init), requires_grad=True), **kw)

    def project(self) -> None:
        """Clamp the exponent to >= min_p in place (call after each update)."""
        np.maximum(self.p.values, self.min_p, out=self.p.values)


def gem_pool(features: Tensor, layer: GemLayer) -> Tensor:
    """Pool the trailing axis of a (..., C, N) tensor to (..., C).

    Values below the layer's epsilon are clamped up to it before the
    power, so inputs are expected nonnegative (post-relu activations).
    """
    shape = features.shape
    if len(shape) < 2:
        raise ValueError(f"gem_pool expects (..., C, N) input, got shape {shape}")
    channels, n = shape[-2], shape[-1]
    if n == 0:
        raise ValueError("gem_pool: empty channel (zero positions to pool)")
    p_dim = layer.p.shape[0]
    if p_dim not in (1, channels):
        raise ValueError(
            f"exponent has {p_dim} channels but features have {channels}")

    x = clamp_min(features, layer.epsilon)
    p_col = reshape(layer.p, (p_dim, 1))
    powered = power(x, p_col)
    mean_pow = tensor_mean(powered, axis=-1)
    inv_p = power(layer.p, -1.0)
    return power(mean_pow, inv_p)
