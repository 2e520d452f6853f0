"""Exact parameter counts and forward-pass MAC estimates for any subnet.

FLOPs here means multiply-accumulates (not 2x), counted over matrix products
only; softmax, layernorm, GELU, bias adds and attention scaling are excluded.
Output headers state the convention.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .errors import SpecError
from .space import ArchConfig


@dataclass(frozen=True)
class Geometry:
    """Input/output geometry a model is built for."""

    height: int
    width: int
    channels: int
    patch: int
    classes: int

    def __post_init__(self):
        if self.height % self.patch or self.width % self.patch:
            raise SpecError(
                f"image {self.height}x{self.width} not divisible by patch {self.patch}"
            )
        if min(self.height, self.width, self.channels, self.patch, self.classes) <= 0:
            raise SpecError("geometry extents must all be positive")

    @property
    def tokens(self) -> int:
        """Patch count, excluding the class token."""
        return (self.height // self.patch) * (self.width // self.patch)

    @property
    def patch_pixels(self) -> int:
        return self.patch * self.patch * self.channels

    def to_dict(self):
        return {
            "height": self.height,
            "width": self.width,
            "channels": self.channels,
            "patch": self.patch,
            "classes": self.classes,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(int(d["height"]), int(d["width"]), int(d["channels"]),
                   int(d["patch"]), int(d["classes"]))


@dataclass(frozen=True)
class ModelCost:
    params: int
    flops: int  # MACs for one forward pass at the given image size


def hidden_dim(ratio, embed: int) -> int:
    """MLP hidden width: ceil(ratio * embed), exact for rational ratios."""
    return math.ceil(ratio * embed)


def count_params(arch: ArchConfig, geom: Geometry) -> int:
    """Exact trainable-parameter count of a standalone subnet."""
    e = arch.embed_dim
    total = e * geom.patch_pixels + e          # patch projection + bias
    total += e                                  # class token
    total += (geom.tokens + 1) * e              # position embeddings
    for gene in arch.layers:
        q = gene.qkv_dim
        hid = hidden_dim(gene.mlp_ratio, e)
        total += 3 * (q * e + q)                # q/k/v projections
        total += e * q + e                      # attention output projection
        total += 2 * (2 * e)                    # the two LayerNorms
        total += hid * e + hid                  # fc1
        total += e * hid + e                    # fc2
    total += 2 * e                              # final LayerNorm
    total += geom.classes * e + geom.classes    # classifier
    return total


def count_flops(arch: ArchConfig, geom: Geometry) -> int:
    """Forward-pass MACs for one image.

    Dense layers contribute rows*in*out; attention contributes 2*N^2*qkv per
    layer (score and weighted-sum products), N = tokens + 1.
    """
    e = arch.embed_dim
    n = geom.tokens + 1
    total = geom.tokens * e * geom.patch_pixels     # patch projection
    for gene in arch.layers:
        q = gene.qkv_dim
        hid = hidden_dim(gene.mlp_ratio, e)
        total += 3 * n * q * e                      # q/k/v projections
        total += 2 * n * n * q                      # attention scores + weighted sum
        total += n * e * q                          # output projection
        total += n * hid * e + n * e * hid          # MLP
    total += geom.classes * e                       # classifier on the class row
    return total


def cost(arch: ArchConfig, geom: Geometry) -> ModelCost:
    return ModelCost(params=count_params(arch, geom), flops=count_flops(arch, geom))
