"""Adapted ViT producing the pixel-level patch-token grid.

The base transformer is frozen; each block carries a parallel bottleneck
adapter next to its MLP (AdaptFormer style), which is the only trainable part.
Features exported by an external foundation model can be fed in instead via
CQVF files (see :mod:`cqvpr.formats`).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .nn import Module


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class BackboneConfig:
    image_size: int = 56
    patch_size: int = 7
    embed_dim: int = 64
    num_blocks: int = 2
    num_heads: int = 4
    adapter_dim: int | None = None
    mlp_ratio: int = 4
    adapter_scale: float = 0.1

    def __post_init__(self):
        if self.image_size <= 0 or self.patch_size <= 0 or self.image_size % self.patch_size:
            raise ConfigError(
                f"image_size {self.image_size} must be a positive multiple of patch_size {self.patch_size}"
            )
        if self.embed_dim % self.num_heads:
            raise ConfigError(f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}")
        if self.num_blocks < 0:
            raise ConfigError("num_blocks must be non-negative")

    @property
    def grid_size(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid_size**2

    @property
    def bottleneck(self) -> int:
        return self.adapter_dim if self.adapter_dim is not None else max(1, self.embed_dim // 16)


# ViT-L/14 geometry at 224 px gives G=16, which is what two stride-2 up-convs need to reach 61.
FULL_BACKBONE = BackboneConfig(image_size=224, patch_size=14, embed_dim=1024, num_blocks=24, num_heads=16)
DESK_BACKBONE = BackboneConfig()
TINY_BACKBONE = BackboneConfig(image_size=14, patch_size=7, embed_dim=8, num_blocks=1, num_heads=2)


def _lecun(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    return rng.standard_normal((fan_in, fan_out)) / np.sqrt(fan_in)


class AdaptedBlock(Module):
    """Pre-norm transformer block whose MLP has a parallel trainable adapter."""

    def __init__(self, config: BackboneConfig, rng: np.random.Generator):
        super().__init__()
        d, r, hidden = config.embed_dim, config.bottleneck, config.embed_dim * config.mlp_ratio
        self.num_heads = config.num_heads
        for norm in ("norm1", "norm2"):
            self.add_param(f"{norm}.gain", np.ones(d), False)
            self.add_param(f"{norm}.bias", np.zeros(d), False)
        for proj in ("q", "k", "v", "proj"):
            self.add_param(f"attn.{proj}.weight", _lecun(rng, d, d), False)
            self.add_param(f"attn.{proj}.bias", np.zeros(d), False)
        self.add_param("mlp.fc1.weight", _lecun(rng, d, hidden), False)
        self.add_param("mlp.fc1.bias", np.zeros(hidden), False)
        self.add_param("mlp.fc2.weight", _lecun(rng, hidden, d), False)
        self.add_param("mlp.fc2.bias", np.zeros(d), False)
        # up-projection starts at zero so a fresh adapter leaves the base block untouched
        self.add_param("adapter.down.weight", _lecun(rng, d, r), True)
        self.add_param("adapter.down.bias", np.zeros(r), True)
        self.add_param("adapter.up.weight", np.zeros((r, d)), True)
        self.add_param("adapter.up.bias", np.zeros(d), True)
        self.add_param("adapter.scale", np.asarray(config.adapter_scale), True)

    def _p(self, name: str) -> Tensor:
        return self._params[name]

    def forward(self, x: Tensor) -> Tensor:
        p = self._p
        h = ag.layer_norm(x, p("norm1.gain"), p("norm1.bias"))
        q = ag.linear(h, p("attn.q.weight"), p("attn.q.bias"))
        k = ag.linear(h, p("attn.k.weight"), p("attn.k.bias"))
        v = ag.linear(h, p("attn.v.weight"), p("attn.v.bias"))
        attn = ag.multi_head_attention(q, k, v, self.num_heads)
        x = ag.add(x, ag.linear(attn, p("attn.proj.weight"), p("attn.proj.bias")))

        h = ag.layer_norm(x, p("norm2.gain"), p("norm2.bias"))
        mlp = ag.linear(ag.gelu(ag.linear(h, p("mlp.fc1.weight"), p("mlp.fc1.bias"))), p("mlp.fc2.weight"), p("mlp.fc2.bias"))
        adapter = ag.relu(ag.linear(h, p("adapter.down.weight"), p("adapter.down.bias")))
        adapter = ag.scale_by(ag.linear(adapter, p("adapter.up.weight"), p("adapter.up.bias")), p("adapter.scale"))
        return ag.add(x, ag.add(mlp, adapter))

    def zero_adapter(self) -> None:
        for name in ("adapter.up.weight", "adapter.up.bias"):
            self._params[name].data[...] = 0.0


class Backbone(Module):
    def __init__(self, config: BackboneConfig, rng: np.random.Generator):
        super().__init__()
        self.config = config
        d, p = config.embed_dim, config.patch_size
        patch_dim = p * p * 3
        self.add_param("patch_embed.weight", _lecun(rng, patch_dim, d), False)
        self.add_param("patch_embed.bias", np.zeros(d), False)
        self.add_param("cls_token", 0.02 * rng.standard_normal((1, d)), False)
        self.add_param("pos_embed", 0.02 * rng.standard_normal((config.num_patches + 1, d)), False)
        self.blocks = [
            self.add_child(f"blocks.{i}", AdaptedBlock(config, rng)) for i in range(config.num_blocks)
        ]

    def patchify(self, image: np.ndarray) -> Tensor:
        """Token sequence ``(N+1) x D_C``: class token first, positional encodings added."""
        cfg = self.config
        image = np.asarray(image)
        if image.shape != (cfg.image_size, cfg.image_size, 3):
            raise ConfigError(
                f"image shape {image.shape} does not match configured "
                f"{(cfg.image_size, cfg.image_size, 3)}"
            )
        g, p = cfg.grid_size, cfg.patch_size
        dtype = self._params["patch_embed.weight"].dtype
        patches = image.reshape(g, p, g, p, 3).transpose(0, 2, 1, 3, 4).reshape(g * g, p * p * 3)
        tokens = ag.linear(Tensor(patches.astype(dtype)), self._params["patch_embed.weight"], self._params["patch_embed.bias"])
        seq = ag.concat([self._params["cls_token"], tokens], axis=0)
        return ag.add(seq, self._params["pos_embed"])

    def forward(self, image: np.ndarray) -> Tensor:
        x = self.patchify(image)
        for block in self.blocks:
            x = block.forward(x)
        return x

    def extract_pixel_features(self, image: np.ndarray) -> Tensor:
        """Patch tokens after the last block as a ``G x G x D_C`` grid."""
        g = self.config.grid_size
        tokens = self.forward(image)
        return ag.reshape(ag.slice_rows(tokens, 1), (g, g, self.config.embed_dim))

    def zero_adapters(self) -> None:
        for block in self.blocks:
            block.zero_adapter()
