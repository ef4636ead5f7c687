"""The full place-recognition network and its presets."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace
from typing import Any

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .backbone import FULL_BACKBONE, DESK_BACKBONE, TINY_BACKBONE, Backbone, BackboneConfig, ConfigError
from .context import ContextModule, ContextOutput
from .descriptors import DescriptorHead, fuse, local_grid_size
from .nn import Module


@dataclass(frozen=True)
class ModelConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    num_queries: int = 10
    query_dim: int = 32
    attn_heads: int = 8
    attn_residual: bool = False
    norm_mode: str = "softmax"  # softmax | l2
    context_mode: str = "mlp"  # mlp | weighted
    use_pixel: bool = True
    use_context: bool = True
    upconv_dim: int = 256
    local_dim: int = 128
    gem_p: float = 3.0
    seed: int = 0

    def __post_init__(self):
        if not (self.use_pixel or self.use_context):
            raise ConfigError("at least one of use_pixel / use_context must be set")
        if self.norm_mode not in ("softmax", "l2"):
            raise ConfigError(f"norm_mode must be softmax or l2, got {self.norm_mode!r}")
        if self.context_mode not in ("mlp", "weighted"):
            raise ConfigError(f"context_mode must be mlp or weighted, got {self.context_mode!r}")
        if self.num_queries < 1:
            raise ConfigError("num_queries must be at least 1")

    @property
    def grid_size(self) -> int:
        return self.backbone.grid_size

    @property
    def fused_dim(self) -> int:
        return self.backbone.embed_dim * self.use_pixel + self.query_dim * self.use_context

    @property
    def local_grid(self) -> int:
        return local_grid_size(self.grid_size)

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ModelConfig":
        d = dict(d)
        d["backbone"] = BackboneConfig(**d.get("backbone", {}))
        return cls(**d)


PRESETS: dict[str, ModelConfig] = {
    "full": ModelConfig(backbone=FULL_BACKBONE, query_dim=256),
    "desk": ModelConfig(backbone=DESK_BACKBONE, query_dim=32),
    "tiny": ModelConfig(backbone=TINY_BACKBONE, num_queries=3, query_dim=8, attn_heads=2, upconv_dim=6, local_dim=5),
}


def preset(name: str, **overrides) -> ModelConfig:
    try:
        base = PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    backbone_keys = {k: overrides.pop(k) for k in list(overrides) if k in BackboneConfig.__dataclass_fields__}
    if backbone_keys:
        overrides["backbone"] = replace(base.backbone, **backbone_keys)
    return replace(base, **overrides)


@dataclass
class ImageOutput:
    pixel: Tensor
    context: ContextOutput
    fused: Tensor
    global_desc: Tensor
    local: Tensor | None

    @property
    def queries(self) -> Tensor:
        return self.context.queries

    @property
    def heatmap(self) -> Tensor:
        return self.context.heatmap


class CQVPRModel(Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        seeds = np.random.SeedSequence(config.seed).spawn(3)
        rngs = [np.random.default_rng(s) for s in seeds]
        self.backbone = self.add_child("backbone", Backbone(config.backbone, rngs[0]))
        self.context = self.add_child(
            "context",
            ContextModule(
                config.backbone.embed_dim,
                query_dim=config.query_dim,
                num_queries=config.num_queries,
                num_heads=config.attn_heads,
                residual=config.attn_residual,
                norm_mode=config.norm_mode,
                feature_mode=config.context_mode,
                rng=rngs[1],
            ),
        )
        self.head = self.add_child(
            "head",
            DescriptorHead(config.fused_dim, config.upconv_dim, config.local_dim, config.gem_p, rng=rngs[2]),
        )

    @property
    def dtype(self):
        return self.head.gem_p.dtype

    def forward_pixels(self, pixel: Tensor, local: bool = True) -> ImageOutput:
        """Run everything downstream of the backbone on a ``G x G x D_C`` grid."""
        if pixel.dtype != self.dtype:
            pixel = Tensor(pixel.data.astype(self.dtype)) if not pixel.requires_grad else pixel
        ctx = self.context.forward(pixel)
        if self.config.use_pixel and self.config.use_context:
            fused = fuse(pixel, ctx.feature)
        else:
            fused = pixel if self.config.use_pixel else ctx.feature
        g = self.head.global_descriptor(fused)
        loc = self.head.local_descriptors(fused) if local else None
        return ImageOutput(pixel, ctx, fused, g, loc)

    def forward(self, image: np.ndarray, local: bool = True) -> ImageOutput:
        pixel = self.backbone.extract_pixel_features(np.asarray(image, dtype=self.dtype))
        return self.forward_pixels(pixel, local=local)

    def describe(self, image: np.ndarray, local: bool = True) -> tuple[np.ndarray, np.ndarray | None]:
        """Inference helper: float32 global vector and local grid, no graph."""
        with ag.no_grad():
            out = self.forward(image, local=local)
        loc = out.local.data.astype(np.float32) if out.local is not None else None
        return out.global_desc.data.astype(np.float32), loc


def clone_model(model: CQVPRModel, dtype=np.float64) -> CQVPRModel:
    """Independent copy of ``model`` with parameters cast to ``dtype``."""
    copy = CQVPRModel(model.config)
    copy.load_state(model.state())
    copy.set_dtype(dtype)
    return copy
