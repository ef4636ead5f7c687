"""Global (GeM) and local (up-convolved) descriptors from the fused feature grid."""

from __future__ import annotations

import numpy as np

from . import autograd as ag
from .autograd import Tensor, transposed_conv_output_size
from .nn import Module


def fuse(pixel: Tensor, context: Tensor) -> Tensor:
    if pixel.shape[:2] != context.shape[:2]:
        raise ag.ShapeError(f"fuse: grids {pixel.shape[:2]} and {context.shape[:2]} differ")
    return ag.concat([pixel, context], axis=2)


def global_descriptor(fused: Tensor, p: Tensor | float) -> Tensor:
    g1, g2, c = fused.shape
    pooled = ag.gem_pool(ag.reshape(fused, (g1 * g2, c)), p)
    return ag.l2_normalize(pooled)


def local_grid_size(grid: int, num_upconvs: int = 2) -> int:
    for _ in range(num_upconvs):
        grid = transposed_conv_output_size(grid, 3, 2, 1)
    return grid


class DescriptorHead(Module):
    """GeM exponent plus the two-stage 3x3/stride-2 up-convolution stack."""

    def __init__(
        self,
        in_dim: int,
        hidden_dim: int = 256,
        local_dim: int = 128,
        gem_p: float = 3.0,
        rng: np.random.Generator | None = None,
    ):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.add_param("gem.p", np.asarray(gem_p), True)
        self.add_param("up1.weight", rng.standard_normal((3, 3, in_dim, hidden_dim)) / np.sqrt(9 * in_dim / 4), True)
        self.add_param("up1.bias", np.zeros(hidden_dim), True)
        self.add_param("up2.weight", rng.standard_normal((3, 3, hidden_dim, local_dim)) / np.sqrt(9 * hidden_dim / 4), True)
        self.add_param("up2.bias", np.zeros(local_dim), True)

    @property
    def gem_p(self) -> Tensor:
        return self._params["gem.p"]

    def global_descriptor(self, fused: Tensor) -> Tensor:
        return global_descriptor(fused, self._params["gem.p"])

    def local_descriptors(self, fused: Tensor) -> Tensor:
        p = self._params
        h = ag.relu(ag.transposed_conv2d(fused, p["up1.weight"], p["up1.bias"], stride=2, padding=1))
        h = ag.transposed_conv2d(h, p["up2.weight"], p["up2.bias"], stride=2, padding=1)
        return ag.l2_normalize(h, axis=2)
