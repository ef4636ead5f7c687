"""Contextual-query extraction.

A single learned ``K x D_T`` query matrix attends over the channel-reduced
pixel features of an image. The updated, image-specific queries are dotted
against every grid position to form a ``K x G x G`` heatmap, which is turned
into a per-position context feature either by an MLP over the normalised
heatmap channels (``"mlp"``) or by a softmax-weighted sum of the query
embeddings (``"weighted"``).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .nn import Module


@dataclass
class ContextOutput:
    reduced: Tensor  # G x G x D_T
    queries: Tensor  # K x D_T, image-specific
    heatmap: Tensor  # K x G x G
    feature: Tensor  # G x G x D_T


def reduce_features(pixel: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    return ag.conv1x1(pixel, weight, bias)


def compute_heatmap(queries: Tensor, reduced: Tensor) -> Tensor:
    g1, g2, d = reduced.shape
    flat = ag.reshape(reduced, (g1 * g2, d))
    return ag.reshape(ag.matmul(queries, ag.transpose(flat)), (queries.shape[0], g1, g2))


def normalize_heatmap(heatmap: Tensor, mode: str = "softmax") -> Tensor:
    """Normalise each position's K-vector; returns an ``N x K`` matrix."""
    k, g1, g2 = heatmap.shape
    per_pos = ag.transpose(ag.reshape(heatmap, (k, g1 * g2)))
    if mode == "softmax":
        return ag.softmax(per_pos, axis=1)
    if mode == "l2":
        return ag.l2_normalize(per_pos, axis=1)
    raise ValueError(f"unknown heatmap normalisation {mode!r}")


def context_feature(heatmap: Tensor, mlp: dict[str, Tensor], mode: str = "softmax") -> Tensor:
    _, g1, g2 = heatmap.shape
    h = normalize_heatmap(heatmap, mode)
    h = ag.gelu(ag.linear(h, mlp["fc1.weight"], mlp["fc1.bias"]))
    out = ag.linear(h, mlp["fc2.weight"], mlp["fc2.bias"])
    return ag.reshape(out, (g1, g2, out.shape[1]))


def context_feature_weighted(heatmap: Tensor, queries: Tensor) -> Tensor:
    _, g1, g2 = heatmap.shape
    if queries.shape[0] != heatmap.shape[0]:
        raise ag.ShapeError(f"heatmap {heatmap.shape} vs queries {queries.shape}")
    weights = normalize_heatmap(heatmap, "softmax")
    out = ag.matmul(weights, queries)
    return ag.reshape(out, (g1, g2, queries.shape[1]))


class ContextModule(Module):
    def __init__(
        self,
        in_dim: int,
        query_dim: int = 256,
        num_queries: int = 10,
        num_heads: int = 8,
        residual: bool = False,
        norm_mode: str = "softmax",
        feature_mode: str = "mlp",
        rng: np.random.Generator | None = None,
    ):
        super().__init__()
        if num_queries < 1:
            raise ValueError("num_queries must be at least 1")
        if query_dim % num_heads:
            raise ValueError(f"query_dim {query_dim} not divisible by {num_heads} heads")
        rng = rng or np.random.default_rng(0)
        self.num_heads = num_heads
        self.residual = residual
        self.norm_mode = norm_mode
        self.feature_mode = feature_mode
        k, d = num_queries, query_dim
        self.add_param("reduce.weight", rng.standard_normal((in_dim, d)) / np.sqrt(in_dim), True)
        self.add_param("reduce.bias", np.zeros(d), True)
        self.add_param("queries", 0.02 * rng.standard_normal((k, d)), True)
        for proj in ("q", "k", "v", "o"):
            self.add_param(f"attn.{proj}.weight", rng.standard_normal((d, d)) / np.sqrt(d), True)
            self.add_param(f"attn.{proj}.bias", np.zeros(d), True)
        self.add_param("mlp.fc1.weight", rng.standard_normal((k, 4 * k)) / np.sqrt(k), True)
        self.add_param("mlp.fc1.bias", np.zeros(4 * k), True)
        self.add_param("mlp.fc2.weight", rng.standard_normal((4 * k, d)) / np.sqrt(4 * k), True)
        self.add_param("mlp.fc2.bias", np.zeros(d), True)

    @property
    def num_queries(self) -> int:
        return self._params["queries"].shape[0]

    def reduce(self, pixel: Tensor) -> Tensor:
        return reduce_features(pixel, self._params["reduce.weight"], self._params["reduce.bias"])

    def update_queries(self, reduced: Tensor) -> Tensor:
        """One cross-attention layer: learned queries against the reduced grid."""
        p = self._params
        g1, g2, d = reduced.shape
        flat = ag.reshape(reduced, (g1 * g2, d))
        init = p["queries"]
        q = ag.linear(init, p["attn.q.weight"], p["attn.q.bias"])
        k = ag.linear(flat, p["attn.k.weight"], p["attn.k.bias"])
        v = ag.linear(flat, p["attn.v.weight"], p["attn.v.bias"])
        out = ag.linear(ag.multi_head_attention(q, k, v, self.num_heads), p["attn.o.weight"], p["attn.o.bias"])
        return ag.add(out, init) if self.residual else out

    def forward(self, pixel: Tensor) -> ContextOutput:
        reduced = self.reduce(pixel)
        queries = self.update_queries(reduced)
        heatmap = compute_heatmap(queries, reduced)
        if self.feature_mode == "weighted":
            feature = context_feature_weighted(heatmap, queries)
        else:
            mlp = {n[4:]: t for n, t in self._params.items() if n.startswith("mlp.")}
            feature = context_feature(heatmap, mlp, self.norm_mode)
        return ContextOutput(reduced, queries, heatmap, feature)
