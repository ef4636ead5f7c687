"""Training objectives: global triplet loss, local mutual-matching loss and the
contextual-query matching loss, combined as ``L_g + alpha*L_l + beta*L_c``.

Matching sets are recomputed on every forward pass from the current values and
then held fixed; gradients flow through the matched similarities only.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .matching import mnn_match


@dataclass(frozen=True)
class LossConfig:
    margin: float = 0.1
    alpha: float = 1.0
    beta: float = 1.0
    num_negatives: int = 5

    def __post_init__(self):
        if not self.margin > 0:
            raise ValueError(f"margin must be positive, got {self.margin}")
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be non-negative")
        if self.num_negatives < 1:
            raise ValueError("num_negatives must be at least 1")


def _check_dims(name: str, ref: Tensor, others: Sequence[Tensor]) -> None:
    for t in others:
        if t.shape != ref.shape:
            raise ag.ShapeError(f"{name}: descriptor shape {t.shape} != {ref.shape}")


def triplet_global_loss(g_q: Tensor, g_p: Tensor, g_negs: Sequence[Tensor], margin: float = 0.1) -> Tensor:
    _check_dims("triplet_global_loss", g_q, [g_p, *g_negs])
    d_pos = ag.euclidean_distance(g_q, g_p)
    terms = []
    for g_n in g_negs:
        gap = ag.sub(d_pos, ag.euclidean_distance(g_q, g_n))
        terms.append(ag.hinge(ag.add(gap, Tensor(np.asarray(margin, dtype=gap.dtype)))))
    return ag.add_scalars(terms)


def mnn_mean_similarity(a: Tensor, b: Tensor) -> Tensor:
    """Mean of ``a[i] . b[j]`` over the mutual nearest neighbours of ``a b^T``.

    Rows of ``a`` and ``b`` are expected to be unit-norm already. An empty
    match set yields zero.
    """
    sim = a.data @ b.data.T
    matches = mnn_match(sim)
    if matches.count == 0:
        return Tensor(np.asarray(0.0, dtype=a.dtype))
    prod = ag.mul(ag.take_rows(a, matches.index_a), ag.take_rows(b, matches.index_b))
    return ag.scale(ag.sum_all(prod), 1.0 / matches.count)


def _hinge_over_negatives(s_pos: Tensor, s_negs: Sequence[Tensor]) -> Tensor:
    return ag.add_scalars(ag.hinge(ag.sub(s_n, s_pos)) for s_n in s_negs)


def query_matching_loss(t_q: Tensor, t_p: Tensor, t_negs: Sequence[Tensor]) -> Tensor:
    """Hinge on MNN-mean cosine similarity between contextual embeddings."""
    _check_dims("query_matching_loss", t_q, [t_p, *t_negs])
    q = ag.l2_normalize(t_q, axis=1)
    s_pos = mnn_mean_similarity(q, ag.l2_normalize(t_p, axis=1))
    s_negs = [mnn_mean_similarity(q, ag.l2_normalize(t_n, axis=1)) for t_n in t_negs]
    return _hinge_over_negatives(s_pos, s_negs)


def _flatten_grid(t: Tensor) -> Tensor:
    return ag.reshape(t, (-1, t.shape[-1])) if t.data.ndim == 3 else t


def local_mutual_matching_loss(l_q: Tensor, l_p: Tensor, l_negs: Sequence[Tensor]) -> Tensor:
    """Same hinge-over-MNN-similarity structure applied to local descriptor grids.

    This is an interpretation: the loss is only named, not written out, in the
    method description this package follows.
    """
    _check_dims("local_mutual_matching_loss", l_q, [l_p, *l_negs])
    q = _flatten_grid(l_q)
    s_pos = mnn_mean_similarity(q, _flatten_grid(l_p))
    s_negs = [mnn_mean_similarity(q, _flatten_grid(l_n)) for l_n in l_negs]
    return _hinge_over_negatives(s_pos, s_negs)


def total_loss(l_g: Tensor, l_l: Tensor, l_c: Tensor, config: LossConfig = LossConfig()) -> Tensor:
    return ag.add_scalars([l_g, ag.scale(l_l, config.alpha), ag.scale(l_c, config.beta)])
