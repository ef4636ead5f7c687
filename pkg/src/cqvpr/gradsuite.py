"""The finite-difference suite run by ``cqvpr gradcheck`` and the test-suite.

Every differentiable kernel is checked on small random inputs; the composite
training loss is checked end to end through a full model, probing a sample of
trainable parameter coordinates.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .context import context_feature, context_feature_weighted, normalize_heatmap
from .gradcheck import grad_check, grad_check_detailed
from .losses import (
    LossConfig,
    local_mutual_matching_loss,
    query_matching_loss,
    total_loss,
    triplet_global_loss,
)
from .model import CQVPRModel, preset

Case = tuple[Callable[[], Tensor], list[Tensor]]


def _rand(rng: np.random.Generator, *shape: int) -> Tensor:
    return Tensor(rng.standard_normal(shape))


def _unit_rows(rng: np.random.Generator, *shape: int) -> Tensor:
    x = rng.standard_normal(shape)
    return Tensor(x / np.linalg.norm(x, axis=-1, keepdims=True))


def _weighted_sum(out: Tensor, rng: np.random.Generator) -> Tensor:
    """Project onto a fixed random direction so every output entry matters."""
    return ag.sum_all(ag.mul(out, Tensor(rng.standard_normal(out.shape))))


def op_cases(rng: np.random.Generator) -> dict[str, Case]:
    """``name -> (closure, inputs)`` for every differentiable op and loss term."""
    a, b = _rand(rng, 3, 4), _rand(rng, 4, 2)
    x34, gain, bias = _rand(rng, 3, 4), _rand(rng, 4), _rand(rng, 4)
    v8 = _rand(rng, 8)
    grid, cw, cb = _rand(rng, 2, 2, 3), _rand(rng, 3, 2), _rand(rng, 2)
    tgrid, tw, tb = _rand(rng, 3, 3, 2), _rand(rng, 3, 3, 2, 3), _rand(rng, 3)
    pos = Tensor(rng.uniform(0.2, 2.0, size=(6, 3)))
    p = Tensor(np.asarray(rng.uniform(1.5, 4.0)))
    q, k, v = _rand(rng, 3, 8), _rand(rng, 5, 8), _rand(rng, 5, 8)
    s = Tensor(np.asarray(rng.standard_normal()))
    c1, c2, c3 = _rand(rng, 2, 3), _rand(rng, 4, 3), _rand(rng, 2, 3)
    idx = np.array([0, 3, 3, 1])
    heat = _rand(rng, 3, 2, 2)
    mlp = {
        "fc1.weight": _rand(rng, 3, 12),
        "fc1.bias": _rand(rng, 12),
        "fc2.weight": _rand(rng, 12, 4),
        "fc2.bias": _rand(rng, 4),
    }
    queries = _rand(rng, 3, 4)
    # loss inputs: descriptors spread enough that every hinge is active
    g_q, g_p = _unit_rows(rng, 6), _unit_rows(rng, 6)
    g_negs = [Tensor(g_q.data + 0.05 * rng.standard_normal(6)) for _ in range(2)]
    t_q, t_p, t_negs = _rand(rng, 4, 5), _rand(rng, 4, 5), [_rand(rng, 4, 5) for _ in range(2)]
    l_q, l_p, l_negs = _unit_rows(rng, 3, 3, 4), _unit_rows(rng, 3, 3, 4), [_unit_rows(rng, 3, 3, 4) for _ in range(2)]

    return {
        "matmul": (lambda: _weighted_sum(ag.matmul(a, b), np.random.default_rng(1)), [a, b]),
        "softmax": (lambda: _weighted_sum(ag.softmax(x34, axis=1), np.random.default_rng(2)), [x34]),
        "layer_norm": (lambda: _weighted_sum(ag.layer_norm(x34, gain, bias), np.random.default_rng(3)), [x34, gain, bias]),
        "l2_normalize": (lambda: _weighted_sum(ag.l2_normalize(v8), np.random.default_rng(4)), [v8]),
        "gelu": (lambda: _weighted_sum(ag.gelu(x34), np.random.default_rng(5)), [x34]),
        "conv1x1": (lambda: _weighted_sum(ag.conv1x1(grid, cw, cb), np.random.default_rng(6)), [grid, cw, cb]),
        "transposed_conv2d": (
            lambda: _weighted_sum(ag.transposed_conv2d(tgrid, tw, tb), np.random.default_rng(7)),
            [tgrid, tw, tb],
        ),
        "gem_pool": (lambda: _weighted_sum(ag.gem_pool(pos, p), np.random.default_rng(8)), [pos, p]),
        "attention": (
            lambda: _weighted_sum(ag.multi_head_attention(q, k, v, 2), np.random.default_rng(9)),
            [q, k, v],
        ),
        "scale_by": (lambda: _weighted_sum(ag.scale_by(x34, s), np.random.default_rng(10)), [x34, s]),
        "concat": (lambda: _weighted_sum(ag.concat([c1, c2], axis=0), np.random.default_rng(11)), [c1, c2]),
        "take_rows": (lambda: _weighted_sum(ag.take_rows(c2, idx), np.random.default_rng(12)), [c2]),
        "add_bias": (lambda: _weighted_sum(ag.add_bias(x34, gain), np.random.default_rng(13)), [x34, gain]),
        "euclidean_distance": (lambda: ag.euclidean_distance(c1, c3), [c1]),
        "heatmap_softmax": (lambda: _weighted_sum(normalize_heatmap(heat, "softmax"), np.random.default_rng(14)), [heat]),
        "heatmap_l2": (lambda: _weighted_sum(normalize_heatmap(heat, "l2"), np.random.default_rng(15)), [heat]),
        "context_feature": (
            lambda: _weighted_sum(context_feature(heat, mlp), np.random.default_rng(16)),
            [heat, *mlp.values()],
        ),
        "context_feature_weighted": (
            lambda: _weighted_sum(context_feature_weighted(heat, queries), np.random.default_rng(17)),
            [heat, queries],
        ),
        "triplet_global_loss": (lambda: triplet_global_loss(g_q, g_p, g_negs, 0.1), [g_q, g_p, *g_negs]),
        "query_matching_loss": (lambda: query_matching_loss(t_q, t_p, t_negs), [t_q, t_p, *t_negs]),
        "local_mutual_matching_loss": (
            lambda: local_mutual_matching_loss(l_q, l_p, l_negs),
            [l_q, l_p, *l_negs],
        ),
    }


OP_NAMES: tuple[str, ...] = tuple(op_cases(np.random.default_rng(0)))

# trainable tensors probed by the composite check: one per stage of the network
COMPOSITE_PARAMS = (
    "backbone.blocks.0.adapter.down.weight",
    "backbone.blocks.0.adapter.up.weight",
    "backbone.blocks.0.adapter.scale",
    "context.reduce.weight",
    "context.queries",
    "context.attn.q.weight",
    "context.mlp.fc2.weight",
    "head.gem.p",
    "head.up1.weight",
    "head.up2.weight",
)


def composite_case(model: CQVPRModel, rng: np.random.Generator, num_negatives: int = 2) -> Case:
    """Full ``L = L_g + alpha L_l + beta L_c`` for one random tuple through ``model``."""
    size = model.config.backbone.image_size
    images = [rng.uniform(0.0, 1.0, size=(size, size, 3)) for _ in range(2 + num_negatives)]
    cfg = LossConfig(num_negatives=num_negatives)
    params = dict((name, t) for name, t, _ in model.named_parameters())
    probed = [params[n] for n in COMPOSITE_PARAMS if n in params]

    def closure() -> Tensor:
        outs = [model.forward(im, local=True) for im in images]
        q, p, negs = outs[0], outs[1], outs[2:]
        l_g = triplet_global_loss(q.global_desc, p.global_desc, [n.global_desc for n in negs], cfg.margin)
        l_l = local_mutual_matching_loss(q.local, p.local, [n.local for n in negs])
        l_c = query_matching_loss(q.queries, p.queries, [n.queries for n in negs])
        return total_loss(l_g, l_l, l_c, cfg)

    return closure, probed


@dataclass
class SuiteResult:
    errors: dict[str, float]
    threshold: float
    seeds: int
    seconds: float
    composite_checked: int = 0
    composite_skipped: int = 0

    @property
    def passed(self) -> bool:
        return all(e <= self.threshold for e in self.errors.values())

    def report(self) -> str:
        width = max(len(n) for n in self.errors)
        lines = [f"{'op':<{width}}  max_rel_err  status"]
        for name, err in self.errors.items():
            lines.append(f"{name:<{width}}  {err:.3e}    {'ok' if err <= self.threshold else 'FAIL'}")
        lines.append(
            f"seeds={self.seeds} threshold={self.threshold:g} seconds={self.seconds:.1f} "
            f"composite_coords={self.composite_checked} non_smooth_skipped={self.composite_skipped}"
        )
        return "\n".join(lines)


def run_suite(
    preset_name: str = "desk",
    seeds: int = 20,
    threshold: float = 1e-4,
    eps: float = 1e-6,
    composite_eps: float = 1e-4,
    composite_components: int = 2,
) -> SuiteResult:
    """Max relative error per op over ``seeds`` seeds, plus the composite loss.

    The composite loss contains ReLUs, hinges and matching sets that are held
    constant, so it is probed with kink avoidance and a slightly larger step
    (its gradients span many orders of magnitude and a 1e-6 step leaves the
    smallest ones dominated by round-off).
    """
    start = time.perf_counter()
    errors = {name: 0.0 for name in OP_NAMES}
    for seed in range(seeds):
        for name, (closure, inputs) in op_cases(np.random.default_rng(seed)).items():
            errors[name] = max(errors[name], grad_check(closure, inputs, eps=eps))
    errors["composite_loss"] = 0.0
    checked = skipped = 0
    for seed in range(seeds):
        model = CQVPRModel(preset(preset_name, seed=seed))
        # move the adapters off their zero start so every path carries gradient
        init = np.random.default_rng([seed, 1])
        for name, t, trainable in model.named_parameters():
            if trainable and name.endswith("adapter.up.weight"):
                t.data[...] = 0.02 * init.standard_normal(t.shape)
        rng = np.random.default_rng([seed, 2])
        closure, inputs = composite_case(model, rng)
        res = grad_check_detailed(
            closure, inputs, eps=composite_eps, max_components=composite_components, rng=rng, avoid_kinks=True
        )
        errors["composite_loss"] = max(errors["composite_loss"], res.max_error)
        checked += res.checked
        skipped += res.skipped
    return SuiteResult(errors, threshold, seeds, time.perf_counter() - start, checked, skipped)
