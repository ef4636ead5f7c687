"""Finite-difference verification of reverse-mode gradients."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .autograd import Tensor, no_grad


class DeterminismError(RuntimeError):
    """The closure returned different values for identical inputs."""


def relative_error(g_ad: np.ndarray, g_fd: np.ndarray) -> np.ndarray:
    return np.abs(g_ad - g_fd) / np.maximum(1e-8, np.abs(g_ad) + np.abs(g_fd))


@dataclass
class GradCheckResult:
    max_error: float
    checked: int
    skipped: int  # coordinates rejected as non-smooth when kink avoidance is on


def grad_check(
    closure: Callable[[], Tensor],
    inputs: Sequence[Tensor],
    eps: float = 1e-3,
    max_components: int | None = None,
    rng: np.random.Generator | None = None,
    avoid_kinks: bool = False,
) -> float:
    """Max relative error between reverse-mode and central-difference gradients.

    ``closure`` must rebuild a scalar graph from ``inputs`` on every call. When
    ``max_components`` is set, at most that many coordinates per input are
    probed (chosen with ``rng``). See :func:`grad_check_detailed` for
    ``avoid_kinks``.
    """
    return grad_check_detailed(closure, inputs, eps, max_components, rng, avoid_kinks).max_error


def _smooth(fp: float, f0: float, fm: float, eps: float) -> bool:
    """One-sided slopes agree, so no kink or discrete switch lies within ``eps``.

    For a single kink inside the probe interval the central-difference error is
    exactly half the one-sided slope gap, so a gap this small keeps the central
    estimate well inside the checking tolerance.
    """
    right, left = (fp - f0) / eps, (f0 - fm) / eps
    noise = KINK_ROUNDOFF * max(1.0, abs(f0)) / eps
    return abs(right - left) <= KINK_RTOL * (abs(right) + abs(left)) + noise


KINK_RTOL = 5e-5
# loss values carry a few hundred ulps of accumulated round-off
KINK_ROUNDOFF = 1e-13


def grad_check_detailed(
    closure: Callable[[], Tensor],
    inputs: Sequence[Tensor],
    eps: float = 1e-3,
    max_components: int | None = None,
    rng: np.random.Generator | None = None,
    avoid_kinks: bool = False,
) -> GradCheckResult:
    """Like :func:`grad_check`, with counts of probed and rejected coordinates.

    With ``avoid_kinks`` a coordinate whose one-sided difference quotients
    disagree is treated as sitting on a non-differentiable point (a hinge, a
    ReLU, or a change of matching set) and another coordinate is drawn in its
    place. The test uses finite differences only, so it cannot mask an
    incorrect analytic gradient at a smooth point.
    """
    for t in inputs:
        if t.data.dtype != np.float64:
            raise TypeError("grad_check needs float64 inputs")
        t.data = np.ascontiguousarray(t.data)
        t.requires_grad = True
        t.zero_grad()
    out = closure()
    if out.data.size != 1:
        raise ValueError(f"grad_check closure must be scalar, got shape {out.shape}")
    out.backward()
    analytic = [t.grad.copy() for t in inputs]
    centre = float(out.data)

    with no_grad():
        first = float(closure().data)
        second = float(closure().data)
    if first != second or first != centre:
        raise DeterminismError(f"closure is not deterministic: {first!r} vs {second!r}")

    rng = rng or np.random.default_rng(0)
    worst, checked, skipped = 0.0, 0, 0
    with no_grad():
        for t, g_ad in zip(inputs, analytic):
            flat = t.data.reshape(-1)
            limit = flat.size if max_components is None else min(max_components, flat.size)
            order = np.arange(flat.size) if limit == flat.size and not avoid_kinks else rng.permutation(flat.size)
            done = 0
            for i in order:
                if done == limit:
                    break
                orig = flat[i]
                flat[i] = orig + eps
                fp = float(closure().data)
                flat[i] = orig - eps
                fm = float(closure().data)
                flat[i] = orig
                if avoid_kinks and not _smooth(fp, centre, fm, eps):
                    skipped += 1
                    continue
                fd = (fp - fm) / (2 * eps)
                err = float(relative_error(np.asarray(g_ad.reshape(-1)[i]), np.asarray(fd)))
                worst = max(worst, err)
                done += 1
            checked += done
    return GradCheckResult(worst, checked, skipped)
