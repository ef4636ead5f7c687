"""Reverse-mode differentiable tensor kernels on top of numpy.

Only the operations the place-recognition model needs are provided. Broadcasting
is limited to bias addition along the trailing axis; everything else requires
identical shapes and explicit reshapes.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class ParameterError(ValueError):
    """A hyper-parameter of an operation is out of its valid range."""


_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording in the current thread."""
    prev = is_grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "meta", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.meta: dict = {}
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def backward(self, grad: np.ndarray | None = None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(f"backward() without a seed needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if not node._parents:
                if node.requires_grad:
                    if node.grad is None:
                        node.grad = np.zeros_like(node.data)
                    node.grad += g
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor(data)
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


# ---------------------------------------------------------------------------
# elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return _result(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return _result(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)
    return _result(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def scale(x: Tensor, c: float) -> Tensor:
    return _result(x.data * c, (x,), lambda g: (g * c,))


def scale_by(x: Tensor, s: Tensor) -> Tensor:
    """Multiply every element of ``x`` by the scalar tensor ``s``."""
    if s.data.size != 1:
        raise ShapeError(f"scale_by: scale must be a scalar, got shape {s.shape}")
    sv = s.data.reshape(())

    def backward(g):
        return g * sv, np.sum(g * x.data).reshape(s.shape)

    return _result(x.data * sv, (x, s), backward)


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    if b.data.ndim != 1 or b.shape[0] != x.shape[-1]:
        raise ShapeError(f"add_bias: bias shape {b.shape} does not match trailing dim of {x.shape}")
    lead = tuple(range(x.data.ndim - 1))
    return _result(x.data + b.data, (x, b), lambda g: (g, g.sum(axis=lead)))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _result(np.where(mask, x.data, 0.0).astype(x.dtype), (x,), lambda g: (g * mask,))


hinge = relu

_SQRT_HALF = 0.7071067811865476
_INV_SQRT_2PI = 0.3989422804014327


def gelu(x: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    cdf = 0.5 * (1.0 + erf(x.data * _SQRT_HALF))
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * x.data * x.data)
    return _result(x.data * cdf, (x,), lambda g: (g * (cdf + x.data * pdf),))


# ---------------------------------------------------------------------------
# shape manipulation


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    out = x.data.reshape(shape)
    return _result(out, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise ShapeError(f"transpose: expected a matrix, got shape {x.shape}")
    return _result(x.data.T.copy(), (x,), lambda g: (g.T,))


def concat(parts: Sequence[Tensor], axis: int) -> Tensor:
    ref = parts[0].shape
    ax = axis % len(ref)
    for p in parts[1:]:
        if len(p.shape) != len(ref) or any(
            p.shape[d] != ref[d] for d in range(len(ref)) if d != ax
        ):
            raise ShapeError(f"concat: shapes {[q.shape for q in parts]} disagree off axis {axis}")
    sizes = [p.shape[ax] for p in parts]
    edges = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(
            np.take(g, np.arange(edges[i], edges[i + 1]), axis=ax) for i in range(len(parts))
        )

    return _result(np.concatenate([p.data for p in parts], axis=ax), tuple(parts), backward)


def slice_rows(x: Tensor, start: int, stop: int | None = None) -> Tensor:
    out = x.data[start:stop]

    def backward(g):
        full = np.zeros_like(x.data)
        full[start:stop] = g
        return (full,)

    return _result(out.copy(), (x,), backward)


def take_rows(x: Tensor, index: np.ndarray) -> Tensor:
    """Gather rows ``x[index]``; repeated indices accumulate on the way back."""
    index = np.asarray(index, dtype=np.intp)

    def backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, index, g)
        return (full,)

    return _result(x.data[index], (x,), backward)


# ---------------------------------------------------------------------------
# reductions


def sum_all(x: Tensor) -> Tensor:
    return _result(np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),))


def mean_all(x: Tensor) -> Tensor:
    n = x.data.size
    return _result(
        np.asarray(x.data.mean()), (x,), lambda g: (np.broadcast_to(g / n, x.shape).copy(),)
    )


def add_scalars(terms: Iterable[Tensor]) -> Tensor:
    terms = list(terms)
    if not terms:
        return Tensor(np.asarray(0.0))
    data = np.asarray(sum(float(t.data) for t in terms))
    return _result(data, tuple(terms), lambda g: tuple(np.asarray(g).reshape(t.shape) for t in terms))


def euclidean_distance(a: Tensor, b: Tensor) -> Tensor:
    """``||a - b||``; the gradient at coincident points is taken as zero."""
    _same_shape("euclidean_distance", a, b)
    diff = a.data - b.data
    d = np.sqrt(np.sum(diff * diff))

    def backward(g):
        if d == 0:
            z = np.zeros_like(diff)
            return z, z
        u = g * diff / d
        return u, -u

    return _result(np.asarray(d), (a, b), backward)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    return _result(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    y = matmul(x, weight)
    return y if bias is None else add_bias(y, bias)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / np.sum(e, axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - np.sum(g * y, axis=axis, keepdims=True)),)

    return _result(y, (x,), backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-6) -> Tensor:
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: gain {gain.shape} / bias {bias.shape} vs input {x.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    lead = tuple(range(x.data.ndim - 1))

    def backward(g):
        gx_hat = g * gain.data
        gx = inv * (
            gx_hat
            - gx_hat.mean(axis=-1, keepdims=True)
            - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True)
        )
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _result(xhat * gain.data + bias.data, (x, gain, bias), backward)


def l2_normalize(x: Tensor, axis: int = -1, eps: float = 1e-12) -> Tensor:
    """Unit-normalise slices along ``axis``.

    Slices with norm at or below ``eps`` map to zero; their mask is stored in
    ``out.meta["zero"]``.
    """
    norm = np.sqrt(np.sum(x.data * x.data, axis=axis, keepdims=True))
    zero = norm <= eps
    safe = np.where(zero, 1.0, norm)
    y = np.where(zero, 0.0, x.data / safe).astype(x.dtype)

    def backward(g):
        gx = (g - y * np.sum(g * y, axis=axis, keepdims=True)) / safe
        return (np.where(zero, 0.0, gx),)

    out = _result(y, (x,), backward)
    out.meta["zero"] = np.squeeze(zero, axis=axis)
    return out


def conv1x1(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Per-position affine map of an ``H x W x Cin`` grid to ``H x W x Cout``."""
    if x.data.ndim != 3 or weight.data.ndim != 2 or x.shape[2] != weight.shape[0]:
        raise ShapeError(f"conv1x1: input {x.shape} incompatible with weights {weight.shape}")
    if bias.shape != (weight.shape[1],):
        raise ShapeError(f"conv1x1: bias {bias.shape} vs weights {weight.shape}")
    h, w, cin = x.shape
    flat = x.data.reshape(h * w, cin)
    out = (flat @ weight.data + bias.data).reshape(h, w, -1)

    def backward(g):
        gf = g.reshape(h * w, -1)
        return (gf @ weight.data.T).reshape(x.shape), flat.T @ gf, gf.sum(axis=0)

    return _result(out, (x, weight, bias), backward)


def transposed_conv_output_size(size: int, kernel: int = 3, stride: int = 2, padding: int = 1) -> int:
    return (size - 1) * stride - 2 * padding + kernel


def transposed_conv2d(
    x: Tensor, weight: Tensor, bias: Tensor, stride: int = 2, padding: int = 1
) -> Tensor:
    """Transposed convolution of an ``H x W x Cin`` grid.

    ``weight`` has shape ``k x k x Cin x Cout``. Each input pixel scatters
    ``x[i, j] @ weight[di, dj]`` to output location ``(i*stride + di - padding,
    j*stride + dj - padding)``.
    """
    if x.data.ndim != 3 or weight.data.ndim != 4:
        raise ShapeError(f"transposed_conv2d: input {x.shape}, weight {weight.shape}")
    kh, kw, cin, cout = weight.shape
    if kh != kw or cin != x.shape[2]:
        raise ShapeError(f"transposed_conv2d: input {x.shape} incompatible with weight {weight.shape}")
    if bias.shape != (cout,):
        raise ShapeError(f"transposed_conv2d: bias {bias.shape} vs {cout} output channels")
    if stride < 1 or padding < 0:
        raise ParameterError(f"transposed_conv2d: stride={stride}, padding={padding}")
    h, w, _ = x.shape
    k = kh
    hout = transposed_conv_output_size(h, k, stride, padding)
    wout = transposed_conv_output_size(w, k, stride, padding)
    if hout <= 0 or wout <= 0:
        raise ParameterError(f"transposed_conv2d: non-positive output size {hout}x{wout}")
    hfull = (h - 1) * stride + k
    wfull = (w - 1) * stride + k
    flat = x.data.reshape(h * w, cin)
    wmat = weight.data.transpose(2, 0, 1, 3).reshape(cin, k * k * cout)
    cols = (flat @ wmat).reshape(h, w, k, k, cout)
    full = np.zeros((hfull, wfull, cout), dtype=cols.dtype)
    hs = (h - 1) * stride + 1
    ws = (w - 1) * stride + 1
    for di in range(k):
        for dj in range(k):
            full[di : di + hs : stride, dj : dj + ws : stride] += cols[:, :, di, dj]
    out = full[padding : padding + hout, padding : padding + wout] + bias.data

    def backward(g):
        gfull = np.zeros((hfull, wfull, cout), dtype=g.dtype)
        gfull[padding : padding + hout, padding : padding + wout] = g
        gcols = np.empty((h, w, k, k, cout), dtype=g.dtype)
        for di in range(k):
            for dj in range(k):
                gcols[:, :, di, dj] = gfull[di : di + hs : stride, dj : dj + ws : stride]
        gcols = gcols.reshape(h * w, k * k * cout)
        gx = (gcols @ wmat.T).reshape(x.shape)
        gw = (flat.T @ gcols).reshape(cin, k, k, cout).transpose(1, 2, 0, 3)
        return gx, gw, g.sum(axis=(0, 1))

    return _result(np.ascontiguousarray(out), (x, weight, bias), backward)


GEM_CLAMP = 1e-6


def gem_pool(x: Tensor, p: Tensor | float) -> Tensor:
    """Generalised-mean pooling over the rows of an ``N x C`` matrix."""
    p = as_tensor(np.asarray(p, dtype=x.dtype)) if not isinstance(p, Tensor) else p
    pv = float(p.data.reshape(-1)[0])
    if not pv > 0:
        raise ParameterError(f"gem_pool: p must be positive, got {pv}")
    if x.data.ndim != 2:
        raise ShapeError(f"gem_pool: expected N x C input, got {x.shape}")
    n = x.shape[0]
    clamped = x.data < GEM_CLAMP
    xc = np.where(clamped, GEM_CLAMP, x.data)
    xp = xc**pv
    # sum in sorted order so the result does not depend on row order at all
    m = np.sort(xp, axis=0).mean(axis=0)
    out = m ** (1.0 / pv)

    def backward(g):
        gx = g * (m ** (1.0 / pv - 1.0)) * (xp / xc) / n
        gx = np.where(clamped, 0.0, gx)
        dm_dp = (xp * np.log(xc)).mean(axis=0)
        dout_dp = out * (-np.log(m) / pv**2 + dm_dp / (pv * m))
        return gx, np.asarray(np.sum(g * dout_dp)).reshape(p.shape)

    return _result(out, (x, p), backward)


def multi_head_attention(q: Tensor, k: Tensor, v: Tensor, num_heads: int) -> Tensor:
    """Scaled dot-product attention split over ``num_heads`` column groups.

    ``q`` is ``Nq x D``; ``k`` and ``v`` are ``Nk x D``. No projections are
    applied here.
    """
    nq, d = q.shape
    nk = k.shape[0]
    if k.shape != (nk, d) or v.shape != (nk, d):
        raise ShapeError(f"attention: q {q.shape}, k {k.shape}, v {v.shape}")
    if d % num_heads:
        raise ShapeError(f"attention: width {d} not divisible by {num_heads} heads")
    dh = d // num_heads
    sc = 1.0 / np.sqrt(dh)
    qh = q.data.reshape(nq, num_heads, dh).transpose(1, 0, 2)
    kh = k.data.reshape(nk, num_heads, dh).transpose(1, 0, 2)
    vh = v.data.reshape(nk, num_heads, dh).transpose(1, 0, 2)
    logits = (qh @ kh.transpose(0, 2, 1)) * sc
    logits -= logits.max(axis=-1, keepdims=True)
    attn = np.exp(logits)
    attn /= attn.sum(axis=-1, keepdims=True)
    out = (attn @ vh).transpose(1, 0, 2).reshape(nq, d)

    def backward(g):
        gh = g.reshape(nq, num_heads, dh).transpose(1, 0, 2)
        ga = gh @ vh.transpose(0, 2, 1)
        gv = attn.transpose(0, 2, 1) @ gh
        gs = attn * (ga - np.sum(ga * attn, axis=-1, keepdims=True)) * sc
        gq = gs @ kh
        gk = gs.transpose(0, 2, 1) @ qh
        merge = lambda t, n: t.transpose(1, 0, 2).reshape(n, d)  # noqa: E731
        return merge(gq, nq), merge(gk, nk), merge(gv, nk)

    result = _result(out, (q, k, v), backward)
    result.meta["attention"] = attn
    return result
