"""Brute-force reference implementations shared by the test modules."""

import math

import numpy as np
from scipy.special import erf


def mnn_pairs(s):
    """All (i, j) with j the first row maximum of row i and i the first column maximum of column j."""
    s = np.asarray(s)
    m, n = s.shape
    pairs = []
    for i in range(m):
        j = max(range(n), key=lambda c: (s[i, c], -c))
        if max(range(m), key=lambda r: (s[r, j], -r)) == i:
            pairs.append((i, j))
    return pairs


def mnn_mean(a, b):
    pairs = mnn_pairs(a @ b.T)
    return sum(float(a[i] @ b[j]) for i, j in pairs) / len(pairs) if pairs else 0.0


def recall(ranked, queries, refs, threshold, ns):
    """``queries``/``refs``: id -> (x, y); ranked: query id -> ids."""
    out = {}
    for n in ns:
        hits = 0
        for q, (qx, qy) in queries.items():
            if any(math.dist((qx, qy), refs[r]) <= threshold for r in ranked[q][:n]):
                hits += 1
        out[n] = hits / len(queries)
    return out


def frozen_block_reference(block, x):
    """Plain numpy pre-norm transformer block with no adapter."""
    p = {k: v.data for k, v in block._params.items()}

    def ln(z, g, b):
        mu = z.mean(axis=1, keepdims=True)
        var = z.var(axis=1, keepdims=True)
        return (z - mu) / np.sqrt(var + 1e-6) * g + b

    h = ln(x, p["norm1.gain"], p["norm1.bias"])
    q, k, v = (h @ p[f"attn.{n}.weight"] + p[f"attn.{n}.bias"] for n in "qkv")
    heads, d = block.num_heads, x.shape[1]
    dh = d // heads
    out = np.empty_like(q)
    for i in range(heads):
        sl = slice(i * dh, (i + 1) * dh)
        logits = q[:, sl] @ k[:, sl].T / np.sqrt(dh)
        w = np.exp(logits - logits.max(axis=1, keepdims=True))
        w /= w.sum(axis=1, keepdims=True)
        out[:, sl] = w @ v[:, sl]
    x = x + out @ p["attn.proj.weight"] + p["attn.proj.bias"]
    h = ln(x, p["norm2.gain"], p["norm2.bias"])
    a = h @ p["mlp.fc1.weight"] + p["mlp.fc1.bias"]
    a = 0.5 * a * (1 + erf(a / np.sqrt(2)))
    return x + a @ p["mlp.fc2.weight"] + p["mlp.fc2.bias"]


def frozen_backbone_reference(backbone, image):
    """Pixel features of the base network with every adapter removed."""
    x = backbone.patchify(image).data
    for block in backbone.blocks:
        x = frozen_block_reference(block, x)
    g = backbone.config.grid_size
    return x[1:].reshape(g, g, -1)


# "criterion N: PASS|FAIL ..." lines collected by the acceptance tests and
# echoed in the pytest terminal summary
ACCEPTANCE_LINES: list[str] = []
