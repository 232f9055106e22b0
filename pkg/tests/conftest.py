import math

import numpy as np
import pytest

from sar import verify
from sar.model import SAR
from sar.tensor import no_grad


def nested_conv(x, w, b, pad):
    """Direct cross-correlation: x is N x H x W x C, w is kh x kw x Cin x Cout."""
    n, h, wd, c = x.shape
    kh, kw, _, cout = w.shape
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    ho, wo = h + 2 * pad - kh + 1, wd + 2 * pad - kw + 1
    out = np.zeros((n, ho, wo, cout))
    for s in range(n):
        for i in range(ho):
            for j in range(wo):
                for o in range(cout):
                    acc = 0.0
                    for di in range(kh):
                        for dj in range(kw):
                            for ci in range(c):
                                acc += xp[s, i + di, j + dj, ci] * w[di, dj, ci, o]
                    out[s, i, j, o] = acc + (b[o] if b is not None else 0.0)
    return out


def loop_attention(V, h, Wc, bc, Wh, we, valid_w):
    """Score every valid cell from its 3x3 (or 1x1) neighbourhood, zero outside the map."""
    H, W, D = V.shape
    k = Wc.shape[0]
    r = k // 2
    da = we.shape[0]
    q = [sum(h[a] * Wh[a, m] for a in range(len(h))) for m in range(da)]
    scores = {}
    for i in range(H):
        for j in range(valid_w):
            s = 0.0
            for m in range(da):
                acc = bc[m]
                for di in range(-r, r + 1):
                    for dj in range(-r, r + 1):
                        ii, jj = i + di, j + dj
                        if 0 <= ii < H and 0 <= jj < W:
                            for d in range(D):
                                acc += Wc[di + r, dj + r, d, m] * V[ii, jj, d]
                s += we[m] * math.tanh(acc + q[m])
            scores[i, j] = s
    top = max(scores.values())
    z = sum(math.exp(v - top) for v in scores.values())
    alpha = np.zeros((H, W))
    for (i, j), v in scores.items():
        alpha[i, j] = math.exp(v - top) / z
    g = np.array([sum(alpha[i, j] * V[i, j, d] for i in range(H) for j in range(W)) for d in range(D)])
    return g, alpha


def rescore(model, fmap, tokens):
    """Teacher-forced log-probability of ``tokens`` under greedy-style feeding."""
    with no_grad():
        state, ctx = model.start(fmap)
        total, inp = 0.0, model.charset.START
        for t in tokens:
            logits, state, _ = model.step([inp], state, ctx)
            z = logits.data[0].astype(np.float64)
            lp = z - z.max() - math.log(np.exp(z - z.max()).sum())
            total += lp[t]
            inp = t if t < len(model.charset) else model.charset.START
    return total


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def micro_model():
    return SAR(verify.micro_config(), seed=0)
