"""Brute-force reference implementations used as independent test oracles.

Nothing here calls into the package's ranking, loss or metric code.
"""

import math

import numpy as np


def full_sort_topk(q, rows, ids, k):
    """Pure-Python full sort of every (dot, id) pair."""
    scored = [(float(np.dot(np.asarray(q, np.float64), np.asarray(r, np.float64))), i) for r, i in zip(rows, ids)]
    scored.sort(key=lambda e: (-e[0], e[1]))
    return [(i, s) for s, i in scored[:k]]


def filter_oracle(shard, qvecs, dvecs, cutoff):
    """Keep flags by fully sorting every document of the shard per query."""
    ids = [p.doc_id for p in shard]
    mat = np.array([np.asarray(dvecs[d], np.float64) for d in ids])
    keep = []
    for i, p in enumerate(shard):
        sims = mat @ np.asarray(qvecs[p.query_id], np.float64)
        scored = sorted(zip(sims.tolist(), ids), key=lambda e: (-e[0], e[1]))
        own = (sims[i], p.doc_id)
        rank = 1 + scored.index(own)
        keep.append(rank <= cutoff)
    return keep


def infonce_loss(sims, pos, tau):
    """Direct log-softmax in math.fsum arithmetic."""
    total = 0.0
    for row, p in zip(sims, pos):
        z = [s / tau for s in row]
        m = max(z)
        lse = m + math.log(math.fsum(math.exp(v - m) for v in z))
        total += lse - z[p]
    return total / len(sims)


def mrl_loss(q, c, pos, dims, tau):
    total = 0.0
    for d in dims:
        qn = q[:, :d] / np.linalg.norm(q[:, :d], axis=1, keepdims=True)
        cn = c[:, :d] / np.linalg.norm(c[:, :d], axis=1, keepdims=True)
        total += infonce_loss(qn @ cn.T, pos, tau)
    return total


def head_loss(weight, bias, qb, cb, pos, dims, tau):
    q = qb @ weight.T + (0 if bias is None else bias)
    c = cb @ weight.T + (0 if bias is None else bias)
    return mrl_loss(q, c, pos, dims, tau)


def central_diff(f, x, h=1e-5):
    """Central finite differences of scalar f w.r.t. every entry of array x (in place).

    h near the cube root of float64 epsilon balances truncation against rounding.
    """
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        old = x[idx]
        x[idx] = old + h
        up = f()
        x[idx] = old - h
        down = f()
        x[idx] = old
        g[idx] = (up - down) / (2 * h)
    return g


def max_rel_err(a, b):
    a, b = np.asarray(a), np.asarray(b)
    denom = np.maximum(np.abs(a), np.abs(b))
    rel = np.where(denom > 0, np.abs(a - b) / np.where(denom > 0, denom, 1), 0.0)
    return float(rel.max())


def ndcg_oracle(ranked, judged, k):
    dcg = sum(judged.get(d, 0) / math.log2(i + 2) for i, d in enumerate(ranked[:k]))
    ideal = sorted((r for r in judged.values() if r > 0), reverse=True)[:k]
    idcg = sum(r / math.log2(i + 2) for i, r in enumerate(ideal))
    return dcg / idcg


def quantize_oracle(x):
    """Per-component loop: scale = max|x|/127, round-half-even, clamp."""
    x = np.asarray(x, np.float64)
    peak = max(abs(float(v)) for v in x.ravel()) if x.size else 0.0
    scale = peak / 127 if peak > 0 else 1.0
    codes = np.empty(x.shape, dtype=np.int64)
    for idx in np.ndindex(x.shape):
        codes[idx] = max(-127, min(127, round(float(x[idx]) / scale)))
    return codes, scale
