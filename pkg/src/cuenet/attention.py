"""Token-mixing attention mechanisms over flat (n, d) token matrices.

Three interchangeable mechanisms:

* :func:`mhsa` -- conventional multi-head self-attention with softmax over
  pairwise scores.  Cost and intermediate storage grow with n**2.
* :func:`eaa_original` -- additive attention with a matrix query: every token
  row is projected to a query, per-row scores are softmax-normalized, and
  their weighted sum forms a single global query vector.  Linear in n.
* :func:`meaa` -- the modified additive form.  The matrix query is replaced
  by one learnable query vector, so the score collapses to a single scalar
  and the softmax disappears entirely.  Also linear in n, with one fewer
  n-by-d projection and no n-vector of scores.

``meaa`` and ``eaa_original`` exist in two shapes: the pooled form returns
one fused 1-by-d vector (column mean of the transformed rows), and a
``*_rows`` form skips the mean so the mechanism can stand in for a
shape-preserving token mixer inside a block stack.

The pooled forms and :func:`flat_self_attention` announce intermediate
buffer lifetimes to the active memory meter (see :mod:`cuenet.instrument`)
under a fixed step schedule: a step's inputs stay live until its outputs
exist, and a softmax materializes its weights in a fresh buffer.  The
resulting high-water marks, in elements:

* meaa:            2*n*d + 2*d
* eaa_original:    3*n*d + n + d
* self-attention:  max(3*n*d + n*n, n*d + 2*n*n)

Gradients for the modified form are provided analytically in
:func:`meaa_grad` for every parameter group plus both inputs.
"""

import math
from dataclasses import dataclass

import numpy as np

from .errors import ShapeError
from .instrument import meter_alloc, meter_free
from .tensor import (check_tensor, matmul, mean_rows, mul, scale,
                     softmax_rows)


@dataclass
class MhsaParams:
    """Projections for softmax self-attention: query, key, value, fuse."""

    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    fuse: np.ndarray


@dataclass
class AdditiveParams:
    """Parameters for the additive mechanisms.

    ``q`` is the learnable query vector of the modified form and is unused
    (may be None) for the original matrix-query form.  ``w_a`` holds the
    score weights; ``w1, b1, w2, b2`` the two output projections.
    """

    q: np.ndarray
    wq: np.ndarray
    wk: np.ndarray
    w_a: np.ndarray
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray


def _check_tokens(x, name):
    check_tensor(x, rank=2, name=name)
    if x.shape[0] < 1:
        raise ShapeError(f"{name} needs at least one token row, got shape "
                         f"{x.shape}")
    return x


# ---------------------------------------------------------------------------
# modified additive attention (scalar gating)
# ---------------------------------------------------------------------------

def attention_scalar(q_star, w_a):
    """The scalar gate: (q_star . w_a) / sqrt(d), as a float.

    ``q_star`` is the already-projected query row (1, d).  Exposed separately
    so the gate's linearity in ``w_a`` can be probed directly.
    """
    check_tensor(q_star, rank=2, name="projected query")
    d = q_star.shape[1]
    raw = matmul(q_star, w_a.reshape(d, 1))
    scaled = scale(raw, 1.0 / math.sqrt(d))
    return float(scaled[0, 0])


def _scalar_additive(q_normed, tokens, p, threads, pool):
    x = _check_tokens(tokens, "additive attention tokens")
    check_tensor(q_normed, rank=2, name="normalized query")
    n, d = x.shape
    if q_normed.shape != (1, d):
        raise ShapeError(f"query shape {q_normed.shape} vs tokens "
                         f"{x.shape}; expected (1, {d})")
    q_star = matmul(q_normed, p.wq, threads=threads)
    meter_alloc("q_star", d)
    k = matmul(x, p.wk, threads=threads)
    meter_alloc("k", n * d)
    alpha = attention_scalar(q_star, p.w_a)
    meter_alloc("alpha", 1)
    q_gated = scale(q_star, alpha)
    meter_alloc("q_gated", d)
    meter_free("alpha")
    fused = mul(k, q_gated)
    meter_alloc("fused", n * d)
    meter_free("k")
    meter_free("q_gated")
    hidden = matmul(fused, p.w1, threads=threads) + p.b1 + q_star
    meter_alloc("hidden", n * d)
    meter_free("fused")
    meter_free("q_star")
    rows = matmul(hidden, p.w2, threads=threads) + p.b2
    meter_alloc("rows", n * d)
    meter_free("hidden")
    if not pool:
        return rows
    out = mean_rows(rows)
    meter_alloc("out", d)
    meter_free("rows")
    return out


def meaa(q_normed, tokens, p, threads=1):
    """Modified additive attention, pooled to a single (1, d) vector.

    The query is gated by the scalar score, broadcast against the projected
    keys, passed through the two projections with a query residual, and the
    transformed rows are mean-pooled.
    """
    return _scalar_additive(q_normed, tokens, p, threads, pool=True)


def meaa_rows(q_normed, tokens, p, threads=1):
    """Modified additive attention without the final mean: (n, d) rows."""
    return _scalar_additive(q_normed, tokens, p, threads, pool=False)


@dataclass
class AdditiveGrads:
    """Gradients of the pooled modified form, one field per input/parameter."""

    q: np.ndarray
    tokens: np.ndarray
    wq: np.ndarray
    wk: np.ndarray
    w_a: np.ndarray
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray


def meaa_grad(q_normed, tokens, p, upstream):
    """Analytic gradients of ``meaa`` against an upstream (1, d) cotangent.

    Recomputes the forward intermediates, then walks the chain in reverse.
    The mean pool spreads the cotangent uniformly over rows, so the second
    projection bias receives exactly the upstream vector.
    """
    x = _check_tokens(tokens, "additive attention tokens")
    check_tensor(upstream, rank=2, name="upstream cotangent")
    n, d = x.shape
    if upstream.shape != (1, d):
        raise ShapeError(f"upstream shape {upstream.shape}; expected (1, {d})")
    inv_sqrt_d = 1.0 / math.sqrt(d)

    q_star = q_normed @ p.wq
    k = x @ p.wk
    alpha = float((q_star @ p.w_a.reshape(d, 1))[0, 0]) * inv_sqrt_d
    q_gated = q_star * q_star.dtype.type(alpha)
    fused = k * q_gated
    hidden = fused @ p.w1 + p.b1 + q_star

    g_rows = np.repeat(upstream / upstream.dtype.type(n), n, axis=0)
    g_b2 = upstream[0].copy()
    g_w2 = hidden.T @ g_rows
    g_hidden = g_rows @ p.w2.T
    g_b1 = g_hidden.sum(axis=0)
    g_qs = g_hidden.sum(axis=0, keepdims=True)
    g_fused = g_hidden @ p.w1.T
    g_w1 = fused.T @ g_hidden
    g_k = g_fused * q_gated
    g_q_gated = (g_fused * k).sum(axis=0, keepdims=True)
    g_alpha = float((g_q_gated * q_star).sum())
    g_qs = g_qs + q_star.dtype.type(alpha) * g_q_gated \
        + q_star.dtype.type(g_alpha * inv_sqrt_d) * p.w_a[None, :]
    g_w_a = (g_alpha * inv_sqrt_d) * q_star[0]
    g_wk = x.T @ g_k
    g_tokens = g_k @ p.wk.T
    g_wq = q_normed.T @ g_qs
    g_q = g_qs @ p.wq.T
    return AdditiveGrads(q=g_q, tokens=g_tokens, wq=g_wq, wk=g_wk,
                         w_a=g_w_a.astype(x.dtype, copy=False), w1=g_w1,
                         b1=g_b1, w2=g_w2, b2=g_b2)


# ---------------------------------------------------------------------------
# original additive attention (matrix query)
# ---------------------------------------------------------------------------

def _matrix_additive(tokens, p, threads, pool):
    x = _check_tokens(tokens, "additive attention tokens")
    n, d = x.shape
    q = matmul(x, p.wq, threads=threads)
    meter_alloc("q", n * d)
    k = matmul(x, p.wk, threads=threads)
    meter_alloc("k", n * d)
    raw = matmul(q, p.w_a.reshape(d, 1))
    scaled = scale(raw, 1.0 / math.sqrt(d))
    meter_alloc("scores", n)
    weights = softmax_rows(scaled.reshape(1, n))
    meter_alloc("weights", n)
    meter_free("scores")
    q_global = matmul(weights, q, threads=threads)
    fused = mul(k, q_global)
    meter_alloc("q_global", d)
    meter_alloc("fused", n * d)
    meter_free("weights")
    meter_free("k")
    meter_free("q_global")
    hidden = matmul(fused, p.w1, threads=threads) + p.b1 + q
    meter_alloc("hidden", n * d)
    meter_free("fused")
    meter_free("q")
    rows = matmul(hidden, p.w2, threads=threads) + p.b2
    meter_alloc("rows", n * d)
    meter_free("hidden")
    if not pool:
        return rows
    out = mean_rows(rows)
    meter_alloc("out", d)
    meter_free("rows")
    return out


def eaa_original(tokens, p, threads=1):
    """Original additive attention, pooled to a single (1, d) vector.

    Every token projects to a query row; softmax-normalized per-row scores
    weight the rows into one global query, which gates the keys.  The two
    projections carry a per-row query residual before the mean pool.
    """
    return _matrix_additive(tokens, p, threads, pool=True)


def eaa_rows(tokens, p, threads=1):
    """Original additive attention without the final mean: (n, d) rows."""
    return _matrix_additive(tokens, p, threads, pool=False)


# ---------------------------------------------------------------------------
# softmax self-attention
# ---------------------------------------------------------------------------

def mhsa(tokens, p, heads, threads=1):
    """Multi-head softmax self-attention over (n, d) tokens, fused output."""
    x = _check_tokens(tokens, "self-attention tokens")
    n, d = x.shape
    if heads < 1 or d % heads != 0:
        raise ShapeError(f"head count {heads} must divide width {d}")
    dh = d // heads
    q = matmul(x, p.wq, threads=threads)
    k = matmul(x, p.wk, threads=threads)
    v = matmul(x, p.wv, threads=threads)
    q = scale(q, 1.0 / math.sqrt(dh))
    ctx = np.empty_like(x)
    for h in range(heads):
        lo, hi = h * dh, (h + 1) * dh
        scores = matmul(q[:, lo:hi], k[:, lo:hi].T, threads=threads)
        weights = softmax_rows(scores)
        ctx[:, lo:hi] = matmul(weights, v[:, lo:hi], threads=threads)
    return matmul(ctx, p.fuse, threads=threads)


def pooled_mhsa(tokens, p, heads, threads=1):
    """Self-attention followed by a mean pool to (1, d)."""
    return mean_rows(mhsa(tokens, p, heads, threads=threads))


def flat_self_attention(tokens, wq, wk, wv, threads=1):
    """Single-head softmax attention kernel used for measurement.

    No output fuse; this is the minimal quadratic-cost baseline whose
    intermediate schedule the memory meter observes.
    """
    x = _check_tokens(tokens, "self-attention tokens")
    n, d = x.shape
    q = matmul(x, wq, threads=threads)
    meter_alloc("q", n * d)
    k = matmul(x, wk, threads=threads)
    meter_alloc("k", n * d)
    v = matmul(x, wv, threads=threads)
    meter_alloc("v", n * d)
    q = scale(q, 1.0 / math.sqrt(d))
    scores = matmul(q, k.T, threads=threads)
    meter_alloc("scores", n * n)
    meter_free("q")
    meter_free("k")
    weights = softmax_rows(scores)
    meter_alloc("weights", n * n)
    meter_free("scores")
    out = matmul(weights, v, threads=threads)
    meter_alloc("ctx", n * d)
    meter_free("weights")
    meter_free("v")
    return out
