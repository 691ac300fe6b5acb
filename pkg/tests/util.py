"""Shared test helpers: error metrics and independent loop oracles.

The oracles deliberately avoid the package's vectorized kernels: plain
Python loops over list-of-lists data, so an agreement check exercises two
genuinely different computation routes.
"""

import math

import numpy as np


def rel_err(a, b):
    """Max-norm relative error: max|a-b| / max(max|b|, 1)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    assert a.shape == b.shape, f"shape mismatch {a.shape} vs {b.shape}"
    if a.size == 0:
        return 0.0
    denom = max(float(np.max(np.abs(b))), 1.0)
    return float(np.max(np.abs(a - b))) / denom


def assert_close(a, b, rel=1e-12):
    err = rel_err(a, b)
    assert err <= rel, f"max-norm relative error {err:.3e} exceeds {rel:g}"


def matmul_oracle(a, b):
    """Triple-loop matrix product over Python lists."""
    a = np.asarray(a).tolist()
    b = np.asarray(b).tolist()
    m, k = len(a), len(a[0])
    n = len(b[0])
    out = [[0.0] * n for _ in range(m)]
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for t in range(k):
                acc += a[i][t] * b[t][j]
            out[i][j] = acc
    return np.array(out)


def conv3d_oracle(x, kernel, stride, padding=(0, 0, 0)):
    """Seven-deep loop cross-correlation."""
    x = np.asarray(x)
    kernel = np.asarray(kernel)
    pt, ph, pw = padding
    xp = np.pad(x, ((pt, pt), (ph, ph), (pw, pw), (0, 0))).tolist()
    kt, kh, kw, cin, cout = kernel.shape
    klist = kernel.tolist()
    st, sh, sw = stride
    t_out = (len(xp) - kt) // st + 1
    h_out = (len(xp[0]) - kh) // sh + 1
    w_out = (len(xp[0][0]) - kw) // sw + 1
    out = np.zeros((t_out, h_out, w_out, cout))
    for t in range(t_out):
        for i in range(h_out):
            for j in range(w_out):
                for o in range(cout):
                    acc = 0.0
                    for dt in range(kt):
                        for di in range(kh):
                            for dj in range(kw):
                                row = xp[t * st + dt][i * sh + di][j * sw + dj]
                                kk = klist[dt][di][dj]
                                for c in range(cin):
                                    acc += row[c] * kk[c][o]
                    out[t, i, j, o] = acc
    return out


def dwconv3d_oracle(x, kernel):
    """Per-channel loop depthwise convolution, shape preserved."""
    x = np.asarray(x)
    kernel = np.asarray(kernel)
    kt, kh, kw, d = kernel.shape
    xp = np.pad(x, ((kt // 2, kt // 2), (kh // 2, kh // 2),
                    (kw // 2, kw // 2), (0, 0))).tolist()
    klist = kernel.tolist()
    t_in, h_in, w_in, _ = x.shape
    out = np.zeros_like(x, dtype=np.float64)
    for t in range(t_in):
        for i in range(h_in):
            for j in range(w_in):
                for c in range(d):
                    acc = 0.0
                    for dt in range(kt):
                        for di in range(kh):
                            for dj in range(kw):
                                acc += xp[t + dt][i + di][j + dj][c] \
                                    * klist[dt][di][dj][c]
                    out[t, i, j, c] = acc
    return out


def meaa_oracle(q_normed, tokens, p, pooled=True):
    """Verbatim loop transcription of the modified additive mechanism.

    Scalar score from the projected learnable query, gate, broadcast
    against the projected keys, two projections with a query residual,
    optional row mean.
    """
    q = np.asarray(q_normed).tolist()[0]
    x = np.asarray(tokens).tolist()
    wq = np.asarray(p.wq).tolist()
    wk = np.asarray(p.wk).tolist()
    w_a = np.asarray(p.w_a).tolist()
    w1 = np.asarray(p.w1).tolist()
    b1 = np.asarray(p.b1).tolist()
    w2 = np.asarray(p.w2).tolist()
    b2 = np.asarray(p.b2).tolist()
    n, d = len(x), len(q)

    q_star = [sum(q[t] * wq[t][j] for t in range(d)) for j in range(d)]
    keys = [[sum(x[i][t] * wk[t][j] for t in range(d)) for j in range(d)]
            for i in range(n)]
    alpha = sum(q_star[j] * w_a[j] for j in range(d)) / math.sqrt(d)
    q_gated = [alpha * q_star[j] for j in range(d)]
    rows = []
    for i in range(n):
        fused = [q_gated[j] * keys[i][j] for j in range(d)]
        hidden = [sum(fused[t] * w1[t][j] for t in range(d)) + b1[j]
                  + q_star[j] for j in range(d)]
        row = [sum(hidden[t] * w2[t][j] for t in range(d)) + b2[j]
               for j in range(d)]
        rows.append(row)
    if not pooled:
        return np.array(rows)
    return np.array([[sum(rows[i][j] for i in range(n)) / n
                      for j in range(d)]])


def eaa_oracle(tokens, p, pooled=True, force_uniform_weights=False):
    """Verbatim loop transcription of the matrix-query additive mechanism.

    ``force_uniform_weights`` replaces the softmax result with exact
    uniform weights (useful for the single-token degeneracy check, where
    softmax of one score is exactly 1).
    """
    x = np.asarray(tokens).tolist()
    wq = np.asarray(p.wq).tolist()
    wk = np.asarray(p.wk).tolist()
    w_a = np.asarray(p.w_a).tolist()
    w1 = np.asarray(p.w1).tolist()
    b1 = np.asarray(p.b1).tolist()
    w2 = np.asarray(p.w2).tolist()
    b2 = np.asarray(p.b2).tolist()
    n = len(x)
    d = len(x[0])

    queries = [[sum(x[i][t] * wq[t][j] for t in range(d)) for j in range(d)]
               for i in range(n)]
    keys = [[sum(x[i][t] * wk[t][j] for t in range(d)) for j in range(d)]
            for i in range(n)]
    scores = [sum(queries[i][j] * w_a[j] for j in range(d)) / math.sqrt(d)
              for i in range(n)]
    if force_uniform_weights:
        weights = [1.0 / n] * n
    else:
        peak = max(scores)
        exps = [math.exp(s - peak) for s in scores]
        total = sum(exps)
        weights = [e / total for e in exps]
    q_global = [sum(weights[i] * queries[i][j] for i in range(n))
                for j in range(d)]
    rows = []
    for i in range(n):
        fused = [q_global[j] * keys[i][j] for j in range(d)]
        hidden = [sum(fused[t] * w1[t][j] for t in range(d)) + b1[j]
                  + queries[i][j] for j in range(d)]
        row = [sum(hidden[t] * w2[t][j] for t in range(d)) + b2[j]
               for j in range(d)]
        rows.append(row)
    if not pooled:
        return np.array(rows)
    return np.array([[sum(rows[i][j] for i in range(n)) / n
                      for j in range(d)]])


def mhsa_oracle(tokens, p, heads):
    """Loop reference for multi-head softmax self-attention."""
    x = np.asarray(tokens)
    n, d = x.shape
    dh = d // heads
    q = matmul_oracle(x, p.wq) / math.sqrt(dh)
    k = matmul_oracle(x, p.wk)
    v = matmul_oracle(x, p.wv)
    ctx = np.zeros((n, d))
    for h in range(heads):
        lo, hi = h * dh, (h + 1) * dh
        scores = matmul_oracle(q[:, lo:hi], k[:, lo:hi].T)
        for i in range(n):
            row = scores[i]
            peak = row.max()
            e = np.exp(row - peak)
            w = e / e.sum()
            ctx[i, lo:hi] = matmul_oracle(w[None, :], v[:, lo:hi])[0]
    return matmul_oracle(ctx, p.fuse)


def random_additive_params(rng, d, with_q, dtype=np.float64):
    """Seeded additive-attention parameters at unit scale."""
    from cuenet.attention import AdditiveParams
    draw = lambda shape: rng.standard_normal(shape).astype(dtype)
    return AdditiveParams(
        q=draw((1, d)) if with_q else None, wq=draw((d, d)),
        wk=draw((d, d)), w_a=draw((d,)), w1=draw((d, d)), b1=draw((d,)),
        w2=draw((d, d)), b2=draw((d,)))


def random_mhsa_params(rng, d, dtype=np.float64):
    from cuenet.attention import MhsaParams
    draw = lambda shape: rng.standard_normal(shape).astype(dtype)
    return MhsaParams(wq=draw((d, d)), wk=draw((d, d)), wv=draw((d, d)),
                      fuse=draw((d, d)))
