"""Compiled numerical kernels for the hot paths (attention, depthwise conv,
batch norm, row softmax).

All kernels are float64 and deterministic: parallel loops only ever partition
work so that each output element is written by exactly one thread, and no
reduction crosses a thread boundary.  The fastmath flags below permit
vectorization (reassociation/FMA) but preserve NaN/Inf semantics; since they
are compile-time transforms, results are bit-identical from run to run.
"""

import math

import numpy as np
from numba import config as _numba_config
from numba import njit, prange

_numba_config.THREADING_LAYER = "omp"

_FM = {"reassoc", "contract", "nsz", "arcp"}

_LOG2E = 1.4426950408889634
_LN2_HI = 6.93145751953125e-1
_LN2_LO = 1.42860682030941723212e-6


@njit(fastmath=_FM, cache=True, inline="always")
def _exp_poly(r):
    # Taylor tail of exp on |r| <= log(2)/2; max error ~1 ulp.
    p = 7.647163731819816e-13
    p = p * r + 1.0713995927425127e-11
    p = p * r + 1.4385536977116853e-10
    p = p * r + 1.7619706891135232e-09
    p = p * r + 1.981252925279077e-08
    p = p * r + 2.505210838544172e-07
    p = p * r + 2.755731922398589e-06
    p = p * r + 2.48015873015873e-05
    p = p * r + 0.0001984126984126984
    p = p * r + 0.001388888888888889
    p = p * r + 0.008333333333333333
    p = p * r + 0.041666666666666664
    p = p * r + 0.16666666666666666
    p = p * r + 0.5
    p = p * r + 1.0
    p = p * r + 1.0
    return p


@njit(fastmath=_FM, cache=True, inline="always")
def _softmax_row(row, n, ibuf, pbuf):
    """In-place softmax of row[:n] with max subtraction.  Returns nothing.

    ibuf (int64) and pbuf (float64) are scratch of length >= n.
    """
    m = row[0]
    for j in range(1, n):
        if row[j] > m:
            m = row[j]
    for j in range(n):
        x = row[j] - m
        x = max(x, -708.0)
        kf = np.rint(x * _LOG2E)
        r = (x - kf * _LN2_HI) - kf * _LN2_LO
        pbuf[j] = _exp_poly(r)
        ibuf[j] = (np.int64(np.int32(kf)) + 1023) << 52
    sc = ibuf.view(np.float64)
    tot = 0.0
    for j in range(n):
        e = pbuf[j] * sc[j]
        row[j] = e
        tot += e
    inv = 1.0 / tot
    for j in range(n):
        row[j] *= inv


@njit(parallel=True, fastmath=_FM, cache=True)
def softmax_rows(x, out):
    """Row softmax of a 2-d array."""
    rows, n = x.shape
    for i in prange(rows):
        ibuf = np.empty(n, dtype=np.int64)
        pbuf = np.empty(n)
        row = np.empty(n)
        for j in range(n):
            row[j] = x[i, j]
        _softmax_row(row, n, ibuf, pbuf)
        for j in range(n):
            out[i, j] = row[j]


@njit(parallel=True, fastmath=_FM, cache=True)
def attn_fwd(q, k, v, scale, out, probs):
    """Scaled dot-product attention, one (batch*head) group per block.

    q, k: (G, A, Dk); v: (G, A, Dv); out: (G, A, Dv); probs: (G, A, A).
    probs receives softmax(q k^T * scale) for reuse in the backward pass.
    """
    g_count, a, dk = q.shape
    dv = v.shape[2]
    for g in prange(g_count):
        kt = np.empty((dk, a))
        vt = np.empty((dv, a))
        for j in range(a):
            for c in range(dk):
                kt[c, j] = k[g, j, c] * scale
            for c in range(dv):
                vt[c, j] = v[g, j, c]
        row = np.empty(a)
        ibuf = np.empty(a, dtype=np.int64)
        pbuf = np.empty(a)
        for i in range(a):
            q0 = q[g, i, 0]
            for j in range(a):
                row[j] = q0 * kt[0, j]
            for c in range(1, dk):
                qc = q[g, i, c]
                for j in range(a):
                    row[j] += qc * kt[c, j]
            _softmax_row(row, a, ibuf, pbuf)
            for j in range(a):
                probs[g, i, j] = row[j]
            for c in range(dv):
                acc = 0.0
                for j in range(a):
                    acc += row[j] * vt[c, j]
                out[g, i, c] = acc


@njit(parallel=True, fastmath=_FM, cache=True)
def attn_fwd_nograd(q, k, v, scale, out):
    """Attention forward without retaining the probability matrix."""
    g_count, a, dk = q.shape
    dv = v.shape[2]
    for g in prange(g_count):
        kt = np.empty((dk, a))
        vt = np.empty((dv, a))
        for j in range(a):
            for c in range(dk):
                kt[c, j] = k[g, j, c] * scale
            for c in range(dv):
                vt[c, j] = v[g, j, c]
        row = np.empty(a)
        ibuf = np.empty(a, dtype=np.int64)
        pbuf = np.empty(a)
        for i in range(a):
            q0 = q[g, i, 0]
            for j in range(a):
                row[j] = q0 * kt[0, j]
            for c in range(1, dk):
                qc = q[g, i, c]
                for j in range(a):
                    row[j] += qc * kt[c, j]
            _softmax_row(row, a, ibuf, pbuf)
            for c in range(dv):
                acc = 0.0
                for j in range(a):
                    acc += row[j] * vt[c, j]
                out[g, i, c] = acc


@njit(parallel=True, fastmath=_FM, cache=True)
def attn_bwd(q, k, v, scale, probs, dout, dq, dk_out, dv_out):
    """Backward of attn_fwd.  Writes dq, dk_out, dv_out in full."""
    g_count, a, dk = q.shape
    dv = v.shape[2]
    for g in prange(g_count):
        vt = np.empty((dv, a))
        ktr = np.empty((dk, a))
        dkt = np.zeros((dk, a))
        dvt = np.zeros((dv, a))
        for j in range(a):
            for c in range(dv):
                vt[c, j] = v[g, j, c]
            for c in range(dk):
                ktr[c, j] = k[g, j, c]
        dp = np.empty(a)
        dl = np.empty(a)
        for i in range(a):
            d0 = dout[g, i, 0]
            for j in range(a):
                dp[j] = d0 * vt[0, j]
            for c in range(1, dv):
                dc = dout[g, i, c]
                for j in range(a):
                    dp[j] += dc * vt[c, j]
            alpha = 0.0
            for j in range(a):
                alpha += dp[j] * probs[g, i, j]
            for j in range(a):
                dl[j] = probs[g, i, j] * (dp[j] - alpha) * scale
            for c in range(dk):
                acc = 0.0
                for j in range(a):
                    acc += dl[j] * ktr[c, j]
                dq[g, i, c] = acc
                qc = q[g, i, c]
                dkc = dkt[c]
                for j in range(a):
                    dkc[j] += dl[j] * qc
            for c in range(dv):
                dc = dout[g, i, c]
                dvc = dvt[c]
                for j in range(a):
                    dvc[j] += probs[g, i, j] * dc
        for j in range(a):
            for c in range(dk):
                dk_out[g, j, c] = dkt[c, j]
            for c in range(dv):
                dv_out[g, j, c] = dvt[c, j]


@njit(parallel=True, fastmath=_FM, cache=True)
def dwconv_fwd(xp, w, stride, out):
    """Depthwise convolution on a pre-padded input.

    xp: (B, C, Hp, Wp); w: (C, F, F); out: (B, C, Ho, Wo).
    """
    b_count, c_count, _, _ = xp.shape
    f = w.shape[1]
    ho, wo = out.shape[2], out.shape[3]
    for bc in prange(b_count * c_count):
        b = bc // c_count
        c = bc % c_count
        for y in range(ho):
            ys = y * stride
            for x in range(wo):
                xs = x * stride
                acc = 0.0
                for i in range(f):
                    for j in range(f):
                        acc += w[c, i, j] * xp[b, c, ys + i, xs + j]
                out[b, c, y, x] = acc


@njit(parallel=True, fastmath=_FM, cache=True)
def dwconv_bwd_input(w, dout, stride, dxp):
    """Accumulates gradients into a zero-initialized padded-input buffer."""
    b_count, c_count, ho, wo = dout.shape
    f = w.shape[1]
    for bc in prange(b_count * c_count):
        b = bc // c_count
        c = bc % c_count
        for y in range(ho):
            ys = y * stride
            for x in range(wo):
                g = dout[b, c, y, x]
                xs = x * stride
                for i in range(f):
                    for j in range(f):
                        dxp[b, c, ys + i, xs + j] += w[c, i, j] * g


@njit(parallel=True, fastmath=_FM, cache=True)
def dwconv_bwd_weight(xp, dout, stride, dw):
    """Depthwise kernel gradient; dw: (C, F, F), zero-initialized."""
    b_count, c_count, ho, wo = dout.shape
    f = dw.shape[1]
    for c in prange(c_count):
        for b in range(b_count):
            for i in range(f):
                for j in range(f):
                    acc = 0.0
                    for y in range(ho):
                        ys = y * stride + i
                        for x in range(wo):
                            acc += dout[b, c, y, x] * xp[b, c, ys, x * stride + j]
                    dw[c, i, j] += acc


@njit(parallel=True, fastmath=_FM, cache=True)
def bn_stats(x):
    """Per-channel mean and biased variance over (B, H, W); x: (B, C, H, W)."""
    b_count, c_count, h, w = x.shape
    n = b_count * h * w
    mean = np.empty(c_count)
    var = np.empty(c_count)
    for c in prange(c_count):
        s = 0.0
        for b in range(b_count):
            for y in range(h):
                for xx in range(w):
                    s += x[b, c, y, xx]
        m = s / n
        sq = 0.0
        for b in range(b_count):
            for y in range(h):
                for xx in range(w):
                    d = x[b, c, y, xx] - m
                    sq += d * d
        mean[c] = m
        var[c] = sq / n
    return mean, var


@njit(parallel=True, fastmath=_FM, cache=True)
def affine_channels(x, a, b, out):
    """out = x * a[c] + b[c] with per-channel coefficients; x: (B, C, H, W)."""
    b_count, c_count, h, w = x.shape
    for bc in prange(b_count * c_count):
        bb = bc // c_count
        c = bc % c_count
        ac = a[c]
        bc_ = b[c]
        for y in range(h):
            for xx in range(w):
                out[bb, c, y, xx] = x[bb, c, y, xx] * ac + bc_


@njit(parallel=True, fastmath=_FM, cache=True)
def bn_bwd(x, dy, mean, inv_std, gamma):
    """Batch-norm backward (training mode, batch statistics).

    Returns (dx, dgamma, dbeta).
    """
    b_count, c_count, h, w = x.shape
    n = b_count * h * w
    dx = np.empty_like(x)
    dgamma = np.empty(c_count)
    dbeta = np.empty(c_count)
    for c in prange(c_count):
        m = mean[c]
        inv = inv_std[c]
        s_dy = 0.0
        s_dyx = 0.0
        for b in range(b_count):
            for y in range(h):
                for xx in range(w):
                    g = dy[b, c, y, xx]
                    s_dy += g
                    s_dyx += g * (x[b, c, y, xx] - m) * inv
        dgamma[c] = s_dyx
        dbeta[c] = s_dy
        k1 = s_dy / n
        k2 = s_dyx / n
        ginv = gamma[c] * inv
        for b in range(b_count):
            for y in range(h):
                for xx in range(w):
                    xh = (x[b, c, y, xx] - m) * inv
                    dx[b, c, y, xx] = ginv * (dy[b, c, y, xx] - k1 - xh * k2)
    return dx, dgamma, dbeta


@njit(parallel=True, fastmath=_FM, cache=True)
def ln_fwd(x, gamma, beta, eps, out, mean, inv_std):
    """Row layer norm: x (R, D); saves per-row mean and 1/std for backward."""
    r_count, d = x.shape
    for r in prange(r_count):
        s = 0.0
        for j in range(d):
            s += x[r, j]
        m = s / d
        sq = 0.0
        for j in range(d):
            dv = x[r, j] - m
            sq += dv * dv
        inv = 1.0 / np.sqrt(sq / d + eps)
        mean[r] = m
        inv_std[r] = inv
        for j in range(d):
            out[r, j] = (x[r, j] - m) * inv * gamma[j] + beta[j]


@njit(parallel=True, fastmath=_FM, cache=True)
def ln_bwd(x, dy, gamma, mean, inv_std, dx, dgamma, dbeta):
    """Backward of ln_fwd; dgamma/dbeta accumulated single-threaded so the
    reduction order over rows is fixed."""
    r_count, d = x.shape
    for r in prange(r_count):
        m = mean[r]
        inv = inv_std[r]
        s1 = 0.0
        s2 = 0.0
        for j in range(d):
            t = dy[r, j] * gamma[j]
            xh = (x[r, j] - m) * inv
            s1 += t
            s2 += t * xh
        s1 /= d
        s2 /= d
        for j in range(d):
            t = dy[r, j] * gamma[j]
            xh = (x[r, j] - m) * inv
            dx[r, j] = inv * (t - s1 - xh * s2)
    for j in range(d):
        dgamma[j] = 0.0
        dbeta[j] = 0.0
    for r in range(r_count):
        m = mean[r]
        inv = inv_std[r]
        for j in range(d):
            xh = (x[r, j] - m) * inv
            dgamma[j] += dy[r, j] * xh
            dbeta[j] += dy[r, j]


@njit(parallel=True, fastmath=_FM, cache=True)
def pack_heads(x, heads, out):
    """(B, A, heads*dk) -> (B*heads, A, dk) head-major regrouping."""
    b_count, a, c = x.shape
    dk = c // heads
    for g in prange(b_count * heads):
        b = g // heads
        h = g % heads
        base = h * dk
        for i in range(a):
            for j in range(dk):
                out[g, i, j] = x[b, i, base + j]


@njit(parallel=True, fastmath=_FM, cache=True)
def unpack_heads(x, heads, out):
    """(B*heads, A, dk) -> (B, A, heads*dk); exact inverse of pack_heads."""
    bh, a, dk = x.shape
    b_count = bh // heads
    for b in prange(b_count):
        for h in range(heads):
            base = h * dk
            g = b * heads + h
            for i in range(a):
                for j in range(dk):
                    out[b, i, base + j] = x[g, i, j]
