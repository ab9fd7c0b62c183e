"""Hot loops for operational layers (numba, serial, cache-compiled).

Everything here operates on one sample at a time in double precision and is
deliberately serial: batch-level work happens above these kernels in a fixed
reduction order, so results are bit-identical run to run.

Layout notes
------------
For one output neuron k with shift (alpha_k, beta_k) = (ia+fa, ib+fb) the
kernels build, one input channel at a time, a padded stack ``pwc[q, pp, rr]``
holding the (q+1)-th Hadamard power of the bilinearly shifted channel, where
pp/rr run over the conv frame (H+2) x (W+2).  The one-pixel halo ring is
structurally zero — the layer semantics are shift -> power -> zero-padded
same correlation — so the halo carries no gradient.

The bilinear blend itself is evaluated against ``xpad``, a copy of the input
with W+1 columns of zeros on the left, at least W+1 on the right, and one
all-zero "parking" row at the bottom.  Out-of-range column taps then land in
the zero margins and out-of-range row taps are redirected to the parking
row, which makes every inner loop branch-free with a trip count fixed at W —
the shape the vectorizer compiles best.  The integer part of each shift is
folded into the source offsets, so there are no indexed gathers anywhere.

Scratch buffers live in a small module-level workspace cache keyed by the
layer geometry: their zero margins are an invariant the kernels never
violate, so they are allocated (and zeroed) once and reused across calls.
Not thread-safe; the package runs these kernels from one thread only.

Row strides are padded so that source and destination rows never coincide
modulo a cache line: with equal strides the repeated load/FMA/store walk
suffers 4K-aliasing stalls that cost more than the arithmetic itself
(measured ~40% throughput loss on 28x28 planes).
"""

from __future__ import annotations

import numpy as np
from numba import njit

_JIT = dict(cache=True, nogil=True, fastmath=True)


def _padrow(width: int, base: int) -> int:
    """Row allocation width for a logical row of `width` given dst rows of
    `base`: 8-aligned and at least 4 doubles away from the dst stride."""
    row = -(-width // 8) * 8
    if row - base < 4:
        row += 8
    return row


def _xpad_width(W: int) -> int:
    # data at [W+1, 2W+1); reads reach 3W+1, so 3W+2 columns padded to 8
    return -(-(3 * W + 3) // 8) * 8


_WS_CAP = 8
_ws_cache: dict = {}


def _workspace(Cin: int, Q: int, H: int, W: int) -> dict:
    """Reusable zero-margin scratch for one layer geometry."""
    key = (Cin, Q, H, W)
    ws = _ws_cache.get(key)
    if ws is None:
        XW = _xpad_width(W)
        ws = {
            "xpad": np.zeros((Cin, H + 1, XW)),
            "pwc": np.zeros((Q, H + 2, _padrow(W + 2, W))),
            "dpw": np.zeros((Q, H, _padrow(W, W))),
            "G": np.zeros((H + 4, _padrow(W + 4, W))),
            "du": np.zeros((H, -(-(W + 2) // 8) * 8)),
            "dxp": np.zeros((Cin, H + 1, XW)),
        }
        if len(_ws_cache) >= _WS_CAP:
            _ws_cache.pop(next(iter(_ws_cache)))
        _ws_cache[key] = ws
    return ws


def _fill_xpad(x: np.ndarray, xpad: np.ndarray, H: int, W: int) -> None:
    xpad[:, :H, W + 1 : 2 * W + 1] = x


@njit(**_JIT)
def _build_pw_c(xpc, ia, ib, fa, fb, Q, H, W, pwc):
    """Fill pwc[q, 1:H+1, 1:W+1] with shifted-power planes for one channel.

    xpc: one channel of xpad, (H+1, >=3W+2) with zero margins and a zero
    parking row at index H; pwc: (Q, H+2, >=W+2) with halo/pad already zero.
    The interior is fully overwritten and the halo never touched, so the
    buffers can be reused across neurons.
    """
    w0 = 1.0 - fa
    w1 = fa
    g0 = 1.0 - fb
    g1 = fb
    off = W + 1
    # offsets beyond the data overlap land entirely in the zero margins
    base = min(max(ib, -off), W) + off
    u = pwc[0]
    for pp in range(1, H + 1):
        srow = pp - 1 + ia
        r0 = srow if 0 <= srow < H else H
        r1 = srow + 1 if 0 <= srow + 1 < H else H
        x0 = xpc[r0]
        x1 = xpc[r1]
        urow = u[pp]
        for o in range(W):
            t0 = w0 * x0[o + base] + w1 * x1[o + base]
            t1 = w0 * x0[o + base + 1] + w1 * x1[o + base + 1]
            urow[o + 1] = g0 * t0 + g1 * t1
    # Hadamard powers: contiguous full-plane passes (zero margins survive)
    n = u.size
    uf = u.ravel()
    prev = uf
    for q in range(1, Q):
        rowq = pwc[q].ravel()
        for i in range(n):
            rowq[i] = prev[i] * uf[i]
        prev = rowq
    return


@njit(**_JIT)
def _conv9_add(plane, w9, acc):
    """acc[p, r] += sum_{i,j} w9[i, j] * plane[p+i, r+j] (3x3 taps)."""
    H, W = acc.shape
    w00 = w9[0, 0]; w01 = w9[0, 1]; w02 = w9[0, 2]
    w10 = w9[1, 0]; w11 = w9[1, 1]; w12 = w9[1, 2]
    w20 = w9[2, 0]; w21 = w9[2, 1]; w22 = w9[2, 2]
    for p in range(H):
        s0 = plane[p]
        s1 = plane[p + 1]
        s2 = plane[p + 2]
        dst = acc[p]
        for r in range(W):
            dst[r] += (w00 * s0[r] + w01 * s0[r + 1] + w02 * s0[r + 2]
                       + w10 * s1[r] + w11 * s1[r + 1] + w12 * s1[r + 2]
                       + w20 * s2[r] + w21 * s2[r + 1] + w22 * s2[r + 2])
    return


@njit(**_JIT)
def _corr9_into(plane, gz, out9):
    """out9[i, j] += sum_{p,r} gz[p, r] * plane[p+i, r+j]."""
    H, W = gz.shape
    d00 = 0.0; d01 = 0.0; d02 = 0.0
    d10 = 0.0; d11 = 0.0; d12 = 0.0
    d20 = 0.0; d21 = 0.0; d22 = 0.0
    for p in range(H):
        g = gz[p]
        s0 = plane[p]
        s1 = plane[p + 1]
        s2 = plane[p + 2]
        for r in range(W):
            gv = g[r]
            d00 += gv * s0[r]; d01 += gv * s0[r + 1]; d02 += gv * s0[r + 2]
            d10 += gv * s1[r]; d11 += gv * s1[r + 1]; d12 += gv * s1[r + 2]
            d20 += gv * s2[r]; d21 += gv * s2[r + 1]; d22 += gv * s2[r + 2]
    out9[0, 0] += d00; out9[0, 1] += d01; out9[0, 2] += d02
    out9[1, 0] += d10; out9[1, 1] += d11; out9[1, 2] += d12
    out9[2, 0] += d20; out9[2, 1] += d21; out9[2, 2] += d22
    return


@njit(**_JIT)
def _op_forward_jit(xpad, W_, b, shifts, H, W, pwc, z):
    Cout, Cin, Q = W_.shape[0], W_.shape[1], W_.shape[2]
    for k in range(Cout):
        ia = int(np.floor(shifts[k, 0]))
        ib = int(np.floor(shifts[k, 1]))
        fa = shifts[k, 0] - ia
        fb = shifts[k, 1] - ib
        acc = z[k]
        for c in range(Cin):
            _build_pw_c(xpad[c], ia, ib, fa, fb, Q, H, W, pwc)
            for q in range(Q):
                _conv9_add(pwc[q], W_[k, c, q], acc)
        bsum = 0.0
        for q in range(Q):
            bsum += b[k, q]
        for p in range(H):
            for r in range(W):
                acc[p, r] += bsum
    return


def op_forward(x, W, b, shifts):
    """Pre-activation forward of one operational layer on one sample.

    x: (Cin, H, W); W: (Cout, Cin, Q, 3, 3); b: (Cout, Q);
    shifts: (Cout, 2).  Returns z: (Cout, H, W).
    """
    Cout, Cin, Q = W.shape[0], W.shape[1], W.shape[2]
    H, Wd = x.shape[1], x.shape[2]
    ws = _workspace(Cin, Q, H, Wd)
    _fill_xpad(x, ws["xpad"], H, Wd)
    z = np.zeros((Cout, H, Wd))
    _op_forward_jit(ws["xpad"], W, b, shifts, H, Wd, ws["pwc"], z)
    return z


@njit(**_JIT)
def _op_backward_jit(xpad, W_, shifts, gz, need_dx, dW, db, dshifts,
                     H, W, pwc, dpw, G, du, dxp):
    Cout, Cin, Q = W_.shape[0], W_.shape[1], W_.shape[2]
    off = W + 1
    for k in range(Cout):
        gzk = gz[k]
        s = 0.0
        for p in range(H):
            for r in range(W):
                s += gzk[p, r]
        for q in range(Q):
            db[k, q] += s
        ia = int(np.floor(shifts[k, 0]))
        ib = int(np.floor(shifts[k, 1]))
        fa = shifts[k, 0] - ia
        fb = shifts[k, 1] - ib
        w0 = 1.0 - fa
        w1 = fa
        g0 = 1.0 - fb
        g1 = fb
        base = min(max(ib, -off), W) + off
        for p in range(H):
            for r in range(W):
                G[p + 2, r + 2] = gzk[p, r]
        da = 0.0
        dbta = 0.0
        for c in range(Cin):
            xpc = xpad[c]
            _build_pw_c(xpc, ia, ib, fa, fb, Q, H, W, pwc)
            # kernel-coefficient gradients
            for q in range(Q):
                _corr9_into(pwc[q], gzk, dW[k, c, q])
            # du = sum_q (q+1) u^q * (flipped-kernel correlation of gz)_q,
            # interior frame only — the halo is structural zero.  The
            # correlations share the same nine gz taps per pixel, so the
            # common Q are fused into one pass; other Q go plane-by-plane.
            if Q == 3:
                wq0 = W_[k, c, 0]
                e00 = wq0[2, 2]; e01 = wq0[2, 1]; e02 = wq0[2, 0]
                e10 = wq0[1, 2]; e11 = wq0[1, 1]; e12 = wq0[1, 0]
                e20 = wq0[0, 2]; e21 = wq0[0, 1]; e22 = wq0[0, 0]
                wq1 = W_[k, c, 1]
                h00 = wq1[2, 2]; h01 = wq1[2, 1]; h02 = wq1[2, 0]
                h10 = wq1[1, 2]; h11 = wq1[1, 1]; h12 = wq1[1, 0]
                h20 = wq1[0, 2]; h21 = wq1[0, 1]; h22 = wq1[0, 0]
                wq2 = W_[k, c, 2]
                m00 = wq2[2, 2]; m01 = wq2[2, 1]; m02 = wq2[2, 0]
                m10 = wq2[1, 2]; m11 = wq2[1, 1]; m12 = wq2[1, 0]
                m20 = wq2[0, 2]; m21 = wq2[0, 1]; m22 = wq2[0, 0]
                u1p = pwc[0]
                u2p = pwc[1]
                for p in range(H):
                    s0 = G[p + 1]
                    s1 = G[p + 2]
                    s2 = G[p + 3]
                    u1r = u1p[p + 1]
                    u2r = u2p[p + 1]
                    durow = du[p]
                    for o in range(W):
                        g00 = s0[o + 1]; g01 = s0[o + 2]; g02 = s0[o + 3]
                        g10 = s1[o + 1]; g11 = s1[o + 2]; g12 = s1[o + 3]
                        g20 = s2[o + 1]; g21 = s2[o + 2]; g22 = s2[o + 3]
                        d0 = (e00 * g00 + e01 * g01 + e02 * g02
                              + e10 * g10 + e11 * g11 + e12 * g12
                              + e20 * g20 + e21 * g21 + e22 * g22)
                        d1 = (h00 * g00 + h01 * g01 + h02 * g02
                              + h10 * g10 + h11 * g11 + h12 * g12
                              + h20 * g20 + h21 * g21 + h22 * g22)
                        d2 = (m00 * g00 + m01 * g01 + m02 * g02
                              + m10 * g10 + m11 * g11 + m12 * g12
                              + m20 * g20 + m21 * g21 + m22 * g22)
                        durow[o + 1] = (d0 + 2.0 * u1r[o + 1] * d1
                                        + 3.0 * u2r[o + 1] * d2)
            elif Q == 1:
                wq0 = W_[k, c, 0]
                e00 = wq0[2, 2]; e01 = wq0[2, 1]; e02 = wq0[2, 0]
                e10 = wq0[1, 2]; e11 = wq0[1, 1]; e12 = wq0[1, 0]
                e20 = wq0[0, 2]; e21 = wq0[0, 1]; e22 = wq0[0, 0]
                for p in range(H):
                    s0 = G[p + 1]
                    s1 = G[p + 2]
                    s2 = G[p + 3]
                    durow = du[p]
                    for o in range(W):
                        durow[o + 1] = (e00 * s0[o + 1] + e01 * s0[o + 2] + e02 * s0[o + 3]
                                        + e10 * s1[o + 1] + e11 * s1[o + 2] + e12 * s1[o + 3]
                                        + e20 * s2[o + 1] + e21 * s2[o + 2] + e22 * s2[o + 3])
            else:
                for q in range(Q):
                    wkcq = W_[k, c, q]
                    f00 = wkcq[2, 2]; f01 = wkcq[2, 1]; f02 = wkcq[2, 0]
                    f10 = wkcq[1, 2]; f11 = wkcq[1, 1]; f12 = wkcq[1, 0]
                    f20 = wkcq[0, 2]; f21 = wkcq[0, 1]; f22 = wkcq[0, 0]
                    dq = dpw[q]
                    for p in range(H):
                        s0 = G[p + 1]
                        s1 = G[p + 2]
                        s2 = G[p + 3]
                        dst = dq[p]
                        for r in range(W):
                            dst[r] = (f00 * s0[r + 1] + f01 * s0[r + 2] + f02 * s0[r + 3]
                                      + f10 * s1[r + 1] + f11 * s1[r + 2] + f12 * s1[r + 3]
                                      + f20 * s2[r + 1] + f21 * s2[r + 2] + f22 * s2[r + 3])
                for p in range(H):
                    durow = du[p]
                    dq0 = dpw[0, p]
                    for o in range(W):
                        durow[o + 1] = dq0[o]
                for q in range(1, Q):
                    qq = float(q + 1)
                    uq = pwc[q - 1]
                    dq = dpw[q]
                    for p in range(H):
                        durow = du[p]
                        uprev = uq[p + 1]
                        dqr = dq[p]
                        for o in range(W):
                            durow[o + 1] += qq * uprev[o + 1] * dqr[o]
            # shift gradients: one branch-free pass against the padded input
            for p in range(H):
                srow = p + ia
                r0 = srow if 0 <= srow < H else H
                r1 = srow + 1 if 0 <= srow + 1 < H else H
                x0 = xpc[r0]
                x1 = xpc[r1]
                durow = du[p]
                for o in range(W):
                    a0 = x0[o + base]
                    a1 = x0[o + base + 1]
                    b0 = x1[o + base]
                    b1 = x1[o + base + 1]
                    dv = durow[o + 1]
                    da += dv * (g0 * (b0 - a0) + g1 * (b1 - a1))
                    dbta += dv * ((w0 * a1 + w1 * b1) - (w0 * a0 + w1 * b0))
            if need_dx:
                # adjoint of the blend: contribution of source column t+ib is
                # g0*du[., t] + g1*du[., t-1], scattered to the two source
                # rows; margins and the parking row absorb out-of-range taps
                for p in range(H):
                    srow = p + ia
                    r0 = srow if 0 <= srow < H else H
                    r1 = srow + 1 if 0 <= srow + 1 < H else H
                    d0 = dxp[c, r0]
                    d1 = dxp[c, r1]
                    durow = du[p]
                    for t in range(W + 1):
                        v = g0 * durow[t + 1] + g1 * durow[t]
                        d0[t + base] += w0 * v
                        d1[t + base] += w1 * v
        dshifts[k, 0] += da
        dshifts[k, 1] += dbta
    return


def op_backward(x, W, shifts, gz, need_dx, dW, db, dshifts, dx):
    """Accumulate one sample's gradients of an operational layer.

    gz: (Cout, H, W) = dL/dz (pre-activation gradient).  Accumulates into
    dW/db/dshifts (and dx when need_dx) so a batch can share the buffers;
    returns nothing.
    """
    Cout, Cin, Q = W.shape[0], W.shape[1], W.shape[2]
    H, Wd = x.shape[1], x.shape[2]
    ws = _workspace(Cin, Q, H, Wd)
    _fill_xpad(x, ws["xpad"], H, Wd)
    dxp = ws["dxp"]
    if need_dx:
        dxp[:] = 0.0
    _op_backward_jit(ws["xpad"], W, shifts, gz, need_dx, dW, db, dshifts,
                     H, Wd, ws["pwc"], ws["dpw"], ws["G"], ws["du"], dxp)
    if need_dx:
        dx += dxp[:, :H, Wd + 1 : 2 * Wd + 1]
    return
