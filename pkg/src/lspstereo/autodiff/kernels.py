"""Compiled loops for 3D convolution and the 2D im2col / col2im gathers.

Channel counts in the cost-aggregation stack are small (8 or fewer), which makes
BLAS-backed im2col inefficient; direct loops with a contiguous innermost axis
vectorise well under numba. Inputs arrive already zero-padded.
"""

import numba
import numpy as np


@numba.njit(cache=True, fastmath=True)
def conv3d_forward(xp, w, out, sd, sh, sw):
    B, O, D, H, W = out.shape
    C = xp.shape[1]
    KD, KH, KW = w.shape[2], w.shape[3], w.shape[4]
    for b in range(B):
        for o in range(O):
            for c in range(C):
                for a in range(KD):
                    for p in range(KH):
                        for q in range(KW):
                            wv = w[o, c, a, p, q]
                            for d in range(D):
                                for h in range(H):
                                    for j in range(W):
                                        out[b, o, d, h, j] += wv * xp[b, c, d * sd + a, h * sh + p, j * sw + q]


@numba.njit(cache=True, fastmath=True)
def conv3d_backward(xp, w, g, gxp, gw, sd, sh, sw):
    B, O, D, H, W = g.shape
    C = xp.shape[1]
    KD, KH, KW = w.shape[2], w.shape[3], w.shape[4]
    for b in range(B):
        for o in range(O):
            for c in range(C):
                for a in range(KD):
                    for p in range(KH):
                        for q in range(KW):
                            wv = w[o, c, a, p, q]
                            acc = 0.0
                            for d in range(D):
                                for h in range(H):
                                    for j in range(W):
                                        gv = g[b, o, d, h, j]
                                        acc += gv * xp[b, c, d * sd + a, h * sh + p, j * sw + q]
                                        gxp[b, c, d * sd + a, h * sh + p, j * sw + q] += wv * gv
                            gw[o, c, a, p, q] += acc


@numba.njit(cache=True, fastmath=True)
def conv3d_forward_unit(xp, w, out):
    """Stride-1 forward; whole rows per tap so the inner loop is contiguous."""
    B, O, D, H, W = out.shape
    C = xp.shape[1]
    KD, KH, KW = w.shape[2], w.shape[3], w.shape[4]
    for b in range(B):
        for o in range(O):
            for c in range(C):
                for a in range(KD):
                    for p in range(KH):
                        for q in range(KW):
                            wv = w[o, c, a, p, q]
                            for d in range(D):
                                for h in range(H):
                                    orow = out[b, o, d, h]
                                    xrow = xp[b, c, d + a, h + p]
                                    for j in range(W):
                                        orow[j] += wv * xrow[j + q]


@numba.njit(cache=True, fastmath=True)
def conv3d_backward_unit(xp, w, g, gxp, gw):
    B, O, D, H, W = g.shape
    C = xp.shape[1]
    KD, KH, KW = w.shape[2], w.shape[3], w.shape[4]
    for b in range(B):
        for o in range(O):
            for c in range(C):
                for a in range(KD):
                    for p in range(KH):
                        for q in range(KW):
                            wv = w[o, c, a, p, q]
                            acc = 0.0
                            for d in range(D):
                                for h in range(H):
                                    grow = g[b, o, d, h]
                                    xrow = xp[b, c, d + a, h + p]
                                    gxrow = gxp[b, c, d + a, h + p]
                                    for j in range(W):
                                        acc += grow[j] * xrow[j + q]
                                    for j in range(W):
                                        gxrow[j + q] += wv * grow[j]
                            gw[o, c, a, p, q] += acc


@numba.njit(cache=True)
def im2col(xp, cols, KH, KW, sh, sw, dh, dw, OH, OW):
    """cols[(c·KH + a)·KW + k, (b·OH + i)·OW + j] = xp[b, c, i·sh + a·dh, j·sw + k·dw]."""
    B, C = xp.shape[0], xp.shape[1]
    for c in range(C):
        for a in range(KH):
            for k in range(KW):
                row = cols[(c * KH + a) * KW + k]
                for b in range(B):
                    for i in range(OH):
                        src = xp[b, c, i * sh + a * dh]
                        base = (b * OH + i) * OW
                        for j in range(OW):
                            row[base + j] = src[j * sw + k * dw]


@numba.njit(cache=True)
def col2im(gc, gxp, KH, KW, sh, sw, dh, dw, OH, OW):
    """Adjoint of :func:`im2col`: scatter-add column gradients into the padded input."""
    B, C = gxp.shape[0], gxp.shape[1]
    for c in range(C):
        for a in range(KH):
            for k in range(KW):
                row = gc[(c * KH + a) * KW + k]
                for b in range(B):
                    for i in range(OH):
                        dst = gxp[b, c, i * sh + a * dh]
                        base = (b * OH + i) * OW
                        for j in range(OW):
                            dst[j * sw + k * dw] += row[base + j]


def warmup() -> None:
    for dt in (np.float32, np.float64):
        xp = np.zeros((1, 1, 3, 3, 3), dt)
        w = np.zeros((1, 1, 3, 3, 3), dt)
        out = np.zeros((1, 1, 1, 1, 1), dt)
        conv3d_forward(xp, w, out, 1, 1, 1)
        conv3d_backward(xp, w, out, np.zeros_like(xp), np.zeros_like(w), 1, 1, 1)
        conv3d_forward_unit(xp, w, out)
        conv3d_backward_unit(xp, w, out, np.zeros_like(xp), np.zeros_like(w))
        x2 = np.zeros((1, 1, 3, 3), dt)
        cols = np.zeros((9, 1), dt)
        im2col(x2, cols, 3, 3, 1, 1, 1, 1, 1, 1)
        col2im(cols, x2, 3, 3, 1, 1, 1, 1, 1, 1)
