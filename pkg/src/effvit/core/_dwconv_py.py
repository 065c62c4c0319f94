"""Pure-numpy depthwise-convolution kernels, same contract as the compiled ones."""

import numpy as np


def _tap(a, p, q, stride, ho, wo):
    return a[:, :, p : p + stride * (ho - 1) + 1 : stride, q : q + stride * (wo - 1) + 1 : stride]


def dw_forward(xp, w, stride, ho, wo):
    b, c = xp.shape[:2]
    kh, kw = w.shape[1:]
    out = np.zeros((b, c, ho, wo), dtype=xp.dtype)
    for p in range(kh):
        for q in range(kw):
            out += _tap(xp, p, q, stride, ho, wo) * w[None, :, p, q, None, None]
    return out


def dw_backward_input(g, w, stride, hp, wp):
    b, c, ho, wo = g.shape
    kh, kw = w.shape[1:]
    gx = np.zeros((b, c, hp, wp), dtype=g.dtype)
    for p in range(kh):
        for q in range(kw):
            _tap(gx, p, q, stride, ho, wo)[...] += g * w[None, :, p, q, None, None]
    return gx


def dw_backward_weight(g, xp, stride, kh, kw):
    ho, wo = g.shape[2:]
    gw = np.empty((g.shape[1], kh, kw), dtype=g.dtype)
    for p in range(kh):
        for q in range(kw):
            gw[:, p, q] = np.einsum("bchw,bchw->c", g, _tap(xp, p, q, stride, ho, wo))
    return gw
