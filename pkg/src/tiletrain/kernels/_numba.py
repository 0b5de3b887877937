import numpy as np
from numba import njit


@njit(cache=True)
def conv_valid(x, w, stride):
    k = w.shape[0]
    c_in, h, wd = x.shape
    f = w.shape[3]
    ho = max((h - k) // stride + 1, 0)
    wo = max((wd - k) // stride + 1, 0)
    acc = np.zeros((ho, wo, f), dtype=np.float32)
    # filters innermost for contiguous access; per output element the terms
    # still arrive in (c, ky, kx) order
    for c in range(c_in):
        for ky in range(k):
            for kx in range(k):
                wv = w[ky, kx, c]
                for oy in range(ho):
                    row = oy * stride + ky
                    for ox in range(wo):
                        xv = x[c, row, ox * stride + kx]
                        for fo in range(f):
                            acc[oy, ox, fo] += xv * wv[fo]
    out = np.empty((f, ho, wo), dtype=np.float32)
    for fo in range(f):
        for oy in range(ho):
            for ox in range(wo):
                out[fo, oy, ox] = acc[oy, ox, fo]
    return out


@njit(cache=True)
def wgrad_valid(x, dz, k, stride):
    c_in = x.shape[0]
    f, ho, wo = dz.shape
    n = ho * wo
    dzt = np.empty((n, f), dtype=np.float64)
    for fo in range(f):
        for oy in range(ho):
            for ox in range(wo):
                dzt[oy * wo + ox, fo] = dz[fo, oy, ox]
    patch = np.empty((c_in, n), dtype=np.float64)
    g = np.zeros((k, k, c_in, f), dtype=np.float32)
    if n == 0:
        return g
    for ky in range(k):
        for kx in range(k):
            for c in range(c_in):
                for oy in range(ho):
                    for ox in range(wo):
                        patch[c, oy * wo + ox] = x[c, oy * stride + ky, ox * stride + kx]
            g[ky, kx] = np.dot(patch, dzt).astype(np.float32)
    return g


@njit(cache=True)
def maxpool_valid(x, k, stride):
    c, h, w = x.shape
    ho = (h - k) // stride + 1
    wo = (w - k) // stride + 1
    out = np.empty((c, ho, wo), dtype=np.float32)
    idx = np.empty((c, ho, wo, 2), dtype=np.int32)
    for ch in range(c):
        for oy in range(ho):
            for ox in range(wo):
                best = x[ch, oy * stride, ox * stride]
                br = 0
                bc = 0
                for ky in range(k):
                    for kx in range(k):
                        v = x[ch, oy * stride + ky, ox * stride + kx]
                        if v > best:
                            best = v
                            br = ky
                            bc = kx
                out[ch, oy, ox] = best
                idx[ch, oy, ox, 0] = br
                idx[ch, oy, ox, 1] = bc
    return out, idx


@njit(cache=True)
def maxpool_scatter(dy, idx, stride, h, w):
    c, ho, wo = dy.shape
    dx = np.zeros((c, h, w), dtype=np.float32)
    for ch in range(c):
        for oy in range(ho):
            for ox in range(wo):
                dx[ch, oy * stride + idx[ch, oy, ox, 0], ox * stride + idx[ch, oy, ox, 1]] += dy[ch, oy, ox]
    return dx
