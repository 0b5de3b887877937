"""Pure-numpy kernels.

Every kernel sums each output element in the same term order as its jitted
twin in ``_numba`` (channel, then kernel row, then kernel column), so
forward and delta results agree bit-for-bit across backends.
"""
import numpy as np


def conv_valid(x, w, stride):
    """Unpadded cross-correlation: ``x`` is (C, H, W), ``w`` is (K, K, C, F)."""
    k = w.shape[0]
    c_in, h, wd = x.shape
    f = w.shape[3]
    ho = (h - k) // stride + 1
    wo = (wd - k) // stride + 1
    out = np.zeros((f, ho, wo), dtype=np.float32)
    if ho <= 0 or wo <= 0:
        return np.zeros((f, max(ho, 0), max(wo, 0)), dtype=np.float32)
    ys = stride * (ho - 1) + 1
    xs = stride * (wo - 1) + 1
    for c in range(c_in):
        for ky in range(k):
            for kx in range(k):
                patch = x[c, ky:ky + ys:stride, kx:kx + xs:stride]
                out += w[ky, kx, c, :, None, None] * patch[None, :, :]
    return out


def wgrad_valid(x, dz, k, stride):
    """Weight gradient (K, K, C, F) of ``conv_valid(x, w, stride)`` given ``dz``.

    Reductions run over every output position, so they accumulate in float64
    and round once.
    """
    c_in = x.shape[0]
    f, ho, wo = dz.shape
    g = np.zeros((k, k, c_in, f), dtype=np.float32)
    if ho == 0 or wo == 0:
        return g
    ys = stride * (ho - 1) + 1
    xs = stride * (wo - 1) + 1
    dz2 = np.ascontiguousarray(dz.reshape(f, ho * wo).T, dtype=np.float64)
    for ky in range(k):
        for kx in range(k):
            patch = x[:, ky:ky + ys:stride, kx:kx + xs:stride].reshape(c_in, ho * wo).astype(np.float64)
            g[ky, kx] = np.dot(patch, dz2)
    return g


def maxpool_valid(x, k, stride):
    """Max pooling without padding; ties go to the first element in row-major scan."""
    c, h, w = x.shape
    ho = (h - k) // stride + 1
    wo = (w - k) // stride + 1
    ys = stride * (ho - 1) + 1
    xs = stride * (wo - 1) + 1
    cand = np.empty((k * k, c, ho, wo), dtype=np.float32)
    for ky in range(k):
        for kx in range(k):
            cand[ky * k + kx] = x[:, ky:ky + ys:stride, kx:kx + xs:stride]
    arg = np.argmax(cand, axis=0)
    out = np.take_along_axis(cand, arg[None], axis=0)[0]
    idx = np.empty((c, ho, wo, 2), dtype=np.int32)
    idx[..., 0] = arg // k
    idx[..., 1] = arg % k
    return out, idx


def maxpool_scatter(dy, idx, stride, h, w):
    c, ho, wo = dy.shape
    dx = np.zeros((c, h, w), dtype=np.float32)
    cc, oy, ox = np.meshgrid(np.arange(c), np.arange(ho), np.arange(wo), indexing="ij")
    rows = oy * stride + idx[..., 0]
    cols = ox * stride + idx[..., 1]
    np.add.at(dx, (cc.ravel(), rows.ravel(), cols.ravel()), dy.ravel())
    return dx
