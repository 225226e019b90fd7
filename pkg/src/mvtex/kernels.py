"""Hot numeric kernels: batched bilinear sampling and a fused Adam update.

Numba-compiled single-threaded loops when numba is importable, vectorized
numpy otherwise. Both paths accumulate sequentially per element, so results
are deterministic and thread-count independent. Scalar math runs in float64
and stores back at the array dtype.
"""

from __future__ import annotations

import numpy as np

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False


def _clamp_setup(x, y, h, w):
    xc = np.clip(x, 0.0, w - 1.0)
    yc = np.clip(y, 0.0, h - 1.0)
    x0 = np.clip(np.floor(xc).astype(np.int64), 0, w - 2)
    y0 = np.clip(np.floor(yc).astype(np.int64), 0, h - 2)
    return xc, yc, x0, y0, xc - x0, yc - y0


if HAVE_NUMBA:

    @numba.njit(fastmath=False)
    def _gather_nb(feat, xs, ys, out):
        bsz, h, w, c = feat.shape
        npts = xs.shape[1]
        for b in range(bsz):
            for p in range(npts):
                x = min(max(float(xs[b, p]), 0.0), w - 1.0)
                y = min(max(float(ys[b, p]), 0.0), h - 1.0)
                x0 = min(int(np.floor(x)), w - 2)
                y0 = min(int(np.floor(y)), h - 2)
                fx = x - x0
                fy = y - y0
                for k in range(c):
                    top = feat[b, y0, x0, k] * (1.0 - fx) + feat[b, y0, x0 + 1, k] * fx
                    bot = feat[b, y0 + 1, x0, k] * (1.0 - fx) + feat[b, y0 + 1, x0 + 1, k] * fx
                    out[b, p, k] = top * (1.0 - fy) + bot * fy

    @numba.njit(fastmath=False)
    def _scatter_nb(dfeat, xs, ys, dout):
        bsz, h, w, c = dfeat.shape
        npts = xs.shape[1]
        for b in range(bsz):
            for p in range(npts):
                x = min(max(float(xs[b, p]), 0.0), w - 1.0)
                y = min(max(float(ys[b, p]), 0.0), h - 1.0)
                x0 = min(int(np.floor(x)), w - 2)
                y0 = min(int(np.floor(y)), h - 2)
                fx = x - x0
                fy = y - y0
                for k in range(c):
                    g = float(dout[b, p, k])
                    dfeat[b, y0, x0, k] += g * (1.0 - fx) * (1.0 - fy)
                    dfeat[b, y0, x0 + 1, k] += g * fx * (1.0 - fy)
                    dfeat[b, y0 + 1, x0, k] += g * (1.0 - fx) * fy
                    dfeat[b, y0 + 1, x0 + 1, k] += g * fx * fy

    @numba.njit(fastmath=False)
    def _coord_grad_nb(feat, xs, ys, dout, dx, dy):
        bsz, h, w, c = feat.shape
        npts = xs.shape[1]
        for b in range(bsz):
            for p in range(npts):
                xr = float(xs[b, p])
                yr = float(ys[b, p])
                inside_x = 0.0 < xr < w - 1.0  # clamped samples are constant in x
                inside_y = 0.0 < yr < h - 1.0
                x = min(max(xr, 0.0), w - 1.0)
                y = min(max(yr, 0.0), h - 1.0)
                x0 = min(int(np.floor(x)), w - 2)
                y0 = min(int(np.floor(y)), h - 2)
                fx = x - x0
                fy = y - y0
                gx = 0.0
                gy = 0.0
                for k in range(c):
                    g = float(dout[b, p, k])
                    f00 = feat[b, y0, x0, k]
                    f01 = feat[b, y0, x0 + 1, k]
                    f10 = feat[b, y0 + 1, x0, k]
                    f11 = feat[b, y0 + 1, x0 + 1, k]
                    gx += g * ((f01 - f00) * (1.0 - fy) + (f11 - f10) * fy)
                    gy += g * ((f10 - f00) * (1.0 - fx) + (f11 - f01) * fx)
                dx[b, p] = gx if inside_x else 0.0
                dy[b, p] = gy if inside_y else 0.0

    # fastmath trades ~1 ulp on the sqrt/divide for a vectorizable loop; the
    # update stays deterministic for a fixed build
    @numba.njit(fastmath=True)
    def _adam_nb(p, g, m, v, lr, b1, b2, eps, bc1, bc2):
        one = type(lr)(1.0)
        for i in range(p.size):
            gi = g[i]
            mi = b1 * m[i] + (one - b1) * gi
            vi = b2 * v[i] + (one - b2) * gi * gi
            m[i] = mi
            v[i] = vi
            p[i] -= lr * (mi / bc1) / (np.sqrt(vi / bc2) + eps)


def bilinear_gather(features: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Sample (B, H, W, C) maps at per-batch points -> (B, P, C), border clamp."""
    b, h, w, c = features.shape
    out = np.empty((b, xs.shape[1], c), dtype=features.dtype)
    if HAVE_NUMBA:
        _gather_nb(features, xs, ys, out)
        return out
    xc, yc, x0, y0, fx, fy = _clamp_setup(xs.astype(np.float64), ys.astype(np.float64), h, w)
    bi = np.arange(b)[:, None]
    fx = fx[..., None]
    fy = fy[..., None]
    top = features[bi, y0, x0] * (1 - fx) + features[bi, y0, x0 + 1] * fx
    bot = features[bi, y0 + 1, x0] * (1 - fx) + features[bi, y0 + 1, x0 + 1] * fx
    return (top * (1 - fy) + bot * fy).astype(features.dtype)


def bilinear_scatter(dfeat: np.ndarray, xs: np.ndarray, ys: np.ndarray,
                     dout: np.ndarray) -> None:
    """Accumulate output gradients back into (B, H, W, C) feature gradients."""
    if HAVE_NUMBA:
        _scatter_nb(dfeat, xs, ys, dout)
        return
    b, h, w, c = dfeat.shape
    _, _, x0, y0, fx, fy = _clamp_setup(xs.astype(np.float64), ys.astype(np.float64), h, w)
    for bb in range(b):  # np.add.at per batch element, small fallback path
        for (yy, xx, wgt) in (
            (y0[bb], x0[bb], (1 - fx[bb]) * (1 - fy[bb])),
            (y0[bb], x0[bb] + 1, fx[bb] * (1 - fy[bb])),
            (y0[bb] + 1, x0[bb], (1 - fx[bb]) * fy[bb]),
            (y0[bb] + 1, x0[bb] + 1, fx[bb] * fy[bb]),
        ):
            np.add.at(dfeat[bb], (yy, xx), (dout[bb] * wgt[:, None]).astype(dfeat.dtype))


def bilinear_coord_grad(features: np.ndarray, xs: np.ndarray, ys: np.ndarray,
                        dout: np.ndarray):
    """Gradients of the bilinear sample w.r.t. the sample coordinates."""
    b, h, w, c = features.shape
    dx = np.zeros_like(xs)
    dy = np.zeros_like(ys)
    if HAVE_NUMBA:
        _coord_grad_nb(features, xs, ys, dout, dx, dy)
        return dx, dy
    xf = xs.astype(np.float64)
    yf = ys.astype(np.float64)
    _, _, x0, y0, fx, fy = _clamp_setup(xf, yf, h, w)
    bi = np.arange(b)[:, None]
    f00 = features[bi, y0, x0]
    f01 = features[bi, y0, x0 + 1]
    f10 = features[bi, y0 + 1, x0]
    f11 = features[bi, y0 + 1, x0 + 1]
    gx = (dout * ((f01 - f00) * (1 - fy[..., None]) + (f11 - f10) * fy[..., None])).sum(-1)
    gy = (dout * ((f10 - f00) * (1 - fx[..., None]) + (f11 - f01) * fx[..., None])).sum(-1)
    inside_x = (xf > 0.0) & (xf < w - 1.0)
    inside_y = (yf > 0.0) & (yf < h - 1.0)
    dx[:] = np.where(inside_x, gx, 0.0).astype(dx.dtype)
    dy[:] = np.where(inside_y, gy, 0.0).astype(dy.dtype)
    return dx, dy


def adam_update(p: np.ndarray, g: np.ndarray, m: np.ndarray, v: np.ndarray,
                lr: float, beta1: float, beta2: float, eps: float, t: int) -> None:
    """Bias-corrected Adam step, fused and in place over flat arrays.

    Arithmetic runs at the parameter dtype (scalars are cast first; a float64
    scalar would silently promote every element)."""
    dt = p.dtype.type
    bc1 = dt(1.0 - beta1 ** t)
    bc2 = dt(1.0 - beta2 ** t)
    lr, beta1, beta2, eps = dt(lr), dt(beta1), dt(beta2), dt(eps)
    if HAVE_NUMBA:
        _adam_nb(p, g, m, v, lr, beta1, beta2, eps, bc1, bc2)
        return
    m *= beta1
    m += (dt(1.0) - beta1) * g
    v *= beta2
    v += (dt(1.0) - beta2) * (g * g)
    denom = np.sqrt(v / bc2)
    denom += eps
    p -= lr * (m / bc1) / denom
