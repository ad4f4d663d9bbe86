"""Hot inner loops: numba-compiled kernels with pure-numpy fallbacks.

The numba path is used when numba imports cleanly and ``OMEGA_SEG_NUMBA`` is
not set to ``0``.  Both paths compute the same quantities; the bilinear
sampler forward is bit-identical between them (same products, same summation
order), which the test suite checks.
"""

import os

import numpy as np

try:
    import numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None

USE_NUMBA = numba is not None and os.environ.get("OMEGA_SEG_NUMBA", "1") != "0"


def _njit(fn=None, **kw):
    if fn is None:
        return lambda f: _njit(f, **kw)
    if numba is None:
        return fn
    return numba.njit(cache=True, nogil=True, **kw)(fn)


# ---------------------------------------------------------------------------
# Same-padded stride-1 convolution.
#
# Two algorithms: im2col + BLAS matmul (numpy), and a direct loop nest
# (numba) whose innermost loop runs along an image row.  The direct form
# wins on large, thin feature maps, BLAS on small, wide ones, so the numba
# path dispatches on the spatial size.
# ---------------------------------------------------------------------------

DIRECT_CONV_MIN_PIXELS = 1024


def _im2col(xp, k, H, W):
    N, C = xp.shape[:2]
    cols = np.empty((N, C, k, k, H, W), dtype=xp.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, :, i, j] = xp[:, :, i:i + H, j:j + W]
    return cols.reshape(N, C * k * k, H * W)


def _col2im(dcols, N, C, k, H, W):
    p = k // 2
    dcols = dcols.reshape(N, C, k, k, H, W)
    dxp = np.zeros((N, C, H + 2 * p, W + 2 * p), dtype=dcols.dtype)
    for i in range(k):
        for j in range(k):
            dxp[:, :, i:i + H, j:j + W] += dcols[:, :, i, j]
    return dxp[:, :, p:p + H, p:p + W]


@_njit(fastmath=True)
def _conv_direct_nb(xp, w, b, H, W):
    N, C = xp.shape[0], xp.shape[1]
    F, k = w.shape[0], w.shape[2]
    out = np.empty((N, F, H, W), xp.dtype)
    for n in range(N):
        for f in range(F):
            o = out[n, f]
            o[:] = b[f]
            for c in range(C):
                xc = xp[n, c]
                for i in range(k):
                    for j in range(k):
                        wv = w[f, c, i, j]
                        for h in range(H):
                            orow = o[h]
                            xrow = xc[h + i]
                            for q in range(W):
                                orow[q] += wv * xrow[q + j]
    return out


@_njit(fastmath=True)
def _conv_dweight_nb(xp, g, k):
    N, F, H, W = g.shape
    C = xp.shape[1]
    dw = np.zeros((F, C, k, k), np.float64)
    for n in range(N):
        for f in range(F):
            for c in range(C):
                for i in range(k):
                    for j in range(k):
                        acc = 0.0
                        for h in range(H):
                            grow = g[n, f, h]
                            xrow = xp[n, c, h + i]
                            s = grow[0] - grow[0]
                            for q in range(W):
                                s += grow[q] * xrow[q + j]
                            acc += s
                        dw[f, c, i, j] += acc
    return dw


def _pad(x, p):
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else np.ascontiguousarray(x)


def conv_forward(x, w, b):
    """Returns (out, ctx); ``ctx`` feeds :func:`conv_backward`."""
    N, C, H, W = x.shape
    F, _, k, _ = w.shape
    p = k // 2
    xp = _pad(x, p)
    if b is None:
        b = np.zeros(F, x.dtype)
    if USE_NUMBA and H * W >= DIRECT_CONV_MIN_PIXELS:
        return _conv_direct_nb(xp, np.ascontiguousarray(w), b, H, W), ("direct", xp)
    cols = _im2col(xp, k, H, W)
    out = np.matmul(w.reshape(F, -1), cols)
    out += b[None, :, None]
    return out.reshape(N, F, H, W), ("im2col", cols)


def conv_backward(ctx, g, w, need_dx=True):
    """(dx or None, dw, db) for the convolution that produced ``ctx``."""
    kind, buf = ctx
    N, F, H, W = g.shape
    C, k = w.shape[1], w.shape[2]
    db = g.sum(axis=(0, 2, 3))
    if kind == "direct":
        g = np.ascontiguousarray(g)
        dw = _conv_dweight_nb(buf, g, k).astype(w.dtype)
        dx = None
        if need_dx:
            wt = np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
            dx = _conv_direct_nb(_pad(g, k // 2), wt, np.zeros(C, g.dtype), H, W)
        return dx, dw, db
    g2 = g.reshape(N, F, H * W)
    dw = np.matmul(g2, buf.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
    dx = None
    if need_dx:
        dx = _col2im(np.matmul(w.reshape(F, -1).T, g2), N, C, k, H, W)
    return dx, dw, db


# ---------------------------------------------------------------------------
# 2x2 max pooling
# ---------------------------------------------------------------------------

@_njit
def _maxpool2_fwd_nb(x):
    N, C, H, W = x.shape
    Ho, Wo = H // 2, W // 2
    out = np.empty((N, C, Ho, Wo), dtype=x.dtype)
    arg = np.empty((N, C, Ho, Wo), dtype=np.int8)
    for n in range(N):
        for c in range(C):
            for i in range(Ho):
                for j in range(Wo):
                    best = x[n, c, 2 * i, 2 * j]
                    k = 0
                    v = x[n, c, 2 * i, 2 * j + 1]
                    if v > best:
                        best = v
                        k = 1
                    v = x[n, c, 2 * i + 1, 2 * j]
                    if v > best:
                        best = v
                        k = 2
                    v = x[n, c, 2 * i + 1, 2 * j + 1]
                    if v > best:
                        best = v
                        k = 3
                    out[n, c, i, j] = best
                    arg[n, c, i, j] = k
    return out, arg


@_njit
def _maxpool2_bwd_nb(dout, arg):
    N, C, Ho, Wo = dout.shape
    dx = np.zeros((N, C, 2 * Ho, 2 * Wo), dtype=dout.dtype)
    for n in range(N):
        for c in range(C):
            for i in range(Ho):
                for j in range(Wo):
                    k = arg[n, c, i, j]
                    dx[n, c, 2 * i + k // 2, 2 * j + k % 2] = dout[n, c, i, j]
    return dx


def _blocks(x):
    N, C, H, W = x.shape
    return (x.reshape(N, C, H // 2, 2, W // 2, 2)
             .transpose(0, 1, 2, 4, 3, 5)
             .reshape(N, C, H // 2, W // 2, 4))


def _maxpool2_fwd_np(x):
    b = _blocks(x)
    arg = np.argmax(b, axis=-1).astype(np.int8)  # argmax returns first maximum
    out = np.take_along_axis(b, arg[..., None].astype(np.intp), axis=-1)[..., 0]
    return out, arg


def _maxpool2_bwd_np(dout, arg):
    N, C, Ho, Wo = dout.shape
    onehot = arg[..., None] == np.arange(4, dtype=np.int8)
    blocks = np.where(onehot, dout[..., None], 0).astype(dout.dtype)
    return (blocks.reshape(N, C, Ho, Wo, 2, 2)
                  .transpose(0, 1, 2, 4, 3, 5)
                  .reshape(N, C, 2 * Ho, 2 * Wo))


def maxpool2_forward(x):
    if USE_NUMBA:
        return _maxpool2_fwd_nb(np.ascontiguousarray(x))
    return _maxpool2_fwd_np(x)


def maxpool2_backward(dout, arg):
    if USE_NUMBA:
        return _maxpool2_bwd_nb(np.ascontiguousarray(dout), arg)
    return _maxpool2_bwd_np(dout, arg)


# ---------------------------------------------------------------------------
# Bilinear sampler.  px/py are 0-based pixel coordinates, shape (N, H', W').
# Out-of-image taps contribute nothing.  Per output value the taps are added
# in row-major order (h0,w0), (h0,w0+1), (h0+1,w0), (h0+1,w0+1), each term
# formed as (value * ky) * kx.
# ---------------------------------------------------------------------------

@_njit
def _bilinear_fwd_nb(img, px, py):
    N, C, H, W = img.shape
    Ho, Wo = px.shape[1], px.shape[2]
    out = np.zeros((N, C, Ho, Wo), dtype=img.dtype)
    for n in range(N):
        for i in range(Ho):
            for j in range(Wo):
                x = px[n, i, j]
                y = py[n, i, j]
                fh = np.floor(y)
                fw = np.floor(x)
                if fh < -2.0 or fh > H or fw < -2.0 or fw > W:
                    continue
                h0 = int(fh)
                w0 = int(fw)
                ky0 = 1.0 - abs(y - h0)
                ky1 = 1.0 - abs(y - (h0 + 1))
                kx0 = 1.0 - abs(x - w0)
                kx1 = 1.0 - abs(x - (w0 + 1))
                vh0 = h0 >= 0 and h0 < H
                vh1 = h0 + 1 >= 0 and h0 + 1 < H
                vw0 = w0 >= 0 and w0 < W
                vw1 = w0 + 1 >= 0 and w0 + 1 < W
                for c in range(C):
                    acc = out[n, c, i, j]
                    if vh0 and vw0:
                        acc += img[n, c, h0, w0] * ky0 * kx0
                    if vh0 and vw1:
                        acc += img[n, c, h0, w0 + 1] * ky0 * kx1
                    if vh1 and vw0:
                        acc += img[n, c, h0 + 1, w0] * ky1 * kx0
                    if vh1 and vw1:
                        acc += img[n, c, h0 + 1, w0 + 1] * ky1 * kx1
                    out[n, c, i, j] = acc
    return out


@_njit
def _bilinear_bwd_nb(img, px, py, dout):
    N, C, H, W = img.shape
    Ho, Wo = px.shape[1], px.shape[2]
    dimg = np.zeros_like(img)
    dpx = np.zeros(px.shape, dtype=img.dtype)
    dpy = np.zeros(py.shape, dtype=img.dtype)
    for n in range(N):
        for i in range(Ho):
            for j in range(Wo):
                x = px[n, i, j]
                y = py[n, i, j]
                fh = np.floor(y)
                fw = np.floor(x)
                if fh < -2.0 or fh > H or fw < -2.0 or fw > W:
                    continue
                h0 = int(fh)
                w0 = int(fw)
                ky0 = 1.0 - (y - h0)
                ky1 = 1.0 - ky0
                kx0 = 1.0 - (x - w0)
                kx1 = 1.0 - kx0
                vh0 = h0 >= 0 and h0 < H
                vh1 = h0 + 1 >= 0 and h0 + 1 < H
                vw0 = w0 >= 0 and w0 < W
                vw1 = w0 + 1 >= 0 and w0 + 1 < W
                gx = 0.0
                gy = 0.0
                for c in range(C):
                    g = dout[n, c, i, j]
                    if g == 0.0:
                        continue
                    v00 = img[n, c, h0, w0] if (vh0 and vw0) else 0.0
                    v01 = img[n, c, h0, w0 + 1] if (vh0 and vw1) else 0.0
                    v10 = img[n, c, h0 + 1, w0] if (vh1 and vw0) else 0.0
                    v11 = img[n, c, h0 + 1, w0 + 1] if (vh1 and vw1) else 0.0
                    if vh0 and vw0:
                        dimg[n, c, h0, w0] += g * ky0 * kx0
                    if vh0 and vw1:
                        dimg[n, c, h0, w0 + 1] += g * ky0 * kx1
                    if vh1 and vw0:
                        dimg[n, c, h0 + 1, w0] += g * ky1 * kx0
                    if vh1 and vw1:
                        dimg[n, c, h0 + 1, w0 + 1] += g * ky1 * kx1
                    gx += g * (ky0 * (v01 - v00) + ky1 * (v11 - v10))
                    gy += g * (kx0 * (v10 - v00) + kx1 * (v11 - v01))
                dpx[n, i, j] = gx
                dpy[n, i, j] = gy
    return dimg, dpx, dpy


def _taps(img, px, py):
    """Corner indices, weights and validity masks for the numpy path."""
    N, C, H, W = img.shape
    fh = np.floor(py)
    fw = np.floor(px)
    ok = (fh >= -2.0) & (fh <= H) & (fw >= -2.0) & (fw <= W)
    fh = np.where(ok, fh, -5.0)
    fw = np.where(ok, fw, -5.0)
    h0 = fh.astype(np.intp)
    w0 = fw.astype(np.intp)
    taps = []
    for dh in (0, 1):
        for dw in (0, 1):
            hh = h0 + dh
            ww = w0 + dw
            valid = ok & (hh >= 0) & (hh < H) & (ww >= 0) & (ww < W)
            taps.append((dh, dw, np.clip(hh, 0, H - 1), np.clip(ww, 0, W - 1), valid))
    return h0, w0, taps


def _bilinear_fwd_np(img, px, py):
    N, C, H, W = img.shape
    h0, w0, taps = _taps(img, px, py)
    ky = (1.0 - np.abs(py - h0), 1.0 - np.abs(py - (h0 + 1)))
    kx = (1.0 - np.abs(px - w0), 1.0 - np.abs(px - (w0 + 1)))
    nidx = np.arange(N)[:, None, None]
    out = None
    for dh, dw, hh, ww, valid in taps:
        vals = np.moveaxis(img[nidx, :, hh, ww], -1, 1)  # (N, C, H', W')
        term = np.where(valid[:, None], vals * ky[dh][:, None] * kx[dw][:, None], 0.0)
        out = 0.0 + term if out is None else out + term
    return out.astype(img.dtype, copy=False)


def _bilinear_bwd_np(img, px, py, dout):
    N, C, H, W = img.shape
    h0, w0, taps = _taps(img, px, py)
    ky0 = (1.0 - (py - h0)).astype(img.dtype)
    kx0 = (1.0 - (px - w0)).astype(img.dtype)
    ky = (ky0, 1.0 - ky0)
    kx = (kx0, 1.0 - kx0)
    nidx = np.arange(N)[:, None, None]
    dimg = np.zeros_like(img)
    v = {}
    for dh, dw, hh, ww, valid in taps:
        vals = np.moveaxis(img[nidx, :, hh, ww], -1, 1)
        v[dh, dw] = np.where(valid[:, None], vals, 0).astype(img.dtype)
        wgt = np.where(valid, ky[dh] * kx[dw], 0)[:, None] * dout  # (N, C, H', W')
        flat = ((np.arange(N)[:, None, None, None] * C + np.arange(C)[None, :, None, None]) * H
                + hh[:, None]) * W + ww[:, None]
        dimg += np.bincount(flat.ravel(), weights=wgt.ravel(),
                            minlength=dimg.size).reshape(dimg.shape).astype(img.dtype)
    gx = (dout * (ky[0][:, None] * (v[0, 1] - v[0, 0]) + ky[1][:, None] * (v[1, 1] - v[1, 0]))).sum(1)
    gy = (dout * (kx[0][:, None] * (v[1, 0] - v[0, 0]) + kx[1][:, None] * (v[1, 1] - v[0, 1]))).sum(1)
    return dimg, gx.astype(img.dtype), gy.astype(img.dtype)


def bilinear_forward(img, px, py):
    if USE_NUMBA:
        return _bilinear_fwd_nb(np.ascontiguousarray(img), np.ascontiguousarray(px),
                                np.ascontiguousarray(py))
    return _bilinear_fwd_np(img, px, py)


def bilinear_backward(img, px, py, dout):
    if USE_NUMBA:
        return _bilinear_bwd_nb(np.ascontiguousarray(img), np.ascontiguousarray(px),
                                np.ascontiguousarray(py), np.ascontiguousarray(dout))
    return _bilinear_bwd_np(img, px, py, dout)


# ---------------------------------------------------------------------------
# Nearest-neighbour warp of integer label maps (no gradient).
# ---------------------------------------------------------------------------

@_njit
def _nearest_labels_nb(labels, px, py, fill):
    N, H, W = labels.shape
    Ho, Wo = px.shape[1], px.shape[2]
    out = np.empty((N, Ho, Wo), dtype=labels.dtype)
    for n in range(N):
        for i in range(Ho):
            for j in range(Wo):
                h = np.floor(py[n, i, j] + 0.5)
                w = np.floor(px[n, i, j] + 0.5)
                if h >= 0 and h < H and w >= 0 and w < W:
                    out[n, i, j] = labels[n, int(h), int(w)]
                else:
                    out[n, i, j] = fill
    return out


def _nearest_labels_np(labels, px, py, fill):
    N, H, W = labels.shape
    h = np.floor(py + 0.5)
    w = np.floor(px + 0.5)
    valid = (h >= 0) & (h < H) & (w >= 0) & (w < W)
    hi = np.clip(h, 0, H - 1).astype(np.intp)
    wi = np.clip(w, 0, W - 1).astype(np.intp)
    vals = labels[np.arange(N)[:, None, None], hi, wi]
    return np.where(valid, vals, fill).astype(labels.dtype)


def nearest_labels(labels, px, py, fill=0):
    if USE_NUMBA:
        return _nearest_labels_nb(np.ascontiguousarray(labels), np.ascontiguousarray(px),
                                  np.ascontiguousarray(py), labels.dtype.type(fill))
    return _nearest_labels_np(labels, px, py, fill)
