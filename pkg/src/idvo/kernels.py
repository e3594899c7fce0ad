"""Hot per-pixel kernels: bilinear gather (value + exact derivatives) and
bilinear scatter-add.

Two interchangeable lanes:

* numba ``@njit`` scalar loops (default), compiled once per process and
  cached on disk;
* vectorized pure-numpy fallbacks, selected by setting the environment
  variable ``IDVO_DISABLE_NUMBA=1`` before import (or automatically when
  numba is not importable).

Both lanes implement identical edge semantics: coordinates are valid on the
closed box [0, W-1] x [0, H-1]; invalid samples return value 0 and zero
derivatives; the interpolation cell at the far edge is the last interior
cell, so derivatives there are the one-sided slopes of that cell.

``benchmarks/bench_kernels.py`` times the two lanes against each other.
"""

import os

import numpy as np

_DISABLE = os.environ.get("IDVO_DISABLE_NUMBA", "0").lower() in ("1", "true", "yes")

NUMBA_ENABLED = False
if not _DISABLE:
    try:
        from numba import njit

        NUMBA_ENABLED = True
    except ImportError:  # pragma: no cover - numba is a declared dependency
        NUMBA_ENABLED = False


def _gather_np(img, u, v):
    """Vectorized bilinear gather. u, v are flat float64 arrays."""
    h, w = img.shape
    valid = (u >= 0.0) & (u <= w - 1.0) & (v >= 0.0) & (v <= h - 1.0)
    uc = np.where(valid, u, 0.0)
    vc = np.where(valid, v, 0.0)
    x0 = np.floor(uc).astype(np.int64)
    y0 = np.floor(vc).astype(np.int64)
    # keep the cell fully inside the grid (also handles u == w-1 exactly)
    np.clip(x0, 0, max(w - 2, 0), out=x0)
    np.clip(y0, 0, max(h - 2, 0), out=y0)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = uc - x0
    fy = vc - y0
    p00 = img[y0, x0]
    p01 = img[y0, x1]
    p10 = img[y1, x0]
    p11 = img[y1, x1]
    top = p00 + fx * (p01 - p00)
    bot = p10 + fx * (p11 - p10)
    val = top + fy * (bot - top)
    gx = (1.0 - fy) * (p01 - p00) + fy * (p11 - p10)
    gy = (1.0 - fx) * (p10 - p00) + fx * (p11 - p01)
    val = np.where(valid, val, 0.0)
    gx = np.where(valid, gx, 0.0)
    gy = np.where(valid, gy, 0.0)
    return val, gx, gy, valid


def _scatter_np(grid, u, v, wgt):
    """Vectorized bilinear scatter-add of weights wgt at (u, v) into grid."""
    h, w = grid.shape
    valid = (u >= 0.0) & (u <= w - 1.0) & (v >= 0.0) & (v <= h - 1.0)
    if not valid.any():
        return
    u = u[valid]
    v = v[valid]
    wgt = wgt[valid]
    x0 = np.floor(u).astype(np.int64)
    y0 = np.floor(v).astype(np.int64)
    np.clip(x0, 0, max(w - 2, 0), out=x0)
    np.clip(y0, 0, max(h - 2, 0), out=y0)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = u - x0
    fy = v - y0
    np.add.at(grid, (y0, x0), wgt * (1.0 - fx) * (1.0 - fy))
    np.add.at(grid, (y0, x1), wgt * fx * (1.0 - fy))
    np.add.at(grid, (y1, x0), wgt * (1.0 - fx) * fy)
    np.add.at(grid, (y1, x1), wgt * fx * fy)


if NUMBA_ENABLED:

    @njit(cache=True)
    def _gather_nb(img, u, v, val, gx, gy, valid):  # pragma: no cover - jitted
        h, w = img.shape
        for i in range(u.shape[0]):
            ui = u[i]
            vi = v[i]
            if ui < 0.0 or ui > w - 1.0 or vi < 0.0 or vi > h - 1.0:
                val[i] = 0.0
                gx[i] = 0.0
                gy[i] = 0.0
                valid[i] = False
                continue
            x0 = int(np.floor(ui))
            y0 = int(np.floor(vi))
            if x0 > w - 2:
                x0 = w - 2
            if x0 < 0:
                x0 = 0
            if y0 > h - 2:
                y0 = h - 2
            if y0 < 0:
                y0 = 0
            x1 = x0 + 1 if x0 + 1 <= w - 1 else w - 1
            y1 = y0 + 1 if y0 + 1 <= h - 1 else h - 1
            fx = ui - x0
            fy = vi - y0
            p00 = img[y0, x0]
            p01 = img[y0, x1]
            p10 = img[y1, x0]
            p11 = img[y1, x1]
            top = p00 + fx * (p01 - p00)
            bot = p10 + fx * (p11 - p10)
            val[i] = top + fy * (bot - top)
            gx[i] = (1.0 - fy) * (p01 - p00) + fy * (p11 - p10)
            gy[i] = (1.0 - fx) * (p10 - p00) + fx * (p11 - p01)
            valid[i] = True

    @njit(cache=True)
    def _scatter_nb(grid, u, v, wgt):  # pragma: no cover - jitted
        h, w = grid.shape
        for i in range(u.shape[0]):
            ui = u[i]
            vi = v[i]
            if ui < 0.0 or ui > w - 1.0 or vi < 0.0 or vi > h - 1.0:
                continue
            x0 = int(np.floor(ui))
            y0 = int(np.floor(vi))
            if x0 > w - 2:
                x0 = w - 2
            if x0 < 0:
                x0 = 0
            if y0 > h - 2:
                y0 = h - 2
            if y0 < 0:
                y0 = 0
            x1 = x0 + 1 if x0 + 1 <= w - 1 else w - 1
            y1 = y0 + 1 if y0 + 1 <= h - 1 else h - 1
            fx = ui - x0
            fy = vi - y0
            g = wgt[i]
            grid[y0, x0] += g * (1.0 - fx) * (1.0 - fy)
            grid[y0, x1] += g * fx * (1.0 - fy)
            grid[y1, x0] += g * (1.0 - fx) * fy
            grid[y1, x1] += g * fx * fy


def bilinear_gather(img, u, v):
    """Sample img at continuous (u, v) with exact piecewise-linear derivatives.

    Returns (value, d/du, d/dv, valid) arrays shaped like u. Out-of-bounds
    samples are flagged invalid and contribute 0.
    """
    img = np.ascontiguousarray(img, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    shape = u.shape
    uf = np.ravel(u)
    vf = np.ravel(v)
    if NUMBA_ENABLED:
        n = uf.size
        val = np.empty(n)
        gx = np.empty(n)
        gy = np.empty(n)
        valid = np.empty(n, dtype=np.bool_)
        _gather_nb(img, np.ascontiguousarray(uf), np.ascontiguousarray(vf), val, gx, gy, valid)
    else:
        val, gx, gy, valid = _gather_np(img, uf, vf)
    return val.reshape(shape), gx.reshape(shape), gy.reshape(shape), valid.reshape(shape)


def bilinear_scatter(shape, u, v, weights):
    """Accumulate weights into a new (H, W) grid via bilinear splatting at (u, v).

    Adjoint of bilinear_gather's value map; out-of-bounds entries are dropped.
    """
    grid = np.zeros(shape, dtype=np.float64)
    uf = np.ascontiguousarray(np.ravel(np.asarray(u, dtype=np.float64)))
    vf = np.ascontiguousarray(np.ravel(np.asarray(v, dtype=np.float64)))
    wf = np.ascontiguousarray(np.ravel(np.asarray(weights, dtype=np.float64)))
    if NUMBA_ENABLED:
        _scatter_nb(grid, uf, vf, wf)
    else:
        _scatter_np(grid, uf, vf, wf)
    return grid


def box_down(img, factor):
    """Non-overlapping box average by an integer factor (dims must divide)."""
    if factor == 1:
        return img
    h, w = img.shape
    return img.reshape(h // factor, factor, w // factor, factor).mean(axis=(1, 3))


def box_up_grad(grad, factor):
    """Adjoint of box_down: spread each coarse gradient uniformly over its block."""
    if factor == 1:
        return grad
    g = np.repeat(np.repeat(grad, factor, axis=0), factor, axis=1)
    return g / float(factor * factor)


def warmup():
    """Force JIT compilation of the numba lane (no-op on the numpy lane)."""
    img = np.zeros((4, 4))
    u = np.array([1.5])
    bilinear_gather(img, u, u)
    bilinear_scatter((4, 4), u, u, u)
