"""Independent reference computations used by the tests."""
import itertools

import numpy as np


def dirichlet_dense(x, keep):
    """Direct solve of the discrete Laplace equation on dropped pixels.

    Observed pixels are Dirichlet data; image borders are reflecting, so a
    pixel's equation uses only its in-image 4-neighbours.
    """
    h, w = keep.shape
    dropped = np.argwhere(~keep)
    index = {tuple(p): k for k, p in enumerate(dropped)}
    n = len(dropped)
    a = np.zeros((n, n))
    rhs = np.zeros((x.shape[0], n))
    for k, (i, j) in enumerate(dropped):
        for di, dj in ((-1, 0), (1, 0), (0, -1), (0, 1)):
            ni, nj = i + di, j + dj
            if not (0 <= ni < h and 0 <= nj < w):
                continue
            a[k, k] += 1.0
            if keep[ni, nj]:
                rhs[:, k] += x[:, ni, nj]
            else:
                a[k, index[(ni, nj)]] -= 1.0
    out = np.array(x, dtype=np.float64, copy=True)
    sol = np.linalg.solve(a, rhs.T).T
    for k, (i, j) in enumerate(dropped):
        out[:, i, j] = sol[:, k]
    return out


def bilinear_reference(a, out_h, out_w):
    """Per-pixel bilinear resize with half-pixel centres, written out longhand."""
    h, w = a.shape
    out = np.empty((out_h, out_w))
    for i in range(out_h):
        sy = max((i + 0.5) * h / out_h - 0.5, 0.0)
        y0 = min(int(sy), h - 1)
        y1 = min(y0 + 1, h - 1)
        fy = sy - y0
        for j in range(out_w):
            sx = max((j + 0.5) * w / out_w - 0.5, 0.0)
            x0 = min(int(sx), w - 1)
            x1 = min(x0 + 1, w - 1)
            fx = sx - x0
            top = (1 - fx) * a[y0, x0] + fx * a[y0, x1]
            bottom = (1 - fx) * a[y1, x0] + fx * a[y1, x1]
            out[i, j] = (1 - fy) * top + fy * bottom
    return out


def all_binary_masks(shape):
    for bits in itertools.product((0.0, 1.0), repeat=int(np.prod(shape))):
        yield np.array(bits).reshape(shape)


def brute_force(objective, shape):
    """(argmin mask, min value, all values) of ``objective`` over every binary mask."""
    masks = list(all_binary_masks(shape))
    values = np.array([objective(m) for m in masks])
    k = int(values.argmin())
    return masks[k], float(values[k]), values
