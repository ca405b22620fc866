"""Pure numpy z-buffer splatting, used when the compiled kernel is absent."""

import numpy as np


def splat_zbuffer(px, py, depth, offsets, height, width):
    """Nearest-point index per pixel (-1 where empty) and its depth.

    Same contract as the compiled kernel: smallest depth wins, ties go to the
    lowest point index.
    """
    n = len(px)
    rows = (py[:, None] + offsets[None, :, 0]).ravel()
    cols = (px[:, None] + offsets[None, :, 1]).ravel()
    idx = np.repeat(np.arange(n, dtype=np.int64), len(offsets))
    inside = (rows >= 0) & (rows < height) & (cols >= 0) & (cols < width)
    rows, cols, idx = rows[inside], cols[inside], idx[inside]
    pix = rows * width + cols
    z = depth[idx]
    order = np.lexsort((idx, z, pix))
    pix_sorted = pix[order]
    first = np.ones(len(order), dtype=bool)
    first[1:] = pix_sorted[1:] != pix_sorted[:-1]
    win = order[first]
    winner = np.full(height * width, -1, dtype=np.int64)
    zbuf = np.full(height * width, np.inf)
    winner[pix[win]] = idx[win]
    zbuf[pix[win]] = z[win]
    return winner.reshape(height, width), zbuf.reshape(height, width)
