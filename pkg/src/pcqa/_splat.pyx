# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled z-buffer splatting kernel."""

import numpy as np
cimport numpy as cnp

cnp.import_array()


def splat_zbuffer(const long long[::1] px, const long long[::1] py,
                  const double[::1] depth, const long long[:, ::1] offsets,
                  int height, int width):
    """Nearest-point index per pixel (-1 where empty) and its depth.

    Points are visited in index order and only a strictly smaller depth
    replaces the current winner, so ties go to the lowest index.
    """
    cdef Py_ssize_t n = px.shape[0]
    cdef Py_ssize_t n_off = offsets.shape[0]
    winner_arr = np.full((height, width), -1, dtype=np.int64)
    zbuf_arr = np.full((height, width), np.inf, dtype=np.float64)
    cdef long long[:, ::1] winner = winner_arr
    cdef double[:, ::1] zbuf = zbuf_arr
    cdef Py_ssize_t i, o
    cdef long long r, c
    cdef double z
    with nogil:
        for i in range(n):
            z = depth[i]
            for o in range(n_off):
                r = py[i] + offsets[o, 0]
                c = px[i] + offsets[o, 1]
                if r < 0 or r >= height or c < 0 or c >= width:
                    continue
                if z < zbuf[r, c]:
                    zbuf[r, c] = z
                    winner[r, c] = i
    return winner_arr, zbuf_arr
