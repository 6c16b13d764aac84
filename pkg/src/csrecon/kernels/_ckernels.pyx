# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled kernels; semantics mirror ``_pykernels`` exactly."""
import numpy as np
cimport numpy as cnp
from cython cimport floating
from libc.math cimport sqrt, ceil, cos, sin
from libc.stdint cimport uint64_t, uint8_t

cnp.import_array()

cdef double _TWO_PI = 6.283185307179586
cdef double _INV_2_53 = 1.0 / 9007199254740992.0


cdef inline uint64_t _next_u64(uint64_t* state) noexcept nogil:
    state[0] += <uint64_t>0x9E3779B97F4A7C15ULL
    cdef uint64_t z = state[0]
    z = (z ^ (z >> 30)) * <uint64_t>0xBF58476D1CE4E5B9ULL
    z = (z ^ (z >> 27)) * <uint64_t>0x94D049BB133111EBULL
    return z ^ (z >> 31)


cdef inline double _uniform(uint64_t* state) noexcept nogil:
    return <double>(_next_u64(state) >> 11) * _INV_2_53


def bridson(double height, double width, double dmin, state, int k=30):
    cdef uint64_t st = <uint64_t>(int(state) & 0xFFFFFFFFFFFFFFFF)
    cdef double cell = dmin / sqrt(2.0)
    cdef Py_ssize_t gh = <Py_ssize_t>ceil(height / cell)
    cdef Py_ssize_t gw = <Py_ssize_t>ceil(width / cell)
    cdef Py_ssize_t cap = gh * gw
    cdef cnp.ndarray[cnp.int64_t, ndim=1] grid_arr = np.full(cap, -1, dtype=np.int64)
    cdef cnp.ndarray[cnp.float64_t, ndim=2] pts_arr = np.empty((cap, 2), dtype=np.float64)
    cdef cnp.ndarray[cnp.int64_t, ndim=1] active_arr = np.empty(cap, dtype=np.int64)
    cdef long long[::1] grid = grid_arr
    cdef double[:, ::1] pts = pts_arr
    cdef long long[::1] active = active_arr
    cdef double dmin2 = dmin * dmin
    cdef Py_ssize_t n = 0, n_active = 0, ai, p, j, gy, gx, yy, xx, y_lo, y_hi, x_lo, x_hi
    cdef long long q
    cdef double py, px, rad, theta, cy, cx, dy, dx
    cdef bint ok, found

    with nogil:
        cy = _uniform(&st) * height
        cx = _uniform(&st) * width
        gy = <Py_ssize_t>(cy / cell)
        gx = <Py_ssize_t>(cx / cell)
        if gy > gh - 1:
            gy = gh - 1
        if gx > gw - 1:
            gx = gw - 1
        grid[gy * gw + gx] = n
        active[n_active] = n
        n_active += 1
        pts[n, 0] = cy
        pts[n, 1] = cx
        n += 1
        while n_active > 0:
            ai = <Py_ssize_t>(_uniform(&st) * n_active)
            p = active[ai]
            py = pts[p, 0]
            px = pts[p, 1]
            found = False
            for j in range(k):
                rad = dmin * (1.0 + _uniform(&st))
                theta = _TWO_PI * _uniform(&st)
                cy = py + rad * cos(theta)
                cx = px + rad * sin(theta)
                if cy < 0.0 or cy >= height or cx < 0.0 or cx >= width:
                    continue
                gy = <Py_ssize_t>(cy / cell)
                gx = <Py_ssize_t>(cx / cell)
                if gy > gh - 1:
                    gy = gh - 1
                if gx > gw - 1:
                    gx = gw - 1
                ok = True
                y_lo = gy - 2 if gy >= 2 else 0
                y_hi = gy + 3 if gy + 3 < gh else gh
                x_lo = gx - 2 if gx >= 2 else 0
                x_hi = gx + 3 if gx + 3 < gw else gw
                yy = y_lo
                while yy < y_hi and ok:
                    xx = x_lo
                    while xx < x_hi:
                        q = grid[yy * gw + xx]
                        if q >= 0:
                            dy = pts[q, 0] - cy
                            dx = pts[q, 1] - cx
                            if dy * dy + dx * dx < dmin2:
                                ok = False
                                break
                        xx += 1
                    yy += 1
                if ok:
                    grid[gy * gw + gx] = n
                    active[n_active] = n
                    n_active += 1
                    pts[n, 0] = cy
                    pts[n, 1] = cx
                    n += 1
                    found = True
                    break
            if not found:
                active[ai] = active[n_active - 1]
                n_active -= 1
    return pts_arr[:n].copy()


def _im2col_impl(const floating[:, :, :, ::1] x, floating[:, ::1] cols):
    cdef Py_ssize_t B = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t HW = H * W
    cdef Py_ssize_t b, c, ky, kx, y, xw, sy, row, x_lo, x_hi
    cdef floating* dst
    cdef const floating* src
    with nogil:
        for c in range(C):
            for ky in range(3):
                for kx in range(3):
                    row = c * 9 + ky * 3 + kx
                    x_lo = 1 if kx == 0 else 0
                    x_hi = W - 1 if kx == 2 else W
                    for b in range(B):
                        for y in range(H):
                            dst = &cols[row, b * HW + y * W]
                            sy = y + ky - 1
                            if sy < 0 or sy >= H:
                                for xw in range(W):
                                    dst[xw] = 0
                                continue
                            src = &x[b, c, sy, 0]
                            if x_lo:
                                dst[0] = 0
                            if x_hi < W:
                                dst[W - 1] = 0
                            for xw in range(x_lo, x_hi):
                                dst[xw] = src[xw + kx - 1]


def _col2im_impl(const floating[:, ::1] cols, floating[:, :, :, ::1] out):
    cdef Py_ssize_t B = out.shape[0], C = out.shape[1], H = out.shape[2], W = out.shape[3]
    cdef Py_ssize_t HW = H * W
    cdef Py_ssize_t b, c, ky, kx, y, xw, sy, sx, row, base, x_lo, x_hi
    with nogil:
        for c in range(C):
            for ky in range(3):
                for kx in range(3):
                    row = c * 9 + ky * 3 + kx
                    x_lo = 1 if kx == 0 else 0
                    x_hi = W - 1 if kx == 2 else W
                    for b in range(B):
                        base = b * HW
                        for y in range(H):
                            sy = y + ky - 1
                            if sy < 0 or sy >= H:
                                continue
                            for xw in range(x_lo, x_hi):
                                sx = xw + kx - 1
                                out[b, c, sy, sx] += cols[row, base + y * W + xw]


def im2col3x3(x):
    b, c, h, w = x.shape
    cols = np.empty((c * 9, b * h * w), dtype=x.dtype)
    _im2col_impl(np.ascontiguousarray(x), cols)
    return cols


def col2im3x3(cols, shape):
    out = np.zeros(shape, dtype=cols.dtype)
    _col2im_impl(np.ascontiguousarray(cols), out)
    return out


def _maxpool_impl(const floating[:, :, :, :] x, floating[:, :, :, ::1] out, uint8_t[:, :, :, ::1] idx):
    cdef Py_ssize_t B = out.shape[0], C = out.shape[1], H2 = out.shape[2], W2 = out.shape[3]
    cdef Py_ssize_t b, c, i, j
    cdef floating best, v
    cdef uint8_t arg
    with nogil:
        for b in range(B):
            for c in range(C):
                for i in range(H2):
                    for j in range(W2):
                        best = x[b, c, 2 * i, 2 * j]
                        arg = 0
                        v = x[b, c, 2 * i, 2 * j + 1]
                        if v > best:
                            best = v
                            arg = 1
                        v = x[b, c, 2 * i + 1, 2 * j]
                        if v > best:
                            best = v
                            arg = 2
                        v = x[b, c, 2 * i + 1, 2 * j + 1]
                        if v > best:
                            best = v
                            arg = 3
                        out[b, c, i, j] = best
                        idx[b, c, i, j] = arg


def _maxpool_back_impl(const floating[:, :, :, :] g, const uint8_t[:, :, :, :] idx, floating[:, :, :, ::1] out):
    cdef Py_ssize_t B = g.shape[0], C = g.shape[1], H2 = g.shape[2], W2 = g.shape[3]
    cdef Py_ssize_t b, c, i, j
    cdef uint8_t a
    with nogil:
        for b in range(B):
            for c in range(C):
                for i in range(H2):
                    for j in range(W2):
                        a = idx[b, c, i, j]
                        out[b, c, 2 * i + (a >> 1), 2 * j + (a & 1)] = g[b, c, i, j]


def maxpool2x2(x):
    b, c, h, w = x.shape
    out = np.empty((b, c, h // 2, w // 2), dtype=x.dtype)
    idx = np.empty((b, c, h // 2, w // 2), dtype=np.uint8)
    _maxpool_impl(x, out, idx)
    return out, idx


def maxpool2x2_backward(grad, idx):
    b, c, h2, w2 = grad.shape
    out = np.zeros((b, c, 2 * h2, 2 * w2), dtype=grad.dtype)
    _maxpool_back_impl(grad, idx, out)
    return out
