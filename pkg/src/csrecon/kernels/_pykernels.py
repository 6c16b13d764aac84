"""Pure-Python/numpy kernels. Same results as the compiled ``_ckernels`` module."""
import math

import numpy as np

_MASK64 = 0xFFFFFFFFFFFFFFFF
_TWO_PI = 6.283185307179586
_INV_2_53 = 1.0 / 9007199254740992.0


class SplitMix64:
    """splitmix64 stream; ``uniform`` yields doubles in [0, 1) with 53 random bits."""

    __slots__ = ("state",)

    def __init__(self, state):
        self.state = state & _MASK64

    def next_u64(self):
        self.state = (self.state + 0x9E3779B97F4A7C15) & _MASK64
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
        return z ^ (z >> 31)

    def uniform(self):
        return (self.next_u64() >> 11) * _INV_2_53


def bridson(height, width, dmin, state, k=30):
    """Poisson-disc points on ``[0, height) x [0, width)``, returned as an ``(n, 2)`` array."""
    rng = SplitMix64(state)
    uniform = rng.uniform
    cell = dmin / math.sqrt(2.0)
    gh = int(math.ceil(height / cell))
    gw = int(math.ceil(width / cell))
    grid = [-1] * (gh * gw)
    dmin2 = dmin * dmin
    ys, xs, active = [], [], []

    def insert(py, px):
        gy = min(int(py / cell), gh - 1)
        gx = min(int(px / cell), gw - 1)
        grid[gy * gw + gx] = len(ys)
        active.append(len(ys))
        ys.append(py)
        xs.append(px)

    y0 = uniform() * height
    x0 = uniform() * width
    insert(y0, x0)
    while active:
        ai = int(uniform() * len(active))
        p = active[ai]
        py, px = ys[p], xs[p]
        found = False
        for _ in range(k):
            rad = dmin * (1.0 + uniform())
            theta = _TWO_PI * uniform()
            cy = py + rad * math.cos(theta)
            cx = px + rad * math.sin(theta)
            if cy < 0.0 or cy >= height or cx < 0.0 or cx >= width:
                continue
            gy = min(int(cy / cell), gh - 1)
            gx = min(int(cx / cell), gw - 1)
            ok = True
            for yy in range(max(gy - 2, 0), min(gy + 3, gh)):
                row = yy * gw
                for xx in range(max(gx - 2, 0), min(gx + 3, gw)):
                    q = grid[row + xx]
                    if q >= 0:
                        dy = ys[q] - cy
                        dx = xs[q] - cx
                        if dy * dy + dx * dx < dmin2:
                            ok = False
                            break
                if not ok:
                    break
            if ok:
                insert(cy, cx)
                found = True
                break
        if not found:
            active[ai] = active[-1]
            active.pop()
    return np.column_stack([np.asarray(ys, dtype=np.float64), np.asarray(xs, dtype=np.float64)]).reshape(-1, 2)


def im2col3x3(x):
    """``[B, C, H, W]`` -> ``[C*9, B*H*W]`` patch matrix for a zero-padded 3x3 correlation."""
    b, c, h, w = x.shape
    xp = np.zeros((b, c, h + 2, w + 2), dtype=x.dtype)
    xp[:, :, 1:-1, 1:-1] = x
    cols = np.empty((c, 9, b, h, w), dtype=x.dtype)
    for ky in range(3):
        for kx in range(3):
            cols[:, ky * 3 + kx] = xp[:, :, ky : ky + h, kx : kx + w].transpose(1, 0, 2, 3)
    return cols.reshape(c * 9, b * h * w)


def col2im3x3(cols, shape):
    """Adjoint of :func:`im2col3x3`."""
    b, c, h, w = shape
    cols = cols.reshape(c, 9, b, h, w)
    xp = np.zeros((b, c, h + 2, w + 2), dtype=cols.dtype)
    for ky in range(3):
        for kx in range(3):
            xp[:, :, ky : ky + h, kx : kx + w] += cols[:, ky * 3 + kx].transpose(1, 0, 2, 3)
    return np.ascontiguousarray(xp[:, :, 1:-1, 1:-1])


def _windows(x):
    b, c, h, w = x.shape
    return x.reshape(b, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, h // 2, w // 2, 4)


def maxpool2x2(x):
    """2x2/stride-2 max pool. Returns ``(out, idx)``; idx is the first argmax in raster order."""
    win = _windows(x)
    idx = win.argmax(axis=-1).astype(np.uint8)
    out = np.take_along_axis(win, idx[..., None].astype(np.intp), axis=-1)[..., 0]
    return np.ascontiguousarray(out), idx


def maxpool2x2_backward(grad, idx):
    b, c, h2, w2 = grad.shape
    win = np.zeros((b, c, h2, w2, 4), dtype=grad.dtype)
    np.put_along_axis(win, idx[..., None].astype(np.intp), grad[..., None], axis=-1)
    out = win.reshape(b, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, 2 * h2, 2 * w2)
    return np.ascontiguousarray(out)
