"""Image quality metrics: NRMSE, pSNR and pixel-domain VIF."""
import math

import numpy as np
from scipy import ndimage

from .data import ImageVolume
from .errors import DegenerateInputError, ShapeError

VIF_SCALES = 4
VIF_NOISE_VAR = 2.0
VIF_MIN_EXTENT = 32
_EPS = 1e-10


def _pair(recon, ref):
    a = np.asarray(recon.data if isinstance(recon, ImageVolume) else recon, dtype=np.float64)
    b = np.asarray(ref.data if isinstance(ref, ImageVolume) else ref, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"reconstruction {a.shape} and reference {b.shape} differ")
    if a.size == 0:
        raise ShapeError("empty images")
    return a, b


def rmse(recon, ref):
    a, b = _pair(recon, ref)
    return math.sqrt(np.mean((a - b) ** 2))


def nrmse(recon, ref):
    """RMSE divided by the reference dynamic range ``max - min``."""
    a, b = _pair(recon, ref)
    span = b.max() - b.min()
    if span <= 0:
        raise DegenerateInputError("reference image is constant; NRMSE is undefined")
    return math.sqrt(np.mean((a - b) ** 2)) / span


def psnr(recon, ref, peak=None):
    """``20 log10(peak / rmse)`` in dB with ``peak = max(ref)`` by default.

    Identical inputs give ``inf``; aggregation drops those values.
    """
    a, b = _pair(recon, ref)
    err = math.sqrt(np.mean((a - b) ** 2))
    peak = b.max() if peak is None else float(peak)
    if err == 0:
        return math.inf
    if peak <= 0:
        raise DegenerateInputError("reference peak is not positive; pSNR is undefined")
    return 20.0 * math.log10(peak / err)


def gaussian_window(size, sigma):
    """Normalised 2D Gaussian of odd ``size``."""
    r = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(r**2) / (2.0 * sigma * sigma))
    w = np.outer(g, g)
    return w / w.sum()


def _filt(x, win):
    return ndimage.correlate(x, win, mode="reflect")


def _vif_terms(recon, ref, noise_var):
    num = den = 0.0
    dist, img = recon, ref
    for scale in range(1, VIF_SCALES + 1):
        size = 2 ** (VIF_SCALES - scale + 1) + 1
        win = gaussian_window(size, size / 5.0)
        if scale > 1:
            img = _filt(img, win)[::2, ::2]
            dist = _filt(dist, win)[::2, ::2]
        mu1, mu2 = _filt(img, win), _filt(dist, win)
        s1 = np.maximum(_filt(img * img, win) - mu1 * mu1, 0.0)
        s2 = np.maximum(_filt(dist * dist, win) - mu2 * mu2, 0.0)
        s12 = _filt(img * dist, win) - mu1 * mu2

        g = s12 / (s1 + _EPS)
        sv = s2 - g * s12
        flat = s1 < _EPS
        g[flat] = 0.0
        sv[flat] = s2[flat]
        s1 = np.where(flat, 0.0, s1)
        dead = s2 < _EPS
        g[dead] = 0.0
        sv[dead] = 0.0
        neg = g < 0
        sv[neg] = s2[neg]
        g[neg] = 0.0
        sv = np.maximum(sv, _EPS)

        num += np.sum(np.log10(1.0 + g * g * s1 / (sv + noise_var)))
        den += np.sum(np.log10(1.0 + s1 / noise_var))
    return num, den


def vif(recon, ref, noise_var=VIF_NOISE_VAR):
    """Pixel-domain visual information fidelity over four Gaussian scales.

    Both images are scaled so the reference peaks at 255. A 3D input is read
    as a stack of slices whose information terms are pooled. The result is
    clipped to [0, 1].
    """
    a, b = _pair(recon, ref)
    if a.ndim not in (2, 3):
        raise ShapeError(f"VIF needs 2D images or a stack of them, got shape {a.shape}")
    if min(a.shape[-2:]) < VIF_MIN_EXTENT:
        raise ShapeError(f"VIF needs extents >= {VIF_MIN_EXTENT}, got {a.shape[-2:]}")
    peak = b.max()
    if peak <= 0 or b.max() == b.min():
        raise DegenerateInputError("reference has no variance; VIF is undefined")
    scale = 255.0 / peak
    num = den = 0.0
    for x, y in zip(a.reshape(-1, *a.shape[-2:]), b.reshape(-1, *b.shape[-2:])):
        n, d = _vif_terms(x * scale, y * scale, noise_var)
        num += n
        den += d
    if den <= 0:
        raise DegenerateInputError("reference has no variance; VIF is undefined")
    return float(min(max(num / den, 0.0), 1.0))
