"""Centered orthonormal 2-D Fourier operators, real/complex channel packing and
sum-of-squares coil combination.

All operators act on the last two axes, so any leading layout
(``[slices, coils, ky, kz]``, ``[batch, ...]``) is treated channel-wise.
The zero frequency sits at index ``(Ny // 2, Nz // 2)``.
"""
from dataclasses import dataclass

import numpy as np

from .errors import ShapeError

FORWARD = "forward"
INVERSE = "inverse"


def _check_2d(x):
    if x.ndim < 2 or x.shape[-1] < 2 or x.shape[-2] < 2:
        raise ShapeError(f"need extents >= 2 on the two transformed axes, got {x.shape}")


def _result_dtype(x):
    return np.complex64 if x.dtype in (np.float32, np.complex64) else np.complex128


def fft2c(x):
    """Image domain -> k-space, centered and orthonormal."""
    x = np.asarray(x)
    _check_2d(x)
    out = np.fft.ifftshift(x, axes=(-2, -1))
    out = np.fft.fft2(out, norm="ortho")
    return np.fft.fftshift(out, axes=(-2, -1)).astype(_result_dtype(x), copy=False)


def ifft2c(x):
    """k-space -> image domain, centered and orthonormal."""
    x = np.asarray(x)
    _check_2d(x)
    out = np.fft.ifftshift(x, axes=(-2, -1))
    out = np.fft.ifft2(out, norm="ortho")
    return np.fft.fftshift(out, axes=(-2, -1)).astype(_result_dtype(x), copy=False)


@dataclass(frozen=True)
class FourierPlan:
    """A fixed-size transform; calling it applies :func:`fft2c` or :func:`ifft2c`."""

    ny: int
    nz: int
    direction: str = FORWARD

    def __post_init__(self):
        if self.direction not in (FORWARD, INVERSE):
            raise ValueError(f"direction must be {FORWARD!r} or {INVERSE!r}")
        if self.ny < 2 or self.nz < 2:
            raise ShapeError("transform extents must be >= 2")

    @property
    def scale(self):
        return 1.0 / np.sqrt(self.ny * self.nz)

    def inverse(self):
        return FourierPlan(self.ny, self.nz, INVERSE if self.direction == FORWARD else FORWARD)

    def __call__(self, x):
        x = np.asarray(x)
        if x.shape[-2:] != (self.ny, self.nz):
            raise ShapeError(f"plan is {self.ny}x{self.nz}, input is {x.shape[-2:]}")
        return fft2c(x) if self.direction == FORWARD else ifft2c(x)


def complex_to_channels(x):
    """``[..., C, Ny, Nz]`` complex -> ``[..., 2C, Ny, Nz]`` real, Re at 2k and Im at 2k+1."""
    x = np.asarray(x)
    if x.ndim < 3:
        raise ShapeError(f"expected [..., C, Ny, Nz], got {x.shape}")
    real_dtype = np.float32 if x.dtype == np.complex64 else np.float64
    out = np.empty(x.shape[:-3] + (2 * x.shape[-3],) + x.shape[-2:], dtype=real_dtype)
    out[..., 0::2, :, :] = x.real
    out[..., 1::2, :, :] = x.imag
    return out


def channels_to_complex(x):
    """Inverse of :func:`complex_to_channels`."""
    x = np.asarray(x)
    if x.ndim < 3:
        raise ShapeError(f"expected [..., 2C, Ny, Nz], got {x.shape}")
    if x.shape[-3] % 2:
        raise ShapeError(f"channel count {x.shape[-3]} is odd; cannot pair (re, im)")
    cdtype = np.complex64 if x.dtype == np.float32 else np.complex128
    out = np.empty(x.shape[:-3] + (x.shape[-3] // 2,) + x.shape[-2:], dtype=cdtype)
    out.real = x[..., 0::2, :, :]
    out.imag = x[..., 1::2, :, :]
    return out


def sum_of_squares(x, axis=-3):
    """Root sum of squares over the coil axis (default: third from last)."""
    x = np.asarray(x)
    mag2 = x.real**2 + x.imag**2 if np.iscomplexobj(x) else x * x
    return np.sqrt(mag2.sum(axis=axis))
