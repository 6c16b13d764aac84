"""Poisson-disc undersampling masks in the ky-kz plane with a fully sampled centre disc."""
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import kernels
from .data import KSpaceVolume
from .errors import DegenerateMaskError, FormatError, ParameterError, ShapeError

MASK_MAGIC = b"CSMASK1\n"
FRACTION_TOLERANCE = 0.02
MAX_BISECTION_STEPS = 50
_GOLDEN = 0x9E3779B97F4A7C15
_MIX = 0xD1B54A32D192ED03
_M64 = 0xFFFFFFFFFFFFFFFF


@dataclass(frozen=True, eq=False)
class SamplingMask:
    grid: np.ndarray  # bool [Ny, Nz]
    target_r: float
    center_radius: int
    seed: int
    dmin: Optional[float] = None  # solved Poisson-disc spacing; None for full sampling

    @property
    def shape(self):
        return self.grid.shape

    @property
    def achieved_fraction(self):
        return float(self.grid.sum()) / self.grid.size

    def __eq__(self, other):
        if not isinstance(other, SamplingMask):
            return NotImplemented
        return (
            np.array_equal(self.grid, other.grid)
            and self.target_r == other.target_r
            and self.center_radius == other.center_radius
            and self.seed == other.seed
        )


def kspace_center(ny, nz):
    """Index of the zero-frequency sample under the centred FFT convention."""
    return ny // 2, nz // 2


def center_disc(ny, nz, radius):
    cy, cz = kspace_center(ny, nz)
    yy, zz = np.ogrid[:ny, :nz]
    return (yy - cy) ** 2 + (zz - cz) ** 2 <= radius * radius


def _stream_state(seed, iteration):
    return (int(seed) * _GOLDEN + (iteration + 1) * _MIX) & _M64


def _snap(points, ny, nz):
    grid = np.zeros((ny, nz), dtype=bool)
    if len(points):
        iy = np.clip(np.floor(points[:, 0]).astype(np.intp), 0, ny - 1)
        iz = np.clip(np.floor(points[:, 1]).astype(np.intp), 0, nz - 1)
        grid[iy, iz] = True
    return grid


def poisson_disc_mask(ny, nz, r, center_radius=16, seed=0, candidates=30):
    """Poisson-disc mask whose sampled fraction is within 2% (relative) of ``1/r``.

    The disc spacing is found by bisection; every bisection step draws a fresh,
    seed-derived point set, so the result is a pure function of the arguments.
    """
    if ny < 2 or nz < 2:
        raise ParameterError(f"mask extents must be >= 2, got {ny}x{nz}")
    if not r >= 1:
        raise ParameterError(f"acceleration R must be >= 1, got {r}")
    if center_radius < 0:
        raise ParameterError("center radius must be >= 0")
    total = ny * nz
    if r == 1:
        return SamplingMask(np.ones((ny, nz), dtype=bool), 1.0, center_radius, seed, None)

    center = center_disc(ny, nz, center_radius)
    n_center = int(center.sum())
    target = 1.0 / r
    if n_center >= total * target:
        raise ParameterError(
            f"centre disc of radius {center_radius} holds {n_center} of {total} samples, "
            f"more than the budget for R={r}; feasible R must be below {total / n_center:.4g}"
        )

    lo, hi = 0.5, float(max(ny, nz))
    for step in range(MAX_BISECTION_STEPS):
        dmin = math.sqrt(lo * hi)
        pts = kernels.bridson(float(ny), float(nz), dmin, _stream_state(seed, step), candidates)
        grid = _snap(pts, ny, nz) | center
        frac = grid.sum() / total
        if abs(frac - target) <= FRACTION_TOLERANCE * target:
            return SamplingMask(grid, float(r), center_radius, seed, dmin)
        if frac > target:
            lo = dmin
        else:
            hi = dmin
    raise ParameterError(
        f"could not reach R={r} within {MAX_BISECTION_STEPS} bisection steps "
        f"(last fraction {frac:.4f}, target {target:.4f})"
    )


def _grid_of(mask):
    return mask.grid if isinstance(mask, SamplingMask) else np.asarray(mask).astype(bool)


def apply_mask(kspace, mask):
    """Zero every unsampled position. Accepts a :class:`KSpaceVolume` or an array ``[..., Ny, Nz]``."""
    grid = _grid_of(mask)
    data = kspace.data if isinstance(kspace, KSpaceVolume) else np.asarray(kspace)
    if data.shape[-grid.ndim :] != grid.shape:
        raise ShapeError(f"mask {grid.shape} does not match k-space {data.shape}")
    out = np.where(grid, data, np.zeros((), dtype=data.dtype))
    return kspace.with_data(out) if isinstance(kspace, KSpaceVolume) else out


def achieved_acceleration(mask):
    grid = _grid_of(mask)
    n = int(grid.sum())
    if grid.size == 0 or n == 0:
        raise DegenerateMaskError("mask samples no positions")
    return grid.size / n


def epoch_mask_seed(base_seed, epoch, index):
    """Seed of the training mask for sample ``index`` in ``epoch``."""
    state = np.random.SeedSequence([int(base_seed), 0x7EA1, int(epoch), int(index)]).generate_state(1, np.uint64)
    return int(state[0] >> np.uint64(1))


def fixed_mask_seed(base_seed, index, tag=0x7A11):
    """Seed of a mask that stays fixed across epochs (validation, evaluation)."""
    state = np.random.SeedSequence([int(base_seed), int(tag), int(index)]).generate_state(1, np.uint64)
    return int(state[0] >> np.uint64(1))


# --- mask file -------------------------------------------------------------

def save_mask(path, mask):
    ny, nz = mask.shape
    header = f"{ny} {nz} {mask.target_r!r} {mask.center_radius} {mask.seed}\n".encode("ascii")
    with open(path, "wb") as fh:
        fh.write(MASK_MAGIC)
        fh.write(header)
        fh.write(mask.grid.astype(np.uint8).tobytes())


def load_mask(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if not blob.startswith(MASK_MAGIC):
        raise FormatError("bad magic bytes; not a CSMASK1 file", field="magic")
    end = blob.find(b"\n", len(MASK_MAGIC))
    if end < 0:
        raise FormatError("missing header line", field="header")
    parts = blob[len(MASK_MAGIC) : end].decode("ascii", errors="replace").split()
    if len(parts) != 5:
        raise FormatError(f"header needs 5 fields, got {len(parts)}", field="header")
    try:
        ny, nz = int(parts[0]), int(parts[1])
        r = float(parts[2])
        radius, seed = int(parts[3]), int(parts[4])
    except ValueError as exc:
        raise FormatError(f"unparsable header: {exc}", field="header") from None
    payload = blob[end + 1 :]
    if len(payload) != ny * nz:
        raise FormatError(f"payload is {len(payload)} bytes, expected {ny * nz}", field="payload")
    grid = np.frombuffer(payload, dtype=np.uint8).reshape(ny, nz)
    if grid.max(initial=0) > 1:
        raise FormatError("mask bytes must be 0 or 1", field="payload")
    return SamplingMask(grid.astype(bool), r, radius, seed, None)

