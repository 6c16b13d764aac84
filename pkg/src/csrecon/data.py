"""Volumes, synthetic multi-coil data and the ``CSRECON1`` dataset container.

Complex tensors are plain numpy arrays (``complex64`` in memory, interleaved
float32 pairs on disk). A volume's k-space is laid out ``[slice, coil, ky, kz]``.
"""
import os
import struct
import tempfile
from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError, ParameterError, ShapeError, VersionError
from .transform import fft2c, ifft2c, sum_of_squares

MAGIC = b"CSRECON1"
FORMAT_VERSION = 1
SYNTHETIC = "synthetic"
EXTERNAL = "external"
PER_COIL = "per_coil"
COMBINED = "combined"

_HEADER_KEYS = ("version", "ns", "nc", "ny", "nz", "seed", "scale", "provenance")


@dataclass(frozen=True)
class DatasetMeta:
    ns: int
    nc: int
    ny: int
    nz: int
    seed: int = 0
    provenance: str = SYNTHETIC
    scale: float = 1.0

    def __post_init__(self):
        if not self.scale > 0:
            raise ParameterError(f"normalization scale must be > 0, got {self.scale}")
        if self.provenance not in (SYNTHETIC, EXTERNAL):
            raise ParameterError(f"unknown provenance {self.provenance!r}")

    @property
    def shape(self):
        return (self.ns, self.nc, self.ny, self.nz)


@dataclass(frozen=True, eq=False)
class KSpaceVolume:
    data: np.ndarray
    meta: DatasetMeta

    def __post_init__(self):
        if self.data.ndim != 4:
            raise ShapeError(f"k-space volume must be [Ns, Nc, Ny, Nz], got {self.data.shape}")
        ns, nc, ny, nz = self.data.shape
        if ns < 1 or nc < 1 or ny < 16 or nz < 16:
            raise ShapeError(f"volume extents {self.data.shape} below minimum (1, 1, 16, 16)")
        if self.data.shape != self.meta.shape:
            raise ShapeError(f"data shape {self.data.shape} disagrees with meta {self.meta.shape}")
        if not np.iscomplexobj(self.data):
            raise ShapeError("k-space data must be complex")

    @property
    def shape(self):
        return self.data.shape

    def with_data(self, data):
        return KSpaceVolume(data, self.meta)

    def __eq__(self, other):
        if not isinstance(other, KSpaceVolume):
            return NotImplemented
        return (
            self.meta == other.meta
            and self.data.dtype == other.data.dtype
            and np.array_equal(self.data, other.data)
        )


@dataclass(frozen=True, eq=False)
class ImageVolume:
    data: np.ndarray
    kind: str = COMBINED

    def __post_init__(self):
        if self.kind == COMBINED:
            if np.iscomplexobj(self.data) or self.data.ndim != 3:
                raise ShapeError("combined image must be real [Ns, Ny, Nz]")
            if np.any(self.data < 0):
                raise ParameterError("combined image must be nonnegative")
        elif self.kind == PER_COIL:
            if self.data.ndim != 4:
                raise ShapeError("per-coil image must be [Ns, Nc, Ny, Nz]")
        else:
            raise ParameterError(f"unknown image kind {self.kind!r}")


@dataclass(frozen=True, eq=False)
class CoilSensitivities:
    maps: np.ndarray
    smoothness: float
    # analytic bound on |map| change between neighbouring pixels
    max_gradient: float = field(default=0.0)

    def __post_init__(self):
        power = (np.abs(self.maps) ** 2).sum(axis=0)
        if not np.all(power > 0):
            raise ParameterError("coil sensitivities have a dead pixel")


def _normalized_grid(ny, nz):
    y = np.linspace(-1.0, 1.0, ny)
    z = np.linspace(-1.0, 1.0, nz)
    return np.meshgrid(y, z, indexing="ij")


def generate_coil_maps(seed, nc, ny, nz, smoothness=0.6, trivial=False):
    """Smooth complex receive sensitivities: Gaussian-blob magnitude, low-order polynomial phase.

    Blob centres sit on a ring around the field of view. With ``trivial=True``
    and a single coil the map is the constant ``1 + 0j``.
    """
    if nc < 1:
        raise ParameterError(f"need at least one coil, got {nc}")
    if ny < 2 or nz < 2:
        raise ParameterError("coil map extents must be >= 2")
    if smoothness <= 0:
        raise ParameterError("smoothness must be positive")
    if trivial:
        if nc != 1:
            raise ParameterError("the trivial coil map is single-channel")
        return CoilSensitivities(np.ones((1, ny, nz), np.complex128), smoothness, 0.0)

    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xC011]))
    yy, zz = _normalized_grid(ny, nz)
    offset = rng.uniform(0, 2 * np.pi)
    maps = np.empty((nc, ny, nz), np.complex128)
    for c in range(nc):
        angle = offset + 2 * np.pi * c / nc + rng.uniform(-0.2, 0.2)
        radius = rng.uniform(0.9, 1.2)
        cy, cz = radius * np.cos(angle), radius * np.sin(angle)
        mag = np.exp(-((yy - cy) ** 2 + (zz - cz) ** 2) / (2 * smoothness**2))
        a, b, cq, d = rng.uniform(-0.5, 0.5, size=4) * np.pi
        phase = rng.uniform(-np.pi, np.pi) + a * yy + b * zz + cq * yy * zz + d * (yy**2 - zz**2)
        maps[c] = mag * np.exp(1j * phase)
    # steepest slope of exp(-r^2 / 2s^2) is 1 / (s sqrt(e)); one pixel step is 2 / (n - 1)
    step = 2.0 / (min(ny, nz) - 1)
    bound = step / (smoothness * np.sqrt(np.e))
    return CoilSensitivities(maps, smoothness, bound)


# modified Shepp-Logan: intensity, semi-axis a (y), semi-axis b (z), centre y, centre z, angle (deg)
_SHEPP_LOGAN = np.array([
    [1.0, 0.69, 0.92, 0.0, 0.0, 0.0],
    [-0.8, 0.6624, 0.874, 0.0, -0.0184, 0.0],
    [-0.2, 0.11, 0.31, 0.22, 0.0, -18.0],
    [-0.2, 0.16, 0.41, -0.22, 0.0, 18.0],
    [0.1, 0.21, 0.25, 0.0, 0.35, 0.0],
    [0.1, 0.046, 0.046, 0.0, 0.1, 0.0],
    [0.1, 0.046, 0.046, 0.0, -0.1, 0.0],
    [0.1, 0.046, 0.023, -0.08, -0.605, 0.0],
    [0.1, 0.023, 0.023, 0.0, -0.606, 0.0],
    [0.1, 0.023, 0.046, 0.06, -0.605, 0.0],
])


def ellipse_phantom(rng, ny, nz):
    """One randomized Shepp-Logan-style slice, real and nonnegative, float64 ``[ny, nz]``."""
    yy, zz = _normalized_grid(ny, nz)
    table = _SHEPP_LOGAN.copy()
    n = len(table)
    table[1:, 0] *= rng.uniform(0.7, 1.3, size=n - 1)
    table[:, 1:3] *= rng.uniform(0.85, 1.15, size=(n, 2))
    table[2:, 3:5] += rng.uniform(-0.05, 0.05, size=(n - 2, 2))
    table[:, 5] += rng.uniform(-12, 12, size=n)
    extra = rng.integers(2, 6)
    blobs = np.column_stack([
        rng.uniform(-0.15, 0.25, extra),
        rng.uniform(0.03, 0.12, extra),
        rng.uniform(0.03, 0.12, extra),
        rng.uniform(-0.4, 0.4, extra),
        rng.uniform(-0.5, 0.5, extra),
        rng.uniform(0, 180, extra),
    ])
    img = np.zeros((ny, nz))
    for rho, a, b, y0, z0, deg in np.vstack([table, blobs]):
        t = np.deg2rad(deg)
        dy, dz = yy - y0, zz - z0
        u = dy * np.cos(t) + dz * np.sin(t)
        v = -dy * np.sin(t) + dz * np.cos(t)
        img[(u / a) ** 2 + (v / b) ** 2 <= 1.0] += rho
    # smooth intensity shading inside the head keeps the content piecewise-smooth
    c = rng.uniform(-0.15, 0.15, size=3)
    img *= 1.0 + c[0] * yy + c[1] * zz + c[2] * yy * zz
    return np.clip(img, 0.0, None)


def _check_counts(ns, nc, ny, nz):
    if not 1 <= ns:
        raise ParameterError(f"Ns must be >= 1, got {ns}")
    if not 1 <= nc <= 64:
        raise ParameterError(f"Nc must be in [1, 64], got {nc}")
    for name, n in (("Ny", ny), ("Nz", nz)):
        if not 32 <= n <= 512:
            raise ParameterError(f"{name} must be in [32, 512], got {n}")


def synthesize_phantom(seed, ns, nc, ny, nz, trivial_coil=False, smoothness=0.6):
    """Fully sampled multi-coil k-space and its sum-of-squares reference.

    Returns ``(KSpaceVolume, ImageVolume)``. The k-space is divided by the
    maximum of the reference so the reference peaks at 1; the divisor is
    kept in ``meta.scale``.
    """
    _check_counts(ns, nc, ny, nz)
    coils = generate_coil_maps(seed, nc, ny, nz, smoothness=smoothness, trivial=trivial_coil)
    phantom_rng = np.random.default_rng(np.random.SeedSequence([seed, 0xE111]))
    objects = np.stack([ellipse_phantom(phantom_rng, ny, nz) for _ in range(ns)])
    coil_images = objects[:, None] * coils.maps[None]
    reference = sum_of_squares(coil_images)
    scale = float(reference.max())
    if scale <= 0:
        raise ParameterError("phantom is empty")
    kspace = fft2c(coil_images) / scale
    meta = DatasetMeta(ns, nc, ny, nz, seed=seed, provenance=SYNTHETIC, scale=scale)
    volume = KSpaceVolume(kspace.astype(np.complex64), meta)
    return volume, ImageVolume((reference / scale).astype(np.float32), COMBINED)


def reference_image(volume):
    """Sum-of-squares reconstruction of a fully sampled volume."""
    data = volume.data if isinstance(volume, KSpaceVolume) else volume
    return ImageVolume(sum_of_squares(ifft2c(data)).astype(np.float32), COMBINED)


# --- container -------------------------------------------------------------

def _encode_header(meta):
    lines = [
        f"version={FORMAT_VERSION}",
        f"ns={meta.ns}",
        f"nc={meta.nc}",
        f"ny={meta.ny}",
        f"nz={meta.nz}",
        f"seed={meta.seed}",
        f"scale={meta.scale!r}",
        f"provenance={meta.provenance}",
    ]
    return ("\n".join(lines) + "\n").encode("utf-8")


def save_dataset(path, volume):
    """Write ``volume`` atomically; the target is replaced only once fully written."""
    header = _encode_header(volume.meta)
    payload = np.ascontiguousarray(volume.data, dtype="<c8").tobytes()
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".csrecon-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<I", len(header)))
            fh.write(header)
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _parse_header(raw):
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise FormatError("header is not valid UTF-8", field="header") from exc
    fields = {}
    for line in text.splitlines():
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise FormatError(f"malformed header line {line!r}", field="header")
        fields[key.strip()] = value.strip()
    for key in _HEADER_KEYS:
        if key not in fields:
            raise FormatError(f"header is missing {key!r}", field=key)
    try:
        version = int(fields["version"])
    except ValueError:
        raise FormatError("version is not an integer", field="version") from None
    if version != FORMAT_VERSION:
        raise VersionError(
            f"unsupported container version {version} (expected {FORMAT_VERSION})", field="version"
        )
    values = {}
    for key in ("ns", "nc", "ny", "nz", "seed"):
        try:
            values[key] = int(fields[key])
        except ValueError:
            raise FormatError(f"{key} is not an integer: {fields[key]!r}", field=key) from None
    try:
        values["scale"] = float(fields["scale"])
    except ValueError:
        raise FormatError(f"scale is not a number: {fields['scale']!r}", field="scale") from None
    values["provenance"] = fields["provenance"]
    try:
        return DatasetMeta(**values)
    except ParameterError as exc:
        raise FormatError(str(exc), field="scale" if "scale" in str(exc) else "provenance") from exc


def load_dataset(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[: len(MAGIC)] != MAGIC:
        raise FormatError("bad magic bytes; not a CSRECON1 container", field="magic")
    pos = len(MAGIC)
    if len(blob) < pos + 4:
        raise FormatError("file ends inside the header length", field="header_length")
    (hlen,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    if len(blob) < pos + hlen:
        raise FormatError("file ends inside the header", field="header_length")
    meta = _parse_header(blob[pos : pos + hlen])
    pos += hlen
    expected = meta.ns * meta.nc * meta.ny * meta.nz * 8
    if len(blob) - pos != expected:
        raise FormatError(
            f"payload is {len(blob) - pos} bytes, header implies {expected}", field="payload"
        )
    data = np.frombuffer(blob, dtype="<c8", offset=pos).reshape(meta.shape).astype(np.complex64)
    try:
        return KSpaceVolume(data, meta)
    except ShapeError as exc:
        raise FormatError(str(exc), field="ny") from exc
