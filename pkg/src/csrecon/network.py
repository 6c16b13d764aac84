"""U-net and Deep Cascade sub-network blocks, plus the ``CSWGT1`` weight checkpoint.

The default U-net widths (48, 64, 128, 256) with three 3x3 convolutions per
level, nearest-neighbour upsampling followed by skip concatenation, and a
final 1x1 projection give 22 convolutions and 3,000,674 trainable parameters
for a two-channel input.
"""
import struct
from collections import OrderedDict

import numpy as np

from . import autograd as ag
from .errors import FormatError, ParameterError, ShapeError

DEFAULT_WIDTHS = (48, 64, 128, 256)
CONVS_PER_LEVEL = 3
WEIGHT_MAGIC = b"CSWGT1"
WEIGHT_FORMAT_VERSION = 1
# the linear output projection of each residual block starts near zero, so an
# untrained block is close to the identity and a cascade close to zero-filling
FINAL_INIT_GAIN = 0.01


class Conv:
    """One convolution layer: ``[out, in, k, k]`` weight and ``[out]`` bias."""

    def __init__(self, name, c_in, c_out, ksize, rng, dtype, relu_gain=True, gain=1.0):
        fan_in = c_in * ksize * ksize
        limit = gain * np.sqrt((6.0 if relu_gain else 3.0) / fan_in)
        w = rng.uniform(-limit, limit, size=(c_out, c_in, ksize, ksize)).astype(dtype)
        self.name = name
        self.ksize = ksize
        self.weight = ag.Tensor(w, requires_grad=True, name=f"{name}.weight")
        self.bias = ag.Tensor(np.zeros(c_out, dtype=dtype), requires_grad=True, name=f"{name}.bias")

    def __call__(self, x):
        return ag.conv2d(x, self.weight, self.bias)

    def params(self):
        return [(self.weight.name, self.weight), (self.bias.name, self.bias)]


class Block:
    """Shared parameter handling for network blocks."""

    convs = ()

    def parameters(self):
        return OrderedDict(item for conv in self.convs for item in conv.params())

    def n_params(self):
        return sum(t.data.size for t in self.parameters().values())

    def layer_shapes(self):
        """``(k, c_in, c_out)`` for every convolution, in execution order."""
        return [(c.ksize, c.weight.shape[1], c.weight.shape[0]) for c in self.convs]

    def zero_(self):
        for t in self.parameters().values():
            t.data[...] = 0


def _check_c_in(c_in):
    if c_in < 2 or c_in % 2:
        raise ParameterError(f"input channel count must be even and >= 2, got {c_in}")


class UNet(Block):
    """Residual U-net: three pooling levels, output = trunk(x) + x."""

    kind = "unet"

    def __init__(self, c_in, widths=DEFAULT_WIDTHS, seed=0, dtype=np.float32):
        _check_c_in(c_in)
        widths = tuple(int(w) for w in widths)
        if len(widths) != 4:
            raise ParameterError(f"need 4 level widths (3 encoder levels + bottleneck), got {widths}")
        if min(widths) < 1:
            raise ParameterError(f"level widths must be positive, got {widths}")
        self.c_in = c_in
        self.widths = widths
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x0E7]))

        def stack(prefix, c0, width):
            layers = []
            for i in range(CONVS_PER_LEVEL):
                layers.append(Conv(f"{prefix}.conv{i}", c0 if i == 0 else width, width, 3, rng, self.dtype))
            return layers

        self.encoder = []
        c = c_in
        for level in range(3):
            self.encoder.append(stack(f"enc{level}", c, widths[level]))
            c = widths[level]
        self.bottleneck = stack("mid", c, widths[3])
        self.decoder = []
        c = widths[3]
        for level in (2, 1, 0):
            self.decoder.append(stack(f"dec{level}", c + widths[level], widths[level]))
            c = widths[level]
        self.final = Conv("out", c, c_in, 1, rng, self.dtype, relu_gain=False, gain=FINAL_INIT_GAIN)
        self.convs = [conv for level in self.encoder for conv in level]
        self.convs += self.bottleneck
        self.convs += [conv for level in self.decoder for conv in level]
        self.convs.append(self.final)

    @classmethod
    def from_base_width(cls, c_in, base_width, seed=0, dtype=np.float32):
        """Widths ``(w, 2w, 4w, 8w)``."""
        if base_width < 4:
            raise ParameterError(f"base width must be >= 4, got {base_width}")
        return cls(c_in, (base_width, 2 * base_width, 4 * base_width, 8 * base_width), seed, dtype)

    def __call__(self, x):
        h, w = x.shape[2:]
        if h % 8 or w % 8:
            raise ShapeError(
                f"U-net input {h}x{w} is not divisible by 8 (three pooling levels); "
                "zero-pad the spatial extents to a multiple of 8"
            )
        skips = []
        y = x
        for level in self.encoder:
            for conv in level:
                y = ag.relu(conv(y))
            skips.append(y)
            y = ag.maxpool2d(y)
        for conv in self.bottleneck:
            y = ag.relu(conv(y))
        for level, skip in zip(self.decoder, reversed(skips)):
            y = ag.concat([ag.upsample2x(y), skip], axis=1)
            for conv in level:
                y = ag.relu(conv(y))
        return ag.add(self.final(y), x)


class DeepCascadeBlock(Block):
    """Flat residual CNN: ``n_conv`` 3x3 ReLU layers then a linear 1x1 projection."""

    kind = "deepcascade"

    def __init__(self, c_in, width=64, n_conv=5, seed=0, dtype=np.float32):
        _check_c_in(c_in)
        if width < 1 or n_conv < 1:
            raise ParameterError("width and layer count must be positive")
        self.c_in = c_in
        self.width = width
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0xDC]))
        self.hidden = [
            Conv(f"conv{i}", c_in if i == 0 else width, width, 3, rng, self.dtype) for i in range(n_conv)
        ]
        self.final = Conv("out", width, c_in, 1, rng, self.dtype, relu_gain=False, gain=FINAL_INIT_GAIN)
        self.convs = self.hidden + [self.final]

    def __call__(self, x):
        y = x
        for conv in self.hidden:
            y = ag.relu(conv(y))
        return ag.add(self.final(y), x)


def build_unet(c_in, base_width=None, seed=0, widths=None, dtype=np.float32):
    """U-net with explicit ``widths``, ``(w, 2w, 4w, 8w)`` from ``base_width``, or the default widths."""
    if widths is not None:
        return UNet(c_in, widths, seed, dtype)
    if base_width is not None:
        return UNet.from_base_width(c_in, base_width, seed, dtype)
    return UNet(c_in, DEFAULT_WIDTHS, seed, dtype)


def unet_forward(params, x):
    """Apply a U-net to a ``[B, C_in, Ny, Nz]`` array or tensor."""
    if not isinstance(x, ag.Tensor):
        x = ag.Tensor(np.asarray(x, dtype=params.dtype))
    return params(x)


# --- checkpoint --------------------------------------------------------------

def write_tensors(path, tensors, meta=None):
    """Write named arrays as float32 in the given order with a text manifest."""
    lines = [f"format={WEIGHT_FORMAT_VERSION}"]
    for key, value in (meta or {}).items():
        if "\n" in str(value) or " " in str(key):
            raise ParameterError(f"meta entry {key!r} is not a single-line value")
        lines.append(f"{key}={value}")
    for name, arr in tensors.items():
        dims = "x".join(str(d) for d in np.shape(arr)) or "scalar"
        lines.append(f"tensor {name} {dims}")
    header = ("\n".join(lines) + "\n").encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(WEIGHT_MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for arr in tensors.values():
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def read_tensors(path):
    """Inverse of :func:`write_tensors`; returns ``(meta, OrderedDict[name, float32 array])``."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if not blob.startswith(WEIGHT_MAGIC):
        raise FormatError("bad magic bytes; not a CSWGT1 checkpoint", field="magic")
    pos = len(WEIGHT_MAGIC)
    if len(blob) < pos + 4:
        raise FormatError("truncated header length", field="header_length")
    (hlen,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    if len(blob) < pos + hlen:
        raise FormatError("truncated header", field="header_length")
    meta, manifest = {}, []
    for line in blob[pos : pos + hlen].decode("utf-8").splitlines():
        if line.startswith("tensor "):
            parts = line.split()
            if len(parts) != 3:
                raise FormatError(f"bad manifest line {line!r}", field="manifest")
            shape = () if parts[2] == "scalar" else tuple(int(d) for d in parts[2].split("x"))
            manifest.append((parts[1], shape))
        elif line:
            key, _, value = line.partition("=")
            meta[key] = value
    if meta.get("format") != str(WEIGHT_FORMAT_VERSION):
        raise FormatError(f"unsupported checkpoint format {meta.get('format')!r}", field="format")
    pos += hlen
    out = OrderedDict()
    for name, shape in manifest:
        n = int(np.prod(shape, dtype=np.int64))
        end = pos + 4 * n
        if end > len(blob):
            raise FormatError(f"payload truncated inside {name!r}", field="payload")
        out[name] = np.frombuffer(blob, dtype="<f4", count=n, offset=pos).reshape(shape).astype(np.float32)
        pos = end
    if pos != len(blob):
        raise FormatError(f"{len(blob) - pos} trailing bytes after payload", field="payload")
    return meta, out


def check_manifest(expected, found):
    """Raise :class:`ShapeError` naming the first name/shape disagreement."""
    exp = [(k, tuple(np.shape(v))) for k, v in expected.items()]
    got = [(k, tuple(np.shape(v))) for k, v in found.items()]
    if len(exp) != len(got):
        raise ShapeError(f"checkpoint holds {len(got)} tensors, model has {len(exp)}")
    for (en, es), (gn, gs) in zip(exp, got):
        if en != gn:
            raise ShapeError(f"checkpoint tensor {gn!r} where model expects {en!r}")
        if es != gs:
            raise ShapeError(f"tensor {en!r}: checkpoint shape {gs}, model shape {es}")
