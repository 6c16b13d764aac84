"""Dual-domain cascades with hard data consistency, and the SC / MC reconstruction drivers.

Inside the graph, k-space is packed real ``[rows, 2C, Ny, Nz]``:

* MC: one row per slice, ``C = Nc`` (all coils in one network pass);
* SC: one row per (slice, coil), ``C = 1`` (coils processed independently by
  one shared network).
"""
import configparser
import os
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .data import COMBINED, ImageVolume, KSpaceVolume
from .errors import ParameterError, ShapeError
from .network import DEFAULT_WIDTHS, DeepCascadeBlock, UNet, check_manifest, read_tensors, write_tensors
from .sampling import SamplingMask
from .transform import channels_to_complex, complex_to_channels, ifft2c, sum_of_squares

SC = "SC"
MC = "MC"
UNET = "unet"
DEEP_CASCADE = "deepcascade"
MODEL_SPECS = ("II", "KK", "IK", "KI", "IIII", "IKIK", "deepcascade")
DEEP_CASCADE_SUBNETS = 6


@dataclass(frozen=True)
class CascadeSpec:
    domains: str
    kind: str = UNET
    config: str = MC
    nc: int = 1

    def __post_init__(self):
        if not self.domains or set(self.domains) - {"I", "K"}:
            raise ParameterError(f"domain sequence must be a non-empty string over {{I, K}}, got {self.domains!r}")
        if self.kind not in (UNET, DEEP_CASCADE):
            raise ParameterError(f"unknown block kind {self.kind!r}")
        if self.config not in (SC, MC):
            raise ParameterError(f"configuration must be SC or MC, got {self.config!r}")
        if self.nc < 1:
            raise ParameterError("need at least one coil")

    @property
    def c_in(self):
        return 2 if self.config == SC else 2 * self.nc

    @property
    def name(self):
        return DEEP_CASCADE if self.kind == DEEP_CASCADE else self.domains


def parse_spec(text, config=MC, nc=1):
    """``"IK"``, ``"IKIK"``, ... or ``"deepcascade"`` -> :class:`CascadeSpec`."""
    text = text.strip()
    if text.lower() in (DEEP_CASCADE, "deep_cascade", "deep-cascade"):
        return CascadeSpec("I" * DEEP_CASCADE_SUBNETS, DEEP_CASCADE, config.upper(), nc)
    return CascadeSpec(text.upper(), UNET, config.upper(), nc)


class CascadeModel:
    def __init__(self, spec, blocks, seed=0):
        if len(blocks) != len(spec.domains):
            raise ParameterError(f"{len(blocks)} blocks for a {len(spec.domains)}-letter domain sequence")
        if any(b.c_in != spec.c_in for b in blocks):
            raise ParameterError("all blocks must share the configuration's input channel count")
        self.spec = spec
        self.blocks = list(blocks)
        self.seed = seed

    @property
    def dtype(self):
        return self.blocks[0].dtype

    @property
    def needs_multiple_of_8(self):
        return self.spec.kind == UNET

    def parameters(self):
        out = {}
        for i, block in enumerate(self.blocks):
            for name, t in block.parameters().items():
                out[f"block{i}.{name}"] = t
        return out

    def n_params(self):
        return sum(b.n_params() for b in self.blocks)

    def zero_(self):
        for b in self.blocks:
            b.zero_()
        return self

    def state_dict(self):
        return {k: t.data.copy() for k, t in self.parameters().items()}

    def load_state_dict(self, state):
        params = self.parameters()
        check_manifest(params, state)
        for k, t in params.items():
            t.data[...] = state[k]

    def copy(self):
        twin = build_model(self.spec, seed=self.seed, dtype=self.dtype, **self.width_kwargs())
        twin.load_state_dict(self.state_dict())
        return twin

    def width_kwargs(self):
        b = self.blocks[0]
        return {"widths": b.widths} if isinstance(b, UNet) else {"width": b.width}

    def __call__(self, x_u, mask):
        return cascade_forward(self, x_u, mask)


def build_model(spec, seed=0, widths=None, base_width=None, width=64, dtype=np.float32):
    """Instantiate one block per domain letter; block ``l`` is seeded from ``(seed, l)``."""
    if isinstance(spec, str):
        spec = parse_spec(spec)
    blocks = []
    for i in range(len(spec.domains)):
        block_seed = int(np.random.SeedSequence([int(seed), i]).generate_state(1)[0])
        if spec.kind == DEEP_CASCADE:
            blocks.append(DeepCascadeBlock(spec.c_in, width=width, seed=block_seed, dtype=dtype))
        elif widths is not None:
            blocks.append(UNet(spec.c_in, widths, block_seed, dtype))
        elif base_width is not None:
            blocks.append(UNet.from_base_width(spec.c_in, base_width, block_seed, dtype))
        else:
            blocks.append(UNet(spec.c_in, DEFAULT_WIDTHS, block_seed, dtype))
    return CascadeModel(spec, blocks, seed)


def build_deep_cascade(c_in, n_subnets=DEEP_CASCADE_SUBNETS, seed=0, width=64, config=MC, dtype=np.float32):
    """Image-domain cascade of flat CNN blocks with data consistency after each."""
    if c_in < 2 or c_in % 2:
        raise ParameterError(f"input channel count must be even and >= 2, got {c_in}")
    if config == SC and c_in != 2:
        raise ParameterError("SC configuration has two input channels")
    nc = 1 if config == SC else c_in // 2
    spec = CascadeSpec("I" * n_subnets, DEEP_CASCADE, config, nc)
    return build_model(spec, seed=seed, width=width, dtype=dtype)


# --- packing -------------------------------------------------------------------

def pack(kspace, config):
    """Complex ``[S, Nc, Ny, Nz]`` -> packed real rows for the given configuration."""
    s, nc, ny, nz = kspace.shape
    if config == SC:
        kspace = kspace.reshape(s * nc, 1, ny, nz)
    return complex_to_channels(kspace)


def unpack(packed, config, nc):
    z = channels_to_complex(packed)
    if config == SC:
        rows, _, ny, nz = z.shape
        z = z.reshape(rows // nc, nc, ny, nz)
    return z


def keep_weights(mask, n_slices, nc, config, dtype):
    """``1 - mask`` broadcastable over packed rows. ``mask`` is ``[Ny, Nz]`` or per-slice ``[S, Ny, Nz]``."""
    grid = mask.grid if isinstance(mask, SamplingMask) else np.asarray(mask)
    keep = (~grid.astype(bool)).astype(dtype)
    if keep.ndim == 2:
        return keep[None, None]
    if keep.shape[0] != n_slices:
        raise ShapeError(f"{keep.shape[0]} per-slice masks for {n_slices} slices")
    if config == SC:
        keep = np.repeat(keep, nc, axis=0)
    return keep[:, None]


def _pad_amounts(n):
    target = -(-n // 8) * 8
    before = target // 2 - n // 2  # keeps the zero-frequency index at the centre
    return before, target - n - before


def _pad_kspace(arr, ny, nz):
    (a, b), (c, d) = _pad_amounts(ny), _pad_amounts(nz)
    if not (a or b or c or d):
        return arr, None
    pad = [(0, 0)] * (arr.ndim - 2) + [(a, b), (c, d)]
    return np.pad(arr, pad), (a, ny, c, nz)


def _crop(arr, window):
    if window is None:
        return arr
    a, ny, c, nz = window
    return arr[..., a : a + ny, c : c + nz]


# --- graph-level blocks -----------------------------------------------------------

def k_block_graph(net, x_in, x_u, keep):
    return ag.data_consistency(net(x_in), x_u, keep)


def i_block_graph(net, x_in, x_u, keep):
    return ag.data_consistency(ag.fft2c(net(ag.ifft2c(x_in))), x_u, keep)


def cascade_graph(model, x_u, keep, x_in=None):
    """Compose the blocks left to right on packed tensors; returns the final tensor."""
    x = ag.Tensor(x_u) if x_in is None else x_in
    for letter, net in zip(model.spec.domains, model.blocks):
        x = (i_block_graph if letter == "I" else k_block_graph)(net, x, x_u, keep)
    return x


# --- array-level API -------------------------------------------------------------

def _kspace_array(x):
    return x.data if isinstance(x, KSpaceVolume) else np.asarray(x)


def _wrap_like(template, data):
    return template.with_data(data.astype(template.data.dtype)) if isinstance(template, KSpaceVolume) else data


def dc_replace(pred, x_u, mask):
    """``pred * (1 - mask) + x_u``."""
    p, u = _kspace_array(pred), _kspace_array(x_u)
    if p.shape != u.shape:
        raise ShapeError(f"prediction {p.shape} and measurements {u.shape} differ")
    grid = mask.grid if isinstance(mask, SamplingMask) else np.asarray(mask)
    if p.shape[-2:] != grid.shape[-2:]:
        raise ShapeError(f"mask {grid.shape} does not match k-space {p.shape}")
    out = p * (~grid.astype(bool)) + u
    return _wrap_like(pred, out)


def _run_blocks(model, x_in, x_u, mask, letters, blocks):
    xin, xu = _kspace_array(x_in), _kspace_array(x_u)
    if xin.shape != xu.shape:
        raise ShapeError(f"input {xin.shape} and measurements {xu.shape} differ")
    s, nc, ny, nz = xu.shape
    spec = model.spec
    if spec.config == MC and nc != spec.nc:
        raise ShapeError(f"MC model expects {spec.nc} coils, data has {nc}")
    grid = mask.grid if isinstance(mask, SamplingMask) else np.asarray(mask)
    if grid.shape[-2:] != (ny, nz):
        raise ShapeError(f"mask {grid.shape} does not match k-space {xu.shape}")
    window = None
    if model.needs_multiple_of_8:
        xin, window = _pad_kspace(xin, ny, nz)
        xu, _ = _pad_kspace(xu, ny, nz)
        grid, _ = _pad_kspace(grid.astype(bool), ny, nz)
    keep = keep_weights(grid, s, nc, spec.config, model.dtype)
    packed_u = pack(xu, spec.config).astype(model.dtype, copy=False)
    x = ag.Tensor(pack(xin, spec.config).astype(model.dtype, copy=False))
    with ag.no_grad():
        for letter, net in zip(letters, blocks):
            x = (i_block_graph if letter == "I" else k_block_graph)(net, x, packed_u, keep)
    out = _crop(unpack(x.data, spec.config, nc), window)
    return _wrap_like(x_u, out)


def k_block(model, index, x_in, x_u, mask):
    """Apply block ``index`` of ``model`` as a k-space block (network + DC)."""
    return _run_blocks(model, x_in, x_u, mask, "K", [model.blocks[index]])


def i_block(model, index, x_in, x_u, mask):
    """Apply block ``index`` of ``model`` as an image block (iFFT, network, FFT, DC)."""
    return _run_blocks(model, x_in, x_u, mask, "I", [model.blocks[index]])


def cascade_forward(model, x_u, mask):
    """Full cascade on complex k-space ``[S, Nc, Ny, Nz]`` (or a volume)."""
    return _run_blocks(model, x_u, x_u, mask, model.spec.domains, model.blocks)


def reconstruct(model, x_u, mask):
    """Cascade, channel-wise inverse FFT, then sum-of-squares coil combination."""
    k = _kspace_array(cascade_forward(model, x_u, mask))
    return ImageVolume(sum_of_squares(ifft2c(k)).astype(np.float32), COMBINED)


def zero_filled(x_u):
    """Baseline reconstruction: SOS of the inverse FFT of the zero-filled k-space."""
    return ImageVolume(sum_of_squares(ifft2c(_kspace_array(x_u))).astype(np.float32), COMBINED)


# --- model manifest ------------------------------------------------------------

def save_model(model, checkpoint_path, manifest_path=None):
    """Write weights (``CSWGT1``) and, optionally, a text manifest that rebuilds the model."""
    spec = model.spec
    meta = {"spec": spec.name, "config": spec.config, "nc": spec.nc, "seed": model.seed}
    meta.update({k: ",".join(map(str, v)) if isinstance(v, tuple) else v for k, v in model.width_kwargs().items()})
    write_tensors(checkpoint_path, model.state_dict(), meta)
    if manifest_path is not None:
        lines = [f"{k} = {v}" for k, v in meta.items()]
        lines += [f"kind = {spec.kind}", f"c_in = {spec.c_in}", f"checkpoint = {checkpoint_path}"]
        with open(manifest_path, "w") as fh:
            fh.write("[model]\n" + "\n".join(lines) + "\n")


def model_from_meta(meta):
    spec = parse_spec(meta["spec"], meta["config"], int(meta["nc"]))
    kwargs = {}
    if "widths" in meta:
        kwargs["widths"] = tuple(int(w) for w in str(meta["widths"]).split(","))
    if "width" in meta:
        kwargs["width"] = int(meta["width"])
    return build_model(spec, seed=int(meta.get("seed", 0)), **kwargs)


def load_model(checkpoint_path):
    meta, tensors = read_tensors(checkpoint_path)
    model = model_from_meta(meta)
    model.load_state_dict(tensors)
    return model


def load_model_manifest(manifest_path):
    cp = configparser.ConfigParser()
    cp.read(manifest_path)
    if "model" not in cp:
        raise ParameterError(f"{manifest_path} has no [model] section")
    meta = dict(cp["model"])
    path = meta["checkpoint"]
    if not os.path.isabs(path) and not os.path.exists(path):
        path = os.path.join(os.path.dirname(os.path.abspath(manifest_path)), os.path.basename(path))
    return load_model(path)
