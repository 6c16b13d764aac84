import numpy as np
import pytest

from csrecon import autograd as ag
from csrecon.cascade import (
    MC,
    MODEL_SPECS,
    SC,
    CascadeSpec,
    build_deep_cascade,
    build_model,
    cascade_forward,
    cascade_graph,
    dc_replace,
    i_block,
    k_block,
    keep_weights,
    load_model,
    load_model_manifest,
    pack,
    parse_spec,
    reconstruct,
    save_model,
    unpack,
    zero_filled,
)
from csrecon.data import synthesize_phantom
from csrecon.errors import ParameterError, ShapeError
from csrecon.network import unet_forward
from csrecon.sampling import poisson_disc_mask
from csrecon.transform import fft2c, ifft2c, sum_of_squares

from conftest import numeric_grad, random_complex, rel_err, tensor_rel_error

TOY = (4, 4, 8, 8)


def toy_model(spec, nc=2, config=MC, seed=0, dtype=np.float32):
    return build_model(parse_spec(spec, config, nc), seed=seed, widths=TOY, width=8, dtype=dtype)


@pytest.fixture(scope="module")
def volume():
    return synthesize_phantom(4, 2, 2, 32, 32)[0]


@pytest.fixture(scope="module")
def mask():
    return poisson_disc_mask(32, 32, 3.0, 4, seed=2)


def undersample(volume, mask):
    return np.where(mask.grid, volume.data, 0).astype(np.complex64)


def test_dc_hand_example():
    pred = np.full((2, 2), 9.0)
    x_u = np.array([[1.0, 0], [0, 4.0]])
    m = np.array([[1, 0], [0, 1]], bool)
    np.testing.assert_array_equal(dc_replace(pred, x_u, m), [[1, 9], [9, 4]])


def test_dc_extremes(rng):
    pred, x_u = random_complex(rng, (3, 8, 8)), random_complex(rng, (3, 8, 8))
    np.testing.assert_array_equal(dc_replace(pred, x_u, np.ones((8, 8), bool)), x_u)
    np.testing.assert_array_equal(dc_replace(pred, np.zeros_like(x_u), np.zeros((8, 8), bool)), pred)
    with pytest.raises(ShapeError):
        dc_replace(pred, x_u[:, :4], np.ones((8, 8), bool))


def test_spec_parsing():
    assert parse_spec("ik", "mc", 3) == CascadeSpec("IK", "unet", MC, 3)
    assert parse_spec("deepcascade").domains == "IIIIII"
    assert CascadeSpec("II", config=SC, nc=12).c_in == 2
    assert CascadeSpec("II", config=MC, nc=12).c_in == 24
    for bad in ("", "IX"):
        with pytest.raises(ParameterError):
            parse_spec(bad)


def test_pack_round_trip(rng):
    k = random_complex(rng, (2, 3, 8, 8), np.complex64)
    for config in (SC, MC):
        packed = pack(k, config)
        assert packed.shape == ((6, 2, 8, 8) if config == SC else (2, 6, 8, 8))
        np.testing.assert_array_equal(unpack(packed, config, 3), k)


@pytest.mark.parametrize("letter", ["K", "I"])
def test_zero_weight_block_is_dc_of_input(volume, mask, letter, rng):
    model = toy_model(letter).zero_()
    x_u = undersample(volume, mask)
    x_in = (volume.data + 0.1 * random_complex(rng, volume.shape)).astype(np.complex64)
    block = k_block if letter == "K" else i_block
    out = block(model, 0, x_in, x_u, mask)
    assert rel_err(out, dc_replace(x_in, x_u, mask)) < 1e-6


@pytest.mark.parametrize("letter", ["K", "I"])
def test_full_mask_block_returns_measurements(volume, letter):
    model = toy_model(letter, seed=3)
    full = np.ones((32, 32), bool)
    out = (k_block if letter == "K" else i_block)(model, 0, volume.data, volume.data, full)
    assert rel_err(out, volume.data) < 1e-6


def test_blocks_match_manual_composition(volume, mask):
    model = toy_model("IK", seed=5)
    x_u = undersample(volume, mask)

    def net(i, arr):
        packed = pack(arr, MC).astype(np.float32)
        return unpack(unet_forward(model.blocks[i], packed).data, MC, 2)

    manual_i = dc_replace(fft2c(net(0, ifft2c(x_u))), x_u, mask)
    assert rel_err(i_block(model, 0, x_u, x_u, mask), manual_i) < 1e-5
    manual_k = dc_replace(net(1, manual_i.astype(np.complex64)), x_u, mask)
    assert rel_err(k_block(model, 1, manual_i.astype(np.complex64), x_u, mask), manual_k) < 1e-5
    assert rel_err(cascade_forward(model, x_u, mask), manual_k) < 1e-5


def test_ikik_is_fourfold_composition(rng):
    vol = synthesize_phantom(8, 1, 2, 32, 32)[0]
    data = vol.data[:, :, 8:24, 8:24].copy()  # 16x16 toy
    m = poisson_disc_mask(32, 32, 3.0, 4, seed=1).grid[8:24, 8:24]
    x_u = np.where(m, data, 0).astype(np.complex64)
    model = toy_model("IKIK", seed=9)
    x = x_u
    for i, letter in enumerate("IKIK"):
        x = (i_block if letter == "I" else k_block)(model, i, x, x_u, m)
    np.testing.assert_array_equal(cascade_forward(model, x_u, m), x)


def test_single_k_zero_weights_unchanged(volume, mask):
    x_u = undersample(volume, mask)
    np.testing.assert_array_equal(cascade_forward(toy_model("K").zero_(), x_u, mask), x_u)


@pytest.mark.parametrize("spec", MODEL_SPECS)
def test_zero_weight_models_reproduce_baseline(volume, mask, spec):
    model = toy_model(spec).zero_()
    x_u = undersample(volume, mask)
    assert rel_err(cascade_forward(model, x_u, mask), x_u) < 1e-6
    assert rel_err(reconstruct(model, x_u, mask).data, zero_filled(x_u).data) < 1e-6


@pytest.mark.parametrize("spec", ["IK", "KI", "KK", "II"])
def test_hard_dc_invariant(volume, mask, spec):
    model = toy_model(spec, seed=11)
    x_u = undersample(volume, mask)
    out = cascade_forward(model, x_u, mask)
    np.testing.assert_array_equal(out[:, :, mask.grid], x_u[:, :, mask.grid])


def test_full_sampling_pins_reconstruction(volume):
    model = toy_model("IKIK", seed=2)
    ones = np.ones((32, 32), bool)
    ref = sum_of_squares(ifft2c(volume.data))
    assert rel_err(reconstruct(model, volume.data, ones).data, ref) < 1e-6


def test_ik_and_ki_differ(volume, mask):
    x_u = undersample(volume, mask)
    a = toy_model("IK", seed=4)
    b = toy_model("KI", seed=4)
    assert not np.allclose(cascade_forward(a, x_u, mask), cascade_forward(b, x_u, mask))


def test_sc_mc_agree_for_one_coil():
    vol = synthesize_phantom(6, 2, 1, 32, 32)[0]
    m = poisson_disc_mask(32, 32, 3.0, 4, seed=0)
    x_u = np.where(m.grid, vol.data, 0).astype(np.complex64)
    sc, mc = toy_model("IK", nc=1, config=SC, seed=1), toy_model("IK", nc=1, config=MC, seed=1)
    np.testing.assert_array_equal(reconstruct(sc, x_u, m).data, reconstruct(mc, x_u, m).data)


def test_sc_channels_are_independent(volume, mask):
    model = toy_model("IK", nc=1, config=SC, seed=1)
    x_u = undersample(volume, mask)
    both = cascade_forward(model, x_u, mask)
    one = cascade_forward(model, x_u[:, :1], mask)
    np.testing.assert_allclose(both[:, :1], one, rtol=1e-6, atol=1e-7)


def test_per_slice_masks(volume):
    masks = np.stack([poisson_disc_mask(32, 32, 3.0, 4, seed=s).grid for s in range(2)])
    x_u = np.where(masks[:, None], volume.data, 0).astype(np.complex64)
    out = cascade_forward(toy_model("IK", seed=3), x_u, masks)
    for s in range(2):
        np.testing.assert_array_equal(out[s][:, masks[s]], x_u[s][:, masks[s]])


def test_non_multiple_of_8_is_padded_and_cropped():
    vol = synthesize_phantom(1, 1, 2, 36, 42)[0]
    m = poisson_disc_mask(36, 42, 3.0, 4, seed=0)
    x_u = np.where(m.grid, vol.data, 0).astype(np.complex64)
    out = cascade_forward(toy_model("IK", seed=1), x_u, m)
    assert out.shape == x_u.shape
    np.testing.assert_array_equal(out[:, :, m.grid], x_u[:, :, m.grid])


def test_mc_coil_mismatch_names_shapes(volume, mask):
    with pytest.raises(ShapeError, match="coils"):
        cascade_forward(toy_model("IK", nc=3), undersample(volume, mask), mask)


def test_deep_cascade_counts():
    model = build_deep_cascade(2)
    assert len(model.blocks) == 6 and model.spec.domains == "IIIIII"
    assert all(len(b.convs) == 6 for b in model.blocks)
    per_block = (9 * 2 * 64 + 64) + 4 * (9 * 64 * 64 + 64) + (64 * 2 + 2)
    assert model.n_params() == 6 * per_block


def test_ik_cascade_gradient_check(rng):
    model = toy_model("IK", nc=2, seed=7, dtype=np.float64)
    model_params = model.parameters()
    for name, t in model_params.items():
        if name.endswith("bias"):
            t.data[...] = rng.standard_normal(t.shape) * 0.05
    x_u = rng.standard_normal((1, 4, 8, 8))
    keep = keep_weights(rng.random((8, 8)) > 0.4, 1, 2, MC, np.float64)
    x_u *= 1 - keep
    target = rng.standard_normal((1, 4, 8, 8))

    def loss():
        return ag.mse(cascade_graph(model, x_u, keep), target)

    loss().backward()

    def f():
        with ag.no_grad():
            return float(loss().data)

    # one representative tensor per block keeps this fast; the acceptance suite checks them all
    for name in ("block0.enc0.conv0.weight", "block0.out.weight", "block1.mid.conv2.bias", "block1.dec0.conv1.weight"):
        t = model_params[name]
        assert tensor_rel_error(t.grad, numeric_grad(f, t.data, 1e-4)) < 1e-4


def test_model_save_load(tmp_path, volume, mask):
    model = toy_model("IKIK", seed=12)
    save_model(model, tmp_path / "m.csw", tmp_path / "m.ini")
    x_u = undersample(volume, mask)
    expect = cascade_forward(model, x_u, mask)
    for loaded in (load_model(tmp_path / "m.csw"), load_model_manifest(tmp_path / "m.ini")):
        assert loaded.spec == model.spec
        np.testing.assert_array_equal(cascade_forward(loaded, x_u, mask), expect)
    manifest = (tmp_path / "m.ini").read_text()
    for key in ("spec = IKIK", "kind = unet", "c_in = 4", "seed = 12", "checkpoint ="):
        assert key in manifest
