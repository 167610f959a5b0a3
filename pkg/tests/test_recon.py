import numpy as np
import pytest

from loctomo.fbp import backproject, filter_tilt_series
from loctomo.geometry import TiltSeries
from loctomo.net import NetConfig, fbp_witness, init_params
from loctomo.recon import ModeMismatchError, evaluate_points, reconstruct_pixel, reconstruct_wavelet

PIX = NetConfig(patch_size=11, features=4, hidden=8, depth=1, pe_dim=16)
WAV = NetConfig(patch_size=11, features=4, hidden=8, depth=1, pe_dim=16, out_dim=8)


@pytest.fixture(scope="module")
def filtered(small_series):
    return filter_tilt_series(small_series)


def test_witness_reconstruction_equals_backprojection(filtered):
    vol = reconstruct_pixel(fbp_witness(PIX), filtered, (12, 10, 8))
    np.testing.assert_allclose(vol.data, backproject(filtered, (12, 10, 8)).data, atol=1e-9)


def test_chunking_does_not_change_results(filtered):
    params = init_params(PIX, 0)
    pts = np.random.default_rng(0).uniform(-5, 5, (37, 3))
    a = evaluate_points(params, filtered, pts, chunk=5)
    b = evaluate_points(params, filtered, pts, chunk=100)
    np.testing.assert_allclose(a, b, rtol=1e-12)


def test_wavelet_mode_uses_one_eighth_of_the_evaluations(filtered):
    sp, sw = {}, {}
    reconstruct_pixel(init_params(PIX, 0), filtered, (8, 8, 8), stats=sp)
    vol = reconstruct_wavelet(init_params(WAV, 0), filtered, (8, 8, 8), stats=sw)
    assert sp["evaluations"] == 8 * sw["evaluations"] == 512
    assert vol.dims == (8, 8, 8)


def test_mode_and_geometry_errors(filtered, small_series):
    with pytest.raises(ModeMismatchError):
        reconstruct_pixel(init_params(WAV, 0), filtered, (4, 4, 4))
    with pytest.raises(ModeMismatchError):
        reconstruct_wavelet(init_params(PIX, 0), filtered, (4, 4, 4))
    with pytest.raises(ValueError, match="even"):
        reconstruct_wavelet(init_params(WAV, 0), filtered, (5, 4, 4))
    with pytest.raises(ValueError, match="filtered"):
        reconstruct_pixel(init_params(PIX, 0), small_series, (4, 4, 4))
    with pytest.raises(ValueError, match="voxel size"):
        reconstruct_pixel(init_params(PIX, 0), filtered, (4, 4, 4), voxel_size=2.0)
    small = NetConfig(patch_size=9, features=2, hidden=2, depth=0, pe_dim=4, out_dim=8)
    with pytest.raises(ValueError, match="patch"):
        reconstruct_wavelet(init_params(small, 0), filtered, (4, 4, 4))
