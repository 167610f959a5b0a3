import numpy as np
import pytest
from hypothesis import given, strategies as st

from loctomo.geometry import Volume
from loctomo.wavelet import (BAND_NAMES, SubbandSet, WaveletBank, cdf53, check_containment,
                             coarse_site_coordinates, dwt3, get_bank, idwt3, wavelet_targets)


@given(st.tuples(*[st.integers(1, 11)] * 3), st.integers(0, 2 ** 32 - 1))
def test_perfect_reconstruction(dims, seed):
    vol = Volume(np.random.default_rng(seed).standard_normal(dims))
    back = idwt3(dwt3(vol))
    assert back.dims == vol.dims
    np.testing.assert_allclose(back.data, vol.data, atol=1e-10)


def test_constant_volume_has_only_lowpass_energy():
    bands = dwt3(Volume(np.full((8, 6, 4), 2.0)))
    np.testing.assert_allclose(bands.band("LLL"), 2.0 * np.sqrt(2) ** 3)
    for name in BAND_NAMES[1:]:
        np.testing.assert_allclose(bands.band(name), 0.0, atol=1e-14)


def test_linear_ramp_has_no_highpass_along_that_axis():
    x = np.arange(16.0)[:, None, None] * np.ones((16, 4, 4))
    bands = dwt3(Volume(x))
    # the 5/3 highpass annihilates linear signals away from the boundary
    np.testing.assert_allclose(bands.band("HLL")[:-1], 0.0, atol=1e-12)


def test_band_order_and_shapes():
    assert BAND_NAMES == ("LLL", "LLH", "LHL", "LHH", "HLL", "HLH", "HHL", "HHH")
    bands = dwt3(Volume(np.zeros((6, 4, 2))))
    assert bands.coeffs.shape == (8, 3, 2, 1)


def test_bank_properties():
    bank = cdf53()
    assert bank.support_radius == 2.5
    assert bank.dc_gain == pytest.approx(np.sqrt(2))
    with pytest.raises(ValueError):
        get_bank("haar3")


def test_non_perfect_reconstruction_bank_is_rejected():
    b = cdf53()
    with pytest.raises(ValueError, match="perfect-reconstruction"):
        WaveletBank("broken", b.dec_lo, b.dec_hi, b.rec_lo * 1.1, b.rec_hi)
    with pytest.raises(ValueError, match="symmetric"):
        WaveletBank("asym", np.array([1.0, 2.0, 3.0]), b.dec_hi, b.rec_lo, b.rec_hi)


def test_containment_rule():
    check_containment(cdf53(), 11)
    check_containment(cdf53(), 21)
    with pytest.raises(ValueError):
        check_containment(cdf53(), 9)
    with pytest.raises(ValueError):
        check_containment(cdf53(), 11, spacing=0.5)


def test_coarse_sites_are_block_centres():
    sites = coarse_site_coordinates((4, 4, 4))
    assert sites.shape == (8, 3)
    np.testing.assert_array_equal(sites[0], [-1.0, -1.0, -1.0])
    np.testing.assert_array_equal(sites[-1], [1.0, 1.0, 1.0])


def test_targets_need_even_dims():
    with pytest.raises(ValueError):
        wavelet_targets(Volume(np.zeros((5, 4, 4))))
    with pytest.raises(ValueError):
        SubbandSet(np.zeros((8, 2, 2, 2)), (6, 4, 4))
