import numpy as np
import pytest
from hypothesis import given, strategies as st

from loctomo.forward import (NoiseModel, PhantomSpec, apply_noise, apply_noise_pair, make_phantom,
                             project, tilt_angles, trilinear)
from loctomo.geometry import DetectorSpec, TiltSeries, Volume, trajectory


def test_tilt_angles_default_scheme():
    a = tilt_angles()
    assert a.size == 41
    assert np.rad2deg(a[0]) == pytest.approx(-60) and np.rad2deg(a[-1]) == pytest.approx(60)


def test_trilinear_reproduces_linear_functions():
    i, j, k = np.meshgrid(*[np.arange(5.0)] * 3, indexing="ij")
    data = 2 * i - j + 0.5 * k
    x, y, z = np.array([1.25, 3.5]), np.array([0.5, 2.75]), np.array([2.0, 0.1])
    np.testing.assert_allclose(trilinear(data, x, y, z), 2 * x - y + 0.5 * z)


def test_ball_chord_length():
    # centred ball of radius 10: the central ray crosses 2R of unit density
    n, R = 40, 10.0
    idx = np.arange(n) - (n - 1) / 2
    X, Y, Z = np.meshgrid(idx, idx, idx, indexing="ij")
    ball = Volume((X ** 2 + Y ** 2 + Z ** 2 <= R ** 2).astype(float))
    proj = project(ball, [0.0], DetectorSpec(n, n), step=0.25).projections[0]
    assert proj[n // 2, n // 2] == pytest.approx(2 * R, abs=1.0)
    assert proj[0, 0] == 0.0


@given(st.floats(-1.4, 1.4))
def test_mass_is_conserved(theta):
    # detector pixels sample a piecewise-polynomial projection, so off-axis
    # tilts conserve mass only up to a small resampling error (about 0.1%)
    i = np.arange(20) - 9.5
    X, Y, Z = np.meshgrid(i, i, i, indexing="ij")
    vol = np.exp(-(X ** 2 + Y ** 2 + Z ** 2) / 8.0)
    proj = project(Volume(vol), [theta], DetectorSpec(40, 20), step=0.5).projections
    assert proj.sum() == pytest.approx(vol.sum(), rel=2e-3)


def test_mass_is_exact_at_zero_tilt():
    vol = np.random.default_rng(0).uniform(0, 1, (8, 8, 8))
    proj = project(Volume(vol), [0.0], DetectorSpec(8, 8), step=1.0).projections
    np.testing.assert_allclose(proj[0].T, vol.sum(axis=2), rtol=1e-12)


def test_point_source_lands_on_its_trajectory():
    n = 32
    vol = np.zeros((n, n, n))
    vol[20, 10, 25] = 1.0
    r0 = np.array([20, 10, 25]) - (n - 1) / 2
    series = project(Volume(vol), tilt_angles(), DetectorSpec(n, n))
    for k, theta in enumerate(series.angles):
        p = trajectory(r0, theta)
        row, col = np.unravel_index(np.argmax(series.projections[k]), (n, n))
        assert abs(col - (p.u + (n - 1) / 2)) <= 1 and abs(row - (p.v + (n - 1) / 2)) <= 1


def test_box_kernel_blurs_but_keeps_mass():
    vol = np.zeros((16, 16, 16))
    vol[8, 8, 8] = 1.0
    point = project(Volume(vol), [0.0], DetectorSpec(16, 16), step=1.0).projections
    boxed = project(Volume(vol), [0.0], DetectorSpec(16, 16, kernel_width=1.0), step=1.0).projections
    assert boxed.sum() == pytest.approx(point.sum(), rel=1e-9)
    assert boxed.max() < point.max()


def test_noise_is_seeded_and_pair_is_independent(small_series):
    model = NoiseModel("gaussian", 2.0, seed=7)
    a = apply_noise(small_series, model)
    b = apply_noise(small_series, model)
    np.testing.assert_array_equal(a.projections, b.projections)
    even, odd = apply_noise_pair(small_series, model)
    n_even = even.projections - small_series.projections
    n_odd = odd.projections - small_series.projections
    assert abs(np.corrcoef(n_even.ravel(), n_odd.ravel())[0, 1]) < 0.05
    assert n_even.std() == pytest.approx(2.0, rel=0.05)


def test_noise_none_keeps_signal(small_series):
    even, odd = apply_noise_pair(small_series, NoiseModel("none"))
    np.testing.assert_array_equal(even.projections, odd.projections)
    np.testing.assert_array_equal(even.projections, small_series.projections)


def test_poisson_noise_mean_and_sign(small_series):
    out = apply_noise(small_series, NoiseModel("poisson", dose=50.0, seed=1))
    assert out.projections.min() >= 0
    assert out.projections.mean() == pytest.approx(small_series.projections.mean(), rel=0.02)
    negative = small_series.with_projections(-small_series.projections - 1)
    with pytest.raises(ValueError):
        apply_noise(negative, NoiseModel("poisson"))


@pytest.mark.parametrize("kind", ["spheres", "shells", "point_grid"])
def test_phantoms_are_deterministic_and_nonnegative(kind):
    spec = PhantomSpec(kind, (32, 32, 32), count=8, seed=4)
    a, b = make_phantom(spec), make_phantom(spec)
    np.testing.assert_array_equal(a.data, b.data)
    assert a.data.min() >= 0 and a.data.max() > 0


def test_point_grid_has_requested_count():
    vol = make_phantom(PhantomSpec("point_grid", (20, 20, 20), count=8))
    assert np.count_nonzero(vol.data) == 8


def test_invalid_specs():
    with pytest.raises(ValueError):
        NoiseModel("salt")
    with pytest.raises(ValueError):
        PhantomSpec("cubes")
    with pytest.raises(ValueError):
        project(Volume(np.zeros((4, 4, 4))), [], DetectorSpec(4, 4))
