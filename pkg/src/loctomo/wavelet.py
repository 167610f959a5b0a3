"""Single-level separable 3-D biorthogonal wavelet transform.

Filters are odd-length and symmetric; lowpass outputs live on even samples and
highpass outputs on odd samples. With whole-sample symmetric extension
(``mode="mirror"``) both subband sequences stay symmetric about the signal
ends, which gives perfect reconstruction for even-length signals.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import convolve1d

from .geometry import Volume

BAND_NAMES = tuple("".join(b) for b in itertools.product("LH", repeat=3))  # LLL, LLH, ... HHH


@dataclass(frozen=True)
class WaveletBank:
    family: str
    dec_lo: np.ndarray
    dec_hi: np.ndarray
    rec_lo: np.ndarray
    rec_hi: np.ndarray

    def __post_init__(self):
        for name in ("dec_lo", "dec_hi", "rec_lo", "rec_hi"):
            taps = np.asarray(getattr(self, name), dtype=np.float64)
            if taps.ndim != 1 or taps.size % 2 == 0 or not np.allclose(taps, taps[::-1]):
                raise ValueError(f"{name} must be an odd-length symmetric filter")
            object.__setattr__(self, name, taps)
        rng = np.random.default_rng(12345)
        x = rng.standard_normal((3, 64))
        err = np.abs(_synth_1d(*_analyse_1d(x, self, -1), self, -1) - x).max()
        if err > 1e-10:
            raise ValueError(f"bank {self.family!r} is not perfect-reconstruction (error {err:.2e})")

    @property
    def support_radius(self) -> float:
        """Half-extent of the analysis support around a coarse-site block centre (voxels)."""
        lo = (self.dec_lo.size - 1) // 2
        hi = (self.dec_hi.size - 1) // 2
        # lowpass centred on the even sample, highpass on the odd one
        return max(lo + 0.5, hi + 0.5)

    @property
    def dc_gain(self) -> float:
        return float(self.dec_lo.sum())


def cdf53() -> WaveletBank:
    """LeGall / CDF 5/3 bank, orthonormal-style sqrt(2) scaling."""
    r2 = np.sqrt(2.0)
    return WaveletBank(
        family="cdf53",
        dec_lo=r2 * np.array([-1, 2, 6, 2, -1]) / 8,
        dec_hi=np.array([-1, 2, -1]) / (2 * r2),
        rec_lo=np.array([1, 2, 1]) / (2 * r2),
        rec_hi=r2 * np.array([-1, -2, 6, -2, -1]) / 8,
    )


BANKS = {"cdf53": cdf53}


def get_bank(name: str) -> WaveletBank:
    try:
        return BANKS[name]()
    except KeyError:
        raise ValueError(f"unknown wavelet bank {name!r}; available: {sorted(BANKS)}") from None


def _analyse_1d(x, bank: WaveletBank, axis: int):
    lo = convolve1d(x, bank.dec_lo, axis=axis, mode="mirror")
    hi = convolve1d(x, bank.dec_hi, axis=axis, mode="mirror")
    n = x.shape[axis]
    take = lambda a, start: np.take(a, np.arange(start, n, 2), axis=axis)  # noqa: E731
    return take(lo, 0), take(hi, 1)


def _synth_1d(lo, hi, bank: WaveletBank, axis: int):
    shape = list(lo.shape)
    n = 2 * shape[axis]
    shape[axis] = n
    up_lo = np.zeros(shape)
    up_hi = np.zeros(shape)
    sl_even = [slice(None)] * len(shape)
    sl_odd = [slice(None)] * len(shape)
    sl_even[axis] = slice(0, n, 2)
    sl_odd[axis] = slice(1, n, 2)
    up_lo[tuple(sl_even)] = lo
    up_hi[tuple(sl_odd)] = hi
    return (convolve1d(up_lo, bank.rec_lo, axis=axis, mode="mirror")
            + convolve1d(up_hi, bank.rec_hi, axis=axis, mode="mirror"))


@dataclass(frozen=True)
class SubbandSet:
    """Eight half-size subbands, ``coeffs[band]`` with bands ordered as :data:`BAND_NAMES`.

    Band letters refer to the x, y, z axes in that order. ``parent_dims`` is the
    original grid; odd dimensions were padded by one voxel before analysis.
    """

    coeffs: np.ndarray  # (8, nx/2, ny/2, nz/2)
    parent_dims: tuple[int, int, int]
    voxel_size: float = 1.0

    def __post_init__(self):
        coeffs = np.asarray(self.coeffs, dtype=np.float64)
        if coeffs.ndim != 4 or coeffs.shape[0] != 8:
            raise ValueError(f"subbands must have shape (8, a, b, c), got {coeffs.shape}")
        padded = tuple(n + n % 2 for n in self.parent_dims)
        if tuple(2 * s for s in coeffs.shape[1:]) != padded:
            raise ValueError(f"subband shape {coeffs.shape[1:]} inconsistent with parent {self.parent_dims}")
        object.__setattr__(self, "coeffs", coeffs)

    def band(self, name: str) -> np.ndarray:
        return self.coeffs[BAND_NAMES.index(name)]

    @property
    def coarse_dims(self) -> tuple[int, int, int]:
        return tuple(self.coeffs.shape[1:])


def dwt3(volume: Volume, bank: WaveletBank | None = None) -> SubbandSet:
    bank = bank or cdf53()
    data = volume.data
    pad = [(0, n % 2) for n in data.shape]
    if any(p[1] for p in pad):
        data = np.pad(data, pad, mode="symmetric")
    bands = [data]
    for axis in range(3):
        bands = [part for b in bands for part in _analyse_1d(b, bank, axis)]
    return SubbandSet(np.stack(bands), volume.dims, volume.voxel_size)


def idwt3(subbands: SubbandSet, bank: WaveletBank | None = None) -> Volume:
    bank = bank or cdf53()
    bands = list(subbands.coeffs)
    for axis in (2, 1, 0):
        bands = [_synth_1d(bands[i], bands[i + 1], bank, axis) for i in range(0, len(bands), 2)]
    nx, ny, nz = subbands.parent_dims
    return Volume(bands[0][:nx, :ny, :nz], subbands.voxel_size)


def coarse_site_coordinates(parent_dims) -> np.ndarray:
    """Centred parent-grid coordinates of every coarse site (2x2x2 block centres), C order."""
    dims = np.asarray([n + n % 2 for n in parent_dims])
    half = dims // 2
    grids = np.meshgrid(*[2 * np.arange(h) + 0.5 for h in half], indexing="ij")
    idx = np.stack([g.reshape(-1) for g in grids], axis=1)
    return idx - (np.asarray(parent_dims, dtype=np.float64) - 1) / 2


def wavelet_targets(volume: Volume, bank: WaveletBank | None = None) -> SubbandSet:
    if any(n % 2 for n in volume.dims):
        raise ValueError(f"wavelet targets need even dimensions, got {volume.dims}")
    return dwt3(volume, bank)


def check_containment(bank: WaveletBank, patch_size: int, spacing: float = 1.0) -> None:
    """Reject banks whose analysis support, projected onto the detector, leaves the patch.

    A cube of half-width ``R`` around the site projects to at most ``R * sqrt(2)``
    along u and ``R`` along v; one extra pixel covers the bilinear footprint.
    """
    need = bank.support_radius * np.sqrt(2.0) + 1.0
    have = spacing * (patch_size // 2)
    if need > have:
        raise ValueError(
            f"wavelet {bank.family!r} needs a patch half-width of {need:.2f} px, "
            f"patch size {patch_size} (spacing {spacing}) gives {have:.2f}"
        )
