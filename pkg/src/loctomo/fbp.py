"""Row-wise ramp filtering and filtered backprojection."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import TiltSeries, Volume, _bilinear_gather, detector_to_index

FILTER_WINDOWS = ("ramp", "cosine_ramp")


@dataclass(frozen=True)
class FilterSpec:
    window: str = "cosine_ramp"
    pad_factor: int = 2

    def __post_init__(self):
        if self.window not in FILTER_WINDOWS:
            raise ValueError(f"unknown filter {self.window!r}; expected one of {FILTER_WINDOWS}")
        if int(self.pad_factor) != self.pad_factor or self.pad_factor < 1:
            raise ValueError(f"pad_factor must be an integer >= 1, got {self.pad_factor}")


def filter_response(freqs: np.ndarray, window: str) -> np.ndarray:
    """Frequency response for ``freqs`` in cycles/pixel (Nyquist = 0.5)."""
    f = np.abs(np.asarray(freqs, dtype=np.float64))
    nyquist = 0.5
    if window == "ramp":
        h = f.copy()
    elif window == "cosine_ramp":
        h = f * np.cos(np.pi * f / (2 * nyquist))
    else:
        raise ValueError(f"unknown filter {window!r}")
    h[f > nyquist] = 0.0
    return h


def filter_tilt_series(tilt_series: TiltSeries, spec: FilterSpec = FilterSpec()) -> TiltSeries:
    """Filter every projection row along x with a zero-padded FFT."""
    if tilt_series.filtered:
        raise ValueError("tilt-series is already filtered")
    proj = tilt_series.projections
    width = proj.shape[-1]
    n_fft = int(spec.pad_factor) * width
    h = filter_response(np.fft.rfftfreq(n_fft), spec.window)
    spectrum = np.fft.rfft(proj, n=n_fft, axis=-1)
    out = np.fft.irfft(spectrum * h, n=n_fft, axis=-1)[..., :width]
    return tilt_series.with_projections(out, filtered=True)


def quadrature_weights(angles: np.ndarray, scheme: str = "uniform") -> np.ndarray:
    """Angular weights for the backprojection integral over a span of pi.

    ``uniform`` gives pi/N to every tilt; ``gap`` weights each tilt by half the
    distance to its neighbours, rescaled to sum to pi.
    """
    angles = np.asarray(angles, dtype=np.float64)
    n = angles.size
    if scheme == "uniform":
        return np.full(n, np.pi / n)
    if scheme == "gap":
        if n == 1:
            return np.array([np.pi])
        order = np.argsort(angles, kind="stable")
        a = angles[order]
        ext = np.concatenate([[2 * a[0] - a[1]], a, [2 * a[-1] - a[-2]]])
        w = np.empty(n)
        w[order] = (ext[2:] - ext[:-2]) / 2
        return w * (np.pi / w.sum())
    raise ValueError(f"unknown quadrature scheme {scheme!r}")


def backproject(filtered: TiltSeries, out_dims, voxel_size: float = 1.0,
                weights: np.ndarray | str = "uniform") -> Volume:
    """Sum of weighted filtered projections sampled along each voxel's trajectory."""
    if not filtered.filtered:
        raise ValueError("backproject expects a filtered tilt-series")
    nx, ny, nz = (int(n) for n in out_dims)
    if isinstance(weights, str):
        weights = quadrature_weights(filtered.angles, weights)
    weights = np.asarray(weights, dtype=np.float64)
    proj = filtered.projections
    height, width = proj.shape[1:]
    padded = np.pad(proj, ((0, 0), (1, 1), (1, 1)))
    x = np.arange(nx) - (nx - 1) / 2
    y = np.arange(ny) - (ny - 1) / 2
    z = np.arange(nz) - (nz - 1) / 2
    out = np.zeros((nx, ny, nz))
    for k, theta in enumerate(filtered.angles):
        u = x[:, None] * np.cos(theta) - z[None, :] * np.sin(theta)
        col, row = detector_to_index(u, y, (height, width))
        col = np.broadcast_to(col[:, None, :], out.shape)
        row = np.broadcast_to(row[None, :, None], out.shape)
        out += weights[k] * _bilinear_gather(padded, k, col, row)
    return Volume(out, voxel_size)


def fbp(tilt_series: TiltSeries, spec: FilterSpec = FilterSpec(), out_dims=None,
        voxel_size: float = 1.0, weights: np.ndarray | str = "uniform") -> Volume:
    if out_dims is None:
        w, h = tilt_series.detector.width, tilt_series.detector.height
        out_dims = (w, h, w)
    return backproject(filter_tilt_series(tilt_series, spec), out_dims, voxel_size, weights)
