"""Inference drivers: voxel-wise (pixel mode) and coarse-grid wavelet mode."""
from __future__ import annotations

import time

import numpy as np

from .geometry import PatchExtractor, PatchSpec, TiltSeries, Volume, voxel_coordinates
from .net import SliceMlpParams, forward
from .wavelet import SubbandSet, WaveletBank, cdf53, check_containment, coarse_site_coordinates, idwt3


class ModeMismatchError(ValueError):
    pass


def _auto_chunk(n_tilts: int, params: SliceMlpParams, budget_bytes: float = 3e8) -> int:
    P, C = params.config.patch_size, params.config.pe_dim
    per_item = 8 * (5 * n_tilts * (P + 1) ** 2 + 2 * P * P * C + P * params.config.hidden * 4)
    return int(max(16, budget_bytes // per_item))


def evaluate_points(params: SliceMlpParams, tilt_series: TiltSeries, points: np.ndarray,
                    spacing: float = 1.0, chunk: int | None = None) -> np.ndarray:
    """Network output at arbitrary centred coordinates -> ``(M, out_dim)``."""
    if not tilt_series.filtered:
        raise ValueError("reconstruction expects a filtered tilt-series")
    extractor = PatchExtractor(tilt_series.projections, tilt_series.angles,
                               PatchSpec(params.config.patch_size, spacing))
    chunk = chunk or _auto_chunk(tilt_series.n_tilts, params)
    points = np.atleast_2d(points)
    out = np.empty((points.shape[0], params.config.out_dim))
    for start in range(0, points.shape[0], chunk):
        sl = slice(start, start + chunk)
        out[sl] = forward(params, extractor(points[sl]), tilt_series.angles)
    return out


def _check_geometry(tilt_series: TiltSeries, dims, voxel_size):
    if not tilt_series.filtered:
        raise ValueError("reconstruction expects a filtered tilt-series")
    if len(dims) != 3 or min(dims) < 1:
        raise ValueError(f"grid dims must be three positive integers, got {dims}")
    pixel = tilt_series.detector.pixel_size[0]
    if voxel_size is None:
        return pixel
    if not np.isclose(voxel_size, pixel, rtol=1e-6):
        raise ValueError(f"voxel size {voxel_size} differs from detector pixel size {pixel}")
    return voxel_size


def reconstruct_pixel(params: SliceMlpParams, tilt_series: TiltSeries, dims,
                      voxel_size: float | None = None, spacing: float = 1.0,
                      chunk: int | None = None, stats: dict | None = None) -> Volume:
    if params.config.out_dim != 1:
        raise ModeMismatchError(f"pixel mode needs out_dim 1, model has {params.config.out_dim}")
    voxel_size = _check_geometry(tilt_series, dims, voxel_size)
    t0 = time.perf_counter()
    pts = voxel_coordinates(dims)
    vals = evaluate_points(params, tilt_series, pts, spacing, chunk)[:, 0]
    if stats is not None:
        stats.update(mode="pixel", evaluations=int(pts.shape[0]),
                     seconds=time.perf_counter() - t0)
    return Volume(vals.reshape(tuple(dims)), voxel_size)


def reconstruct_wavelet(params: SliceMlpParams, tilt_series: TiltSeries, dims,
                        voxel_size: float | None = None, bank: WaveletBank | None = None,
                        spacing: float = 1.0, chunk: int | None = None,
                        stats: dict | None = None) -> Volume:
    if params.config.out_dim != 8:
        raise ModeMismatchError(f"wavelet mode needs out_dim 8, model has {params.config.out_dim}")
    if any(int(n) % 2 for n in dims):
        raise ValueError(f"wavelet mode needs even grid dims, got {tuple(dims)}")
    voxel_size = _check_geometry(tilt_series, dims, voxel_size)
    bank = bank or cdf53()
    check_containment(bank, params.config.patch_size, spacing)
    t0 = time.perf_counter()
    sites = coarse_site_coordinates(dims)
    coeffs = evaluate_points(params, tilt_series, sites, spacing, chunk)
    coarse = tuple(int(n) // 2 for n in dims)
    bands = SubbandSet(coeffs.T.reshape((8,) + coarse), tuple(int(n) for n in dims), voxel_size)
    vol = idwt3(bands, bank)
    if stats is not None:
        stats.update(mode="wavelet", evaluations=int(sites.shape[0]),
                     seconds=time.perf_counter() - t0)
    return vol
