"""Fourier shell correlation and scalar comparison metrics."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import Volume

INDEPENDENCE_NOTE = ("self-FSC is only meaningful when both reconstructions come from "
                     "statistically independent noise realisations")


@dataclass(frozen=True)
class FscCurve:
    shell_centers: np.ndarray  # cycles / pixel
    values: np.ndarray
    pixel_size: float = 1.0
    empty: np.ndarray | None = None
    note: str = ""

    def to_csv(self) -> str:
        lines = ["frequency,fsc"]
        lines += [f"{f:.8g},{v:.8g}" for f, v in zip(self.shell_centers, self.values)]
        return "\n".join(lines) + "\n"


def _data(v) -> np.ndarray:
    return v.data if isinstance(v, Volume) else np.asarray(v, dtype=np.float64)


def _check_same_shape(a, b):
    if a.shape != b.shape:
        raise ValueError(f"volume shapes differ: {a.shape} vs {b.shape}")


def fsc(vol_a, vol_b, n_shells: int | None = None, mask: np.ndarray | None = None) -> FscCurve:
    """Per-shell normalised cross-correlation of two volumes.

    Shells have width ``0.5 / n_shells`` cycles/pixel centred on ``k * width``;
    the default ``n_shells = min(dims) // 2`` gives unit-width shells in FFT
    index radius.
    """
    a, b = _data(vol_a), _data(vol_b)
    _check_same_shape(a, b)
    if mask is not None:
        a, b = a * mask, b * mask
    if not np.any(a) or not np.any(b):
        raise ValueError("FSC is undefined for an all-zero volume")
    n_shells = n_shells or min(a.shape) // 2
    if n_shells < 2:
        raise ValueError("need at least two shells")
    fa = np.fft.rfftn(a)
    fb = np.fft.rfftn(b)
    freqs = [np.fft.fftfreq(n) for n in a.shape[:-1]] + [np.fft.rfftfreq(a.shape[-1])]
    radius = np.sqrt(sum(g ** 2 for g in np.meshgrid(*freqs, indexing="ij")))
    # columns of the half spectrum that stand for a conjugate pair count twice
    nz = a.shape[-1]
    weight = np.full(fa.shape[-1], 2.0)
    weight[0] = 1.0
    if nz % 2 == 0:
        weight[-1] = 1.0
    width = 0.5 / n_shells
    shell = np.rint(radius / width).astype(np.intp).reshape(-1)
    keep = shell < n_shells
    w = np.broadcast_to(weight, fa.shape).reshape(-1)[keep]
    shell = shell[keep]
    fa = fa.reshape(-1)[keep]
    fb = fb.reshape(-1)[keep]
    cross = np.bincount(shell, w * np.real(fa * np.conj(fb)), n_shells)
    pa = np.bincount(shell, w * np.abs(fa) ** 2, n_shells)
    pb = np.bincount(shell, w * np.abs(fb) ** 2, n_shells)
    denom = np.sqrt(pa * pb)
    empty = denom == 0
    values = np.where(empty, 0.0, cross / np.where(empty, 1.0, denom))
    pixel = vol_a.voxel_size if isinstance(vol_a, Volume) else 1.0
    return FscCurve(np.arange(n_shells) * width, np.clip(values, -1.0, 1.0), pixel, empty)


def self_fsc(recon_a, recon_b, n_shells: int | None = None) -> FscCurve:
    """FSC between reconstructions of two independent data halves."""
    curve = fsc(recon_a, recon_b, n_shells)
    return FscCurve(curve.shell_centers, curve.values, curve.pixel_size, curve.empty,
                    INDEPENDENCE_NOTE)


def crossing_frequency(curve: FscCurve, threshold: float) -> float | None:
    """First frequency where the curve falls below ``threshold``, linearly interpolated.

    The zero-frequency shell holds the single DC coefficient, whose sign is
    arbitrary for mean-free volumes, so the search starts at the first shell.
    """
    if not 0 < threshold < 1:
        raise ValueError("threshold must lie in (0, 1)")
    f, v = curve.shell_centers, curve.values
    below = np.flatnonzero(v[1:] < threshold) + 1
    if below.size == 0:
        return None
    k = int(below[0])
    if k == 1 and v[0] < threshold:
        return float(f[1])
    return float(f[k - 1] + (v[k - 1] - threshold) / (v[k - 1] - v[k]) * (f[k] - f[k - 1]))


def resolution_at(curve: FscCurve, threshold: float) -> float | None:
    """Resolution in Angstrom where the curve first drops below ``threshold``;
    None when it never does."""
    freq = crossing_frequency(curve, threshold)
    if freq is None:
        return None
    return float("inf") if freq == 0 else curve.pixel_size / freq


@dataclass(frozen=True)
class Histogram:
    edges: np.ndarray
    weights: np.ndarray  # fraction of voxels per bin, sums to 1
    std: float
    mean: float


def empty_region_histogram(volume, region, n_bins: int = 81,
                           value_range: tuple[float, float] = (-4.0, 4.0)) -> Histogram:
    """Histogram of a region after global unit-std normalisation and region-mean removal.

    ``region`` is a tuple of slices or ``((x0, x1), (y0, y1), (z0, z1))``;
    values outside ``value_range`` are counted in the edge bins.
    """
    data = _data(volume)
    if not isinstance(region[0], slice):
        region = tuple(slice(int(lo), int(hi)) for lo, hi in region)
    for sl, n in zip(region, data.shape):
        start, stop, _ = sl.indices(n)
        if sl.start is not None and not 0 <= sl.start < n or sl.stop is not None and not 0 < sl.stop <= n:
            raise ValueError(f"region {sl} outside volume extent {n}")
        if stop - start < 1:
            raise ValueError("degenerate (empty) region")
    scale = data.std()
    normed = data / scale if scale > 0 else data
    block = normed[region]
    centred = (block - block.mean()).reshape(-1)
    counts, edges = np.histogram(np.clip(centred, *value_range), bins=n_bins, range=value_range)
    return Histogram(edges, counts / counts.sum(), float(centred.std()), float(block.mean()))


def mse(a, b) -> float:
    a, b = _data(a), _data(b)
    _check_same_shape(a, b)
    return float(np.mean((a - b) ** 2))


def psnr(reference, estimate) -> float:
    ref = _data(reference)
    err = mse(ref, estimate)
    span = float(ref.max() - ref.min())
    if err == 0:
        return float("inf")
    return float(10 * np.log10(span ** 2 / err))


def pearson(a, b) -> float:
    a, b = _data(a), _data(b)
    _check_same_shape(a, b)
    return float(np.corrcoef(a.reshape(-1), b.reshape(-1))[0, 1])
