"""Synthetic acquisition: parallel-beam projector, noise models and phantoms."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .geometry import DetectorSpec, TiltSeries, Volume

NOISE_KINDS = ("none", "gaussian", "poisson")
PHANTOM_KINDS = ("spheres", "shells", "point_grid")


@dataclass(frozen=True)
class NoiseModel:
    kind: str = "gaussian"
    sigma: float = 1.0
    dose: float = 100.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in NOISE_KINDS:
            raise ValueError(f"unknown noise kind {self.kind!r}; expected one of {NOISE_KINDS}")
        if self.sigma < 0:
            raise ValueError("gaussian sigma must be >= 0")
        if self.kind == "poisson" and not self.dose > 0:
            raise ValueError("poisson dose must be > 0")


@dataclass(frozen=True)
class PhantomSpec:
    kind: str = "spheres"
    size: tuple[int, int, int] = (64, 64, 64)
    count: int = 12
    seed: int = 0
    density_range: tuple[float, float] = (0.5, 1.5)

    def __post_init__(self):
        if self.kind not in PHANTOM_KINDS:
            raise ValueError(f"unknown phantom kind {self.kind!r}; expected one of {PHANTOM_KINDS}")
        if self.count < 1:
            raise ValueError("phantom count must be >= 1")
        if self.kind != "point_grid" and min(self.size) < 8:
            raise ValueError(f"{self.kind} phantoms need at least 8 voxels per axis")
        if min(self.size) < 1:
            raise ValueError("phantom size must be positive")


def trilinear(data: np.ndarray, x, y, z) -> np.ndarray:
    """Trilinear interpolation at array coordinates; neighbours outside the grid are 0."""
    data = np.asarray(data, dtype=np.float64)
    padded = np.pad(data, 1)
    return _trilinear_padded(padded, x, y, z)


def _trilinear_padded(padded, x, y, z):
    nx, ny, nz = (s - 2 for s in padded.shape)
    x, y, z = (np.asarray(a, dtype=np.float64) for a in (x, y, z))
    inside = (x > -1) & (x < nx) & (y > -1) & (y < ny) & (z > -1) & (z < nz)
    x = np.where(inside, x, 0.0)
    y = np.where(inside, y, 0.0)
    z = np.where(inside, z, 0.0)
    x0, y0, z0 = np.floor(x), np.floor(y), np.floor(z)
    fx, fy, fz = x - x0, y - y0, z - z0
    sy, sx = padded.shape[2], padded.shape[1] * padded.shape[2]
    base = (x0.astype(np.intp) + 1) * sx + (y0.astype(np.intp) + 1) * sy + z0.astype(np.intp) + 1
    flat = padded.reshape(-1)

    def lerp_z(b):
        return (1 - fz) * flat[b] + fz * flat[b + 1]

    c0 = (1 - fy) * lerp_z(base) + fy * lerp_z(base + sy)
    c1 = (1 - fy) * lerp_z(base + sx) + fy * lerp_z(base + sx + sy)
    return np.where(inside, (1 - fx) * c0 + fx * c1, 0.0)


def project(volume: Volume, angles: Sequence[float], detector: DetectorSpec,
            step: float = 0.5) -> TiltSeries:
    """Line integrals of ``V(R_theta r)`` along ``r_z`` by fixed-step trilinear sampling.

    Rays stay in constant-y planes, so the x/z interpolation weights are shared
    by every detector row; the y interpolation is applied after summing along
    the ray (both steps are linear).
    """
    if not step > 0:
        raise ValueError("integration step must be positive")
    angles = np.asarray(angles, dtype=np.float64).reshape(-1)
    if angles.size == 0:
        raise ValueError("need at least one tilt angle")
    data = volume.data
    if not np.all(np.isfinite(data)):
        raise ValueError("volume contains non-finite values")
    nx, ny, nz = data.shape
    # (x, z, y) layout so a gather at one (x, z) site returns a whole y line
    lines = np.ascontiguousarray(np.pad(data, 1).transpose(0, 2, 1))
    half = math.hypot((nx - 1) / 2, (nz - 1) / 2) + 1.0
    n_t = 2 * int(math.ceil(half / step)) + 1
    t = step * (np.arange(n_t) - (n_t - 1) / 2)

    if detector.kernel_width > 0:
        sub = detector.kernel_width * ((np.arange(3) + 0.5) / 3 - 0.5)
    else:
        sub = np.zeros(1)

    W, H = detector.width, detector.height
    u_det = np.arange(W) - (W - 1) / 2
    v_det = np.arange(H) - (H - 1) / 2
    cx, cy, cz = (nx - 1) / 2, (ny - 1) / 2, (nz - 1) / 2
    out = np.zeros((angles.size, H, W))
    for k, theta in enumerate(angles):
        c, s = math.cos(theta), math.sin(theta)
        for du in sub:
            u = (u_det + du)[:, None]
            x = c * u + s * t + cx
            z = -s * u + c * t + cz
            inside = (x > -1) & (x < nx) & (z > -1) & (z < nz)
            x = np.where(inside, x, 0.0)
            z = np.where(inside, z, 0.0)
            x0, z0 = np.floor(x), np.floor(z)
            fx = np.where(inside, x - x0, 0.0)[..., None]
            fz = (z - z0)[..., None]
            ix = x0.astype(np.intp) + 1
            iz = z0.astype(np.intp) + 1
            gathered = ((1 - fx) * ((1 - fz) * lines[ix, iz] + fz * lines[ix, iz + 1])
                        + fx * ((1 - fz) * lines[ix + 1, iz] + fz * lines[ix + 1, iz + 1]))
            gathered *= inside[..., None]
            ray_sums = gathered.sum(axis=1)  # (W, ny + 2)
            for dv in sub:
                yy = v_det + dv + cy
                ok = (yy > -1) & (yy < ny)
                yy = np.where(ok, yy, 0.0)
                y0 = np.floor(yy)
                fy = yy - y0
                iy = y0.astype(np.intp) + 1
                rows = (1 - fy)[:, None] * ray_sums[:, iy].T + fy[:, None] * ray_sums[:, iy + 1].T
                out[k] += rows * ok[:, None]
        out[k] *= step / sub.size ** 2
    return TiltSeries(out, angles, detector, filtered=False)


def _streams(seed: int, n: int, stream: int | None = None) -> list[np.random.Generator]:
    root = np.random.SeedSequence(seed if stream is None else [seed, stream])
    return [np.random.default_rng(s) for s in root.spawn(n)]


def _noisy(series: TiltSeries, model: NoiseModel, stream: int | None) -> TiltSeries:
    proj = series.projections
    if model.kind == "none" or (model.kind == "gaussian" and model.sigma == 0):
        return series.with_projections(proj.copy())
    if model.kind == "poisson" and proj.min() < 0:
        raise ValueError("poisson noise needs a non-negative signal")
    out = np.empty_like(proj)
    for k, rng in enumerate(_streams(model.seed, proj.shape[0], stream)):
        if model.kind == "gaussian":
            out[k] = proj[k] + model.sigma * rng.standard_normal(proj[k].shape)
        else:
            out[k] = rng.poisson(model.dose * proj[k]) / model.dose
    return series.with_projections(out)


def apply_noise(tilt_series: TiltSeries, model: NoiseModel) -> TiltSeries:
    """One noise realisation; each projection draws from its own seeded stream."""
    return _noisy(tilt_series, model, None)


def apply_noise_pair(tilt_series: TiltSeries, model: NoiseModel) -> tuple[TiltSeries, TiltSeries]:
    """Two independent realisations (even/odd dose-fractionation surrogate)."""
    return _noisy(tilt_series, model, 0), _noisy(tilt_series, model, 1)


def make_phantom(spec: PhantomSpec, voxel_size: float = 1.0) -> Volume:
    rng = np.random.default_rng(spec.seed)
    size = tuple(int(n) for n in spec.size)
    vol = np.zeros(size)
    if spec.kind == "point_grid":
        m = int(math.ceil(spec.count ** (1 / 3) - 1e-9))
        axes = [[(j + 1) * n // (m + 1) for j in range(m)] for n in size]
        sites = [(a, b, c) for a in axes[0] for b in axes[1] for c in axes[2]]
        for site in sites[:spec.count]:
            vol[site] = 1.0
        return Volume(vol, voxel_size)

    idx = np.stack(np.meshgrid(*[np.arange(n, dtype=np.float64) for n in size], indexing="ij"), -1)
    lo, hi = spec.density_range
    n_min = min(size)
    placed: list[tuple[np.ndarray, float]] = []
    for _ in range(spec.count):
        for _attempt in range(200):
            if spec.kind == "spheres":
                radius = rng.uniform(max(1.5, n_min / 16), max(2.0, n_min / 8))
                axes_len = np.full(3, radius)
            else:
                axes_len = rng.uniform(max(2.5, n_min / 12), max(3.0, n_min / 5), size=3)
                radius = float(axes_len.max()) + 1.0
            margin = radius + 1
            if any(n - 1 - 2 * margin < 0 for n in size):
                continue
            centre = np.array([rng.uniform(margin, n - 1 - margin) for n in size])
            if all(np.linalg.norm(centre - c) > radius + r + 1 for c, r in placed):
                break
        else:
            continue  # placement failed; keep the objects we have
        density = rng.uniform(lo, hi)
        rel = idx - centre
        if spec.kind == "spheres":
            inside = np.einsum("...i,...i->...", rel, rel) <= radius ** 2
        else:
            rot, _ = np.linalg.qr(rng.standard_normal((3, 3)))
            q = np.sqrt(np.sum((rel @ rot / axes_len) ** 2, axis=-1))
            # approximate distance to the ellipsoid surface
            inside = np.abs(q - 1.0) * axes_len.min() <= 1.0
        vol[inside] = density
        placed.append((centre, radius))
    return Volume(vol, voxel_size)


def tilt_angles(start_deg: float = -60.0, stop_deg: float = 60.0, step_deg: float = 3.0) -> np.ndarray:
    """Inclusive uniform tilt scheme in radians."""
    n = int(round((stop_deg - start_deg) / step_deg)) + 1
    return np.deg2rad(start_deg + step_deg * np.arange(n))
