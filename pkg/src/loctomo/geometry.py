"""Single-tilt-axis acquisition geometry.

Conventions used throughout the package:

* Volumes are stored as ``(nx, ny, nz)`` arrays indexed ``data[ix, iy, iz]``.
  Continuous volume coordinates are in voxel units with the origin at the
  volume centre, so index ``i`` maps to ``i - (n - 1) / 2``.
* The tilt axis is ``y``. A projection is a ``(height, width)`` array; the
  detector coordinate ``u`` runs along columns and ``v`` along rows, both
  centred the same way (coordinate 0 sits at index ``(width - 1) / 2``).
* One voxel equals one detector pixel.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np


@dataclass(frozen=True)
class Volume:
    """Dense 3-D density grid."""

    data: np.ndarray
    voxel_size: float = 1.0

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 3 or min(data.shape) < 1:
            raise ValueError(f"volume must be a non-empty 3-D array, got shape {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ValueError("volume contains non-finite values")
        if not self.voxel_size > 0:
            raise ValueError(f"voxel_size must be positive, got {self.voxel_size}")
        object.__setattr__(self, "data", data)

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(n) for n in self.data.shape)


@dataclass(frozen=True)
class DetectorSpec:
    width: int
    height: int
    pixel_size: tuple[float, float] = (1.0, 1.0)
    kernel_width: float = 0.0  # box sampling kernel width in pixels; 0 = point sampling

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ValueError(f"detector must be at least 1x1, got {self.width}x{self.height}")
        if min(self.pixel_size) <= 0:
            raise ValueError(f"pixel sizes must be positive, got {self.pixel_size}")
        if self.kernel_width < 0:
            raise ValueError("kernel_width must be >= 0")


@dataclass(frozen=True)
class TiltSeries:
    """Stack of ``N`` projections, shape ``(N, height, width)``, angles in radians."""

    projections: np.ndarray
    angles: np.ndarray
    detector: DetectorSpec
    filtered: bool = False

    def __post_init__(self):
        proj = np.asarray(self.projections, dtype=np.float64)
        angles = np.asarray(self.angles, dtype=np.float64).reshape(-1)
        if proj.ndim != 3 or proj.shape[0] < 1:
            raise ValueError(f"projections must have shape (N, height, width), got {proj.shape}")
        if proj.shape[0] != angles.size:
            raise ValueError(f"{proj.shape[0]} projections but {angles.size} angles")
        if proj.shape[1:] != (self.detector.height, self.detector.width):
            raise ValueError(
                f"projection shape {proj.shape[1:]} does not match detector "
                f"{(self.detector.height, self.detector.width)}"
            )
        if not np.all(np.abs(angles) < np.pi / 2):
            raise ValueError("tilt angles must lie strictly inside (-pi/2, pi/2)")
        object.__setattr__(self, "projections", proj)
        object.__setattr__(self, "angles", angles)

    @property
    def n_tilts(self) -> int:
        return self.angles.size

    def subset(self, index) -> "TiltSeries":
        index = np.asarray(index)
        return replace(self, projections=self.projections[index], angles=self.angles[index])

    def with_projections(self, projections: np.ndarray, filtered: bool | None = None) -> "TiltSeries":
        return replace(
            self,
            projections=projections,
            filtered=self.filtered if filtered is None else filtered,
        )


@dataclass(frozen=True)
class TrajectoryPoint:
    u: float
    v: float


@dataclass(frozen=True)
class PatchSpec:
    size: int = 21
    spacing: float = 1.0

    def __post_init__(self):
        if self.size < 1 or self.size % 2 == 0:
            raise ValueError(f"patch size must be a positive odd integer, got {self.size}")
        if not self.spacing > 0:
            raise ValueError(f"patch spacing must be positive, got {self.spacing}")

    @property
    def half(self) -> int:
        return self.size // 2

    @property
    def offsets(self) -> np.ndarray:
        return np.arange(-self.half, self.half + 1, dtype=np.float64)


@dataclass(frozen=True)
class PatchStack:
    """``data[k, i, j]`` samples tilt ``k`` at ``trajectory - spacing * (i, j)``
    (``i`` along u, ``j`` along v, both shifted to start at 0)."""

    data: np.ndarray
    angles: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        angles = np.asarray(self.angles, dtype=np.float64).reshape(-1)
        if data.ndim != 3 or data.shape[1] != data.shape[2]:
            raise ValueError(f"patch stack must have shape (N, P, P), got {data.shape}")
        if data.shape[0] != angles.size:
            raise ValueError(f"{data.shape[0]} patches but {angles.size} angles")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "angles", angles)


def rotation_matrix(theta: float) -> np.ndarray:
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def trajectory(r0: Sequence[float], theta: float) -> TrajectoryPoint:
    x, y, z = (float(t) for t in r0)
    return TrajectoryPoint(x * np.cos(theta) - z * np.sin(theta), y)


def trajectory_uv(points: np.ndarray, angles: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised trajectory: ``points (M, 3)``, ``angles (N,)`` -> ``u, v`` of shape ``(M, N)``."""
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    angles = np.asarray(angles, dtype=np.float64)
    u = points[:, :1] * np.cos(angles) - points[:, 2:3] * np.sin(angles)
    v = np.broadcast_to(points[:, 1:2], u.shape)
    return u, v


def voxel_coordinates(dims: Sequence[int], index=None) -> np.ndarray:
    """Centred coordinates of voxel indices (all voxels when ``index`` is None)."""
    dims = np.asarray(dims, dtype=np.float64)
    if index is None:
        grids = np.meshgrid(*[np.arange(int(n)) for n in dims], indexing="ij")
        index = np.stack([g.reshape(-1) for g in grids], axis=1)
    return np.asarray(index, dtype=np.float64) - (dims - 1) / 2


def detector_to_index(u, v, detector_shape: tuple[int, int]):
    """Centred detector coordinates -> (column, row) array coordinates."""
    height, width = detector_shape
    return np.asarray(u) + (width - 1) / 2, np.asarray(v) + (height - 1) / 2


# ---------------------------------------------------------------------------
# Bilinear sampling with zero padding
# ---------------------------------------------------------------------------

def _bilinear_gather(padded: np.ndarray, k, col, row) -> np.ndarray:
    """Sample a stack padded with one ring of zeros at array coordinates."""
    n_rows, n_cols = padded.shape[1] - 2, padded.shape[2] - 2
    col = np.asarray(col, dtype=np.float64)
    row = np.asarray(row, dtype=np.float64)
    inside = (col > -1) & (col < n_cols) & (row > -1) & (row < n_rows)
    col = np.where(inside, col, 0.0)
    row = np.where(inside, row, 0.0)
    c0 = np.floor(col)
    r0 = np.floor(row)
    fc = col - c0
    fr = row - r0
    stride = padded.shape[2]
    base = (np.asarray(k) * padded.shape[1] + r0.astype(np.intp) + 1) * stride + c0.astype(np.intp) + 1
    flat = padded.reshape(-1)
    top = (1 - fc) * flat[base] + fc * flat[base + 1]
    bottom = (1 - fc) * flat[base + stride] + fc * flat[base + stride + 1]
    return np.where(inside, (1 - fr) * top + fr * bottom, 0.0)


def sample_bilinear(image: np.ndarray, point) -> float:
    """Bilinear sample of ``image`` at array coordinates ``point = (u, v)``
    (``u`` = column, ``v`` = row). Neighbours outside the grid count as 0."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2 or image.size == 0:
        raise ValueError("image must be a non-empty 2-D array")
    u, v = (point.u, point.v) if isinstance(point, TrajectoryPoint) else point
    padded = np.pad(image, 1)[None]
    return float(_bilinear_gather(padded, 0, u, v))


def sample_stack(projections: np.ndarray, k, col, row) -> np.ndarray:
    """Vectorised bilinear sampling of a projection stack at array coordinates."""
    padded = np.pad(np.asarray(projections, dtype=np.float64), ((0, 0), (1, 1), (1, 1)))
    return _bilinear_gather(padded, k, col, row)


# ---------------------------------------------------------------------------
# Crop operator
# ---------------------------------------------------------------------------

def extract_patch(filtered_projection: np.ndarray, r0, theta: float, spec: PatchSpec) -> np.ndarray:
    proj = np.asarray(filtered_projection, dtype=np.float64)
    if proj.ndim != 2 or proj.size == 0:
        raise ValueError("projection must be a non-empty 2-D array")
    out = extract_patches(proj[None], np.array([theta]), np.asarray(r0, dtype=np.float64)[None], spec)
    return out[0, 0]


def extract_patch_stack(tilt_series: TiltSeries, r0, spec: PatchSpec) -> PatchStack:
    if not tilt_series.filtered:
        raise ValueError("patch stacks must be cut from a filtered tilt-series")
    data = extract_patches(
        tilt_series.projections, tilt_series.angles, np.asarray(r0, dtype=np.float64)[None], spec
    )[0]
    return PatchStack(data, tilt_series.angles.copy())


class PatchExtractor:
    """Batched crop operator over a fixed projection stack.

    Pads the stack once so repeated calls (training batches, inference chunks)
    only pay for the gathers.
    """

    def __init__(self, projections: np.ndarray, angles: np.ndarray, spec: PatchSpec):
        self.projections = np.asarray(projections, dtype=np.float64)
        self.angles = np.asarray(angles, dtype=np.float64)
        self.spec = spec
        self.n_tilts, self.height, self.width = self.projections.shape
        self._fast = float(spec.spacing) == 1.0
        if self._fast:
            self.margin = 2 * spec.half + 3
            self._padded = np.pad(self.projections, ((0, 0),) + ((self.margin, self.margin),) * 2)
        else:
            self._padded = np.pad(self.projections, ((0, 0), (1, 1), (1, 1)))

    def __call__(self, points: np.ndarray, tilts: np.ndarray | None = None) -> np.ndarray:
        """Patches for ``points (M, 3)`` -> ``(M, n, P, P)``.

        ``tilts`` optionally selects tilt indices per point, shape ``(M, n)``.
        """
        points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        if tilts is None:
            tilts = np.broadcast_to(np.arange(self.n_tilts), (points.shape[0], self.n_tilts))
        tilts = np.asarray(tilts, dtype=np.intp)
        theta = self.angles[tilts]
        u = points[:, :1] * np.cos(theta) - points[:, 2:3] * np.sin(theta)
        v = np.broadcast_to(points[:, 1:2], u.shape)
        col, row = detector_to_index(u, v, (self.height, self.width))
        if self._fast:
            return self._unit_spacing(tilts, col, row)
        return self._general(tilts, col, row)

    def _general(self, tilts, col, row):
        offs = self.spec.spacing * self.spec.offsets
        P = self.spec.size
        c = col[:, :, None, None] - offs[:, None]
        r = row[:, :, None, None] - offs[None, :]
        k = tilts[:, :, None, None]
        return _bilinear_gather(self._padded, k, np.broadcast_to(c, c.shape[:2] + (P, P)),
                                np.broadcast_to(r, r.shape[:2] + (P, P)))

    def _unit_spacing(self, tilts, col, row):
        # With unit spacing every sample shares the fractional offset of the
        # trajectory point, so one (P+1)^2 window per tilt suffices.
        h = self.spec.half
        P = self.spec.size
        m = self.margin
        c0 = np.floor(col)
        r0 = np.floor(row)
        fc = (col - c0)[..., None, None]
        fr = (row - r0)[..., None, None]
        c0 = np.clip(c0, -(h + 2), self.width + h + 1).astype(np.intp)
        r0 = np.clip(r0, -(h + 2), self.height + h + 1).astype(np.intp)
        stride = self._padded.shape[2]
        plane = self._padded.shape[1] * stride
        base = tilts * plane + (r0 - h + m) * stride + (c0 - h + m)
        win = np.arange(P + 1)
        offsets = win[:, None] * stride + win[None, :]
        flat = self._padded.reshape(-1)
        w = flat[base[..., None, None] + offsets]  # (M, n, rows, cols)
        cols = w[..., :, 1:] - w[..., :, :P]
        cols *= fc
        cols += w[..., :, :P]
        vals = cols[..., 1:, :] - cols[..., :P, :]
        vals *= fr
        vals += cols[..., :P, :]
        # window index a corresponds to offset h - a; reverse and put u first
        return np.ascontiguousarray(vals[..., ::-1, ::-1].swapaxes(-1, -2))


def extract_patches(projections: np.ndarray, angles: np.ndarray, points: np.ndarray,
                    spec: PatchSpec) -> np.ndarray:
    return PatchExtractor(projections, angles, spec)(points)
