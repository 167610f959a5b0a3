"""File formats: MRC2014 subset, IMOD ``.tlt`` angles, checkpoints and run configs."""
from __future__ import annotations

import json
import math
import os
import struct
import tempfile
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .geometry import DetectorSpec, TiltSeries, Volume
from .net import NetConfig, SliceMlpParams


class FormatError(ValueError):
    """Malformed or unsupported file content."""


class UnsupportedModeError(FormatError):
    pass


class TruncatedFileError(FormatError):
    pass


class ConfigError(ValueError):
    pass


def atomic_write(path, payload: bytes) -> None:
    """Write via a temporary file in the target directory, then rename."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".part")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# ---------------------------------------------------------------------------
# MRC
# ---------------------------------------------------------------------------

HEADER_BYTES = 1024
MODE_DTYPES = {0: np.int8, 1: np.int16, 2: np.float32, 6: np.uint16}
_HEADER = np.dtype([
    ("nx", "i4"), ("ny", "i4"), ("nz", "i4"), ("mode", "i4"),
    ("nxstart", "i4"), ("nystart", "i4"), ("nzstart", "i4"),
    ("mx", "i4"), ("my", "i4"), ("mz", "i4"),
    ("cella", "f4", 3), ("cellb", "f4", 3),
    ("mapc", "i4"), ("mapr", "i4"), ("maps", "i4"),
    ("dmin", "f4"), ("dmax", "f4"), ("dmean", "f4"),
    ("ispg", "i4"), ("nsymbt", "i4"),
    ("extra1", "V8"), ("exttyp", "S4"), ("nversion", "i4"), ("extra2", "V84"),
    ("origin", "f4", 3), ("map", "S4"), ("machst", "u1", 4), ("rms", "f4"),
    ("nlabl", "i4"), ("label", "S80", 10),
])
assert _HEADER.itemsize == HEADER_BYTES


@dataclass
class MrcData:
    data: np.ndarray  # file order: (nz, ny, nx)
    voxel_size: float
    header: np.ndarray


def _header_for(arr: np.ndarray, voxel_size: float) -> np.ndarray:
    nz, ny, nx = arr.shape
    h = np.zeros((), dtype=_HEADER.newbyteorder("<"))
    h["nx"], h["ny"], h["nz"] = nx, ny, nz
    h["mode"] = 2
    h["mx"], h["my"], h["mz"] = nx, ny, nz
    h["cella"] = (nx * voxel_size, ny * voxel_size, nz * voxel_size)
    h["cellb"] = (90.0, 90.0, 90.0)
    h["mapc"], h["mapr"], h["maps"] = 1, 2, 3
    h["dmin"], h["dmax"], h["dmean"] = arr.min(), arr.max(), arr.mean(dtype=np.float64)
    h["rms"] = arr.std(dtype=np.float64)
    h["ispg"] = 1 if isinstance(voxel_size, float) and nz > 1 else 0
    h["exttyp"] = b"MRCO"
    h["nversion"] = 20140
    h["map"] = b"MAP "
    h["machst"] = (0x44, 0x44, 0, 0)
    h["nlabl"] = 1
    h["label"][0] = b"loctomo"
    return h


def write_mrc(obj, path, voxel_size: float | None = None) -> None:
    """Write a Volume, TiltSeries or file-ordered ``(nz, ny, nx)`` array as mode 2."""
    if isinstance(obj, Volume):
        arr = obj.data.transpose(2, 1, 0)
        voxel_size = obj.voxel_size if voxel_size is None else voxel_size
    elif isinstance(obj, TiltSeries):
        arr = obj.projections
        voxel_size = obj.detector.pixel_size[0] if voxel_size is None else voxel_size
    else:
        arr = np.asarray(obj)
        if arr.ndim == 2:
            arr = arr[None]
        voxel_size = 1.0 if voxel_size is None else voxel_size
    arr = np.ascontiguousarray(arr, dtype="<f4")
    if arr.ndim != 3 or arr.size == 0:
        raise ValueError(f"cannot write array of shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("refusing to write non-finite data")
    header = _header_for(arr, float(voxel_size))
    atomic_write(path, header.tobytes() + arr.tobytes())


def read_mrc(path) -> MrcData:
    raw = Path(path).read_bytes()
    if len(raw) < HEADER_BYTES:
        raise TruncatedFileError(f"{path}: {len(raw)} bytes, shorter than the 1024-byte header")
    machst = raw[212]
    order = ">" if machst == 0x11 else "<"
    header = np.frombuffer(raw[:HEADER_BYTES], dtype=_HEADER.newbyteorder(order))[0]
    if header["map"] != b"MAP ":
        raise FormatError(f"{path}: missing 'MAP ' stamp")
    nx, ny, nz, mode = (int(header[k]) for k in ("nx", "ny", "nz", "mode"))
    if min(nx, ny, nz) < 1:
        raise FormatError(f"{path}: invalid dimensions {(nx, ny, nz)}")
    if mode not in MODE_DTYPES:
        raise UnsupportedModeError(f"{path}: unsupported mode {mode} (readable: {sorted(MODE_DTYPES)})")
    ext = int(header["nsymbt"])
    if ext < 0:
        raise FormatError(f"{path}: negative extended header size {ext}")
    dtype = np.dtype(MODE_DTYPES[mode]).newbyteorder(order)
    need = nx * ny * nz * dtype.itemsize
    start = HEADER_BYTES + ext
    if len(raw) < start + need:
        raise TruncatedFileError(f"{path}: payload has {max(0, len(raw) - start)} bytes, expected {need}")
    data = np.frombuffer(raw, dtype=dtype, count=nx * ny * nz, offset=start).reshape(nz, ny, nx)
    data = data.astype(dtype.newbyteorder("="))
    mx = int(header["mx"])
    cell = float(header["cella"][0])
    voxel = cell / mx if mx > 0 and math.isfinite(cell) and cell > 0 else 1.0
    return MrcData(data, voxel, header)


def read_volume(path) -> Volume:
    m = read_mrc(path)
    try:
        return Volume(m.data.transpose(2, 1, 0), m.voxel_size)
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from exc


def read_stack(path, angles) -> TiltSeries:
    """Raw (unfiltered) tilt-series from an MRC stack plus angles in radians."""
    m = read_mrc(path)
    nz, ny, nx = m.data.shape
    det = DetectorSpec(nx, ny, (m.voxel_size, m.voxel_size))
    return TiltSeries(m.data.astype(np.float64), np.asarray(angles), det, filtered=False)


# ---------------------------------------------------------------------------
# Tilt angles
# ---------------------------------------------------------------------------

def parse_tlt(text: str, source: str = "<string>") -> np.ndarray:
    angles = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        token = line.strip()
        if not token:
            continue
        try:
            value = float(token.replace("−", "-"))
        except ValueError:
            raise FormatError(f"{source}, line {lineno}: not a number: {token!r}") from None
        if not math.isfinite(value):
            raise FormatError(f"{source}, line {lineno}: non-finite angle")
        angles.append(value)
    return np.deg2rad(np.array(angles, dtype=np.float64))


def read_tlt(path) -> np.ndarray:
    """IMOD tilt file (degrees, one per line) -> radians."""
    return parse_tlt(Path(path).read_text(), str(path))


def write_tlt(angles, path) -> None:
    text = "".join(f"{a:.6f}\n" for a in np.rad2deg(np.asarray(angles, dtype=np.float64)))
    atomic_write(path, text.encode())


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"LOCTOMO\x00"
CHECKPOINT_VERSION = 1


def save_checkpoint(params: SliceMlpParams, path, extra: dict | None = None) -> None:
    """Magic, version, JSON config block, then float32 little-endian tensors with shapes.

    Training runs in float64; values are rounded to float32 here.
    """
    cfg = {f.name: getattr(params.config, f.name) for f in fields(params.config)}
    block = json.dumps({"net": cfg, "extra": extra or {}}, sort_keys=True).encode()
    parts = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(block)), block,
             struct.pack("<I", len(params.tensors))]
    for name, t in params.tensors.items():
        enc = name.encode()
        parts.append(struct.pack("<I", len(enc)) + enc)
        parts.append(struct.pack("<I", t.ndim) + struct.pack(f"<{t.ndim}I", *t.shape))
        parts.append(np.ascontiguousarray(t, dtype="<f4").tobytes())
    atomic_write(path, b"".join(parts))


class _Reader:
    def __init__(self, raw: bytes, source: str):
        self.raw, self.pos, self.source = raw, 0, source

    def take(self, n: int) -> bytes:
        if n < 0 or self.pos + n > len(self.raw):
            raise TruncatedFileError(f"{self.source}: truncated checkpoint (offset {self.pos})")
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self, count: int = 1):
        vals = struct.unpack(f"<{count}I", self.take(4 * count))
        return vals[0] if count == 1 else vals


def load_checkpoint(path) -> tuple[SliceMlpParams, dict]:
    raw = Path(path).read_bytes()
    r = _Reader(raw, str(path))
    if r.take(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint (bad magic)")
    version, block_len = r.u32(2)
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    try:
        meta = json.loads(r.take(block_len).decode())
        config = NetConfig(**meta["net"])
    except (ValueError, TypeError, KeyError) as exc:
        raise FormatError(f"{path}: corrupted config block: {exc}") from exc
    expected = config.tensor_shapes()
    count = r.u32()
    if count != len(expected):
        raise FormatError(f"{path}: {count} tensors, config declares {len(expected)}")
    tensors = {}
    for want_name, want_shape in expected.items():
        name = r.take(r.u32()).decode(errors="replace")
        ndim = r.u32()
        if ndim > 8:
            raise FormatError(f"{path}: implausible rank {ndim} for {name}")
        shape = tuple(r.u32(ndim)) if ndim > 1 else ((r.u32(),) if ndim == 1 else ())
        if name != want_name or shape != want_shape:
            raise FormatError(f"{path}: shape chain broken at {name}{shape}, expected {want_name}{want_shape}")
        n = int(np.prod(shape))
        tensors[name] = np.frombuffer(r.take(4 * n), dtype="<f4").reshape(shape).astype(np.float64)
    if r.pos != len(raw):
        raise FormatError(f"{path}: {len(raw) - r.pos} trailing bytes")
    return SliceMlpParams(config, tensors), meta.get("extra", {})


# ---------------------------------------------------------------------------
# Run configuration
# ---------------------------------------------------------------------------

@dataclass
class RunConfig:
    # geometry / simulation
    size: int = 64
    phantom: str = "spheres"
    phantom_count: int = 12
    tilt_min: float = -60.0
    tilt_max: float = 60.0
    tilt_step: float = 3.0
    ray_step: float = 0.5
    kernel_width: float = 0.0
    noise: str = "gaussian"
    noise_sigma: float = 5.0
    dose: float = 100.0
    voxel_size: float = 1.0
    # filtering
    filter: str = "cosine_ramp"
    pad_factor: int = 2
    # network
    patch_size: int = 21
    patch_spacing: float = 1.0
    features: int = 128
    hidden: int = 128
    depth: int = 5
    pe_dim: int = 128
    pooling: str = "mean"
    wavelet: str = "cdf53"
    # training
    mode: str = "pixel"
    steps: int = 1000
    batch_size: int = 64
    lr: float = 1e-3
    lr_schedule: str = "constant"
    tilt_drop_max: int = 30
    n2n: bool = True
    # runtime
    seed: int = 0
    threads: int = 0
    chunk_size: int = 0

    def validate(self) -> "RunConfig":
        if self.patch_size < 1 or self.patch_size % 2 == 0:
            raise ConfigError(f"patch_size must be a positive odd integer, got {self.patch_size}")
        choices = {
            "phantom": ("spheres", "shells", "point_grid"),
            "noise": ("none", "gaussian", "poisson"),
            "filter": ("ramp", "cosine_ramp"),
            "pooling": ("mean", "sum", "max"),
            "mode": ("pixel", "wavelet"),
            "lr_schedule": ("constant", "cosine"),
        }
        for key, allowed in choices.items():
            if getattr(self, key) not in allowed:
                raise ConfigError(f"{key} must be one of {allowed}, got {getattr(self, key)!r}")
        positive = ("size", "phantom_count", "tilt_step", "ray_step", "voxel_size", "pad_factor",
                    "patch_spacing", "features", "hidden", "pe_dim", "batch_size", "lr", "dose")
        for key in positive:
            if not getattr(self, key) > 0:
                raise ConfigError(f"{key} must be positive, got {getattr(self, key)}")
        if self.pe_dim % 2:
            raise ConfigError("pe_dim must be even")
        for key in ("steps", "tilt_drop_max", "depth", "threads", "chunk_size", "noise_sigma",
                    "kernel_width"):
            if getattr(self, key) < 0:
                raise ConfigError(f"{key} must be >= 0, got {getattr(self, key)}")
        return self

    def net_config(self, mode: str | None = None) -> NetConfig:
        mode = mode or self.mode
        return NetConfig(self.patch_size, self.features, self.hidden, self.depth, self.pe_dim,
                         1 if mode == "pixel" else 8, self.pooling)


def _coerce(key: str, typ, raw: str):
    if typ is bool or typ == "bool":
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
    try:
        if typ in (int, "int"):
            return int(raw)
        if typ in (float, "float"):
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: expected {getattr(typ, '__name__', typ)}, got {raw!r}") from None
    return raw.strip("\"'")


def _field_types() -> dict:
    return {f.name: f.type for f in fields(RunConfig)}


def config_from_mapping(values: dict, base: RunConfig | None = None) -> RunConfig:
    types = _field_types()
    cfg = base or RunConfig()
    for key, value in values.items():
        if key not in types:
            raise ConfigError(f"unknown config key {key!r}")
        if isinstance(value, str):
            value = _coerce(key, types[key], value)
        setattr(cfg, key, value)
    return cfg.validate()


def parse_config_text(text: str, source: str = "<string>") -> RunConfig:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}, line {lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        if key in values:
            raise ConfigError(f"{source}, line {lineno}: duplicate key {key!r}")
        values[key] = value
    return config_from_mapping(values)


def parse_config(path) -> RunConfig:
    return parse_config_text(Path(path).read_text(), str(path))
