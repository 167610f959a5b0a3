import struct

import numpy as np
import pytest
from hypothesis import HealthCheck, given, settings, strategies as st

from loctomo import io as lio
from loctomo.geometry import DetectorSpec, TiltSeries, Volume
from loctomo.net import NetConfig, forward, init_params

finite32 = st.floats(-1e30, 1e30, allow_nan=False, width=32)


@settings(suppress_health_check=[HealthCheck.function_scoped_fixture])
@given(st.tuples(*[st.integers(1, 6)] * 3), st.integers(0, 2 ** 32 - 1))
def test_mrc_volume_roundtrip_is_bit_exact(tmp_path, dims, seed):
    data = np.random.default_rng(seed).standard_normal(dims).astype(np.float32)
    path = tmp_path / "v.mrc"
    lio.write_mrc(Volume(data, 1.5), path)
    back = lio.read_volume(path)
    assert back.data.astype(np.float32).tobytes() == data.tobytes()
    assert back.voxel_size == 1.5
    assert path.stat().st_size == 1024 + 4 * data.size


def test_header_statistics_and_stamps(tmp_path):
    data = np.arange(24, dtype=np.float32).reshape(2, 3, 4)
    lio.write_mrc(Volume(data), tmp_path / "v.mrc")
    m = lio.read_mrc(tmp_path / "v.mrc")
    h = m.header
    assert (h["nx"], h["ny"], h["nz"], h["mode"]) == (2, 3, 4, 2)
    assert (h["dmin"], h["dmax"]) == (0, 23) and h["dmean"] == pytest.approx(11.5)
    assert h["map"] == b"MAP " and list(h["machst"][:2]) == [0x44, 0x44]
    assert m.data.shape == (4, 3, 2)  # file order z, y, x


def test_stack_layout(tmp_path):
    proj = np.random.default_rng(0).standard_normal((3, 5, 7)).astype(np.float32)
    series = TiltSeries(proj, [-0.1, 0, 0.1], DetectorSpec(7, 5))
    lio.write_mrc(series, tmp_path / "s.mrc")
    h = lio.read_mrc(tmp_path / "s.mrc").header
    assert (h["nx"], h["ny"], h["nz"]) == (7, 5, 3)
    back = lio.read_stack(tmp_path / "s.mrc", series.angles)
    np.testing.assert_array_equal(back.projections, proj)


def test_single_voxel_roundtrip(tmp_path):
    lio.write_mrc(Volume(np.full((1, 1, 1), 3.25)), tmp_path / "one.mrc")
    assert lio.read_volume(tmp_path / "one.mrc").data.item() == 3.25


def _raw_file(path, mode, dtype, values, ext=b""):
    h = np.zeros((), dtype=lio._HEADER.newbyteorder("<"))
    h["nx"], h["ny"], h["nz"], h["mode"] = values.size, 1, 1, mode
    h["mx"], h["my"], h["mz"] = values.size, 1, 1
    h["cella"] = (values.size * 2.0, 2.0, 2.0)
    h["map"] = b"MAP "
    h["machst"] = (0x44, 0x44, 0, 0)
    h["nsymbt"] = len(ext)
    path.write_bytes(h.tobytes() + ext + values.astype(dtype).tobytes())


@pytest.mark.parametrize("mode,dtype", [(0, "<i1"), (1, "<i2"), (6, "<u2"), (2, "<f4")])
def test_readable_modes(tmp_path, mode, dtype):
    values = np.array([0, 1, 7, 100])
    _raw_file(tmp_path / "m.mrc", mode, dtype, values, ext=b"\x01" * 80)
    m = lio.read_mrc(tmp_path / "m.mrc")
    np.testing.assert_array_equal(m.data.ravel(), values)
    assert m.voxel_size == 2.0


def test_mode_3_is_unsupported(tmp_path):
    _raw_file(tmp_path / "m.mrc", 3, "<i2", np.zeros(4))
    with pytest.raises(lio.UnsupportedModeError):
        lio.read_mrc(tmp_path / "m.mrc")


def test_truncated_and_unstamped(tmp_path):
    lio.write_mrc(Volume(np.ones((4, 4, 4))), tmp_path / "v.mrc")
    raw = (tmp_path / "v.mrc").read_bytes()
    (tmp_path / "t.mrc").write_bytes(raw[:-5])
    with pytest.raises(lio.TruncatedFileError):
        lio.read_mrc(tmp_path / "t.mrc")
    (tmp_path / "h.mrc").write_bytes(raw[:100])
    with pytest.raises(lio.TruncatedFileError):
        lio.read_mrc(tmp_path / "h.mrc")
    bad = bytearray(raw)
    bad[208:212] = b"PAM "
    (tmp_path / "s.mrc").write_bytes(bytes(bad))
    with pytest.raises(lio.FormatError, match="MAP"):
        lio.read_mrc(tmp_path / "s.mrc")


def test_writer_rejects_nonfinite(tmp_path):
    with pytest.raises(ValueError):
        lio.write_mrc(np.array([[[np.inf]]]), tmp_path / "x.mrc")
    assert not (tmp_path / "x.mrc").exists()


@settings(max_examples=200, suppress_health_check=[HealthCheck.function_scoped_fixture])
@given(st.binary(max_size=1100), st.integers(0, 1023), st.binary(min_size=1, max_size=8))
def test_fuzzed_mrc_headers_raise_typed_errors(tmp_path, prefix, offset, patch):
    lio.write_mrc(Volume(np.ones((3, 2, 2))), tmp_path / "v.mrc")
    raw = bytearray((tmp_path / "v.mrc").read_bytes())
    raw[offset:offset + len(patch)] = patch
    for blob in (bytes(raw), prefix):
        (tmp_path / "f.mrc").write_bytes(blob)
        try:
            lio.read_mrc(tmp_path / "f.mrc")
        except lio.FormatError:
            pass


def test_tlt_parsing(tmp_path):
    np.testing.assert_allclose(lio.parse_tlt("0\n3\n\n-3\n"), [0, 0.05236, -0.05236], atol=1e-5)
    with pytest.raises(lio.FormatError, match="line 1"):
        lio.parse_tlt("abc\n")
    with pytest.raises(lio.FormatError, match="line 3"):
        lio.parse_tlt("1\n\nx\n")
    angles = np.deg2rad(np.arange(-60, 61, 3.0))
    lio.write_tlt(angles, tmp_path / "a.tlt")
    assert len((tmp_path / "a.tlt").read_text().splitlines()) == 41
    np.testing.assert_allclose(lio.read_tlt(tmp_path / "a.tlt"), angles, atol=1e-12)


@pytest.fixture
def params32():
    cfg = NetConfig(patch_size=5, features=3, hidden=4, depth=1, pe_dim=6, out_dim=8)
    return init_params(cfg, 0).map(lambda t: t.astype(np.float32).astype(np.float64))


def test_checkpoint_roundtrip(tmp_path, params32):
    lio.save_checkpoint(params32, tmp_path / "m.ckpt", {"mode": "wavelet", "wavelet": "cdf53"})
    loaded, extra = lio.load_checkpoint(tmp_path / "m.ckpt")
    assert loaded.config == params32.config and extra["mode"] == "wavelet"
    x = np.random.default_rng(0).standard_normal((2, 4, 5, 5))
    ang = np.linspace(-1, 1, 4)
    assert forward(loaded, x, ang).tobytes() == forward(params32, x, ang).tobytes()
    lio.save_checkpoint(loaded, tmp_path / "m2.ckpt", extra)
    assert (tmp_path / "m.ckpt").read_bytes() == (tmp_path / "m2.ckpt").read_bytes()


def test_checkpoint_errors(tmp_path, params32):
    path = tmp_path / "m.ckpt"
    lio.save_checkpoint(params32, path)
    raw = path.read_bytes()
    (tmp_path / "t.ckpt").write_bytes(raw[:-3])
    with pytest.raises(lio.TruncatedFileError):
        lio.load_checkpoint(tmp_path / "t.ckpt")
    (tmp_path / "b.ckpt").write_bytes(b"NOTMODEL" + raw[8:])
    with pytest.raises(lio.FormatError, match="magic"):
        lio.load_checkpoint(tmp_path / "b.ckpt")
    (tmp_path / "v.ckpt").write_bytes(raw[:8] + struct.pack("<I", 99) + raw[12:])
    with pytest.raises(lio.FormatError, match="version"):
        lio.load_checkpoint(tmp_path / "v.ckpt")
    # a config block promising a different architecture breaks the shape chain
    block_len = struct.unpack("<I", raw[12:16])[0]
    block = raw[16:16 + block_len].replace(b'"hidden": 4', b'"hidden": 5')
    (tmp_path / "s.ckpt").write_bytes(raw[:16] + block + raw[16 + block_len:])
    with pytest.raises(lio.FormatError, match="shape chain"):
        lio.load_checkpoint(tmp_path / "s.ckpt")


def test_config_defaults_and_errors(tmp_path):
    (tmp_path / "empty.cfg").write_text("")
    cfg = lio.parse_config(tmp_path / "empty.cfg")
    assert (cfg.patch_size, cfg.hidden, cfg.depth, cfg.filter, cfg.tilt_drop_max) == \
        (21, 128, 5, "cosine_ramp", 30)
    with pytest.raises(lio.ConfigError, match="odd"):
        lio.parse_config_text("patch_size = 22")
    with pytest.raises(lio.ConfigError, match="patchsize"):
        lio.parse_config_text("patchsize = 21")
    with pytest.raises(lio.ConfigError, match="steps"):
        lio.parse_config_text("steps = many")
    cfg = lio.parse_config_text("# comment\nmode = wavelet\nn2n = false\nlr = 2e-4  # tuned\n")
    assert (cfg.mode, cfg.n2n, cfg.lr) == ("wavelet", False, 2e-4)
    assert cfg.net_config().out_dim == 8
