"""Acceptance suite shared by the test-suite and ``loctomo repro-acceptance``.

Each ``criterion_*`` function runs one check end to end and returns a
:class:`CriterionResult`. The learning criteria (7-9) share one trained
experiment, built lazily by :func:`learning_experiment` and cached per process.
"""
from __future__ import annotations

import functools
import os
import tempfile
import time
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from . import io as lio
from .fbp import FilterSpec, backproject, fbp, filter_tilt_series
from .forward import NoiseModel, PhantomSpec, apply_noise, apply_noise_pair, make_phantom, project, tilt_angles
from .geometry import DetectorSpec, PatchStack, TiltSeries, Volume, trajectory_uv, voxel_coordinates
from .metrics import (FscCurve, crossing_frequency, empty_region_histogram, fsc, mse, pearson,
                      resolution_at)
from .net import (NetConfig, backward, fbp_witness, forward, init_params, slice_mlp_forward)
from .recon import evaluate_points, reconstruct_pixel, reconstruct_wavelet
from .training import TrainConfig, normalize_series, prepare_example, train
from .wavelet import dwt3, idwt3


@dataclass
class CriterionResult:
    number: int
    name: str
    passed: bool
    seconds: float
    details: dict = field(default_factory=dict)

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        summary = ", ".join(f"{k}={_fmt(v)}" for k, v in self.details.items())
        return f"[{status}] {self.number:2d} {self.name} ({self.seconds:.1f}s) {summary}"


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.4g}"
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_fmt(x) for x in v) + "]"
    return str(v)


def _timed(number: int, name: str):
    def wrap(fn):
        @functools.wraps(fn)
        def run(*args, **kwargs) -> CriterionResult:
            t0 = time.perf_counter()
            passed, details = fn(*args, **kwargs)
            return CriterionResult(number, name, bool(passed), time.perf_counter() - t0, details)
        run.number = number
        return run
    return wrap


# ---------------------------------------------------------------------------
# 1-6: geometry, FBP and network properties
# ---------------------------------------------------------------------------

@_timed(1, "locality of point-source projections")
def criterion_locality(size: int = 64, r0=(8.0, -3.5, 18.0)):
    t0 = time.perf_counter()
    vol = np.zeros((size,) * 3)
    idx = np.round(np.asarray(r0) + (size - 1) / 2).astype(int)
    vol[tuple(idx)] = 1.0
    r = idx - (size - 1) / 2
    angles = tilt_angles()
    series = project(Volume(vol), angles, DetectorSpec(size, size))
    u, v = trajectory_uv(r[None], angles)
    cols = np.arange(size) - (size - 1) / 2
    fractions = []
    for k in range(angles.size):
        mass = np.abs(series.projections[k])
        near = (np.abs(cols[None, :] - u[0, k]) <= 1.0) & (np.abs(cols[:, None] - v[0, k]) <= 1.0)
        fractions.append(mass[near].sum() / mass.sum())
    seconds = time.perf_counter() - t0
    worst = float(min(fractions))
    return worst >= 0.95 and seconds < 10, {"min_fraction": worst, "runtime_s": seconds}


@_timed(2, "FBP sanity and wedge degradation")
def criterion_fbp(size: int = 64):
    t0 = time.perf_counter()
    phantom = make_phantom(PhantomSpec("spheres", (size,) * 3, seed=3))
    det = DetectorSpec(size, size)
    full = np.deg2rad(np.linspace(-89.0, 89.0, 90))
    c_full = pearson(fbp(project(phantom, full, det)), phantom)
    c_wedge = pearson(fbp(project(phantom, tilt_angles(), det)), phantom)
    seconds = time.perf_counter() - t0
    ok = c_full > 0.9 and c_wedge < c_full and seconds < 60
    return ok, {"corr_full": c_full, "corr_wedge": c_wedge, "runtime_s": seconds}


def _small_config(pooling: str = "mean") -> NetConfig:
    return NetConfig(patch_size=5, features=4, hidden=6, depth=1, pe_dim=8, pooling=pooling)


def gradient_check(seed: int, pooling: str = "mean", h: float = 1e-6) -> dict[str, float]:
    """Relative error of analytic vs central-difference gradients, per tensor.

    The error is ``||g - g_fd|| / ||g_fd||`` over each tensor's entries.
    """
    cfg = _small_config(pooling)
    rng = np.random.default_rng(seed)
    params = init_params(cfg, rng)
    B, N = 4, 7
    patches = rng.standard_normal((B, N, cfg.patch_size, cfg.patch_size))
    angles = np.sort(rng.uniform(-1.0, 1.0, (B, N)), axis=1)
    mask = np.ones((B, N), dtype=bool)
    mask[1, 5:] = False
    dout = rng.standard_normal((B, 1))

    def objective(p):
        return float(np.sum(forward(p, patches, angles, mask) * dout))

    _, cache = forward(params, patches, angles, mask, keep_cache=True)
    grads = backward(params, cache, dout)
    errors = {}
    for name, tensor in params.tensors.items():
        fd = np.empty_like(tensor)
        for i in np.ndindex(tensor.shape):
            orig = tensor[i]
            tensor[i] = orig + h
            up = objective(params)
            tensor[i] = orig - h
            down = objective(params)
            tensor[i] = orig
            fd[i] = (up - down) / (2 * h)
        scale = max(np.linalg.norm(fd), 1e-12)
        errors[name] = float(np.linalg.norm(grads[name] - fd) / scale)
    return errors


@_timed(3, "reverse-mode gradients vs finite differences")
def criterion_gradients(seeds=(0, 1, 2, 3, 4)):
    t0 = time.perf_counter()
    worst = 0.0
    for seed in seeds:
        for pooling in ("mean", "max"):
            worst = max(worst, max(gradient_check(seed, pooling).values()))
    seconds = time.perf_counter() - t0
    return worst < 1e-4 and seconds < 120, {"max_rel_err": worst, "runtime_s": seconds}


@_timed(4, "1-homogeneity")
def criterion_homogeneity(n_stacks: int = 100, seed: int = 0):
    cfg = NetConfig()
    rng = np.random.default_rng(seed)
    params = init_params(cfg, rng)
    angles = tilt_angles()
    patches = rng.standard_normal((n_stacks, angles.size, cfg.patch_size, cfg.patch_size))
    base = forward(params, patches, angles)
    worst = 0.0
    for alpha in (0.5, 2.0, 10.0):
        scaled = forward(params, alpha * patches, angles)
        err = np.abs(scaled - alpha * base) / np.maximum(np.abs(alpha * base), 1e-300)
        worst = max(worst, float(err.max()))
    return worst < 1e-5, {"max_rel_err": worst}


@_timed(5, "joint tilt-permutation invariance")
def criterion_permutation(n_perms: int = 50, seed: int = 0):
    cfg = NetConfig()
    rng = np.random.default_rng(seed)
    params = init_params(cfg, rng)
    angles = tilt_angles()
    stack = PatchStack(rng.standard_normal((angles.size, cfg.patch_size, cfg.patch_size)), angles)
    ref = slice_mlp_forward(params, stack)
    mismatches = 0
    for _ in range(n_perms):
        perm = rng.permutation(angles.size)
        out = slice_mlp_forward(params, PatchStack(stack.data[perm], angles[perm]))
        mismatches += int(out.tobytes() != ref.tobytes())
    return mismatches == 0, {"bit_mismatches": mismatches, "perms": n_perms}


@_timed(6, "FBP-equivalence witness")
def criterion_witness(size: int = 64, n_points: int = 1000, seed: int = 0):
    rng = np.random.default_rng(seed)
    phantom = make_phantom(PhantomSpec("spheres", (size,) * 3, seed=seed))
    raw = project(phantom, tilt_angles(), DetectorSpec(size, size))
    filtered = filter_tilt_series(normalize_series(raw))
    reference = backproject(filtered, (size,) * 3).data
    idx = rng.integers(0, size, size=(n_points, 3))
    points = voxel_coordinates((size,) * 3, idx)
    witness = fbp_witness(NetConfig())
    out = evaluate_points(witness, filtered, points)[:, 0]
    err = float(np.abs(out - reference[idx[:, 0], idx[:, 1], idx[:, 2]]).max())
    return err < 1e-5, {"max_abs_err": err, "value_scale": float(np.abs(reference).max())}


# ---------------------------------------------------------------------------
# 7-9: trained models
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LearningSetup:
    size: int = 64
    n_train: int = 8
    steps: int = 5000
    batch_size: int = 64
    lr: float = 1e-3
    seed: int = 0
    target_fbp_corr: float = 0.5
    net: NetConfig = NetConfig(patch_size=15, features=32, hidden=64, depth=3, pe_dim=64)


def calibrate_sigma(phantom: Volume, clean: TiltSeries, target: float,
                    spec: FilterSpec = FilterSpec()) -> float:
    """Gaussian sigma at which FBP of ``clean + noise`` correlates ``target`` with the phantom.

    FBP is linear, so the noisy reconstruction is ``S + sigma * U`` with ``U``
    the reconstruction of one fixed unit-variance noise draw.
    """
    signal = fbp(clean, spec).data
    zeros = clean.with_projections(np.zeros_like(clean.projections))
    unit = fbp(apply_noise(zeros, NoiseModel("gaussian", 1.0, seed=9999)), spec).data
    truth = phantom.data.ravel()

    def corr(sigma):
        return np.corrcoef(truth, (signal + sigma * unit).ravel())[0, 1]

    lo, hi = 0.0, 1.0
    while corr(hi) > target:
        hi *= 2
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        lo, hi = (mid, hi) if corr(mid) > target else (lo, mid)
    return 0.5 * (lo + hi)


def empty_box(truth: np.ndarray, side: int = 12, clearance: int = 2) -> tuple[slice, ...]:
    """The cube of the given side, nearest the centre, at least ``clearance`` voxels from any object."""
    occupied = ndimage.binary_dilation(truth != 0, iterations=clearance)
    counts = ndimage.uniform_filter(occupied.astype(np.float64), size=side, mode="constant",
                                    cval=1.0)
    half = side // 2
    valid = np.zeros_like(occupied)
    inner = tuple(slice(half, n - side + half + 1) for n in truth.shape)
    valid[inner] = counts[inner] < 0.5 / side ** 3
    cand = np.argwhere(valid)
    if cand.size == 0:
        raise ValueError(f"no empty {side}^3 box in the phantom")
    centre = (np.asarray(truth.shape) - 1) / 2
    best = cand[np.argmin(np.linalg.norm(cand - centre, axis=1))]
    return tuple(slice(int(c) - half, int(c) - half + side) for c in best)


@dataclass
class LearningExperiment:
    setup: LearningSetup
    truth: Volume  # normalised held-out phantom
    truth_raw: Volume
    test_pair: tuple[TiltSeries, TiltSeries]
    sigma: float
    pixel: object
    wavelet: object
    recon_pixel: Volume
    recon_wavelet: Volume
    fbp: Volume
    stats_pixel: dict
    stats_wavelet: dict
    seconds: dict


def _phantoms(setup: LearningSetup):
    n = setup.size
    kinds = ("spheres", "shells")
    return [make_phantom(PhantomSpec(kinds[i % 2], (n,) * 3, seed=setup.seed + i))
            for i in range(setup.n_train + 1)]


def build_learning_experiment(setup: LearningSetup = LearningSetup(), log=print) -> LearningExperiment:
    seconds = {}
    t0 = time.perf_counter()
    n = setup.size
    angles = tilt_angles()
    det = DetectorSpec(n, n)
    phantoms = _phantoms(setup)
    clean = [project(v, angles, det) for v in phantoms]
    sigma = calibrate_sigma(phantoms[0], clean[0], setup.target_fbp_corr)
    data = [prepare_example(v, apply_noise_pair(c, NoiseModel("gaussian", sigma, seed=100 + i)))
            for i, (v, c) in enumerate(zip(phantoms, clean))]
    seconds["simulate"] = time.perf_counter() - t0
    log(f"simulated {len(data)} phantoms, sigma={sigma:.3f} ({seconds['simulate']:.0f}s)")

    train_set, (truth, test_pair) = data[:setup.n_train], data[setup.n_train]
    models = {}
    for mode in ("pixel", "wavelet"):
        t = time.perf_counter()
        out_dim = 1 if mode == "pixel" else 8
        net = NetConfig(**{**setup.net.__dict__, "out_dim": out_dim})
        cfg = TrainConfig(batch_size=setup.batch_size, steps=setup.steps, lr=setup.lr,
                          lr_schedule="cosine", seed=setup.seed, mode=mode)
        models[mode] = train(train_set, cfg, net)
        seconds[f"train_{mode}"] = time.perf_counter() - t
        log(f"trained {mode} model: final loss {models[mode].losses[-200:].mean():.4f} "
            f"({seconds[f'train_{mode}']:.0f}s)")

    stats_p, stats_w = {}, {}
    rec_p = reconstruct_pixel(models["pixel"].params, test_pair[0], (n,) * 3, stats=stats_p)
    rec_w = reconstruct_wavelet(models["wavelet"].params, test_pair[0], (n,) * 3, stats=stats_w)
    seconds["reconstruct_pixel"] = stats_p["seconds"]
    seconds["reconstruct_wavelet"] = stats_w["seconds"]
    ref = backproject(test_pair[0], (n,) * 3)
    seconds["total"] = time.perf_counter() - t0
    return LearningExperiment(setup, truth, phantoms[setup.n_train], test_pair, sigma,
                              models["pixel"], models["wavelet"], rec_p, rec_w, ref,
                              stats_p, stats_w, seconds)


@functools.lru_cache(maxsize=2)
def learning_experiment(setup: LearningSetup = LearningSetup()) -> LearningExperiment:
    return build_learning_experiment(setup)


def affine_fit(estimate: Volume, truth: Volume) -> Volume:
    """Least-squares ``a * estimate + b`` against the truth (the most favourable FBP scaling)."""
    A = np.stack([estimate.data.ravel(), np.ones(estimate.data.size)], axis=1)
    coef = np.linalg.lstsq(A, truth.data.ravel(), rcond=None)[0]
    return Volume((A @ coef).reshape(truth.dims), truth.voxel_size)


@_timed(7, "learning gain over FBP")
def criterion_learning_gain(exp: LearningExperiment | None = None):
    exp = exp or learning_experiment()
    truth = exp.truth
    fbp_cal = affine_fit(exp.fbp, truth)
    mse_net, mse_fbp = mse(exp.recon_pixel, truth), mse(fbp_cal, truth)
    f_net = crossing_frequency(fsc(truth, exp.recon_pixel), 0.5)
    f_fbp = crossing_frequency(fsc(truth, exp.fbp), 0.5)
    region = empty_box(exp.truth_raw.data)
    std_net = empty_region_histogram(exp.recon_pixel, region).std
    std_fbp = empty_region_histogram(exp.fbp, region).std
    finer = f_fbp is not None and (f_net is None or f_net > f_fbp)
    runtime = exp.seconds["simulate"] + exp.seconds["train_pixel"] + exp.seconds["reconstruct_pixel"]
    ok = mse_net < mse_fbp and finer and std_net < std_fbp and runtime < 45 * 60
    return ok, {"mse_net": mse_net, "mse_fbp": mse_fbp, "fsc05_net": f_net, "fsc05_fbp": f_fbp,
                "empty_std_net": std_net, "empty_std_fbp": std_fbp, "runtime_s": runtime}


@_timed(8, "wavelet mode")
def criterion_wavelet(exp: LearningExperiment | None = None, seed: int = 0):
    rng = np.random.default_rng(seed)
    errs = []
    for dims in ((64, 64, 64), (17, 8, 33)):
        vol = Volume(rng.standard_normal(dims))
        errs.append(float(np.abs(idwt3(dwt3(vol)).data - vol.data).max()))
    exp = exp or learning_experiment()
    ratio_evals = exp.stats_pixel["evaluations"] / exp.stats_wavelet["evaluations"]
    speedup = exp.stats_pixel["seconds"] / exp.stats_wavelet["seconds"]
    corr = pearson(exp.recon_pixel, exp.recon_wavelet)
    ok = max(errs) < 1e-6 and ratio_evals == 8 and speedup >= 4 and corr > 0.9
    return ok, {"roundtrip_err": max(errs), "eval_ratio": ratio_evals, "speedup": speedup,
                "pixel_vs_wavelet_corr": corr}


def tilt_drop_curve(exp: LearningExperiment, fractions=(0.0, 0.1, 0.2, 0.3), seeds=range(5),
                    n_points: int = 10000) -> tuple[np.ndarray, bool, bool]:
    """MSE at sampled voxels after dropping tilts at inference -> ``(len(seeds), len(fractions))``."""
    params = exp.pixel.params
    shapes = {k: v.shape for k, v in params.tensors.items()}
    series = exp.test_pair[0]
    rng = np.random.default_rng(1234)
    idx = rng.integers(0, exp.truth.dims, size=(n_points, 3))
    points = voxel_coordinates(exp.truth.dims, idx)
    target = exp.truth.data[idx[:, 0], idx[:, 1], idx[:, 2]]
    table = np.empty((len(seeds), len(fractions)))
    finite = True
    for i, seed in enumerate(seeds):
        pick = np.random.default_rng(seed)
        for j, frac in enumerate(fractions):
            n_drop = int(round(frac * series.n_tilts))
            keep = np.sort(pick.permutation(series.n_tilts)[n_drop:])
            out = evaluate_points(params, series.subset(keep), points)[:, 0]
            finite &= bool(np.all(np.isfinite(out)))
            table[i, j] = np.mean((out - target) ** 2)
    unchanged = shapes == {k: v.shape for k, v in params.tensors.items()}
    return table, finite, unchanged


@_timed(9, "variable tilt count")
def criterion_tilt_drop(exp: LearningExperiment | None = None):
    exp = exp or learning_experiment()
    table, finite, unchanged = tilt_drop_curve(exp)
    mean = table.mean(axis=0)
    monotone = bool(np.all(np.diff(mean) >= 0))
    return finite and unchanged and monotone, {"mean_mse": mean.tolist(), "finite": finite}


# ---------------------------------------------------------------------------
# 10-11: metrics and I/O
# ---------------------------------------------------------------------------

def hand_crossing_curve() -> tuple[FscCurve, float]:
    """A curve whose 0.5 crossing sits halfway between shells 2 and 3 of 32 (f = 5/128)."""
    values = np.array([1.0, 0.875, 0.75, 0.25] + [0.0] * 28)
    curve = FscCurve(np.arange(32) / 64, values, pixel_size=2.0)
    return curve, 2.0 / (5 / 128)


@_timed(10, "FSC suite")
def criterion_fsc(size: int = 64, seed: int = 0):
    rng = np.random.default_rng(seed)
    a = Volume(rng.standard_normal((size,) * 3))
    b = Volume(rng.standard_normal((size,) * 3))
    phantom = make_phantom(PhantomSpec("spheres", (size,) * 3, seed=seed))
    self_dev = float(np.abs(fsc(phantom, phantom).values - 1).max())
    indep = float(np.abs(fsc(a, b).values).mean())
    base = fsc(phantom, a).values
    scale_dev = max(float(np.abs(fsc(Volume(c * phantom.data), a).values - base).max())
                    for c in (0.001, 3.0, 1e4))
    curve, expected = hand_crossing_curve()
    got = resolution_at(curve, 0.5)
    ok = self_dev < 1e-6 and indep < 0.1 and scale_dev < 1e-10 and got == expected
    return ok, {"self_dev": self_dev, "indep_mean_abs": indep, "scale_dev": scale_dev,
                "crossing": got, "expected": expected}


def fuzz_mrc(valid: bytes, rng: np.random.Generator, n_cases: int = 500) -> list[str]:
    """Mutate a valid file's header; return descriptions of any untyped failures."""
    failures = []
    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "fuzz.mrc")
        for case in range(n_cases):
            raw = bytearray(valid)
            kind = case % 4
            if kind == 0:
                for pos in rng.integers(0, lio.HEADER_BYTES, size=rng.integers(1, 16)):
                    raw[pos] = int(rng.integers(0, 256))
            elif kind == 1:
                word = int(rng.integers(0, 56))
                val = int(rng.choice([-(2 ** 31), -1, 0, 1, 3, 4, 7, 2 ** 16, 2 ** 31 - 1]))
                raw[4 * word:4 * word + 4] = np.int32(val).tobytes()
            elif kind == 2:
                raw = raw[:int(rng.integers(0, len(raw)))]
            else:
                raw = bytearray(rng.integers(0, 256, size=int(rng.integers(0, 2048)),
                                             dtype=np.uint8).tobytes())
            with open(path, "wb") as fh:
                fh.write(raw)
            try:
                lio.read_mrc(path)
            except lio.FormatError:
                pass
            except Exception as exc:  # noqa: BLE001 - the point is to catch anything else
                failures.append(f"case {case}: {type(exc).__name__}: {exc}")
    return failures


def fuzz_checkpoint(valid: bytes, rng: np.random.Generator, n_cases: int = 300) -> list[str]:
    failures = []
    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "fuzz.ckpt")
        for case in range(n_cases):
            raw = bytearray(valid)
            if case % 2 == 0:
                for pos in rng.integers(0, min(len(raw), 600), size=rng.integers(1, 8)):
                    raw[pos] = int(rng.integers(0, 256))
            else:
                raw = raw[:int(rng.integers(0, len(raw)))]
            with open(path, "wb") as fh:
                fh.write(raw)
            try:
                lio.load_checkpoint(path)
            except lio.FormatError:
                pass
            except Exception as exc:  # noqa: BLE001
                failures.append(f"case {case}: {type(exc).__name__}: {exc}")
    return failures


@_timed(11, "I/O round-trips and fuzzing")
def criterion_io(seed: int = 0):
    rng = np.random.default_rng(seed)
    details = {}
    with tempfile.TemporaryDirectory() as tmp:
        vol = Volume(rng.standard_normal((13, 7, 5)).astype(np.float32), voxel_size=2.5)
        path = os.path.join(tmp, "vol.mrc")
        lio.write_mrc(vol, path)
        back = lio.read_volume(path)
        mrc_ok = (back.data.astype(np.float32).tobytes() == vol.data.astype(np.float32).tobytes()
                  and back.voxel_size == vol.voxel_size
                  and os.path.getsize(path) == 1024 + 4 * vol.data.size)

        cfg = NetConfig(patch_size=5, features=4, hidden=6, depth=1, pe_dim=8)
        params = init_params(cfg, rng).map(lambda t: t.astype(np.float32).astype(np.float64))
        ckpt = os.path.join(tmp, "model.ckpt")
        lio.save_checkpoint(params, ckpt, {"mode": "pixel"})
        loaded, extra = lio.load_checkpoint(ckpt)
        x = rng.standard_normal((3, 7, 5, 5))
        ang = np.linspace(-1, 1, 7)
        ckpt_ok = (all(loaded.tensors[k].tobytes() == params.tensors[k].tobytes() for k in params.tensors)
                   and forward(loaded, x, ang).tobytes() == forward(params, x, ang).tobytes()
                   and extra == {"mode": "pixel"})
        with open(path, "rb") as fh:
            mrc_bytes = fh.read()
        with open(ckpt, "rb") as fh:
            ckpt_bytes = fh.read()
    failures = fuzz_mrc(mrc_bytes, rng) + fuzz_checkpoint(ckpt_bytes, rng)
    details.update(mrc_roundtrip=mrc_ok, checkpoint_roundtrip=ckpt_ok, untyped_failures=len(failures))
    if failures:
        details["first_failure"] = failures[0]
    return mrc_ok and ckpt_ok and not failures, details


CRITERIA = (
    criterion_locality, criterion_fbp, criterion_gradients, criterion_homogeneity,
    criterion_permutation, criterion_witness, criterion_learning_gain, criterion_wavelet,
    criterion_tilt_drop, criterion_fsc, criterion_io,
)


def run_all(only=None, log=print) -> list[CriterionResult]:
    results = []
    for crit in CRITERIA:
        if only and crit.number not in only:
            continue
        result = crit()
        log(result.line())
        results.append(result)
    return results
