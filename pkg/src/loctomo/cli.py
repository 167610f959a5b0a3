"""Command-line pipeline: ``loctomo {simulate,fbp,train,reconstruct,fsc,repro-acceptance}``.

Settings come from built-in defaults, then ``--config`` (flat ``key = value``),
then explicit flags; later sources win. Each run writes one JSON report.
"""
from __future__ import annotations

import argparse
import contextlib
import json
import logging
import sys
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import io as lio
from .fbp import FilterSpec, fbp, filter_tilt_series
from .forward import NoiseModel, PhantomSpec, apply_noise_pair, make_phantom, project, tilt_angles
from .geometry import DetectorSpec, PatchSpec, Volume
from .metrics import fsc, mse, pearson, psnr, resolution_at
from .recon import ModeMismatchError, reconstruct_pixel, reconstruct_wavelet
from .training import TrainConfig, normalize_series, prepare_example, train
from .wavelet import get_bank

log = logging.getLogger("loctomo")

# flag name -> config key, for flags that override config values
_OVERRIDES = {"seed": "seed", "threads": "threads", "mode": "mode", "filter": "filter",
              "steps": "steps", "noise": "noise"}


class CliError(RuntimeError):
    pass


class Stage:
    """Per-stage wall-clock timings in milliseconds."""

    def __init__(self):
        self.timings: dict[str, float] = {}

    @contextlib.contextmanager
    def __call__(self, name: str):
        t0 = time.perf_counter()
        try:
            yield
        finally:
            self.timings[name] = 1000 * (time.perf_counter() - t0)


class Outputs:
    """Tracks files written by a run so a failure can remove them."""

    def __init__(self):
        self.paths: list[Path] = []

    def add(self, path) -> Path:
        path = Path(path)
        self.paths.append(path)
        return path

    def discard(self):
        for p in self.paths:
            p.unlink(missing_ok=True)


def load_config(args) -> lio.RunConfig:
    cfg = lio.parse_config(args.config) if getattr(args, "config", None) else lio.RunConfig()
    overrides = {key: getattr(args, flag) for flag, key in _OVERRIDES.items()
                 if getattr(args, flag, None) is not None}
    return lio.config_from_mapping(overrides, cfg)


def _write_report(path, report: dict) -> None:
    lio.atomic_write(path, (json.dumps(report, indent=2, default=_jsonable) + "\n").encode())


def _jsonable(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, Path):
        return str(obj)
    raise TypeError(f"cannot serialise {type(obj).__name__}")


def _quality(volume: Volume, reference_path) -> dict:
    if reference_path is None:
        return {}
    ref = lio.read_volume(reference_path)
    curve = fsc(ref, volume)
    return {"mse": mse(volume, ref), "psnr": psnr(ref, volume), "pearson": pearson(volume, ref),
            "resolution_0.5": resolution_at(curve, 0.5),
            "resolution_0.143": resolution_at(curve, 0.143)}


def _read_series(tilts, angles_path):
    angles = lio.read_tlt(angles_path)
    series = lio.read_stack(tilts, angles)
    if series.n_tilts != angles.size:
        raise CliError(f"{tilts} has {series.n_tilts} projections but {angles_path} lists {angles.size} angles")
    return series


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_simulate(args, cfg, stage, outputs) -> dict:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    phantom_seed, noise_seed = (int(s.generate_state(1)[0])
                                for s in np.random.SeedSequence(cfg.seed).spawn(2))
    with stage("phantom"):
        phantom = make_phantom(PhantomSpec(cfg.phantom, (cfg.size,) * 3, cfg.phantom_count,
                                           phantom_seed), cfg.voxel_size)
    angles = tilt_angles(cfg.tilt_min, cfg.tilt_max, cfg.tilt_step)
    det = DetectorSpec(cfg.size, cfg.size, (cfg.voxel_size,) * 2, cfg.kernel_width)
    with stage("project"):
        clean = project(phantom, angles, det, step=cfg.ray_step)
    with stage("noise"):
        even, odd = apply_noise_pair(clean, NoiseModel(cfg.noise, cfg.noise_sigma, cfg.dose, noise_seed))
    with stage("write"):
        lio.write_mrc(phantom, outputs.add(out / "phantom.mrc"))
        lio.write_mrc(even, outputs.add(out / "tilts_even.mrc"))
        lio.write_mrc(odd, outputs.add(out / "tilts_odd.mrc"))
        lio.write_tlt(angles, outputs.add(out / "angles.tlt"))
    return {"seeds": {"root": cfg.seed, "phantom": phantom_seed, "noise": noise_seed},
            "outputs": [str(p) for p in outputs.paths], "n_tilts": int(angles.size)}


def cmd_fbp(args, cfg, stage, outputs) -> dict:
    series = _read_series(args.tilts, args.angles)
    with stage("fbp"):
        vol = fbp(series, FilterSpec(cfg.filter, cfg.pad_factor),
                  voxel_size=series.detector.pixel_size[0])
    with stage("write"):
        lio.write_mrc(vol, outputs.add(args.out))
    return {"outputs": [str(args.out)], "metrics": _quality(vol, args.reference)}


def _load_dataset(dirs, cfg):
    spec = FilterSpec(cfg.filter, cfg.pad_factor)
    data = []
    for d in dirs:
        d = Path(d)
        angles = lio.read_tlt(d / "angles.tlt")
        pair = [lio.read_stack(d / name, angles) for name in ("tilts_even.mrc", "tilts_odd.mrc")]
        data.append(prepare_example(lio.read_volume(d / "phantom.mrc"), pair, spec))
    return data


def cmd_train(args, cfg, stage, outputs) -> dict:
    with stage("load"):
        data = _load_dataset(args.data, cfg)
    tc = TrainConfig(cfg.batch_size, cfg.steps, cfg.lr, cfg.lr_schedule, cfg.tilt_drop_max,
                     cfg.n2n, cfg.seed, cfg.mode)
    net = cfg.net_config()
    with stage("train"):
        result = train(data, tc, net, PatchSpec(cfg.patch_size, cfg.patch_spacing),
                       get_bank(cfg.wavelet))
    loss_csv = Path(args.loss_csv or str(args.out) + ".loss.csv")
    with stage("write"):
        extra = {"mode": cfg.mode, "wavelet": cfg.wavelet, "filter": cfg.filter,
                 "pad_factor": cfg.pad_factor, "patch_spacing": cfg.patch_spacing}
        lio.save_checkpoint(result.params, outputs.add(args.out), extra)
        rows = "".join(f"{i},{v:.10g}\n" for i, v in enumerate(result.losses))
        lio.atomic_write(outputs.add(loss_csv), ("step,loss\n" + rows).encode())
    summary = {"final_loss": float(result.losses[-min(100, len(result.losses)):].mean())
               if len(result.losses) else None}
    return {"outputs": [str(args.out), str(loss_csv)], "n_params": result.params.n_params,
            "metrics": summary}


def cmd_reconstruct(args, cfg, stage, outputs) -> dict:
    params, extra = lio.load_checkpoint(args.model)
    trained_mode = extra.get("mode", "pixel" if params.config.out_dim == 1 else "wavelet")
    mode = args.mode or trained_mode
    if mode != trained_mode:
        raise ModeMismatchError(f"checkpoint was trained in {trained_mode} mode, --mode is {mode}")
    series = _read_series(args.tilts, args.angles)
    spec = FilterSpec(extra.get("filter", cfg.filter), extra.get("pad_factor", cfg.pad_factor))
    with stage("filter"):
        filtered = filter_tilt_series(normalize_series(series), spec)
    dims = tuple(args.dims) if args.dims else (series.detector.width, series.detector.height,
                                               series.detector.width)
    stats: dict = {}
    spacing = extra.get("patch_spacing", 1.0)
    with stage("reconstruct"):
        if mode == "pixel":
            vol = reconstruct_pixel(params, filtered, dims, spacing=spacing,
                                    chunk=cfg.chunk_size or None, stats=stats)
        else:
            vol = reconstruct_wavelet(params, filtered, dims, bank=get_bank(extra.get("wavelet", "cdf53")),
                                      spacing=spacing, chunk=cfg.chunk_size or None, stats=stats)
    with stage("write"):
        lio.write_mrc(vol, outputs.add(args.out))
    return {"outputs": [str(args.out)], "mode": mode, "evaluations": stats["evaluations"],
            "metrics": _quality(vol, args.reference)}


def cmd_fsc(args, cfg, stage, outputs) -> dict:
    a, b = lio.read_volume(args.volume_a), lio.read_volume(args.volume_b)
    with stage("fsc"):
        curve = fsc(a, b)
    res = {t: resolution_at(curve, t) for t in (0.5, 0.143)}
    for t, r in res.items():
        print(f"resolution@{t}: " + ("not crossed" if r is None else f"{r:.3f}"))
    with stage("write"):
        lio.atomic_write(outputs.add(args.out), curve.to_csv().encode())
    return {"outputs": [str(args.out)],
            "metrics": {"resolution_0.5": res[0.5], "resolution_0.143": res[0.143]}}


def cmd_repro_acceptance(args, cfg, stage, outputs) -> dict:
    from .acceptance import run_all
    only = {int(x) for x in args.only.split(",")} if args.only else None
    with stage("acceptance"):
        results = run_all(only)
    failed = [r.number for r in results if not r.passed]
    report = {"results": [asdict(r) for r in results], "failed": failed}
    if failed:
        report["error"] = f"criteria failed: {failed}"
    return report


COMMANDS = {
    "simulate": cmd_simulate, "fbp": cmd_fbp, "train": cmd_train,
    "reconstruct": cmd_reconstruct, "fsc": cmd_fsc, "repro-acceptance": cmd_repro_acceptance,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key = value configuration file")
    common.add_argument("--seed", type=int)
    common.add_argument("--threads", type=int, help="cap on BLAS/OpenMP worker threads")
    common.add_argument("--report", help="run report path (JSON)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="loctomo", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", parents=[common], help="phantom and noisy even/odd tilt-series")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--noise", choices=("none", "gaussian", "poisson"))

    p = sub.add_parser("fbp", parents=[common], help="filtered backprojection")
    p.add_argument("--tilts", required=True)
    p.add_argument("--angles", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--filter", choices=("ramp", "cosine_ramp"))
    p.add_argument("--reference", help="ground-truth volume for report metrics")

    p = sub.add_parser("train", parents=[common], help="train a model on simulated data")
    p.add_argument("--data", nargs="+", required=True, help="directories written by simulate")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--loss-csv")
    p.add_argument("--steps", type=int)
    p.add_argument("--mode", choices=("pixel", "wavelet"))
    p.add_argument("--filter", choices=("ramp", "cosine_ramp"))

    p = sub.add_parser("reconstruct", parents=[common], help="reconstruct with a trained model")
    p.add_argument("--model", required=True)
    p.add_argument("--tilts", required=True)
    p.add_argument("--angles", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mode", choices=("pixel", "wavelet"))
    p.add_argument("--dims", type=int, nargs=3, metavar=("NX", "NY", "NZ"))
    p.add_argument("--reference", help="ground-truth volume for report metrics")

    p = sub.add_parser("fsc", parents=[common], help="Fourier shell correlation of two volumes")
    p.add_argument("volume_a")
    p.add_argument("volume_b")
    p.add_argument("--out", default="fsc.csv", help="curve CSV")

    p = sub.add_parser("repro-acceptance", parents=[common], help="run the acceptance suite")
    p.add_argument("--only", help="comma-separated criterion numbers")
    return parser


def _default_report(args) -> Path:
    if args.report:
        return Path(args.report)
    if args.command == "simulate":
        return Path(args.out) / "report.json"
    if args.command == "repro-acceptance":
        return Path("acceptance_report.json")
    return Path(str(args.out) + ".report.json")


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    stage, outputs = Stage(), Outputs()
    report: dict = {"subcommand": args.command}
    try:
        cfg = load_config(args)
        report["config"] = asdict(cfg)
        limiter = contextlib.nullcontext()
        if cfg.threads:
            from threadpoolctl import threadpool_limits
            limiter = threadpool_limits(cfg.threads)
        with limiter:
            report.update(COMMANDS[args.command](args, cfg, stage, outputs))
    except (lio.ConfigError, lio.FormatError, CliError, ValueError, OSError) as exc:
        outputs.discard()
        report["error"] = f"{type(exc).__name__}: {exc}"
    report["timings_ms"] = stage.timings
    try:
        _write_report(_default_report(args), report)
    except OSError as exc:
        report.setdefault("error", f"could not write report: {exc}")
    if "error" in report:
        print(f"loctomo {args.command}: error: {report['error']}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
