"""Time pixel-mode vs wavelet-mode inference for an untrained network on one grid."""
import argparse
import time

import numpy as np

from loctomo.fbp import filter_tilt_series
from loctomo.forward import PhantomSpec, make_phantom, project, tilt_angles
from loctomo.geometry import DetectorSpec
from loctomo.net import NetConfig, init_params
from loctomo.recon import reconstruct_pixel, reconstruct_wavelet


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--size", type=int, default=64)
    parser.add_argument("--patch", type=int, default=15)
    parser.add_argument("--repeats", type=int, default=1)
    args = parser.parse_args()
    n = args.size
    series = filter_tilt_series(project(make_phantom(PhantomSpec(size=(n,) * 3)), tilt_angles(),
                                        DetectorSpec(n, n)))
    base = dict(patch_size=args.patch, features=32, hidden=64, depth=3, pe_dim=64)
    runs = {"pixel": (reconstruct_pixel, NetConfig(**base)),
            "wavelet": (reconstruct_wavelet, NetConfig(**base, out_dim=8))}
    timings = {}
    for mode, (fn, cfg) in runs.items():
        params = init_params(cfg, 0)
        best = np.inf
        for _ in range(args.repeats):
            stats = {}
            t0 = time.perf_counter()
            fn(params, series, (n,) * 3, stats=stats)
            best = min(best, time.perf_counter() - t0)
        timings[mode] = best
        print(f"{mode:8s} {stats['evaluations']:8d} evaluations  {best:7.2f}s")
    print(f"speed-up {timings['pixel'] / timings['wavelet']:.1f}x")


if __name__ == "__main__":
    main()
