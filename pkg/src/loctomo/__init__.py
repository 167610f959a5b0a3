"""Localized learned reconstruction for parallel-beam electron tomography."""
from .fbp import FilterSpec, backproject, fbp, filter_tilt_series
from .forward import NoiseModel, PhantomSpec, apply_noise, apply_noise_pair, make_phantom, project, tilt_angles
from .geometry import DetectorSpec, PatchExtractor, PatchSpec, PatchStack, TiltSeries, Volume
from .metrics import fsc, resolution_at, self_fsc
from .net import NetConfig, SliceMlpParams, forward, init_params, slice_mlp_forward
from .recon import reconstruct_pixel, reconstruct_wavelet
from .training import TrainConfig, train
from .wavelet import dwt3, idwt3

__version__ = "0.1.0"

__all__ = [
    "DetectorSpec", "FilterSpec", "NetConfig", "NoiseModel", "PatchExtractor", "PatchSpec",
    "PatchStack", "PhantomSpec", "SliceMlpParams", "TiltSeries", "TrainConfig", "Volume",
    "apply_noise", "apply_noise_pair", "backproject", "dwt3", "fbp", "filter_tilt_series",
    "forward", "fsc", "idwt3", "init_params", "make_phantom", "project", "reconstruct_pixel",
    "reconstruct_wavelet", "resolution_at", "self_fsc", "slice_mlp_forward", "tilt_angles",
    "train",
]
