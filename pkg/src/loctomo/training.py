"""Supervised training of the SliceMLP on (volume, filtered tilt-series) pairs."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .fbp import FilterSpec, filter_tilt_series
from .forward import trilinear
from .geometry import PatchExtractor, PatchSpec, TiltSeries, Volume
from .net import (AdamState, Batch, DivergenceError, NetConfig, SliceMlpParams, adam_step,
                  init_params, loss_and_grad)
from .wavelet import SubbandSet, WaveletBank, cdf53, check_containment, wavelet_targets

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 64
    steps: int = 1000
    lr: float = 1e-3
    lr_schedule: str = "constant"
    tilt_drop_max: int = 30
    n2n: bool = True
    seed: int = 0
    mode: str = "pixel"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError(f"unknown lr schedule {self.lr_schedule!r}")
        if self.mode not in ("pixel", "wavelet"):
            raise ValueError(f"mode must be 'pixel' or 'wavelet', got {self.mode!r}")
        if self.tilt_drop_max < 0:
            raise ValueError("tilt_drop_max must be >= 0")

    @property
    def out_dim(self) -> int:
        return 1 if self.mode == "pixel" else 8

    def lr_at(self, step: int) -> float:
        if self.lr_schedule == "cosine" and self.steps > 0:
            return 0.5 * self.lr * (1 + math.cos(math.pi * step / self.steps))
        return self.lr


def normalize_volume(volume: Volume) -> Volume:
    data = volume.data - volume.data.mean()
    std = data.std()
    return Volume(data / std if std > 0 else data, volume.voxel_size)


def normalize_series(series: TiltSeries) -> TiltSeries:
    std = series.projections.std()
    return series.with_projections(series.projections / std if std > 0 else series.projections)


def prepare_example(volume: Volume, series: Sequence[TiltSeries],
                    filter_spec: FilterSpec = FilterSpec()) -> tuple[Volume, tuple[TiltSeries, ...]]:
    """Normalise a raw pair (zero-mean unit-std volume, unit-std series) and filter the series."""
    return normalize_volume(volume), tuple(
        filter_tilt_series(normalize_series(s), filter_spec) for s in series
    )


@dataclass
class _Example:
    volume: Volume
    extractors: list[PatchExtractor]
    angles: np.ndarray
    subbands: SubbandSet | None = None


def _make_example(volume, series, patch_spec, mode, bank) -> _Example:
    series = (series,) if isinstance(series, TiltSeries) else tuple(series)
    if not 1 <= len(series) <= 2:
        raise ValueError("expected one tilt-series or an even/odd pair")
    for s in series:
        if not s.filtered:
            raise ValueError("training tilt-series must be filtered")
        if not np.array_equal(s.angles, series[0].angles):
            raise ValueError("paired tilt-series must share their angles")
    subbands = wavelet_targets(volume, bank) if mode == "wavelet" else None
    extractors = [PatchExtractor(s.projections, s.angles, patch_spec) for s in series]
    return _Example(volume, extractors, series[0].angles, subbands)


def _sample(example: _Example, config: TrainConfig, rng: np.random.Generator) -> Batch:
    B = config.batch_size
    N = example.angles.size
    if config.tilt_drop_max >= N:
        raise ValueError(f"tilt_drop_max={config.tilt_drop_max} must be smaller than N={N}")
    dims = np.asarray(example.volume.dims, dtype=np.float64)
    if config.mode == "pixel":
        pts = rng.uniform(-(dims - 1) / 2, (dims - 1) / 2, size=(B, 3))
        idx = pts + (dims - 1) / 2
        targets = trilinear(example.volume.data, idx[:, 0], idx[:, 1], idx[:, 2])[:, None]
    else:
        coarse = np.asarray(example.subbands.coarse_dims)
        site = rng.integers(0, coarse, size=(B, 3))
        pts = 2 * site + 0.5 - (dims - 1) / 2
        targets = example.subbands.coeffs[:, site[:, 0], site[:, 1], site[:, 2]].T
    if config.n2n and len(example.extractors) == 2:
        which = rng.integers(0, 2, size=B)
    else:
        which = np.zeros(B, dtype=int)
    n_drop = rng.integers(0, config.tilt_drop_max + 1, size=B)
    rank = np.argsort(np.argsort(rng.random((B, N)), axis=1), axis=1)
    mask = rank >= n_drop[:, None]

    P = example.extractors[0].spec.size
    patches = np.empty((B, N, P, P))
    for i, extractor in enumerate(example.extractors):
        sel = which == i
        if sel.any():
            patches[sel] = extractor(pts[sel])
    angles = np.broadcast_to(example.angles, (B, N)).copy()
    return Batch(patches, angles, mask, targets)


def sample_training_batch(volume: Volume, filtered_pair, config: TrainConfig,
                          rng: np.random.Generator, patch_spec: PatchSpec = PatchSpec(),
                          bank: WaveletBank | None = None) -> Batch:
    """Random continuous locations, their targets, and (tilt-dropped) patch stacks."""
    example = _make_example(volume, filtered_pair, patch_spec, config.mode, bank or cdf53())
    return _sample(example, config, rng)


@dataclass
class TrainResult:
    params: SliceMlpParams
    losses: np.ndarray
    state: AdamState | None = None
    extra: dict = field(default_factory=dict)


def train(dataset: Sequence[tuple[Volume, Sequence[TiltSeries]]], config: TrainConfig,
          net_config: NetConfig | None = None, patch_spec: PatchSpec | None = None,
          bank: WaveletBank | None = None, init: SliceMlpParams | None = None,
          callback: Callable[[int, float], None] | None = None) -> TrainResult:
    """Adam on batches sampled round-robin over the training volumes."""
    if not dataset:
        raise ValueError("need at least one training example")
    net_config = net_config or NetConfig(out_dim=config.out_dim)
    if net_config.out_dim != config.out_dim:
        raise ValueError(f"{config.mode} mode needs out_dim {config.out_dim}, got {net_config.out_dim}")
    patch_spec = patch_spec or PatchSpec(net_config.patch_size)
    if patch_spec.size != net_config.patch_size:
        raise ValueError("patch spec and network disagree on P")
    bank = bank or cdf53()
    if config.mode == "wavelet":
        check_containment(bank, patch_spec.size, patch_spec.spacing)

    init_seq, sample_seq = np.random.SeedSequence(config.seed).spawn(2)
    params = init if init is not None else init_params(net_config, np.random.default_rng(init_seq))
    if config.steps == 0:
        return TrainResult(params, np.zeros(0))
    examples = [_make_example(v, s, patch_spec, config.mode, bank) for v, s in dataset]
    rng = np.random.default_rng(sample_seq)
    state = AdamState.zeros_like(params, lr=config.lr, beta1=config.beta1,
                                 beta2=config.beta2, eps=config.eps)
    losses = np.empty(config.steps)
    for step in range(config.steps):
        batch = _sample(examples[step % len(examples)], config, rng)
        try:
            loss, grads = loss_and_grad(params, batch)
        except DivergenceError as exc:
            raise DivergenceError(f"training diverged at step {step}: {exc}") from exc
        params, state = adam_step(params, grads, state, config.lr_at(step))
        losses[step] = loss
        if callback is not None:
            callback(step, loss)
        if step % 500 == 0:
            log.info("step %d loss %.5f", step, loss)
    return TrainResult(params, losses, state)
