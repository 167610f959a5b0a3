"""SliceMLP: bias-free slice-wise Deep-Sets network with hand-written backprop.

A patch stack ``(N, P, P)`` is split along the tilt axis (last patch axis,
``v``) into ``P`` slices of shape ``(N, P)``. Each slice goes through its own
set-MLP:

    e_k    = embed_s(slice[k]) * pe(theta_k)      per tilt, embed is linear
    pooled = mean_k e_k                            (sum / max selectable)
    out_s  = MLP_s(pooled)                         R^F

and the ``P * F`` concatenated features go through the combiner MLP. Every
layer is a plain matrix product followed by ReLU (none after the last), so
the network is positively 1-homogeneous in its input.

All slice parameters are stacked on a leading axis so the ``P`` set-MLPs run
as one batched matmul.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

from .geometry import PatchStack

POOLINGS = ("mean", "sum", "max")


class DivergenceError(FloatingPointError):
    """Raised when activations, the loss or gradients become non-finite."""


@dataclass(frozen=True)
class NetConfig:
    patch_size: int = 21
    features: int = 128
    hidden: int = 128
    depth: int = 5
    pe_dim: int = 128
    out_dim: int = 1
    pooling: str = "mean"
    pe_scale: float | None = None  # angle multiplier before the sinusoids; None -> pe_dim / pi

    def __post_init__(self):
        if self.patch_size < 1 or self.patch_size % 2 == 0:
            raise ValueError(f"patch_size must be odd, got {self.patch_size}")
        if self.out_dim not in (1, 8):
            raise ValueError(f"out_dim must be 1 (pixel) or 8 (wavelet), got {self.out_dim}")
        if self.pe_dim < 2 or self.pe_dim % 2:
            raise ValueError(f"pe_dim must be even, got {self.pe_dim}")
        if self.pooling not in POOLINGS:
            raise ValueError(f"pooling must be one of {POOLINGS}, got {self.pooling!r}")
        if min(self.features, self.hidden) < 1 or self.depth < 0:
            raise ValueError("features, hidden must be >= 1 and depth >= 0")

    @property
    def angle_scale(self) -> float:
        return self.pe_dim / np.pi if self.pe_scale is None else float(self.pe_scale)

    def tensor_shapes(self) -> dict[str, tuple[int, ...]]:
        """Declared parameter order and shapes."""
        P = self.patch_size
        shapes: dict[str, tuple[int, ...]] = {"embed": (P, P, self.pe_dim)}
        trunk = [self.pe_dim] + [self.hidden] * (self.depth + 1) + [self.features]
        for i, (a, b) in enumerate(zip(trunk[:-1], trunk[1:])):
            shapes[f"trunk.{i}"] = (P, a, b)
        comb = [P * self.features] + [self.hidden] * (self.depth + 1) + [self.out_dim]
        for i, (a, b) in enumerate(zip(comb[:-1], comb[1:])):
            shapes[f"comb.{i}"] = (a, b)
        return shapes


@dataclass
class MlpParams:
    """Bias-free MLP ``W_out relu(... relu(W_in x))``; matrices are ``(in, out)``."""

    weights: list[np.ndarray]

    def __call__(self, x: np.ndarray) -> np.ndarray:
        h = np.asarray(x, dtype=np.float64)
        for i, w in enumerate(self.weights):
            h = h @ w
            if i < len(self.weights) - 1:
                h = np.maximum(h, 0.0)
        return h


@dataclass
class SetMlpParams:
    embed: np.ndarray  # (P, pe_dim)
    trunk: MlpParams


@dataclass
class SliceMlpParams:
    config: NetConfig
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        shapes = self.config.tensor_shapes()
        if list(self.tensors) != list(shapes):
            raise ValueError(f"parameter names {list(self.tensors)} do not match {list(shapes)}")
        for name, shape in shapes.items():
            if self.tensors[name].shape != shape:
                raise ValueError(f"{name}: shape {self.tensors[name].shape}, expected {shape}")

    @property
    def n_params(self) -> int:
        return int(sum(t.size for t in self.tensors.values()))

    @property
    def trunk(self) -> list[np.ndarray]:
        return [self.tensors[f"trunk.{i}"] for i in range(self.config.depth + 2)]

    @property
    def combiner(self) -> MlpParams:
        return MlpParams([self.tensors[f"comb.{i}"] for i in range(self.config.depth + 2)])

    def set_mlp(self, s: int) -> SetMlpParams:
        return SetMlpParams(self.tensors["embed"][s], MlpParams([w[s] for w in self.trunk]))

    def copy(self) -> "SliceMlpParams":
        return SliceMlpParams(self.config, {k: v.copy() for k, v in self.tensors.items()})

    def map(self, fn) -> "SliceMlpParams":
        return SliceMlpParams(self.config, {k: fn(v) for k, v in self.tensors.items()})


def init_params(config: NetConfig, seed: int | np.random.Generator = 0,
                scale: float = 1.0) -> SliceMlpParams:
    """He-style fan-in initialisation (last layer of each MLP uses gain 1)."""
    rng = np.random.default_rng(seed)
    tensors = {}
    last = {f"trunk.{config.depth + 1}", f"comb.{config.depth + 1}"}
    for name, shape in config.tensor_shapes().items():
        fan_in = shape[-2]
        gain = 1.0 if name in last else 2.0
        tensors[name] = scale * np.sqrt(gain / fan_in) * rng.standard_normal(shape)
    return SliceMlpParams(config, tensors)


def positional_encoding(angles, dim: int = 128, scale: float | None = None) -> np.ndarray:
    """Sinusoidal encoding ``[sin(a * w_j), cos(a * w_j)]`` with ``a = angle * scale``."""
    if dim % 2:
        raise ValueError("encoding dimension must be even")
    scale = dim / np.pi if scale is None else scale
    angles = np.asarray(angles, dtype=np.float64)
    freqs = 10000.0 ** (-2.0 * np.arange(dim // 2) / dim)
    arg = (angles * scale)[..., None] * freqs
    return np.concatenate([np.sin(arg), np.cos(arg)], axis=-1)


# ---------------------------------------------------------------------------
# Batches
# ---------------------------------------------------------------------------

@dataclass
class Batch:
    """Padded batch: ``patches (B, N, P, P)``, ``angles (B, N)``, ``mask (B, N)``."""

    patches: np.ndarray
    angles: np.ndarray
    mask: np.ndarray
    targets: np.ndarray | None = None

    def __len__(self) -> int:
        return self.patches.shape[0]

    def stack(self, i: int) -> PatchStack:
        keep = self.mask[i]
        return PatchStack(self.patches[i][keep], self.angles[i][keep])


def collate(items: Iterable[PatchStack | tuple[PatchStack, np.ndarray]]) -> Batch:
    stacks, targets = [], []
    for item in items:
        if isinstance(item, PatchStack):
            stacks.append(item)
        else:
            stacks.append(item[0])
            targets.append(np.atleast_1d(np.asarray(item[1], dtype=np.float64)))
    if not stacks:
        raise ValueError("empty batch")
    n = max(s.data.shape[0] for s in stacks)
    P = stacks[0].data.shape[1]
    patches = np.zeros((len(stacks), n, P, P))
    angles = np.zeros((len(stacks), n))
    mask = np.zeros((len(stacks), n), dtype=bool)
    for i, s in enumerate(stacks):
        k = s.data.shape[0]
        patches[i, :k] = s.data
        angles[i, :k] = s.angles
        mask[i, :k] = True
    return Batch(patches, angles, mask, np.stack(targets) if targets else None)


def _canonical_order(patches: np.ndarray, angles: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Per-sample tilt order depending only on the multiset of (angle, patch) pairs.

    Sorting before pooling makes the floating-point reduction order, and hence
    the output bits, independent of how the tilts were presented.
    """
    key = np.where(mask, angles, np.inf)
    order = np.argsort(key, axis=1, kind="stable")
    sorted_key = np.take_along_axis(key, order, axis=1)
    ties = np.any((sorted_key[:, 1:] == sorted_key[:, :-1]) & np.isfinite(sorted_key[:, 1:]), axis=1)
    for b in np.flatnonzero(ties):
        flat = patches[b].reshape(patches.shape[1], -1)
        keys = [flat[:, j] for j in range(flat.shape[1] - 1, -1, -1)] + [key[b]]
        order[b] = np.lexsort(keys)
    return order


# ---------------------------------------------------------------------------
# Forward / backward
# ---------------------------------------------------------------------------

def _relu_mlp_forward(h, weights, acts):
    for i, w in enumerate(weights):
        acts.append(h)
        h = h @ w
        if i < len(weights) - 1:
            h = np.maximum(h, 0.0)
    return h


def _relu_mlp_backward(dout, weights, acts, grads, names):
    """Fill ``grads`` and return the gradient with respect to the MLP input."""
    d = dout
    for i in range(len(weights) - 1, -1, -1):
        h_in = acts[i]
        grads[names[i]] = np.swapaxes(h_in, -1, -2) @ d
        d = d @ np.swapaxes(weights[i], -1, -2)
        if i > 0:
            d = d * (h_in > 0)
    return d


def forward(params: SliceMlpParams, patches: np.ndarray, angles: np.ndarray,
            mask: np.ndarray | None = None, keep_cache: bool = False):
    """Network output for a batch of patch stacks -> ``(B, out_dim)``.

    ``patches (B, N, P, P)``; ``angles (N,)`` or ``(B, N)``; ``mask (B, N)``
    marks valid tilts (padding / dropped tilts are False).
    """
    cfg = params.config
    patches = np.asarray(patches, dtype=np.float64)
    if patches.ndim != 4 or patches.shape[2:] != (cfg.patch_size, cfg.patch_size):
        raise ValueError(
            f"patches must have shape (B, N, {cfg.patch_size}, {cfg.patch_size}), got {patches.shape}"
        )
    B, N, P, _ = patches.shape
    if N == 0:
        raise ValueError("need at least one tilt")
    angles = np.broadcast_to(np.asarray(angles, dtype=np.float64), (B, N))
    mask = np.ones((B, N), dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    count = mask.sum(axis=1)
    if np.any(count == 0):
        raise ValueError("every sample needs at least one valid tilt")

    order = _canonical_order(patches, angles, mask)
    if np.array_equal(order, np.broadcast_to(np.arange(N), (B, N))):
        X, A, M = patches, angles, mask
    else:
        X = np.take_along_axis(patches, order[:, :, None, None], axis=1)
        A = np.take_along_axis(angles, order, axis=1)
        M = np.take_along_axis(mask, order, axis=1)
    if not M.all():
        X = X * M[:, :, None, None]
    # inference batches share one tilt geometry; encode it once
    shared = bool(np.all(A == A[:1]) and np.all(M == M[:1]))
    if shared:
        pe0 = positional_encoding(A[0], cfg.pe_dim, cfg.angle_scale) * M[0, :, None]
        pe = np.broadcast_to(pe0, (B, N, pe0.shape[-1]))
    else:
        pe = positional_encoding(A, cfg.pe_dim, cfg.angle_scale) * M[:, :, None]
    W_e = params.tensors["embed"]

    cache: dict = {"X": X, "pe": pe, "M": M}
    if cfg.pooling == "max":
        E = np.einsum("bkus,suc->sbkc", X, W_e) * pe[None]
        E = np.where(M[None, :, :, None], E, -np.inf)
        arg = E.argmax(axis=2)
        pooled = np.take_along_axis(E, arg[:, :, None, :], axis=2)[:, :, 0, :]
        cache["arg"] = arg
    else:
        # G[b, u, s, c] = sum_k X[b, k, u, s] pe[b, k, c]
        Xt = X.transpose(0, 2, 3, 1)
        if shared:
            G = (Xt.reshape(B * P * P, N) @ pe0).reshape(B, P, P, -1)
        else:
            G = np.matmul(Xt.reshape(B, P * P, N), pe).reshape(B, P, P, -1)
        if cfg.pooling == "mean":
            G /= count[:, None, None, None]
        pooled = np.einsum("busc,suc->sbc", G, W_e)
        cache["G"] = G

    trunk_acts: list[np.ndarray] = []
    feats = _relu_mlp_forward(pooled, params.trunk, trunk_acts)  # (P, B, F)
    flat = feats.transpose(1, 0, 2).reshape(B, -1)
    comb_acts: list[np.ndarray] = []
    out = _relu_mlp_forward(flat, params.combiner.weights, comb_acts)
    if not np.all(np.isfinite(out)):
        raise DivergenceError("non-finite network output")
    if keep_cache:
        cache.update(trunk_acts=trunk_acts, comb_acts=comb_acts)
        return out, cache
    return out


def backward(params: SliceMlpParams, cache: dict, dout: np.ndarray) -> dict[str, np.ndarray]:
    cfg = params.config
    P, F = cfg.patch_size, cfg.features
    grads: dict[str, np.ndarray] = {}
    n_layers = cfg.depth + 2
    d_flat = _relu_mlp_backward(dout, params.combiner.weights, cache["comb_acts"], grads,
                                [f"comb.{i}" for i in range(n_layers)])
    # combiner input is the concatenated slice features; the trunk output has no ReLU
    d_feats = d_flat.reshape(-1, P, F).transpose(1, 0, 2)
    d_pooled = _relu_mlp_backward(d_feats, params.trunk, cache["trunk_acts"], grads,
                                  [f"trunk.{i}" for i in range(n_layers)])
    if cfg.pooling == "max":
        dE = np.zeros(d_pooled.shape[:2] + (cache["X"].shape[1], d_pooled.shape[2]))
        np.put_along_axis(dE, cache["arg"][:, :, None, :], d_pooled[:, :, None, :], axis=2)
        grads["embed"] = np.einsum("sbkc,bkc,bkus->suc", dE, cache["pe"], cache["X"])
    else:
        grads["embed"] = np.einsum("sbc,busc->suc", d_pooled, cache["G"])
    ordered = {name: grads[name] for name in cfg.tensor_shapes()}
    for name, g in ordered.items():
        if not np.all(np.isfinite(g)):
            raise DivergenceError(f"non-finite gradient in {name}")
    return ordered


def _as_batch(batch) -> Batch:
    return batch if isinstance(batch, Batch) else collate(batch)


def loss_and_grad(params: SliceMlpParams, batch) -> tuple[float, dict[str, np.ndarray]]:
    """Mean squared error over samples and output components, with its gradient."""
    batch = _as_batch(batch)
    if len(batch) == 0 or batch.targets is None:
        raise ValueError("loss needs a non-empty batch with targets")
    out, cache = forward(params, batch.patches, batch.angles, batch.mask, keep_cache=True)
    targets = np.asarray(batch.targets, dtype=np.float64).reshape(out.shape)
    resid = out - targets
    loss = float(np.mean(resid ** 2))
    if not np.isfinite(loss):
        raise DivergenceError("non-finite loss")
    grads = backward(params, cache, 2.0 * resid / resid.size)
    return loss, grads


def loss_only(params: SliceMlpParams, batch) -> float:
    batch = _as_batch(batch)
    out = forward(params, batch.patches, batch.angles, batch.mask)
    return float(np.mean((out - np.asarray(batch.targets).reshape(out.shape)) ** 2))


def set_mlp_forward(params: SetMlpParams, slice_: np.ndarray, angles, pooling: str = "mean",
                    pe_scale: float | None = None) -> np.ndarray:
    """One set-MLP on a ``(P, N)`` slice (columns are tilts) -> ``(F,)``."""
    slice_ = np.asarray(slice_, dtype=np.float64)
    angles = np.asarray(angles, dtype=np.float64).reshape(-1)
    if slice_.ndim != 2 or slice_.shape[1] == 0:
        raise ValueError("slice must be (P, N) with N >= 1")
    if slice_.shape[1] != angles.size:
        raise ValueError(f"{slice_.shape[1]} tilt columns but {angles.size} angles")
    order = np.lexsort(list(slice_[::-1]) + [angles])
    slice_, angles = slice_[:, order], angles[order]
    pe = positional_encoding(angles, params.embed.shape[1], pe_scale)
    e = (slice_.T @ params.embed) * pe
    if pooling == "mean":
        pooled = e.mean(axis=0)
    elif pooling == "sum":
        pooled = e.sum(axis=0)
    else:
        pooled = e.max(axis=0)
    return params.trunk(pooled)


def slice_mlp_forward(params: SliceMlpParams, patch_stack: PatchStack) -> np.ndarray:
    P = params.config.patch_size
    if patch_stack.data.shape[1:] != (P, P):
        raise ValueError(f"patch size {patch_stack.data.shape[1:]} does not match network P={P}")
    return forward(params, patch_stack.data[None], patch_stack.angles[None])[0]


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: SliceMlpParams, **hyper) -> "AdamState":
        return cls({k: np.zeros_like(v) for k, v in params.tensors.items()},
                   {k: np.zeros_like(v) for k, v in params.tensors.items()}, **hyper)


def adam_step(params: SliceMlpParams, grads: dict[str, np.ndarray], state: AdamState,
              lr: float | None = None) -> tuple[SliceMlpParams, AdamState]:
    """Bias-corrected Adam update; returns new params and state."""
    lr = state.lr if lr is None else lr
    t = state.t + 1
    b1, b2 = state.beta1, state.beta2
    new_t, new_m, new_v = {}, {}, {}
    for name, w in params.tensors.items():
        g = grads[name]
        if g.shape != w.shape:
            raise ValueError(f"gradient shape {g.shape} does not match {name} {w.shape}")
        m = b1 * state.m[name] + (1 - b1) * g
        v = b2 * state.v[name] + (1 - b2) * g * g
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        new_t[name] = w - lr * m_hat / (np.sqrt(v_hat) + state.eps)
        new_m[name], new_v[name] = m, v
    return SliceMlpParams(params.config, new_t), replace(state, m=new_m, v=new_v, t=t)


# ---------------------------------------------------------------------------
# FBP-equivalent parameters
# ---------------------------------------------------------------------------

def fbp_witness(config: NetConfig, weight: float = np.pi) -> SliceMlpParams:
    """Hand-built parameters computing ``weight * mean_k patch_k[centre]``.

    With mean pooling and ``weight = pi`` this equals backprojection with
    uniform ``pi / N`` weights. The encoding is cancelled by a fixed channel
    combination fitted to the constant 1 over the tilt range; ReLU pairs
    ``relu(x) - relu(-x)`` carry the signed value through every layer.
    """
    if config.hidden < 2 or config.out_dim != 1:
        raise ValueError("witness needs hidden >= 2 and out_dim == 1")
    P, C, c = config.patch_size, config.pe_dim, config.patch_size // 2
    grid = np.linspace(-np.pi / 2, np.pi / 2, 4001)[1:-1]
    basis = positional_encoding(grid, C, config.angle_scale)
    coef = np.linalg.lstsq(basis, np.ones(grid.size), rcond=None)[0]

    t = {name: np.zeros(shape) for name, shape in config.tensor_shapes().items()}
    t["embed"][c, c, :] = 1.0
    t["trunk.0"][c, :, 0] = coef
    t["trunk.0"][c, :, 1] = -coef
    for i in range(1, config.depth + 1):
        t[f"trunk.{i}"][c, 0, 0] = 1.0
        t[f"trunk.{i}"][c, 1, 1] = 1.0
    last = config.depth + 1
    t[f"trunk.{last}"][c, 0, 0] = 1.0
    t[f"trunk.{last}"][c, 1, 0] = -1.0
    t["comb.0"][c * config.features, 0] = 1.0
    t["comb.0"][c * config.features, 1] = -1.0
    for i in range(1, config.depth + 1):
        t[f"comb.{i}"][0, 0] = 1.0
        t[f"comb.{i}"][1, 1] = 1.0
    t[f"comb.{last}"][0, 0] = weight
    t[f"comb.{last}"][1, 0] = -weight
    return SliceMlpParams(config, t)
