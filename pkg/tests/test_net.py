import numpy as np
import pytest
from hypothesis import given, strategies as st

from loctomo.acceptance import gradient_check
from loctomo.geometry import PatchStack
from loctomo.net import (AdamState, Batch, NetConfig, SliceMlpParams, adam_step, backward, collate,
                         fbp_witness, forward, init_params, loss_and_grad, positional_encoding,
                         set_mlp_forward, slice_mlp_forward)

SMALL = NetConfig(patch_size=5, features=4, hidden=8, depth=1, pe_dim=8)


def _inputs(seed, B=3, N=6, P=5):
    rng = np.random.default_rng(seed)
    return rng.standard_normal((B, N, P, P)), np.sort(rng.uniform(-1, 1, N))


def test_default_shapes_match_architecture():
    cfg = NetConfig()
    shapes = cfg.tensor_shapes()
    assert shapes["embed"] == (21, 21, 128)
    assert shapes["trunk.0"] == (21, 128, 128)
    assert shapes["trunk.6"] == (21, 128, 128)
    assert shapes["comb.0"] == (21 * 128, 128)
    assert shapes["comb.6"] == (128, 1)
    assert len([k for k in shapes if k.startswith("comb")]) == cfg.depth + 2


def test_positional_encoding_values():
    pe = positional_encoding(np.array([0.0, 0.3]), dim=4, scale=2.0)
    w = np.array([1.0, 0.01])
    np.testing.assert_allclose(pe[1], np.r_[np.sin(0.6 * w), np.cos(0.6 * w)])
    np.testing.assert_array_equal(pe[0], [0, 0, 1, 1])


@pytest.mark.parametrize("pooling", ["mean", "sum", "max"])
def test_gradients_match_finite_differences(pooling):
    errors = gradient_check(11, pooling)
    assert max(errors.values()) < 1e-6, errors


@given(st.integers(0, 1000), st.floats(0.01, 100))
def test_positive_homogeneity(seed, alpha):
    params = init_params(SMALL, seed)
    x, ang = _inputs(seed)
    np.testing.assert_allclose(forward(params, alpha * x, ang), alpha * forward(params, x, ang),
                               rtol=1e-9, atol=1e-12)


@given(st.integers(0, 1000))
def test_joint_permutation_is_bit_identical(seed):
    params = init_params(SMALL, seed)
    x, ang = _inputs(seed, B=1)
    perm = np.random.default_rng(seed).permutation(ang.size)
    a = slice_mlp_forward(params, PatchStack(x[0], ang))
    b = slice_mlp_forward(params, PatchStack(x[0][perm], ang[perm]))
    assert a.tobytes() == b.tobytes()


def test_repeated_angles_stay_permutation_invariant():
    params = init_params(SMALL, 0)
    rng = np.random.default_rng(0)
    x = rng.standard_normal((4, 5, 5))
    ang = np.array([0.1, 0.1, -0.2, 0.1])
    ref = slice_mlp_forward(params, PatchStack(x, ang))
    for perm in ([3, 2, 1, 0], [1, 0, 3, 2], [2, 3, 0, 1]):
        assert slice_mlp_forward(params, PatchStack(x[perm], ang[perm])).tobytes() == ref.tobytes()


def test_only_angles_permuted_changes_output():
    params = init_params(SMALL, 0)
    x, ang = _inputs(0, B=1)
    a = forward(params, x, ang)
    b = forward(params, x, ang[::-1])
    assert not np.allclose(a, b)


def test_mask_equals_dropping_tilts():
    params = init_params(SMALL, 3)
    x, ang = _inputs(3, B=1)
    keep = np.array([True, False, True, True, False, True])
    masked = forward(params, x, ang[None], keep[None])
    dropped = forward(params, x[:, keep], ang[keep])
    np.testing.assert_allclose(masked, dropped, rtol=1e-13)


def test_batched_matches_single_samples():
    params = init_params(SMALL, 4)
    x, ang = _inputs(4, B=5)
    batched = forward(params, x, ang)
    single = np.concatenate([forward(params, x[i:i + 1], ang) for i in range(5)])
    np.testing.assert_allclose(batched, single, rtol=1e-12, atol=1e-14)


def test_variable_tilt_counts_share_parameters():
    params = init_params(SMALL, 5)
    rng = np.random.default_rng(5)
    for n in (1, 3, 17):
        out = forward(params, rng.standard_normal((2, n, 5, 5)), np.linspace(-1, 1, n))
        assert out.shape == (2, 1) and np.all(np.isfinite(out))


def test_set_mlp_pieces_compose_to_forward():
    params = init_params(SMALL, 6)
    x, ang = _inputs(6, B=1)
    feats = [set_mlp_forward(params.set_mlp(s), x[0][:, :, s].T, ang) for s in range(5)]
    out = params.combiner(np.concatenate(feats))
    np.testing.assert_allclose(out, forward(params, x, ang)[0], rtol=1e-12)


def test_collate_pads_and_masks():
    rng = np.random.default_rng(0)
    items = [(PatchStack(rng.standard_normal((n, 5, 5)), np.linspace(-1, 1, n)), 1.0) for n in (2, 4)]
    batch = collate(items)
    assert batch.patches.shape == (2, 4, 5, 5)
    np.testing.assert_array_equal(batch.mask.sum(axis=1), [2, 4])
    params = init_params(SMALL, 0)
    loss, grads = loss_and_grad(params, items)
    assert np.isfinite(loss) and set(grads) == set(params.tensors)
    np.testing.assert_array_equal(batch.stack(0).data, items[0][0].data)


def test_adam_first_step_moves_by_lr_times_sign():
    params = init_params(SMALL, 0)
    grads = {k: np.full_like(v, -3.0) for k, v in params.tensors.items()}
    new, state = adam_step(params, grads, AdamState.zeros_like(params, lr=0.01))
    assert state.t == 1
    for k in params.tensors:
        np.testing.assert_allclose(new.tensors[k] - params.tensors[k], 0.01, rtol=1e-6)


def test_adam_hand_computed_second_step():
    cfg = NetConfig(patch_size=1, features=1, hidden=1, depth=0, pe_dim=2)
    params = SliceMlpParams(cfg, {k: np.zeros(s) for k, s in cfg.tensor_shapes().items()})
    g1 = {k: np.ones(s) for k, s in cfg.tensor_shapes().items()}
    g2 = {k: np.full(s, 2.0) for k, s in cfg.tensor_shapes().items()}
    state = AdamState.zeros_like(params, lr=0.1)
    p1, state = adam_step(params, g1, state)
    p2, state = adam_step(p1, g2, state)
    step1 = 0.1 * 1.0 / (1.0 + 1e-8)
    m = 0.9 * 0.1 + 0.1 * 2
    v = 0.999 * 0.001 + 0.001 * 4
    step2 = 0.1 * (m / (1 - 0.9 ** 2)) / (np.sqrt(v / (1 - 0.999 ** 2)) + 1e-8)
    np.testing.assert_allclose(p2.tensors["embed"], -(step1 + step2), rtol=1e-12)


def test_witness_averages_patch_centres():
    cfg = NetConfig(patch_size=7, features=4, hidden=4, depth=2, pe_dim=16)
    params = fbp_witness(cfg)
    x, ang = _inputs(1, B=4, N=9, P=7)
    ang = np.linspace(-1.2, 1.2, 9)
    expected = np.pi * x[:, :, 3, 3].mean(axis=1)
    np.testing.assert_allclose(forward(params, x, ang)[:, 0], expected, atol=1e-9)


def test_parameter_validation():
    with pytest.raises(ValueError):
        NetConfig(patch_size=4)
    with pytest.raises(ValueError):
        NetConfig(out_dim=3)
    params = init_params(SMALL, 0)
    bad = dict(params.tensors)
    bad["embed"] = bad["embed"][:, :, :2]
    with pytest.raises(ValueError):
        SliceMlpParams(SMALL, bad)
    with pytest.raises(ValueError):
        forward(params, np.zeros((1, 2, 3, 3)), [0.0, 0.1])
    with pytest.raises(ValueError):
        forward(params, np.zeros((1, 2, 5, 5)), [0.0, 0.1], np.zeros((1, 2), bool))
