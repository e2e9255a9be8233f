import numpy as np
import pytest

from semiseg3d import sliding_inference as si
from semiseg3d import volume_store as vs
from semiseg3d.errors import MissingTile


class _State:
    """Minimal stand-in exposing the patch size used for tiling."""

    def __init__(self, window):
        from semiseg3d.mda_cnn import NetworkConfig

        self.net_cfg = NetworkConfig(base_channels=1, patch_dims=window)


def test_single_origin_when_dims_equal_window():
    plan = si.tile_positions((16, 32, 32), (16, 32, 32))
    assert plan.origins == [(0, 0, 0)]
    assert plan.stride == (8, 16, 16)


@pytest.mark.parametrize("n, w, expected", [(240, 160, [0, 80]), (200, 160, [0, 40]), (160, 160, [0]), (100, 32, [0, 16, 32, 48, 64, 68])])
def test_axis_origins(n, w, expected):
    assert si.axis_origins(n, w, w // 2) == expected


def test_plan_covers_everything_in_bounds():
    dims, window = (72, 200, 168), (64, 160, 160)
    plan = si.tile_positions(dims, window)
    cover = np.zeros(dims, dtype=int)
    for o in plan.origins:
        assert all(a + w <= n for a, w, n in zip(o, window, dims))
        cover[tuple(slice(a, a + w) for a, w in zip(o, window))] += 1
    assert cover.min() >= 1
    assert len(set(plan.origins)) == len(plan.origins)


def test_stitch_constant_and_mean():
    dims, window = (8, 12, 8), (8, 8, 8)
    plan = si.tile_positions(dims, window)
    assert plan.origins == [(0, 0, 0), (0, 4, 0)]
    out = si.stitch({o: np.full(window, 0.3) for o in plan.origins}, plan, dims)
    np.testing.assert_allclose(out, 0.3)
    out = si.stitch({(0, 0, 0): np.full(window, 0.2), (0, 4, 0): np.full(window, 0.6)}, plan, dims)
    assert out[0, 5, 0] == pytest.approx(0.4)
    assert out[0, 0, 0] == pytest.approx(0.2) and out[0, 11, 0] == pytest.approx(0.6)


def test_stitch_missing_tile():
    plan = si.tile_positions((8, 12, 8), (8, 8, 8))
    with pytest.raises(MissingTile):
        si.stitch({(0, 0, 0): np.zeros((8, 8, 8))}, plan, (8, 12, 8))


def test_stitch_order_independent():
    rng = np.random.default_rng(0)
    dims, window = (24, 24, 24), (16, 16, 16)
    plan = si.tile_positions(dims, window)
    tiles = {o: rng.random(window) for o in plan.origins}
    a = si.stitch(tiles, plan, dims)
    shuffled = si.TilePlan(plan.window, plan.stride, list(reversed(plan.origins)))
    b = si.stitch(dict(reversed(list(tiles.items()))), shuffled, dims)
    np.testing.assert_allclose(a, b, atol=1e-15)


def test_constant_stub_gives_full_mask():
    v = vs.Volume3D(np.random.default_rng(0).random((20, 40, 36)), (2.0, 0.7, 0.7))
    mask, prob = si.predict_volume(v, _State((16, 32, 32)), predictor=lambda b: np.full(b.shape, 0.7))
    assert mask.labels.all()
    assert mask.dims == v.dims and mask.spacing == v.spacing


@pytest.mark.parametrize("dims", [(16, 32, 32), (20, 40, 36), (8, 20, 24), (40, 33, 50)])
def test_identity_probe_reconstructs_input(dims):
    v = vs.Volume3D(np.random.default_rng(1).random(dims))
    _, prob = si.predict_volume(v, _State((16, 32, 32)), predictor=lambda b: b.astype(np.float64))
    np.testing.assert_allclose(prob.voxels, v.voxels, atol=1e-6)


def test_position_function_matches_direct_evaluation():
    # stub that returns a globally consistent function of absolute position
    dims, window = (24, 40, 40), (16, 32, 32)
    full = np.sin(np.indices(dims).sum(axis=0) * 0.1) * 0.5 + 0.5
    plan = si.tile_positions(dims, window)
    tiles = {o: full[tuple(slice(a, a + w) for a, w in zip(o, window))] for o in plan.origins}
    np.testing.assert_allclose(si.stitch(tiles, plan, dims), full, atol=1e-12)


def test_predict_with_network_deterministic():
    from semiseg3d.mda_cnn import NetworkConfig
    from semiseg3d.mean_teacher import TrainConfig, init_state

    state = init_state(NetworkConfig(base_channels=2, patch_dims=(16, 16, 16)), TrainConfig(seed=3))
    v = vs.Volume3D(np.random.default_rng(2).random((20, 24, 16)))
    m1, p1 = si.predict_volume(v, state)
    m2, p2 = si.predict_volume(v, state)
    assert m1 == m2 and p1 == p2
    assert p1.voxels.min() >= 0 and p1.voxels.max() <= 1
    mt, _ = si.predict_volume(v, state, use_teacher=True)
    assert mt == m1  # teacher is an exact copy before training
