import time

import numpy as np
import pytest
import torch

from semiseg3d import mda_cnn as net
from semiseg3d.errors import ShapeError


@pytest.fixture(scope="module")
def tiny():
    cfg = net.NetworkConfig(base_channels=2, patch_dims=(16, 16, 16))
    return cfg, net.build_model(cfg, seed=0)


def test_aux_volumes_constant():
    x = torch.full((1, 1, 8, 16, 16), 0.3)
    j, k = net.derive_auxiliary_volumes(x)
    assert torch.allclose(j, torch.full_like(j, 0.3)) and torch.allclose(k, torch.full_like(k, 0.3))


def test_aux_volumes_shapes():
    # (H, W, D) = (64, 64, 32) in torch layout (D, H, W)
    x = torch.rand(1, 1, 32, 64, 64)
    j, k = net.derive_auxiliary_volumes(x)
    assert tuple(j.shape[2:]) == (32, 32, 32)
    assert tuple(k.shape[2:]) == (32, 16, 16)


def test_aux_volumes_checkerboard():
    yy, xx = np.indices((16, 16))
    board = torch.tensor(((yy + xx) % 2).astype(np.float32)).expand(1, 1, 4, 16, 16)
    j, k = net.derive_auxiliary_volumes(board)
    assert torch.all(j == 0.5) and torch.all(k == 0.5)


def test_aux_volumes_not_divisible():
    with pytest.raises(ShapeError):
        net.derive_auxiliary_volumes(torch.rand(1, 1, 4, 6, 8))


def _fcs(c, zero=False, seed=0):
    torch.manual_seed(seed)
    fc2, fc3 = torch.nn.Linear(c, c), torch.nn.Linear(c, c)
    if zero:
        for fc in (fc2, fc3):
            torch.nn.init.zeros_(fc.weight)
            torch.nn.init.zeros_(fc.bias)
    return fc2, fc3


def test_attention_zero_fc_gives_factor_2_25():
    f_i, f_j, f_k = torch.randn(2, 4, 4, 4, 4), torch.randn(2, 4, 2, 2, 2), torch.randn(2, 4, 1, 1, 1)
    out = net.attention_fuse(f_i, f_j, f_k, *_fcs(4, zero=True), details=True)
    assert torch.all(out.a2 == 0.5) and torch.all(out.a3 == 0.5)
    assert torch.allclose(out.amf, 2.25 * f_i)
    assert out.amf.shape == f_i.shape


def test_attention_zero_input():
    f_i = torch.zeros(1, 3, 4, 4, 4)
    out = net.attention_fuse(f_i, torch.randn(1, 3, 2, 2, 2), torch.randn(1, 3, 2, 2, 2), *_fcs(3))
    assert torch.all(out == 0)


def test_attention_maps_open_interval():
    gen = torch.Generator().manual_seed(1)
    for _ in range(10):
        f = [torch.randn(2, 5, 3, 3, 3, generator=gen) * 3 for _ in range(3)]
        d = net.attention_fuse(*f, *_fcs(5, seed=2), details=True)
        for a in (d.a2, d.a3):
            assert torch.all(a > 0) and torch.all(a < 1)


def test_attention_channel_mismatch():
    with pytest.raises(ShapeError):
        net.attention_fuse(torch.rand(1, 4, 2, 2, 2), torch.rand(1, 3, 2, 2, 2), torch.rand(1, 4, 2, 2, 2), *_fcs(4))


def test_attention_permutation_invariance():
    gen = torch.Generator().manual_seed(3)
    f_i, f_j, f_k = (torch.randn(1, 4, 4, 6, 6, generator=gen, dtype=torch.float64) for _ in range(3))
    fc2, fc3 = (m.double() for m in _fcs(4))
    ref = net.attention_fuse(f_i, f_j, f_k, fc2, fc3)
    for _ in range(5):
        perm = torch.randperm(f_j[0, 0].numel(), generator=gen)
        shuffled = f_j.flatten(2)[..., perm].view_as(f_j)
        assert torch.allclose(net.attention_fuse(f_i, shuffled, f_k, fc2, fc3), ref, atol=1e-12)


def test_encode_branches_schedule(tiny):
    cfg, model = tiny
    feats = net.encode_branches(model, torch.rand(2, 1, *cfg.patch_dims))
    assert len(feats) == 5
    for k, fs in enumerate(feats, start=1):
        assert fs.amf.shape[1] == cfg.channels(k)
        assert tuple(fs.amf.shape[2:]) == tuple(fs.f_i.shape[2:]) == net.scale_dims(cfg.patch_dims, k)


def test_zero_parameters_give_zero_amf():
    cfg = net.NetworkConfig(base_channels=2, patch_dims=(16, 16, 16))
    model = net.build_model(cfg)
    with torch.no_grad():
        for p in model.parameters():
            p.zero_()
    for fs in net.encode_branches(model, torch.rand(2, 1, 16, 16, 16)):
        assert torch.all(fs.amf == 0)


def test_forward_shapes_range_and_determinism(tiny):
    cfg, model = tiny
    x = torch.rand(2, 1, *cfg.patch_dims, generator=torch.Generator().manual_seed(0))
    preds = net.forward(model, x)
    assert len(preds) == 5
    for k, p in enumerate(preds, start=1):
        assert tuple(p.shape[2:]) == net.scale_dims(cfg.patch_dims, k)
        assert p.min() >= 0 and p.max() <= 1
    again = model(x)
    assert all(torch.equal(a, b) for a, b in zip(preds, again))


def test_forward_rejects_wrong_patch(tiny):
    _, model = tiny
    with pytest.raises(ShapeError):
        model(torch.rand(1, 1, 16, 16, 32))


def test_config_validation():
    with pytest.raises(ShapeError):
        net.NetworkConfig(patch_dims=(24, 32, 32))
    with pytest.raises(ShapeError):
        net.NetworkConfig(base_channels=0)
    with pytest.raises(ShapeError):
        net.NetworkConfig(norm="layer")
    cfg = net.NetworkConfig(base_channels=3)
    assert [cfg.channels(k) for k in range(1, 6)] == [3, 6, 12, 24, 48]


def test_seeded_init_deterministic():
    cfg = net.NetworkConfig(base_channels=2, patch_dims=(16, 16, 16))
    a, b, c = net.build_model(cfg, 5), net.build_model(cfg, 5), net.build_model(cfg, 6)
    sa, sb, sc = a.state_dict(), b.state_dict(), c.state_dict()
    assert all(torch.equal(sa[k], sb[k]) for k in sa)
    assert any(not torch.equal(sa[k], sc[k]) for k in sa)
    assert all(torch.isfinite(p).all() for p in a.parameters())
    assert net.count_parameters(a) == sum(v.numel() for v in a.parameters())


def test_gradients_finite_for_every_group(tiny):
    cfg, model = tiny
    model.zero_grad()
    preds = model(torch.rand(2, 1, *cfg.patch_dims))
    sum(p.mean() for p in preds).backward()
    for name, p in model.named_parameters():
        assert p.grad is not None, name
        assert torch.isfinite(p.grad).all(), name


def test_instance_norm_variant_runs_on_single_voxel_scale():
    cfg = net.NetworkConfig(base_channels=2, patch_dims=(16, 16, 16), norm="instance")
    preds = net.build_model(cfg)(torch.rand(1, 1, 16, 16, 16))
    assert tuple(preds[-1].shape[2:]) == (1, 1, 1)


def test_tiny_forward_under_one_second():
    cfg = net.NetworkConfig(base_channels=4, patch_dims=(32, 32, 32))
    model = net.build_model(cfg).eval()
    x = torch.rand(1, 1, 32, 32, 32)
    with torch.no_grad():
        model(x)  # warm-up
        start = time.perf_counter()
        model(x)
        elapsed = time.perf_counter() - start
    assert elapsed < 1.0
