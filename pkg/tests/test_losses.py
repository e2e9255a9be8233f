import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from semiseg3d.errors import DomainError, ShapeError
from semiseg3d.losses import (
    DICE_EPS,
    consistency_loss,
    dice_loss,
    ramp_weight,
    supervised_loss,
    total_loss,
)


def _grid(value, n=4):
    return torch.full((n, n, n), float(value), dtype=torch.float64)


def _half(n=4):
    g = torch.zeros((n, n, n), dtype=torch.float64)
    g[: n // 2] = 1
    return g


def _pyramid(fill, n=16):
    return [torch.full((1, 1) + (max(1, n >> k),) * 3, float(fill), dtype=torch.float64) for k in range(5)]


def test_dice_perfect_match():
    g = _half()
    assert dice_loss(g, g).item() == pytest.approx(0.0, abs=1e-6)


def test_dice_disjoint():
    g = _half()
    assert dice_loss(1 - g, g).item() == pytest.approx(1.0, abs=1e-6)


def test_dice_uniform_half():
    g = _half(8)
    n = g.numel()
    expected = 1 - (2 * 0.25 * n + DICE_EPS) / (0.5 * n + 0.5 * n + DICE_EPS)
    assert dice_loss(_grid(0.5, 8), g).item() == pytest.approx(expected, rel=1e-12)
    assert expected == pytest.approx(0.5, abs=1e-6)


def test_dice_empty_vs_empty_is_zero():
    z = _grid(0)
    assert dice_loss(z, z).item() == 0.0


def test_dice_shape_mismatch():
    with pytest.raises(ShapeError):
        dice_loss(_grid(0, 4), _grid(0, 3))


def test_supervised_perfect_and_worst():
    ones = _pyramid(1)
    total, terms = supervised_loss(ones, ones)
    assert total.item() == pytest.approx(0.0, abs=1e-6)
    assert len(terms) == 5
    total, _ = supervised_loss(_pyramid(0), ones)
    # an empty prediction scores 1 - eps / (|G| + eps) per scale
    expected = sum(1 - DICE_EPS / (t.numel() + DICE_EPS) for t in ones)
    assert total.item() == pytest.approx(expected, rel=1e-12)
    assert expected == pytest.approx(5.0, abs=1e-4)


def test_supervised_crafted_per_scale():
    targets = [torch.zeros((8, 8, 8), dtype=torch.float64) for _ in range(5)]
    for t in targets:
        t[:4] = 1
    preds = [t.clone() for t in targets]
    preds[1] = torch.full((8, 8, 8), 0.5, dtype=torch.float64)
    total, terms = supervised_loss(preds, targets)
    assert [round(x.item(), 5) for x in terms] == [0.0, 0.5, 0.0, 0.0, 0.0]
    assert total.item() == pytest.approx(0.5, abs=1e-6)
    assert total.item() == pytest.approx(sum(x.item() for x in terms), rel=1e-12)


def test_supervised_batched_is_per_sample_mean():
    rng = np.random.default_rng(0)
    p = [torch.tensor(rng.random((2, 1, 4, 4, 4))) for _ in range(5)]
    g = [torch.tensor((rng.random((2, 1, 4, 4, 4)) > 0.5).astype(float)) for _ in range(5)]
    batched, _ = supervised_loss(p, g)
    single = [supervised_loss([x[i, 0] for x in p], [y[i, 0] for y in g])[0] for i in range(2)]
    assert batched.item() == pytest.approx((single[0] + single[1]).item() / 2, rel=1e-12)


def test_consistency_values():
    zeros, ones = _pyramid(0), _pyramid(1)
    assert consistency_loss(ones, ones)[0].item() == 0.0
    total, terms = consistency_loss(zeros, ones)
    assert total.item() == pytest.approx(5.0)
    assert [t.item() for t in terms] == [1.0] * 5


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_consistency_symmetric_and_definite(seed):
    rng = np.random.default_rng(seed)
    s = [torch.tensor(rng.random((3, 3, 3))) for _ in range(5)]
    t = [torch.tensor(rng.random((3, 3, 3))) for _ in range(5)]
    assert consistency_loss(s, t)[0].item() == consistency_loss(t, s)[0].item()
    assert consistency_loss(s, t)[0].item() > 0
    assert consistency_loss(s, [x.clone() for x in s])[0].item() == 0


def test_ramp_weight_values():
    assert ramp_weight(100, 100, 5.0) == 5.0
    assert ramp_weight(0, 100, 5.0) == pytest.approx(5 * math.exp(-5), abs=1e-12)
    assert ramp_weight(0, 100, 5.0) == pytest.approx(0.0336897, abs=1e-7)
    assert ramp_weight(50, 100, 5.0) == pytest.approx(1.43252, abs=1e-5)


def test_ramp_weight_strictly_monotone():
    vals = [ramp_weight(i, 50, 5.0) for i in range(51)]
    assert all(a < b for a, b in zip(vals, vals[1:]))


@pytest.mark.parametrize("i, i_max", [(-1, 10), (11, 10), (0, 0)])
def test_ramp_weight_domain(i, i_max):
    with pytest.raises(DomainError):
        ramp_weight(i, i_max)


def test_total_loss():
    assert total_loss(0.4, 0.2, 5.0) == pytest.approx(1.4)
    assert total_loss(0.4, 0.9, 0.0) == 0.4
    assert total_loss(0.4, 0.0, 3.0) == 0.4


def _central_diff(fn, tensors, h=1e-6):
    grads = []
    for x in tensors:
        g = torch.zeros_like(x)
        flat, gflat = x.view(-1), g.view(-1)
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + h
            up = fn().item()
            flat[i] = orig - h
            down = fn().item()
            flat[i] = orig
            gflat[i] = (up - down) / (2 * h)
        grads.append(g)
    return grads


def _rel_err(a, b, floor=1e-3):
    # floor keeps near-zero gradients from turning roundoff into large ratios
    return (a - b).abs().max().item() / max(a.abs().max().item(), b.abs().max().item(), floor)


def _random_pyramid(rng, n=4, low=0.05, high=0.95):
    return [torch.tensor(rng.uniform(low, high, size=(max(1, n >> k),) * 3)) for k in range(5)]


def test_supervised_loss_gradient_matches_finite_differences():
    rng = np.random.default_rng(7)
    preds = _random_pyramid(rng)
    targets = [torch.tensor((rng.random(p.shape) > 0.5).astype(float)) for p in preds]
    targets[-1].fill_(1.0)
    for p in preds:
        p.requires_grad_(True)
    supervised_loss(preds, targets)[0].backward()
    analytic = [p.grad.clone() for p in preds]
    with torch.no_grad():
        numeric = _central_diff(lambda: supervised_loss(preds, targets)[0], preds)
    for a, n in zip(analytic, numeric):
        assert _rel_err(a, n) < 1e-6


def test_consistency_loss_gradient_matches_finite_differences():
    rng = np.random.default_rng(8)
    s, t = _random_pyramid(rng), _random_pyramid(rng)
    for p in s:
        p.requires_grad_(True)
    consistency_loss(s, t)[0].backward()
    analytic = [p.grad.clone() for p in s]
    with torch.no_grad():
        numeric = _central_diff(lambda: consistency_loss(s, t)[0], s)
    for a, n in zip(analytic, numeric):
        assert _rel_err(a, n) < 1e-6
