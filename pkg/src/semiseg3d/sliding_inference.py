"""Whole-volume prediction by 50%-overlap tiling and mean stitching."""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Callable, Dict, Sequence

import numpy as np
import torch

from . import volume_store as vs
from .errors import MissingTile, ShapeError


@dataclass
class TilePlan:
    window: tuple
    stride: tuple
    origins: list


def axis_origins(n: int, w: int, s: int) -> list:
    """Origins 0, s, 2s, ... with the last one clamped to ``n - w``."""
    if w > n:
        raise ShapeError(f"window {w} exceeds axis length {n}; pad first")
    out = list(range(0, n - w + 1, s))
    if out[-1] != n - w:
        out.append(n - w)
    return out


def tile_positions(dims: Sequence[int], window: Sequence[int]) -> TilePlan:
    window = tuple(int(w) for w in window)
    stride = tuple(max(1, w // 2) for w in window)
    per_axis = [axis_origins(n, w, s) for n, w, s in zip(dims, window, stride)]
    return TilePlan(window, stride, list(itertools.product(*per_axis)))


def stitch(tiles: Dict[tuple, np.ndarray], plan: TilePlan, dims: Sequence[int]) -> np.ndarray:
    """Average all blocks covering each voxel."""
    acc = np.zeros(dims, dtype=np.float64)
    count = np.zeros(dims, dtype=np.int32)
    for origin in plan.origins:
        if origin not in tiles:
            raise MissingTile(origin)
        block = np.asarray(tiles[origin])
        if block.shape != plan.window:
            raise ShapeError(f"tile at {origin} has shape {block.shape}, expected {plan.window}")
        sl = tuple(slice(o, o + w) for o, w in zip(origin, plan.window))
        acc[sl] += block
        count[sl] += 1
    if (count == 0).any():
        raise MissingTile("voxels left uncovered by the tile plan")
    return acc / count


def model_predictor(model: torch.nn.Module, batch_size: int = 4) -> Callable:
    """Wrap a network so it maps a stack of blocks to P1 probabilities."""
    dtype = next(model.parameters()).dtype

    def predict(blocks: np.ndarray) -> np.ndarray:
        model.eval()
        out = []
        with torch.no_grad():
            for i in range(0, len(blocks), batch_size):
                x = torch.from_numpy(np.ascontiguousarray(blocks[i:i + batch_size]))[:, None].to(dtype)
                out.append(model(x)[0][:, 0].double().numpy())
        return np.concatenate(out)

    return predict


def predict_probabilities(image: np.ndarray, predictor: Callable, window: Sequence[int]) -> np.ndarray:
    """Tile ``image``, run ``predictor`` on the stacked blocks and stitch the results."""
    window = tuple(int(w) for w in window)
    padded, widths = vs.pad_to(image, window)
    plan = tile_positions(padded.shape, window)
    blocks = np.stack([
        padded[tuple(slice(o, o + w) for o, w in zip(origin, window))] for origin in plan.origins
    ])
    preds = predictor(blocks)
    prob = stitch(dict(zip(plan.origins, preds)), plan, padded.shape)
    crop = tuple(slice(b, b + n) for (b, _), n in zip(widths, image.shape))
    return prob[crop]


def predict_volume(v: vs.Volume3D, state, threshold: float = 0.5, use_teacher: bool = False,
                   predictor: Callable = None):
    """Segment a window-normalized volume with the student (or teacher) network.

    ``state`` is a NetworkState; ``predictor`` overrides the network, which
    is handy for stubs. Returns ``(Mask3D, probability Volume3D)``.
    """
    if predictor is None:
        model = state.teacher if use_teacher else state.student
        predictor = model_predictor(model)
    window = state.net_cfg.patch_dims
    prob = predict_probabilities(v.voxels, predictor, window)
    mask = vs.Mask3D(prob > threshold, v.spacing)
    return mask, vs.Volume3D(prob, v.spacing)
