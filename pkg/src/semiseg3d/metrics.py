"""Volume-wise segmentation metrics: Dice, Jaccard, NSD, ADB and HD95.

Surfaces are the foreground voxels with at least one 6-connected background
neighbour (outside the grid counts as background). Surface distances are
measured between voxel centres in millimetres using the mask spacing, via a
Euclidean distance transform of the other surface.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import ndimage

from .errors import DegenerateCase, EmptyInput, ShapeError
from .volume_store import Mask3D

DEFAULT_TAU_MM = 3.0
METRIC_NAMES = ("dice", "jaccard", "nsd", "adb_mm", "hd95_mm")
# distances that equal tau up to sqrt rounding still count as within tolerance
_TAU_SLACK = 1e-9

_SIX = ndimage.generate_binary_structure(3, 1)


@dataclass
class SurfaceSet:
    voxels: np.ndarray
    spacing: tuple

    def __len__(self):
        return len(self.voxels)


@dataclass
class MetricsReport:
    dice: float
    jaccard: float
    nsd: float
    adb_mm: float
    hd95_mm: float
    flags: tuple = ()

    def values(self) -> dict:
        return {name: getattr(self, name) for name in METRIC_NAMES}


def _pair(p: Mask3D, g: Mask3D):
    if p.dims != g.dims:
        raise ShapeError(f"prediction dims {p.dims} != ground-truth dims {g.dims}")
    return p.labels.astype(bool), g.labels.astype(bool)


def dice_jaccard(p: Mask3D, g: Mask3D) -> tuple:
    a, b = _pair(p, g)
    inter = np.count_nonzero(a & b)
    na, nb = np.count_nonzero(a), np.count_nonzero(b)
    if na + nb == 0:
        return 1.0, 1.0
    return 2.0 * inter / (na + nb), inter / (na + nb - inter)


def surface_mask(labels: np.ndarray) -> np.ndarray:
    labels = labels.astype(bool)
    return labels & ~ndimage.binary_erosion(labels, structure=_SIX, border_value=0)


def extract_surface(m: Mask3D) -> SurfaceSet:
    return SurfaceSet(np.argwhere(surface_mask(m.labels)), m.spacing)


def _directed(src: np.ndarray, dst: np.ndarray, spacing) -> np.ndarray:
    """Distance (mm) from every surface voxel of ``src`` to the surface of ``dst``."""
    edt = ndimage.distance_transform_edt(~dst, sampling=spacing)
    return edt[src]


def surface_distances(p: Mask3D, g: Mask3D) -> tuple:
    """Directed surface distances ``(P -> G, G -> P)``; requires both masks nonempty."""
    a, b = _pair(p, g)
    if not a.any() or not b.any():
        raise DegenerateCase("surface distance undefined with an empty mask")
    sa, sb = surface_mask(a), surface_mask(b)
    return _directed(sa, sb, g.spacing), _directed(sb, sa, p.spacing)


def nsd(p: Mask3D, g: Mask3D, tau_mm: float = DEFAULT_TAU_MM) -> float:
    """Normalized surface dice at tolerance ``tau_mm``."""
    if tau_mm < 0:
        raise ValueError("tau_mm must be non-negative")
    a, b = _pair(p, g)
    if not a.any() and not b.any():
        return 1.0
    if not a.any() or not b.any():
        return 0.0
    d_pg, d_gp = surface_distances(p, g)
    within = np.count_nonzero(d_pg <= tau_mm + _TAU_SLACK) + np.count_nonzero(d_gp <= tau_mm + _TAU_SLACK)
    return within / (len(d_pg) + len(d_gp))


def adb(p: Mask3D, g: Mask3D) -> float:
    """Average symmetric surface distance in mm (mean of both directed means)."""
    d_pg, d_gp = surface_distances(p, g)
    return 0.5 * (d_pg.mean() + d_gp.mean())


def hd95(p: Mask3D, g: Mask3D) -> float:
    """Max of the two directed 95th-percentile surface distances (linear interpolation)."""
    d_pg, d_gp = surface_distances(p, g)
    return float(max(np.percentile(d_pg, 95), np.percentile(d_gp, 95)))


def evaluate_case(p: Mask3D, g: Mask3D, tau_mm: float = DEFAULT_TAU_MM) -> MetricsReport:
    dice, jac = dice_jaccard(p, g)
    a, b = _pair(p, g)
    if not a.any() and not b.any():
        return MetricsReport(dice, jac, 1.0, 0.0, 0.0, ("both_empty",))
    if not a.any() or not b.any():
        flags = ("empty_prediction" if not a.any() else "empty_ground_truth", "degenerate_distance")
        return MetricsReport(dice, jac, 0.0, math.nan, math.nan, flags)
    d_pg, d_gp = surface_distances(p, g)
    n = len(d_pg) + len(d_gp)
    within = np.count_nonzero(d_pg <= tau_mm + _TAU_SLACK) + np.count_nonzero(d_gp <= tau_mm + _TAU_SLACK)
    return MetricsReport(
        dice,
        jac,
        within / n,
        0.5 * (d_pg.mean() + d_gp.mean()),
        float(max(np.percentile(d_pg, 95), np.percentile(d_gp, 95))),
    )


@dataclass
class Aggregate:
    mean: dict
    variance: dict
    n_used: dict = field(default_factory=dict)
    n_excluded: dict = field(default_factory=dict)


def aggregate(reports: Sequence[MetricsReport]) -> Aggregate:
    """Population mean and variance per metric; NaN (degenerate) values are excluded."""
    if not reports:
        raise EmptyInput("no reports to aggregate")
    mean, var, used, excluded = {}, {}, {}, {}
    for name in METRIC_NAMES:
        vals = np.array([getattr(r, name) for r in reports], dtype=np.float64)
        ok = vals[np.isfinite(vals)]
        used[name], excluded[name] = len(ok), len(vals) - len(ok)
        mean[name] = float(ok.mean()) if len(ok) else math.nan
        var[name] = float(ok.var()) if len(ok) else math.nan
    return Aggregate(mean, var, used, excluded)
