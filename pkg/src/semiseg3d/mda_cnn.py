"""Multiple dimensional-attention CNN.

Three parallel encoders see the input patch and two copies of it that are
average-pooled in-plane (H, W) by factors 2 and 4. At each of five scales a
channel-attention module re-weights the full-resolution branch features with
gates computed from the two auxiliary branches. The fused features are merged
coarse-to-fine by a U-Net style decoder and every decoder level feeds its
own prediction head, giving five sigmoid probability maps P1 (full
resolution) to P5 (1/16 resolution).

Tensors follow the torch layout (N, C, D, H, W).
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import List, Optional, Sequence

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ShapeError

N_SCALES = 5
# initial foreground probability of every side output
HEAD_PRIOR = 0.05


@dataclass
class NetworkConfig:
    base_channels: int = 8
    patch_dims: tuple = (32, 32, 32)
    aux_factors: tuple = (2, 4)
    in_channels: int = 1
    norm: str = "batch"
    n_scales: int = field(default=N_SCALES, init=False)

    def __post_init__(self):
        self.patch_dims = tuple(int(n) for n in self.patch_dims)
        self.aux_factors = tuple(int(f) for f in self.aux_factors)
        if self.base_channels < 1:
            raise ShapeError("base_channels must be >= 1")
        if len(self.patch_dims) != 3 or any(n % 2 ** (N_SCALES - 1) for n in self.patch_dims):
            raise ShapeError(f"patch dims {self.patch_dims} must be divisible by 16")
        if self.norm not in _NORMS:
            raise ShapeError(f"unknown norm {self.norm!r}; choose from {sorted(_NORMS)}")
        if len(self.aux_factors) != 2:
            raise ShapeError("aux_factors needs exactly two factors")
        for f in self.aux_factors:
            if any(n % f for n in self.patch_dims[1:]):
                raise ShapeError(f"in-plane patch dims not divisible by {f}")

    def channels(self, k: int) -> int:
        """Channel count at scale ``k`` (1-based)."""
        return self.base_channels * 2 ** (k - 1)

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("n_scales")
        d["patch_dims"] = list(self.patch_dims)
        d["aux_factors"] = list(self.aux_factors)
        return d


def scale_dims(dims: Sequence[int], k: int) -> tuple:
    """Spatial dims of the scale-``k`` grid for an input of ``dims``."""
    return tuple(math.ceil(n / 2 ** (k - 1)) for n in dims)


@dataclass
class ScaleFeatureSet:
    f_i: torch.Tensor
    f_j: torch.Tensor
    f_k: torch.Tensor
    a2: torch.Tensor
    a3: torch.Tensor
    h: torch.Tensor
    amf: torch.Tensor


# ---------------------------------------------------------------------------
# building blocks


class InstanceNorm(nn.Module):
    """Per-sample, per-channel normalization over the spatial axes.

    Unlike ``nn.InstanceNorm3d`` this accepts grids with a single voxel,
    which occur at the coarsest scale of small patches.
    """

    def __init__(self, channels: int, eps: float = 1e-5):
        super().__init__()
        self.eps = eps
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))

    def forward(self, x):
        mean = x.mean(dim=(2, 3, 4), keepdim=True)
        var = x.var(dim=(2, 3, 4), keepdim=True, unbiased=False)
        x = (x - mean) / torch.sqrt(var + self.eps)
        return x * self.weight.view(1, -1, 1, 1, 1) + self.bias.view(1, -1, 1, 1, 1)


_NORMS = {"batch": nn.BatchNorm3d, "instance": InstanceNorm}


class ConvNormAct(nn.Sequential):
    def __init__(self, cin, cout, norm="batch", stride=1):
        super().__init__(
            nn.Conv3d(cin, cout, 3, stride=stride, padding=1, bias=False),
            _NORMS[norm](cout),
            nn.ReLU(inplace=True),
        )


class DoubleConv(nn.Sequential):
    def __init__(self, cin, cout, norm="batch"):
        super().__init__(ConvNormAct(cin, cout, norm), ConvNormAct(cout, cout, norm))


class EncoderBranch(nn.Module):
    """Five-level encoder; levels 2-5 start with a stride-2 convolution."""

    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        levels = [DoubleConv(cfg.in_channels, cfg.channels(1), cfg.norm)]
        for k in range(2, N_SCALES + 1):
            levels.append(
                nn.Sequential(
                    ConvNormAct(cfg.channels(k - 1), cfg.channels(k), cfg.norm, stride=2),
                    DoubleConv(cfg.channels(k), cfg.channels(k), cfg.norm),
                )
            )
        self.levels = nn.ModuleList(levels)

    def forward(self, x) -> List[torch.Tensor]:
        feats = []
        for level in self.levels:
            x = level(x)
            feats.append(x)
        return feats


def attention_fuse(f_i, f_j, f_k, fc2: nn.Linear, fc3: nn.Linear, details: bool = False):
    """Gate ``f_i`` channel-wise with attention from ``f_j`` then ``f_k``.

    ``A2 = sigmoid(fc2(GAP(f_j)))``, ``H = f_i + A2 * f_i``,
    ``A3 = sigmoid(fc3(GAP(f_k)))``, ``AMF = H + A3 * H``.
    Spatial sizes of the three inputs may differ; only channels must agree.
    """
    c = f_i.shape[1]
    if f_j.shape[1] != c or f_k.shape[1] != c:
        raise ShapeError(
            f"channel mismatch: F_I {f_i.shape[1]}, F_J {f_j.shape[1]}, F_K {f_k.shape[1]}"
        )
    a2 = torch.sigmoid(fc2(f_j.mean(dim=(2, 3, 4))))[..., None, None, None]
    h = f_i + a2 * f_i
    a3 = torch.sigmoid(fc3(f_k.mean(dim=(2, 3, 4))))[..., None, None, None]
    amf = h + a3 * h
    if details:
        return ScaleFeatureSet(f_i, f_j, f_k, a2, a3, h, amf)
    return amf


class AttentionFusion(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.fc2 = nn.Linear(channels, channels)
        self.fc3 = nn.Linear(channels, channels)

    def forward(self, f_i, f_j, f_k, details=False):
        return attention_fuse(f_i, f_j, f_k, self.fc2, self.fc3, details=details)


class SideHead(nn.Sequential):
    """Three 3x3x3 conv layers, a 1x1x1 conv to one channel, sigmoid."""

    def __init__(self, channels: int, norm="batch"):
        super().__init__(
            ConvNormAct(channels, channels, norm),
            ConvNormAct(channels, channels, norm),
            ConvNormAct(channels, channels, norm),
            nn.Conv3d(channels, 1, 1),
            nn.Sigmoid(),
        )


class DecoderLevel(nn.Module):
    def __init__(self, c_coarse, c_skip, norm="batch"):
        super().__init__()
        self.conv = DoubleConv(c_coarse + c_skip, c_skip, norm)

    def forward(self, coarse, skip):
        up = F.interpolate(coarse, size=skip.shape[2:], mode="trilinear", align_corners=False)
        return self.conv(torch.cat([up, skip], dim=1))


def derive_auxiliary_volumes(x: torch.Tensor, factors=(2, 4)):
    """Average-pool ``x`` in-plane (H, W) by each factor; depth untouched."""
    if x.dim() != 5:
        raise ShapeError(f"expected (N, C, D, H, W) input, got {tuple(x.shape)}")
    out = []
    for f in factors:
        if x.shape[3] % f or x.shape[4] % f:
            raise ShapeError(f"in-plane dims {tuple(x.shape[3:])} not divisible by {f}")
        out.append(F.avg_pool3d(x, kernel_size=(1, f, f)))
    return tuple(out)


class MDACNN(nn.Module):
    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        self.cfg = cfg
        self.branch_i = EncoderBranch(cfg)
        self.branch_j = EncoderBranch(cfg)
        self.branch_k = EncoderBranch(cfg)
        self.fusions = nn.ModuleList(AttentionFusion(cfg.channels(k)) for k in range(1, N_SCALES + 1))
        # decoders[k-1] merges level k+1 into level k, for k = 1..4
        self.decoders = nn.ModuleList(
            DecoderLevel(cfg.channels(k + 1), cfg.channels(k), cfg.norm) for k in range(1, N_SCALES)
        )
        self.heads = nn.ModuleList(SideHead(cfg.channels(k), cfg.norm) for k in range(1, N_SCALES + 1))

    def encode(self, x, details=False):
        j, k = derive_auxiliary_volumes(x, self.cfg.aux_factors)
        feats = zip(self.branch_i(x), self.branch_j(j), self.branch_k(k))
        return [fuse(fi, fj, fk, details=details) for fuse, (fi, fj, fk) in zip(self.fusions, feats)]

    def decode(self, amfs: Sequence[torch.Tensor]) -> List[torch.Tensor]:
        dec = [None] * N_SCALES
        dec[-1] = amfs[-1]
        for k in range(N_SCALES - 2, -1, -1):
            dec[k] = self.decoders[k](dec[k + 1], amfs[k])
        return [head(d) for head, d in zip(self.heads, dec)]

    def forward(self, x) -> List[torch.Tensor]:
        if tuple(x.shape[2:]) != self.cfg.patch_dims:
            raise ShapeError(f"input patch {tuple(x.shape[2:])} != configured {self.cfg.patch_dims}")
        return self.decode(self.encode(x))


def encode_branches(model: MDACNN, x: torch.Tensor) -> List[ScaleFeatureSet]:
    return model.encode(x, details=True)


def decode_and_predict(model: MDACNN, amfs: Sequence[torch.Tensor]) -> List[torch.Tensor]:
    return model.decode(amfs)


def forward(model: MDACNN, x: torch.Tensor) -> List[torch.Tensor]:
    return model(x)


def init_parameters(model: nn.Module, seed: int) -> nn.Module:
    """Fan-in scaled uniform init for convs and linear layers, from ``seed``."""
    gen = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        for mod in model.modules():
            if isinstance(mod, (nn.Conv3d, nn.Linear)):
                fan_in = mod.weight[0].numel()
                bound = math.sqrt(6.0 / fan_in)
                mod.weight.uniform_(-bound, bound, generator=gen)
                if mod.bias is not None:
                    mod.bias.zero_()
            elif isinstance(mod, (InstanceNorm, nn.BatchNorm3d)):
                mod.weight.fill_(1.0)
                mod.bias.zero_()
        if isinstance(model, MDACNN):
            for head in model.heads:
                head[-2].bias.fill_(math.log(HEAD_PRIOR / (1 - HEAD_PRIOR)))
    return model


def build_model(cfg: NetworkConfig, seed: int = 0, dtype=torch.float32) -> MDACNN:
    model = MDACNN(cfg)
    init_parameters(model, seed)
    return model.to(dtype)


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())
