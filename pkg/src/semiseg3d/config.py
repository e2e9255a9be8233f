"""Flat ``key = value`` run configuration with strict key checking."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Optional

from .errors import ConfigError
from .mda_cnn import NetworkConfig
from .mean_teacher import TrainConfig
from .volume_store import LUNG_WINDOW, NOISE_SIGMA_HU, noise_sigma_normalized


@dataclass
class RunConfig:
    # paths
    data_dir: Optional[str] = None
    out_dir: Optional[str] = None
    # synthetic data
    n_labeled: int = 12
    n_unlabeled: int = 12
    n_test: int = 0
    synth_dims: tuple = (64, 64, 64)
    synth_spacing: tuple = (1.0, 1.0, 1.0)
    n_blobs: int = 3
    synth_noise: float = 0.05
    # network
    base_channels: int = 8
    patch_dims: tuple = (32, 32, 32)
    aux_factors: tuple = (2, 4)
    norm: str = "batch"
    # training
    lr: float = 3e-4
    i_max: int = 5000
    batch_labeled: int = 2
    batch_unlabeled: int = 2
    beta: float = 0.99
    lambda_max: float = 5.0
    sigma_noise_hu: float = NOISE_SIGMA_HU
    fg_prob: float = 0.5
    teacher_noise: bool = True
    use_consistency: bool = True
    checkpoint_every: int = 0
    val_every: int = 0
    test_fold: int = 1
    # preprocessing / inference / evaluation
    window_lo: float = LUNG_WINDOW[0]
    window_hi: float = LUNG_WINDOW[1]
    threshold: float = 0.5
    tau_mm: float = 3.0
    save_prob: bool = False
    teacher_infer: bool = False
    seed: int = 0

    def network(self) -> NetworkConfig:
        return NetworkConfig(
            base_channels=self.base_channels,
            patch_dims=self.patch_dims,
            aux_factors=self.aux_factors,
            norm=self.norm,
        )

    def training(self) -> TrainConfig:
        return TrainConfig(
            lr=self.lr,
            i_max=self.i_max,
            batch_labeled=self.batch_labeled,
            batch_unlabeled=self.batch_unlabeled,
            beta=self.beta,
            lambda_max=self.lambda_max,
            sigma_noise=noise_sigma_normalized(self.sigma_noise_hu, (self.window_lo, self.window_hi)),
            seed=self.seed,
            fg_prob=self.fg_prob,
            teacher_noise=self.teacher_noise,
            use_consistency=self.use_consistency,
            checkpoint_every=self.checkpoint_every,
            val_every=self.val_every,
        )

    def dump(self) -> str:
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            if value is None:
                continue
            if isinstance(value, tuple):
                value = ", ".join(str(v) for v in value)
            elif isinstance(value, bool):
                value = str(value).lower()
            lines.append(f"{f.name} = {value}")
        return "\n".join(lines) + "\n"


_FIELDS = {f.name: f for f in fields(RunConfig)}
_DEFAULTS = RunConfig()


def _convert(key: str, raw: str):
    default = getattr(_DEFAULTS, key)
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(f"not a boolean: {raw!r}")
            return low in ("true", "1", "yes")
        if isinstance(default, tuple):
            kind = type(default[0])
            return tuple(kind(part) for part in raw.replace(",", " ").split())
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {exc}") from exc


def parse_config_text(text: str, source: str = "<config>") -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment. Unknown keys are errors."""
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in _FIELDS:
            raise ConfigError(f"{source}:{lineno}: unknown config key {key!r}")
        values[key] = _convert(key, raw)
    return values


def load_config(path=None, overrides: Optional[dict] = None) -> RunConfig:
    """Build a RunConfig from an optional file plus overrides (overrides win)."""
    values = {}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        values.update(parse_config_text(path.read_text(), str(path)))
    for key, value in (overrides or {}).items():
        if key not in _FIELDS:
            raise ConfigError(f"unknown config key {key!r}")
        if value is not None:
            values[key] = value
    cfg = dataclasses.replace(_DEFAULTS, **values)
    if not cfg.window_lo < cfg.window_hi:
        raise ConfigError(f"window_lo {cfg.window_lo} must be below window_hi {cfg.window_hi}")
    return cfg
