"""Student/teacher training: EMA updates, mixed batches, curves, checkpoints."""

from __future__ import annotations

import copy
import csv
import io
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
import torch

from . import volume_store as vs
from .errors import ConfigMismatch, MalformedFile, NonFiniteLoss, ShapeError
from .losses import LAMBDA_MAX, LossBreakdown, consistency_loss, ramp_weight, supervised_loss
from .mda_cnn import MDACNN, NetworkConfig, build_model

log = logging.getLogger(__name__)

CURVE_HEADER = ["iter", "epoch", "sup_loss", "cons_loss", "lambda", "total", "val_sup_loss"]
CHECKPOINT_FORMAT = 1


@dataclass
class TrainConfig:
    lr: float = 3e-4
    i_max: int = 5000
    batch_labeled: int = 2
    batch_unlabeled: int = 2
    beta: float = 0.99
    lambda_max: float = LAMBDA_MAX
    sigma_noise: float = vs.noise_sigma_normalized()
    seed: int = 0
    fg_prob: float = 0.5
    teacher_noise: bool = True
    use_consistency: bool = True
    checkpoint_every: int = 0
    val_every: int = 0

    def __post_init__(self):
        if not 0 <= self.beta < 1:
            raise ValueError(f"beta must lie in [0, 1), got {self.beta}")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.batch_labeled < 1 or self.batch_unlabeled < 1:
            raise ValueError("batch sizes must be >= 1")
        if self.i_max < 1:
            raise ValueError("i_max must be >= 1")


@dataclass
class CurveRecord:
    iter: int
    epoch: int
    sup_loss: float
    cons_loss: float
    lam: float
    total: float
    val_sup_loss: Optional[float] = None

    def as_row(self):
        val = "" if self.val_sup_loss is None else repr(float(self.val_sup_loss))
        return [str(self.iter), str(self.epoch), repr(self.sup_loss), repr(self.cons_loss),
                repr(self.lam), repr(self.total), val]


@dataclass
class CurveLog:
    records: List[CurveRecord] = field(default_factory=list)

    def append(self, rec: CurveRecord):
        if self.records and rec.iter <= self.records[-1].iter:
            raise ValueError(f"iteration {rec.iter} does not follow {self.records[-1].iter}")
        self.records.append(rec)

    def __len__(self):
        return len(self.records)

    def column(self, name: str) -> list:
        return [getattr(r, name) for r in self.records]

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(CURVE_HEADER)
        for rec in self.records:
            writer.writerow(rec.as_row())
        return buf.getvalue()

    def write_csv(self, path):
        Path(path).write_text(self.to_csv())

    @classmethod
    def read_csv(cls, path) -> "CurveLog":
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            missing = [c for c in CURVE_HEADER if c not in (reader.fieldnames or [])]
            if missing:
                raise MalformedFile(f"{path}: missing column(s) {', '.join(missing)}")
            out = cls()
            try:
                for row in reader:
                    out.append(CurveRecord(
                        int(row["iter"]), int(row["epoch"]), float(row["sup_loss"]),
                        float(row["cons_loss"]), float(row["lambda"]), float(row["total"]),
                        float(row["val_sup_loss"]) if row["val_sup_loss"] else None,
                    ))
            except (TypeError, ValueError) as exc:
                raise MalformedFile(f"{path}: {exc}") from exc
        return out


@dataclass
class NetworkState:
    net_cfg: NetworkConfig
    student: MDACNN
    teacher: MDACNN
    optimizer: torch.optim.Optimizer
    t: int = 0
    rng_labeled: np.random.Generator = None
    rng_unlabeled: np.random.Generator = None
    log: CurveLog = field(default_factory=CurveLog)


def _rngs(seed):
    seq_l, seq_u = np.random.SeedSequence(seed).spawn(2)
    return np.random.default_rng(seq_l), np.random.default_rng(seq_u)


def make_teacher(student: torch.nn.Module) -> torch.nn.Module:
    """Copy ``student`` into a frozen teacher.

    The teacher's batch-norm layers normalize with batch statistics in train
    mode but never update their running statistics themselves (momentum 0);
    those only change through ``ema_update``.
    """
    teacher = copy.deepcopy(student)
    for p in teacher.parameters():
        p.requires_grad_(False)
    for mod in teacher.modules():
        if isinstance(mod, torch.nn.modules.batchnorm._BatchNorm):
            mod.momentum = 0.0
    return teacher


def init_state(net_cfg: NetworkConfig, cfg: TrainConfig) -> NetworkState:
    student = build_model(net_cfg, seed=cfg.seed)
    teacher = make_teacher(student)
    opt = torch.optim.Adam(student.parameters(), lr=cfg.lr, betas=(0.9, 0.999))
    rng_l, rng_u = _rngs(cfg.seed)
    return NetworkState(net_cfg, student, teacher, opt, 0, rng_l, rng_u)


# ---------------------------------------------------------------------------
# EMA


def _named_tensors(obj):
    if isinstance(obj, torch.nn.Module):
        named = dict(obj.named_parameters())
        named.update(obj.named_buffers())
        return named
    return dict(obj)


def ema_update(teacher, student, beta: float):
    """In-place ``teacher <- beta * teacher + (1 - beta) * student``.

    Accepts modules or name->tensor mappings; returns ``teacher``. For
    modules, floating-point buffers (batch-norm running statistics) are
    averaged the same way and integer buffers are copied.
    """
    if not 0 <= beta < 1:
        raise ValueError(f"beta must lie in [0, 1), got {beta}")
    t_named, s_named = _named_tensors(teacher), _named_tensors(student)
    if t_named.keys() != s_named.keys():
        raise ShapeError("teacher and student parameter names differ")
    with torch.no_grad():
        for name, tp in t_named.items():
            sp = s_named[name]
            if tp.shape != sp.shape:
                raise ShapeError(f"{name}: teacher {tuple(tp.shape)} vs student {tuple(sp.shape)}")
            if tp.is_floating_point():
                tp.copy_(beta * tp + (1 - beta) * sp)
            else:
                tp.copy_(sp)
    return teacher


# ---------------------------------------------------------------------------
# batches


@dataclass
class Batch:
    labeled: torch.Tensor
    targets: list
    student_unlabeled: Optional[torch.Tensor] = None
    teacher_unlabeled: Optional[torch.Tensor] = None


def _stack(arrays):
    return torch.from_numpy(np.stack(arrays)[:, None].astype(np.float32))


def sample_labeled(cases, n, patch_dims, cfg: TrainConfig, rng):
    idx = rng.choice(len(cases), size=n, replace=len(cases) < n)
    images, masks = [], []
    for i in idx:
        vol, mask = cases[i]
        pp = vs.sample_patch(vol, mask, patch_dims, rng, fg_prob=cfg.fg_prob)
        pp = vs.augment_flip(pp, rng)
        pp = vs.augment_noise(pp, cfg.sigma_noise, rng)
        images.append(pp.image.voxels)
        masks.append(pp.mask)
    scales = [vs.downsample_mask(m).targets for m in masks]
    targets = [_stack([s[k].labels for s in scales]) for k in range(vs.N_SCALES)]
    return _stack(images), targets


def sample_unlabeled(volumes, n, patch_dims, cfg: TrainConfig, rng):
    idx = rng.choice(len(volumes), size=n, replace=len(volumes) < n)
    s_imgs, t_imgs = [], []
    for i in idx:
        pp = vs.sample_patch(volumes[i], None, patch_dims, rng)
        pp = vs.augment_flip(pp, rng)
        s_imgs.append(vs.augment_noise(pp, cfg.sigma_noise, rng).image.voxels)
        if cfg.teacher_noise:
            t_imgs.append(vs.augment_noise(pp, cfg.sigma_noise, rng).image.voxels)
        else:
            t_imgs.append(s_imgs[-1])
    return _stack(s_imgs), _stack(t_imgs)


def compute_losses(student, teacher, batch: Batch, lam: float):
    """Forward both networks on ``batch``; returns (total tensor, LossBreakdown)."""
    dtype = next(student.parameters()).dtype
    preds = student(batch.labeled.to(dtype))
    sup, sup_terms = supervised_loss(preds, batch.targets)
    if batch.student_unlabeled is not None:
        s_preds = student(batch.student_unlabeled.to(dtype))
        with torch.no_grad():
            t_preds = teacher(batch.teacher_unlabeled.to(dtype))
        cons, cons_terms = consistency_loss(s_preds, t_preds)
    else:
        cons = torch.zeros((), dtype=dtype)
        cons_terms = [torch.zeros((), dtype=dtype)] * len(sup_terms)
    total = sup + lam * cons
    breakdown = LossBreakdown(
        supervised=sup.item(), consistency=cons.item(), lam=lam,
        total=sup.item() + lam * cons.item(),
        per_scale_supervised=[x.item() for x in sup_terms],
        per_scale_consistency=[x.item() for x in cons_terms],
    )
    return total, breakdown


def train_step(state: NetworkState, batch: Batch, cfg: TrainConfig):
    """One Adam step on the student followed by the EMA teacher update.

    The consistency weight uses the 1-based iteration number ``state.t + 1``.
    """
    i = state.t + 1
    lam = ramp_weight(i, cfg.i_max, cfg.lambda_max)
    state.student.train()
    state.teacher.train()
    total, breakdown = compute_losses(state.student, state.teacher, batch, lam)
    if not math.isfinite(breakdown.total):
        raise NonFiniteLoss(
            f"non-finite loss at iteration {i}: supervised={breakdown.per_scale_supervised}, "
            f"consistency={breakdown.per_scale_consistency}, lambda={lam}"
        )
    state.optimizer.zero_grad(set_to_none=True)
    total.backward()
    state.optimizer.step()
    ema_update(state.teacher, state.student, cfg.beta)
    state.t = i
    return state, breakdown


def center_patch(volume: vs.Volume3D, mask: vs.Mask3D, patch_dims):
    image, _ = vs.pad_to(volume.voxels, patch_dims)
    labels, _ = vs.pad_to(mask.labels, patch_dims)
    origin = [(n - s) // 2 for n, s in zip(image.shape, patch_dims)]
    sl = tuple(slice(o, o + s) for o, s in zip(origin, patch_dims))
    return image[sl], vs.Mask3D(labels[sl], mask.spacing)


def validation_loss(model, cases, patch_dims) -> float:
    """Mean supervised loss of ``model`` on the centre patch of each case."""
    dtype = next(model.parameters()).dtype
    losses = []
    with torch.no_grad():
        for vol, mask in cases:
            image, m = center_patch(vol, mask, patch_dims)
            preds = model(torch.from_numpy(image)[None, None].to(dtype))
            targets = [torch.from_numpy(t.labels)[None, None] for t in vs.downsample_mask(m).targets]
            losses.append(float(supervised_loss(preds, targets)[0]))
    return float(np.mean(losses))


def train(
    cfg: TrainConfig,
    labeled_set: Sequence,
    unlabeled_set: Sequence = (),
    net_cfg: Optional[NetworkConfig] = None,
    val_set: Sequence = (),
    state: Optional[NetworkState] = None,
    checkpoint_dir=None,
    until: Optional[int] = None,
):
    """Run training up to ``cfg.i_max`` iterations (or stop early at ``until``).

    ``labeled_set`` holds (Volume3D, Mask3D) pairs and ``unlabeled_set``
    Volume3D items, both already window-normalized. Passing ``state`` resumes
    from it. Returns ``(state, curve_log)``.
    """
    if not labeled_set:
        raise ValueError("training needs at least one labeled case")
    if state is None:
        state = init_state(net_cfg or NetworkConfig(), cfg)
    patch = state.net_cfg.patch_dims
    use_unlabeled = cfg.use_consistency and len(unlabeled_set) > 0
    n_labeled = len(labeled_set)

    stop = cfg.i_max if until is None else min(until, cfg.i_max)
    while state.t < stop:
        x, targets = sample_labeled(labeled_set, cfg.batch_labeled, patch, cfg, state.rng_labeled)
        batch = Batch(x, targets)
        if use_unlabeled:
            batch.student_unlabeled, batch.teacher_unlabeled = sample_unlabeled(
                unlabeled_set, cfg.batch_unlabeled, patch, cfg, state.rng_unlabeled
            )
        state, b = train_step(state, batch, cfg)
        i = state.t
        val = None
        if cfg.val_every and val_set and i % cfg.val_every == 0:
            state.student.eval()
            val = validation_loss(state.student, val_set, patch)
        state.log.append(CurveRecord(
            i, (i * cfg.batch_labeled) // n_labeled, b.supervised, b.consistency, b.lam, b.total, val
        ))
        if i % 25 == 0 or i == cfg.i_max:
            log.info("iter %d sup %.4f cons %.5f lambda %.3f", i, b.supervised, b.consistency, b.lam)
        if checkpoint_dir is not None and cfg.checkpoint_every and i % cfg.checkpoint_every == 0:
            save_checkpoint(state, Path(checkpoint_dir) / f"checkpoint_{i:06d}.pt")
    return state, state.log


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(state: NetworkState, path, cfg: Optional[TrainConfig] = None) -> None:
    payload = {
        "manifest": {
            "format": CHECKPOINT_FORMAT,
            "network": state.net_cfg.to_dict(),
            "iteration": state.t,
            "train": asdict(cfg) if cfg is not None else None,
        },
        "student": state.student.state_dict(),
        "teacher": state.teacher.state_dict(),
        "optimizer": state.optimizer.state_dict(),
        "rng": [state.rng_labeled.bit_generator.state, state.rng_unlabeled.bit_generator.state],
        "log": [asdict(r) for r in state.log.records],
    }
    torch.save(payload, path)


def load_checkpoint(path, net_cfg: Optional[NetworkConfig] = None, lr: float = 3e-4) -> NetworkState:
    """Restore a NetworkState; raises ConfigMismatch when ``net_cfg`` differs."""
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
        manifest = payload["manifest"]
        stored = NetworkConfig(**manifest["network"])
    except FileNotFoundError:
        raise
    except Exception as exc:
        raise MalformedFile(f"{path}: not a valid checkpoint ({exc})") from exc
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise MalformedFile(f"{path}: unsupported checkpoint format {manifest.get('format')}")
    if net_cfg is not None and net_cfg.to_dict() != stored.to_dict():
        raise ConfigMismatch(f"checkpoint network {stored.to_dict()} != requested {net_cfg.to_dict()}")
    student = MDACNN(stored)
    teacher = make_teacher(student)
    try:
        student.load_state_dict(payload["student"])
        teacher.load_state_dict(payload["teacher"])
    except (RuntimeError, KeyError) as exc:
        raise MalformedFile(f"{path}: {exc}") from exc
    opt = torch.optim.Adam(student.parameters(), lr=lr, betas=(0.9, 0.999))
    opt.load_state_dict(payload["optimizer"])
    rngs = []
    for st in payload["rng"]:
        g = np.random.default_rng()
        g.bit_generator.state = st
        rngs.append(g)
    curve = CurveLog([CurveRecord(**r) for r in payload.get("log", [])])
    return NetworkState(stored, student, teacher, opt, int(manifest["iteration"]), rngs[0], rngs[1], curve)
