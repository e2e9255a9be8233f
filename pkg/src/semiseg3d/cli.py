"""Command-line entry point: synth, train, infer, evaluate, plot.

Exit codes: 0 success, 1 usage or config error, 2 data error, 3 internal error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import sys
import time
from pathlib import Path

import numpy as np

from . import metrics as mx
from . import volume_store as vs
from .config import RunConfig, load_config
from .errors import (
    ConfigError,
    ConfigMismatch,
    DegenerateCase,
    EmptyInput,
    MalformedFile,
    MissingCase,
    ShapeError,
    UnsupportedFormat,
)

log = logging.getLogger("semiseg3d")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INTERNAL = 0, 1, 2, 3
MANIFEST = "manifest.json"
METRICS_HEADER = ["case_id", *mx.METRIC_NAMES, "flags"]

_DATA_ERRORS = (
    MalformedFile, UnsupportedFormat, MissingCase, ConfigMismatch, ShapeError,
    DegenerateCase, EmptyInput, FileNotFoundError, IsADirectoryError,
)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage; that code is reserved for data errors
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# dataset layout


def _write_manifest(root: Path, cases: list, seed: int) -> None:
    (root / MANIFEST).write_text(json.dumps({"seed": seed, "cases": cases}, indent=2) + "\n")


def read_manifest(root) -> list:
    path = Path(root) / MANIFEST
    if not path.is_file():
        raise FileNotFoundError(f"dataset manifest not found: {path}")
    try:
        cases = json.loads(path.read_text())["cases"]
        for c in cases:
            c["id"], c["kind"], c["fold"] = str(c["id"]), c["kind"], int(c.get("fold", 0))
    except (ValueError, KeyError, TypeError) as exc:
        raise MalformedFile(f"{path}: {exc}") from exc
    return cases


def case_paths(root, case: dict) -> dict:
    root = Path(root)
    if case["kind"] == "labeled":
        return {"image": root / "images" / f"{case['id']}.vol3", "mask": root / "masks" / f"{case['id']}.vol3"}
    if case["kind"] == "unlabeled":
        return {"image": root / "unlabeled" / f"{case['id']}.vol3"}
    raise MalformedFile(f"case {case['id']}: unknown kind {case['kind']!r}")


def _check_files(root, cases) -> None:
    missing = [str(p) for c in cases for p in case_paths(root, c).values() if not p.is_file()]
    if missing:
        raise FileNotFoundError("missing dataset files:\n  " + "\n  ".join(missing))


def _normalize(v: vs.Volume3D, cfg: RunConfig) -> vs.Volume3D:
    return vs.window_normalize(v, cfg.window_lo, cfg.window_hi)


def load_dataset(cfg: RunConfig):
    """Return (train_labeled, unlabeled, held_out) with windowed intensities."""
    cases = read_manifest(cfg.data_dir)
    _check_files(cfg.data_dir, cases)
    train, held_out, unlabeled = [], [], []
    for c in cases:
        paths = case_paths(cfg.data_dir, c)
        image = _normalize(vs.load_volume(paths["image"]), cfg)
        if c["kind"] == "unlabeled":
            unlabeled.append(image)
            continue
        mask = vs.load_mask(paths["mask"])
        if mask.dims != image.dims:
            raise ShapeError(f"case {c['id']}: mask dims {mask.dims} != image dims {image.dims}")
        (held_out if c["fold"] == cfg.test_fold else train).append((image, mask))
    return train, unlabeled, held_out


# ---------------------------------------------------------------------------
# commands


def cmd_synth(cfg: RunConfig) -> Path:
    """Write a seeded synthetic dataset; intensities are stored in HU."""
    if cfg.out_dir is None:
        raise ConfigError("synth needs an output directory (--out)")
    if cfg.n_labeled < 1:
        raise ConfigError("n_labeled must be >= 1: training needs labeled cases")
    if cfg.n_unlabeled < 0 or cfg.n_test < 0:
        raise ConfigError("n_unlabeled and n_test must be >= 0")
    root = Path(cfg.out_dir)
    for sub in ("images", "masks", "unlabeled"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(cfg.seed)
    lo, hi = cfg.window_lo, cfg.window_hi
    cases = []
    plan = (
        [("labeled", f"case_{i:03d}", 0) for i in range(cfg.n_labeled)]
        + [("labeled", f"test_{i:03d}", cfg.test_fold) for i in range(cfg.n_test)]
        + [("unlabeled", f"unl_{i:03d}", 0) for i in range(cfg.n_unlabeled)]
    )
    for kind, cid, fold in plan:
        v, m = vs.make_synthetic_case(
            rng, cfg.synth_dims, cfg.synth_spacing, n_blobs=cfg.n_blobs, noise=cfg.synth_noise
        )
        hu = vs.Volume3D(v.voxels * (hi - lo) + lo, v.spacing)
        case = {"id": cid, "kind": kind, "fold": fold}
        paths = case_paths(root, case)
        vs.save_volume(hu, paths["image"])
        if kind == "labeled":
            vs.save_mask(m, paths["mask"])
        cases.append(case)
    _write_manifest(root, cases, cfg.seed)
    log.info("wrote %d cases to %s", len(cases), root)
    return root


def cmd_train(cfg: RunConfig, resume=None):
    from . import mean_teacher as mt

    if cfg.data_dir is None or cfg.out_dir is None:
        raise ConfigError("train needs data_dir and an output directory")
    if not Path(cfg.data_dir).is_dir():
        raise FileNotFoundError(f"data directory not found: {cfg.data_dir}")
    if resume is not None and not Path(resume).is_file():
        raise FileNotFoundError(f"checkpoint not found: {resume}")
    train_cfg, net_cfg = cfg.training(), cfg.network()
    labeled, unlabeled, held_out = load_dataset(cfg)
    if not labeled:
        raise ConfigError("no labeled training cases outside the test fold")

    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "run_config.txt").write_text(cfg.dump())
    state = mt.load_checkpoint(resume, net_cfg, lr=cfg.lr) if resume is not None else None
    if state is not None:
        log.info("resuming from %s at iteration %d", resume, state.t)
    log.info("training on %d labeled, %d unlabeled cases", len(labeled), len(unlabeled))
    start = time.perf_counter()
    state, curve = mt.train(
        train_cfg, labeled, unlabeled, net_cfg, val_set=held_out, state=state, checkpoint_dir=out
    )
    log.info("training took %.1f s", time.perf_counter() - start)
    mt.save_checkpoint(state, out / "checkpoint.pt", train_cfg)
    curve.write_csv(out / "curves.csv")
    return state


def cmd_infer(cfg: RunConfig, checkpoint, volume_paths) -> list:
    from . import mean_teacher as mt
    from .sliding_inference import predict_volume

    if cfg.out_dir is None:
        raise ConfigError("infer needs an output directory (--out)")
    if checkpoint is None:
        raise ConfigError("infer needs --checkpoint")
    paths = [Path(p) for p in volume_paths]
    missing = [str(p) for p in [Path(checkpoint), *paths] if not p.is_file()]
    if missing:
        raise FileNotFoundError("missing input files: " + ", ".join(missing))
    state = mt.load_checkpoint(checkpoint)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for p in paths:
        start = time.perf_counter()
        v = _normalize(vs.load_volume(p), cfg)
        mask, prob = predict_volume(v, state, cfg.threshold, use_teacher=cfg.teacher_infer)
        stem = p.name.split(".")[0]
        vs.save_mask(mask, out / f"{stem}.vol3")
        if cfg.save_prob:
            vs.save_volume(prob, out / f"{stem}_prob.vol3")
        written.append(out / f"{stem}.vol3")
        log.info("%s: %.2f s", p.name, time.perf_counter() - start)
    return written


def _case_ids(directory: Path) -> dict:
    if not directory.is_dir():
        raise FileNotFoundError(f"not a directory: {directory}")
    return {p.name.split(".")[0]: p for p in sorted(directory.iterdir()) if p.is_file() and not p.name.endswith("_prob.vol3")}


def _fmt(x: float) -> str:
    return "nan" if math.isnan(x) else repr(float(x))


def cmd_evaluate(pred_dir, gt_dir, tau_mm: float = mx.DEFAULT_TAU_MM, out_csv=None) -> str:
    """Score every prediction against its ground truth; returns the CSV text."""
    preds, gts = _case_ids(Path(pred_dir)), _case_ids(Path(gt_dir))
    unmatched = set(preds) ^ set(gts)
    if unmatched:
        raise MissingCase(unmatched)
    rows, reports = [], []
    for cid in sorted(gts):
        r = mx.evaluate_case(vs.load_mask(preds[cid]), vs.load_mask(gts[cid]), tau_mm)
        reports.append(r)
        rows.append([cid, *(_fmt(v) for v in r.values().values()), ";".join(r.flags)])
    agg = mx.aggregate(reports)
    excluded = ";".join(f"{k}_excluded={n}" for k, n in agg.n_excluded.items() if n)
    rows.append(["mean", *(_fmt(agg.mean[k]) for k in mx.METRIC_NAMES), excluded])
    rows.append(["variance", *(_fmt(agg.variance[k]) for k in mx.METRIC_NAMES), excluded])
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(METRICS_HEADER)
    writer.writerows(rows)
    text = buf.getvalue()
    if out_csv is not None:
        Path(out_csv).write_text(text)
    return text


def cmd_plot(curves_csv, out_image) -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    from .mean_teacher import CurveLog

    curve = CurveLog.read_csv(curves_csv)
    if not len(curve):
        raise MalformedFile(f"{curves_csv}: no rows")
    it = curve.column("iter")
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(it, curve.column("sup_loss"), marker=".", label="supervised")
    ax.plot(it, curve.column("cons_loss"), marker=".", label="consistency")
    val = [(i, v) for i, v in zip(it, curve.column("val_sup_loss")) if v is not None]
    if val:
        ax.plot(*zip(*val), marker="o", label="validation (supervised)")
    ax.set_xlabel("iteration")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend()
    fig.tight_layout()
    out_image = Path(out_image)
    out_image.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out_image)
    plt.close(fig)
    return out_image


# ---------------------------------------------------------------------------
# argument handling


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="semiseg3d", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, out=True):
        p.add_argument("--config", help="flat key = value config file")
        p.add_argument("--seed", type=int)
        if out:
            p.add_argument("--out", help="output directory")
        p.add_argument("--window-lo", type=float, help="lower HU bound of the intensity window")
        p.add_argument("--window-hi", type=float, help="upper HU bound of the intensity window")

    p = sub.add_parser("synth", help="write a synthetic dataset")
    common(p)

    p = sub.add_parser("train", help="train student and teacher networks")
    common(p)
    p.add_argument("--data", help="dataset directory (overrides data_dir)")
    p.add_argument("--iters", type=int, help="total iterations (overrides i_max)")
    p.add_argument("--resume", help="checkpoint to continue from")

    p = sub.add_parser("infer", help="segment volumes with a trained checkpoint")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--threshold", type=float)
    p.add_argument("--teacher-infer", action="store_true", default=None, help="use the teacher weights")
    p.add_argument("volumes", nargs="+")

    p = sub.add_parser("evaluate", help="score predicted masks against ground truth")
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--tau-mm", type=float, help="surface tolerance in mm for NSD")
    p.add_argument("--out", help="metrics CSV path (default: stdout)")
    p.add_argument("pred_dir")
    p.add_argument("gt_dir")

    p = sub.add_parser("plot", help="plot loss curves from curves.csv")
    p.add_argument("curves_csv")
    p.add_argument("out_image")
    return parser


def _config_from_args(args) -> RunConfig:
    overrides = {
        "seed": getattr(args, "seed", None),
        "out_dir": getattr(args, "out", None),
        "data_dir": getattr(args, "data", None),
        "i_max": getattr(args, "iters", None),
        "window_lo": getattr(args, "window_lo", None),
        "window_hi": getattr(args, "window_hi", None),
        "threshold": getattr(args, "threshold", None),
        "teacher_infer": getattr(args, "teacher_infer", None),
        "tau_mm": getattr(args, "tau_mm", None),
    }
    if args.command == "evaluate":
        overrides["out_dir"] = None
    return load_config(getattr(args, "config", None), overrides)


def run(args) -> None:
    if args.command == "plot":
        cmd_plot(args.curves_csv, args.out_image)
        return
    cfg = _config_from_args(args)
    if args.command == "synth":
        cmd_synth(cfg)
    elif args.command == "train":
        cmd_train(cfg, resume=args.resume)
    elif args.command == "infer":
        cmd_infer(cfg, args.checkpoint, args.volumes)
    elif args.command == "evaluate":
        text = cmd_evaluate(args.pred_dir, args.gt_dir, cfg.tau_mm, args.out)
        if args.out is None:
            sys.stdout.write(text)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        run(args)
    except (ConfigError, UsageError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except _DATA_ERRORS as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:  # noqa: BLE001
        log.debug("internal error", exc_info=True)
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
