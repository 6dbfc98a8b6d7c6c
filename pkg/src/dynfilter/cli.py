"""Batch command-line interface.

Exit codes: 0 success, 2 input or usage error, 3 runtime error.
"""
from __future__ import annotations

import argparse
import glob
import hashlib
import json
import logging
import os
import sys
import time
from typing import Dict, List, Optional

import numpy as np

from . import __version__
from .config import Config, load_config, parse_override, tomllib
from .errors import DynFilterError, InputError
from .evaluation import (
    KITTI,
    TUM,
    ape,
    confusion,
    parse_trajectory,
    read_labels,
    read_stats_csv,
    rpe,
    stats,
    write_confusion_csv,
    write_improvement_csv,
    write_plot_csv,
    write_stats_csv,
)
from .filtering import read_outliers, read_points
from .masks import read_detections
from .runtime import FrameInput, run_pipeline, write_outputs
from .synth import SceneConfig, export_scene, generate_scene

log = logging.getLogger("dynfilter")

EXIT_OK, EXIT_INPUT, EXIT_RUNTIME = 0, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 16), b""):
            h.update(block)
    return h.hexdigest()


def write_manifest(out_dir, command, config: Optional[dict], inputs: List[str], outputs: List[str], started):
    """Write ``manifest.json`` atomically (temporary file, then rename)."""
    manifest = {
        "command": command,
        "config": config,
        "inputs": {p: _sha256(p) for p in inputs if os.path.isfile(p)},
        "outputs": sorted(o.replace(os.sep, "/") for o in outputs),
        "version": __version__,
        "wall_time": round(time.perf_counter() - started, 6),
    }
    path = os.path.join(out_dir, "manifest.json")
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, path)
    return path


def _overrides(items) -> Dict[str, object]:
    out = {}
    for item in items or ():
        k, v = parse_override(item)
        out[k] = v
    return out


def _load_cfg(args) -> Config:
    over = _overrides(args.set)
    if getattr(args, "threads", None) is not None:
        over["threads"] = args.threads
    return load_config(args.config, over)


def _require(path, kind):
    if not os.path.exists(path):
        raise InputError(f"{kind} not found: {path}")


# --- commands -------------------------------------------------------------------------

def _frame_id_of(path):
    stem = os.path.splitext(os.path.basename(path))[0]
    try:
        return int(stem)
    except ValueError:
        raise InputError(f"points file name is not a frame number: {path}") from None


def cmd_filter(args) -> int:
    started = time.perf_counter()
    _require(args.points, "points directory")
    _require(args.detections, "detections file")
    cfg = _load_cfg(args)
    K = cfg.intrinsics()
    dets = read_detections(args.detections)
    files = {_frame_id_of(p): p for p in sorted(glob.glob(os.path.join(args.points, "*.txt")))}
    frame_ids = sorted(set(files) | set(dets))
    stamps = None
    if args.times:
        _require(args.times, "times file")
        with open(args.times, "r", encoding="utf-8") as fh:
            stamps = [float(line) for line in fh if line.strip()]
    init = None
    if args.init_pose:
        _require(args.init_pose, "initial pose file")
        init = parse_trajectory(args.init_pose, KITTI)[0].inverse()
    frames = []
    for fid in frame_ids:
        ts = stamps[fid] if stamps is not None and fid < len(stamps) else fid * cfg.frame_period
        pts = read_points(files[fid], fid) if fid in files else None
        frames.append(FrameInput(fid, ts, pts))
    result = run_pipeline(frames, dets, cfg, K, init_pose=init, workers=max(cfg.threads, 1))
    os.makedirs(args.out, exist_ok=True)
    outputs = write_outputs(result, args.out)
    for fid, msg in result.errors:
        print(f"frame {fid}: {msg}", file=sys.stderr)
    inputs = [args.detections] + [files[f] for f in sorted(files)]
    write_manifest(args.out, "filter", cfg.as_dict(), inputs, outputs, started)
    n_out = sum(int(f.filter.outliers.sum()) for f in result.frames)
    print(f"{len(result.frames)} frames, {n_out} outliers -> {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    started = time.perf_counter()
    if args.delta < 1:
        raise UsageError("--delta must be at least 1")
    _require(args.est, "estimate trajectory")
    _require(args.gt, "ground-truth trajectory")
    est = parse_trajectory(args.est, args.format)
    gt = parse_trajectory(args.gt, args.format)
    if args.mode == "ape":
        errors = ape(est, gt, align=args.align or args.scale, with_scale=args.scale)
    else:
        errors = rpe(est, gt, args.delta)
    st = stats(errors)
    os.makedirs(args.out, exist_ok=True)
    write_stats_csv(os.path.join(args.out, "stats.csv"), {args.mode: st})
    write_plot_csv(os.path.join(args.out, "plot.csv"), errors)
    cfg = {"mode": args.mode, "align": args.align, "scale": args.scale, "delta": args.delta, "format": args.format}
    write_manifest(args.out, "eval", cfg, [args.est, args.gt], ["stats.csv", "plot.csv"], started)
    print("%s max %.6f median %.6f min %.6f rmse %.6f" % (args.mode, st.max, st.median, st.min, st.rmse))
    return EXIT_OK


def cmd_synth(args) -> int:
    started = time.perf_counter()
    data = {}
    if args.config:
        _require(args.config, "scene config")
        data.update(_read_scene_file(args.config))
    data.update(_overrides(args.set))
    if args.seed is not None:
        data["seed"] = args.seed
    try:
        scfg = SceneConfig.from_mapping(data)
    except (TypeError, ValueError) as exc:
        raise InputError(f"invalid scene config: {exc}") from None
    scene = generate_scene(scfg)
    hashes = export_scene(scene, args.out)
    print(f"{len(scene)} frames -> {args.out}; mask precision {scene.mask_precision} recall {scene.mask_recall}")
    log.debug("synth took %.3fs, %d files", time.perf_counter() - started, len(hashes))
    return EXIT_OK


def _read_scene_file(path):
    try:
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise InputError(f"{path}: {exc}") from None


def cmd_report(args) -> int:
    started = time.perf_counter()
    _require(args.baseline, "baseline stats")
    _require(args.ours, "our stats")
    base = read_stats_csv(args.baseline)
    ours = read_stats_csv(args.ours)
    common = [m for m in base if m in ours]
    if not common:
        raise InputError("the two stats files share no metric")
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, "improvement.csv")
    write_improvement_csv(path, {m: base[m] for m in common}, {m: ours[m] for m in common})
    write_manifest(args.out, "report", None, [args.baseline, args.ours], ["improvement.csv"], started)
    with open(path, "r", encoding="utf-8") as fh:
        sys.stdout.write(fh.read())
    return EXIT_OK


def cmd_confusion(args) -> int:
    started = time.perf_counter()
    _require(args.outliers, "outlier directory")
    _require(args.labels, "label file")
    labels = read_labels(args.labels)
    pred, gt = [], []
    for path in sorted(glob.glob(os.path.join(args.outliers, "*.txt"))):
        fid = _frame_id_of(path)
        for tid, flag in read_outliers(path).items():
            if (fid, tid) in labels:
                pred.append(flag)
                gt.append(labels[(fid, tid)])
    if not pred:
        raise InputError("no outlier entries matched the label file")
    rep = confusion(np.array(pred), np.array(gt))
    os.makedirs(args.out, exist_ok=True)
    write_confusion_csv(os.path.join(args.out, "confusion.csv"), rep)
    write_manifest(args.out, "confusion", None, [args.labels], ["confusion.csv"], started)
    fmt = lambda v: "n/a" if v is None else "%.4f" % v
    print("tp %d fp %d fn %d tn %d precision %s recall %s f1 %s accuracy %s"
          % (rep.tp, rep.fp, rep.fn, rep.tn, fmt(rep.precision), fmt(rep.recall), fmt(rep.f1), fmt(rep.accuracy)))
    return EXIT_OK


# --- argument parsing -----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="dynfilter", description="Dynamic-point filtering, evaluation and synthetic scenes.")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    def common(sp, threads=False):
        sp.add_argument("--config", help="flat key = value TOML file (default: $PCR_CONFIG)")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
        if threads:
            sp.add_argument("--threads", type=int, default=None, help="worker threads (1 = reference mode)")

    f = sub.add_parser("filter", help="run the filtering pipeline over a points directory")
    f.add_argument("points")
    f.add_argument("detections")
    f.add_argument("out")
    f.add_argument("--times", help="one timestamp per line, indexed by frame id")
    f.add_argument("--init-pose", help="KITTI file whose first line is the initial camera-to-world pose")
    common(f, threads=True)
    f.set_defaults(func=cmd_filter)

    e = sub.add_parser("eval", help="APE/RPE statistics for a trajectory pair")
    e.add_argument("est")
    e.add_argument("gt")
    e.add_argument("out")
    e.add_argument("--mode", choices=("ape", "rpe"), default="ape")
    e.add_argument("--align", action="store_true", help="Umeyama-align before APE")
    e.add_argument("--scale", action="store_true", help="also estimate scale (implies --align)")
    e.add_argument("--delta", type=int, default=1, help="RPE index gap")
    e.add_argument("--format", choices=(KITTI, TUM), default=KITTI)
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("synth", help="generate and export a synthetic scene")
    s.add_argument("out")
    s.add_argument("--seed", type=int)
    common(s)
    s.set_defaults(func=cmd_synth)

    r = sub.add_parser("report", help="improvement percentages between two stats CSV files")
    r.add_argument("baseline")
    r.add_argument("ours")
    r.add_argument("out")
    r.set_defaults(func=cmd_report)

    c = sub.add_parser("confusion", help="confusion metrics of outlier files against labels")
    c.add_argument("outliers")
    c.add_argument("labels")
    c.add_argument("out")
    c.set_defaults(func=cmd_confusion)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (InputError, FileNotFoundError, IsADirectoryError, PermissionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except ValueError as exc:
        # malformed or degenerate input data
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (DynFilterError, RuntimeError, OSError, ArithmeticError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
