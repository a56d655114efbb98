"""Command-line front end: ``calcscore {phantom,segment,score,eval}``."""
from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import tempfile
import warnings
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import __version__
from .calc import DEFAULT_THRESHOLD, SliceRange, run_pipeline
from .metrics import (
    BCE_EPS,
    ape,
    confusion,
    dice,
    iou,
    mape,
    per_slice_dice,
    r_squared,
    regression_fit,
)
from .phantom import example_spec, generate, load_spec
from .seg import NoSeedInBandWarning, RegionGrowParams, import_mask, read_seed_file, region_grow
from .volio import CtvError, load_volume, save_mask, save_volume

MASK_METRICS = ("iou", "dice", "per_slice_dice")
SCORE_METRICS = ("mape", "ape", "r2", "regression")


class UsageError(ValueError):
    pass


# --------------------------------------------------------------------------
# argument parsing helpers


def _pair(text: str, what: str, cast=float) -> Tuple:
    parts = text.split(":")
    if len(parts) != 2:
        raise argparse.ArgumentTypeError(f"{what} must look like A:B, got {text!r}")
    try:
        return cast(parts[0]), cast(parts[1])
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad {what} {text!r}") from None


def parse_band(text: str) -> Tuple[float, float]:
    return _pair(text, "band")


def parse_range(text: str) -> SliceRange:
    a, b = _pair(text, "range", int)
    try:
        return SliceRange(a, b)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def parse_window(text: str):
    if text == "auto":
        return "auto"
    level, width = _pair(text, "window")
    if not width > 0:
        raise argparse.ArgumentTypeError("window width must be > 0")
    return (level, width)


def parse_threshold(text: str) -> int:
    try:
        t = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"threshold must be an integer, got {text!r}") from None
    if not 0 <= t <= 255:
        raise argparse.ArgumentTypeError("threshold must be in [0, 255]")
    return t


def parse_seeds(text: str) -> List[Tuple[int, int, int]]:
    """A seed file path, or inline triples ``x,y,z;x,y,z``."""
    if os.path.isfile(text):
        return read_seed_file(text)
    seeds = []
    for chunk in text.replace(" ", "").split(";"):
        if not chunk:
            continue
        parts = chunk.split(",")
        if len(parts) != 3:
            raise UsageError(f"seed {chunk!r} is not x,y,z (and no such seed file exists)")
        try:
            seeds.append(tuple(int(p) for p in parts))
        except ValueError:
            raise UsageError(f"seed {chunk!r} is not x,y,z integers") from None
    if not seeds:
        raise UsageError("no seeds given")
    return seeds


# --------------------------------------------------------------------------
# output handling


def _atomic_text(path: Path, text: str) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _write_all(jobs: Sequence[Tuple[Path, Callable[[Path], None]]], extra_files=()) -> None:
    """Run writers in order; on failure remove whatever was already written."""
    done: List[Path] = []
    try:
        for path, writer in jobs:
            path.parent.mkdir(parents=True, exist_ok=True)
            writer(path)
            done.append(path)
    except BaseException:
        for p in done:
            for q in (p, *[f(p) for f in extra_files]):
                if q.exists():
                    q.unlink()
        raise


def _raw_of(p: Path) -> Path:
    return p.with_suffix(".raw")


def _report_warnings(caught) -> None:
    for w in caught:
        print(f"warning: {w.message}", file=sys.stderr)


# --------------------------------------------------------------------------
# subcommands


def cmd_phantom(args) -> int:
    spec = load_spec(args.spec) if args.spec else example_spec()
    if args.seed is not None:
        spec.rng_seed = args.seed
    vol, vessel, calcium = generate(spec)
    out = Path(args.out)
    paths = {
        "ct": Path(f"{out}_ct.ctv"),
        "vessel": Path(f"{out}_vessel.ctv"),
        "calcium": Path(f"{out}_calcium.ctv"),
    }
    _write_all(
        [
            (paths["ct"], lambda p: save_volume(vol, p)),
            (paths["vessel"], lambda p: save_mask(vessel, p)),
            (paths["calcium"], lambda p: save_mask(calcium, p)),
        ],
        extra_files=(_raw_of,),
    )
    print(json.dumps({
        "outputs": {k: str(v) for k, v in paths.items()},
        "dims": list(vol.dims),
        "vessel_voxels": vessel.count,
        "calcium_voxels": calcium.count,
        "rng_seed": spec.rng_seed,
    }, indent=2))
    return 0


def _grow_params(args) -> RegionGrowParams:
    if args.band is None:
        raise UsageError("region growing needs --band LO:HI")
    lo, hi = args.band
    return RegionGrowParams(
        seeds=parse_seeds(args.seeds),
        lower_hu=lo,
        upper_hu=hi,
        connectivity=args.connectivity,
        max_voxels=args.max_voxels,
    )


def cmd_segment(args) -> int:
    vol = load_volume(args.input)
    params = _grow_params(args)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        mask = region_grow(vol, params)
    _report_warnings(caught)
    no_seed = any(issubclass(w.category, NoSeedInBandWarning) for w in caught)
    out = Path(f"{args.out}.ctv")
    _write_all([(out, lambda p: save_mask(mask, p))], extra_files=(_raw_of,))
    cap = params.cap(vol)
    print(json.dumps({
        "status": "no_seed_in_band" if no_seed else "ok",
        "output": str(out),
        "grown_voxels": mask.count,
        "truncated": mask.count >= cap and not no_seed and params.max_voxels is not None,
        "band_hu": [params.lower_hu, params.upper_hu],
        "connectivity_3d": params.connectivity,
        "max_voxels": params.max_voxels if params.max_voxels is not None else "none",
        "seeds": [list(s) for s in params.seeds],
    }, indent=2))
    return 0


def cmd_score(args) -> int:
    if (args.mask is None) == (args.seeds is None):
        raise UsageError("give exactly one mask source: --mask PATH or --seeds with --band")
    vol = load_volume(args.input)
    if args.mask is not None:
        source = import_mask(args.mask, expected_dims=vol.dims)
        extra = {"mask_path": str(args.mask)}
    else:
        source = _grow_params(args)
        extra = {}
    extra["input_path"] = str(args.input)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        report = run_pipeline(
            vol,
            source,
            window=args.window,
            threshold=args.threshold,
            min_area_mm2=args.min_area,
            slice_range=args.range,
            connectivity_2d=args.connectivity_2d,
            extra_parameters=extra,
        )
    _report_warnings(caught)
    out = Path(args.out)
    report_path = Path(f"{out}_report.json")
    csv_path = Path(f"{out}_slices.csv")
    _write_all([
        (report_path, lambda p: _atomic_text(p, report.to_json())),
        (csv_path, lambda p: _atomic_text(p, report.to_csv())),
    ])
    print(json.dumps({
        "report": str(report_path),
        "slices_csv": str(csv_path),
        "total_count": report.total_count,
        "total_volume_mm3": report.total_volume_mm3,
    }, indent=2))
    return 0


def read_score_table(path) -> Tuple[Optional[List[str]], np.ndarray]:
    """CSV with a ``score`` column and an optional ``id`` column."""
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    if not rows or "score" not in rows[0]:
        raise UsageError(f"{path}: score table needs a header with a 'score' column")
    ids = [r["id"] for r in rows] if "id" in rows[0] else None
    try:
        scores = np.array([float(r["score"]) for r in rows])
    except (TypeError, ValueError):
        raise UsageError(f"{path}: non-numeric score") from None
    return ids, scores


def _is_table(path: str) -> bool:
    return Path(path).suffix.lower() in (".csv", ".tsv", ".txt")


def eval_masks(pred_path, truth_path, metrics: Sequence[str]) -> Dict:
    truth = import_mask(truth_path)
    pred = import_mask(pred_path, expected_dims=truth.dims)
    c = confusion(pred, truth)
    out: Dict = {"confusion": {"tp": c.tp, "fp": c.fp, "fn": c.fn, "tn": c.tn}}
    if "iou" in metrics:
        out["iou"] = iou(c)
    if "dice" in metrics:
        out["dice"] = dice(c)
    if "per_slice_dice" in metrics:
        per = per_slice_dice(pred, truth)
        out["per_slice_dice_mean"] = float(per.mean())
        out["per_slice_dice"] = [float(d) for d in per]
    out["conventions"] = {
        "empty_overlap": "iou = dice = 1.0 when both masks are empty",
        "per_slice_dice": "slices empty in both masks contribute 1.0",
    }
    return out


def eval_scores(pred_path, truth_path, metrics: Sequence[str]) -> Dict:
    pred_ids, pred = read_score_table(pred_path)
    truth_ids, truth = read_score_table(truth_path)
    if pred.size != truth.size:
        raise UsageError(f"score tables differ in length: {pred.size} vs {truth.size}")
    if pred_ids is not None and truth_ids is not None and pred_ids != truth_ids:
        raise UsageError("score tables list different ids (or a different order)")
    out: Dict = {"n": int(pred.size)}
    if "mape" in metrics:
        out["mape"] = mape(truth, pred)
    if "ape" in metrics:
        labels = truth_ids or pred_ids or [str(i) for i in range(pred.size)]
        out["ape"] = {lab: ape(t, p) for lab, t, p in zip(labels, truth, pred)}
    if "r2" in metrics:
        out["r_squared"] = r_squared(truth, pred)
    if "regression" in metrics:
        fit = regression_fit(truth, pred)
        out["regression"] = {
            "x": "truth", "y": "prediction",
            "slope": fit.slope, "intercept": fit.intercept,
            "r": fit.r, "r_squared": fit.r_squared, "n": fit.n,
        }
    return out


def cmd_eval(args) -> int:
    pred_table, truth_table = _is_table(args.pred), _is_table(args.truth)
    if pred_table != truth_table:
        raise UsageError("--pred and --truth must both be masks or both be score tables")
    known = SCORE_METRICS if pred_table else MASK_METRICS
    if args.metrics:
        metrics = [m.strip() for m in args.metrics.split(",") if m.strip()]
        unknown = [m for m in metrics if m not in known]
        if unknown:
            raise UsageError(f"unknown metric(s) {unknown}; choose from {list(known)}")
    else:
        metrics = list(known)
    if pred_table:
        result = eval_scores(args.pred, args.truth, metrics)
    else:
        result = eval_masks(args.pred, args.truth, metrics)
    result = {
        "kind": "score_table" if pred_table else "mask",
        "pred": str(args.pred),
        "truth": str(args.truth),
        "metrics_requested": metrics,
        "bce_epsilon": BCE_EPS,
        "log_base": "e",
        **result,
    }
    text = json.dumps(result, indent=2) + "\n"
    if args.out:
        path = Path(f"{args.out}_metrics.json")
        _write_all([(path, lambda p: _atomic_text(p, text))])
    sys.stdout.write(text)
    return 0


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="calcscore", description="Vascular calcification scoring for CT volumes")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    ph = sub.add_parser("phantom", help="generate a synthetic phantom with ground-truth masks")
    ph.add_argument("--spec", help="phantom spec JSON (default: bundled example)")
    ph.add_argument("--out", required=True, help="output prefix")
    ph.add_argument("--seed", type=int, help="override the spec's rng_seed")
    ph.set_defaults(func=cmd_phantom)

    def grow_flags(sp, required):
        sp.add_argument("--seeds", required=required, help="seed file (x y z per line) or inline 'x,y,z;x,y,z'")
        sp.add_argument("--band", type=parse_band, help="inclusive HU band LO:HI")
        sp.add_argument("--connectivity", type=int, choices=(6, 26), default=6)
        sp.add_argument("--max-voxels", type=int, default=None)

    sg = sub.add_parser("segment", help="grow a vascular mask from seeds")
    sg.add_argument("--input", required=True, help="CT volume header (.ctv)")
    grow_flags(sg, required=True)
    sg.add_argument("--out", required=True, help="output prefix; writes PREFIX.ctv")
    sg.set_defaults(func=cmd_segment)

    sc = sub.add_parser("score", help="score calcium inside a vascular mask")
    sc.add_argument("--input", required=True, help="CT volume header (.ctv)")
    sc.add_argument("--mask", help="vascular mask header (.ctv)")
    grow_flags(sc, required=False)
    sc.add_argument("--window", type=parse_window, default="auto", help="auto or LEVEL:WIDTH in HU")
    sc.add_argument("--threshold", type=parse_threshold, default=DEFAULT_THRESHOLD)
    sc.add_argument("--min-area", type=float, default=None, help="minimum in-plane component area, mm^2")
    sc.add_argument("--connectivity-2d", type=int, choices=(4, 8), default=8)
    sc.add_argument("--range", type=parse_range, default=None, help="inclusive slice range START:END")
    sc.add_argument("--out", required=True, help="output prefix")
    sc.set_defaults(func=cmd_score)

    ev = sub.add_parser("eval", help="compare masks or score tables")
    ev.add_argument("--pred", required=True, help="predicted mask (.ctv) or score table (.csv)")
    ev.add_argument("--truth", required=True, help="reference mask (.ctv) or score table (.csv)")
    ev.add_argument("--metrics", help="comma list; masks: iou,dice,per_slice_dice; tables: mape,ape,r2,regression")
    ev.add_argument("--out", help="output prefix; writes PREFIX_metrics.json")
    ev.set_defaults(func=cmd_eval)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except FileNotFoundError as exc:
        msg = str(exc) if exc.filename is None else f"file not found: {exc.filename}"
        print(f"error: {msg}", file=sys.stderr)
    except (CtvError, ValueError, IndexError, ZeroDivisionError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
    return 1


if __name__ == "__main__":
    sys.exit(main())
