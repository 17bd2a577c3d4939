"""Command-line interface.

Subcommands: register, warp, jacobian, metrics, phantom, gradcheck.
Exit codes: 0 success, 1 user error (bad paths, malformed inputs, shape
mismatches), 2 numerical failure (divergence, failed gradient check).
Scalars print with 6 significant digits; CSV files keep full precision.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import deform, metrics, phantom
from .engine import DivergenceError, RegistrationConfig, gradient_check, register_pair
from .losses import LossBreakdown
from .metrics import PairMetrics, evaluate_pair, write_metrics_csv
from .volume import LabelVolume, Volume, one_hot, read_volume, write_volume

GRADCHECK_TOLERANCE = 1e-5
GRADCHECK_MAX_DIM = 8


class _CliError(Exception):
    """User-level failure; maps to exit code 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _CliError(f"{self.prog}: error: {message}")


def _fmt(x: float) -> str:
    return f"{float(x):.6g}"


def _read_image(path) -> Volume:
    v = read_volume(path)
    if not isinstance(v, Volume):
        raise _CliError(f"{path} holds labels, expected an image volume")
    return v


def _read_labels(path) -> LabelVolume:
    v = read_volume(path)
    if not isinstance(v, LabelVolume):
        raise _CliError(f"{path} holds an image, expected a label volume (u16)")
    return v


def _read_field(path) -> deform.DeformationField:
    return deform.volume_to_field(_read_image(path))


def _load_config(path) -> RegistrationConfig:
    p = Path(path)
    if not p.exists():
        raise _CliError(f"config file not found: {p}")
    return RegistrationConfig.from_json(p.read_text())


def _write_trace_csv(path, trace: list[LossBreakdown]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iteration", "sim", "seg", "reg", "jac", "inv", "total"])
        for i, bd in enumerate(trace):
            writer.writerow(
                [i, repr(bd.sim), repr(bd.seg), repr(bd.reg), repr(bd.jac),
                 repr(bd.inv), repr(bd.total)]
            )


# ---------------------------------------------------------------------------
# register


def _label_union(moving_labels: LabelVolume, fixed_labels: LabelVolume) -> list[int]:
    ids = set(np.unique(moving_labels.labels).tolist())
    ids |= set(np.unique(fixed_labels.labels).tolist())
    ids.discard(0)
    return sorted(ids)


def _register_one(job: dict) -> str:
    moving = _read_image(job["moving"])
    fixed = _read_image(job["fixed"])
    config = RegistrationConfig.from_json(job["config_json"])
    out_dir = Path(job["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)

    moving_labels = fixed_labels = None
    segs = None
    label_set: list[int] = []
    if job.get("moving_labels") and job.get("fixed_labels"):
        moving_labels = _read_labels(job["moving_labels"])
        fixed_labels = _read_labels(job["fixed_labels"])
        label_set = _label_union(moving_labels, fixed_labels)
        if label_set:
            segs = (one_hot(moving_labels, label_set), one_hot(fixed_labels, label_set))
    elif job.get("moving_labels") or job.get("fixed_labels"):
        raise _CliError("give both --moving-labels and --fixed-labels or neither")

    try:
        result = register_pair(moving, fixed, config, segs=segs,
                               inference_steps=job.get("inference_steps"))
    except DivergenceError as e:
        _write_trace_csv(out_dir / "loss_trace.csv", e.trace)
        raise

    spacing = fixed.spacing_mm
    write_volume(deform.field_to_volume(result.phi_ab, spacing),
                 out_dir / "phi_moving_to_fixed")
    write_volume(deform.field_to_volume(result.phi_ba, spacing),
                 out_dir / "phi_fixed_to_moving")
    write_volume(result.a_warp, out_dir / "warped_moving")
    write_volume(result.b_warp, out_dir / "warped_fixed")
    _write_trace_csv(out_dir / "loss_trace.csv", result.trace)

    rows: list[tuple[str, PairMetrics]] = []
    if moving_labels is not None and label_set:
        warped_moving_labels = deform.warp_labels(moving_labels, result.phi_ab)
        warped_fixed_labels = deform.warp_labels(fixed_labels, result.phi_ba)
        write_volume(warped_moving_labels, out_dir / "warped_moving_labels")
        write_volume(warped_fixed_labels, out_dir / "warped_fixed_labels")
        identity = deform.identity_field(fixed.dims)
        rows.append(("before", evaluate_pair(fixed_labels, moving_labels, identity,
                                             label_set, spacing)))
        rows.append(("after", evaluate_pair(fixed_labels, warped_moving_labels,
                                            result.phi_ab, label_set, spacing)))
        write_metrics_csv(out_dir / "metrics.csv", rows)
    else:
        rows.append(("after", PairMetrics({}, {}, None, metrics.sdlogj(result.phi_ab))))
        write_metrics_csv(out_dir / "metrics.csv", rows)

    summary = (
        f"{job.get('pair_id', out_dir.name)}: iterations={result.iterations_run} "
        f"total={_fmt(result.final.total)}"
    )
    if rows and rows[-1][1].mean_dice is not None:
        before = next((pm.mean_dice for pid, pm in rows if pid == "before"), None)
        if before is not None:
            summary += f" dice {_fmt(before)} -> {_fmt(rows[-1][1].mean_dice)}"
    summary += f" sdlogj={_fmt(rows[-1][1].sdlogj)}"
    return summary


def _cmd_register(args) -> int:
    config_path = Path(args.config)
    if not config_path.exists():
        raise _CliError(f"config file not found: {config_path}")
    config_json = config_path.read_text()
    RegistrationConfig.from_json(config_json)  # validate before spawning work

    if args.pairs:
        manifest_path = Path(args.pairs)
        if not manifest_path.exists():
            raise _CliError(f"pairs manifest not found: {manifest_path}")
        entries = json.loads(manifest_path.read_text())
        if not isinstance(entries, list) or not entries:
            raise _CliError("pairs manifest must be a non-empty JSON list")
        jobs = []
        for i, e in enumerate(entries):
            jobs.append(
                {
                    "pair_id": e.get("pair_id", f"pair{i:03d}"),
                    "moving": e["moving"],
                    "fixed": e["fixed"],
                    "moving_labels": e.get("moving_labels"),
                    "fixed_labels": e.get("fixed_labels"),
                    "out_dir": e["out_dir"],
                    "config_json": config_json,
                    "inference_steps": args.inference_steps,
                }
            )
        if args.jobs > 1:
            with ProcessPoolExecutor(max_workers=args.jobs) as pool:
                summaries = list(pool.map(_register_one, jobs))
        else:
            summaries = [_register_one(job) for job in jobs]
        if not args.quiet:
            for line in summaries:
                print(line)
        return 0

    if not (args.fixed and args.moving and args.out_dir):
        raise _CliError("register needs --fixed, --moving and --out-dir (or --pairs)")
    summary = _register_one(
        {
            "moving": args.moving,
            "fixed": args.fixed,
            "moving_labels": args.moving_labels,
            "fixed_labels": args.fixed_labels,
            "out_dir": args.out_dir,
            "config_json": config_json,
            "inference_steps": args.inference_steps,
        }
    )
    if not args.quiet:
        print(summary)
    return 0


# ---------------------------------------------------------------------------
# other subcommands


def _cmd_warp(args) -> int:
    field = _read_field(args.field)
    if args.image:
        out = deform.warp(_read_image(args.image), field)
    else:
        out = deform.warp_labels(_read_labels(args.labels), field)
    write_volume(out, args.out)
    return 0


def _cmd_jacobian(args) -> int:
    field = _read_field(args.field)
    det = deform.jacobian_det(field)
    write_volume(det, args.out)
    if args.sdlogj:
        print(_fmt(metrics.sdlogj(field)))
    return 0


def _cmd_metrics(args) -> int:
    fixed_labels = _read_labels(args.fixed_labels)
    warped_labels = _read_labels(args.warped_labels)
    field = _read_field(args.field)
    try:
        label_set = [int(tok) for tok in args.labels.split(",") if tok.strip()]
    except ValueError as e:
        raise _CliError(f"bad --labels list {args.labels!r}: {e}") from e
    if not label_set:
        raise _CliError("--labels must name at least one label id")
    pm = evaluate_pair(fixed_labels, warped_labels, field, label_set,
                       fixed_labels.spacing_mm)
    write_metrics_csv(args.out, [(args.pair_id, pm)])
    if not args.quiet:
        mean = "absent" if pm.mean_dice is None else _fmt(pm.mean_dice)
        print(f"mean_dice={mean} sdlogj={_fmt(pm.sdlogj)}")
    return 0


def _cmd_phantom(args) -> int:
    spec_path = Path(args.spec)
    if not spec_path.exists():
        raise _CliError(f"phantom spec not found: {spec_path}")
    spec = phantom.PhantomSpec.from_json(spec_path.read_text())
    warp_path = Path(args.warp)
    if not warp_path.exists():
        raise _CliError(f"warp spec not found: {warp_path}")
    warp_spec = phantom.AnalyticWarp.from_json(warp_path.read_text())
    pair = phantom.make_pair(spec, warp_spec)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_volume(pair.fixed, out_dir / "fixed")
    write_volume(pair.fixed_labels, out_dir / "fixed_labels")
    write_volume(pair.moving, out_dir / "moving")
    write_volume(pair.moving_labels, out_dir / "moving_labels")
    write_volume(deform.field_to_volume(pair.phi_gt), out_dir / "phi_gt")
    write_volume(deform.field_to_volume(pair.phi_gt_inv), out_dir / "phi_gt_inv")
    if not args.quiet:
        print(f"phantom written to {out_dir}")
    return 0


def _cmd_gradcheck(args) -> int:
    try:
        dims = tuple(int(tok) for tok in args.dims.split(","))
    except ValueError as e:
        raise _CliError(f"bad --dims {args.dims!r}: {e}") from e
    if len(dims) != 3 or min(dims) < 3:
        raise _CliError(f"--dims must be three counts >= 3, got {args.dims!r}")
    if max(dims) > GRADCHECK_MAX_DIM:
        raise _CliError(
            f"dims {dims} too large for finite differencing "
            f"(max {GRADCHECK_MAX_DIM} per axis)"
        )
    config = _load_config(args.config) if args.config else RegistrationConfig(
        steps=2, control_stride=2
    )
    report = gradient_check(dims, config, seed=args.seed)
    worst = max(report.values())
    for name in ("sim", "seg", "reg", "jac", "inv", "all"):
        print(f"{name}: max relative error {_fmt(report[name])}")
    if worst < GRADCHECK_TOLERANCE:
        print(f"gradient check passed (worst {_fmt(worst)} < {GRADCHECK_TOLERANCE:g})")
        return 0
    print(f"gradient check FAILED (worst {_fmt(worst)} >= {GRADCHECK_TOLERANCE:g})")
    return 2


# ---------------------------------------------------------------------------
# parser


def build_parser() -> _Parser:
    parser = _Parser(
        prog="gradreg",
        description="Symmetric deformable 3D registration via integrated "
                    "spatial-gradient fields.",
    )
    parser.add_argument("--jobs", type=int, default=1,
                        help="worker processes for batch registration (default 1)")
    parser.add_argument("--quiet", action="store_true",
                        help="suppress progress and summary output")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("register", help="optimize a deformation for a volume pair")
    p.add_argument("--fixed", help="fixed image volume")
    p.add_argument("--moving", help="moving image volume")
    p.add_argument("--fixed-labels", help="fixed label volume (optional)")
    p.add_argument("--moving-labels", help="moving label volume (optional)")
    p.add_argument("--config", required=True, help="registration config JSON")
    p.add_argument("--out-dir", help="output directory")
    p.add_argument("--pairs", help="batch manifest: JSON list of "
                                   "{fixed, moving, fixed_labels?, moving_labels?, out_dir}")
    p.add_argument("--inference-steps", type=int, default=None,
                   help="apply only the first N trained steps")
    p.set_defaults(func=_cmd_register)

    p = sub.add_parser("warp", help="apply a deformation field to a volume")
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--image", help="image volume (trilinear sampling)")
    group.add_argument("--labels", help="label volume (nearest-neighbor sampling)")
    p.add_argument("--field", required=True, help="deformation field volume")
    p.add_argument("--out", required=True, help="output volume path")
    p.set_defaults(func=_cmd_warp)

    p = sub.add_parser("jacobian", help="Jacobian determinant map of a field")
    p.add_argument("--field", required=True, help="deformation field volume")
    p.add_argument("--out", required=True, help="output determinant volume path")
    p.add_argument("--sdlogj", action="store_true",
                   help="also print the std of the log determinant")
    p.set_defaults(func=_cmd_jacobian)

    p = sub.add_parser("metrics", help="evaluation metrics for a registered pair")
    p.add_argument("--fixed-labels", required=True)
    p.add_argument("--warped-labels", required=True)
    p.add_argument("--field", required=True, help="deformation field volume")
    p.add_argument("--labels", required=True, help="comma-separated label ids")
    p.add_argument("--out", required=True, help="output CSV path")
    p.add_argument("--pair-id", default="pair", help="identifier for CSV rows")
    p.set_defaults(func=_cmd_metrics)

    p = sub.add_parser("phantom", help="generate a synthetic pair with ground truth")
    p.add_argument("--spec", required=True, help="phantom spec JSON")
    p.add_argument("--warp", required=True, help="analytic warp JSON")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=_cmd_phantom)

    p = sub.add_parser("gradcheck", help="verify analytic gradients against "
                                         "finite differences")
    p.add_argument("--dims", default="5,5,5", help="volume dims, e.g. 5,5,5 (max 8)")
    p.add_argument("--config", help="registration config JSON (optional)")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except _CliError as e:
        print(str(e), file=sys.stderr)
        return 1
    except (FileNotFoundError, ValueError, KeyError, OSError, json.JSONDecodeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except DivergenceError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
