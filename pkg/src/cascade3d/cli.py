"""Command-line front end.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
Spatial triples on the command line are given as W,H,D.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from . import vio
from .models import load_bundle, make_bundle, save_bundle, cascade_forward
from .nnengine import NumericError
from .postproc import ThresholdPolicy, ensemble_average, postprocess_case, threshold_labels
from .preprocess import (
    DEFAULT_TARGET_SPACING,
    PreprocessError,
    PreprocessPlan,
    final_dims_for,
    invert_to_original,
    preprocess_case,
    resampled_dims,
)
from .trainer import REGIONS, Case, TrainConfig, case_scores, cross_validate, train
from .volcore import DimensionMismatch, Spacing

log = logging.getLogger("cascade3d")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
JOBS_ENV = "CASCADE3D_JOBS"
DATA_ERRORS = (
    vio.VolumeFormatError,
    vio.ManifestError,
    vio.ParamFormatError,
    vio.ArchitectureMismatch,
    PreprocessError,
    DimensionMismatch,
    FileNotFoundError,
    IsADirectoryError,
)


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _triple(kind):
    def parse(text: str):
        parts = text.split(",")
        if len(parts) != 3:
            raise argparse.ArgumentTypeError(f"expected three comma-separated values, got {text!r}")
        try:
            vals = tuple(kind(p) for p in parts)
        except ValueError:
            raise argparse.ArgumentTypeError(f"bad value in {text!r}") from None
        if any(v <= 0 for v in vals):
            raise argparse.ArgumentTypeError(f"values must be positive: {text!r}")
        return vals
    return parse


int3 = _triple(int)
float3 = _triple(float)


def _zyx(whd):
    return tuple(reversed(whd))


def _default_jobs() -> int:
    raw = os.environ.get(JOBS_ENV, "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def _map(fn, items, jobs):
    if jobs <= 1 or len(items) <= 1:
        return [fn(i) for i in items]
    with ProcessPoolExecutor(max_workers=jobs) as ex:
        return list(ex.map(fn, items))


def _records(manifest, need_labels=False) -> list[vio.CaseRecord]:
    records = vio.read_manifest(manifest)
    if not records:
        raise DataError(f"no cases in {manifest}")
    if need_labels:
        missing = [r.case_id for r in records if r.label_path is None]
        if missing:
            raise DataError(f"case {missing[0]!r} has no label")
    return records


def _load_cases(manifest) -> list[Case]:
    return [Case(r.case_id, vio.read_volume(r.image_path), vio.read_volume(r.label_path))
            for r in _records(manifest, need_labels=True)]


def _pred_ids(pred_dir: Path, suffix: str) -> list[str]:
    ids = sorted(p.name[: -len(suffix)] for p in pred_dir.glob(f"*{suffix}"))
    if not ids:
        raise DataError(f"no cases ({suffix} files) in {pred_dir}")
    return ids


# -- phantom ---------------------------------------------------------------

def cmd_phantom(args) -> int:
    from .phantom import make_phantom_set

    out = Path(args.out)
    spacing = Spacing(*args.spacing)
    recs = []
    for case_id, image, label in make_phantom_set(args.count, _zyx(args.dims), args.seed, spacing, args.noise):
        img_p, lab_p = out / f"{case_id}_image.mvol", out / f"{case_id}_label.mvol"
        vio.write_volume(image, img_p)
        vio.write_volume(label, lab_p)
        recs.append(vio.CaseRecord(case_id, img_p, lab_p))
    vio.write_manifest(recs, out / "manifest.tsv")
    log.info("wrote %d phantoms to %s", len(recs), out)
    return EXIT_OK


# -- preprocess ------------------------------------------------------------

def _preprocess_one(job):
    rec, out, target, padded, final, median = job
    try:
        image = vio.read_volume(rec.image_path)
        label = vio.read_volume(rec.label_path) if rec.label_path is not None else None
        img, lab, plan = preprocess_case(image, label, target, padded, final, median)
    except DATA_ERRORS + (ValueError,) as e:
        return rec.case_id, None, f"{type(e).__name__}: {e}"
    img_p = out / f"{rec.case_id}_image.mvol"
    vio.write_volume(img, img_p)
    lab_p = None
    if lab is not None:
        lab_p = out / f"{rec.case_id}_label.mvol"
        vio.write_volume(lab, lab_p)
    vio.atomic_write(out / f"{rec.case_id}.plan", plan.to_text().encode())
    return rec.case_id, (img_p, lab_p), None


def cmd_preprocess(args) -> int:
    records = _records(args.manifest)
    out = Path(args.out)
    target = Spacing(*args.target_spacing)
    final = args.final_dims or final_dims_for(args.divisor)
    padded = args.padded_dims
    if padded is None:
        dims = []
        for r in records:
            try:
                dims.append(resampled_dims(vio.read_volume(r.image_path), target))
            except DATA_ERRORS as e:
                log.error("case %s: %s", r.case_id, e)
        if not dims:
            raise DataError("every case failed to load")
        padded = tuple(int(x) for x in np.max(dims, axis=0))
    jobs = [(r, out, target, padded, final, args.median) for r in records]
    results = _map(_preprocess_one, jobs, args.jobs)
    done = []
    for case_id, paths, err in results:
        if err is not None:
            log.error("case %s skipped: %s", case_id, err)
        else:
            done.append(vio.CaseRecord(case_id, *paths))
    if not done:
        raise DataError("every case failed to preprocess")
    vio.write_manifest(done, out / "manifest.tsv")
    log.info("preprocessed %d/%d cases to %s (final dims %s)", len(done), len(records), out, final)
    return EXIT_OK


# -- train -----------------------------------------------------------------

def _train_config(args) -> TrainConfig:
    return TrainConfig(
        epochs=args.epochs,
        lr=args.lr,
        l2=args.l2,
        seed=args.seed,
        patches_per_case=args.patches_per_case,
        max_angle=args.max_angle,
        augment=not args.no_augment,
        lnet_epochs=args.lnet_epochs,
    )


def _bundle_factory(args, volume_shape):
    patch = _zyx(args.patch)
    overlap = _zyx(args.overlap)
    lnet_shape = _zyx(args.lnet_dims) if args.lnet_dims else tuple(max(1, s // 2) for s in volume_shape)
    lnet_depth = args.lnet_depth
    if lnet_depth is None:
        # deepest level count (up to --depth) that the L-Net grid supports
        lnet_depth = args.depth
        while lnet_depth > 1 and any(s % 2 ** lnet_depth for s in lnet_shape):
            lnet_depth -= 1

    def build(offset=0):
        return make_bundle(volume_shape, lnet_shape, patch, overlap, depth=args.depth,
                           lnet_depth=lnet_depth, base_channels=args.base, se=args.se,
                           se_reduction=args.se_reduction, seed=args.seed + offset)
    return build


def cmd_train(args) -> int:
    cases = _load_cases(args.manifest)
    shapes = {c.image.shape for c in cases}
    if len(shapes) != 1:
        raise DataError(f"cases have differing dims {sorted(shapes)}; preprocess them first")
    build = _bundle_factory(args, shapes.pop())
    cfg = _train_config(args)
    if args.folds:
        policy = _policy(args, cases[0].image.shape)
        report = cross_validate(cases, args.folds, cfg, build, seed=args.seed, policy=policy,
                                csv_path=args.out)
        for r in REGIONS:
            print(f"{r}\t{report.mean[r]:.4f} +- {report.sd[r]:.4f}")
        return EXIT_OK
    val = _load_cases(args.val) if args.val else None
    result = train(build(), cases, val, cfg)
    save_bundle(result.bundle, args.out)
    if args.log:
        log_path = Path(args.log)
        vio.atomic_write(log_path, ("\n".join(result.log_lines()) + "\n").encode())
        lines = ["epoch,lr,l_train,val"] + [f"{e},{lr:.6g},{lt:.6f},{lv:.6f}" for e, lr, lt, lv in result.lnet_log]
        vio.atomic_write(log_path.with_suffix(".lnet.csv"), ("\n".join(lines) + "\n").encode())
    log.info("trained %d epochs; parameters in %s", len(result.log), args.out)
    return EXIT_OK


# -- predict / postprocess / ensemble --------------------------------------

MAPS = ("whole", "tumor", "loc")


def _predict_one(job):
    model, rec, out = job
    bundle = load_bundle(model)
    whole, tumor, loc = cascade_forward(vio.read_volume(rec.image_path), bundle)
    for name, v in zip(MAPS, (whole, tumor, loc)):
        vio.write_volume(v, out / f"{rec.case_id}_{name}.mvol")
    return rec.case_id


def cmd_predict(args) -> int:
    records = _records(args.manifest)
    load_bundle(args.model)  # validate before any work
    out = Path(args.out)
    done = _map(_predict_one, [(args.model, r, out) for r in records], args.jobs)
    log.info("wrote probability maps for %d cases to %s", len(done), out)
    return EXIT_OK


def _policy(args, shape) -> ThresholdPolicy:
    overrides = {k: getattr(args, k) for k in ("global_t", "whole_fallback", "whole_low", "tumor_empty",
                                               "tumor_small", "tumor_default", "loc_t")
                 if getattr(args, k, None) is not None}
    if getattr(args, "small_cutoff", None) is not None:
        overrides["small_cutoff"] = args.small_cutoff
    try:
        return ThresholdPolicy.scaled(int(np.prod(shape)), **overrides)
    except ValueError as e:
        raise UsageError(str(e)) from None


def _postprocess_one(job):
    case_id, pred_dir, out, args = job
    whole, tumor, loc = (vio.read_volume(pred_dir / f"{case_id}_{m}.mvol") for m in MAPS)
    if args.plain:
        labels, branches = threshold_labels(whole, tumor, args.global_t or 0.5), {"whole": "plain", "tumor": "plain"}
    else:
        branches = {}
        labels = postprocess_case(whole, tumor, loc, _policy(args, whole.shape), branches)
    vio.write_volume(labels, out / f"{case_id}_label.mvol")
    return case_id, branches


def cmd_postprocess(args) -> int:
    pred_dir = Path(args.pred_dir)
    ids = _pred_ids(pred_dir, "_whole.mvol")
    out = Path(args.out)
    first = vio.read_volume(pred_dir / f"{ids[0]}_whole.mvol")
    policy = _policy(args, first.shape)
    results = _map(_postprocess_one, [(i, pred_dir, out, args) for i in ids], args.jobs)
    meta = [f"# policy {policy}", "case_id\twhole_branch\ttumor_branch"]
    meta += [f"{cid}\t{b['whole']}\t{b['tumor']}" for cid, b in results]
    vio.atomic_write(out / "postprocess.tsv", ("\n".join(meta) + "\n").encode())
    log.info("post-processed %d cases (small-tumor cutoff %d voxels)", len(results), policy.small_cutoff)
    return EXIT_OK


def cmd_ensemble(args) -> int:
    dirs = [Path(d) for d in args.pred_dirs]
    ids = _pred_ids(dirs[0], "_whole.mvol")
    for d in dirs[1:]:
        other = _pred_ids(d, "_whole.mvol")
        if other != ids:
            raise DataError(f"{d} holds a different case set from {dirs[0]}")
    out = Path(args.out)
    for case_id in ids:
        for m in MAPS:
            maps = [vio.read_volume(d / f"{case_id}_{m}.mvol") for d in dirs]
            vio.write_volume(ensemble_average(maps), out / f"{case_id}_{m}.mvol")
    log.info("averaged %d models over %d cases", len(dirs), len(ids))
    return EXIT_OK


# -- evaluate --------------------------------------------------------------

def cmd_evaluate(args) -> int:
    records = _records(args.manifest, need_labels=True)
    pred_dir = Path(args.pred_dir)
    rows = []
    per_region = {r: [] for r in REGIONS}
    for rec in records:
        pred_p = pred_dir / f"{rec.case_id}_label.mvol"
        pred = vio.read_volume(pred_p)
        gt = vio.read_volume(rec.label_path)
        if args.plans:
            plan_p = Path(args.plans) / f"{rec.case_id}.plan"
            if not plan_p.exists():
                raise DataError(f"missing plan sidecar {plan_p}")
            pred = invert_to_original(pred, PreprocessPlan.from_text(plan_p.read_text()))
        if pred.shape != gt.shape:
            raise DimensionMismatch(f"case {rec.case_id}: prediction {pred.dims} vs ground truth {gt.dims}")
        scores = case_scores(pred, gt)
        for region in REGIONS:
            value, empty = scores[region]
            rows.append((rec.case_id, region, value, empty))
            per_region[region].append(value)
    vio.write_metrics(rows, args.out)
    summary = ["region,mean,sd"] + [f"{r},{np.mean(v):.6f},{np.std(v):.6f}" for r, v in per_region.items()]
    if args.summary:
        vio.atomic_write(args.summary, ("\n".join(summary) + "\n").encode())
    print("\n".join(summary))
    return EXIT_OK


# -- gradcheck -------------------------------------------------------------

def cmd_gradcheck(args) -> int:
    from .gradcheck import check_all_layers, check_cascade

    worst = 0.0
    for s in range(args.seed, args.seed + args.seeds):
        results = check_all_layers(s) + [check_cascade(s, se=bool(s % 2))]
        for r in results:
            worst = max(worst, r.worst)
            if args.verbose or not r.passed(args.tol):
                print(f"seed {s} {r.name}: worst {r.worst:.3e} ({r.checked} probes, {r.skipped} skipped)")
    ok = worst < args.tol
    print(f"gradcheck {'passed' if ok else 'FAILED'}: worst relative error {worst:.3e} over {args.seeds} seeds")
    return EXIT_OK if ok else EXIT_NUMERIC


# -- parser ----------------------------------------------------------------

def _add_policy_flags(p):
    g = p.add_argument_group("threshold policy overrides")
    for name in ("global_t", "whole_fallback", "whole_low", "tumor_empty", "tumor_small", "tumor_default", "loc_t"):
        g.add_argument(f"--{name.replace('_', '-')}", dest=name, type=float, default=None)
    g.add_argument("--small-cutoff", type=int, default=None,
                   help="small-tumor voxel cutoff (default: 100 scaled by volume size)")


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="random seed (default 0)")
    common.add_argument("--jobs", type=int, default=_default_jobs(),
                        help=f"worker processes for per-case work (default ${JOBS_ENV} or 1)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="cascade3d", description="Cascaded 3D U-Net kidney/tumor segmentation.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("phantom", parents=[common], help="generate a synthetic labelled data set")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=20)
    p.add_argument("--dims", type=int3, default=(16, 16, 8), help="W,H,D (default 16,16,8)")
    p.add_argument("--spacing", type=float3, default=DEFAULT_TARGET_SPACING.as_zyx()[::-1])
    p.add_argument("--noise", type=float, default=0.1)
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("preprocess", parents=[common], help="resample, pad, resize and normalise cases")
    p.add_argument("manifest")
    p.add_argument("--out", required=True)
    p.add_argument("--divisor", type=int, default=16, help="final dims are 256,256,128 divided by this")
    p.add_argument("--final-dims", type=int3, default=None, help="W,H,D; overrides --divisor")
    p.add_argument("--padded-dims", type=int3, default=None,
                   help="W,H,D zero-padding target (default: largest resampled case)")
    p.add_argument("--target-spacing", type=float3, default=DEFAULT_TARGET_SPACING.as_zyx()[::-1])
    p.add_argument("--median", action="store_true", help="apply a 3x3x3 median filter")
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train", parents=[common], help="train the L/W/T networks")
    p.add_argument("manifest")
    p.add_argument("--out", required=True, help="parameter file (or CV CSV with --folds)")
    p.add_argument("--val", help="validation manifest (default: training cases)")
    p.add_argument("--log", help="per-epoch loss log CSV")
    p.add_argument("--folds", type=int, default=0, help="run k-fold cross-validation instead")
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--lnet-epochs", type=int, default=None)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--l2", type=float, default=1e-5)
    p.add_argument("--patches-per-case", type=int, default=None)
    p.add_argument("--max-angle", type=float, default=1.0, help="rotation augmentation range, degrees")
    p.add_argument("--no-augment", action="store_true")
    p.add_argument("--patch", type=int3, default=(8, 8, 8), help="W,H,D")
    p.add_argument("--overlap", type=int3, default=(4, 4, 4), help="W,H,D")
    p.add_argument("--lnet-dims", type=int3, default=None, help="W,H,D (default: half the volume)")
    p.add_argument("--depth", type=int, default=3)
    p.add_argument("--lnet-depth", type=int, default=None, help="default: deepest that fits the L-Net grid")
    p.add_argument("--base", type=int, default=8, help="channels at the first level")
    p.add_argument("--se", action="store_true", help="squeeze-and-excitation gating")
    p.add_argument("--se-reduction", type=int, default=2)
    _add_policy_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", parents=[common], help="write whole/tumor/loc probability maps")
    p.add_argument("manifest")
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("postprocess", parents=[common], help="probability maps to label maps")
    p.add_argument("pred_dir")
    p.add_argument("--out", required=True)
    p.add_argument("--plain", action="store_true", help="threshold only, no refinement or gating")
    _add_policy_flags(p)
    p.set_defaults(func=cmd_postprocess)

    p = sub.add_parser("ensemble", parents=[common], help="average probability maps of several models")
    p.add_argument("pred_dirs", nargs="+")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ensemble)

    p = sub.add_parser("evaluate", parents=[common], help="Dice scores against ground truth")
    p.add_argument("pred_dir")
    p.add_argument("manifest", help="manifest holding the ground-truth labels")
    p.add_argument("--out", required=True, help="per-case metrics CSV")
    p.add_argument("--summary", help="mean/sd table CSV")
    p.add_argument("--plans", help="plan sidecar directory; evaluate in original geometry")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient checks")
    p.add_argument("--seeds", type=int, default=20)
    p.add_argument("--tol", type=float, default=1e-4)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    if args.jobs < 1:
        print("error: --jobs must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, ValueError) + DATA_ERRORS as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
