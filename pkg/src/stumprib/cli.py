"""Command line entry point: analyze, snapshot, evaluate, experiment, phantom."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import volume
from .classify import LINEAR_KERNEL, N_SEEDS, POLY5, run_experiments, threshold_sweep
from .features import TABLE5_FEATURE_SETS, FeatureSchemaError, FeatureSet, read_features_csv, write_features_csv
from .metrics import REPORT_METRICS, GridMismatchError, aggregate, evaluate
from .morphology import connected_components
from .phantom import build_scene, sample_feature_cohort, transform_scene
from .pipeline import SCHEMA_VERSION, analyze_subject, cohort_summary
from .rlma import STUMP_THRESHOLD_MM, RlmaConfig
from .snapshot import PLANES, snapshot

log = logging.getLogger("stumprib")

# flag dest -> RlmaConfig field
RLMA_FLAGS = {
    "shell_min": "shell_min_mm",
    "shell_max": "shell_max_mm",
    "step_fraction": "step_fraction",
    "start_radius": "start_refine_radius_mm",
    "cone_angle": "cone_half_angle_deg",
    "cone_rays": "cone_ray_count",
    "cone_length": "cone_max_len_mm",
    "ray_step": "ray_step_mm",
    "resample": "resample_mm",
    "max_iterations": "max_iterations",
}
BOOL_KEYS = {"lowest_two", "no_figures", "snapshots"}


class CliError(Exception):
    """A user-facing failure that maps to a non-zero exit status."""


def _dump_json(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=2, allow_nan=False) + "\n")


def _jsonable(v):
    if isinstance(v, float) and not math.isfinite(v):
        return None
    return v


def read_config(path) -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment, keys may use dashes."""
    out = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line or line.startswith("["):
            continue
        if "=" not in line:
            raise CliError(f"{path}:{n}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value.strip("\"'")
    return out


def _parse_bool(value: str) -> bool:
    v = str(value).lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise CliError(f"not a boolean: {value!r}")


def _positive(value: str) -> float:
    v = float(value)
    if not v > 0:
        raise argparse.ArgumentTypeError("must be > 0")
    return v


# --- analyze ------------------------------------------------------------------


def _rlma_config(args) -> RlmaConfig:
    overrides = {field: getattr(args, dest) for dest, field in RLMA_FLAGS.items() if getattr(args, dest) is not None}
    try:
        return RlmaConfig(**overrides)
    except (TypeError, ValueError) as exc:
        raise CliError(f"invalid RLMA configuration: {exc}") from exc


def _subjects(args) -> list[dict]:
    if args.manifest:
        with open(args.manifest, newline="") as fh:
            rows = list(csv.DictReader(fh))
        base = Path(args.manifest).parent
        for key in ("subject_id", "ribs", "vertebrae"):
            if rows and key not in rows[0]:
                raise CliError(f"manifest lacks column {key!r}")
        subjects = []
        for row in rows:
            entry = {"subject_id": row["subject_id"]}
            for key in ("ribs", "vertebrae", "corpus"):
                val = (row.get(key) or "").strip()
                entry[key] = str(base / val) if val else None
            subjects.append(entry)
        return subjects
    if not (args.ribs and args.vertebrae):
        raise CliError("give --ribs and --vertebrae, or --manifest")
    sid = args.subject_id or Path(args.ribs).name.split(".")[0]
    return [{"subject_id": sid, "ribs": args.ribs, "vertebrae": args.vertebrae, "corpus": args.corpus}]


def _analyze_one(task):
    subject, cfg, threshold, lowest_two = task
    sid = subject["subject_id"]
    try:
        ribs = volume.load(subject["ribs"])
        verts = volume.load(subject["vertebrae"])
        corpus = volume.load(subject["corpus"]) if subject["corpus"] else None
        return sid, analyze_subject(ribs.mask(), verts, corpus, sid, cfg, threshold, lowest_two), None
    except (OSError, volume.NiftiError, GridMismatchError, ValueError) as exc:
        return sid, None, f"{type(exc).__name__}: {exc}"


def _write_analysis_snapshots(subject, result, out: Path) -> None:
    ribs = result.assignment.relabel(connected_components(volume.load(subject["ribs"]).mask()))
    vols = [volume.load(subject["vertebrae"]), ribs]
    paths = [rib.path.points for rib in result.ribs if rib.path is not None]
    for plane in PLANES:
        (out / f"{subject['subject_id']}_{plane}.ppm").write_bytes(snapshot(vols, plane, paths))


def cmd_analyze(args) -> int:
    if not args.threshold > 0:
        raise CliError("threshold must be > 0")
    cfg = _rlma_config(args)
    subjects = _subjects(args)
    out = Path(args.out)
    (out / "subjects").mkdir(parents=True, exist_ok=True)
    tasks = [(s, cfg, args.threshold, args.lowest_two) for s in subjects]
    if args.jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            outcomes = list(pool.map(_analyze_one, tasks))
    else:
        outcomes = [_analyze_one(t) for t in tasks]

    results, n_errors = [], 0
    for subject, (sid, result, error) in zip(subjects, outcomes):
        if error is not None:
            log.error("%s: %s", sid, error)
            _dump_json({"schema_version": SCHEMA_VERSION, "subject_id": sid, "error": error}, out / "subjects" / f"{sid}.error.json")
            n_errors += 1
            continue
        results.append(result)
        _dump_json(result.as_dict(), out / "subjects" / f"{sid}.json")
        n_errors += sum(1 for rib in result.ribs if rib.error)
        if args.snapshots:
            (out / "snapshots").mkdir(exist_ok=True)
            _write_analysis_snapshots(subject, result, out / "snapshots")
        if not result.ribs:
            log.info("%s: no ribs found", sid)

    records = [rec for r in results for rec in r.records]
    write_features_csv(records, out / "features.csv")
    summary = cohort_summary(results)
    summary["stump_threshold_mm"] = args.threshold
    summary["rlma_config"] = cfg.as_dict()
    summary["n_failed_subjects"] = len(subjects) - len(results)
    _dump_json(summary, out / "summary.json")
    if not args.no_figures and records:
        from .plotting import plot_feature_scatter, plot_first_direction

        (out / "figures").mkdir(exist_ok=True)
        plot_feature_scatter(records, out / "figures" / "pdrc_vs_ratio.png")
        plot_first_direction(records, out / "figures" / "first_direction.png")
    print(f"analyzed {len(results)}/{len(subjects)} subjects, {len(records)} ribs measured, "
          f"{summary['n_stump_ribs']} stump ribs -> {out}")
    return 1 if n_errors else 0


# --- snapshot -----------------------------------------------------------------


def _path_points(report_path) -> list[np.ndarray]:
    report = json.loads(Path(report_path).read_text())
    return [np.asarray(r["path"]["points"], float) for r in report.get("ribs", []) if r.get("path")]


def cmd_snapshot(args) -> int:
    if args.plane not in PLANES:
        raise CliError(f"invalid plane {args.plane!r}; choose from {sorted(PLANES)}")
    vols = [volume.load(p) for p in args.volumes]
    paths = _path_points(args.paths) if args.paths else []
    try:
        Path(args.out).write_bytes(snapshot(vols, args.plane, paths))
    except ValueError as exc:
        raise CliError(str(exc)) from exc
    return 0


# --- evaluate -----------------------------------------------------------------


def _fmt3(v) -> str:
    return "" if v is None or (isinstance(v, float) and math.isnan(v)) else f"{v:.3f}"


def cmd_evaluate(args) -> int:
    if args.manifest:
        with open(args.manifest, newline="") as fh:
            rows = list(csv.DictReader(fh))
        base = Path(args.manifest).parent
        pairs = [(r["subject_id"], base / r["pred"], base / r["ref"]) for r in rows]
    elif args.pred and args.ref:
        pairs = [(args.subject_id or Path(args.pred).name.split(".")[0], Path(args.pred), Path(args.ref))]
    else:
        raise CliError("give --pred and --ref, or --manifest")
    out = Path(args.out)
    (out / "reports").mkdir(parents=True, exist_ok=True)
    reports, n_errors = [], 0
    per_subject = []
    for sid, pred_path, ref_path in pairs:
        try:
            report = evaluate(volume.load(pred_path), volume.load(ref_path))
        except (OSError, volume.NiftiError, GridMismatchError) as exc:
            log.error("%s: %s", sid, exc)
            _dump_json({"schema_version": 1, "subject_id": sid, "error": str(exc)}, out / "reports" / f"{sid}.error.json")
            n_errors += 1
            continue
        d = {"subject_id": sid, **{k: _jsonable(v) for k, v in report.as_dict().items()}}
        _dump_json(d, out / "reports" / f"{sid}.json")
        reports.append(report)
        per_subject.append(d)
    cols = ["subject_id", *REPORT_METRICS, "pq_assd", "tp", "fp", "fn", "schema_version"]
    with open(out / "metrics.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for d in per_subject:
            w.writerow([d["subject_id"], *(_fmt3(d[k]) for k in (*REPORT_METRICS, "pq_assd")), d["tp"], d["fp"], d["fn"], 1])
    with open(out / "aggregate.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["metric", "mean", "std", "n", "schema_version"])
        if reports:
            for key, (mean, std, n) in aggregate(reports).items():
                w.writerow([key, _fmt3(mean), _fmt3(std), n, 1])
    for d in per_subject:
        print(f"{d['subject_id']}: DSC {_fmt3(d['binary_dsc'])} RQ {_fmt3(d['rq'])} PQ {_fmt3(d['pq_dsc'])} "
              f"(tp {d['tp']}, fp {d['fp']}, fn {d['fn']})")
    return 1 if n_errors else 0


# --- experiment ---------------------------------------------------------------


def _parse_thresholds(spec: str) -> list[float]:
    """``a:b:step`` (inclusive) or a comma-separated list."""
    if ":" in spec:
        a, b, step = (float(v) for v in spec.split(":"))
        if step <= 0 or b < a:
            raise CliError("threshold range must be start:stop:step with step > 0")
        return [round(v, 6) for v in np.arange(a, b + step / 2, step)]
    return [float(v) for v in spec.split(",") if v.strip()]


def cmd_experiment(args) -> int:
    try:
        records = read_features_csv(args.features)
    except FeatureSchemaError as exc:
        raise CliError(str(exc)) from exc
    if not records:
        raise CliError("feature CSV has no rows")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    seeds = range(args.seeds)
    if args.mode == "table5":
        results = run_experiments(records, TABLE5_FEATURE_SETS, (POLY5, LINEAR_KERNEL), seeds, args.C, args.jobs)
        with open(out / "table5.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["feature_set", "kernel", "mean_f1", "std_f1", *[f"f1_seed{s}" for s in seeds], "schema_version"])
            for r in results:
                w.writerow([r.feature_set, r.kernel, _fmt3(r.mean), _fmt3(r.std), *(_fmt3(v) for v in r.f1), 1])
        if not args.no_figures:
            from .plotting import plot_experiments

            plot_experiments(results, out / "table5.png")
        for r in results:
            print(f"{r.feature_set:>12} {r.kernel:>12}  {_fmt3(r.mean)} ± {_fmt3(r.std)}")
    else:
        sets = [FeatureSet.parse(s) for s in args.feature_sets.split(",")] if args.feature_sets else None
        kwargs = {"feature_sets": sets} if sets else {}
        points = threshold_sweep(
            records, _parse_thresholds(args.thresholds), kernel=LINEAR_KERNEL, seeds=seeds, C=args.C, jobs=args.jobs, **kwargs
        )
        with open(out / "sweep.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["threshold_mm", "feature_set", "mean_f1", "std_f1", "schema_version"])
            for p in points:
                w.writerow([f"{p.threshold_mm:g}", p.feature_set, _fmt3(p.mean_f1), _fmt3(p.std_f1), 1])
        if not args.no_figures:
            from .plotting import plot_threshold_sweep

            plot_threshold_sweep(points, out / "sweep.png")
        print(f"swept {len({p.threshold_mm for p in points})} thresholds -> {out / 'sweep.csv'}")
    return 0


# --- phantom ------------------------------------------------------------------

SCENE_KEYS = {"kind", "n_vertebrae", "ribs_per_side", "stump_lengths", "spacing", "first_label", "quarter_turns", "mirror"}
COHORT_KEYS = {"kind", "n_stump", "n_regular", "seed", "ribs_per_subject", "noise_scale", "length_modes"}


def cmd_phantom(args) -> int:
    try:
        spec = json.loads(Path(args.spec).read_text())
    except json.JSONDecodeError as exc:
        raise CliError(f"phantom spec is not valid JSON: {exc}") from exc
    if not isinstance(spec, dict):
        raise CliError("phantom spec must be a JSON object")
    kind = spec.get("kind", "scene")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if kind == "scene":
        unknown = set(spec) - SCENE_KEYS
        if unknown:
            raise CliError(f"unknown phantom keys {sorted(unknown)}")
        try:
            scene = build_scene(
                n_vertebrae=int(spec.get("n_vertebrae", 2)),
                ribs_per_side=int(spec.get("ribs_per_side", 1)),
                stump_lengths=spec.get("stump_lengths"),
                spacing=float(spec.get("spacing", 1.0)),
                first_label=int(spec.get("first_label", 18)),
            )
            turns, mirror = int(spec.get("quarter_turns", 0)), bool(spec.get("mirror", False))
            if turns % 4 or mirror:
                scene = transform_scene(scene, turns % 4, mirror)
        except (TypeError, ValueError) as exc:
            raise CliError(f"invalid phantom spec: {exc}") from exc
        volume.save(scene.rib_mask, out / "ribs.nii.gz")
        volume.save(scene.ribs, out / "rib_instances.nii.gz")
        volume.save(scene.vertebrae, out / "vertebrae.nii.gz")
        volume.save(scene.corpus, out / "corpus.nii.gz")
        _dump_json(scene.ground_truth(), out / "ground_truth.json")
        print(f"wrote scene with {len(scene.rib_truth)} ribs to {out}")
    elif kind == "feature_cohort":
        unknown = set(spec) - COHORT_KEYS
        if unknown:
            raise CliError(f"unknown cohort keys {sorted(unknown)}")
        try:
            records = sample_feature_cohort(
                int(spec.get("n_stump", 150)),
                int(spec.get("n_regular", 150)),
                seed=int(spec.get("seed", 0)),
                ribs_per_subject=int(spec.get("ribs_per_subject", 4)),
                noise_scale=float(spec.get("noise_scale", 1.0)),
                length_modes=tuple(spec["length_modes"]) if spec.get("length_modes") else None,
            )
        except (TypeError, ValueError) as exc:
            raise CliError(f"invalid cohort spec: {exc}") from exc
        write_features_csv(records, out / "features.csv")
        print(f"wrote {len(records)} synthetic feature records to {out / 'features.csv'}")
    else:
        raise CliError(f"unknown phantom kind {kind!r}")
    return 0


# --- argument parsing ---------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stumprib", description=__doc__)
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("analyze", help="assign, measure and featurize ribs of one subject or a manifest")
    p.add_argument("--ribs", help="binary rib mask (NIfTI)")
    p.add_argument("--vertebrae", help="vertebra instance mask (NIfTI)")
    p.add_argument("--corpus", help="optional vertebral body mask")
    p.add_argument("--subject-id")
    p.add_argument("--manifest", help="CSV with subject_id, ribs, vertebrae[, corpus] columns")
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="key = value file; command-line flags take precedence")
    p.add_argument("--threshold", type=float, default=STUMP_THRESHOLD_MM, help="stump rib length threshold (mm)")
    p.add_argument("--lowest-two", action="store_true", help="only measure ribs of the two lowest rib-bearing levels")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--snapshots", action="store_true", help="also write coronal and sagittal PPM snapshots")
    p.add_argument("--no-figures", action="store_true")
    g = p.add_argument_group("measurement overrides")
    g.add_argument("--shell-min", type=_positive)
    g.add_argument("--shell-max", type=_positive)
    g.add_argument("--step-fraction", type=_positive)
    g.add_argument("--start-radius", type=_positive)
    g.add_argument("--cone-angle", type=_positive)
    g.add_argument("--cone-rays", type=int)
    g.add_argument("--cone-length", type=_positive)
    g.add_argument("--ray-step", type=_positive)
    g.add_argument("--resample", type=_positive)
    g.add_argument("--max-iterations", type=int)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("snapshot", help="maximum-label projection of label volumes as PPM")
    p.add_argument("volumes", nargs="+", help="label volumes on one grid; later ones paint over earlier ones")
    p.add_argument("--plane", default="coronal")
    p.add_argument("--paths", help="subject JSON from 'analyze' whose path points are overlaid")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_snapshot)

    p = sub.add_parser("evaluate", help="binary and panoptic metrics of predicted against reference instances")
    p.add_argument("--pred")
    p.add_argument("--ref")
    p.add_argument("--subject-id")
    p.add_argument("--manifest", help="CSV with subject_id, pred, ref columns")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("experiment", help="seeded SVM experiments on a feature CSV")
    p.add_argument("--features", required=True)
    p.add_argument("--mode", choices=("table5", "sweep"), default="table5")
    p.add_argument("--out", required=True)
    p.add_argument("--seeds", type=int, default=N_SEEDS)
    p.add_argument("--C", type=_positive, default=1.0)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--thresholds", default="20:200:5", help="start:stop:step or comma list (sweep mode)")
    p.add_argument("--feature-sets", help="comma list such as 2-PPR,DRC,4-PPR+DRC (sweep mode)")
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=cmd_experiment)

    p = sub.add_parser("phantom", help="write a synthetic scene or feature cohort from a JSON spec")
    p.add_argument("spec")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_phantom)
    return parser


def _apply_config(parser: argparse.ArgumentParser, argv) -> argparse.Namespace:
    """Re-parse with config entries spliced in ahead of the user's flags, so flags win."""
    argv = list(sys.argv[1:] if argv is None else argv)
    args = parser.parse_args(argv)
    if not getattr(args, "config", None):
        return args
    injected = []
    for key, value in read_config(args.config).items():
        flag = "--" + key.replace("_", "-")
        if key in BOOL_KEYS:
            if _parse_bool(value):
                injected.append(flag)
        else:
            injected += [flag, value]
    at = argv.index(args.command) + 1
    return parser.parse_args(argv[:at] + injected + argv[at:])


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = _apply_config(parser, argv)
        logging.basicConfig(level=logging.WARNING - 10 * args.verbose, format="%(levelname)s %(name)s: %(message)s")
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (OSError, volume.NiftiError, GridMismatchError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
