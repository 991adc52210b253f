"""Command-line front end.

Exit codes: 0 success, 1 internal error, 2 user or input error.
"""
from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

import numpy as np

from . import pipeline
from ._io import atomic_write
from .config import PipelineConfig, load_config
from .errors import InsufficientDataError, LidarIntensityError
from .evaluation import ConfusionMatrix, accumulate, iou
from .profiles import ProfileSet
from .regressor import TrainConfig, save_model, split_train_validation, train
from .scan import Ontology, Scan, Sensor, read_labels, read_raw_labels, read_scan, write_raw_labels, write_scan
from .synthetic import RangeCompensation, SensorMode, SensorSimConfig, generate_scene, parse_scene
from .transfer import TransferCurve, VelodyneTransfer, convert_velodyne

logger = logging.getLogger("lidar_intensity")

EXIT_OK, EXIT_INTERNAL, EXIT_USER = 0, 1, 2


class UsageError(Exception):
    """Bad invocation or unusable inputs (exit code 2)."""


def _config_flags(parser):
    group = parser.add_argument_group("pipeline settings (override config file and env)")
    for f in dataclasses.fields(PipelineConfig):
        flag = "--" + f.name.replace("_", "-")
        if f.type == "bool":
            group.add_argument(flag, dest=f.name, action="store_const", const=True, default=None)
        else:
            kind = {"float": float, "int": int, "str": str}[f.type]
            group.add_argument(flag, dest=f.name, type=kind, default=None, metavar=f.name.upper())


def _resolve_config(args) -> PipelineConfig:
    names = [f.name for f in dataclasses.fields(PipelineConfig)]
    overrides = {n: getattr(args, n) for n in names if getattr(args, n, None) is not None}
    try:
        return load_config(args.config, overrides)
    except (ValueError, OSError) as exc:
        raise UsageError(f"bad configuration: {exc}") from None


def _ontology(config) -> Ontology:
    return Ontology.from_file(config.ontology) if config.ontology else Ontology.default()


def _scan_files(directory) -> list:
    directory = Path(directory)
    if not directory.is_dir():
        raise UsageError(f"not a directory: {directory}")
    files = sorted(directory.glob("*.bin"))
    if not files:
        raise UsageError(f"no .bin scans in {directory}")
    return files


def _load_labeled(scan_dir, label_dir, sensor, ontology, jobs=1) -> list:
    label_dir = Path(label_dir)

    def one(path):
        label_path = label_dir / (path.stem + ".label")
        if not label_path.exists():
            raise UsageError(f"missing label file {label_path}")
        return read_labels(label_path, read_scan(path, sensor), ontology)

    return pipeline.ordered_map(one, _scan_files(scan_dir), jobs)


def _write_text(path, config: PipelineConfig, body: str):
    atomic_write(path, config.header_text() + body)


def cmd_fit_alpha(args, config):
    ontology = _ontology(config)
    scans = _load_labeled(args.scans, args.labels, Sensor.OUSTER_RAW, ontology, config.jobs)
    settings = dataclasses.replace(config, alpha_source="analytic").calibration_settings()
    data = pipeline.alpha_training_set(
        scans, settings, config.alpha_bin_width, config.robust_percentile,
        config.alpha_min_bin_count, config.jobs,
    )
    train_config = TrainConfig(
        config.learning_rate, config.batch_size, config.epochs, config.seed,
        config.validation_fraction,
    )
    result = train(data.features, data.targets, train_config)
    _, val_idx = split_train_validation(len(data), config.validation_fraction, config.seed)
    baseline = np.mean(np.abs(pipeline.pca_baseline_alpha(data.features[val_idx]) - data.targets[val_idx]))

    out = Path(args.out)
    save_model(result.model, out, config.header())
    lines = [f"samples={len(data)}", f"validation_samples={val_idx.size}"]
    lines += [f"class_{c.name.lower()}={n}" for c, n in sorted(data.class_counts.items())]
    lines += [
        f"final_train_mae={result.train_loss[-1]!r}",
        f"final_val_mae={result.final_val_mae!r}",
        f"pca_baseline_val_mae={float(baseline)!r}",
    ]
    report = "\n".join(lines) + "\n"
    _write_text(out.with_name(out.name + ".report.txt"), config, report)
    print(report, end="")


def cmd_profile(args, config):
    ontology = _ontology(config)
    scans = _load_labeled(args.scans, args.labels, Sensor.OUSTER_RAW, ontology, config.jobs)
    profiles = pipeline.profile_scans(
        scans, config.calibration_settings(), config.min_support,
        config.profile_bin_fraction, config.profile_min_bins,
        {"config": config.header()}, config.jobs,
    )
    if not len(profiles):
        raise InsufficientDataError(
            f"no class reached min_support={config.min_support}; excluded: "
            + ", ".join(f"{c.name.lower()}={n}" for c, n in profiles.excluded.items())
        )
    profiles.save(args.out)
    for p in profiles.profiles:
        print(f"{p.class_id.name.lower()}: mode={p.mode:.6g} support={p.support} spread={p.spread:.6g}")


def cmd_segment(args, config):
    sensor = Sensor(args.sensor)
    curve = None
    if sensor == Sensor.VELODYNE_PREPROCESSED:
        if not args.curve:
            raise UsageError(
                "Velodyne scans need a transfer curve (--curve); fit one with convert-velodyne"
            )
        curve = TransferCurve.load(args.curve)
    profiles = ProfileSet.load(args.profiles)
    ontology = _ontology(config)
    settings = config.calibration_settings()
    files = _scan_files(args.scans)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    def one(path):
        pred = pipeline.segment_scan(read_scan(path, sensor), profiles, settings, curve, config.filter_radius)
        write_raw_labels(ontology.to_raw(pred), out / (path.stem + ".label"))
        return path.stem, len(pred)

    for stem, n in pipeline.ordered_map(one, files, config.jobs):
        print(f"{stem}: {n} points")
    _write_text(out / "run_config.txt", config, f"command=segment\nscans={len(files)}\n")


def cmd_convert_velodyne(args, config):
    files = _scan_files(args.scans)
    out = Path(args.out)
    report = []
    if args.curve:
        curve = TransferCurve.load(args.curve)
    elif args.pair_scans and args.pair_labels and args.labels:
        ontology = _ontology(config)
        velodyne = _load_labeled(args.scans, args.labels, Sensor.VELODYNE_PREPROCESSED, ontology, config.jobs)
        ouster = _load_labeled(args.pair_scans, args.pair_labels, Sensor.OUSTER_RAW, ontology, config.jobs)
        est = VelodyneTransfer(
            config.transfer_degree, config.transfer_range_power, config.r_min, config.r_max,
            config.transfer_bin_width, config.robust_percentile, config.alpha_min_bin_count,
        ).fit(ouster, velodyne)
        curve = est.curve_
        for pair in est.independence_:
            report.append(
                f"q_ratio_{pair.class_a.name.lower()}_{pair.class_b.name.lower()}"
                f" mean={pair.mean!r} max_dev={pair.max_deviation!r}"
            )
        for cls, series in est.q_series_.items():
            d = series.diagnostics()
            for r, q, qr, qr2 in zip(d["r"], d["q"], d["q_r"], d["q_r2"]):
                report.append(
                    f"q_{cls.name.lower()} r={float(r)!r} q={float(q)!r}"
                    f" q_r={float(qr)!r} q_r2={float(qr2)!r}"
                )
    else:
        raise UsageError(
            "need either --curve or paired Ouster scans (--pair-scans, --pair-labels) "
            "plus Velodyne labels (--labels)"
        )
    out.mkdir(parents=True, exist_ok=True)

    def one(path):
        converted, keep = convert_velodyne(read_scan(path, Sensor.VELODYNE_PREPROCESSED), curve, True)
        write_scan(converted, out / path.name)
        return path.stem, int((~keep).sum())

    for stem, dropped in pipeline.ordered_map(one, files, config.jobs):
        report.append(f"converted {stem} dropped={dropped}")
    curve_out = Path(args.curve_out) if args.curve_out else out / "transfer_curve.txt"
    curve.save(curve_out, config.header())
    text = f"residual_rms={curve.residual_rms!r}\n" + "\n".join(report) + "\n"
    _write_text(out / "transfer_report.txt", config, text)
    print(text, end="")


def cmd_evaluate(args, config):
    ontology = _ontology(config)
    gt_dir, pred_dir = Path(args.gt), Path(args.pred)
    gt_files = sorted(gt_dir.glob("*.label")) if gt_dir.is_dir() else []
    if not gt_files:
        raise UsageError(f"no .label files in {gt_dir}")
    cm = ConfusionMatrix()
    for gt_path in gt_files:
        pred_path = pred_dir / gt_path.name
        if not pred_path.exists():
            raise UsageError(f"missing prediction {pred_path}")
        gt, _ = ontology.map(read_raw_labels(gt_path))
        pred, _ = ontology.map(read_raw_labels(pred_path))
        if gt.size != pred.size:
            raise UsageError(f"{gt_path.name}: {gt.size} ground-truth vs {pred.size} predicted labels")
        cm = accumulate(cm, gt, pred, config.in_gate_only)
    report = iou(cm)
    text = report.table() + "\n" + report.key_values()
    if args.out:
        _write_text(args.out, config, text)
    print(text, end="")


def cmd_synth(args, config):
    scene_path = Path(args.scene)
    try:
        scene_text = scene_path.read_text(encoding="utf-8")
    except OSError as exc:
        raise UsageError(f"cannot read scene: {exc}") from None
    items = parse_scene(scene_text, str(scene_path))
    ontology = _ontology(config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    modes = [SensorMode.RAW_OUSTER] if args.sensor == "ouster" else [SensorMode.SIMULATED_VELODYNE]
    if args.sensor == "both":
        modes = [SensorMode.RAW_OUSTER, SensorMode.SIMULATED_VELODYNE]
    for i in range(args.count):
        for mode in modes:
            sim = SensorSimConfig(
                azimuth_steps=config.synth_azimuth_steps,
                elevation_steps=config.synth_elevation_steps,
                elevation_min_deg=config.synth_elevation_min_deg,
                elevation_max_deg=config.synth_elevation_max_deg,
                seed=config.seed + i,
                mode=mode,
                compensation=RangeCompensation(config.synth_velodyne_c),
            )
            scan, truth = generate_scene(items, sim)
            target = out / mode.value if args.sensor == "both" else out
            target.mkdir(parents=True, exist_ok=True)
            stem = f"{i:06d}"
            write_scan(scan, target / f"{stem}.bin")
            write_raw_labels(ontology.to_raw(scan.labels), target / f"{stem}.label")
            _write_text(target / f"{stem}.truth.txt", config, truth.to_text())
            print(f"{target / stem}: {len(scan)} points")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lidar-intensity",
        description="LiDAR intensity calibration and reflectivity-based segmentation.",
    )
    parser.add_argument("--config", help="key = value settings file")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit-alpha", help="train the incidence-angle regressor")
    p.add_argument("--scans", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--out", required=True, help="model file")
    p.set_defaults(func=cmd_fit_alpha)

    p = sub.add_parser("profile", help="build per-class calibrated-intensity profiles")
    p.add_argument("--scans", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--out", required=True, help="profile document (JSON)")
    p.set_defaults(func=cmd_profile)

    p = sub.add_parser("segment", help="predict labels by nearest class mode")
    p.add_argument("--scans", required=True)
    p.add_argument("--profiles", required=True)
    p.add_argument("--out", required=True, help="directory for .label files")
    p.add_argument("--sensor", choices=[s.value for s in Sensor], default=Sensor.OUSTER_RAW.value)
    p.add_argument("--curve", help="transfer curve for Velodyne scans")
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("convert-velodyne", help="convert Velodyne intensity to raw form")
    p.add_argument("--scans", required=True, help="Velodyne .bin scans")
    p.add_argument("--labels", help="Velodyne labels (fitting only)")
    p.add_argument("--pair-scans", help="Ouster scans of the same scenes")
    p.add_argument("--pair-labels", help="labels for --pair-scans")
    p.add_argument("--curve", help="use a saved transfer curve instead of fitting")
    p.add_argument("--curve-out", help="where to write the curve (default OUT/transfer_curve.txt)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_convert_velodyne)

    p = sub.add_parser("evaluate", help="per-class IoU and mean IoU")
    p.add_argument("--gt", required=True, help="directory of ground-truth .label files")
    p.add_argument("--pred", required=True, help="directory of predicted .label files")
    p.add_argument("--out", help="also write the report here")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("synth", help="generate synthetic labeled scans")
    p.add_argument("--scene", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=1)
    p.add_argument("--sensor", choices=["ouster", "velodyne", "both"], default="ouster")
    p.set_defaults(func=cmd_synth)

    for action in sub.choices.values():
        _config_flags(action)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USER
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        config = _resolve_config(args)
        args.func(args, config)
    except (UsageError, LidarIntensityError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USER
    except Exception:  # noqa: BLE001
        logger.exception("internal error")
        return EXIT_INTERNAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
