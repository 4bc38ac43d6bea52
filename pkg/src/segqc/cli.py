"""Command line interface.

Exit status: 0 on success, 1 on usage errors, 2 on data errors (bad or
missing files, degenerate inputs).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from segqc import geometry, metrics, phantom, pipeline, postprocess, regression, uncertainty
from segqc.volume_io import (
    MEASURES,
    RecordFormatError,
    VolumeFormatError,
    atomic_write_text,
    dumps_json,
    read_json,
    read_slice_records,
    read_volume,
    write_json,
    write_slice_records,
    write_volume,
)

log = logging.getLogger("segqc")

EXIT_USAGE = 1
EXIT_DATA = 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _emit(obj) -> None:
    sys.stdout.write(dumps_json(obj))


def _load_records(paths) -> list:
    out = []
    for p in paths:
        out += read_slice_records(p)
    return out


# ---------------------------------------------------------------- commands

def cmd_info(args):
    v = read_volume(args.volume)
    _emit(
        {
            "path": str(args.volume),
            "dims": list(v.dims),
            "spacing": list(v.spacing),
            "origin": list(v.origin),
            "element_kind": v.element_kind,
            "min": float(v.data.min()),
            "max": float(v.data.max()),
            "nonzero": int((v.data != 0).sum()),
        }
    )


def cmd_resample(args):
    v = read_volume(args.input)
    if args.spacing:
        out = geometry.resample(v, args.spacing, args.mode)
    else:
        out = geometry.resize_to(v, args.dims, args.mode)
    write_volume(out, args.output)
    print(f"{args.input} {v.dims} -> {args.output} {out.dims}", file=sys.stderr)


def cmd_crops(args):
    label = read_volume(args.label)
    cfg = geometry.SamplerConfig(
        n_margin_sets=args.n_sets,
        max_margin=tuple(args.max_margin),
        with_flip=not args.no_flip,
        target_dims=tuple(args.target),
        seed=args.seed,
    )
    specs = geometry.sample_crops(geometry.tight_bbox(label), label.dims, cfg)
    write_json(geometry.crops_to_json(specs), args.out)
    print(f"wrote {len(specs)} crop specs to {args.out}", file=sys.stderr)


def cmd_uncrop(args):
    source = read_volume(args.source)
    specs = geometry.crops_from_json(read_json(args.crops))
    maps = sorted(Path(args.maps).glob("*.mhd"))
    if len(maps) != len(specs):
        raise ValueError(f"{len(specs)} crop specs but {len(maps)} maps in {args.maps}")
    for i, (spec, path) in enumerate(zip(specs, maps)):
        p = geometry.uncrop_prob(read_volume(path), spec, source.spacing, source.origin)
        write_volume(p, Path(args.out) / f"member_{i:02d}.mhd")
    print(f"wrote {len(specs)} members to {args.out}", file=sys.stderr)


def cmd_aggregate(args):
    ens, _ = phantom.read_case(args.ensemble)
    mean, label = uncertainty.aggregate(ens)
    write_volume(mean, args.out_prob)
    write_volume(label, args.out_label)


def cmd_metrics(args):
    gt, pred = read_volume(args.gt), read_volume(args.pred)
    if gt.dims != pred.dims:
        raise ValueError(f"gt dims {gt.dims} differ from pred dims {pred.dims}")
    vm = metrics.volume_metrics(gt, pred, gt.spacing)
    summary = vm.to_dict(args.case_id)
    if args.json:
        write_json(summary, args.json)
    if args.csv:
        sm = metrics.slice_metrics(gt, pred, gt.spacing)
        write_slice_records(uncertainty.build_records(args.case_id, metrics=sm), args.csv)
    _emit(summary)


def cmd_uncertainty(args):
    ens, gt = phantom.read_case(args.ensemble, args.case_id)
    unc = uncertainty.slice_uncertainty(ens)
    if args.gt:
        gt = read_volume(args.gt)
    if gt is not None and not args.no_gt:
        _, label = uncertainty.aggregate(ens)
        sm = metrics.slice_metrics(gt, label, gt.spacing)
        records = uncertainty.build_records(ens.case_id, unc, sm)
    else:
        records = uncertainty.build_records(ens.case_id, unc)
    write_slice_records(records, args.out)
    print(f"{ens.case_id}: {len(records)} slices -> {args.out}", file=sys.stderr)


def cmd_correlate(args):
    report = uncertainty.correlate(_load_records(args.records))
    doc = {"schema": 1, "correlations": report.to_json()}
    if args.out:
        write_json(doc, args.out)
    _emit(doc)


def _resolve_measure(measure, target, records):
    if measure != "auto":
        return measure
    return uncertainty.correlate(records).most_correlated("hd" if target == "hd" else "dsc")


def cmd_fit(args):
    records = _load_records(args.records)
    measure = _resolve_measure(args.measure, args.target, records)
    model = regression.fit(records, measure, args.target)
    write_json(model.to_json(), args.out)
    _emit(model.to_json())


def cmd_cv(args):
    records = _load_records(args.records)
    measure = _resolve_measure(args.measure, args.target, records)
    report = regression.cross_validate(records, measure, args.target, args.folds)
    if args.out:
        write_json(report.to_json(), args.out)
    _emit(report.to_json())


def cmd_predict(args):
    model = regression.LinearModel.from_json(read_json(args.model))
    lines = ["case_id,slice_index,measure,measure_value,predicted,raw"]
    for r in _load_records(args.records):
        x = r.get(model.measure_kind)
        if x is None:
            lines.append(f"{r.case_id},{r.slice_index},{model.measure_kind},,,")
            continue
        p = regression.predict(model, x)
        lines.append(
            f"{r.case_id},{r.slice_index},{model.measure_kind},{x!r},{p.value!r},{p.raw!r}"
        )
    atomic_write_text(args.out, "\n".join(lines) + "\n")


def cmd_postprocess(args):
    ens, _ = phantom.read_case(args.ensemble)
    model = regression.LinearModel.from_json(read_json(args.model))
    cfg = postprocess.PostprocessConfig(
        hd_threshold_mm=args.threshold, sigma_px=args.sigma, rethreshold=args.rethreshold
    )
    mean, label = uncertainty.aggregate(ens)
    flags = postprocess.flag_slices(uncertainty.slice_uncertainty(ens), model, cfg)
    new_label, report = postprocess.apply_postprocess(mean, label, flags, cfg)
    write_volume(new_label, args.out_label)
    write_json(report.to_json(), args.report)
    _emit({"case_id": ens.case_id, "flagged_slices": report.flagged_indices})


def cmd_phantom(args):
    cases = phantom.graded_cases(
        args.cases,
        tuple(args.grades),
        seed=args.seed,
        members=args.members,
        dims=tuple(args.dims),
    )
    for case in cases:
        phantom.write_case(Path(args.out) / case.case_id, case.ensemble, case.gt)
    print(f"wrote {len(cases)} cases to {args.out}", file=sys.stderr)


def cmd_pipeline(args):
    cfg = pipeline.PipelineConfig.from_json(read_json(args.config)) if args.config else pipeline.PipelineConfig()
    if args.train:
        cfg.train_dir = str(args.train)
    if args.test:
        cfg.test_dir = str(args.test)
    if args.test_noise is not None:
        cfg.phantom.test_noise_mm = args.test_noise
    if args.bad_slices is not None:
        cfg.phantom.test_bad_slices = tuple(args.bad_slices)
    if args.train_cases is not None:
        cfg.phantom.train_cases = args.train_cases
    if args.measure is not None:
        cfg.measure = args.measure
    summary = pipeline.run(cfg, args.out, args.seed)
    for case in summary["test_cases"]:
        print(f"{case['case_id']}: flagged slices {case['flagged_slices']}")
    print(f"reports written to {args.out}")


# ------------------------------------------------------------------ parser

def _dims(p, name, default, help):
    p.add_argument(name, type=int, nargs=3, metavar=("NZ", "NY", "NX"), default=default, help=help)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="segqc", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("info", help="print volume header and value range")
    p.add_argument("volume", type=Path)
    p.set_defaults(func=cmd_info)

    p = sub.add_parser("resample", help="resample to a spacing or resize to dims")
    p.add_argument("input", type=Path)
    p.add_argument("output", type=Path)
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--spacing", type=float, nargs=3, metavar=("SZ", "SY", "SX"))
    g.add_argument("--dims", type=int, nargs=3, metavar=("NZ", "NY", "NX"))
    p.add_argument("--mode", choices=geometry.MODES, default="trilinear")
    p.set_defaults(func=cmd_resample)

    p = sub.add_parser("crops", help="emit variable-input crop specs from a stage-1 label")
    p.add_argument("--label", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--n-sets", type=int, default=10)
    p.add_argument("--max-margin", type=int, nargs=3, default=list(geometry.DEFAULT_MAX_MARGIN))
    p.add_argument("--no-flip", action="store_true")
    _dims(p, "--target", list(geometry.DEFAULT_TARGET_DIMS), "crop grid")
    p.set_defaults(func=cmd_crops)

    p = sub.add_parser("uncrop", help="map crop-space probability maps back to the source grid")
    p.add_argument("--crops", type=Path, required=True)
    p.add_argument("--maps", type=Path, required=True, help="directory of maps, sorted by name")
    p.add_argument("--source", type=Path, required=True, help="volume defining the source grid")
    p.add_argument("--out", type=Path, required=True, help="ensemble directory to write")
    p.set_defaults(func=cmd_uncrop)

    p = sub.add_parser("aggregate", help="mean probability and consensus label")
    p.add_argument("--ensemble", type=Path, required=True)
    p.add_argument("--out-prob", type=Path, required=True)
    p.add_argument("--out-label", type=Path, required=True)
    p.set_defaults(func=cmd_aggregate)

    p = sub.add_parser("metrics", help="volume and per-slice DSC/HD/MSD/HD95")
    p.add_argument("--gt", type=Path, required=True)
    p.add_argument("--pred", type=Path, required=True)
    p.add_argument("--case-id", default="case")
    p.add_argument("--json", type=Path)
    p.add_argument("--csv", type=Path)
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("uncertainty", help="per-slice type1/2/3 measures (+ metrics with GT)")
    p.add_argument("--ensemble", type=Path, required=True)
    p.add_argument("--case-id")
    p.add_argument("--gt", type=Path, help="defaults to gt.mhd in the ensemble directory")
    p.add_argument("--no-gt", action="store_true", help="ignore any GT")
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_uncertainty)

    p = sub.add_parser("correlate", help="Pearson r of measures against DSC and HD")
    p.add_argument("--records", type=Path, nargs="+", required=True)
    p.add_argument("--out", type=Path)
    p.set_defaults(func=cmd_correlate)

    for name, helptext in (("fit", "fit a linear model"), ("cv", "case-grouped cross validation")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--records", type=Path, nargs="+", required=True)
        p.add_argument("--measure", choices=("auto",) + MEASURES, default="auto")
        p.add_argument("--target", choices=("dsc", "hd"), required=True)
        if name == "fit":
            p.add_argument("--out", type=Path, required=True)
            p.set_defaults(func=cmd_fit)
        else:
            p.add_argument("--folds", type=int, default=10)
            p.add_argument("--out", type=Path)
            p.set_defaults(func=cmd_cv)

    p = sub.add_parser("predict", help="apply a model to slice records")
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--records", type=Path, nargs="+", required=True)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("postprocess", help="smooth slices with high predicted HD")
    p.add_argument("--ensemble", type=Path, required=True)
    p.add_argument("--model", type=Path, required=True, help="HD model JSON")
    p.add_argument("--threshold", type=float, default=postprocess.DEFAULT_HD_THRESHOLD_MM)
    p.add_argument("--sigma", type=float, default=postprocess.DEFAULT_SIGMA_PX)
    p.add_argument("--rethreshold", type=float, default=0.5)
    p.add_argument("--out-label", type=Path, required=True)
    p.add_argument("--report", type=Path, required=True)
    p.set_defaults(func=cmd_postprocess)

    p = sub.add_parser("phantom", help="write a graded synthetic dataset")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--cases", type=int, default=10)
    p.add_argument("--grades", type=float, nargs="+", default=[0.0, 1.0, 2.0, 4.0])
    p.add_argument("--members", type=int, default=20)
    _dims(p, "--dims", [16, 120, 120], "phantom grid")
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("pipeline", help="end-to-end run on phantom or real data")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--config", type=Path, help="pipeline config JSON (schema 1)")
    p.add_argument("--train", type=Path, help="directory of training case dirs with gt.mhd")
    p.add_argument("--test", type=Path, help="directory of test case dirs (default: --train)")
    p.add_argument("--train-cases", type=int)
    p.add_argument("--test-noise", type=float, help="phantom test-case noise, mm")
    p.add_argument("--bad-slices", type=int, nargs="*", help="phantom test-case corrupted slices")
    p.add_argument("--measure", choices=("auto",) + MEASURES)
    p.set_defaults(func=cmd_pipeline)
    return parser


DATA_ERRORS = (
    ValueError,
    KeyError,
    IndexError,
    OSError,
    json.JSONDecodeError,
    VolumeFormatError,
    RecordFormatError,
)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else 0
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        args.func(args)
    except DATA_ERRORS as exc:
        print(f"segqc {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return 0


if __name__ == "__main__":
    sys.exit(main())
