"""End-to-end run: per-slice records on training cases, correlation, model
fitting and cross validation, then flagging and targeted smoothing of test
cases with the fitted HD model.

Training cases need GT. Test cases may lack it; their metrics are then
skipped. Without input directories a phantom dataset is generated first.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

from segqc import geometry, metrics, phantom, postprocess, regression, uncertainty
from segqc.volume_io import (
    MEASURES,
    write_json,
    write_slice_records,
    write_volume,
)

log = logging.getLogger(__name__)

SCHEMA = 1


@dataclass
class PhantomSettings:
    train_cases: int = 10
    noise_grades: tuple[float, ...] = (0.0, 1.0, 2.0, 4.0)
    train_bad_per_case: int = 3
    test_cases: int = 1
    test_noise_mm: float = 1.0
    test_bad_slices: tuple[int, ...] = ()
    members: int = 20
    dims: tuple[int, int, int] = (16, 120, 120)


@dataclass
class PipelineConfig:
    sampler: geometry.SamplerConfig = field(default_factory=geometry.SamplerConfig)
    postprocess: postprocess.PostprocessConfig = field(default_factory=postprocess.PostprocessConfig)
    phantom: PhantomSettings = field(default_factory=PhantomSettings)
    train_dir: str | None = None
    test_dir: str | None = None
    measure: str = "auto"
    folds: int = 10

    def __post_init__(self):
        if self.measure != "auto" and self.measure not in MEASURES:
            raise ValueError(f"measure must be 'auto' or one of {MEASURES}, got {self.measure!r}")

    def to_json(self) -> dict:
        p = self.phantom
        return {
            "schema": SCHEMA,
            "sampler": self.sampler.to_dict(),
            "postprocess": self.postprocess.to_dict(),
            "phantom": {
                "train_cases": p.train_cases,
                "noise_grades": list(p.noise_grades),
                "train_bad_per_case": p.train_bad_per_case,
                "test_cases": p.test_cases,
                "test_noise_mm": p.test_noise_mm,
                "test_bad_slices": list(p.test_bad_slices),
                "members": p.members,
                "dims": list(p.dims),
            },
            "paths": {"train_dir": self.train_dir, "test_dir": self.test_dir},
            "measure": self.measure,
            "folds": self.folds,
        }

    @classmethod
    def from_json(cls, d) -> "PipelineConfig":
        if d.get("schema") != SCHEMA:
            raise ValueError(f"unsupported pipeline config schema {d.get('schema')!r}")
        ph = dict(d.get("phantom", {}))
        for key in ("noise_grades", "test_bad_slices", "dims"):
            if key in ph:
                ph[key] = tuple(ph[key])
        paths = d.get("paths", {})
        return cls(
            sampler=geometry.SamplerConfig.from_dict(d.get("sampler", {})),
            postprocess=postprocess.PostprocessConfig.from_dict(d.get("postprocess", {})),
            phantom=PhantomSettings(**ph),
            train_dir=paths.get("train_dir"),
            test_dir=paths.get("test_dir"),
            measure=d.get("measure", "auto"),
            folds=int(d.get("folds", 10)),
        )


def generate_phantom_data(out: Path, cfg: PhantomSettings, seed: int) -> tuple[Path, Path]:
    """Write a graded training set and noise-controlled test cases under ``out``."""
    train_dir, test_dir = out / "train", out / "test"
    for case in phantom.graded_cases(
        cfg.train_cases,
        cfg.noise_grades,
        seed=seed,
        members=cfg.members,
        dims=cfg.dims,
        bad_per_case=cfg.train_bad_per_case,
    ):
        phantom.write_case(train_dir / case.case_id, case.ensemble, case.gt)
    for i in range(cfg.test_cases):
        gt = phantom.make_phantom(held_out_phantom_config(cfg.dims))
        pcfg = phantom.PerturbConfig(
            members=cfg.members,
            boundary_noise_sigma=cfg.test_noise_mm,
            bad_slice_indices=cfg.test_bad_slices,
            seed=seed + 1000 + i,
        )
        case_id = f"test_{i:02d}"
        phantom.write_case(test_dir / case_id, phantom.make_ensemble(gt, pcfg, case_id), gt)
    return train_dir, test_dir


def held_out_phantom_config(dims) -> phantom.PhantomConfig:
    """Default ellipsoid, with radii scaled in proportion when the grid differs."""
    base = phantom.PhantomConfig()
    dims = tuple(dims)
    if dims == base.dims:
        return base
    radii = tuple(r * n / b for r, n, b in zip(base.radii, dims, base.dims))
    return phantom.PhantomConfig(dims=dims, radii=radii)


def case_records(ensemble, gt) -> tuple[list, object, object]:
    mean, label = uncertainty.aggregate(ensemble)
    unc = uncertainty.slice_uncertainty(ensemble)
    if gt is None:
        return uncertainty.build_records(ensemble.case_id, unc), mean, label
    sm = metrics.slice_metrics(gt, label, gt.spacing)
    return uncertainty.build_records(ensemble.case_id, unc, sm), mean, label


def run(cfg: PipelineConfig, out, seed: int) -> dict:
    """Run everything and write reports under ``out``; returns the summary dict."""
    out = Path(out)
    if cfg.train_dir is None:
        train_dir, test_dir = generate_phantom_data(out / "data", cfg.phantom, seed)
    else:
        train_dir = Path(cfg.train_dir)
        test_dir = Path(cfg.test_dir) if cfg.test_dir else train_dir
    write_json(cfg.to_json(), out / "config.json")

    train_records = []
    for d in phantom.case_dirs(train_dir):
        ens, gt = phantom.read_case(d)
        if gt is None:
            raise ValueError(f"training case {d} has no gt.mhd")
        recs, _, _ = case_records(ens, gt)
        train_records += recs
        log.info("train %s: %d slices", ens.case_id, len(recs))
    write_slice_records(train_records, out / "train_records.csv")

    corr = uncertainty.correlate(train_records)
    write_json({"schema": SCHEMA, "correlations": corr.to_json()}, out / "correlation.json")

    models, cv = {}, {}
    for target, key in (("dsc", "dsc"), ("hd_mm", "hd")):
        measure = cfg.measure if cfg.measure != "auto" else corr.most_correlated(key)
        models[key] = regression.fit(train_records, measure, target)
        write_json(models[key].to_json(), out / f"model_{key}.json")
        cv[key] = regression.cross_validate(train_records, measure, target, cfg.folds)
        write_json(cv[key].to_json(), out / f"cv_{key}.json")

    tests = []
    for d in phantom.case_dirs(test_dir):
        ens, gt = phantom.read_case(d)
        case_out = out / "cases" / ens.case_id
        recs, mean, label = case_records(ens, gt)
        write_slice_records(recs, case_out / "records.csv")
        write_volume(mean, case_out / "mean_prob.mhd")
        write_volume(label, case_out / "label.mhd")
        if label.data.any():
            box = geometry.tight_bbox(label)
            specs = geometry.sample_crops(box, label.dims, _with_seed(cfg.sampler, seed))
            write_json(geometry.crops_to_json(specs), case_out / "crops.json")

        unc = uncertainty.slice_uncertainty(ens)
        flags = postprocess.flag_slices(unc, models["hd"], cfg.postprocess)
        new_label, report = postprocess.apply_postprocess(mean, label, flags, cfg.postprocess)
        write_volume(new_label, case_out / "label_post.mhd")
        write_json(report.to_json(), case_out / "postprocess.json")

        entry = {"case_id": ens.case_id, "flagged_slices": report.flagged_indices}
        if gt is not None:
            before = metrics.volume_metrics(gt, label, gt.spacing)
            after = metrics.volume_metrics(gt, new_label, gt.spacing)
            write_json(before.to_dict(ens.case_id), case_out / "metrics.json")
            write_json(after.to_dict(ens.case_id), case_out / "metrics_post.json")
            entry["dsc_before"], entry["dsc_after"] = before.dsc, after.dsc
        tests.append(entry)

    summary = {
        "schema": SCHEMA,
        "seed": seed,
        "train_slices": len(train_records),
        "models": {k: m.to_json() for k, m in models.items()},
        "cv_mean_rmse": {k: r.mean_rmse for k, r in cv.items()},
        "test_cases": tests,
    }
    write_json(summary, out / "summary.json")
    return summary


def _with_seed(sampler: geometry.SamplerConfig, seed: int) -> geometry.SamplerConfig:
    d = sampler.to_dict()
    d["seed"] = seed
    return geometry.SamplerConfig.from_dict(d)
