"""Single-feature linear models from an uncertainty measure to slice DSC or HD,
with case-grouped k-fold cross validation."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from segqc.volume_io import MEASURES, TARGETS, SliceRecord


class DegenerateFitError(ValueError):
    pass


def _target_name(target: str) -> str:
    target = "hd_mm" if target == "hd" else target
    if target not in TARGETS:
        raise ValueError(f"target must be one of {TARGETS}, got {target!r}")
    return target


def _measure_name(measure: str) -> str:
    if measure not in MEASURES:
        raise ValueError(f"measure must be one of {MEASURES}, got {measure!r}")
    return measure


@dataclass
class LinearModel:
    measure_kind: str
    target: str
    slope: float
    intercept: float
    trained_cases: int = 0
    trained_slices: int = 0

    def __post_init__(self):
        self.measure_kind = _measure_name(self.measure_kind)
        self.target = _target_name(self.target)
        if not (math.isfinite(self.slope) and math.isfinite(self.intercept)):
            raise ValueError("model coefficients must be finite")

    def to_json(self) -> dict:
        return {
            "schema": 1,
            "measure_kind": self.measure_kind,
            "target": self.target,
            "slope": self.slope,
            "intercept": self.intercept,
            "trained_on": {"cases": self.trained_cases, "slices": self.trained_slices},
        }

    @classmethod
    def from_json(cls, d) -> "LinearModel":
        if d.get("schema", 1) != 1:
            raise ValueError(f"unsupported model schema {d.get('schema')!r}")
        trained = d.get("trained_on", {})
        return cls(
            measure_kind=d["measure_kind"],
            target=d["target"],
            slope=float(d["slope"]),
            intercept=float(d["intercept"]),
            trained_cases=int(trained.get("cases", 0)),
            trained_slices=int(trained.get("slices", 0)),
        )


@dataclass
class Prediction:
    value: float
    raw: float


def usable_rows(records, measure: str, target: str) -> list[SliceRecord]:
    return [r for r in records if r.get(measure) is not None and r.get(target) is not None]


def ols(x, y) -> tuple[float, float]:
    """Least-squares slope and intercept of y on x."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if len(x) < 2:
        raise DegenerateFitError(f"need at least 2 points, got {len(x)}")
    xm, ym = x.mean(), y.mean()
    dx = x - xm
    sxx = float(dx @ dx)
    if sxx == 0:
        raise DegenerateFitError("feature is constant; slope is not identifiable")
    slope = float(dx @ (y - ym)) / sxx
    return slope, float(ym - slope * xm)


def fit(records, measure: str = "type1", target: str = "dsc") -> LinearModel:
    measure, target = _measure_name(measure), _target_name(target)
    rows = usable_rows(records, measure, target)
    slope, intercept = ols([r.get(measure) for r in rows], [r.get(target) for r in rows])
    return LinearModel(
        measure,
        target,
        slope,
        intercept,
        trained_cases=len({r.case_id for r in rows}),
        trained_slices=len(rows),
    )


def predict(m: LinearModel, x: float) -> Prediction:
    """slope*x + intercept, clamped to [0, 1] for DSC and to >= 0 for HD."""
    raw = m.slope * float(x) + m.intercept
    if m.target == "dsc":
        value = min(max(raw, 0.0), 1.0)
    else:
        value = max(raw, 0.0)
    return Prediction(value=value, raw=raw)


def rmse(pred, actual) -> float:
    d = np.asarray(pred, dtype=np.float64) - np.asarray(actual, dtype=np.float64)
    return float(np.sqrt(np.mean(d * d)))


def assign_folds(case_ids, folds: int) -> dict[str, int]:
    """Sorted case ids dealt round-robin into ``folds`` groups."""
    cases = sorted(set(case_ids))
    if len(cases) < folds:
        raise ValueError(f"{folds}-fold cross validation needs >= {folds} cases, got {len(cases)}")
    return {c: i % folds for i, c in enumerate(cases)}


@dataclass
class CVReport:
    measure_kind: str
    target: str
    folds: int
    fold_rmse: list[float] = field(default_factory=list)
    fold_cases: list[list[str]] = field(default_factory=list)
    fold_slices: list[int] = field(default_factory=list)
    grouping: str = "by_case"

    @property
    def mean_rmse(self) -> float:
        return float(np.mean(self.fold_rmse))

    def to_json(self) -> dict:
        return {
            "schema": 1,
            "measure_kind": self.measure_kind,
            "target": self.target,
            "folds": self.folds,
            "grouping": self.grouping,
            "fold_rmse": self.fold_rmse,
            "fold_cases": self.fold_cases,
            "fold_slices": self.fold_slices,
            "mean_rmse": self.mean_rmse,
        }


def cross_validate(records, measure: str = "type1", target: str = "dsc", folds: int = 10) -> CVReport:
    """Case-grouped k-fold CV; RMSE uses clamped held-out predictions."""
    measure, target = _measure_name(measure), _target_name(target)
    if folds < 2:
        raise ValueError("need at least 2 folds")
    rows = usable_rows(records, measure, target)
    fold_of = assign_folds([r.case_id for r in rows], folds)
    report = CVReport(measure, target, folds)
    for k in range(folds):
        train = [r for r in rows if fold_of[r.case_id] != k]
        test = [r for r in rows if fold_of[r.case_id] == k]
        model = fit(train, measure, target)
        preds = [predict(model, r.get(measure)).value for r in test]
        report.fold_rmse.append(rmse(preds, [r.get(target) for r in test]))
        report.fold_cases.append(sorted(c for c, f in fold_of.items() if f == k))
        report.fold_slices.append(len(test))
    return report
