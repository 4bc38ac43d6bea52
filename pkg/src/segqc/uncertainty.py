"""Ensemble aggregation and slice-level uncertainty measures.

Three measures are computed per axial slice of an ensemble of co-registered
probability maps:

* type1 -- mean over consensus-foreground pixels of the cross-member mean
  probability (near 1 when the ensemble is confident);
* type2 -- mean over the same pixels of the cross-member population standard
  deviation (near 0 when confident);
* type3 -- mean Dice over all unordered pairs of member labels, each member
  thresholded at 0.5 on its own.

Consensus foreground is ``mean probability >= 0.5``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy import stats

from segqc.metrics import SliceMetrics
from segqc.volume_io import MEASURES, SliceRecord, Volume

THRESHOLD = 0.5
DEFAULT_MEMBERS = 20


@dataclass(frozen=True, eq=False)
class Ensemble:
    members: tuple[Volume, ...]
    case_id: str = "case"

    def __post_init__(self):
        members = tuple(self.members)
        if len(members) < 2:
            raise ValueError(f"an ensemble needs at least 2 members, got {len(members)}")
        first = members[0]
        for i, m in enumerate(members[1:], start=1):
            if m.dims != first.dims:
                raise ValueError(f"member {i} dims {m.dims} differ from {first.dims}")
            if m.spacing != first.spacing:
                raise ValueError(f"member {i} spacing {m.spacing} differs from {first.spacing}")
        object.__setattr__(self, "members", members)

    @property
    def size(self) -> int:
        return len(self.members)

    @property
    def dims(self):
        return self.members[0].dims

    @property
    def spacing(self):
        return self.members[0].spacing

    @cached_property
    def stack(self) -> np.ndarray:
        """Member probabilities as float64, shape (m, nz, ny, nx)."""
        s = np.stack([m.data for m in self.members]).astype(np.float64)
        if s.min() < 0 or s.max() > 1:
            raise ValueError("member probabilities must lie in [0, 1]")
        s.setflags(write=False)
        return s

    @cached_property
    def mean(self) -> np.ndarray:
        return self.stack.mean(axis=0)

    @cached_property
    def consensus(self) -> np.ndarray:
        return self.mean >= THRESHOLD

    @cached_property
    def member_labels(self) -> np.ndarray:
        return self.stack >= THRESHOLD


def aggregate(e: Ensemble) -> tuple[Volume, Volume]:
    """Voxelwise mean probability and the consensus label (mean >= 0.5)."""
    ref = e.members[0]
    mean = ref.with_data(e.mean.astype(np.float32))
    label = ref.with_data(e.consensus.astype(np.uint8))
    return mean, label


def _fg(e: Ensemble, z: int) -> np.ndarray:
    fg = e.consensus[z]
    if not fg.any():
        raise ValueError(f"slice {z} has no consensus foreground; measure undefined")
    return fg


def type1_mean_prob(e: Ensemble, z: int) -> float:
    fg = _fg(e, z)
    return float(e.mean[z][fg].sum() / fg.sum())


def type2_prob_variation(e: Ensemble, z: int) -> float:
    fg = _fg(e, z)
    std = e.stack[:, z][:, fg].std(axis=0)  # population std, ddof=0
    return float(std.sum() / fg.sum())


def pair_count(m: int) -> int:
    return m * (m - 1) // 2


def pairwise_dsc(e: Ensemble, z: int) -> np.ndarray:
    """Dice of every unordered member pair on slice ``z``, in (i, j>i) order.

    Pairs where both labels are empty score 1.0.
    """
    labels = e.member_labels[:, z].reshape(e.size, -1)
    if not labels.any():
        raise ValueError(f"every member label is empty on slice {z}; type3 undefined")
    lab = labels.astype(np.int64)
    inter = lab @ lab.T
    sizes = lab.sum(axis=1)
    denom = sizes[:, None] + sizes[None, :]
    iu, ju = np.triu_indices(e.size, k=1)
    num = 2.0 * inter[iu, ju]
    den = denom[iu, ju]
    out = np.ones(len(iu))
    nz = den > 0
    out[nz] = num[nz] / den[nz]
    return out


def type3_pairwise_dsc(e: Ensemble, z: int) -> float:
    return float(pairwise_dsc(e, z).mean())


@dataclass
class SliceUncertainty:
    slice_index: int
    n_fg: int
    type1: float | None
    type2: float | None
    type3: float | None


def slice_uncertainty(e: Ensemble) -> list[SliceUncertainty]:
    """One record per slice with consensus foreground."""
    out = []
    for z in np.nonzero(e.consensus.any(axis=(1, 2)))[0]:
        z = int(z)
        out.append(
            SliceUncertainty(
                slice_index=z,
                n_fg=int(e.consensus[z].sum()),
                type1=type1_mean_prob(e, z),
                type2=type2_prob_variation(e, z),
                type3=type3_pairwise_dsc(e, z),
            )
        )
    return out


def build_records(
    case_id: str,
    uncertainty: list[SliceUncertainty] | None = None,
    metrics: list[SliceMetrics] | None = None,
) -> list[SliceRecord]:
    """Join per-slice uncertainty and metrics into records.

    With both lists given, only slices present in both are kept (inner join).
    With one list, every slice of that list is kept and the other columns stay
    empty.
    """
    unc = {u.slice_index: u for u in uncertainty or []}
    met = {m.slice_index: m for m in metrics or []}
    if uncertainty is not None and metrics is not None:
        keys = sorted(unc.keys() & met.keys())
    else:
        keys = sorted(unc.keys() | met.keys())
    out = []
    for z in keys:
        r = SliceRecord(case_id=case_id, slice_index=z)
        if z in unc:
            u = unc[z]
            r.n_fg, r.type1, r.type2, r.type3 = u.n_fg, u.type1, u.type2, u.type3
        if z in met:
            m = met[z]
            r.dsc, r.hd_mm, r.msd_mm, r.hd95_mm = m.dsc, m.hd_mm, m.msd_mm, m.hd95_mm
        out.append(r)
    return out


# ------------------------------------------------------------ correlation

class InsufficientDataError(ValueError):
    pass


def pearson_r(x, y) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError(f"need two 1D sequences of equal length, got {x.shape} and {y.shape}")
    if len(x) < 3:
        raise InsufficientDataError(f"need at least 3 pairs, got {len(x)}")
    dx = x - x.mean()
    dy = y - y.mean()
    sxx = float(dx @ dx)
    syy = float(dy @ dy)
    if sxx == 0 or syy == 0:
        raise ValueError("zero-variance input")
    r = float(dx @ dy) / np.sqrt(sxx * syy)
    return float(np.clip(r, -1.0, 1.0))


def pearson_pvalue(r: float, n: int) -> float:
    """Two-sided p-value of r under the null of no correlation (t test, n-2 dof)."""
    if abs(r) >= 1.0:
        return 0.0
    t = r * np.sqrt((n - 2) / (1.0 - r * r))
    return float(2.0 * stats.t.sf(abs(t), n - 2))


CORRELATION_TARGETS = ("dsc", "hd")


@dataclass
class Correlation:
    measure: str
    target: str
    r: float
    n: int
    dropped: int
    p_value: float | None = None


@dataclass
class CorrelationReport:
    entries: list[Correlation] = field(default_factory=list)

    def get(self, measure: str, target: str) -> Correlation:
        for c in self.entries:
            if c.measure == measure and c.target == target:
                return c
        raise KeyError((measure, target))

    def most_correlated(self, target: str) -> str:
        """Measure with the largest |r| against ``target``; ties go to the lower type."""
        cands = [c for c in self.entries if c.target == target]
        if not cands:
            raise KeyError(target)
        return max(cands, key=lambda c: (abs(c.r), -MEASURES.index(c.measure))).measure

    def to_json(self) -> list[dict]:
        return [
            {
                "measure": c.measure,
                "target": c.target,
                "r": c.r,
                "n": c.n,
                "dropped": c.dropped,
                "p_value": c.p_value,
            }
            for c in self.entries
        ]

    @classmethod
    def from_json(cls, rows) -> "CorrelationReport":
        return cls([Correlation(**row) for row in rows])


def correlate(records: list[SliceRecord]) -> CorrelationReport:
    """Pearson r of each measure against slice DSC and HD, dropping undefined rows."""
    report = CorrelationReport()
    for measure in MEASURES:
        for target in CORRELATION_TARGETS:
            pairs = [
                (r.get(measure), r.get(target))
                for r in records
                if r.get(measure) is not None and r.get(target) is not None
            ]
            n = len(pairs)
            if n < 3:
                raise InsufficientDataError(
                    f"{measure} vs {target}: {n} usable rows, need at least 3"
                )
            x, y = zip(*pairs)
            r = pearson_r(x, y)
            report.entries.append(
                Correlation(measure, target, r, n, len(records) - n, pearson_pvalue(r, n))
            )
    return report
