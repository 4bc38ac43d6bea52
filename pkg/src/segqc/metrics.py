"""Ground-truth based scores: Dice, Hausdorff (max and 95th percentile) and
mean surface distance, for whole volumes and for each axial slice.

Surfaces are the centers of foreground voxels that touch background through
a face (or lie on the array border). Nearest-surface distances use a KD-tree
to shortlist candidates and then recompute each candidate distance with the
same arithmetic as an all-pairs search, so results are identical to brute
force, not just close.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from segqc.geometry import EmptyMaskError
from segqc.volume_io import Volume

# candidates per query before falling back to a radius search
_KNN = 8


@dataclass
class SurfaceDistances:
    hd_mm: float
    msd_mm: float
    hd95_mm: float


@dataclass
class VolumeMetrics:
    dsc: float
    msd_mm: float | None
    hd_mm: float | None
    hd95_mm: float | None

    def to_dict(self, case_id=None) -> dict:
        d = asdict(self)
        return d if case_id is None else {"case_id": case_id, **d}


@dataclass
class SliceMetrics:
    slice_index: int
    n_fg_gt: int
    dsc: float
    hd_mm: float | None
    msd_mm: float | None
    hd95_mm: float | None


def _as_mask(m) -> np.ndarray:
    if isinstance(m, Volume):
        m = m.data
    return np.asarray(m) != 0


def _check_same_shape(a, b):
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")


def dice(a, b) -> float:
    """2|A∩B| / (|A|+|B|), with 1.0 for two empty masks."""
    a, b = _as_mask(a), _as_mask(b)
    _check_same_shape(a, b)
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / total


def boundary_mask(mask) -> np.ndarray:
    mask = _as_mask(mask)
    structure = ndimage.generate_binary_structure(mask.ndim, 1)
    interior = ndimage.binary_erosion(mask, structure=structure, border_value=0)
    return mask & ~interior


def boundary_points(mask, spacing) -> np.ndarray:
    """Physical coordinates (index * spacing, mm) of surface voxel centers, shape (n, ndim)."""
    mask = _as_mask(mask)
    spacing = np.asarray(spacing, dtype=np.float64)
    if spacing.shape != (mask.ndim,):
        raise ValueError(f"spacing needs {mask.ndim} components, got {spacing.shape}")
    if not mask.any():
        raise EmptyMaskError("mask has no foreground")
    idx = np.argwhere(boundary_mask(mask))
    return idx * spacing


def pair_distances(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Euclidean distances between matching rows of ``p`` and ``q``."""
    d = p - q
    return np.sqrt((d * d).sum(axis=-1))


def nearest_distances(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """For each point in ``src``, the distance to its nearest point in ``dst``."""
    best = np.empty(len(src))
    if len(src) == 0:
        return best
    tree = cKDTree(dst)
    todo = np.arange(len(src))
    k = _KNN
    while len(todo):
        k = min(k, len(dst))
        approx, cand = tree.query(src[todo], k=k)
        if k == 1:
            approx, cand = approx[:, None], cand[:, None]
        exact = pair_distances(src[todo][:, None, :], dst[cand]).min(axis=1)
        best[todo] = exact
        if k == len(dst):
            break
        # If the k-th candidate is within rounding of the best, a point just
        # outside the shortlist could still win; widen the search for those.
        slack = 1e-9 * np.maximum(exact, 1.0)
        todo = todo[approx[:, -1] <= exact + slack]
        k *= 4
    return best


def nearest_rank_percentile(values: np.ndarray, pct: int) -> float:
    n = len(values)
    rank = -(-pct * n // 100)  # ceil(pct/100 * n) in integer arithmetic
    return float(np.sort(values)[max(rank, 1) - 1])


def surface_distances(a, b, spacing) -> SurfaceDistances:
    """Symmetric surface distances in mm between two nonempty masks."""
    a, b = _as_mask(a), _as_mask(b)
    _check_same_shape(a, b)
    pa = boundary_points(a, spacing)
    pb = boundary_points(b, spacing)
    d_ab = nearest_distances(pa, pb)
    d_ba = nearest_distances(pb, pa)
    # sorted so the mean does not depend on point enumeration order
    both = np.sort(np.concatenate([d_ab, d_ba]))
    return SurfaceDistances(
        hd_mm=float(both[-1]),
        msd_mm=float(both.mean()),
        hd95_mm=nearest_rank_percentile(both, 95),
    )


def _metrics_pair(gt: np.ndarray, pred: np.ndarray, spacing):
    d = dice(gt, pred)
    has_gt, has_pred = bool(gt.any()), bool(pred.any())
    if not has_gt and not has_pred:
        return d, SurfaceDistances(0.0, 0.0, 0.0)
    if has_gt != has_pred:
        return 0.0, None
    return d, surface_distances(gt, pred, spacing)


def volume_metrics(gt, pred, spacing=None) -> VolumeMetrics:
    """3D scores. A one-sided empty mask gives dsc 0 and undefined distances."""
    if spacing is None:
        spacing = gt.spacing if isinstance(gt, Volume) else (1.0, 1.0, 1.0)
    gt, pred = _as_mask(gt), _as_mask(pred)
    _check_same_shape(gt, pred)
    d, sd = _metrics_pair(gt, pred, spacing)
    if sd is None:
        return VolumeMetrics(d, None, None, None)
    return VolumeMetrics(d, sd.msd_mm, sd.hd_mm, sd.hd95_mm)


def slice_metrics(gt, pred, spacing=None) -> list[SliceMetrics]:
    """2D scores for every axial slice where GT has foreground, using in-plane spacing."""
    if spacing is None:
        spacing = gt.spacing if isinstance(gt, Volume) else (1.0, 1.0, 1.0)
    gt, pred = _as_mask(gt), _as_mask(pred)
    _check_same_shape(gt, pred)
    in_plane = tuple(spacing)[1:]
    out = []
    for z in np.nonzero(gt.any(axis=(1, 2)))[0]:
        d, sd = _metrics_pair(gt[z], pred[z], in_plane)
        out.append(
            SliceMetrics(
                slice_index=int(z),
                n_fg_gt=int(gt[z].sum()),
                dsc=d,
                hd_mm=None if sd is None else sd.hd_mm,
                msd_mm=None if sd is None else sd.msd_mm,
                hd95_mm=None if sd is None else sd.hd95_mm,
            )
        )
    return out
