"""Targeted smoothing of slices whose predicted Hausdorff distance is high.

Flagged slices get their mean-probability slice blurred with a 2D Gaussian
and re-thresholded; every other slice of the label is copied unchanged.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from segqc.regression import LinearModel, predict
from segqc.uncertainty import SliceUncertainty
from segqc.volume_io import Volume

DEFAULT_HD_THRESHOLD_MM = 8.0
DEFAULT_SIGMA_PX = 5.0
DEFAULT_TRUNCATE = 4.0


@dataclass(frozen=True)
class PostprocessConfig:
    hd_threshold_mm: float = DEFAULT_HD_THRESHOLD_MM
    sigma_px: float = DEFAULT_SIGMA_PX
    truncate: float = DEFAULT_TRUNCATE
    rethreshold: float = 0.5

    def __post_init__(self):
        if not self.hd_threshold_mm > 0:
            raise ValueError("hd_threshold_mm must be positive")
        if not self.sigma_px > 0:
            raise ValueError("sigma_px must be positive")
        if not self.truncate > 0:
            raise ValueError("truncate must be positive")

    @property
    def kernel_radius(self) -> int:
        return kernel_radius(self.sigma_px, self.truncate)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d) -> "PostprocessConfig":
        return cls(**d)


def kernel_radius(sigma: float, truncate: float = DEFAULT_TRUNCATE) -> int:
    return int(math.ceil(truncate * sigma))


def gaussian_kernel1d(sigma: float, truncate: float = DEFAULT_TRUNCATE) -> np.ndarray:
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    r = kernel_radius(sigma, truncate)
    x = np.arange(-r, r + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def _convolve_axis(p: np.ndarray, k: np.ndarray, axis: int) -> np.ndarray:
    r = len(k) // 2
    pad = [(0, 0)] * p.ndim
    pad[axis] = (r, r)
    # 'symmetric' repeats the edge sample: d c b a | a b c d
    padded = np.pad(p, pad, mode="symmetric")
    n = p.shape[axis]
    out = np.zeros_like(p, dtype=np.float64)
    for i, w in enumerate(k):
        out += w * np.take(padded, np.arange(i, i + n), axis=axis)
    return out


def gaussian_smooth_slice(p, sigma_px: float = DEFAULT_SIGMA_PX, truncate: float = DEFAULT_TRUNCATE) -> np.ndarray:
    """Separable Gaussian blur of a 2D slice, reflecting at the edges."""
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 2:
        raise ValueError(f"expected a 2D slice, got shape {p.shape}")
    k = gaussian_kernel1d(sigma_px, truncate)
    return _convolve_axis(_convolve_axis(p, k, 0), k, 1)


def boundary_length_px(mask) -> int:
    """Foreground pixel faces that touch background or the image border."""
    m = np.asarray(mask) != 0
    if m.ndim != 2:
        raise ValueError(f"expected a 2D slice, got shape {m.shape}")
    padded = np.pad(m, 1, constant_values=False)
    faces = 0
    for axis in (0, 1):
        faces += int(np.count_nonzero(np.diff(padded.astype(np.int8), axis=axis)))
    return faces


@dataclass
class FlaggedSlice:
    slice_index: int
    predicted_hd_mm: float | None


def flag_slices(
    uncertainty: list[SliceUncertainty],
    hd_model: LinearModel,
    cfg: PostprocessConfig = PostprocessConfig(),
) -> list[FlaggedSlice]:
    """Slices whose raw predicted HD exceeds the threshold.

    Slices lacking a measure are flagged with an undefined prediction,
    including slices without consensus foreground that lie between
    foreground slices.
    """
    if hd_model.target != "hd_mm":
        raise ValueError(f"flagging needs an HD model, got target {hd_model.target!r}")
    by_slice = {u.slice_index: u for u in uncertainty}
    flagged = []
    if not by_slice:
        return flagged
    for z in range(min(by_slice), max(by_slice) + 1):
        u = by_slice.get(z)
        x = None if u is None else getattr(u, hd_model.measure_kind)
        if x is None:
            flagged.append(FlaggedSlice(z, None))
            continue
        raw = predict(hd_model, x).raw
        if raw > cfg.hd_threshold_mm:
            flagged.append(FlaggedSlice(z, raw))
    return flagged


@dataclass
class SliceChange:
    slice_index: int
    predicted_hd_mm: float | None
    modified_voxels: int
    boundary_before_px: int
    boundary_after_px: int


@dataclass
class PostprocessReport:
    slices: list[SliceChange] = field(default_factory=list)
    config: PostprocessConfig = PostprocessConfig()

    @property
    def flagged_indices(self) -> list[int]:
        return [s.slice_index for s in self.slices]

    def to_json(self) -> dict:
        return {
            "schema": 1,
            "config": self.config.to_dict(),
            "flagged_slices": [asdict(s) for s in self.slices],
        }


def apply_postprocess(
    mean_prob: Volume,
    label: Volume,
    flags: list[FlaggedSlice],
    cfg: PostprocessConfig = PostprocessConfig(),
) -> tuple[Volume, PostprocessReport]:
    if mean_prob.dims != label.dims:
        raise ValueError(f"probability dims {mean_prob.dims} differ from label dims {label.dims}")
    nz = label.dims[0]
    new = np.array(label.data, copy=True)
    report = PostprocessReport(config=cfg)
    for f in flags:
        z = f.slice_index
        if not 0 <= z < nz:
            raise IndexError(f"flagged slice {z} outside 0..{nz - 1}")
        smoothed = gaussian_smooth_slice(mean_prob.data[z], cfg.sigma_px, cfg.truncate)
        before = label.data[z]
        after = (smoothed >= cfg.rethreshold).astype(label.data.dtype)
        new[z] = after
        report.slices.append(
            SliceChange(
                slice_index=z,
                predicted_hd_mm=f.predicted_hd_mm,
                modified_voxels=int(np.count_nonzero(before != after)),
                boundary_before_px=boundary_length_px(before),
                boundary_after_px=boundary_length_px(after),
            )
        )
    return label.with_data(new), report
