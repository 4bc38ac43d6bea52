"""Resampling, bounding boxes and variable-input crops.

Crops reproduce the second-stage test-time augmentation: the stage-1 label's
bounding box is widened by random per-side margins, optionally mirrored
left-right, and resized to a fixed input grid. ``uncrop_prob`` maps a
crop-space probability map back onto the source grid.

Margins come from ``numpy.random.Generator(PCG64(seed))``. For each margin
set, six integers are drawn in the order z-, z+, y-, y+, x-, x+, each with a
single ``integers(0, max + 1)`` call.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from segqc.volume_io import Volume

MODES = ("trilinear", "nearest")
DEFAULT_TARGET_DIMS = (16, 120, 120)
DEFAULT_MAX_MARGIN = (2, 16, 16)
SAMPLER_ALGORITHM = "numpy.PCG64"


def _interp_axis(arr: np.ndarray, axis: int, coords: np.ndarray, mode: str) -> np.ndarray:
    """Sample ``arr`` along ``axis`` at fractional indices, clamped to the edges."""
    n = arr.shape[axis]
    coords = np.clip(coords, 0.0, n - 1)
    if mode == "nearest":
        idx = np.floor(coords + 0.5).astype(np.intp)
        return np.take(arr, np.minimum(idx, n - 1), axis=axis)
    lo = np.floor(coords).astype(np.intp)
    hi = np.minimum(lo + 1, n - 1)
    w = coords - lo
    shape = [1] * arr.ndim
    shape[axis] = -1
    w = w.reshape(shape)
    a = np.take(arr, lo, axis=axis)
    b = np.take(arr, hi, axis=axis)
    return a * (1.0 - w) + b * w


def _sample_grid(v: Volume, coords, mode: str) -> np.ndarray:
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    src = v.data
    out = src if mode == "nearest" else src.astype(np.float64)
    for axis, c in enumerate(coords):
        if c.shape[0] == out.shape[axis] and np.array_equal(c, np.arange(c.shape[0])):
            continue
        out = _interp_axis(out, axis, c, mode)
    if mode == "trilinear":
        # convex weights; the clip only removes rounding spill
        out = np.clip(out, src.min(), src.max())
        if src.dtype.kind in "iu":
            out = np.rint(out)
        out = out.astype(src.dtype)
    return out


def _center_coords(n_out: int, step: float) -> np.ndarray:
    """Source index of each output voxel center; ``step`` is output/source voxel size."""
    return (np.arange(n_out) + 0.5) * step - 0.5


def resample(v: Volume, new_spacing, mode: str = "trilinear") -> Volume:
    """Resample onto a grid of ``new_spacing`` mm covering the same extent.

    Output voxel centers sit at half-voxel offsets from the shared grid start,
    so the output origin moves by half the voxel-size change.
    """
    new_spacing = tuple(float(s) for s in new_spacing)
    if len(new_spacing) != 3 or any(not s > 0 for s in new_spacing):
        raise ValueError(f"new_spacing must be 3 positive values, got {new_spacing}")
    dims = tuple(
        max(1, int(round(n * s / t))) for n, s, t in zip(v.dims, v.spacing, new_spacing)
    )
    coords = [_center_coords(n, t / s) for n, s, t in zip(dims, v.spacing, new_spacing)]
    data = _sample_grid(v, coords, mode)
    origin = tuple(o + 0.5 * (t - s) for o, s, t in zip(v.origin, v.spacing, new_spacing))
    if new_spacing == v.spacing:
        origin = v.origin
    return Volume(data, new_spacing, origin)


def resize_to(v: Volume, target_dims, mode: str = "trilinear") -> Volume:
    """Resample onto exactly ``target_dims`` voxels over the same extent."""
    target_dims = tuple(int(n) for n in target_dims)
    if len(target_dims) != 3 or any(n < 1 for n in target_dims):
        raise ValueError(f"target_dims must be 3 values >= 1, got {target_dims}")
    if target_dims == v.dims:
        if mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
        return v
    coords = [_center_coords(t, n / t) for n, t in zip(v.dims, target_dims)]
    data = _sample_grid(v, coords, mode)
    spacing = tuple(s * n / t for s, n, t in zip(v.spacing, v.dims, target_dims))
    origin = tuple(o + 0.5 * (sp - s) for o, s, sp in zip(v.origin, v.spacing, spacing))
    return Volume(data, spacing, origin)


# ------------------------------------------------------------------ boxes

@dataclass(frozen=True)
class BoundingBox:
    lo: tuple[int, int, int]
    hi: tuple[int, int, int]

    def __post_init__(self):
        lo = tuple(int(i) for i in self.lo)
        hi = tuple(int(i) for i in self.hi)
        if len(lo) != 3 or len(hi) != 3 or any(a > b for a, b in zip(lo, hi)):
            raise ValueError(f"invalid bounding box lo={lo} hi={hi}")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(b - a + 1 for a, b in zip(self.lo, self.hi))

    @property
    def slices(self) -> tuple[slice, slice, slice]:
        return tuple(slice(a, b + 1) for a, b in zip(self.lo, self.hi))

    def fits(self, dims) -> bool:
        return all(a >= 0 and b < n for a, b, n in zip(self.lo, self.hi, dims))

    def to_dict(self) -> dict:
        return {"lo": list(self.lo), "hi": list(self.hi)}

    @classmethod
    def from_dict(cls, d) -> "BoundingBox":
        return cls(tuple(d["lo"]), tuple(d["hi"]))


class EmptyMaskError(ValueError):
    """An operation that needs foreground was given an empty mask."""


def tight_bbox(label: Volume) -> BoundingBox:
    fg = np.nonzero(label.data)
    if fg[0].size == 0:
        raise EmptyMaskError("label has no foreground voxels")
    return BoundingBox(tuple(int(a.min()) for a in fg), tuple(int(a.max()) for a in fg))


# ------------------------------------------------------------------ crops

@dataclass(frozen=True)
class CropSpec:
    source_dims: tuple[int, int, int]
    box: BoundingBox
    margins: tuple[int, int, int, int, int, int]
    axial_flip: bool
    target_dims: tuple[int, int, int]
    seed: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "source_dims", tuple(int(n) for n in self.source_dims))
        object.__setattr__(self, "target_dims", tuple(int(n) for n in self.target_dims))
        object.__setattr__(self, "margins", tuple(int(m) for m in self.margins))
        if not self.box.fits(self.source_dims):
            raise ValueError(f"box {self.box} does not fit source dims {self.source_dims}")
        if len(self.margins) != 6 or any(m < 0 for m in self.margins):
            raise ValueError(f"margins must be 6 nonnegative counts, got {self.margins}")
        if any(n < 1 for n in self.target_dims):
            raise ValueError(f"target_dims must be >= 1, got {self.target_dims}")

    def to_dict(self) -> dict:
        return {
            "source_dims": list(self.source_dims),
            "box": self.box.to_dict(),
            "margins": list(self.margins),
            "axial_flip": self.axial_flip,
            "target_dims": list(self.target_dims),
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d) -> "CropSpec":
        return cls(
            source_dims=tuple(d["source_dims"]),
            box=BoundingBox.from_dict(d["box"]),
            margins=tuple(d["margins"]),
            axial_flip=bool(d["axial_flip"]),
            target_dims=tuple(d["target_dims"]),
            seed=d.get("seed"),
        )


@dataclass(frozen=True)
class SamplerConfig:
    n_margin_sets: int = 10
    max_margin: tuple[int, int, int] = DEFAULT_MAX_MARGIN
    with_flip: bool = True
    target_dims: tuple[int, int, int] = DEFAULT_TARGET_DIMS
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "max_margin", tuple(int(m) for m in self.max_margin))
        object.__setattr__(self, "target_dims", tuple(int(n) for n in self.target_dims))
        if self.n_margin_sets < 1:
            raise ValueError("n_margin_sets must be >= 1")
        if len(self.max_margin) != 3 or any(m < 0 for m in self.max_margin):
            raise ValueError(f"max_margin must be 3 nonnegative counts, got {self.max_margin}")

    @property
    def n_outputs(self) -> int:
        return self.n_margin_sets * (2 if self.with_flip else 1)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["max_margin"] = list(self.max_margin)
        d["target_dims"] = list(self.target_dims)
        return d

    @classmethod
    def from_dict(cls, d) -> "SamplerConfig":
        kw = dict(d)
        for key in ("max_margin", "target_dims"):
            if key in kw:
                kw[key] = tuple(kw[key])
        return cls(**kw)


def expand_box(box: BoundingBox, margins, source_dims) -> BoundingBox:
    zm, zp, ym, yp, xm, xp = margins
    lo = (box.lo[0] - zm, box.lo[1] - ym, box.lo[2] - xm)
    hi = (box.hi[0] + zp, box.hi[1] + yp, box.hi[2] + xp)
    return BoundingBox(
        tuple(max(0, a) for a in lo),
        tuple(min(n - 1, b) for b, n in zip(hi, source_dims)),
    )


def sample_crops(box: BoundingBox, source_dims, cfg: SamplerConfig) -> list[CropSpec]:
    """Draw ``cfg.n_margin_sets`` margin sets; each gives an unflipped spec and,
    with ``cfg.with_flip``, a mirrored twin right after it."""
    source_dims = tuple(int(n) for n in source_dims)
    if not box.fits(source_dims):
        raise ValueError(f"box {box} does not fit source dims {source_dims}")
    rng = np.random.Generator(np.random.PCG64(cfg.seed))
    per_side = [cfg.max_margin[axis // 2] for axis in range(6)]
    specs = []
    for _ in range(cfg.n_margin_sets):
        margins = tuple(int(rng.integers(0, m + 1)) for m in per_side)
        expanded = expand_box(box, margins, source_dims)
        for flip in (False, True) if cfg.with_flip else (False,):
            specs.append(
                CropSpec(source_dims, expanded, margins, flip, cfg.target_dims, cfg.seed)
            )
    return specs


def flip_axial(v: Volume) -> Volume:
    """Mirror every axial slice left-right (reverse x)."""
    return v.with_data(v.data[:, :, ::-1])


def _check_source(v: Volume, spec: CropSpec):
    if v.dims != spec.source_dims:
        raise ValueError(f"volume dims {v.dims} do not match spec source dims {spec.source_dims}")


def apply_crop(v: Volume, spec: CropSpec, mode: str = "trilinear") -> Volume:
    _check_source(v, spec)
    lo = spec.box.lo
    origin = tuple(o + i * s for o, i, s in zip(v.origin, lo, v.spacing))
    cropped = Volume(v.data[spec.box.slices], v.spacing, origin)
    if spec.axial_flip:
        cropped = flip_axial(cropped)
    return resize_to(cropped, spec.target_dims, mode)


def uncrop_prob(p: Volume, spec: CropSpec, spacing=None, origin=None) -> Volume:
    """Return a crop-space probability map to the source grid, zero outside the box.

    ``spacing``/``origin`` of the source grid default to values derived from
    ``p``'s geometry.
    """
    if p.dims != spec.target_dims:
        raise ValueError(f"map dims {p.dims} do not match spec target dims {spec.target_dims}")
    if spec.axial_flip:
        p = flip_axial(p)
    restored = resize_to(p, spec.box.shape, "trilinear")
    if spacing is None:
        spacing = restored.spacing
    if origin is None:
        origin = tuple(o - i * s for o, i, s in zip(restored.origin, spec.box.lo, spacing))
    out = np.zeros(spec.source_dims, dtype=np.float32)
    out[spec.box.slices] = restored.data
    return Volume(out, spacing, origin)


def crops_to_json(specs) -> dict:
    return {
        "schema": 1,
        "sampler": SAMPLER_ALGORITHM,
        "crops": [s.to_dict() for s in specs],
    }


def crops_from_json(d) -> list[CropSpec]:
    if d.get("schema") != 1:
        raise ValueError(f"unsupported crop list schema {d.get('schema')!r}")
    return [CropSpec.from_dict(c) for c in d["crops"]]
