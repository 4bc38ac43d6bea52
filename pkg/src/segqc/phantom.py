"""Synthetic ellipsoid ground truth and noisy probability-map ensembles.

Each ensemble member is built from the GT signed distance (mm, negative
inside) plus a smooth random offset field, pushed through a logistic:

    p = 1 / (1 + exp((sd + field) / width))

where ``width = prob_softness + softness_gain * slice noise`` so members are
less confident on noisier slices.

The field is white noise on a coarse control grid (one control plane per
slice, one control point every ``NOISE_CELL_PX`` pixels in-plane), trilinearly
upsampled and scaled per slice. A ``shared_fraction`` of its variance is
common to all members of a case, so the consensus itself drifts from GT as
the noise grows, and the rest is drawn independently per member. Slices in
``bad_slice_indices`` use a finer control grid (``BAD_CELL_PX``) scaled by
``bad_slice_gain``, giving ragged boundaries.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit

from segqc.geometry import resize_to
from segqc.metrics import boundary_mask, nearest_distances
from segqc.uncertainty import Ensemble
from segqc.volume_io import Volume, read_volume, write_volume

DEFAULT_SPACING = (3.6, 0.625, 0.625)
NOISE_CELL_PX = 8
BAD_CELL_PX = 3
SOFTNESS_GAIN = 0.5  # logistic width added per mm of slice noise


@dataclass(frozen=True)
class PhantomConfig:
    dims: tuple[int, int, int] = (16, 120, 120)
    spacing: tuple[float, float, float] = DEFAULT_SPACING
    center: tuple[float, float, float] | None = None  # voxel coords; grid center if None
    radii: tuple[float, float, float] = (24.0, 18.0, 22.0)  # mm
    seed: int = 0

    def resolved_center(self) -> tuple[float, float, float]:
        if self.center is None:
            return tuple((n - 1) / 2.0 for n in self.dims)
        return tuple(float(c) for c in self.center)


@dataclass(frozen=True)
class PerturbConfig:
    members: int = 20
    boundary_noise_sigma: float = 1.0  # mm
    prob_softness: float = 1.0  # mm
    bad_slice_indices: tuple[int, ...] = ()
    bad_slice_gain: float = 6.0
    softness_gain: float = SOFTNESS_GAIN
    shared_fraction: float = 0.7
    slice_sigma: tuple[float, ...] | None = None  # per-slice override of boundary_noise_sigma
    seed: int = 0

    def __post_init__(self):
        if self.members < 2:
            raise ValueError("an ensemble needs at least 2 members")
        if self.boundary_noise_sigma < 0 or self.prob_softness < 0:
            raise ValueError("noise sigma and softness must be nonnegative")
        if not 0.0 <= self.shared_fraction <= 1.0:
            raise ValueError("shared_fraction must lie in [0, 1]")


def make_phantom(cfg: PhantomConfig = PhantomConfig()) -> Volume:
    """Binary ellipsoid: voxel is FG iff sum(((i - c) * spacing / radius)^2) <= 1."""
    if any(not r > 0 for r in cfg.radii):
        raise ValueError(f"radii must be positive, got {cfg.radii}")
    center = cfg.resolved_center()
    for n, c, r, s in zip(cfg.dims, center, cfg.radii, cfg.spacing):
        half = r / s
        if c - half < -0.5 or c + half > n - 0.5:
            raise ValueError(
                f"ellipsoid (center {center}, radii {cfg.radii} mm) exceeds grid {cfg.dims}"
            )
    axes = [
        ((np.arange(n) - c) * s / r) ** 2
        for n, c, r, s in zip(cfg.dims, center, cfg.radii, cfg.spacing)
    ]
    q = axes[0][:, None, None] + axes[1][None, :, None] + axes[2][None, None, :]
    return Volume((q <= 1.0).astype(np.uint8), cfg.spacing)


def _slice_signed_distance(mask: np.ndarray, spacing: np.ndarray) -> np.ndarray:
    far = float(np.hypot(*(np.asarray(mask.shape) * spacing)))
    half = 0.5 * float(spacing.min())
    inside = np.argwhere(mask) * spacing
    outside = np.argwhere(~mask) * spacing
    sd = np.empty(mask.shape)
    if len(inside) == 0:
        sd[:] = far
        return sd
    if len(outside) == 0:
        sd[:] = -far
        return sd
    fg_edge = np.argwhere(boundary_mask(mask)) * spacing
    bg_edge = np.argwhere(boundary_mask(~mask) & ~mask) * spacing
    sd[mask] = half - nearest_distances(inside, bg_edge)
    sd[~mask] = nearest_distances(outside, fg_edge) - half
    return sd


def signed_distance(gt: Volume) -> np.ndarray:
    """In-plane signed distance (mm) of every pixel to the GT outline of its slice.

    Measured to the pixel interface: half a pixel is taken off the center to
    center distance to the nearest pixel of the other class, so the sign
    reproduces GT exactly. Negative inside. Slices without GT are far outside.
    """
    mask = gt.data != 0
    if not mask.any():
        raise ValueError("ground truth is empty")
    spacing = np.asarray(gt.spacing[1:])
    return np.stack([_slice_signed_distance(m, spacing) for m in mask])


def _smooth_field(rng: np.random.Generator, dims, cell: int) -> np.ndarray:
    nz, ny, nx = dims
    coarse = (nz, max(2, -(-ny // cell) + 1), max(2, -(-nx // cell) + 1))
    noise = rng.standard_normal(coarse).astype(np.float32)
    return resize_to(Volume(noise), dims, "trilinear").data.astype(np.float64)


def _slice_scale(cfg: PerturbConfig, nz: int) -> np.ndarray:
    if cfg.slice_sigma is not None:
        if len(cfg.slice_sigma) != nz:
            raise ValueError(f"slice_sigma needs {nz} entries, got {len(cfg.slice_sigma)}")
        return np.asarray(cfg.slice_sigma, dtype=np.float64)
    return np.full(nz, cfg.boundary_noise_sigma, dtype=np.float64)


def make_ensemble(gt: Volume, cfg: PerturbConfig = PerturbConfig(), case_id: str = "case") -> Ensemble:
    sd = signed_distance(gt)
    dims = gt.dims
    nz = dims[0]
    scale = _slice_scale(cfg, nz)[:, None, None]
    bad = np.zeros(nz, dtype=bool)
    for z in cfg.bad_slice_indices:
        if not 0 <= z < nz:
            raise ValueError(f"bad slice {z} outside 0..{nz - 1}")
        bad[z] = True

    gain = np.where(bad, cfg.bad_slice_gain, 1.0)[:, None, None]
    softness = cfg.prob_softness + cfg.softness_gain * gain * scale
    rng = np.random.Generator(np.random.PCG64(cfg.seed))
    a_shared = np.sqrt(cfg.shared_fraction)
    a_member = np.sqrt(1.0 - cfg.shared_fraction)
    shared = _smooth_field(rng, dims, NOISE_CELL_PX)
    shared_bad = _smooth_field(rng, dims, BAD_CELL_PX)
    members = []
    for _ in range(cfg.members):
        own = _smooth_field(rng, dims, NOISE_CELL_PX)
        own_bad = _smooth_field(rng, dims, BAD_CELL_PX)
        smooth = a_shared * shared + a_member * own
        ragged = cfg.bad_slice_gain * (a_shared * shared_bad + a_member * own_bad)
        offset = scale * np.where(bad[:, None, None], ragged, smooth)
        level = sd + offset
        p = np.where(
            softness > 0,
            expit(-level / np.where(softness > 0, softness, 1.0)),
            level <= 0,
        )
        members.append(gt.with_data(p.astype(np.float32)))
    return Ensemble(tuple(members), case_id)


@dataclass
class GradedCase:
    case_id: str
    gt: Volume
    ensemble: Ensemble
    slice_sigma: tuple[float, ...] = field(default_factory=tuple)
    bad_slices: tuple[int, ...] = ()


def make_graded_dataset(
    n_cases: int = 10,
    noise_grades=(0.0, 1.0, 2.0, 4.0),
    seed: int = 0,
    members: int = 20,
    dims=(16, 120, 120),
    spacing=DEFAULT_SPACING,
    prob_softness: float = 1.0,
) -> tuple[list[Ensemble], list[Volume]]:
    """Cases whose slices draw their noise amplitude from ``noise_grades``.

    Radii and center offsets vary per case. Deterministic given ``seed``.
    """
    cases = graded_cases(n_cases, noise_grades, seed, members, dims, spacing, prob_softness)
    return [c.ensemble for c in cases], [c.gt for c in cases]


def graded_cases(
    n_cases: int = 10,
    noise_grades=(0.0, 1.0, 2.0, 4.0),
    seed: int = 0,
    members: int = 20,
    dims=(16, 120, 120),
    spacing=DEFAULT_SPACING,
    prob_softness: float = 1.0,
    bad_per_case: int = 0,
) -> list[GradedCase]:
    """As :func:`make_graded_dataset`, keeping per-case details.

    With ``bad_per_case`` > 0, every even-numbered case also gets that many
    corrupted slices, drawn from slices at least two away from either end of
    the foreground stack (fewer if the stack is too short); those slices
    use at least 1 mm of noise.
    """
    grades = np.asarray(noise_grades, dtype=np.float64)
    rng = np.random.Generator(np.random.PCG64(seed))
    out = []
    for i in range(n_cases):
        phantom = random_phantom_config(rng, dims, spacing)
        sigma = rng.choice(grades, size=dims[0])
        gt = make_phantom(phantom)
        bad = ()
        if bad_per_case and i % 2 == 0:
            zs = np.nonzero(gt.data.any(axis=(1, 2)))[0][2:-2]
            k = min(bad_per_case, len(zs))
            bad = tuple(sorted(int(z) for z in rng.choice(zs, k, replace=False)))
            sigma[list(bad)] = np.maximum(sigma[list(bad)], 1.0)
        slice_sigma = tuple(float(g) for g in sigma)
        cfg = PerturbConfig(
            members=members,
            prob_softness=prob_softness,
            slice_sigma=slice_sigma,
            bad_slice_indices=bad,
            seed=int(rng.integers(2**31)),
        )
        case_id = f"case_{i:02d}"
        out.append(GradedCase(case_id, gt, make_ensemble(gt, cfg, case_id), slice_sigma, bad))
    return out


def random_phantom_config(rng: np.random.Generator, dims, spacing) -> PhantomConfig:
    nz, ny, nx = dims
    sz, sy, sx = spacing
    # z radius spans most of the stack so apex/base slices are small
    rz = rng.uniform(0.75, 0.95) * (nz - 1) / 2.0 * sz
    ry = rng.uniform(0.22, 0.32) * ny * sy
    rx = rng.uniform(0.25, 0.36) * nx * sx
    center = (
        (nz - 1) / 2.0,
        (ny - 1) / 2.0 + rng.uniform(-3, 3),
        (nx - 1) / 2.0 + rng.uniform(-3, 3),
    )
    return PhantomConfig(dims, tuple(spacing), center, (rz, ry, rx))


# ------------------------------------------------------------ case dirs

def write_case(case_dir, ensemble: Ensemble, gt: Volume | None = None) -> None:
    """Layout: ``case_dir/gt.mhd`` (optional) and ``case_dir/member_MM.mhd``."""
    case_dir = Path(case_dir)
    case_dir.mkdir(parents=True, exist_ok=True)
    if gt is not None:
        write_volume(gt, case_dir / "gt.mhd")
    for i, m in enumerate(ensemble.members):
        write_volume(m, case_dir / f"member_{i:02d}.mhd")


def read_case(case_dir, case_id: str | None = None) -> tuple[Ensemble, Volume | None]:
    case_dir = Path(case_dir)
    paths = sorted(case_dir.glob("member_*.mhd"))
    if not paths:
        raise FileNotFoundError(f"no member_*.mhd files in {case_dir}")
    members = tuple(read_volume(p) for p in paths)
    gt_path = case_dir / "gt.mhd"
    gt = read_volume(gt_path) if gt_path.exists() else None
    return Ensemble(members, case_id or case_dir.name), gt


def case_dirs(root) -> list[Path]:
    root = Path(root)
    return sorted(p for p in root.iterdir() if p.is_dir() and any(p.glob("member_*.mhd")))
