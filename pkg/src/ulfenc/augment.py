"""Training-time augmentations: geometric, intensity remap, and degradations.

Three independent families, each applied with its own probability per
training sample. A resolved :class:`AugmentPlan` captures every random
parameter so the same augmentation can be replayed bit-exactly.

Geometric transforms resample all six contrast volumes and the mask through
one composed mapping (affine about the volume center, optional left-right
flip, optional non-rigid field from a 5x5x5 control grid), trilinear with
zero fill; the mask uses nearest-neighbor. Intensity remaps are monotone
piecewise-linear maps through four support values anchored at (0,0) and
(1,1). Degradations are a separable anisotropic Gaussian blur followed by
additive Gaussian noise, per contrast.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import ndimage

from ulfenc.volio import CONTRASTS, PairedSample, Volume3D

NONRIGID_GRID = 5
# the width axis of (D, H, W) volumes is the left-right direction
FLIP_AXIS = 2


@dataclass
class AugmentConfig:
    p_intensity: float = 0.2
    p_degrade: float = 0.2
    p_geometric: float = 1.0
    rotation_max_deg: float = 10.0
    shift_max_vox: float = 5.0
    shear_max: float = 0.1
    nonrigid_max_disp_vox: float = 3.0
    noise_sigma_range: tuple[float, float] = (0.0, 0.08)
    blur_sigma_range: tuple[float, float] = (0.0, 1.5)

    def validate(self) -> None:
        for name in ("p_intensity", "p_degrade", "p_geometric"):
            p = getattr(self, name)
            if not (0.0 <= p <= 1.0):
                raise ValueError(f"{name} must be in [0, 1], got {p}")
        for name in ("rotation_max_deg", "shift_max_vox", "shear_max", "nonrigid_max_disp_vox"):
            v = getattr(self, name)
            if v < 0:
                raise ValueError(f"{name} must be >= 0, got {v}")
        for name in ("noise_sigma_range", "blur_sigma_range"):
            lo, hi = getattr(self, name)
            if lo < 0 or hi < lo:
                raise ValueError(f"{name} must be an ordered non-negative range, got ({lo}, {hi})")


@dataclass
class GeometricPlan:
    affine: np.ndarray  # 3x4 [A | t] acting on voxel offsets about the volume center
    flip_lr: bool
    nonrigid: np.ndarray | None  # (G, G, G, 3) control displacements in voxels, or None

    def to_json_dict(self) -> dict:
        return {
            "affine": np.asarray(self.affine, dtype=float).tolist(),
            "flip_lr": bool(self.flip_lr),
            "nonrigid": None if self.nonrigid is None else np.asarray(self.nonrigid, dtype=float).tolist(),
        }


@dataclass
class DegradeParams:
    noise_sigma: float
    blur_sigmas: tuple[float, float, float]

    def to_json_dict(self) -> dict:
        return {"noise_sigma": self.noise_sigma, "blur_sigmas": list(self.blur_sigmas)}


@dataclass
class AugmentPlan:
    geometric: GeometricPlan | None
    intensity: dict[str, tuple[float, float, float, float]] | None  # per-contrast support values
    degrade: dict[str, DegradeParams] | None
    seed: int

    def to_json_dict(self) -> dict:
        return {
            "seed": self.seed,
            "geometric": None if self.geometric is None else self.geometric.to_json_dict(),
            "intensity": None if self.intensity is None else {c: list(s) for c, s in self.intensity.items()},
            "degrade": None if self.degrade is None else {c: p.to_json_dict() for c, p in self.degrade.items()},
        }


def _rotation_matrix(angles_deg: Sequence[float]) -> np.ndarray:
    out = np.eye(3)
    for axis, ang in enumerate(np.deg2rad(np.asarray(angles_deg, dtype=np.float64))):
        c, s = np.cos(ang), np.sin(ang)
        r = np.eye(3)
        i, j = [k for k in range(3) if k != axis]
        r[i, i], r[i, j], r[j, i], r[j, j] = c, -s, s, c
        out = r @ out
    return out


def sample_plan(cfg: AugmentConfig, rng_seed: int) -> AugmentPlan:
    """Draw a fully resolved augmentation plan; deterministic given the seed."""
    cfg.validate()
    rng = np.random.default_rng(np.random.SeedSequence([int(rng_seed)]))
    # inclusion flags first, in fixed order, so family frequencies are exact
    take_geom = rng.random() < cfg.p_geometric
    take_intensity = rng.random() < cfg.p_intensity
    take_degrade = rng.random() < cfg.p_degrade

    geometric = None
    if take_geom:
        rot = rng.uniform(-cfg.rotation_max_deg, cfg.rotation_max_deg, size=3)
        shear = rng.uniform(-cfg.shear_max, cfg.shear_max, size=3)
        shift = rng.uniform(-cfg.shift_max_vox, cfg.shift_max_vox, size=3)
        flip = bool(rng.random() < 0.5)
        nonrigid = None
        if cfg.nonrigid_max_disp_vox > 0:
            nonrigid = rng.uniform(
                -cfg.nonrigid_max_disp_vox,
                cfg.nonrigid_max_disp_vox,
                size=(NONRIGID_GRID, NONRIGID_GRID, NONRIGID_GRID, 3),
            )
        shear_mat = np.array([[1.0, shear[0], shear[1]], [0.0, 1.0, shear[2]], [0.0, 0.0, 1.0]])
        affine = np.concatenate([_rotation_matrix(rot) @ shear_mat, shift.reshape(3, 1)], axis=1)
        geometric = GeometricPlan(affine=affine, flip_lr=flip, nonrigid=nonrigid)

    intensity = None
    if take_intensity:
        intensity = {c: tuple(float(v) for v in np.sort(rng.uniform(0.0, 1.0, size=4))) for c in CONTRASTS}

    degrade = None
    if take_degrade:
        degrade = {}
        for c in CONTRASTS:
            noise = float(rng.uniform(*cfg.noise_sigma_range))
            blur = tuple(float(v) for v in rng.uniform(*cfg.blur_sigma_range, size=3))
            degrade[c] = DegradeParams(noise_sigma=noise, blur_sigmas=blur)

    return AugmentPlan(geometric=geometric, intensity=intensity, degrade=degrade, seed=int(rng_seed))


def _source_coordinates(shape, plan: GeometricPlan) -> np.ndarray:
    """Per-output-voxel source coordinates of the composed geometric transform."""
    grids = np.meshgrid(*[np.arange(n, dtype=np.float64) for n in shape], indexing="ij")
    coords = np.stack(grids)
    x = coords.copy()
    if plan.flip_lr:
        x[FLIP_AXIS] = (shape[FLIP_AXIS] - 1) - x[FLIP_AXIS]
    center = (np.asarray(shape, dtype=np.float64) - 1) / 2.0
    mat = np.asarray(plan.affine, dtype=np.float64)
    lin, t = mat[:, :3], mat[:, 3]
    src = np.tensordot(lin, x - center.reshape(3, 1, 1, 1), axes=1)
    src += (center + t).reshape(3, 1, 1, 1)
    if plan.nonrigid is not None:
        g = np.asarray(plan.nonrigid, dtype=np.float64)
        scale = [(g.shape[k] - 1) / max(shape[k] - 1, 1) for k in range(3)]
        u = np.stack([coords[k] * scale[k] for k in range(3)])
        for k in range(3):
            src[k] += ndimage.map_coordinates(g[..., k], u, order=1, mode="nearest")
    return src


def apply_geometric(sample: PairedSample, plan: AugmentPlan) -> PairedSample:
    """Resample all six contrasts and the mask through the plan's transform.

    The identical mapping is used for every channel; volumes interpolate
    trilinearly with zero fill, the mask with nearest-neighbor.
    """
    if plan.geometric is None:
        raise ValueError("plan has no geometric family")
    shape = sample.mask.shape
    src = _source_coordinates(shape, plan.geometric)

    def warp(vol: Volume3D, order: int) -> Volume3D:
        out = ndimage.map_coordinates(vol.voxels, src, order=order, mode="constant", cval=0.0)
        return vol.with_voxels(out.astype(np.float32))

    return PairedSample(
        lf={c: warp(sample.lf[c], 1) for c in CONTRASTS},
        hf={c: warp(sample.hf[c], 1) for c in CONTRASTS},
        mask=warp(sample.mask, 0),
        subject_id=sample.subject_id,
    )


# fixed input anchors of the monotone intensity remap
_INTENSITY_ANCHORS = np.array([0.0, 0.2, 0.4, 0.6, 0.8, 1.0])


def apply_intensity(vol: Volume3D, support: Sequence[float]) -> Volume3D:
    """Monotone piecewise-linear intensity remap through four support values.

    The map passes through (0, 0), (0.2, s1), (0.4, s2), (0.6, s3),
    (0.8, s4), (1, 1); support values must be sorted and in [0, 1].
    """
    s = np.asarray(support, dtype=np.float64)
    if s.shape != (4,):
        raise ValueError(f"support must hold 4 values, got shape {s.shape}")
    if np.any(s < 0) or np.any(s > 1):
        raise ValueError("support values must lie in [0, 1]")
    if np.any(np.diff(s) < 0):
        raise ValueError(f"support values must be sorted non-decreasing, got {support}")
    fp = np.concatenate([[0.0], s, [1.0]])
    out = np.interp(vol.voxels.astype(np.float64), _INTENSITY_ANCHORS, fp)
    return vol.with_voxels(out.astype(np.float32))


def apply_degrade(
    vol: Volume3D,
    noise_sigma: float,
    blur_sigmas: Sequence[float],
    rng: np.random.Generator | None = None,
) -> Volume3D:
    """Separable Gaussian blur, then additive Gaussian noise, clipped to [0, 1].

    Pass ``rng`` for reproducible noise; a fresh generator is used otherwise.
    """
    blur = tuple(float(b) for b in blur_sigmas)
    if noise_sigma < 0 or any(b < 0 for b in blur):
        raise ValueError("degradation parameters must be >= 0")
    out = vol.voxels.astype(np.float64)
    touched = False
    if any(b > 0 for b in blur):
        out = ndimage.gaussian_filter(out, sigma=blur)
        touched = True
    if noise_sigma > 0:
        if rng is None:
            rng = np.random.default_rng()
        out = out + rng.normal(0.0, noise_sigma, size=out.shape)
        touched = True
    if touched:
        out = np.clip(out, 0.0, 1.0)
    return vol.with_voxels(out.astype(np.float32))
