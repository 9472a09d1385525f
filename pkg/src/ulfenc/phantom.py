"""Synthetic paired low-field/high-field multi-contrast brain-like phantoms.

Each subject is a smooth random tissue-class map inside a randomized head
ellipsoid. High-field volumes render the class map through per-contrast
intensity tables (clean ground truth). Low-field volumes render a perturbed
table, then get rigidly misregistered, anisotropically blurred, and noised,
with per-subject strengths drawn below the configured maxima. Everything is
deterministic given (config, subject_seed).
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from ulfenc.volio import (
    CONTRASTS,
    DatasetManifest,
    ManifestEntry,
    PairedSample,
    Volume3D,
    write_volume,
)

log = logging.getLogger(__name__)


def default_contrast_tables(n_classes: int) -> dict[str, tuple[float, ...]]:
    """Per-contrast class-intensity tables with distinct rank orderings.

    Distinct orderings make cross-contrast synthesis a non-trivial mapping
    instead of a shared monotone recoloring.
    """
    if n_classes < 2:
        raise ValueError("need at least 2 tissue classes")
    ladder = np.linspace(0.2, 0.9, n_classes)
    t1 = ladder
    t2 = ladder[::-1]
    # interleave low/high ranks for the third contrast
    order = np.argsort(np.concatenate([np.arange(0, n_classes, 2), np.arange(1, n_classes, 2)]))
    flair = ladder[order]
    return {
        "T1w": tuple(float(v) for v in t1),
        "T2w": tuple(float(v) for v in t2),
        "FLAIR": tuple(float(v) for v in flair),
    }


@dataclass
class PhantomConfig:
    shape: tuple[int, int, int] = (32, 32, 32)
    n_tissue_classes: int = 4
    contrast_tables: dict[str, tuple[float, ...]] = field(default_factory=lambda: default_contrast_tables(4))
    lf_noise_sigma: float = 0.05
    lf_blur_sigma: tuple[float, float, float] = (1.0, 0.6, 0.6)
    misreg_max_mm: float = 1.5
    lf_table_jitter: float = 0.1  # max per-class intensity shift of the LF table
    misreg_max_rot_deg: float = 1.0
    spacing_mm: tuple[float, float, float] = (1.0, 1.0, 1.0)
    seed: int = 0

    def validate(self) -> None:
        if len(self.shape) != 3 or any(n < 16 or n % 8 != 0 for n in self.shape):
            raise ValueError(f"shape dims must be >= 16 and divisible by 8, got {self.shape}")
        if self.n_tissue_classes < 2:
            raise ValueError("n_tissue_classes must be >= 2")
        for c in CONTRASTS:
            table = self.contrast_tables.get(c)
            if table is None or len(table) != self.n_tissue_classes:
                raise ValueError(f"contrast_tables[{c!r}] must list {self.n_tissue_classes} intensities")
            if any(not (0.0 <= v <= 1.0) for v in table):
                raise ValueError(f"contrast_tables[{c!r}] intensities must lie in [0, 1]")
        if self.lf_noise_sigma < 0 or any(s < 0 for s in self.lf_blur_sigma):
            raise ValueError("noise/blur sigmas must be >= 0")
        if self.misreg_max_mm < 0 or self.misreg_max_rot_deg < 0 or self.lf_table_jitter < 0:
            raise ValueError("misregistration and table jitter bounds must be >= 0")


@dataclass
class PhantomPlan:
    """Resolved per-subject randomness, kept for inspection and tests."""

    subject_seed: int
    shift_mm: tuple[float, float, float]
    rot_deg: tuple[float, float, float]
    noise_sigma: float
    blur_sigma: tuple[float, float, float]
    table_offsets: dict[str, tuple[float, ...]]

    @property
    def shift_magnitude_mm(self) -> float:
        return float(np.linalg.norm(self.shift_mm))


def _head_ellipsoid(shape, rng) -> np.ndarray:
    """Boolean head support: an ellipsoid with randomized semi-axes and center."""
    dims = np.asarray(shape, dtype=np.float64)
    semi = dims / 2.0 * rng.uniform(0.62, 0.78, size=3)
    center = (dims - 1) / 2.0 + rng.uniform(-1.5, 1.5, size=3)
    grids = np.meshgrid(*[np.arange(n, dtype=np.float64) for n in shape], indexing="ij")
    r2 = sum(((g - c) / a) ** 2 for g, c, a in zip(grids, center, semi))
    return r2 <= 1.0


def _tissue_classes(shape, head, n_classes, rng) -> np.ndarray:
    """Integer class map: 0 outside the head, 1..n_classes inside."""
    smooth = max(1.5, 0.08 * min(shape))
    fld = ndimage.gaussian_filter(rng.standard_normal(shape), sigma=smooth)
    inside = fld[head]
    # quantile thresholds give roughly equal class volumes
    qs = np.quantile(inside, np.linspace(0, 1, n_classes + 1)[1:-1])
    classes = np.zeros(shape, dtype=np.int32)
    classes[head] = 1 + np.searchsorted(qs, inside)
    return classes


def _render(classes: np.ndarray, table) -> np.ndarray:
    lut = np.concatenate([[0.0], np.asarray(table, dtype=np.float64)])
    return lut[classes].astype(np.float32)


def _rigid_resample(vol: np.ndarray, rot_deg, shift_vox) -> np.ndarray:
    """Rigid transform (rotation about center + shift), trilinear, zero fill."""
    angles = np.deg2rad(np.asarray(rot_deg, dtype=np.float64))
    rots = []
    for axis, ang in enumerate(angles):
        c, s = np.cos(ang), np.sin(ang)
        r = np.eye(3)
        i, j = [k for k in range(3) if k != axis]
        r[i, i], r[i, j], r[j, i], r[j, j] = c, -s, s, c
        rots.append(r)
    rmat = rots[0] @ rots[1] @ rots[2]
    center = (np.asarray(vol.shape, dtype=np.float64) - 1) / 2.0
    grids = np.meshgrid(*[np.arange(n, dtype=np.float64) for n in vol.shape], indexing="ij")
    out_coords = np.stack([g - c for g, c in zip(grids, center)])
    # inverse map: sample the input at R^-1 (x - t)
    inv = rmat.T
    src = np.tensordot(inv, out_coords, axes=1)
    src += (center - inv @ np.asarray(shift_vox, dtype=np.float64)).reshape(3, 1, 1, 1)
    return ndimage.map_coordinates(vol, src, order=1, mode="constant", cval=0.0).astype(np.float32)


def draw_plan(cfg: PhantomConfig, subject_seed: int) -> PhantomPlan:
    """Resolve all per-subject degradation randomness for ``subject_seed``."""
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, int(subject_seed), 1]))
    direction = rng.standard_normal(3)
    norm = np.linalg.norm(direction)
    direction = direction / norm if norm > 0 else np.array([1.0, 0.0, 0.0])
    shift_mm = direction * (cfg.misreg_max_mm * rng.uniform(0.0, 1.0))
    rot_deg = rng.uniform(-cfg.misreg_max_rot_deg, cfg.misreg_max_rot_deg, size=3)
    # per-subject strengths vary between half and full nominal
    noise_sigma = cfg.lf_noise_sigma * rng.uniform(0.5, 1.0)
    blur_sigma = tuple(s * rng.uniform(0.5, 1.0) for s in cfg.lf_blur_sigma)
    offsets = {
        c: tuple(rng.uniform(-cfg.lf_table_jitter, cfg.lf_table_jitter, size=cfg.n_tissue_classes))
        for c in CONTRASTS
    }
    return PhantomPlan(
        subject_seed=int(subject_seed),
        shift_mm=tuple(float(v) for v in shift_mm),
        rot_deg=tuple(float(v) for v in rot_deg),
        noise_sigma=float(noise_sigma),
        blur_sigma=tuple(float(v) for v in blur_sigma),
        table_offsets=offsets,
    )


def generate_sample_with_plan(cfg: PhantomConfig, subject_seed: int) -> tuple[PairedSample, PhantomPlan]:
    """Generate one paired subject plus the resolved degradation plan."""
    cfg.validate()
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, int(subject_seed), 0]))
    head = _head_ellipsoid(cfg.shape, rng)
    classes = _tissue_classes(cfg.shape, head, cfg.n_tissue_classes, rng)
    plan = draw_plan(cfg, subject_seed)
    noise_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, int(subject_seed), 2]))

    hf, lf = {}, {}
    shift_vox = np.asarray(plan.shift_mm) / np.asarray(cfg.spacing_mm)
    for c in CONTRASTS:
        hf_vox = _render(classes, cfg.contrast_tables[c])
        hf[c] = Volume3D(hf_vox, spacing=cfg.spacing_mm)

        table = np.clip(np.asarray(cfg.contrast_tables[c]) + np.asarray(plan.table_offsets[c]), 0.0, 1.0)
        lf_vox = _render(classes, table)
        if plan.shift_magnitude_mm > 0 or any(abs(a) > 0 for a in plan.rot_deg):
            lf_vox = _rigid_resample(lf_vox, plan.rot_deg, shift_vox)
        if any(s > 0 for s in plan.blur_sigma):
            lf_vox = ndimage.gaussian_filter(lf_vox.astype(np.float64), sigma=plan.blur_sigma)
        if plan.noise_sigma > 0:
            lf_vox = lf_vox + noise_rng.normal(0.0, plan.noise_sigma, size=cfg.shape)
        lf_vox = np.clip(lf_vox, 0.0, 1.0).astype(np.float32)
        lf[c] = Volume3D(lf_vox, spacing=cfg.spacing_mm)

    mask = Volume3D((classes > 0).astype(np.float32), spacing=cfg.spacing_mm)
    sample = PairedSample(lf=lf, hf=hf, mask=mask, subject_id=f"subj{int(subject_seed):03d}")
    sample.validate()
    return sample, plan


def generate_sample(cfg: PhantomConfig, subject_seed: int) -> PairedSample:
    return generate_sample_with_plan(cfg, subject_seed)[0]


def generate_dataset(cfg: PhantomConfig, n_subjects: int, out_dir) -> DatasetManifest:
    """Write ``n_subjects`` paired samples plus a manifest under ``out_dir``.

    The last two subjects form the validation split (all of them when fewer
    than three exist, with a warning).
    """
    if n_subjects < 1:
        raise ValueError("n_subjects must be >= 1")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    n_val = min(2, n_subjects)
    if n_subjects - n_val == 0:
        warnings.warn(f"dataset of {n_subjects} subject(s) has an empty train split")

    entries = []
    for i in range(n_subjects):
        sample, _ = generate_sample_with_plan(cfg, i)
        sid = sample.subject_id
        lf_paths, hf_paths = {}, {}
        for c in CONTRASTS:
            lf_paths[c] = write_volume(sample.lf[c], out_dir / f"{sid}_lf_{c}").name
            hf_paths[c] = write_volume(sample.hf[c], out_dir / f"{sid}_hf_{c}").name
        mask_path = write_volume(sample.mask, out_dir / f"{sid}_mask").name
        entries.append(
            ManifestEntry(
                subject_id=sid,
                split="val" if i >= n_subjects - n_val else "train",
                shape=sample.mask.shape,
                lf_paths=lf_paths,
                hf_paths=hf_paths,
                mask_path=mask_path,
            )
        )
        log.debug("generated %s (%d/%d)", sid, i + 1, n_subjects)

    manifest = DatasetManifest(entries=entries, root=out_dir)
    manifest.save(out_dir / "manifest.json")
    return manifest
