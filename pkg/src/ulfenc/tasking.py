"""Task sampling and network-input assembly with channel-zeroing semantics.

The network always receives six channels: 0-2 are the low-field T1w/T2w/FLAIR
volumes, 3-5 the high-field ones. The active task decides which side is
zeroed: translation keeps only the low-field channels, the two auxiliary
tasks keep only high-field channels (contrast synthesis additionally zeroes
the target contrast's channel; restoration feeds freshly degraded copies and
trains toward the clean target).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ulfenc.augment import AugmentConfig, AugmentPlan, apply_degrade, apply_geometric, apply_intensity, sample_plan
from ulfenc.volio import CONTRASTS, PairedSample, Volume3D

TASK_KINDS = ("translate", "synthesize", "restore")
N_CONDITIONS = len(TASK_KINDS) * len(CONTRASTS)
LF_CHANNELS = slice(0, 3)
HF_CHANNELS = slice(3, 6)


@dataclass(frozen=True)
class TaskSpec:
    kind: str
    target_contrast: str

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise ValueError(f"unknown task kind {self.kind!r}; expected one of {TASK_KINDS}")
        if self.target_contrast not in CONTRASTS:
            raise ValueError(f"unknown contrast {self.target_contrast!r}; expected one of {CONTRASTS}")

    @property
    def target_index(self) -> int:
        return CONTRASTS.index(self.target_contrast)


def condition_code(task: TaskSpec) -> int:
    """Bijective (kind, target_contrast) -> id in [0, 8]."""
    return TASK_KINDS.index(task.kind) * len(CONTRASTS) + task.target_index


def task_from_code(code: int) -> TaskSpec:
    if not (0 <= code < N_CONDITIONS):
        raise ValueError(f"condition code must be in [0, {N_CONDITIONS - 1}], got {code}")
    return TaskSpec(kind=TASK_KINDS[code // 3], target_contrast=CONTRASTS[code % 3])


@dataclass
class AssembledExample:
    input: np.ndarray  # (6, D, H, W) float32
    target: np.ndarray  # (1, D, H, W) float32
    condition: int
    loss_mask: np.ndarray  # (D, H, W) float32 in {0, 1}
    task: TaskSpec
    plan: AugmentPlan
    seed: int


def sample_task(mix: tuple[float, float, float], rng_seed: int) -> TaskSpec:
    """Draw a task kind from ``mix`` and a uniform target contrast."""
    mix = tuple(float(p) for p in mix)
    if len(mix) != 3 or any(p < 0 for p in mix) or abs(sum(mix) - 1.0) > 1e-9:
        raise ValueError(f"task mix must be 3 non-negative probabilities summing to 1, got {mix}")
    rng = np.random.default_rng(np.random.SeedSequence([int(rng_seed), 7]))
    kind = TASK_KINDS[rng.choice(3, p=mix)]
    target = CONTRASTS[rng.integers(3)]
    return TaskSpec(kind=kind, target_contrast=target)


def _child_seed(seed: int, tag: int) -> int:
    return int(np.random.SeedSequence([int(seed), int(tag)]).generate_state(1)[0])


def assemble(sample: PairedSample, task: TaskSpec, aug: AugmentConfig, rng_seed: int) -> AssembledExample:
    """Build one training example: augment, select channels, zero the rest.

    Geometric augmentation is applied once to all six contrasts, the target,
    and the mask, so every channel sees the identical spatial transform. The
    intensity remap (when the plan includes it) touches only the active input
    channels; the degradation family touches only the low-field inputs of the
    translation task. Restoration always draws its own degradation from the
    configured ranges; its target stays clean. Deterministic given
    (sample, task, aug, rng_seed).
    """
    plan = sample_plan(aug, _child_seed(rng_seed, 0))
    if plan.geometric is not None:
        sample = apply_geometric(sample, plan)

    noise_rng = np.random.default_rng(np.random.SeedSequence([int(rng_seed), 1]))
    restore_rng = np.random.default_rng(np.random.SeedSequence([int(rng_seed), 2]))

    shape = sample.mask.shape
    zeros = np.zeros(shape, dtype=np.float32)

    def augment_input(vol: Volume3D, contrast: str, degrade: bool) -> np.ndarray:
        if plan.intensity is not None:
            vol = apply_intensity(vol, plan.intensity[contrast])
        if degrade and plan.degrade is not None:
            p = plan.degrade[contrast]
            vol = apply_degrade(vol, p.noise_sigma, p.blur_sigmas, rng=noise_rng)
        return vol.voxels

    if task.kind == "translate":
        lf = [augment_input(sample.lf[c], c, degrade=True) for c in CONTRASTS]
        channels = lf + [zeros, zeros, zeros]
    elif task.kind == "synthesize":
        hf = [augment_input(sample.hf[c], c, degrade=False) for c in CONTRASTS]
        hf[task.target_index] = zeros
        channels = [zeros, zeros, zeros] + hf
    else:  # restore
        hf = []
        for c in CONTRASTS:
            vol = sample.hf[c]
            if plan.intensity is not None:
                vol = apply_intensity(vol, plan.intensity[c])
            noise = float(restore_rng.uniform(*aug.noise_sigma_range))
            blur = tuple(float(v) for v in restore_rng.uniform(*aug.blur_sigma_range, size=3))
            vol = apply_degrade(vol, noise, blur, rng=noise_rng)
            hf.append(vol.voxels)
        channels = [zeros, zeros, zeros] + hf

    target = sample.hf[task.target_contrast].voxels[None].astype(np.float32)
    return AssembledExample(
        input=np.stack(channels).astype(np.float32),
        target=target,
        condition=condition_code(task),
        loss_mask=sample.mask.voxels.astype(np.float32),
        task=task,
        plan=plan,
        seed=int(rng_seed),
    )
