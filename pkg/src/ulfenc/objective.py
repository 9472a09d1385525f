"""Hybrid training objective: weighted L1 + SSIM reconstruction, hinge
adversarial terms, and the R1 gradient penalty.

The reconstruction loss is w_l1 * MAE + w_ssim * (1 - SSIM) with the same SSIM
convention as :mod:`ulfenc.metrics`: uniform 11-wide window per spatial axis,
sample covariance, C1 = 1e-4 / C2 = 9e-4, averaged over interior window
centers (restricted to mask centers when a mask is given).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import torch
import torch.nn.functional as F

from ulfenc.metrics import SSIM_C1, SSIM_C2, SSIM_WINDOW


@dataclass
class LossWeights:
    w_l1: float = 0.2
    w_ssim: float = 0.8
    w_adv: float = 0.2
    r1_gamma: float = 10.0
    r1_every: int = 2  # discriminator steps between R1 applications

    def validate(self) -> None:
        if min(self.w_l1, self.w_ssim, self.w_adv, self.r1_gamma) < 0:
            raise ValueError("loss weights must be >= 0")
        if self.r1_every < 1:
            raise ValueError("r1_every must be >= 1")


def _uniform_kernel(dims: int, window: int, dtype, device) -> torch.Tensor:
    shape = (1, 1) + (window,) * dims
    return torch.full(shape, 1.0 / window**dims, dtype=dtype, device=device)


def ssim(x: torch.Tensor, y: torch.Tensor, window: int = SSIM_WINDOW, mask: torch.Tensor | None = None) -> torch.Tensor:
    """Differentiable mean SSIM over valid window centers of a (B, 1, *S) batch."""
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {tuple(x.shape)} vs {tuple(y.shape)}")
    dims = x.ndim - 2
    if dims not in (2, 3) or x.shape[1] != 1:
        raise ValueError(f"expected (B, 1, *spatial) with 2 or 3 spatial dims, got {tuple(x.shape)}")
    if any(n < window for n in x.shape[2:]):
        raise ValueError(f"spatial shape {tuple(x.shape[2:])} smaller than the {window}-wide window")

    conv = F.conv2d if dims == 2 else F.conv3d
    w = _uniform_kernel(dims, window, x.dtype, x.device)
    n = window**dims
    cov_norm = n / (n - 1)

    ux, uy = conv(x, w), conv(y, w)
    vx = cov_norm * (conv(x * x, w) - ux * ux)
    vy = cov_norm * (conv(y * y, w) - uy * uy)
    vxy = cov_norm * (conv(x * y, w) - ux * uy)
    smap = ((2 * ux * uy + SSIM_C1) * (2 * vxy + SSIM_C2)) / ((ux**2 + uy**2 + SSIM_C1) * (vx + vy + SSIM_C2))

    if mask is None:
        return smap.mean()
    pad = window // 2
    m = mask.reshape(x.shape)
    sel = m[(..., *(slice(pad, s - pad) for s in x.shape[2:]))] > 0.5
    if not bool(sel.any()):
        raise ValueError("mask contains no valid window centers")
    return smap[sel].mean()


def recon_loss(
    pred: torch.Tensor,
    target: torch.Tensor,
    mask: torch.Tensor | None,
    weights: LossWeights,
) -> tuple[torch.Tensor, dict[str, torch.Tensor]]:
    """w_l1 * MAE + w_ssim * (1 - SSIM), both restricted to the mask when given.

    Returns the weighted total plus the unweighted components for logging.
    """
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")
    if mask is None:
        l1 = (pred - target).abs().mean()
    else:
        m = mask.reshape(pred.shape)
        sel = m > 0.5
        if not bool(sel.any()):
            raise ValueError("mask selects no voxels")
        l1 = (pred - target).abs()[sel].mean()
    ssim_loss = 1.0 - ssim(pred, target, mask=mask)
    total = weights.w_l1 * l1 + weights.w_ssim * ssim_loss
    return total, {"l1": l1, "ssim_loss": ssim_loss}


def hinge_d(d_real_logits: torch.Tensor, d_fake_logits: torch.Tensor) -> torch.Tensor:
    """mean(relu(1 - D(real))) + mean(relu(1 + D(fake)))."""
    if d_real_logits.shape != d_fake_logits.shape:
        raise ValueError("real/fake logit grids must share a shape")
    return F.relu(1.0 - d_real_logits).mean() + F.relu(1.0 + d_fake_logits).mean()


def hinge_g(d_fake_logits: torch.Tensor) -> torch.Tensor:
    """-mean(D(fake))."""
    return -d_fake_logits.mean()


def r1_penalty(discriminator: Callable[[torch.Tensor], torch.Tensor], real: torch.Tensor, gamma: float) -> torch.Tensor:
    """(gamma / 2) * batch mean of || d(sum logits)/d(candidate) ||^2 at real inputs."""
    x = real.detach().clone().requires_grad_(True)
    logits = discriminator(x)
    (grads,) = torch.autograd.grad(logits.sum(), x, create_graph=True)
    per_sample = grads.reshape(grads.shape[0], -1).pow(2).sum(dim=1)
    return 0.5 * gamma * per_sample.mean()


@dataclass
class LossBreakdown:
    """Per-step scalars for the JSON-lines training log.

    ``total_g`` is recomputed from the logged component floats so the
    arithmetic identity total_g = w_l1*l1 + w_ssim*ssim_loss + w_adv*adv_g
    holds bit-exactly on the logged values.
    """

    l1: float
    ssim_loss: float
    adv_g: float
    total_g: float
    d_real: float
    d_fake: float
    r1: float
    total_d: float

    @classmethod
    def from_parts(
        cls,
        weights: LossWeights,
        l1: float,
        ssim_loss: float,
        adv_g: float = 0.0,
        d_real: float = 0.0,
        d_fake: float = 0.0,
        r1: float = 0.0,
    ) -> "LossBreakdown":
        l1, ssim_loss, adv_g = float(l1), float(ssim_loss), float(adv_g)
        d_real, d_fake, r1 = float(d_real), float(d_fake), float(r1)
        return cls(
            l1=l1,
            ssim_loss=ssim_loss,
            adv_g=adv_g,
            total_g=weights.w_l1 * l1 + weights.w_ssim * ssim_loss + weights.w_adv * adv_g,
            d_real=d_real,
            d_fake=d_fake,
            r1=r1,
            total_d=d_real + d_fake + r1,
        )

    def to_json_dict(self) -> dict:
        return {
            "l1": self.l1,
            "ssim_loss": self.ssim_loss,
            "adv_g": self.adv_g,
            "total_g": self.total_g,
            "d_real": self.d_real,
            "d_fake": self.d_fake,
            "r1": self.r1,
            "total_d": self.total_d,
        }

    def finite(self) -> bool:
        import math

        return all(math.isfinite(v) for v in vars(self).values())
