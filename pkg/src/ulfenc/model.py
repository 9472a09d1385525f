"""Contrast-conditioned U-Net generator and conditional PatchGAN discriminator.

The generator is a four-level U-Net over a six-channel contrast stack with a
normalized coordinate grid appended at the stem. Each level runs two residual
blocks (GroupNorm, SiLU, convolutions) whose features are FiLM-modulated by a
learned task/contrast embedding; skip tensors are FiLM-modulated before
concatenation. Multi-head self-attention runs at the two lowest resolutions.
Downsampling uses strided convolutions, upsampling trilinear interpolation.
All blocks are built dimension-agnostic so the same code serves the 2D
axial-slice variant.

The discriminator is a PatchGAN over [inputs, candidate, broadcast condition
embedding]: four stride-2 4x4x4 convolutions, so each output logit covers a
/16 patch of the input.
"""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass
from pathlib import Path

import torch
import torch.nn.functional as F
from torch import nn

CHECKPOINT_VERSION = 1


class ShapeError(ValueError):
    """Raised when a spatial shape is incompatible with the network."""


def _conv(dims: int):
    return {2: nn.Conv2d, 3: nn.Conv3d}[dims]


@dataclass
class GeneratorConfig:
    level_channels: tuple[int, int, int, int] = (16, 32, 48, 64)
    blocks_per_level: int = 2
    attention_levels: tuple[int, ...] = (2, 3)
    cond_vocab: int = 9
    cond_embed_dim: int = 64
    groupnorm_groups: int = 8
    in_channels: int = 6
    out_channels: int = 1
    kernel_size: int = 3
    attention_heads: int = 4
    spatial_dims: int = 3

    @classmethod
    def full_scale(cls) -> "GeneratorConfig":
        """Full-size configuration (V-Net style 5^3 kernels); desk runs use the default."""
        return cls(level_channels=(64, 128, 192, 256), kernel_size=5)

    @property
    def downsample_factor(self) -> int:
        return 2 ** (len(self.level_channels) - 1)

    def validate(self) -> None:
        ch = self.level_channels
        if len(ch) != 4 or any(b <= a for a, b in zip(ch, ch[1:])):
            raise ValueError(f"level_channels must be 4 strictly increasing ints, got {ch}")
        for c in ch:
            if c % self.groupnorm_groups != 0:
                raise ValueError(f"groupnorm_groups={self.groupnorm_groups} must divide channel count {c}")
        for lvl in self.attention_levels:
            if not (0 <= lvl < len(ch)):
                raise ValueError(f"attention level {lvl} out of range")
            if ch[lvl] % self.attention_heads != 0:
                raise ValueError(f"attention_heads={self.attention_heads} must divide {ch[lvl]}")
        if self.kernel_size % 2 != 1:
            raise ValueError("kernel_size must be odd")
        if self.spatial_dims not in (2, 3):
            raise ValueError("spatial_dims must be 2 or 3")
        if self.blocks_per_level < 1 or self.cond_vocab < 1 or self.cond_embed_dim < 1:
            raise ValueError("blocks_per_level, cond_vocab, cond_embed_dim must be >= 1")

    def to_json_dict(self) -> dict:
        d = asdict(self)
        d["level_channels"] = list(self.level_channels)
        d["attention_levels"] = list(self.attention_levels)
        return d

    @classmethod
    def from_json_dict(cls, d) -> "GeneratorConfig":
        d = dict(d)
        d["level_channels"] = tuple(d["level_channels"])
        d["attention_levels"] = tuple(d["attention_levels"])
        return cls(**d)


@dataclass
class DiscriminatorConfig:
    level_features: tuple[int, int, int, int] = (32, 64, 128, 256)
    kernel_size: int = 4
    stride: int = 2
    cond_embed_dim: int = 8
    contrast_channels: int = 6
    cond_vocab: int = 9
    groupnorm_groups: int = 8
    spatial_dims: int = 3

    @property
    def in_channels(self) -> int:
        # contrast stack + candidate + broadcast condition embedding
        return self.contrast_channels + 1 + self.cond_embed_dim

    @property
    def downsample_factor(self) -> int:
        return self.stride ** len(self.level_features)

    def validate(self) -> None:
        if len(self.level_features) != 4:
            raise ValueError("discriminator uses 4 levels")
        if self.kernel_size != 4 or self.stride != 2:
            raise ValueError("discriminator levels are fixed at 4x4x4 kernels with stride 2")
        for c in self.level_features[1:]:
            if c % self.groupnorm_groups != 0:
                raise ValueError(f"groupnorm_groups must divide feature count {c}")
        if self.spatial_dims not in (2, 3):
            raise ValueError("spatial_dims must be 2 or 3")

    def to_json_dict(self) -> dict:
        d = asdict(self)
        d["level_features"] = list(self.level_features)
        return d

    @classmethod
    def from_json_dict(cls, d) -> "DiscriminatorConfig":
        d = dict(d)
        d["level_features"] = tuple(d["level_features"])
        return cls(**d)


def coordinate_grid(shape, dtype=torch.float32, device=None) -> torch.Tensor:
    """Per-axis coordinate channels normalized to [-1, 1].

    Returns a tensor of shape (len(shape), *shape); channel k varies linearly
    from -1 to +1 along axis k and is constant along the others. A singleton
    axis gets coordinate 0.
    """
    axes = []
    for n in shape:
        if n < 1:
            raise ValueError(f"dimensions must be positive, got {shape}")
        axes.append(
            torch.zeros(1, dtype=dtype, device=device)
            if n == 1
            else torch.linspace(-1.0, 1.0, n, dtype=dtype, device=device)
        )
    grids = torch.meshgrid(*axes, indexing="ij")
    return torch.stack(grids, dim=0)


def film_modulate(features: torch.Tensor, gamma: torch.Tensor, beta: torch.Tensor) -> torch.Tensor:
    """Per-channel affine modulation: out[c] = gamma[c] * in[c] + beta[c].

    ``gamma``/``beta`` are (B, C) and broadcast over the spatial axes.
    """
    if gamma.shape != beta.shape:
        raise ShapeError(f"gamma shape {tuple(gamma.shape)} != beta shape {tuple(beta.shape)}")
    if gamma.shape[-1] != features.shape[1]:
        raise ShapeError(
            f"modulation channels {gamma.shape[-1]} do not match features {features.shape[1]}"
        )
    view = gamma.shape + (1,) * (features.ndim - gamma.ndim)
    return features * gamma.view(view) + beta.view(view)


class FilmSite(nn.Module):
    """Maps the condition embedding to per-channel (gamma, beta) for one site.

    A two-layer MLP with zero-initialized output, so modulation starts as the
    identity (gamma=1, beta=0).
    """

    def __init__(self, embed_dim: int, channels: int, hidden: int | None = None):
        super().__init__()
        hidden = hidden or embed_dim
        self.net = nn.Sequential(nn.Linear(embed_dim, hidden), nn.SiLU(), nn.Linear(hidden, 2 * channels))
        nn.init.zeros_(self.net[-1].weight)
        nn.init.zeros_(self.net[-1].bias)
        self.channels = channels

    def params_for(self, emb: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        delta = self.net(emb)
        gamma = 1.0 + delta[:, : self.channels]
        beta = delta[:, self.channels :]
        return gamma, beta

    def forward(self, features: torch.Tensor, emb: torch.Tensor) -> torch.Tensor:
        gamma, beta = self.params_for(emb)
        return film_modulate(features, gamma, beta)


class ResBlock(nn.Module):
    """GroupNorm/SiLU/conv twice with FiLM after the first convolution."""

    def __init__(self, c_in: int, c_out: int, embed_dim: int, groups: int, kernel: int, dims: int):
        super().__init__()
        conv = _conv(dims)
        pad = kernel // 2
        self.norm1 = nn.GroupNorm(groups, c_in)
        self.conv1 = conv(c_in, c_out, kernel, padding=pad)
        self.film = FilmSite(embed_dim, c_out)
        self.norm2 = nn.GroupNorm(groups, c_out)
        self.conv2 = conv(c_out, c_out, kernel, padding=pad)
        self.shortcut = conv(c_in, c_out, 1) if c_in != c_out else nn.Identity()

    def forward(self, x: torch.Tensor, emb: torch.Tensor) -> torch.Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        h = self.film(h, emb)
        h = self.conv2(F.silu(self.norm2(h)))
        return self.shortcut(x) + h


class SelfAttention(nn.Module):
    """Pre-normalized residual multi-head self-attention over voxel tokens."""

    def __init__(self, channels: int, heads: int, groups: int, dims: int):
        super().__init__()
        conv = _conv(dims)
        self.heads = heads
        self.norm = nn.GroupNorm(groups, channels)
        self.qkv = conv(channels, 3 * channels, 1)
        self.proj = conv(channels, channels, 1)
        nn.init.zeros_(self.proj.weight)
        nn.init.zeros_(self.proj.bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, c = x.shape[:2]
        spatial = x.shape[2:]
        n = int(torch.tensor(spatial).prod())
        qkv = self.qkv(self.norm(x)).reshape(b, 3, self.heads, c // self.heads, n)
        q, k, v = qkv.unbind(dim=1)
        attn = torch.softmax(q.transpose(-1, -2) @ k / (c // self.heads) ** 0.5, dim=-1)
        out = (v @ attn.transpose(-1, -2)).reshape(b, c, *spatial)
        return x + self.proj(out)


class _Level(nn.Module):
    """Blocks (+ optional attention) at one resolution."""

    def __init__(self, c_in, c_out, cfg: GeneratorConfig, with_attention: bool):
        super().__init__()
        blocks = [ResBlock(c_in, c_out, cfg.cond_embed_dim, cfg.groupnorm_groups, cfg.kernel_size, cfg.spatial_dims)]
        for _ in range(cfg.blocks_per_level - 1):
            blocks.append(
                ResBlock(c_out, c_out, cfg.cond_embed_dim, cfg.groupnorm_groups, cfg.kernel_size, cfg.spatial_dims)
            )
        self.blocks = nn.ModuleList(blocks)
        self.attention = (
            SelfAttention(c_out, cfg.attention_heads, cfg.groupnorm_groups, cfg.spatial_dims)
            if with_attention
            else None
        )

    def forward(self, x, emb):
        for block in self.blocks:
            x = block(x, emb)
        if self.attention is not None:
            x = self.attention(x)
        return x


class Generator(nn.Module):
    def __init__(self, cfg: GeneratorConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        conv = _conv(cfg.spatial_dims)
        ch = cfg.level_channels
        k, pad = cfg.kernel_size, cfg.kernel_size // 2

        self.embedding = nn.Embedding(cfg.cond_vocab, cfg.cond_embed_dim)
        self.stem = conv(cfg.in_channels + cfg.spatial_dims, ch[0], k, padding=pad)

        self.enc_levels = nn.ModuleList(
            [_Level(ch[i], ch[i], cfg, with_attention=i in cfg.attention_levels) for i in range(4)]
        )
        self.downs = nn.ModuleList([conv(ch[i], ch[i + 1], 3, stride=2, padding=1) for i in range(3)])

        self.skip_films = nn.ModuleList([FilmSite(cfg.cond_embed_dim, ch[i]) for i in range(3)])
        self.up_convs = nn.ModuleList([conv(ch[i + 1], ch[i], 3, padding=1) for i in range(3)])
        self.dec_levels = nn.ModuleList(
            [_Level(2 * ch[i], ch[i], cfg, with_attention=i in cfg.attention_levels) for i in range(3)]
        )

        self.head_norm = nn.GroupNorm(cfg.groupnorm_groups, ch[0])
        self.head = conv(ch[0], cfg.out_channels, k, padding=pad)

    def _check_shape(self, x: torch.Tensor) -> None:
        expected_ndim = 2 + self.cfg.spatial_dims
        if x.ndim != expected_ndim:
            raise ShapeError(f"expected a {expected_ndim}D batch tensor, got ndim={x.ndim}")
        if x.shape[1] != self.cfg.in_channels:
            raise ShapeError(f"expected {self.cfg.in_channels} input channels, got {x.shape[1]}")
        factor = self.cfg.downsample_factor
        bad = [int(n) for n in x.shape[2:] if n % factor != 0 or n < factor]
        if bad:
            raise ShapeError(
                f"spatial dims {tuple(int(n) for n in x.shape[2:])} must be divisible by {factor}"
            )

    def forward(self, x: torch.Tensor, condition) -> torch.Tensor:
        """Map a (B, 6, *S) contrast stack and condition ids to a (B, 1, *S) volume."""
        self._check_shape(x)
        if not torch.is_tensor(condition):
            condition = torch.full((x.shape[0],), int(condition), dtype=torch.long, device=x.device)
        condition = condition.long().reshape(x.shape[0])
        emb = self.embedding(condition)

        coords = coordinate_grid(x.shape[2:], dtype=x.dtype, device=x.device)
        h = self.stem(torch.cat([x, coords.unsqueeze(0).expand(x.shape[0], *coords.shape)], dim=1))

        skips = []
        for i in range(4):
            h = self.enc_levels[i](h, emb)
            if i < 3:
                skips.append(h)
                h = self.downs[i](h)

        interp = "trilinear" if self.cfg.spatial_dims == 3 else "bilinear"
        for i in (2, 1, 0):
            skip = self.skip_films[i](skips[i], emb)
            h = F.interpolate(h, size=skip.shape[2:], mode=interp, align_corners=False)
            h = self.up_convs[i](h)
            h = self.dec_levels[i](torch.cat([h, skip], dim=1), emb)

        return torch.sigmoid(self.head(F.silu(self.head_norm(h))))


class Discriminator(nn.Module):
    def __init__(self, cfg: DiscriminatorConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        conv = _conv(cfg.spatial_dims)
        feats = cfg.level_features
        self.embedding = nn.Embedding(cfg.cond_vocab, cfg.cond_embed_dim)
        layers: list[nn.Module] = [
            conv(cfg.in_channels, feats[0], cfg.kernel_size, stride=cfg.stride, padding=1),
            nn.LeakyReLU(0.2),
        ]
        for c_in, c_out in zip(feats, feats[1:]):
            layers += [
                conv(c_in, c_out, cfg.kernel_size, stride=cfg.stride, padding=1),
                nn.GroupNorm(cfg.groupnorm_groups, c_out),
                nn.LeakyReLU(0.2),
            ]
        layers.append(conv(feats[-1], 1, 1))
        self.net = nn.Sequential(*layers)

    def forward(self, candidate: torch.Tensor, inputs: torch.Tensor, condition) -> torch.Tensor:
        """Patch logits for (candidate, inputs, condition); spatial size = input/16."""
        if candidate.shape[0] != inputs.shape[0] or candidate.shape[2:] != inputs.shape[2:]:
            raise ShapeError(
                f"candidate shape {tuple(candidate.shape)} does not match inputs {tuple(inputs.shape)}"
            )
        if inputs.shape[1] != self.cfg.contrast_channels or candidate.shape[1] != 1:
            raise ShapeError("expected a 6-channel input stack and a 1-channel candidate")
        factor = self.cfg.downsample_factor
        if any(n % factor != 0 or n < factor for n in candidate.shape[2:]):
            raise ShapeError(
                f"spatial dims {tuple(int(n) for n in candidate.shape[2:])} must be divisible by {factor}"
            )
        if not torch.is_tensor(condition):
            condition = torch.full((candidate.shape[0],), int(condition), dtype=torch.long, device=candidate.device)
        emb = self.embedding(condition.long().reshape(candidate.shape[0]))
        view = emb.shape + (1,) * self.cfg.spatial_dims
        cond_map = emb.view(view).expand(*emb.shape, *candidate.shape[2:])
        return self.net(torch.cat([inputs, candidate, cond_map], dim=1))


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def weights_hash(module: nn.Module) -> str:
    """SHA-256 over the name-sorted state dict; stable across runs in one environment."""
    h = hashlib.sha256()
    sd = module.state_dict()
    for name in sorted(sd):
        h.update(name.encode())
        h.update(sd[name].detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def save_checkpoint(
    path,
    generator: Generator,
    discriminator: Discriminator | None = None,
    extra: dict | None = None,
) -> Path:
    """Write a single-archive checkpoint: configs as JSON dicts + state dicts."""
    payload = {
        "version": CHECKPOINT_VERSION,
        "generator_config": generator.cfg.to_json_dict(),
        "generator_state": generator.state_dict(),
        "extra": extra or {},
    }
    if discriminator is not None:
        payload["discriminator_config"] = discriminator.cfg.to_json_dict()
        payload["discriminator_state"] = discriminator.state_dict()
    path = Path(path)
    torch.save(payload, path)
    return path


def load_checkpoint(path) -> dict:
    """Read a checkpoint; returns the raw payload with configs reconstructed."""
    payload = torch.load(Path(path), map_location="cpu", weights_only=False)
    if not isinstance(payload, dict) or "version" not in payload:
        raise ValueError(f"{path}: not a checkpoint (missing version field)")
    if payload["version"] != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {payload['version']}")
    payload["generator_config"] = GeneratorConfig.from_json_dict(payload["generator_config"])
    if "discriminator_config" in payload:
        payload["discriminator_config"] = DiscriminatorConfig.from_json_dict(payload["discriminator_config"])
    return payload


def load_generator(path) -> Generator:
    payload = load_checkpoint(path)
    gen = Generator(payload["generator_config"])
    gen.load_state_dict(payload["generator_state"])
    gen.eval()
    return gen
