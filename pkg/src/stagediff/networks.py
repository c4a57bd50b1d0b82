"""Conditioning and denoising networks.

CFENet is a plain segmentation UNet whose five decoder-side features guide the
denoiser. DNet shares one time-conditioned encoder and splits into two
decoders, one per prediction target (noise estimate and mask logits).
Conditional features enter the DNet encoder level by level, through dual
cross-attention at the configured levels and through zero-initialized additive
projections elsewhere.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

NUM_LEVELS = 5


@dataclass(frozen=True)
class NetworkConfig:
    input_side: int = 64
    image_channels: int = 1
    widths: Tuple[int, ...] = (32, 64, 128, 256, 256)
    dca_levels: Tuple[int, ...] = (3, 4, 5)
    num_heads: int = 4
    time_emb_dim: int = 128

    def __post_init__(self):
        if self.input_side % 2 ** (NUM_LEVELS - 1) != 0:
            raise ValueError(f"input_side must be divisible by {2 ** (NUM_LEVELS - 1)}")
        if len(self.widths) != NUM_LEVELS:
            raise ValueError(f"need {NUM_LEVELS} widths, got {len(self.widths)}")
        if any(w <= 0 for w in self.widths):
            raise ValueError("widths must be positive")
        if any(not 1 <= lv <= NUM_LEVELS for lv in self.dca_levels):
            raise ValueError(f"dca_levels must be within 1..{NUM_LEVELS}")
        if self.image_channels not in (1, 3):
            raise ValueError("image_channels must be 1 or 3")

    def to_dict(self) -> dict:
        return {
            "input_side": self.input_side,
            "image_channels": self.image_channels,
            "widths": list(self.widths),
            "dca_levels": list(self.dca_levels),
            "num_heads": self.num_heads,
            "time_emb_dim": self.time_emb_dim,
        }

    @staticmethod
    def from_dict(d: dict) -> "NetworkConfig":
        return NetworkConfig(
            input_side=int(d["input_side"]),
            image_channels=int(d["image_channels"]),
            widths=tuple(int(w) for w in d["widths"]),
            dca_levels=tuple(int(v) for v in d["dca_levels"]),
            num_heads=int(d["num_heads"]),
            time_emb_dim=int(d["time_emb_dim"]),
        )


@dataclass
class DualPrediction:
    """Paired denoiser outputs for one noisy input.

    eps_hat is the noise-branch output; x0_hat holds the mask-branch logits.
    x0_diffusion() squashes the logits into the [-1, 1] diffusion domain for
    the sampler.
    """

    eps_hat: torch.Tensor
    x0_hat: torch.Tensor

    def x0_diffusion(self) -> torch.Tensor:
        return torch.tanh(self.x0_hat)


def sinusoidal_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Standard sin/cos timestep features of width dim."""
    half = dim // 2
    freqs = torch.exp(
        -math.log(10000.0) * torch.arange(half, dtype=torch.float32, device=t.device) / (half - 1)
    )
    args = t.float()[:, None] * freqs[None, :]
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=1)
    if dim % 2 == 1:
        emb = F.pad(emb, (0, 1))
    return emb


def _norm(channels: int) -> nn.GroupNorm:
    for groups in (8, 4, 2, 1):
        if channels % groups == 0:
            return nn.GroupNorm(groups, channels)
    return nn.GroupNorm(1, channels)


def _zero_module(module: nn.Module) -> nn.Module:
    for p in module.parameters():
        nn.init.zeros_(p)
    return module


class ConvBlock(nn.Module):
    """Two 3x3 convs with GroupNorm/SiLU and a residual shortcut (no time input)."""

    def __init__(self, in_ch: int, out_ch: int):
        super().__init__()
        self.norm1 = _norm(in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.norm2 = _norm(out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class TimeResBlock(nn.Module):
    """ConvBlock variant with an additive per-channel time embedding."""

    def __init__(self, in_ch: int, out_ch: int, time_dim: int):
        super().__init__()
        self.norm1 = _norm(in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.time_proj = nn.Linear(time_dim, out_ch)
        self.norm2 = _norm(out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x: torch.Tensor, t_emb: torch.Tensor) -> torch.Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.time_proj(F.silu(t_emb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class CrossAttentionBlock(nn.Module):
    """Multi-head cross attention over flattened spatial tokens.

    The output projection is zero-initialized so the residual path is the
    identity at init.
    """

    def __init__(self, channels: int, num_heads: int):
        super().__init__()
        if channels % num_heads != 0:
            raise ValueError(f"channels {channels} not divisible by heads {num_heads}")
        self.num_heads = num_heads
        self.norm_q = _norm(channels)
        self.norm_kv = _norm(channels)
        self.to_q = nn.Conv2d(channels, channels, 1)
        self.to_k = nn.Conv2d(channels, channels, 1)
        self.to_v = nn.Conv2d(channels, channels, 1)
        self.proj = _zero_module(nn.Conv2d(channels, channels, 1))

    def attention(self, query_feat: torch.Tensor, kv_feat: torch.Tensor
                  ) -> Tuple[torch.Tensor, torch.Tensor]:
        b, c, hq, wq = query_feat.shape
        hk, wk = kv_feat.shape[-2:]
        heads = self.num_heads
        d = c // heads
        q = self.to_q(self.norm_q(query_feat)).reshape(b, heads, d, hq * wq)
        k = self.to_k(self.norm_kv(kv_feat)).reshape(b, heads, d, hk * wk)
        v = self.to_v(self.norm_kv(kv_feat)).reshape(b, heads, d, hk * wk)
        weights = torch.softmax(q.transpose(-2, -1) @ k / math.sqrt(d), dim=-1)
        out = (weights @ v.transpose(-2, -1)).transpose(-2, -1).reshape(b, c, hq, wq)
        return out, weights

    def forward(self, query_feat: torch.Tensor, kv_feat: torch.Tensor) -> torch.Tensor:
        out, _ = self.attention(query_feat, kv_feat)
        return query_feat + self.proj(out)


class DualCrossAttention(nn.Module):
    """Two cascaded cross-attention blocks with alternating queries.

    Block 1 queries with the denoising feature against the conditional
    feature; block 2 queries with the conditional feature against block 1's
    output, and its (zero-initialized) projection is added back onto the
    denoising stream, so the module is the identity at init.
    """

    def __init__(self, channels: int, num_heads: int):
        super().__init__()
        self.block1 = CrossAttentionBlock(channels, num_heads)
        self.block2 = CrossAttentionBlock(channels, num_heads)

    def forward(self, cond_feat: torch.Tensor, denoise_feat: torch.Tensor) -> torch.Tensor:
        if cond_feat.shape != denoise_feat.shape:
            raise ValueError(
                f"feature shape mismatch: cond {tuple(cond_feat.shape)} vs "
                f"denoise {tuple(denoise_feat.shape)}"
            )
        h = self.block1(denoise_feat, cond_feat)
        out2, _ = self.block2.attention(cond_feat, h)
        return h + self.block2.proj(out2)


class CFENet(nn.Module):
    """Segmentation UNet; returns five decoder-side features plus mask logits."""

    def __init__(self, config: NetworkConfig):
        super().__init__()
        self.config = config
        w = config.widths
        self.stem = nn.Conv2d(config.image_channels, w[0], 3, padding=1)
        self.enc = nn.ModuleList([ConvBlock(w[i], w[i]) for i in range(NUM_LEVELS)])
        self.down = nn.ModuleList(
            [nn.Conv2d(w[i], w[i + 1], 3, stride=2, padding=1) for i in range(NUM_LEVELS - 1)]
        )
        self.bottleneck = ConvBlock(w[-1], w[-1])
        self.up = nn.ModuleList(
            [nn.Conv2d(w[i + 1], w[i], 3, padding=1) for i in range(NUM_LEVELS - 1)]
        )
        self.dec = nn.ModuleList(
            [ConvBlock(2 * w[i], w[i]) for i in range(NUM_LEVELS - 1)]
        )
        self.seg_head = nn.Conv2d(w[0], 1, 1)

    def forward(self, image: torch.Tensor) -> Tuple[List[torch.Tensor], torch.Tensor]:
        side = image.shape[-1]
        if side % 2 ** (NUM_LEVELS - 1) != 0 or image.shape[-2] != side:
            raise ValueError(f"input must be square with side divisible by "
                             f"{2 ** (NUM_LEVELS - 1)}, got {tuple(image.shape[-2:])}")
        h = self.stem(image)
        skips = []
        for i in range(NUM_LEVELS):
            h = self.enc[i](h)
            skips.append(h)
            if i < NUM_LEVELS - 1:
                h = self.down[i](h)
        h = self.bottleneck(h)
        features = [None] * NUM_LEVELS
        features[NUM_LEVELS - 1] = h
        for i in reversed(range(NUM_LEVELS - 1)):
            h = self.up[i](F.interpolate(h, scale_factor=2, mode="nearest"))
            h = self.dec[i](torch.cat([h, skips[i]], dim=1))
            features[i] = h
        seg_logits = self.seg_head(h)
        return features, seg_logits


class _Decoder(nn.Module):
    """One DNet decoder head: upsample, fuse encoder skip, emit one channel."""

    def __init__(self, config: NetworkConfig):
        super().__init__()
        w = config.widths
        self.up = nn.ModuleList(
            [nn.Conv2d(w[i + 1], w[i], 3, padding=1) for i in range(NUM_LEVELS - 1)]
        )
        self.blocks = nn.ModuleList(
            [TimeResBlock(2 * w[i], w[i], config.time_emb_dim) for i in range(NUM_LEVELS - 1)]
        )
        self.out_norm = _norm(w[0])
        self.out_conv = _zero_module(nn.Conv2d(w[0], 1, 1))

    def forward(self, h: torch.Tensor, skips: Sequence[torch.Tensor],
                t_emb: torch.Tensor) -> torch.Tensor:
        for i in reversed(range(NUM_LEVELS - 1)):
            h = self.up[i](F.interpolate(h, scale_factor=2, mode="nearest"))
            h = self.blocks[i](torch.cat([h, skips[i]], dim=1), t_emb)
        return self.out_conv(F.silu(self.out_norm(h)))


class DNet(nn.Module):
    """Denoising network: shared conditioned encoder, two decoder heads."""

    def __init__(self, config: NetworkConfig):
        super().__init__()
        self.config = config
        w = config.widths
        dim = config.time_emb_dim
        self.time_mlp = nn.Sequential(nn.Linear(dim, 4 * dim), nn.SiLU(), nn.Linear(4 * dim, dim))
        self.stem = nn.Conv2d(1, w[0], 3, padding=1)
        self.enc = nn.ModuleList([TimeResBlock(w[i], w[i], dim) for i in range(NUM_LEVELS)])
        self.down = nn.ModuleList(
            [nn.Conv2d(w[i], w[i + 1], 3, stride=2, padding=1) for i in range(NUM_LEVELS - 1)]
        )
        self.fuse = nn.ModuleList()
        for level in range(1, NUM_LEVELS + 1):
            ch = w[level - 1]
            if level in config.dca_levels:
                self.fuse.append(DualCrossAttention(ch, config.num_heads))
            else:
                self.fuse.append(_zero_module(nn.Conv2d(ch, ch, 1)))
        self.bottleneck = TimeResBlock(w[-1], w[-1], dim)
        self.eps_decoder = _Decoder(config)
        self.mask_decoder = _Decoder(config)

    def forward(self, x_t: torch.Tensor, t: torch.Tensor,
                cond: Sequence[torch.Tensor]) -> DualPrediction:
        if len(cond) != NUM_LEVELS:
            raise ValueError(f"need {NUM_LEVELS} conditional features, got {len(cond)}")
        if cond[0].shape[-2:] != x_t.shape[-2:]:
            raise ValueError(
                f"resolution mismatch: x_t {tuple(x_t.shape[-2:])} vs "
                f"cond {tuple(cond[0].shape[-2:])}"
            )
        if not torch.is_tensor(t):
            t = torch.full((x_t.shape[0],), int(t), dtype=torch.long, device=x_t.device)
        elif t.ndim == 0:
            t = t.expand(x_t.shape[0])
        t_emb = self.time_mlp(sinusoidal_embedding(t, self.config.time_emb_dim))
        h = self.stem(x_t)
        skips = []
        for i in range(NUM_LEVELS):
            h = self.enc[i](h, t_emb)
            fuse = self.fuse[i]
            if isinstance(fuse, DualCrossAttention):
                h = fuse(cond[i], h)
            else:
                h = h + fuse(cond[i])
            skips.append(h)
            if i < NUM_LEVELS - 1:
                h = self.down[i](h)
        h = self.bottleneck(h, t_emb)
        eps_hat = self.eps_decoder(h, skips, t_emb)
        x0_hat = self.mask_decoder(h, skips, t_emb)
        return DualPrediction(eps_hat=eps_hat, x0_hat=x0_hat)


def parameter_count(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def freeze(module: nn.Module) -> nn.Module:
    """Disable gradients and switch to eval mode; used on CFENet after pre-training."""
    for p in module.parameters():
        p.requires_grad_(False)
    module.eval()
    return module


def state_checksum(module: nn.Module) -> str:
    """Order-stable digest of all parameter and buffer bytes."""
    import hashlib

    digest = hashlib.sha256()
    state = module.state_dict()
    for key in sorted(state):
        digest.update(key.encode())
        digest.update(state[key].numpy().tobytes())
    return digest.hexdigest()
