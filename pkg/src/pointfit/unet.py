"""Dual-branch denoiser: a main inpainting U-Net over a 9-channel input
(noisy latent + masked-person latent + inpaint mask) and a reference U-Net
that runs on the garment latent and exports per-site attention keys/values
for fusion into the main branch. Pose features are added to the noisy latent
channels; the garment embedding enters through cross-attention; point
embeddings shift attention queries/keys at every enabled site.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn

from .attention import fused_attention, point_attention
from .errors import ShapeMismatchError
from .points import DiskMapPair, PointEmbeddingNet, one_hot_disks


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 64
    latent_factor: int = 4
    latent_channels: int = 4
    garment_slots: int = 2
    widths: tuple[int, ...] = (64, 128, 256)
    attn_stages: tuple[int, ...] = (0, 1)  # stage 0 = latent resolution, 1 = half
    garment_tokens: int = 4
    garment_dim: int = 128
    pose_joints: int = 8
    k_points: int = 24
    disk_radius: float = 2.0
    injection_mode: str = "attention"  # or "latent_noise"
    point_trunk_width: int = 32

    def __post_init__(self):
        if self.injection_mode not in ("attention", "latent_noise"):
            raise ValueError(f"unknown injection mode {self.injection_mode!r}")
        if self.image_size % self.latent_factor:
            raise ValueError("image size must be divisible by the latent factor")
        for s in self.attn_stages:
            if not 0 <= s < len(self.widths):
                raise ValueError("attention stage outside U-Net depth")
        if self.latent_size >> max(self.attn_stages) < 1:
            raise ValueError("attention stage below 1x1 resolution")

    @property
    def latent_size(self) -> int:
        return self.image_size // self.latent_factor

    @property
    def main_in_channels(self) -> int:
        return 2 * self.latent_channels + 1

    @property
    def garment_canvas(self) -> tuple[int, int]:
        return self.image_size, self.image_size * self.garment_slots

    def site_names(self) -> list[str]:
        names = [f"enc{s}" for s in sorted(self.attn_stages)]
        names += [f"dec{s}" for s in sorted(self.attn_stages, reverse=True)]
        return names

    def site_specs(self) -> dict[str, tuple[int, int]]:
        """{site: (image-relative downsample exponent, embed dim)} for the
        point embedding network."""
        f_exp = int(round(math.log2(self.latent_factor)))
        return {name: (f_exp + int(name[3:]), self.widths[int(name[3:])])
                for name in self.site_names()}


def _gn(ch: int) -> nn.GroupNorm:
    for g in (8, 4, 2, 1):
        if ch % g == 0:
            return nn.GroupNorm(g, ch)
    return nn.GroupNorm(1, ch)


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Standard sinusoidal embedding of integer timesteps; (B,) -> (B, dim)."""
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=t.dtype) / half)
    angles = t[:, None] * freqs[None, :]
    emb = torch.cat([torch.sin(angles), torch.cos(angles)], dim=-1)
    if dim % 2:
        emb = torch.nn.functional.pad(emb, (0, 1))
    return emb


class ResBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, temb_dim: int):
        super().__init__()
        self.norm1 = _gn(in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.temb = nn.Linear(temb_dim, out_ch)
        self.norm2 = _gn(out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x, temb):
        h = self.conv1(torch.nn.functional.silu(self.norm1(x)))
        h = h + self.temb(temb)[:, :, None, None]
        h = self.conv2(torch.nn.functional.silu(self.norm2(h)))
        return self.skip(x) + h


class AttnBlock(nn.Module):
    """Self-attention with optional reference K/V fusion and point-embedding
    shifts, followed by cross-attention onto the garment embedding tokens.
    The clean (pre-shift) self keys/values are exposed for export."""

    def __init__(self, ch: int, cross_dim: int | None):
        super().__init__()
        self.norm = _gn(ch)
        self.to_q = nn.Linear(ch, ch)
        self.to_k = nn.Linear(ch, ch)
        self.to_v = nn.Linear(ch, ch)
        self.to_out = nn.Linear(ch, ch)
        self.cross_dim = cross_dim
        if cross_dim is not None:
            self.cross_norm = _gn(ch)
            self.cross_q = nn.Linear(ch, ch)
            self.cross_k = nn.Linear(cross_dim, ch)
            self.cross_v = nn.Linear(cross_dim, ch)
            self.cross_out = nn.Linear(ch, ch)

    def self_kv(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        tokens = self.norm(x).flatten(2).transpose(1, 2)
        return self.to_k(tokens), self.to_v(tokens)

    def forward(self, x, ref_kv=None, e_p=None, e_g=None, cross_tokens=None):
        b, c, h, w = x.shape
        tokens = self.norm(x).flatten(2).transpose(1, 2)
        q, k, v = self.to_q(tokens), self.to_k(tokens), self.to_v(tokens)
        k_r, v_r = ref_kv if ref_kv is not None else (None, None)
        if e_p is None:
            out = fused_attention(q, k, v, k_r, v_r)
        else:
            out = point_attention(q, k, v, k_r, v_r, e_p, e_g)
        x = x + self.to_out(out).transpose(1, 2).reshape(b, c, h, w)
        if self.cross_dim is not None and cross_tokens is not None:
            t2 = self.cross_norm(x).flatten(2).transpose(1, 2)
            q2 = self.cross_q(t2)
            out2 = fused_attention(q2, self.cross_k(cross_tokens), self.cross_v(cross_tokens))
            x = x + self.cross_out(out2).transpose(1, 2).reshape(b, c, h, w)
        return x


class _UNetCore(nn.Module):
    """Shared encoder/decoder skeleton; subclasses decide attention wiring."""

    def __init__(self, in_ch: int, out_ch: int, cfg: ModelConfig, cross_dim: int | None):
        super().__init__()
        w = cfg.widths
        self.cfg = cfg
        self.temb_dim = 4 * w[0]
        self.time_mlp = nn.Sequential(nn.Linear(w[0], self.temb_dim), nn.SiLU(),
                                      nn.Linear(self.temb_dim, self.temb_dim))
        self.stem = nn.Conv2d(in_ch, w[0], 3, padding=1)
        self.enc_res = nn.ModuleList()
        self.enc_attn = nn.ModuleDict()
        self.downs = nn.ModuleList()
        for s in range(len(w)):
            ch_in = w[s - 1] if s > 0 else w[0]
            self.enc_res.append(ResBlock(ch_in if s > 0 else w[0], w[s], self.temb_dim))
            if s in cfg.attn_stages:
                self.enc_attn[f"enc{s}"] = AttnBlock(w[s], cross_dim)
            if s + 1 < len(w):
                self.downs.append(nn.Conv2d(w[s], w[s], 3, stride=2, padding=1))
        self.mid1 = ResBlock(w[-1], w[-1], self.temb_dim)
        self.mid2 = ResBlock(w[-1], w[-1], self.temb_dim)
        self.ups = nn.ModuleList()
        self.dec_res = nn.ModuleList()
        self.dec_attn = nn.ModuleDict()
        for s in reversed(range(len(w) - 1)):
            self.ups.append(nn.Conv2d(w[s + 1], w[s], 3, padding=1))
            self.dec_res.append(ResBlock(2 * w[s], w[s], self.temb_dim))
            if s in cfg.attn_stages:
                self.dec_attn[f"dec{s}"] = AttnBlock(w[s], cross_dim)
        self.out_norm = _gn(w[0])
        self.out_conv = nn.Conv2d(w[0], out_ch, 3, padding=1)
        nn.init.zeros_(self.out_conv.weight)
        nn.init.zeros_(self.out_conv.bias)

    def time_embed(self, t, batch: int, dtype, device) -> torch.Tensor:
        tt = torch.as_tensor(t, dtype=dtype, device=device).reshape(-1)
        if tt.numel() == 1:
            tt = tt.expand(batch)
        return self.time_mlp(timestep_embedding(tt, self.cfg.widths[0]))

    def run(self, x, temb, attn_hook):
        """attn_hook(site_name, block, h) -> h handles every attention site."""
        w = self.cfg.widths
        h = self.stem(x)
        skips = []
        for s in range(len(w)):
            h = self.enc_res[s](h, temb)
            name = f"enc{s}"
            if name in self.enc_attn:
                h = attn_hook(name, self.enc_attn[name], h)
            if s + 1 < len(w):
                skips.append(h)
                h = self.downs[s](h)
        h = self.mid1(h, temb)
        h = self.mid2(h, temb)
        for i, s in enumerate(reversed(range(len(w) - 1))):
            h = torch.nn.functional.interpolate(h, scale_factor=2, mode="nearest")
            h = self.ups[i](h)
            h = self.dec_res[i](torch.cat([h, skips.pop()], dim=1), temb)
            name = f"dec{s}"
            if name in self.dec_attn:
                h = attn_hook(name, self.dec_attn[name], h)
        return h

    def head(self, h):
        return self.out_conv(torch.nn.functional.silu(self.out_norm(h)))


class MainUNet(_UNetCore):
    def __init__(self, cfg: ModelConfig):
        super().__init__(cfg.main_in_channels, cfg.latent_channels, cfg, cfg.garment_dim)

    def forward(self, x, t, garment_tokens, ref_feats=None, e_p=None, e_g=None,
                return_features: bool = False):
        if x.shape[1] != self.cfg.main_in_channels:
            raise ShapeMismatchError(
                f"main U-Net expects {self.cfg.main_in_channels} input channels, got {x.shape[1]}")
        temb = self.time_embed(t, x.shape[0], x.dtype, x.device)

        def hook(name, block, h):
            ref_kv = ref_feats.get(name) if ref_feats else None
            ep = e_p.get(name) if e_p else None
            eg = e_g.get(name) if e_g else None
            return block(h, ref_kv=ref_kv, e_p=ep, e_g=eg, cross_tokens=garment_tokens)

        h = self.run(x, temb, hook)
        out = self.head(h)
        if return_features:
            return out, h
        return out


class RefUNet(_UNetCore):
    """Reference branch: runs on the garment latent, exports clean per-site
    keys/values, and optionally shifts its own attention by the garment point
    embedding."""

    def __init__(self, cfg: ModelConfig):
        super().__init__(cfg.latent_channels, cfg.latent_channels, cfg, None)

    def forward(self, z, t, e_g=None, return_features: bool = False):
        temb = self.time_embed(t, z.shape[0], z.dtype, z.device)
        exported: dict[str, tuple[torch.Tensor, torch.Tensor]] = {}

        def hook(name, block, h):
            k, v = block.self_kv(h)
            exported[name] = (k, v)
            eg = e_g.get(name) if e_g else None
            return block(h, ref_kv=None, e_p=eg, e_g=None, cross_tokens=None)

        h = self.run(z, temb, hook)
        if return_features:
            return exported, h
        return exported


class PoseEncoder(nn.Module):
    """Tiny conv net: J-channel pose heatmaps at image resolution to a
    latent-resolution additive feature. Zero-init output layer makes an
    untrained encoder an exact no-op."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        n_down = int(round(math.log2(cfg.latent_factor)))
        layers = [nn.Conv2d(cfg.pose_joints, 32, 3, padding=1), nn.SiLU()]
        for _ in range(n_down):
            layers += [nn.Conv2d(32, 32, 3, stride=2, padding=1), nn.SiLU()]
        self.body = nn.Sequential(*layers)
        self.head = nn.Conv2d(32, cfg.latent_channels, 1)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)
        self.cfg = cfg

    def forward(self, pose_map: torch.Tensor) -> torch.Tensor:
        if pose_map.shape[-2:] != (self.cfg.image_size, self.cfg.image_size):
            raise ShapeMismatchError(
                f"pose map {tuple(pose_map.shape[-2:])} != image size {self.cfg.image_size}")
        return self.head(self.body(pose_map))


class GarmentEncoder(nn.Module):
    """Conv encoder with pooling: the (possibly width-concatenated) garment
    image to a short token sequence; holds the learned null embedding used
    for the dropped-garment condition."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        n_down = max(1, int(round(math.log2(cfg.image_size))) - 2)
        chs = [32, 64, 96, cfg.garment_dim]
        layers = []
        prev = 3
        for i in range(n_down):
            ch = chs[min(i, len(chs) - 1)]
            layers += [nn.Conv2d(prev, ch, 3, stride=2, padding=1), nn.SiLU()]
            prev = ch
        layers += [nn.Conv2d(prev, cfg.garment_dim, 1)]
        self.body = nn.Sequential(*layers)
        self.cfg = cfg
        kh = 1 if cfg.garment_tokens < 4 else 2
        self.pool_shape = (kh, cfg.garment_tokens // kh)
        self.null_embedding = nn.Parameter(torch.randn(cfg.garment_tokens, cfg.garment_dim) * 0.02)

    def forward(self, garment: torch.Tensor | None, dropped: bool = False) -> torch.Tensor:
        if dropped or garment is None:
            return self.null_embedding.unsqueeze(0)
        squeeze = garment.ndim == 3
        x = garment.unsqueeze(0) if squeeze else garment
        h = self.body(x)
        h = torch.nn.functional.adaptive_avg_pool2d(h, self.pool_shape)
        tokens = h.flatten(2).transpose(1, 2)
        return tokens.squeeze(0) if squeeze else tokens


@dataclass
class CondBundle:
    """Per-generation conditioning: everything except the noisy latent."""
    masked_latent: torch.Tensor         # (B, 4, L, L)
    latent_mask: torch.Tensor           # (B, 1, L, L) in {0,1}
    garment_latent: torch.Tensor        # (B, 4, L, slots*L)
    garment_tokens: torch.Tensor        # (B, k, d)
    pose_feature: torch.Tensor | None   # (B, 4, L, L) or None (dropped)
    e_p: dict | None = None             # per-site person point embeddings
    e_g: dict | None = None             # per-site garment point embeddings
    latent_point_p: torch.Tensor | None = None  # latent-noise injection terms
    latent_point_g: torch.Tensor | None = None


class DualUNet(nn.Module):
    """Container wiring both branches, the pose/garment encoders, and the
    point embedding network into a single denoiser."""

    def __init__(self, cfg: ModelConfig = ModelConfig()):
        super().__init__()
        self.cfg = cfg
        self.main = MainUNet(cfg)
        self.ref = RefUNet(cfg)
        self.pose_encoder = PoseEncoder(cfg)
        self.garment_encoder = GarmentEncoder(cfg)
        self.point_net = PointEmbeddingNet(
            cfg.k_points, cfg.site_specs(), cfg.image_size,
            trunk_widths=tuple(min(cfg.point_trunk_width * (2 ** i), 128)
                               for i in range(max(e for e, _ in cfg.site_specs().values()) + 1)))
        f_exp = int(round(math.log2(cfg.latent_factor)))
        self._latent_tap = f_exp
        trunk_w = self.point_net.trunk_widths[f_exp]
        self.latent_point_head = nn.Conv2d(trunk_w, cfg.latent_channels, 1)
        nn.init.zeros_(self.latent_point_head.weight)
        nn.init.zeros_(self.latent_point_head.bias)

    def embed_points(self, disks: DiskMapPair | None, batch: int = 1,
                     dtype=torch.float32) -> tuple[dict | None, dict | None, torch.Tensor | None, torch.Tensor | None]:
        """Compute per-site embeddings (attention mode) or latent injection
        maps (latent_noise mode) from a disk map pair. None disks -> all None
        (the no-injection path)."""
        if disks is None:
            return None, None, None, None
        oh_p = one_hot_disks(disks.d_p, self.cfg.k_points).to(dtype)
        oh_g = one_hot_disks(disks.d_g, self.cfg.k_points).to(dtype)
        if batch > 1:
            oh_p = oh_p.expand(batch, -1, -1, -1)
            oh_g = oh_g.expand(batch, -1, -1, -1)
        if self.cfg.injection_mode == "latent_noise":
            tap_p = self.point_net._trunk_taps(oh_p)[self._latent_tap]
            tap_g = self.point_net._trunk_taps(oh_g)[self._latent_tap]
            return None, None, self.latent_point_head(tap_p), self.latent_point_head(tap_g)
        return self.point_net(oh_p), self.point_net(oh_g), None, None

    def reference_forward(self, garment_latent: torch.Tensor, t, e_g=None,
                          latent_point_g: torch.Tensor | None = None):
        z = garment_latent
        if latent_point_g is not None:
            z = z + latent_point_g
        return self.ref(z, t, e_g=e_g)

    def denoise(self, z_t: torch.Tensor, t, cond: CondBundle,
                return_features: bool = False):
        """One full denoiser evaluation: reference pass then main pass."""
        ref_feats = self.reference_forward(cond.garment_latent, t, e_g=cond.e_g,
                                           latent_point_g=cond.latent_point_g)
        z_in = z_t
        if cond.pose_feature is not None:
            z_in = z_in + cond.pose_feature
        if cond.latent_point_p is not None:
            z_in = z_in + cond.latent_point_p
        x = torch.cat([z_in, cond.masked_latent, cond.latent_mask], dim=1)
        return self.main(x, t, cond.garment_tokens, ref_feats=ref_feats,
                         e_p=cond.e_p, e_g=cond.e_g, return_features=return_features)
