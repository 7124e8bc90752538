"""Image <-> latent codec: a small convolutional autoencoder (4 latent channels,
stride-4) pre-trained with pixel MSE and frozen for diffusion training, plus an
identity mode used by fast tests and pixel-space ablations."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import CodecNotTrainedError, DimensionError, ShapeMismatchError


@dataclass(frozen=True)
class CodecConfig:
    mode: str = "trained"  # "trained" or "identity"
    factor: int = 4
    latent_channels: int = 4
    image_channels: int = 3

    def __post_init__(self):
        if self.mode not in ("trained", "identity"):
            raise ValueError(f"unknown codec mode {self.mode!r}")
        if self.factor < 1:
            raise ValueError("factor must be >= 1")
        if self.mode == "identity" and self.factor != 1:
            raise ValueError("identity mode forces factor 1")

    @classmethod
    def identity(cls, channels: int = 3) -> "CodecConfig":
        return cls(mode="identity", factor=1, latent_channels=channels, image_channels=channels)


class LatentCodec(nn.Module):
    """encode() maps 3xHxW images in [0,1] to latents; decode() maps back,
    clamping the output to [0,1]. Pure given weights; frozen after training."""

    def __init__(self, config: CodecConfig = CodecConfig()):
        super().__init__()
        self.config = config
        self.ready = config.mode == "identity"
        if config.mode == "trained":
            if config.factor != 4:
                raise ValueError("trained codec implements factor 4")
            c = config.image_channels
            z = config.latent_channels
            self.enc = nn.Sequential(
                nn.Conv2d(c, 24, 3, padding=1), nn.SiLU(),
                nn.Conv2d(24, 64, 3, stride=2, padding=1), nn.SiLU(),
                nn.Conv2d(64, 64, 3, padding=1), nn.SiLU(),
                nn.Conv2d(64, 128, 3, stride=2, padding=1), nn.SiLU(),
                nn.Conv2d(128, 128, 3, padding=1), nn.SiLU(),
                nn.Conv2d(128, z, 1),
            )
            # pixel-shuffle upsampling keeps marker dots and pattern edges sharp
            self.dec = nn.Sequential(
                nn.Conv2d(z, 96, 3, padding=1), nn.SiLU(),
                nn.Conv2d(96, 96, 3, padding=1), nn.SiLU(),
                nn.Conv2d(96, 48 * 4, 3, padding=1), nn.PixelShuffle(2), nn.SiLU(),
                nn.Conv2d(48, 48, 3, padding=1), nn.SiLU(),
                nn.Conv2d(48, 24 * 4, 3, padding=1), nn.PixelShuffle(2), nn.SiLU(),
                nn.Conv2d(24, c, 3, padding=1),
            )

    def mark_ready(self):
        self.ready = True

    def _check_ready(self):
        if not self.ready:
            raise CodecNotTrainedError("trained-mode codec has no trained weights loaded")

    def encode(self, image: torch.Tensor) -> torch.Tensor:
        f = self.config.factor
        if image.shape[-1] % f or image.shape[-2] % f:
            raise DimensionError(f"image {tuple(image.shape[-2:])} not divisible by factor {f}")
        if self.config.mode == "identity":
            return image.clone()
        self._check_ready()
        squeeze = image.ndim == 3
        x = image.unsqueeze(0) if squeeze else image
        with torch.no_grad():
            z = self.enc(x)
        return z.squeeze(0) if squeeze else z

    def decode(self, latent: torch.Tensor) -> torch.Tensor:
        if latent.shape[-3] != self.config.latent_channels:
            raise ShapeMismatchError(
                f"latent has {latent.shape[-3]} channels, codec expects {self.config.latent_channels}")
        if self.config.mode == "identity":
            return latent.clamp(0.0, 1.0)
        self._check_ready()
        squeeze = latent.ndim == 3
        z = latent.unsqueeze(0) if squeeze else latent
        with torch.no_grad():
            x = self.dec(z).clamp(0.0, 1.0)
        return x.squeeze(0) if squeeze else x


def _detail_weight(images: torch.Tensor, gain: float = 8.0, sat_gain: float = 12.0) -> torch.Tensor:
    """Upweight pixels that deviate from their 3x3 neighborhood mean, plus a
    stronger boost on saturated colors; keeps fiducial dots and pattern edges
    from being averaged away by the codec."""
    local = F.avg_pool2d(images, 3, stride=1, padding=1)
    dev = (images - local).abs().amax(dim=1, keepdim=True)
    sat = images.amax(dim=1, keepdim=True) - images.amin(dim=1, keepdim=True)
    return 1.0 + gain * (dev > 0.05).float() + sat_gain * (sat > 0.55).float()


def train_codec(codec: LatentCodec, images: torch.Tensor, steps: int = 3000,
                batch_size: int = 32, lr: float = 1e-3, seed: int = 0,
                log_every: int = 0) -> list[float]:
    """Pre-train the autoencoder with detail-weighted pixel MSE. `images` is a
    (N, 3, H, W) tensor pool sampled with replacement each step."""
    if codec.config.mode != "trained":
        raise ValueError("only trained-mode codecs are trainable")
    gen = torch.Generator().manual_seed(seed)
    opt = torch.optim.Adam(codec.parameters(), lr=lr)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=steps, eta_min=lr * 0.05)
    losses = []
    codec.train()
    for step in range(steps):
        idx = torch.randint(0, images.shape[0], (batch_size,), generator=gen)
        batch = images[idx]
        recon = codec.dec(codec.enc(batch))
        w = _detail_weight(batch)
        loss = (w * (recon - batch) ** 2).mean()
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        sched.step()
        losses.append(float(loss.detach()))
        if log_every and step % log_every == 0:
            print(f"codec step {step} loss {losses[-1]:.5f}", flush=True)
    codec.eval()
    codec.mark_ready()
    return losses
