"""Control-point pairs, their disk-map rasterization, and the zero-initialized
embedding network that turns disk maps into per-attention-site embeddings.

A pair marks one location on the garment image and one on the person image;
both share an integer id drawn at random from 1..K so the network treats ids
as interchangeable labels rather than ordered magnitudes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn

from .errors import OutOfBoundsPointError, TooManyPointsError

MAX_POINTS = 24


@dataclass(frozen=True)
class PointPair:
    g: tuple[float, float]  # (x, y) on the garment image
    p: tuple[float, float]  # (x, y) on the person image
    id: int


@dataclass(frozen=True)
class PointPairSet:
    pairs: tuple[PointPair, ...]
    k: int = MAX_POINTS

    def __post_init__(self):
        if len(self.pairs) > self.k:
            raise TooManyPointsError(
                f"{len(self.pairs)} pairs exceeds maximum control points ({self.k})")
        ids = [p.id for p in self.pairs]
        if len(set(ids)) != len(ids):
            raise ValueError("pair ids must be distinct")
        for p in self.pairs:
            if not (1 <= p.id <= self.k):
                raise ValueError(f"id {p.id} outside 1..{self.k}")

    def __len__(self):
        return len(self.pairs)


def assign_ids(pairs, rng: np.random.Generator, k: int = MAX_POINTS) -> PointPairSet:
    """Attach distinct random ids from 1..k to raw ((gx,gy),(px,py)) pairs."""
    if len(pairs) > k:
        raise TooManyPointsError(f"{len(pairs)} pairs exceeds maximum control points ({k})")
    ids = rng.choice(np.arange(1, k + 1), size=len(pairs), replace=False)
    return PointPairSet(
        tuple(PointPair(g=(float(g[0]), float(g[1])), p=(float(p[0]), float(p[1])), id=int(i))
              for (g, p), i in zip(pairs, ids)),
        k=k,
    )


@dataclass(frozen=True)
class DiskMapPair:
    d_g: np.ndarray  # (1, H, W_g) int32, 0 = background
    d_p: np.ndarray  # (1, H, W_p) int32
    radius: float


def _paint_disks(points: list[tuple[float, float, int]], h: int, w: int,
                 r: float) -> tuple[np.ndarray, dict[int, int]]:
    """Returns the painted map plus per-id pixel counts BEFORE overlap
    resolution (a later disk may legally cover an earlier one entirely, but a
    disk that rasterizes to zero pixels means the point was clipped away)."""
    out = np.zeros((1, h, w), dtype=np.int32)
    counts: dict[int, int] = {}
    # ascending id order makes the higher id win on overlap, independent of
    # the listing order of the pairs
    for x, y, pid in sorted(points, key=lambda t: t[2]):
        n = 0
        x0, x1 = int(np.floor(x - r)), int(np.ceil(x + r))
        y0, y1 = int(np.floor(y - r)), int(np.ceil(y + r))
        for py in range(max(0, y0), min(h, y1 + 1)):
            for px in range(max(0, x0), min(w, x1 + 1)):
                if (px - x) ** 2 + (py - y) ** 2 <= r * r:
                    out[0, py, px] = pid
                    n += 1
        counts[pid] = n
    return out, counts


def rasterize(pset: PointPairSet, shape_g: tuple[int, int], shape_p: tuple[int, int],
              radius: float = 2.0) -> DiskMapPair:
    """Rasterize a pair set into integer disk maps. shape_* are (H, W). Raises
    if any point is out of bounds or if a disk would cover zero pixels."""
    hg, wg = shape_g
    hp, wp = shape_p
    for pr in pset.pairs:
        gx, gy = pr.g
        px, py = pr.p
        if not (0 <= gx < wg and 0 <= gy < hg):
            raise OutOfBoundsPointError(f"garment point {pr.g} outside {wg}x{hg} (id {pr.id})")
        if not (0 <= px < wp and 0 <= py < hp):
            raise OutOfBoundsPointError(f"person point {pr.p} outside {wp}x{hp} (id {pr.id})")
    d_g, counts_g = _paint_disks([(p.g[0], p.g[1], p.id) for p in pset.pairs], hg, wg, radius)
    d_p, counts_p = _paint_disks([(p.p[0], p.p[1], p.id) for p in pset.pairs], hp, wp, radius)
    for pr in pset.pairs:
        if counts_g[pr.id] == 0 or counts_p[pr.id] == 0:
            raise OutOfBoundsPointError(
                f"disk for id {pr.id} covers no pixels (radius {radius}); point clipped away")
    return DiskMapPair(d_g=d_g, d_p=d_p, radius=radius)


def one_hot_disks(disks: np.ndarray | torch.Tensor, k: int) -> torch.Tensor:
    """(B, 1, H, W) or (1, H, W) integer map -> (B, K+1, H, W) float one-hot."""
    t = torch.as_tensor(np.asarray(disks)) if not isinstance(disks, torch.Tensor) else disks
    if t.ndim == 3:
        t = t.unsqueeze(0)
    onehot = torch.nn.functional.one_hot(t.long().squeeze(1), num_classes=k + 1)
    return onehot.permute(0, 3, 1, 2).float()


class PointEmbeddingNet(nn.Module):
    """Stacked convolutions from a one-hot disk map down to each attention
    resolution, with one zero-initialized 1x1 head per site so a fresh network
    emits exact zeros at every site."""

    def __init__(self, k: int, sites: dict[str, tuple[int, int]], image_size: int,
                 trunk_widths: tuple[int, ...] = (32, 64, 96, 128), zero_init: bool = True):
        """sites maps a site name to (downsample_exponent, dim): the site sees
        tokens at image_size / 2**exponent and embeddings of width dim."""
        super().__init__()
        self.k = k
        self.sites = dict(sites)
        self.image_size = image_size
        exps = sorted({e for e, _ in sites.values()})
        if not exps or exps[-1] > len(trunk_widths) - 1:
            raise ValueError("trunk too shallow for the requested attention sites")
        layers = [nn.Conv2d(k + 1, trunk_widths[0], 3, padding=1), nn.SiLU()]
        for i in range(1, len(trunk_widths)):
            layers += [nn.Conv2d(trunk_widths[i - 1], trunk_widths[i], 3, stride=2, padding=1), nn.SiLU()]
        self.trunk = nn.Sequential(*layers)
        self.trunk_widths = tuple(trunk_widths)
        self.heads = nn.ModuleDict()
        for name, (exp, dim) in sites.items():
            head = nn.Conv2d(trunk_widths[exp], dim, 1)
            if zero_init:
                nn.init.zeros_(head.weight)
                nn.init.zeros_(head.bias)
            self.heads[name] = head

    def _trunk_taps(self, x: torch.Tensor) -> list[torch.Tensor]:
        taps = []
        h = x
        for layer in self.trunk:
            h = layer(h)
            if isinstance(layer, nn.SiLU):
                taps.append(h)
        return taps

    def forward(self, disks: torch.Tensor) -> dict[str, torch.Tensor]:
        """disks: (B, K+1, H, W) one-hot. Returns {site: (B, tokens, dim)}."""
        taps = self._trunk_taps(disks)
        out = {}
        for name, (exp, _dim) in self.sites.items():
            e = self.heads[name](taps[exp])
            out[name] = e.flatten(2).transpose(1, 2)
        return out


def embed_disks(net: PointEmbeddingNet, disks: DiskMapPair) -> tuple[dict, dict]:
    """Run the embedding network on both maps of a DiskMapPair. Returns
    (person_embeddings, garment_embeddings), each {site: (1, tokens, dim)}."""
    e_p = net(one_hot_disks(disks.d_p, net.k))
    e_g = net(one_hot_disks(disks.d_g, net.k))
    return e_p, e_g
