"""Training-pair collection by dense feature matching: siamese feature
extraction from the denoiser (same weights on person and garment image),
multi-timestep ensembling, and cosine-argmax matching from person queries to
garment locations inside the garment support mask."""

from __future__ import annotations

from dataclasses import dataclass, field
import warnings

import numpy as np
import torch
import torch.nn.functional as F

from .diffusion import q_sample
from .errors import EmptyMaskError, ShapeMismatchError
from .synth import TryOnSample
from .train import ModelBundle
from .unet import CondBundle, DualUNet, ModelConfig

FEATURE_SOURCES = ("diffusion", "ref_unet", "random_init")


@dataclass(frozen=True)
class MatcherConfig:
    timesteps: tuple[int, ...] = (50, 150, 300)
    aggregate: str = "feature_mean"      # or "similarity_mean"
    seed: int = 0
    source: str = "diffusion"

    def __post_init__(self):
        if self.source not in FEATURE_SOURCES:
            raise ValueError(f"unknown feature source {self.source!r}")
        if self.aggregate not in ("feature_mean", "similarity_mean"):
            raise ValueError(f"unknown aggregation {self.aggregate!r}")


def _feature_pass(image: torch.Tensor, bundle: ModelBundle, t: int,
                  gen: torch.Generator, source: str) -> torch.Tensor:
    """One denoiser pass in self-contained mode (no points, no reference
    fusion, null garment embedding, zero mask) capturing the last decoder
    layer; returns (C, H_img, W_img) upsampled features."""
    model, codec, cfg = bundle.model, bundle.codec, bundle.model.cfg
    z0 = codec.encode(image.unsqueeze(0))
    eps = torch.randn(z0.shape, generator=gen)
    z_t = q_sample(z0, t, eps, bundle.schedule)
    if source == "ref_unet":
        _feats, h = model.ref(z_t, t, return_features=True)
    else:
        mask = torch.zeros(1, 1, *z0.shape[-2:])
        cond = CondBundle(masked_latent=z0, latent_mask=mask, garment_latent=z0,
                          garment_tokens=model.garment_encoder(None, dropped=True),
                          pose_feature=None)
        x = torch.cat([z_t, cond.masked_latent, cond.latent_mask], dim=1)
        ref_feats = {name: (torch.zeros(1, 0, model.cfg.widths[int(name[3:])]),
                            torch.zeros(1, 0, model.cfg.widths[int(name[3:])]))
                     for name in model.cfg.site_names()}
        _out, h = model.main(x, t, cond.garment_tokens, ref_feats=ref_feats,
                             return_features=True)
    up = F.interpolate(h, size=image.shape[-2:], mode="bilinear", align_corners=False)
    return up[0]


def extract_features(image: np.ndarray | torch.Tensor, bundle: ModelBundle,
                     cfg: MatcherConfig) -> torch.Tensor:
    """(3, H, W) image -> (d, H, W) unit-normalized per-pixel features,
    averaged over the configured timesteps before normalization."""
    if cfg.source == "random_init":
        if getattr(bundle, "_random_init_warned", False) is False:
            warnings.warn("random_init feature source uses untrained weights")
            bundle._random_init_warned = True
        rnd = ModelBundle(model=_seeded_random_model(bundle.model.cfg, cfg.seed),
                          codec=bundle.codec, schedule=bundle.schedule,
                          train_config=bundle.train_config, step=0, digest="random")
        return extract_features(image, rnd, MatcherConfig(
            timesteps=cfg.timesteps, aggregate=cfg.aggregate, seed=cfg.seed,
            source="diffusion"))
    img = torch.as_tensor(np.asarray(image), dtype=torch.float32)
    with torch.no_grad():
        acc = None
        sims = []
        for t in cfg.timesteps:
            gen = torch.Generator().manual_seed(hash((cfg.seed, t)) % (2 ** 31))
            feat = _feature_pass(img, bundle, t, gen, cfg.source)
            if cfg.aggregate == "feature_mean":
                acc = feat if acc is None else acc + feat
            else:
                sims.append(F.normalize(feat, dim=0, eps=1e-8))
        if cfg.aggregate == "feature_mean":
            feat = acc / len(cfg.timesteps)
            return F.normalize(feat, dim=0, eps=1e-8)
        return F.normalize(torch.stack(sims).mean(0), dim=0, eps=1e-8)


def _seeded_random_model(cfg: ModelConfig, seed: int) -> DualUNet:
    torch.manual_seed(seed)
    return DualUNet(cfg).eval()


def match_point(query: tuple[int, int], feats_person: torch.Tensor,
                feats_garment: torch.Tensor, garment_mask: np.ndarray) -> tuple[int, int]:
    """Argmax cosine similarity over garment-mask pixels; ties break in raster
    order (smallest y, then smallest x)."""
    if feats_person.shape[0] != feats_garment.shape[0]:
        raise ShapeMismatchError("feature dims differ between person and garment")
    mask = np.asarray(garment_mask).astype(bool)
    if not mask.any():
        raise EmptyMaskError("garment mask is empty")
    qx, qy = query
    qf = feats_person[:, int(qy), int(qx)]
    sim = torch.einsum("c,chw->hw", qf, feats_garment).numpy()
    sim = np.where(mask, sim, -np.inf)
    iy, ix = np.unravel_index(np.argmax(sim), sim.shape)
    return int(ix), int(iy)


def sample_queries(mask: np.ndarray, n: int, boundary_fraction: float,
                   rng: np.random.Generator) -> tuple[list[tuple[int, int]], bool]:
    """Sample query pixels from the mask: ceil(n*boundary_fraction) from the
    boundary (mask pixels with a non-mask 4-neighbor), remainder from the
    interior, without replacement where possible. Returns (points, exhausted):
    exhausted is True when fewer than n pixels were available."""
    mask = np.asarray(mask).astype(bool)
    if not mask.any():
        raise EmptyMaskError("mask is empty")
    pad = np.pad(mask, 1)
    interior_sel = pad[:-2, 1:-1] & pad[2:, 1:-1] & pad[1:-1, :-2] & pad[1:-1, 2:]
    boundary = mask & ~interior_sel
    interior = mask & interior_sel
    n_b = int(np.ceil(n * boundary_fraction))
    picks: list[tuple[int, int]] = []
    for pool, want in ((boundary, n_b), (interior, n - n_b)):
        ys, xs = np.nonzero(pool)
        take = min(want, len(ys))
        if take > 0:
            idx = rng.choice(len(ys), size=take, replace=False)
            picks += [(int(xs[i]), int(ys[i])) for i in idx]
    short = n - len(picks)
    exhausted = False
    if short > 0:
        # top up from whichever pool has leftovers, else report exhaustion
        used = set(picks)
        ys, xs = np.nonzero(mask)
        rest = [(int(x), int(y)) for x, y in zip(xs, ys) if (int(x), int(y)) not in used]
        if len(rest) <= short:
            picks += rest
            exhausted = len(picks) < n
            if exhausted:
                warnings.warn(f"mask has only {len(picks)} pixels, requested {n}")
        else:
            idx = rng.choice(len(rest), size=short, replace=False)
            picks += [rest[i] for i in idx]
    return picks, exhausted


def garment_support_mask(sample: TryOnSample) -> np.ndarray:
    """Garment-image support: union of the handle's garment-space rectangles."""
    h, w = sample.garment.shape[1:]
    yy, xx = np.mgrid[0:h, 0:w]
    out = np.zeros((h, w), dtype=np.uint8)
    for part in sample.handle.parts:
        x0, y0, x1, y1 = part.g_rect
        out |= ((xx >= x0) & (xx <= x1) & (yy >= y0) & (yy <= y1)).astype(np.uint8)
    return out


def collect_pairs(sample: TryOnSample, bundle: ModelBundle, cfg: MatcherConfig,
                  n: int, boundary_fraction: float = 0.25) -> list[dict]:
    """Produce n training pairs {g, p} by matching person-mask queries to
    garment locations (person -> garment direction)."""
    if n == 0:
        return []
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x3A7C]))
    queries, _ = sample_queries(sample.mask, n, boundary_fraction, rng)
    fp = extract_features(sample.person, bundle, cfg)
    fg = extract_features(sample.garment, bundle, cfg)
    gmask = garment_support_mask(sample)
    pairs = []
    for q in queries:
        gx, gy = match_point(q, fp, fg, gmask)
        pairs.append({"g": [float(gx), float(gy)], "p": [float(q[0]), float(q[1])]})
    return pairs


# ---------------------------------------------------------------------------
# matcher quality report (the training point-pair collection ablation)

def _rgb_patch_features(image, patch: int = 5) -> torch.Tensor:
    """Raw-RGB baseline: unit-normalized local color patches."""
    img = torch.as_tensor(np.asarray(image), dtype=torch.float32).unsqueeze(0)
    pad = patch // 2
    unfolded = F.unfold(F.pad(img, (pad,) * 4, mode="replicate"), patch)
    h, w = img.shape[-2:]
    feat = unfolded.reshape(1, -1, h, w)[0]
    return F.normalize(feat, dim=0, eps=1e-8)


def matcher_error(sample: TryOnSample, matched: list[dict]) -> float:
    """Mean distance between matched garment points and the ground-truth
    correspondence of the person queries."""
    errs = []
    for pair in matched:
        gx, gy = sample.handle.inverse(tuple(pair["p"]))
        errs.append(float(np.hypot(pair["g"][0] - gx, pair["g"][1] - gy)))
    return float(np.mean(errs))


def run_matcher_report(samples: list[TryOnSample], bundle: ModelBundle,
                       cfg: MatcherConfig, n_queries: int = 8,
                       matchers: tuple[str, ...] = ("random_uniform", "rgb_patch",
                                                    "random_init", "ref_unet", "diffusion"),
                       ) -> dict:
    """Per-class mean correspondence error for each matcher; rows mirror the
    ladder from specialized matchers up to trained diffusion features."""
    per = {m: {} for m in matchers}
    for sample in samples:
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0xBEEF,
                                                            int(sample.sample_id[1:])]))
        queries, _ = sample_queries(sample.mask, n_queries, 0.25, rng)
        gmask = garment_support_mask(sample)
        gys, gxs = np.nonzero(gmask)
        feats = {}
        for m in matchers:
            if m == "random_uniform":
                idx = rng.choice(len(gys), size=len(queries))
                matched = [{"g": [float(gxs[i]), float(gys[i])], "p": [float(q[0]), float(q[1])]}
                           for i, q in zip(idx, queries)]
            else:
                if m == "rgb_patch":
                    fp, fg = _rgb_patch_features(sample.person), _rgb_patch_features(sample.garment)
                else:
                    mcfg = MatcherConfig(timesteps=cfg.timesteps, aggregate=cfg.aggregate,
                                         seed=cfg.seed,
                                         source={"diffusion": "diffusion",
                                                 "ref_unet": "ref_unet",
                                                 "random_init": "random_init"}[m])
                    fp = extract_features(sample.person, bundle, mcfg)
                    fg = extract_features(sample.garment, bundle, mcfg)
                matched = [{"g": list(map(float, match_point(q, fp, fg, gmask))),
                            "p": [float(q[0]), float(q[1])]} for q in queries]
            per[m].setdefault(sample.garment_class, []).append(matcher_error(sample, matched))
    report = {"n_queries": n_queries, "timesteps": list(cfg.timesteps), "rows": {}}
    for m in matchers:
        report["rows"][m] = {
            "per_class": {c: float(np.mean(v)) for c, v in sorted(per[m].items())},
            "mean": float(np.mean([e for v in per[m].values() for e in v])),
        }
    return report
