"""Training loop: augmentation, condition dropping, point-weighted loss,
deterministic batch assembly, and checkpointing.

Determinism contract: given (seed, config, dataset digest) every batch, noise
draw, and optimizer step is reproducible on a single worker; all randomness
derives from (seed, step) so resumed runs replay the same stream.
"""

from __future__ import annotations

import hashlib
import json
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .codec import CodecConfig, LatentCodec
from .diffusion import NoiseSchedule, q_sample, training_loss
from .errors import CheckpointError, ConfigError
from .points import assign_ids, one_hot_disks, rasterize
from .synth import TryOnSample, render_pose_map
from .unet import CondBundle, DualUNet, ModelConfig

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 5e-5
    batch_size: int = 64
    total_steps: int = 4000
    p_drop_pose: float = 0.3
    p_degrade_mask: float = 0.5
    p_drop_points: float = 0.1
    p_drop_garment_embed: float = 0.1
    point_loss_gain: float = 4.0      # lambda: extra weight around person points
    point_loss_radius: float = 2.0    # in latent pixels
    min_points: int = 1
    max_points: int = 8
    aug_crop: bool = True
    aug_flip: bool = True
    aug_jitter: bool = True
    zero_init: bool = True
    grad_clip: float = 1.0
    save_every: int = 1000
    seed: int = 0

    def __post_init__(self):
        for name in ("p_drop_pose", "p_degrade_mask", "p_drop_points", "p_drop_garment_embed"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name}={v} outside [0, 1]")
        if self.point_loss_gain < 0:
            raise ConfigError("point_loss_gain must be >= 0")

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# augmentation

def _flip_coords(x, width: int):
    from .synth import snap
    return snap((width - 1) - np.asarray(x, dtype=np.float64))


def flip_sample(sample: TryOnSample) -> TryOnSample:
    """Mirror both images horizontally, mirroring every stored coordinate and
    composing the correspondence handle with the flips. An involution."""
    h, w = sample.shape
    flip_p = np.array([[-1.0, 0.0, w - 1.0], [0.0, 1.0, 0.0]])
    gw = sample.garment.shape[2]
    flip_g = np.array([[-1.0, 0.0, gw - 1.0], [0.0, 1.0, 0.0]])

    def rect_map(rect):
        x0, y0, x1, y1 = rect
        return (gw - 1 - x1, y0, gw - 1 - x0, y1)

    pose = sample.pose.copy()
    pose[:, 0] = _flip_coords(pose[:, 0], w)
    landmarks = {name: (float(_flip_coords(gx, gw)), gy, float(_flip_coords(px, w)), py)
                 for name, (gx, gy, px, py) in sample.landmarks.items()}
    pool = [{"g": [float(_flip_coords(g[0], gw)), g[1]],
             "p": [float(_flip_coords(p[0], w)), p[1]]}
            for g, p in ((d["g"], d["p"]) for d in sample.point_pool)]
    markers = [(n, c, (float(_flip_coords(g[0], gw)), g[1])) for n, c, g in sample.markers]
    return replace(
        sample,
        person=np.flip(sample.person, axis=2).copy(),
        garment=np.flip(sample.garment, axis=2).copy(),
        mask=np.flip(sample.mask, axis=1).copy(),
        pose=pose, landmarks=landmarks, point_pool=pool, markers=markers,
        handle=sample.handle.compose(person_affine=flip_p, garment_affine=flip_g,
                                     garment_rect_map=rect_map),
    )


def _content_bbox(sample: TryOnSample) -> tuple[int, int, int, int]:
    ys, xs = np.nonzero(sample.mask)
    pts_x = list(xs) + [p[0] for p in sample.pose] + [lm[2] for lm in sample.landmarks.values()]
    pts_y = list(ys) + [p[1] for p in sample.pose] + [lm[3] for lm in sample.landmarks.values()]
    return (int(np.floor(min(pts_x))), int(np.floor(min(pts_y))),
            int(np.ceil(max(pts_x))), int(np.ceil(max(pts_y))))


def crop_sample(sample: TryOnSample, rng: np.random.Generator,
                min_scale: float = 0.85) -> TryOnSample:
    """Random square crop of the person image (resized back with nearest
    sampling), constrained to keep the figure and all landmarks in frame."""
    h, w = sample.shape
    bx0, by0, bx1, by1 = _content_bbox(sample)
    need = max(bx1 - bx0, by1 - by0) + 3
    cw = int(round(w * rng.uniform(min_scale, 1.0)))
    cw = max(cw, need)
    if cw >= w:
        return sample
    x_lo, x_hi = max(0, bx1 - cw + 1), min(bx0, w - cw)
    y_lo, y_hi = max(0, by1 - cw + 1), min(by0, h - cw)
    if x_lo > x_hi or y_lo > y_hi:
        return sample
    x0 = int(rng.integers(x_lo, x_hi + 1))
    y0 = int(rng.integers(y_lo, y_hi + 1))
    # nearest resample indices, pixel-center convention
    idx = np.clip(np.rint((np.arange(w) + 0.5) * cw / w - 0.5).astype(int), 0, cw - 1)
    person = sample.person[:, y0:y0 + cw, x0:x0 + cw][:, idx][:, :, idx]
    mask = sample.mask[y0:y0 + cw, x0:x0 + cw][idx][:, idx]
    r = w / cw

    def tx(x, off):
        return (np.asarray(x, dtype=np.float64) - off + 0.5) * r - 0.5

    pose = sample.pose.copy()
    pose[:, 0] = tx(pose[:, 0], x0)
    pose[:, 1] = tx(pose[:, 1], y0)
    landmarks = {name: (gx, gy, float(tx(px, x0)), float(tx(py, y0)))
                 for name, (gx, gy, px, py) in sample.landmarks.items()}
    pool = [{"g": d["g"], "p": [float(tx(d["p"][0], x0)), float(tx(d["p"][1], y0))]}
            for d in sample.point_pool]
    crop_affine = np.array([[r, 0.0, (0.5 - x0) * r - 0.5], [0.0, r, (0.5 - y0) * r - 0.5]])
    return replace(sample, person=person, mask=mask, pose=pose, landmarks=landmarks,
                   point_pool=pool, handle=sample.handle.compose(person_affine=crop_affine))


def jitter_sample(sample: TryOnSample, rng: np.random.Generator) -> TryOnSample:
    """Identical per-channel color jitter on person and garment images."""
    scale = rng.uniform(0.92, 1.08, size=3).astype(np.float32)[:, None, None]
    shift = rng.uniform(-0.04, 0.04, size=3).astype(np.float32)[:, None, None]
    return replace(sample,
                   person=np.clip(sample.person * scale + shift, 0.0, 1.0),
                   garment=np.clip(sample.garment * scale + shift, 0.0, 1.0))


def augment(sample: TryOnSample, rng: np.random.Generator, cfg: TrainConfig) -> TryOnSample:
    if cfg.aug_flip and rng.random() < 0.5:
        sample = flip_sample(sample)
    if cfg.aug_crop:
        sample = crop_sample(sample, rng)
    if cfg.aug_jitter:
        sample = jitter_sample(sample, rng)
    return sample


# ---------------------------------------------------------------------------
# condition dropping

@dataclass(frozen=True)
class ConditionFlags:
    pose_dropped: bool = False
    mask_degraded: bool = False
    points_dropped: bool = False
    garment_dropped: bool = False


def degrade_mask_to_box(mask: np.ndarray) -> np.ndarray:
    """Tight bounding-box mask around the clothes region."""
    ys, xs = np.nonzero(mask)
    if len(ys) == 0:
        return mask.copy()
    box = np.zeros_like(mask)
    box[ys.min():ys.max() + 1, xs.min():xs.max() + 1] = 1
    return box


def apply_condition_dropping(sample: TryOnSample, rng: np.random.Generator,
                             cfg: TrainConfig) -> tuple[TryOnSample, ConditionFlags]:
    """Four independent draws: drop pose, degrade mask to its bounding box,
    empty the point set, and swap the garment embedding for the null token."""
    flags = ConditionFlags(
        pose_dropped=rng.random() < cfg.p_drop_pose,
        mask_degraded=rng.random() < cfg.p_degrade_mask,
        points_dropped=rng.random() < cfg.p_drop_points,
        garment_dropped=rng.random() < cfg.p_drop_garment_embed,
    )
    out = sample
    if flags.mask_degraded:
        out = replace(out, mask=degrade_mask_to_box(out.mask))
    if flags.points_dropped:
        out = replace(out, point_pool=[])
    return out, flags


def point_weight_map(person_points, gain: float, radius: float,
                     h_lat: int, w_lat: int, factor: int) -> torch.Tensor:
    """w = 1 + gain at latent pixels within `radius` of any point (points given
    at image resolution, divided by the codec factor). Indicator, not a sum."""
    w = torch.ones(1, h_lat, w_lat)
    if gain <= 0 or not person_points:
        return w
    yy, xx = torch.meshgrid(torch.arange(h_lat, dtype=torch.float64),
                            torch.arange(w_lat, dtype=torch.float64), indexing="ij")
    near = torch.zeros(h_lat, w_lat, dtype=torch.bool)
    for (px, py) in person_points:
        near |= (xx - px / factor) ** 2 + (yy - py / factor) ** 2 <= radius ** 2
    w[0][near] = 1.0 + gain
    return w


# ---------------------------------------------------------------------------
# batch assembly

def garment_canvas(garments: list[np.ndarray], slots: int = 2) -> np.ndarray:
    """Width-concatenate 1..slots garment images, padding empty slots with
    all-zeros; a single-garment input is defined as the padded two-slot one."""
    if not 1 <= len(garments) <= slots:
        raise ConfigError(f"need 1..{slots} garments, got {len(garments)}")
    c, h, w = garments[0].shape
    canvas = np.zeros((c, h, w * slots), dtype=np.float32)
    for i, g in enumerate(garments):
        if g.shape != (c, h, w):
            raise ConfigError("garment images must share one shape")
        canvas[:, :, i * w:(i + 1) * w] = g
    return canvas


def latent_mask(mask: np.ndarray, factor: int) -> torch.Tensor:
    """Binary mask at latent resolution: a latent cell is masked if any of its
    image pixels is masked."""
    t = torch.as_tensor(mask, dtype=torch.float32)[None, None]
    if factor > 1:
        t = F.max_pool2d(t, factor)
    return t[0]


@dataclass
class TrainBatch:
    person: torch.Tensor          # (B, 3, H, W)
    masked_person: torch.Tensor   # person with mask region zeroed
    mask_lat: torch.Tensor        # (B, 1, L, L)
    garment: torch.Tensor         # (B, 3, H, slots*W)
    pose_map: torch.Tensor        # (B, J, H, W)
    pose_keep: torch.Tensor       # (B, 1, 1, 1) 0/1
    garment_keep: torch.Tensor    # (B, 1, 1) 0/1 for the null-embedding swap
    oh_p: torch.Tensor            # (B, K+1, H, W) one-hot person disks
    oh_g: torch.Tensor            # (B, K+1, H, slots*W)
    has_points: torch.Tensor      # (B,) 0/1
    weight: torch.Tensor          # (B, 1, L, L)


def assemble_batch(samples: list[TryOnSample], model_cfg: ModelConfig,
                   cfg: TrainConfig, rng: np.random.Generator) -> TrainBatch:
    """Augment, condition-drop, and tensorize a list of samples. Each sample's
    point pairs get fresh random ids; all-zero disk maps stand in for dropped
    points and their embeddings are zeroed downstream."""
    f = model_cfg.latent_factor
    L = model_cfg.latent_size
    k = model_cfg.k_points
    rows = {key: [] for key in ("person", "masked", "mlat", "garment", "pose",
                                "pkeep", "gkeep", "ohp", "ohg", "haspts", "w")}
    h, w = samples[0].shape
    for sample in samples:
        s = augment(sample, rng, cfg)
        s, flags = apply_condition_dropping(s, rng, cfg)
        person = torch.as_tensor(s.person)
        mask = torch.as_tensor(s.mask.astype(np.float32))
        rows["person"].append(person)
        rows["masked"].append(person * (1.0 - mask))
        rows["mlat"].append(latent_mask(s.mask, f))
        rows["garment"].append(torch.as_tensor(garment_canvas([s.garment], model_cfg.garment_slots)))
        rows["pose"].append(torch.as_tensor(render_pose_map(s.pose, size=h)))
        rows["pkeep"].append(0.0 if flags.pose_dropped else 1.0)
        rows["gkeep"].append(0.0 if flags.garment_dropped else 1.0)
        pts = []
        if s.point_pool and not flags.points_dropped:
            n = int(rng.integers(cfg.min_points, min(cfg.max_points, len(s.point_pool)) + 1))
            chosen = rng.choice(len(s.point_pool), size=n, replace=False)
            pairs = [(s.point_pool[i]["g"], s.point_pool[i]["p"]) for i in chosen]
            pset = assign_ids(pairs, rng, k=k)
            disks = rasterize(pset, (h, w * model_cfg.garment_slots), (h, w),
                              model_cfg.disk_radius)
            rows["ohp"].append(one_hot_disks(disks.d_p, k)[0])
            rows["ohg"].append(one_hot_disks(disks.d_g, k)[0])
            rows["haspts"].append(1.0)
            pts = [p for _, p in pairs]
        else:
            rows["ohp"].append(one_hot_disks(np.zeros((1, h, w), dtype=np.int32), k)[0])
            rows["ohg"].append(one_hot_disks(
                np.zeros((1, h, w * model_cfg.garment_slots), dtype=np.int32), k)[0])
            rows["haspts"].append(0.0)
        rows["w"].append(point_weight_map(pts, cfg.point_loss_gain, cfg.point_loss_radius,
                                          L, L, f).float())
    return TrainBatch(
        person=torch.stack(rows["person"]),
        masked_person=torch.stack(rows["masked"]),
        mask_lat=torch.stack(rows["mlat"]),
        garment=torch.stack(rows["garment"]),
        pose_map=torch.stack(rows["pose"]),
        pose_keep=torch.tensor(rows["pkeep"]).view(-1, 1, 1, 1),
        garment_keep=torch.tensor(rows["gkeep"]).view(-1, 1, 1),
        oh_p=torch.stack(rows["ohp"]),
        oh_g=torch.stack(rows["ohg"]),
        has_points=torch.tensor(rows["haspts"]),
        weight=torch.stack(rows["w"]),
    )


def batch_cond(batch: TrainBatch, model: DualUNet, codec: LatentCodec) -> CondBundle:
    """Encode a TrainBatch into the conditioning bundle (gradients flow only
    through the trainable encoders, never the codec)."""
    cfg = model.cfg
    masked_latent = codec.encode(batch.masked_person)
    garment_latent = codec.encode(batch.garment)
    tokens = model.garment_encoder(batch.garment)
    null = model.garment_encoder.null_embedding.unsqueeze(0)
    keep = batch.garment_keep
    tokens = tokens * keep + null * (1.0 - keep)
    pose_feat = model.pose_encoder(batch.pose_map) * batch.pose_keep
    hp = batch.has_points.view(-1, 1, 1)
    e_p = e_g = None
    lp = lg = None
    if cfg.injection_mode == "latent_noise":
        tap_p = model.point_net._trunk_taps(batch.oh_p)[model._latent_tap]
        tap_g = model.point_net._trunk_taps(batch.oh_g)[model._latent_tap]
        hp4 = batch.has_points.view(-1, 1, 1, 1)
        lp = model.latent_point_head(tap_p) * hp4
        lg = model.latent_point_head(tap_g) * hp4
    else:
        e_p = {s: e * hp for s, e in model.point_net(batch.oh_p).items()}
        e_g = {s: e * hp for s, e in model.point_net(batch.oh_g).items()}
    return CondBundle(masked_latent=masked_latent, latent_mask=batch.mask_lat,
                      garment_latent=garment_latent, garment_tokens=tokens,
                      pose_feature=pose_feat, e_p=e_p, e_g=e_g,
                      latent_point_p=lp, latent_point_g=lg)


def train_step(samples: list[TryOnSample], model: DualUNet, codec: LatentCodec,
               schedule: NoiseSchedule, cfg: TrainConfig, opt: torch.optim.Optimizer,
               rng: np.random.Generator, torch_gen: torch.Generator) -> float:
    batch = assemble_batch(samples, model.cfg, cfg, rng)
    cond = batch_cond(batch, model, codec)
    z0 = codec.encode(batch.person)
    t = torch.as_tensor(rng.integers(1, schedule.T + 1, size=len(samples)))
    eps = torch.randn(z0.shape, generator=torch_gen)
    z_t = q_sample(z0, t.numpy(), eps, schedule)
    pred = model.denoise(z_t, t, cond)
    loss = training_loss(pred, eps, batch.weight)
    if not torch.isfinite(loss):
        raise CheckpointError(f"non-finite loss (t={t.tolist()})")
    opt.zero_grad(set_to_none=True)
    loss.backward()
    if cfg.grad_clip > 0:
        torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
    opt.step()
    return float(loss)


def disable_zero_init(model: DualUNet, gen: torch.Generator):
    """Replace the zero-initialized point heads with small random weights
    (the ablation baseline the zero-init strategy is compared against)."""
    for head in list(model.point_net.heads.values()) + [model.latent_point_head]:
        with torch.no_grad():
            head.weight.normal_(0.0, 0.02, generator=gen)
            head.bias.zero_()


def train(model: DualUNet, codec: LatentCodec, dataset: list[TryOnSample],
          schedule: NoiseSchedule, cfg: TrainConfig, out_path: Path | None = None,
          log_fn=None, start_step: int = 0,
          opt_state: dict | None = None) -> list[float]:
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    if opt_state is not None:
        opt.load_state_dict(opt_state)
    if not cfg.zero_init and start_step == 0:
        disable_zero_init(model, torch.Generator().manual_seed(cfg.seed + 77))
    losses = []
    model.train()
    t_start = time.time()
    for step in range(start_step, cfg.total_steps):
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, step]))
        torch_gen = torch.Generator().manual_seed(int(rng.integers(2 ** 31)))
        idx = rng.choice(len(dataset), size=min(cfg.batch_size, len(dataset)), replace=False)
        loss = train_step([dataset[i] for i in idx], model, codec, schedule, cfg,
                          opt, rng, torch_gen)
        losses.append(loss)
        if log_fn and (step % 50 == 0 or step == cfg.total_steps - 1):
            log_fn({"step": step, "loss": round(loss, 5), "lr": cfg.lr,
                    "elapsed_s": round(time.time() - t_start, 1)})
        if out_path is not None and cfg.save_every > 0 and (step + 1) % cfg.save_every == 0:
            save_checkpoint(out_path, model, codec, schedule, cfg, step + 1, opt)
    model.eval()
    if out_path is not None:
        save_checkpoint(out_path, model, codec, schedule, cfg, cfg.total_steps, opt)
    return losses


# ---------------------------------------------------------------------------
# checkpoint archive

def save_checkpoint(path, model: DualUNet, codec: LatentCodec, schedule: NoiseSchedule,
                    cfg: TrainConfig, step: int, opt: torch.optim.Optimizer | None = None):
    payload = {
        "version": CHECKPOINT_VERSION,
        "k": model.cfg.k_points,
        "model_config": asdict(model.cfg),
        "codec_config": asdict(codec.config),
        "schedule": schedule.state_dict(),
        "train_config": asdict(cfg),
        "train_config_digest": cfg.digest(),
        "step": step,
        "weights": {
            "codec": codec.state_dict(),
            "main_unet": model.main.state_dict(),
            "ref_unet": model.ref.state_dict(),
            "pose_encoder": model.pose_encoder.state_dict(),
            "garment_encoder": model.garment_encoder.state_dict(),
            "point_embed": model.point_net.state_dict(),
            "latent_point_head": model.latent_point_head.state_dict(),
        },
    }
    if opt is not None:
        payload["optimizer"] = opt.state_dict()
    torch.save(payload, path)


@dataclass
class ModelBundle:
    model: DualUNet
    codec: LatentCodec
    schedule: NoiseSchedule
    train_config: TrainConfig
    step: int
    digest: str
    optimizer_state: dict | None = None

    @property
    def k(self) -> int:
        return self.model.cfg.k_points


def load_checkpoint(path, expect_k: int | None = None) -> ModelBundle:
    path = Path(path)
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if payload.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"checkpoint version {payload.get('version')} != {CHECKPOINT_VERSION}")
    weights = payload.get("weights", {})
    for key in ("codec", "main_unet", "ref_unet", "pose_encoder",
                "garment_encoder", "point_embed"):
        if key not in weights:
            raise CheckpointError(f"checkpoint missing weights key {key!r}")
    k = payload["k"]
    if expect_k is not None and k != expect_k:
        raise CheckpointError(f"checkpoint K={k} does not match requested K={expect_k}")
    model_cfg = ModelConfig(**{**payload["model_config"],
                               "widths": tuple(payload["model_config"]["widths"]),
                               "attn_stages": tuple(payload["model_config"]["attn_stages"])})
    model = DualUNet(model_cfg)
    model.main.load_state_dict(weights["main_unet"])
    model.ref.load_state_dict(weights["ref_unet"])
    model.pose_encoder.load_state_dict(weights["pose_encoder"])
    model.garment_encoder.load_state_dict(weights["garment_encoder"])
    model.point_net.load_state_dict(weights["point_embed"])
    if "latent_point_head" in weights:
        model.latent_point_head.load_state_dict(weights["latent_point_head"])
    model.eval()
    codec = LatentCodec(CodecConfig(**payload["codec_config"]))
    codec.load_state_dict(weights["codec"])
    codec.mark_ready()
    codec.eval()
    return ModelBundle(
        model=model, codec=codec,
        schedule=NoiseSchedule.from_state_dict(payload["schedule"]),
        train_config=TrainConfig(**payload["train_config"]),
        step=payload["step"],
        digest=hashlib.sha256(path.read_bytes()).hexdigest()[:16],
        optimizer_state=payload.get("optimizer"),
    )


# ---------------------------------------------------------------------------
# flat key=value config files

def parse_config_file(path) -> tuple[TrainConfig, ModelConfig, CodecConfig]:
    """Flat `key = value` lines; `model.*` keys map to ModelConfig, `codec.*`
    to CodecConfig, everything else to TrainConfig."""
    train_kw, model_kw, codec_kw = {}, {}, {}
    for ln, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{ln}: expected key = value")
        key, val = (s.strip() for s in line.split("=", 1))
        if key.startswith("model."):
            model_kw[key[6:]] = val
        elif key.startswith("codec."):
            codec_kw[key[6:]] = val
        else:
            train_kw[key] = val

    def coerce(cls, kw):
        fields = {f.name: f.type for f in cls.__dataclass_fields__.values()}
        out = {}
        for k, v in kw.items():
            if k not in fields:
                raise ConfigError(f"unknown config key {k!r} for {cls.__name__}")
            t = fields[k]
            if "bool" in str(t):
                out[k] = v.lower() in ("1", "true", "yes", "on")
            elif "int" in str(t) and "tuple" not in str(t):
                out[k] = int(v)
            elif "float" in str(t):
                out[k] = float(v)
            elif "tuple" in str(t):
                out[k] = tuple(int(x) for x in v.strip("()").split(",") if x.strip())
            else:
                out[k] = v
        return cls(**out)

    return coerce(TrainConfig, train_kw), coerce(ModelConfig, model_kw), coerce(CodecConfig, codec_kw)
