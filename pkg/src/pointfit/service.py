"""Inference pipeline: full generation from (person, garments, mask, pose,
points), drag-to-click translation, and the HTTP service wrapper.

Garments are width-concatenated into a fixed two-slot canvas (a single
garment is padded with an all-zeros slot); point pairs address a slot with
slot-local coordinates and the x offset is applied internally. Fixed seeds
give byte-identical outputs across the CLI and service entry points.
"""

from __future__ import annotations

import hashlib
import json
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import torch

from .diffusion import SamplerConfig, classifier_free_combine, sample
from .errors import PointfitError, RequestError
from .imgio import b64_mask, b64_png, png_b64
from .points import assign_ids, rasterize
from .synth import render_pose_map
from .train import ModelBundle, degrade_mask_to_box, garment_canvas, latent_mask
from .unet import CondBundle


@dataclass
class GenerationRequest:
    person: np.ndarray                   # (3, H, W)
    garments: list                       # 1 or 2 arrays (3, H, W)
    mask: np.ndarray | None = None       # (H, W) {0,1}; None -> heuristic box
    pose: np.ndarray | None = None       # (J, 2) or None (dropped)
    points: list = field(default_factory=list)  # {"g":[x,y],"p":[x,y],("slot":1|2)}
    sampler: SamplerConfig = SamplerConfig()
    seed: int = 0
    degrade_mask: bool = False           # evaluate with the bounding-box mask
    point_id_seed: int | None = None     # id relabeling stream; defaults to seed


@dataclass
class DragRequest:
    person: np.ndarray
    mask: np.ndarray
    drags: list                          # {"start":[x,y],"end":[x,y]}
    sampler: SamplerConfig = SamplerConfig()
    seed: int = 0


@dataclass
class GenerationResult:
    image: np.ndarray
    seed: int
    timing_ms: float
    diagnostics: list = field(default_factory=list)


def _heuristic_mask(h: int, w: int) -> np.ndarray:
    """Full-garment-region fallback when no clothes mask is given: a generous
    central box covering wherever a garment could sit."""
    m = np.zeros((h, w), dtype=np.uint8)
    m[int(0.2 * h):int(0.95 * h), int(0.1 * w):int(0.9 * w)] = 1
    return m


def validate_request(req: GenerationRequest, bundle: ModelBundle) -> None:
    cfg = bundle.model.cfg
    size = cfg.image_size
    if req.person.shape != (3, size, size):
        raise RequestError("bad_image", f"person image must be 3x{size}x{size}")
    if not 1 <= len(req.garments) <= cfg.garment_slots:
        raise RequestError("bad_garment_count",
                           f"expected 1..{cfg.garment_slots} garments, got {len(req.garments)}")
    for g in req.garments:
        if g.shape != (3, size, size):
            raise RequestError("bad_image", f"garment images must be 3x{size}x{size}")
    if len(req.points) > cfg.k_points:
        raise RequestError("too_many_points",
                           f"{len(req.points)} exceeds maximum control points ({cfg.k_points})")
    for i, pt in enumerate(req.points):
        try:
            gx, gy = float(pt["g"][0]), float(pt["g"][1])
            px, py = float(pt["p"][0]), float(pt["p"][1])
            slot = int(pt.get("slot", 1))
        except (KeyError, TypeError, ValueError, IndexError) as exc:
            raise RequestError("invalid_request", f"malformed point pair {i}: {exc}")
        if slot not in (1, 2):
            raise RequestError("invalid_request", f"point {i}: slot must be 1 or 2")
        if slot > len(req.garments):
            raise RequestError("out_of_bounds_point", f"point {i} addresses empty garment slot")
        if not (0 <= gx < size and 0 <= gy < size):
            raise RequestError("out_of_bounds_point", f"garment point {i} outside image")
        if not (0 <= px < size and 0 <= py < size):
            raise RequestError("out_of_bounds_point", f"person point {i} outside image")
    if req.mask is not None:
        if req.mask.shape != (size, size):
            raise RequestError("bad_image", "mask shape mismatch")
        if req.mask.sum() == 0:
            raise RequestError("empty_mask", "clothes mask has no pixels")
    if req.pose is not None and np.asarray(req.pose).shape != (cfg.pose_joints, 2):
        raise RequestError("bad_pose", f"pose must list {cfg.pose_joints} keypoints")


def build_cond(req: GenerationRequest, bundle: ModelBundle,
               batch: int = 1) -> tuple[CondBundle, np.ndarray]:
    """Assemble the conditioning bundle for one validated request."""
    model, codec, cfg = bundle.model, bundle.codec, bundle.model.cfg
    size = cfg.image_size
    mask = req.mask if req.mask is not None else _heuristic_mask(size, size)
    if req.degrade_mask:
        mask = degrade_mask_to_box(mask)
    person = torch.as_tensor(req.person, dtype=torch.float32)
    masked = person * (1.0 - torch.as_tensor(mask.astype(np.float32)))
    canvas = garment_canvas(list(req.garments), cfg.garment_slots)
    garment_t = torch.as_tensor(canvas).unsqueeze(0)
    masked_latent = codec.encode(masked.unsqueeze(0))
    garment_latent = codec.encode(garment_t)
    tokens = model.garment_encoder(garment_t)
    pose_feat = None
    if req.pose is not None:
        pose_map = torch.as_tensor(render_pose_map(np.asarray(req.pose), size=size))
        pose_feat = model.pose_encoder(pose_map.unsqueeze(0))
    disks = None
    if req.points:
        pairs = []
        for pt in req.points:
            gx, gy = float(pt["g"][0]), float(pt["g"][1])
            if int(pt.get("slot", 1)) == 2:
                gx += size
            pairs.append(((gx, gy), (float(pt["p"][0]), float(pt["p"][1]))))
        id_seed = req.seed if req.point_id_seed is None else req.point_id_seed
        rng = np.random.default_rng(np.random.SeedSequence([id_seed, 0x901]))
        pset = assign_ids(pairs, rng, k=cfg.k_points)
        disks = rasterize(pset, (size, size * cfg.garment_slots), (size, size),
                          cfg.disk_radius)
    e_p, e_g, lp, lg = model.embed_points(disks, batch=batch)
    mlat = latent_mask(mask, cfg.latent_factor).unsqueeze(0)
    cond = CondBundle(
        masked_latent=masked_latent.expand(batch, -1, -1, -1),
        latent_mask=mlat.expand(batch, -1, -1, -1),
        garment_latent=garment_latent.expand(batch, -1, -1, -1),
        garment_tokens=tokens.expand(batch, -1, -1),
        pose_feature=None if pose_feat is None else pose_feat.expand(batch, -1, -1, -1),
        e_p=e_p, e_g=e_g, latent_point_p=lp, latent_point_g=lg,
    )
    return cond, mask


def _denoiser(bundle: ModelBundle, guidance: float):
    model = bundle.model

    def predict(z_t, t, cond: CondBundle):
        eps = model.denoise(z_t, t, cond)
        if guidance > 0:
            uncond = CondBundle(
                masked_latent=cond.masked_latent, latent_mask=cond.latent_mask,
                garment_latent=cond.garment_latent,
                garment_tokens=model.garment_encoder(None, dropped=True).expand(
                    z_t.shape[0], -1, -1),
                pose_feature=cond.pose_feature, e_p=cond.e_p, e_g=cond.e_g,
                latent_point_p=cond.latent_point_p, latent_point_g=cond.latent_point_g)
            eps_un = model.denoise(z_t, t, uncond)
            eps = classifier_free_combine(eps, eps_un, guidance)
        return eps

    return predict


def generate(req: GenerationRequest, bundle: ModelBundle) -> GenerationResult:
    """Deterministic generation for one request (fixed seed, fixed weights)."""
    t0 = time.time()
    validate_request(req, bundle)
    cfg = bundle.model.cfg
    with torch.no_grad():
        cond, _mask = build_cond(req, bundle)
        gen = torch.Generator().manual_seed(req.seed)
        z0 = sample(_denoiser(bundle, req.sampler.guidance_scale),
                    (1, cfg.latent_channels, cfg.latent_size, cfg.latent_size),
                    cond, req.sampler, bundle.schedule, generator=gen)
        image = bundle.codec.decode(z0)[0].numpy()
    diagnostics = [{"target": [float(pt["p"][0]), float(pt["p"][1])], "located": None}
                   for pt in req.points]
    return GenerationResult(image=image, seed=req.seed,
                            timing_ms=(time.time() - t0) * 1000.0,
                            diagnostics=diagnostics)


def generate_latents_batch(reqs: list[GenerationRequest], bundle: ModelBundle) -> torch.Tensor:
    """Batched generation for the evaluation harness: one denoiser pass per
    step for many single-image requests with identical sampler settings.
    Initial noise is drawn per item from its own seeded generator."""
    cfg = bundle.model.cfg
    assert len({(r.sampler.kind, r.sampler.steps, r.sampler.guidance_scale)
                for r in reqs}) == 1
    with torch.no_grad():
        conds, noises = [], []
        for r in reqs:
            validate_request(r, bundle)
            cond, _ = build_cond(r, bundle)
            conds.append(cond)
            g = torch.Generator().manual_seed(r.seed)
            noises.append(torch.randn(
                (1, cfg.latent_channels, cfg.latent_size, cfg.latent_size), generator=g))

        def cat_opt(items):
            return None if items[0] is None else torch.cat(items, dim=0)

        merged = CondBundle(
            masked_latent=cat_opt([c.masked_latent for c in conds]),
            latent_mask=cat_opt([c.latent_mask for c in conds]),
            garment_latent=cat_opt([c.garment_latent for c in conds]),
            garment_tokens=cat_opt([c.garment_tokens for c in conds]),
            pose_feature=cat_opt([c.pose_feature for c in conds]),
            e_p=None if conds[0].e_p is None or any(c.e_p is None for c in conds) else
                {s: torch.cat([c.e_p[s] for c in conds]) for s in conds[0].e_p},
            e_g=None if conds[0].e_g is None or any(c.e_g is None for c in conds) else
                {s: torch.cat([c.e_g[s] for c in conds]) for s in conds[0].e_g},
            latent_point_p=cat_opt([c.latent_point_p for c in conds]),
            latent_point_g=cat_opt([c.latent_point_g for c in conds]),
        )
        return sample(_denoiser(bundle, reqs[0].sampler.guidance_scale),
                      None, merged, reqs[0].sampler, bundle.schedule,
                      z_init=torch.cat(noises, dim=0))


def drag_to_click(req: DragRequest, bundle: ModelBundle) -> GenerationRequest:
    """Translate drags into point pairs: the parsed clothes (mask crop of the
    person image, zero outside the mask, padded onto a fresh canvas) become
    the garment image; each drag start maps to a garment point and each end
    to a person point."""
    size = bundle.model.cfg.image_size
    if req.person.shape != (3, size, size):
        raise RequestError("bad_image", f"person image must be 3x{size}x{size}")
    if req.mask.shape != (size, size) or req.mask.sum() == 0:
        raise RequestError("empty_mask", "clothes mask required for drag requests")
    ys, xs = np.nonzero(req.mask)
    x0, y0 = int(xs.min()), int(ys.min())
    parsed = np.zeros_like(req.person)
    sel = req.mask.astype(bool)
    crop = np.where(sel[None], req.person, 0.0)[:, y0:, x0:]
    parsed[:, :crop.shape[1], :crop.shape[2]] = crop[:, :size, :size]
    points = []
    for i, drag in enumerate(req.drags):
        try:
            sx, sy = float(drag["start"][0]), float(drag["start"][1])
            ex, ey = float(drag["end"][0]), float(drag["end"][1])
        except (KeyError, TypeError, ValueError, IndexError) as exc:
            raise RequestError("invalid_request", f"malformed drag {i}: {exc}")
        if not (0 <= sx < size and 0 <= sy < size) or not req.mask[int(round(sy)), int(round(sx))]:
            raise RequestError("start_outside_mask", f"drag {i} starts outside the clothes mask")
        if not (0 <= ex < size and 0 <= ey < size):
            raise RequestError("out_of_bounds_point", f"drag {i} ends outside the image")
        points.append({"g": [sx - x0, sy - y0], "p": [ex, ey]})
    return GenerationRequest(person=req.person, garments=[parsed], mask=req.mask,
                             pose=None, points=points, sampler=req.sampler, seed=req.seed)


# ---------------------------------------------------------------------------
# HTTP service

def _parse_sampler(d: dict | None) -> SamplerConfig:
    d = d or {}
    try:
        return SamplerConfig(kind=d.get("kind", "deterministic"),
                             steps=int(d.get("steps", 50)),
                             guidance_scale=float(d.get("guidance", 0.0)))
    except (ValueError, TypeError) as exc:
        raise RequestError("bad_sampler", str(exc))


def _decode_generate_payload(payload: dict) -> dict:
    try:
        person = b64_png(payload["person"])
        garments = [b64_png(g) for g in payload["garments"]]
        mask = b64_mask(payload["mask"]) if payload.get("mask") else None
        pose = np.asarray(payload["pose"], dtype=np.float64) if payload.get("pose") else None
    except RequestError:
        raise
    except Exception as exc:
        raise RequestError("bad_image", f"undecodable payload field: {exc}")
    points = payload.get("points", [])
    if not isinstance(points, list):
        raise RequestError("invalid_request", "points must be a list")
    return dict(person=person, garments=garments, mask=mask, pose=pose, points=points)


def create_app(bundle: ModelBundle, workers: int = 2, queue_limit: int = 16):
    """FastAPI app over an immutable checkpoint. Generation runs on a bounded
    worker pool; requests beyond pool+queue capacity get 503."""
    from fastapi import FastAPI, Request
    from fastapi.exceptions import RequestValidationError
    from fastapi.responses import JSONResponse

    app = FastAPI(title="pointfit try-on service")
    pool = ThreadPoolExecutor(max_workers=workers)
    pending = {"n": 0}
    lock = threading.Lock()
    seed_gen = np.random.default_rng()

    def error_response(code: str, message: str, status: int = 400):
        return JSONResponse({"error": {"code": code, "message": message}}, status_code=status)

    @app.exception_handler(RequestValidationError)
    async def _invalid(request: Request, exc: RequestValidationError):
        return error_response("invalid_request", str(exc.errors()[:3]))

    @app.exception_handler(Exception)
    async def _crash(request: Request, exc: Exception):
        if isinstance(exc, PointfitError):
            return error_response(exc.code, str(exc))
        return error_response("internal_error", exc.__class__.__name__, status=500)

    def run_pooled(fn):
        with lock:
            if pending["n"] >= workers + queue_limit:
                return error_response("overloaded", "request queue full", status=503)
            pending["n"] += 1
        try:
            return pool.submit(fn).result()
        finally:
            with lock:
                pending["n"] -= 1

    def result_json(res: GenerationResult):
        return {"image": png_b64(res.image), "seed": res.seed,
                "timing_ms": round(res.timing_ms, 2), "diagnostics": res.diagnostics}

    @app.post("/v1/generate")
    def v1_generate(payload: dict):
        def work():
            try:
                fields = _decode_generate_payload(payload)
                req = GenerationRequest(
                    **fields, sampler=_parse_sampler(payload.get("sampler")),
                    seed=int(payload["seed"]) if payload.get("seed") is not None
                    else int(seed_gen.integers(2 ** 31)))
                return JSONResponse(result_json(generate(req, bundle)))
            except PointfitError as exc:
                return error_response(exc.code, str(exc))
            except (KeyError, TypeError, ValueError) as exc:
                return error_response("invalid_request", f"{exc.__class__.__name__}: {exc}")
        return run_pooled(work)

    @app.post("/v1/drag")
    def v1_drag(payload: dict):
        def work():
            try:
                person = b64_png(payload["person"])
                mask = b64_mask(payload["mask"])
                drags = payload.get("drags", [])
                if not isinstance(drags, list):
                    raise RequestError("invalid_request", "drags must be a list")
                req = DragRequest(
                    person=person, mask=mask, drags=drags,
                    sampler=_parse_sampler(payload.get("sampler")),
                    seed=int(payload["seed"]) if payload.get("seed") is not None
                    else int(seed_gen.integers(2 ** 31)))
                click_req = drag_to_click(req, bundle)
                return JSONResponse(result_json(generate(click_req, bundle)))
            except PointfitError as exc:
                return error_response(exc.code, str(exc))
            except (KeyError, TypeError, ValueError) as exc:
                return error_response("invalid_request", f"{exc.__class__.__name__}: {exc}")
        return run_pooled(work)

    @app.get("/v1/health")
    async def v1_health():
        cfg = bundle.model.cfg
        return {"status": "ok", "k": cfg.k_points, "image_size": cfg.image_size,
                "latent_size": cfg.latent_size, "checkpoint_digest": bundle.digest,
                "step": bundle.step, "workers": workers, "queue_limit": queue_limit}

    return app


def serve(bundle: ModelBundle, host: str = "127.0.0.1", port: int = 8401,
          workers: int = 2, queue_limit: int = 16):
    import uvicorn
    uvicorn.run(create_app(bundle, workers, queue_limit), host=host, port=port,
                log_level="warning")
