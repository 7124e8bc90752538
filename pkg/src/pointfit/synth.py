"""Procedural try-on triplets with analytically known garment<->person
correspondences.

Each sample renders one flat garment texture twice: once as the garment image
and once warped onto a stick figure through a piecewise-affine map. Wearing
style (sleeve roll, waist rise, coat opening) moves texture WITHIN a fixed
garment silhouette, so neither the clothes mask nor its bounding box reveals
the style; that makes control points the only style channel. The warp itself
is the correspondence handle: closed-form forward and inverse.

Fiducial markers (uniquely colored dots baked into the texture) make landmark
localization in generated images exact without a learned detector.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ArticulationError, SupportDomainError
from .imgio import load_png, save_png

IMAGE_SIZE = 64
CLASSES = ("top", "pants", "coat")

# marker palette: extreme corners of the RGB cube; garment pattern colors are
# confined to [0.30, 0.70] per channel so every marker keeps a max-channel
# distance >= 0.3 from every pattern color
MARKER_COLORS = (
    (1.0, 0.0, 0.0),
    (0.0, 1.0, 0.0),
    (0.1, 0.25, 1.0),
    (1.0, 1.0, 0.0),
    (1.0, 0.0, 1.0),
    (0.0, 1.0, 1.0),
)

LANDMARK_NAMES = {
    "top": ("cuff_left", "cuff_right", "shoulder_seam_left", "shoulder_seam_right",
            "hem_left", "hem_right"),
    "pants": ("hem_left", "hem_right", "waist_center"),
    "coat": ("front_edge_left", "front_edge_right", "cuff_left", "cuff_right"),
}

POSE_JOINTS = ("head", "neck", "shoulder_left", "shoulder_right",
               "elbow_left", "elbow_right", "hip_left", "hip_right")

BACKGROUND = (0.10, 0.10, 0.14)
BODY_COLOR = (0.82, 0.64, 0.52)
MARKER_RADIUS = 2.0


def color_gap(a, b) -> float:
    """Max-channel distance between two RGB colors."""
    return float(np.max(np.abs(np.asarray(a) - np.asarray(b))))


GRID = 1 << 20


def snap(x):
    """Round coordinates to the dyadic 1/2^20 grid. Stored coordinates live on
    this grid so horizontal mirroring (x -> W-1-x) is exactly involutive."""
    return np.round(np.asarray(x, dtype=np.float64) * GRID) / GRID


@dataclass(frozen=True)
class GarmentSpec:
    garment_class: str
    base_color: tuple
    pattern_color: tuple
    liner_color: tuple
    pattern: str          # "stripes_h", "stripes_v", "checker"
    pattern_period: int
    roll: float           # sleeve / pant-leg roll fraction in [0, 1]
    open_angle: float     # coat opening fraction in [0, 1]
    tuck: bool

    def __post_init__(self):
        if self.garment_class not in CLASSES:
            raise ValueError(f"unknown garment class {self.garment_class!r}")
        if not (0.0 <= self.roll <= 1.0 and 0.0 <= self.open_angle <= 1.0):
            raise ValueError("roll and open_angle must lie in [0, 1]")
        markers = self.markers()
        names = [m[0] for m in markers]
        for i, (_, c1, _) in enumerate(markers):
            for _, c2, _ in markers[i + 1:]:
                if color_gap(c1, c2) < 0.3:
                    raise ValueError("marker colors not separated by >= 0.3")
            for pc in (self.base_color, self.pattern_color, self.liner_color):
                if color_gap(c1, pc) < 0.3:
                    raise ValueError("marker color too close to a pattern color")
        assert names == list(LANDMARK_NAMES[self.garment_class])

    def markers(self) -> list[tuple[str, tuple, tuple]]:
        """(landmark name, marker color, garment-space coordinate)."""
        coords = _GARMENT_LANDMARKS[self.garment_class]
        return [(name, MARKER_COLORS[i], coords[name])
                for i, name in enumerate(LANDMARK_NAMES[self.garment_class])]


@dataclass(frozen=True)
class FigureSpec:
    cx: float
    shoulder_y: float
    torso_len: float
    shoulder_halfw: float
    arm_angle_left: float   # radians outward from vertical
    arm_angle_right: float
    arm_len: float
    leg_angle_left: float
    leg_angle_right: float
    leg_len: float
    body_color: tuple = BODY_COLOR

    @property
    def hip_y(self) -> float:
        return self.shoulder_y + self.torso_len

    @property
    def hip_halfw(self) -> float:
        return self.shoulder_halfw - 2.0


# garment-space layout (all classes share the 64x64 garment canvas)
_TOP = {
    "torso": (20.0, 18.0, 44.0, 50.0),
    "torso_liner": (20.0, 50.0, 44.0, 58.0),
    "sleeve_l": (8.0, 18.0, 20.0, 30.0),
    "sleeve_l_liner": (4.0, 18.0, 8.0, 30.0),
    "sleeve_r": (44.0, 18.0, 56.0, 30.0),
    "sleeve_r_liner": (56.0, 18.0, 60.0, 30.0),
}
_PANTS = {
    "band_upper": (22.0, 10.0, 42.0, 13.0),
    "band_lower": (22.0, 13.0, 42.0, 16.0),
    "leg_l": (22.0, 16.0, 31.0, 50.0),
    "leg_l_liner": (22.0, 50.0, 31.0, 58.0),
    "leg_r": (33.0, 16.0, 42.0, 50.0),
    "leg_r_liner": (33.0, 50.0, 42.0, 58.0),
}
_COAT = {
    "outer_l": (20.0, 18.0, 26.0, 54.0),
    "outer_r": (38.0, 18.0, 44.0, 54.0),
    "panel_l": (26.0, 18.0, 32.0, 54.0),
    "panel_r": (32.0, 18.0, 38.0, 54.0),
    "sleeve_l": (8.0, 18.0, 20.0, 30.0),
    "sleeve_l_liner": (4.0, 18.0, 8.0, 30.0),
    "sleeve_r": (44.0, 18.0, 56.0, 30.0),
    "sleeve_r_liner": (56.0, 18.0, 60.0, 30.0),
}
_GARMENT_ZONES = {"top": _TOP, "pants": _PANTS, "coat": _COAT}

_GARMENT_LANDMARKS = {
    "top": {
        "cuff_left": (8.0, 24.0), "cuff_right": (56.0, 24.0),
        "shoulder_seam_left": (29.0, 20.0), "shoulder_seam_right": (35.0, 20.0),
        "hem_left": (23.0, 50.0), "hem_right": (41.0, 50.0),
    },
    "pants": {
        "hem_left": (26.5, 50.0), "hem_right": (37.5, 50.0),
        "waist_center": (32.0, 13.0),
    },
    "coat": {
        "front_edge_left": (29.75, 46.0), "front_edge_right": (34.25, 46.0),
        "cuff_left": (8.0, 24.0), "cuff_right": (56.0, 24.0),
    },
}


class AffinePart:
    """One piece of the piecewise-affine warp: an axis-aligned garment-space
    rectangle and the 2x3 affine taking garment coords to person coords."""

    def __init__(self, name: str, g_rect: tuple, matrix: np.ndarray):
        self.name = name
        self.g_rect = tuple(float(v) for v in g_rect)
        self.matrix = np.asarray(matrix, dtype=np.float64).reshape(2, 3)

    @classmethod
    def from_corners(cls, name, g_rect, p00, p10, p01) -> "AffinePart":
        """Affine sending the rect's (x0,y0) -> p00, (x1,y0) -> p10,
        (x0,y1) -> p01; the fourth corner follows by linearity."""
        x0, y0, x1, y1 = g_rect
        p00, p10, p01 = (np.asarray(p, dtype=np.float64) for p in (p00, p10, p01))
        ax = (p10 - p00) / (x1 - x0)
        ay = (p01 - p00) / (y1 - y0)
        b = p00 - ax * x0 - ay * y0
        return cls(name, g_rect, np.stack([ax, ay, b], axis=1))

    def contains_g(self, pt, eps: float = 1e-6) -> bool:
        x0, y0, x1, y1 = self.g_rect
        return (x0 - eps) <= pt[0] <= (x1 + eps) and (y0 - eps) <= pt[1] <= (y1 + eps)

    def forward(self, pt) -> np.ndarray:
        return self.matrix @ np.array([pt[0], pt[1], 1.0])

    def inverse(self, pt) -> np.ndarray:
        m, b = self.matrix[:, :2], self.matrix[:, 2]
        return np.linalg.solve(m, np.asarray(pt, dtype=np.float64) - b)

    def person_corners(self) -> np.ndarray:
        x0, y0, x1, y1 = self.g_rect
        return np.array([self.forward((x, y)) for (x, y) in
                         ((x0, y0), (x1, y0), (x1, y1), (x0, y1))])

    def to_dict(self) -> dict:
        return {"name": self.name, "g_rect": list(self.g_rect),
                "matrix": self.matrix.flatten().tolist()}

    @classmethod
    def from_dict(cls, d) -> "AffinePart":
        return cls(d["name"], d["g_rect"], np.asarray(d["matrix"]))


class CorrespondenceHandle:
    """Closed-form garment->person map; parts are listed in draw (z) order so
    the inverse resolves overlaps to the topmost rendered part."""

    def __init__(self, parts: list[AffinePart]):
        self.parts = list(parts)

    def forward(self, pt) -> tuple[float, float]:
        for part in self.parts:
            if part.contains_g(pt):
                q = snap(part.forward(pt))
                return float(q[0]), float(q[1])
        raise SupportDomainError(f"garment point {tuple(pt)} outside garment support")

    def inverse(self, pt) -> tuple[float, float]:
        for part in reversed(self.parts):
            g = part.inverse(pt)
            if part.contains_g(g):
                g = snap(g)
                return float(g[0]), float(g[1])
        raise SupportDomainError(f"person point {tuple(pt)} outside rendered garment")

    def garment_contains(self, pt) -> bool:
        return any(p.contains_g(pt) for p in self.parts)

    def compose(self, person_affine: np.ndarray | None = None,
                garment_affine: np.ndarray | None = None,
                garment_rect_map=None) -> "CorrespondenceHandle":
        """Return the handle composed with affine coordinate changes on the
        person side and/or an axis-aligned change on the garment side.
        garment_affine must map axis-aligned rects to axis-aligned rects
        (flips/scales/translations); garment_rect_map transforms g_rects."""
        parts = []
        for part in self.parts:
            m = np.vstack([part.matrix, [0.0, 0.0, 1.0]])
            if garment_affine is not None:
                ga = np.vstack([garment_affine, [0.0, 0.0, 1.0]])
                m = m @ np.linalg.inv(ga)
            if person_affine is not None:
                pa = np.vstack([person_affine, [0.0, 0.0, 1.0]])
                m = pa @ m
            rect = part.g_rect if garment_rect_map is None else garment_rect_map(part.g_rect)
            parts.append(AffinePart(part.name, rect, m[:2]))
        return CorrespondenceHandle(parts)

    def to_list(self) -> list:
        return [p.to_dict() for p in self.parts]

    @classmethod
    def from_list(cls, items) -> "CorrespondenceHandle":
        return cls([AffinePart.from_dict(d) for d in items])


def _unit(angle: float, side: int) -> np.ndarray:
    """Downward unit vector tilted `angle` radians outward; side -1 left, +1 right."""
    return np.array([side * np.sin(angle), np.cos(angle)])


def _limb_parts(prefix, g_main, g_liner, anchor, direction, length, halfw,
                cuff_u, axis: str, inward: bool = False) -> list[AffinePart]:
    """Map a garment limb rectangle (main zone plus liner zone beyond the
    cuff) onto an arm/leg segment. `axis` names the garment-space axis that
    runs along the limb; `cuff_u` is the cuff split position in [0, 1] along
    the limb; `inward` flips which end of the garment axis sits at the
    anchor (left sleeves read cuff-to-shoulder)."""
    d = np.asarray(direction, dtype=np.float64)
    n = np.array([-d[1], d[0]])
    a = np.asarray(anchor, dtype=np.float64)
    split = a + cuff_u * length * d
    tip = a + length * d

    def part(name, rect, at_lo, at_hi):
        """Affine with the limb running lo->hi along `axis`; the other axis
        spans the limb width from +halfw*n to -halfw*n."""
        x0, y0, x1, y1 = rect
        if axis == "x":
            p00, p10, p01 = at_lo + halfw * n, at_hi + halfw * n, at_lo - halfw * n
        else:
            p00, p10, p01 = at_lo + halfw * n, at_lo - halfw * n, at_hi + halfw * n
        return AffinePart.from_corners(name, rect, p00, p10, p01)

    if inward:
        return [part(prefix, g_main, split, a),
                part(prefix + "_liner", g_liner, tip, split)]
    return [part(prefix, g_main, a, split),
            part(prefix + "_liner", g_liner, split, tip)]


def build_handle(gspec: GarmentSpec, fspec: FigureSpec) -> CorrespondenceHandle:
    """Assemble the piecewise-affine warp for one (garment, figure) pairing."""
    f = fspec
    cx, sy, hy = f.cx, f.shoulder_y, f.hip_y
    sw = f.shoulder_halfw
    parts: list[AffinePart] = []
    cls = gspec.garment_class
    if cls in ("top", "coat"):
        tw = sw + 3.0
        bt = hy + 10.0
        if cls == "top":
            hem_y = hy - 2.0 if gspec.tuck else hy + 6.0
            z = _TOP
            parts.append(AffinePart.from_corners("torso", z["torso"],
                                                 (cx - tw, sy), (cx + tw, sy), (cx - tw, hem_y)))
            parts.append(AffinePart.from_corners("torso_liner", z["torso_liner"],
                                                 (cx - tw, hem_y), (cx + tw, hem_y), (cx - tw, bt)))
        else:
            z = _COAT
            ow = tw / 2.0
            s = gspec.open_angle * 11.0
            parts.append(AffinePart.from_corners("outer_l", z["outer_l"],
                                                 (cx - tw, sy), (cx - tw + ow, sy), (cx - tw, bt)))
            parts.append(AffinePart.from_corners("outer_r", z["outer_r"],
                                                 (cx + tw - ow, sy), (cx + tw, sy), (cx + tw - ow, bt)))
            parts.append(AffinePart.from_corners("panel_l", z["panel_l"],
                                                 (cx - tw + ow, sy), (cx, sy), (cx - tw + ow - s, bt)))
            parts.append(AffinePart.from_corners("panel_r", z["panel_r"],
                                                 (cx, sy), (cx + tw - ow, sy), (cx + s, bt)))
        cuff_u = 0.92 - 0.62 * gspec.roll
        halfw = 2.2
        anchor_l = np.array([cx - sw, sy + 1.0])
        anchor_r = np.array([cx + sw, sy + 1.0])
        parts += _limb_parts("sleeve_l", z["sleeve_l"], z["sleeve_l_liner"],
                             anchor_l, _unit(f.arm_angle_left, -1), f.arm_len, halfw,
                             cuff_u, axis="x", inward=True)
        parts += _limb_parts("sleeve_r", z["sleeve_r"], z["sleeve_r_liner"],
                             anchor_r, _unit(f.arm_angle_right, +1), f.arm_len, halfw,
                             cuff_u, axis="x", inward=False)
    else:  # pants
        z = _PANTS
        bw = f.hip_halfw + 4.0
        wb_top, wb_bot = hy - 5.0, hy + 3.0
        w_y = hy - 3.0 if gspec.tuck else hy + 1.0
        parts.append(AffinePart.from_corners("band_upper", z["band_upper"],
                                             (cx - bw, wb_top), (cx + bw, wb_top), (cx - bw, w_y)))
        parts.append(AffinePart.from_corners("band_lower", z["band_lower"],
                                             (cx - bw, w_y), (cx + bw, w_y), (cx - bw, wb_bot)))
        cuff_u = 0.92 - 0.55 * gspec.roll
        halfw = 2.5
        anchor_l = np.array([cx - (f.hip_halfw - 1.0), wb_bot])
        anchor_r = np.array([cx + (f.hip_halfw - 1.0), wb_bot])
        parts += _limb_parts("leg_l", z["leg_l"], z["leg_l_liner"],
                             anchor_l, _unit(f.leg_angle_left, -1), f.leg_len, halfw,
                             cuff_u, axis="y")
        parts += _limb_parts("leg_r", z["leg_r"], z["leg_r_liner"],
                             anchor_r, _unit(f.leg_angle_right, +1), f.leg_len, halfw,
                             cuff_u, axis="y")
    return CorrespondenceHandle(parts)


def _garment_texture(gspec: GarmentSpec, size: int = IMAGE_SIZE) -> np.ndarray:
    """Flat garment image: pattern zones, liner zones, and fiducial markers."""
    img = np.empty((3, size, size), dtype=np.float32)
    img[:] = np.asarray(BACKGROUND, dtype=np.float32)[:, None, None]
    yy, xx = np.mgrid[0:size, 0:size]
    base = np.asarray(gspec.base_color, dtype=np.float32)
    pat = np.asarray(gspec.pattern_color, dtype=np.float32)
    if gspec.pattern == "stripes_h":
        sel = (yy // gspec.pattern_period) % 2 == 0
    elif gspec.pattern == "stripes_v":
        sel = (xx // gspec.pattern_period) % 2 == 0
    else:
        sel = ((xx // gspec.pattern_period) + (yy // gspec.pattern_period)) % 2 == 0
    patterned = np.where(sel[None], base[:, None, None], pat[:, None, None])
    liner = np.asarray(gspec.liner_color, dtype=np.float32)
    for name, (x0, y0, x1, y1) in _GARMENT_ZONES[gspec.garment_class].items():
        zone = (xx >= x0) & (xx <= x1) & (yy >= y0) & (yy <= y1)
        if name.endswith("liner") or name == "band_upper":
            img[:, zone] = liner[:, None]
        else:
            img[:, zone] = patterned[:, zone]
    for _name, color, (mx, my) in gspec.markers():
        dot = (xx - mx) ** 2 + (yy - my) ** 2 <= MARKER_RADIUS ** 2
        img[:, dot] = np.asarray(color, dtype=np.float32)[:, None]
    return img


def _draw_disk(img, cx, cy, r, color):
    h, w = img.shape[1:]
    yy, xx = np.mgrid[0:h, 0:w]
    sel = (xx - cx) ** 2 + (yy - cy) ** 2 <= r * r
    img[:, sel] = np.asarray(color, dtype=np.float32)[:, None]


def _draw_segment(img, a, b, halfw, color):
    h, w = img.shape[1:]
    yy, xx = np.mgrid[0:h, 0:w]
    a = np.asarray(a, dtype=np.float64)
    d = np.asarray(b, dtype=np.float64) - a
    L = np.hypot(*d)
    d = d / max(L, 1e-9)
    px, py = xx - a[0], yy - a[1]
    u = px * d[0] + py * d[1]
    v = -px * d[1] + py * d[0]
    sel = (u >= 0) & (u <= L) & (np.abs(v) <= halfw)
    img[:, sel] = np.asarray(color, dtype=np.float32)[:, None]


def _draw_body(img, gspec: GarmentSpec, fspec: FigureSpec):
    f = fspec
    cx, sy, hy = f.cx, f.shoulder_y, f.hip_y
    _draw_segment(img, (cx, sy - 2), (cx, sy + 2), 1.5, f.body_color)  # neck
    # torso as two stacked segments for a tapered silhouette
    _draw_segment(img, (cx, sy + 1), (cx, hy + 2), f.shoulder_halfw - 0.5, f.body_color)
    _draw_disk(img, cx, sy - 6.0, 4.0, f.body_color)
    bare_arms = gspec.garment_class == "pants"
    bare_legs = gspec.garment_class in ("top", "coat")
    if bare_arms:
        for side, ang in ((-1, f.arm_angle_left), (+1, f.arm_angle_right)):
            a = np.array([cx + side * f.shoulder_halfw, sy + 1.0])
            _draw_segment(img, a, a + f.arm_len * _unit(ang, side), 2.0, f.body_color)
    if bare_legs:
        for side, ang in ((-1, f.leg_angle_left), (+1, f.leg_angle_right)):
            a = np.array([cx + side * (f.hip_halfw - 1.0), hy + 2.0])
            _draw_segment(img, a, a + f.leg_len * _unit(ang, side), 2.0, f.body_color)


def _render_parts(person: np.ndarray, texture: np.ndarray,
                  handle: CorrespondenceHandle) -> np.ndarray:
    """Draw every part onto the person canvas by inverse-affine nearest
    sampling; returns the garment-support mask."""
    h, w = person.shape[1:]
    mask = np.zeros((h, w), dtype=np.uint8)
    th, tw = texture.shape[1:]
    for part in handle.parts:
        corners = part.person_corners()
        x_lo = max(0, int(np.floor(corners[:, 0].min())))
        x_hi = min(w - 1, int(np.ceil(corners[:, 0].max())))
        y_lo = max(0, int(np.floor(corners[:, 1].min())))
        y_hi = min(h - 1, int(np.ceil(corners[:, 1].max())))
        if x_hi < x_lo or y_hi < y_lo:
            continue
        yy, xx = np.mgrid[y_lo:y_hi + 1, x_lo:x_hi + 1]
        pts = np.stack([xx.ravel(), yy.ravel()], axis=0).astype(np.float64)
        m, b = part.matrix[:, :2], part.matrix[:, 2]
        g = np.linalg.solve(m, pts - b[:, None])
        gx0, gy0, gx1, gy1 = part.g_rect
        eps = 1e-9
        inside = ((g[0] >= gx0 - eps) & (g[0] <= gx1 + eps) &
                  (g[1] >= gy0 - eps) & (g[1] <= gy1 + eps))
        if not inside.any():
            continue
        sx = np.clip(np.rint(np.clip(g[0, inside], gx0, gx1)).astype(int), 0, tw - 1)
        sy = np.clip(np.rint(np.clip(g[1, inside], gy0, gy1)).astype(int), 0, th - 1)
        px = xx.ravel()[inside]
        py = yy.ravel()[inside]
        person[:, py, px] = texture[:, sy, sx]
        mask[py, px] = 1
    return mask


@dataclass
class TryOnSample:
    sample_id: str
    garment_class: str
    person: np.ndarray                  # (3, H, W)
    garment: np.ndarray                 # (3, H, W) flat garment image
    mask: np.ndarray                    # (H, W) uint8, garment support
    pose: np.ndarray                    # (J, 2) keypoint coordinates
    landmarks: dict                     # name -> (gx, gy, px, py)
    handle: CorrespondenceHandle
    point_pool: list = field(default_factory=list)   # [{"g":[x,y],"p":[x,y]}]
    markers: list = field(default_factory=list)      # (name, color, g_coord)
    seed: int = 0

    @property
    def shape(self) -> tuple[int, int]:
        return self.person.shape[1], self.person.shape[2]

    def gt_correspond(self, garment_point) -> tuple[float, float]:
        return self.handle.forward(garment_point)

    def gt_correspond_inverse(self, person_point) -> tuple[float, float]:
        return self.handle.inverse(person_point)

    def save(self, out_dir: Path):
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        save_png(out_dir / "person.png", self.person)
        save_png(out_dir / "garment.png", self.garment)
        save_png(out_dir / "mask.png", self.mask)
        (out_dir / "pose.json").write_text(json.dumps(self.pose.tolist()))
        (out_dir / "landmarks.json").write_text(json.dumps(
            {k: [float(v) for v in vals] for k, vals in self.landmarks.items()}))
        (out_dir / "points_gt.json").write_text(json.dumps(self.point_pool))
        meta = {
            "id": self.sample_id,
            "class": self.garment_class,
            "seed": self.seed,
            "handle": self.handle.to_list(),
            "markers": [[n, list(c), list(g)] for n, c, g in self.markers],
        }
        (out_dir / "meta.json").write_text(json.dumps(meta, sort_keys=True))

    @classmethod
    def load(cls, sample_dir: Path) -> "TryOnSample":
        d = Path(sample_dir)
        meta = json.loads((d / "meta.json").read_text())
        return cls(
            sample_id=meta["id"],
            garment_class=meta["class"],
            person=load_png(d / "person.png"),
            garment=load_png(d / "garment.png"),
            mask=load_png(d / "mask.png"),
            pose=np.asarray(json.loads((d / "pose.json").read_text()), dtype=np.float64),
            landmarks={k: tuple(v) for k, v in
                       json.loads((d / "landmarks.json").read_text()).items()},
            handle=CorrespondenceHandle.from_list(meta["handle"]),
            point_pool=json.loads((d / "points_gt.json").read_text()),
            markers=[(n, tuple(c), tuple(g)) for n, c, g in meta["markers"]],
            seed=meta["seed"],
        )


def pose_keypoints(fspec: FigureSpec) -> np.ndarray:
    f = fspec
    cx, sy, hy = f.cx, f.shoulder_y, f.hip_y
    pts = [
        (cx, sy - 6.0), (cx, sy - 1.0),
        (cx - f.shoulder_halfw, sy + 1.0), (cx + f.shoulder_halfw, sy + 1.0),
    ]
    for side, ang in ((-1, f.arm_angle_left), (+1, f.arm_angle_right)):
        a = np.array([cx + side * f.shoulder_halfw, sy + 1.0])
        pts.append(tuple(a + 0.55 * f.arm_len * _unit(ang, side)))
    pts += [(cx - f.hip_halfw, hy), (cx + f.hip_halfw, hy)]
    return snap(np.array(pts, dtype=np.float64))


def render_pose_map(pose: np.ndarray, size: int = IMAGE_SIZE, sigma: float = 1.5) -> np.ndarray:
    """(J, 2) keypoints -> (J, size, size) Gaussian heatmaps, one per joint."""
    yy, xx = np.mgrid[0:size, 0:size]
    maps = np.empty((len(pose), size, size), dtype=np.float32)
    for j, (x, y) in enumerate(pose):
        maps[j] = np.exp(-((xx - x) ** 2 + (yy - y) ** 2) / (2.0 * sigma * sigma))
    return maps


def _validate_in_frame(handle: CorrespondenceHandle, fspec: FigureSpec, size: int):
    lo, hi = 0.5, size - 1.5
    for part in handle.parts:
        c = part.person_corners()
        if c.min() < lo or c.max() > hi:
            raise ArticulationError(
                f"part {part.name} leaves the frame: bounds {c.min():.1f}..{c.max():.1f}")
    tips = []
    for side, ang in ((-1, fspec.leg_angle_left), (+1, fspec.leg_angle_right)):
        a = np.array([fspec.cx + side * (fspec.hip_halfw - 1.0), fspec.hip_y + 2.0])
        tips.append(a + fspec.leg_len * _unit(ang, side))
    for side, ang in ((-1, fspec.arm_angle_left), (+1, fspec.arm_angle_right)):
        a = np.array([fspec.cx + side * fspec.shoulder_halfw, fspec.shoulder_y + 1.0])
        tips.append(a + fspec.arm_len * _unit(ang, side))
    for t in tips:
        if not (lo <= t[0] <= hi and lo <= t[1] <= hi):
            raise ArticulationError(f"limb tip {t} leaves the frame")


def _sample_mask_points(mask: np.ndarray, n: int, boundary_fraction: float,
                        rng: np.random.Generator) -> list[tuple[int, int]]:
    """Mixed boundary/interior query sampling used to pre-bake training pools."""
    ys, xs = np.nonzero(mask)
    pad = np.pad(mask, 1)
    nb = (pad[:-2, 1:-1] & pad[2:, 1:-1] & pad[1:-1, :-2] & pad[1:-1, 2:]).astype(bool)
    boundary = mask.astype(bool) & ~nb
    interior = mask.astype(bool) & nb
    out = []
    n_b = int(np.ceil(n * boundary_fraction))
    for pool_mask, want in ((boundary, n_b), (interior, n - n_b)):
        pys, pxs = np.nonzero(pool_mask)
        if len(pys) == 0:
            continue
        take = min(want, len(pys))
        idx = rng.choice(len(pys), size=take, replace=False)
        out += [(int(pxs[i]), int(pys[i])) for i in idx]
    return out[:n]


def generate_sample(gspec: GarmentSpec, fspec: FigureSpec, seed: int,
                    sample_id: str = "sample", pool_size: int = 24) -> TryOnSample:
    """Render one deterministic triplet; same inputs give identical bytes."""
    size = IMAGE_SIZE
    handle = build_handle(gspec, fspec)
    _validate_in_frame(handle, fspec, size)
    texture = _garment_texture(gspec, size)
    person = np.empty((3, size, size), dtype=np.float32)
    person[:] = np.asarray(BACKGROUND, dtype=np.float32)[:, None, None]
    _draw_body(person, gspec, fspec)
    mask = _render_parts(person, texture, handle)
    landmarks = {}
    for name, _color, (gx, gy) in gspec.markers():
        px, py = handle.forward((gx, gy))
        landmarks[name] = (gx, gy, px, py)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xD15C]))
    pool = []
    for (qx, qy) in _sample_mask_points(mask, pool_size, 0.25, rng):
        gx, gy = handle.inverse((qx, qy))
        pool.append({"g": [gx, gy], "p": [float(qx), float(qy)]})
    return TryOnSample(
        sample_id=sample_id, garment_class=gspec.garment_class,
        person=person, garment=texture, mask=mask,
        pose=pose_keypoints(fspec), landmarks=landmarks, handle=handle,
        point_pool=pool, markers=gspec.markers(), seed=seed,
    )


def random_specs(rng: np.random.Generator, garment_class: str | None = None
                 ) -> tuple[GarmentSpec, FigureSpec]:
    cls = garment_class or CLASSES[int(rng.integers(len(CLASSES)))]

    def mid_color():
        return tuple(np.round(rng.uniform(0.30, 0.70, size=3), 3).tolist())

    base = mid_color()
    pat = mid_color()
    while color_gap(base, pat) < 0.12:
        pat = mid_color()
    gspec = GarmentSpec(
        garment_class=cls, base_color=base, pattern_color=pat, liner_color=mid_color(),
        pattern=("stripes_h", "stripes_v", "checker")[int(rng.integers(3))],
        pattern_period=int(rng.integers(3, 7)),
        roll=float(np.round(rng.uniform(), 3)),
        open_angle=float(np.round(rng.uniform(), 3)),
        tuck=bool(rng.integers(2)),
    )
    sy = float(rng.uniform(17.0, 20.0))
    torso_len = float(rng.uniform(14.0, 17.0))
    hip_y = sy + torso_len
    leg_len = float(min(rng.uniform(17.0, 20.0), 58.0 - hip_y - 3.0))
    fspec = FigureSpec(
        cx=float(rng.uniform(29.0, 35.0)),
        shoulder_y=sy,
        torso_len=torso_len,
        shoulder_halfw=float(rng.uniform(8.0, 9.0)),
        arm_angle_left=float(rng.uniform(np.deg2rad(10), np.deg2rad(28))),
        arm_angle_right=float(rng.uniform(np.deg2rad(10), np.deg2rad(28))),
        arm_len=float(rng.uniform(17.0, 20.0)),
        leg_angle_left=float(rng.uniform(np.deg2rad(3), np.deg2rad(14))),
        leg_angle_right=float(rng.uniform(np.deg2rad(3), np.deg2rad(14))),
        leg_len=leg_len,
    )
    return gspec, fspec


def build_dataset(n: int, seed: int, out_dir: Path, bench_per_class: int = 0,
                  val_fraction: float = 0.1) -> dict:
    """Write n train/val samples (90/10 split) plus an optional class-balanced
    benchmark split; returns the manifest (also written to manifest.json)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    records = []
    n_val = int(round(n * val_fraction))
    plan = [("train" if i < n - n_val else "val", CLASSES[i % 3], i) for i in range(n)]
    plan += [("bench", CLASSES[j % 3], n + j) for j in range(3 * bench_per_class)]
    for split, cls, idx in plan:
        rng = np.random.default_rng(np.random.SeedSequence([seed, idx]))
        gspec, fspec = random_specs(rng, garment_class=cls)
        sid = f"s{idx:05d}"
        sample = generate_sample(gspec, fspec, seed=idx, sample_id=sid)
        sdir = out / split / sid
        sample.save(sdir)
        digest = hashlib.sha256()
        for fname in ("person.png", "garment.png", "mask.png", "pose.json",
                      "landmarks.json", "points_gt.json", "meta.json"):
            digest.update((sdir / fname).read_bytes())
        records.append({"id": sid, "split": split, "class": cls,
                        "digest": digest.hexdigest()})
    total = hashlib.sha256(json.dumps(records, sort_keys=True).encode()).hexdigest()
    manifest = {
        "seed": seed, "n": n, "bench_per_class": bench_per_class,
        "counts": {s: sum(1 for r in records if r["split"] == s)
                   for s in ("train", "val", "bench")},
        "samples": records, "digest": total,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return manifest


def load_split(data_dir: Path, split: str) -> list[TryOnSample]:
    data_dir = Path(data_dir)
    manifest = json.loads((data_dir / "manifest.json").read_text())
    return [TryOnSample.load(data_dir / split / r["id"])
            for r in manifest["samples"] if r["split"] == split]
