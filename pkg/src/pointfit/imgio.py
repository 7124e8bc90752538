"""Image array conventions and PNG helpers.

Images are float32 arrays shaped (3, H, W) with values in [0, 1]; masks are
uint8 (H, W) with values {0, 1}. Coordinates are (x, y) with the origin at the
top-left pixel center, x rightward, y downward.
"""

from __future__ import annotations

import base64
import io

import numpy as np
from PIL import Image as PILImage


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)


def from_uint8(arr: np.ndarray) -> np.ndarray:
    return arr.astype(np.float32) / 255.0


def save_png(path, img: np.ndarray):
    """(3, H, W) float image or (H, W) mask to PNG."""
    if img.ndim == 3:
        PILImage.fromarray(to_uint8(img).transpose(1, 2, 0)).save(path)
    else:
        PILImage.fromarray((np.asarray(img) > 0).astype(np.uint8) * 255).save(path)


def load_png(path) -> np.ndarray:
    arr = np.asarray(PILImage.open(path))
    if arr.ndim == 2:
        return (arr > 127).astype(np.uint8)
    return from_uint8(arr[..., :3].transpose(2, 0, 1))


def png_bytes(img: np.ndarray) -> bytes:
    buf = io.BytesIO()
    if img.ndim == 3:
        PILImage.fromarray(to_uint8(img).transpose(1, 2, 0)).save(buf, format="PNG")
    else:
        PILImage.fromarray((np.asarray(img) > 0).astype(np.uint8) * 255).save(buf, format="PNG")
    return buf.getvalue()


def png_b64(img: np.ndarray) -> str:
    return base64.b64encode(png_bytes(img)).decode("ascii")


def b64_png(data: str) -> np.ndarray:
    raw = base64.b64decode(data, validate=True)
    arr = np.asarray(PILImage.open(io.BytesIO(raw)).convert("RGB"))
    return from_uint8(arr.transpose(2, 0, 1))


def b64_mask(data: str) -> np.ndarray:
    raw = base64.b64decode(data, validate=True)
    arr = np.asarray(PILImage.open(io.BytesIO(raw)).convert("L"))
    return (arr > 127).astype(np.uint8)
