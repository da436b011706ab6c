"""Image plumbing: 8-bit RGB arrays, PNG codecs, content-addressed identity.

Everything downstream identifies an image by a digest of its decoded pixel
content, never of the file container, so re-encoding a PNG cannot change an
image's identity.
"""

from __future__ import annotations

import base64
import hashlib
import io
import struct
from dataclasses import dataclass

import numpy as np
from PIL import Image


@dataclass(frozen=True)
class ImageRef:
    """Handle to a stored image: content id, dimensions, storage locator."""

    image_id: str
    width: int
    height: int
    storage_path: str = ""


def as_rgb8(array: np.ndarray) -> np.ndarray:
    """Validate and return an (H, W, 3) uint8 array."""
    if array.ndim != 3 or array.shape[2] != 3:
        raise ValueError(f"expected (H, W, 3) RGB array, got shape {array.shape}")
    if array.dtype != np.uint8:
        raise ValueError(f"expected uint8 pixels, got {array.dtype}")
    return array


def pixel_digest(array: np.ndarray) -> str:
    """SHA-256 over decoded pixel content (dims + raw RGB bytes)."""
    array = as_rgb8(np.ascontiguousarray(array))
    h = hashlib.sha256()
    h.update(b"rgb8")
    h.update(struct.pack("<II", array.shape[1], array.shape[0]))
    h.update(array.tobytes())
    return h.hexdigest()


def encode_png(array: np.ndarray, compress_level: int = 3) -> bytes:
    """Encode an RGB array as PNG bytes."""
    array = as_rgb8(array)
    buf = io.BytesIO()
    Image.fromarray(array, mode="RGB").save(buf, format="PNG", compress_level=compress_level)
    return buf.getvalue()


def decode_png(data: bytes) -> np.ndarray:
    """Decode PNG bytes to an (H, W, 3) uint8 array."""
    with Image.open(io.BytesIO(data)) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8)


def png_to_b64(data: bytes) -> str:
    return base64.b64encode(data).decode("ascii")


def b64_to_png(text: str) -> bytes:
    return base64.b64decode(text.encode("ascii"))
