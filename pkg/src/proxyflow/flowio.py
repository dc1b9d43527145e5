"""Readers/writers for flow and image formats, plus flow visualization.

Flow interchange formats:
  * ``.flo``: float magic 202021.25, int32 width/height, then row-major
    interleaved float32 (u, v) pairs; little-endian throughout.
  * 16-bit PNG: channels (u, v, valid) with ``stored = flow * 64 + 2**15``,
    so flows in (-512, 512) px round-trip at 1/64 px quantization.
"""

from __future__ import annotations

import logging
import struct
from pathlib import Path

import cv2
import numpy as np
from PIL import Image

from .flowfield import FlowField

log = logging.getLogger(__name__)

FLO_MAGIC = 202021.25
PNG_FLOW_SCALE = 64.0
PNG_FLOW_OFFSET = 2**15


class FlowFormatError(ValueError):
    """Malformed flow file (bad magic, truncated payload, wrong channel count)."""


# ---------------------------------------------------------------------------
# Middlebury .flo
# ---------------------------------------------------------------------------

def write_flo(path, flow: FlowField) -> None:
    uv = flow.uv()
    if not np.all(np.isfinite(uv)):
        raise ValueError("cannot write non-finite flow values to .flo")
    h, w = flow.shape
    data = np.empty((h, w, 2), dtype="<f4")
    data[..., 0] = flow.u
    data[..., 1] = flow.v
    with open(path, "wb") as f:
        f.write(struct.pack("<f", FLO_MAGIC))
        f.write(struct.pack("<ii", w, h))
        f.write(data.tobytes())


def read_flo(path) -> FlowField:
    raw = Path(path).read_bytes()
    if len(raw) < 12:
        raise FlowFormatError(f"{path}: truncated header, {len(raw)} bytes < 12")
    (magic,) = struct.unpack_from("<f", raw, 0)
    if magic != FLO_MAGIC:
        raise FlowFormatError(f"{path}: bad magic {magic!r} at byte 0")
    w, h = struct.unpack_from("<ii", raw, 4)
    if w <= 0 or h <= 0:
        raise FlowFormatError(f"{path}: invalid dimensions {w}x{h} at byte 4")
    expected = 12 + 2 * 4 * w * h
    if len(raw) < expected:
        raise FlowFormatError(
            f"{path}: truncated payload, {len(raw)} bytes < {expected} expected from byte 12"
        )
    data = np.frombuffer(raw, dtype="<f4", count=2 * w * h, offset=12).reshape(h, w, 2)
    return FlowField(data[..., 0], data[..., 1])


# ---------------------------------------------------------------------------
# 16-bit PNG (KITTI convention)
# ---------------------------------------------------------------------------

def write_kitti_flow(path, flow: FlowField) -> None:
    limit = (PNG_FLOW_OFFSET - 1) / PNG_FLOW_SCALE
    uv = flow.uv()
    clipped = np.clip(uv, -limit, limit)
    if np.any((uv != clipped) & flow.valid):
        log.warning("flow values outside (-%g, %g) px clamped when writing %s", limit, limit, path)
    stored = np.round(clipped * PNG_FLOW_SCALE + PNG_FLOW_OFFSET).astype(np.uint16)
    img = np.zeros((*flow.shape, 3), dtype=np.uint16)
    img[..., 0] = np.where(flow.valid, stored[0], 0)
    img[..., 1] = np.where(flow.valid, stored[1], 0)
    img[..., 2] = flow.valid.astype(np.uint16)
    # cv2 writes BGR, so reverse to keep (u, v, valid) channel order in the file
    if not cv2.imwrite(str(path), img[..., ::-1]):
        raise IOError(f"failed to write {path}")


def read_kitti_flow(path) -> FlowField:
    img = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if img is None:
        raise FlowFormatError(f"{path}: not readable as an image")
    if img.ndim != 3 or img.shape[2] != 3 or img.dtype != np.uint16:
        raise FlowFormatError(f"{path}: expected 3-channel 16-bit PNG, got {img.dtype} {img.shape}")
    img = img[..., ::-1]  # BGR -> (u, v, valid)
    valid = img[..., 2] > 0
    u = (img[..., 0].astype(np.float32) - PNG_FLOW_OFFSET) / PNG_FLOW_SCALE
    v = (img[..., 1].astype(np.float32) - PNG_FLOW_OFFSET) / PNG_FLOW_SCALE
    u[~valid] = 0.0
    v[~valid] = 0.0
    return FlowField(u, v, valid)


def read_flow(path) -> FlowField:
    """Dispatch on extension: .flo or 16-bit PNG."""
    path = Path(path)
    if path.suffix == ".flo":
        return read_flo(path)
    return read_kitti_flow(path)


# ---------------------------------------------------------------------------
# Images
# ---------------------------------------------------------------------------

def read_image(path) -> np.ndarray:
    """Load an 8-bit PNG/JPEG as float32 in [0, 1]; RGB stays 3-channel, grayscale 2D."""
    with Image.open(path) as im:
        if im.mode in ("L", "I;16"):
            arr = np.asarray(im.convert("L"), dtype=np.float32) / 255.0
        else:
            arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return arr


def read_image_gray(path) -> np.ndarray:
    arr = read_image(path)
    if arr.ndim == 3:
        arr = rgb_to_gray(arr)
    return arr


def rgb_to_gray(rgb: np.ndarray) -> np.ndarray:
    """ITU-R BT.601 luma."""
    return (0.299 * rgb[..., 0] + 0.587 * rgb[..., 1] + 0.114 * rgb[..., 2]).astype(np.float32)


def write_image(path, img: np.ndarray) -> None:
    """Save a float image in [0, 1] (2D grayscale or HxWx3 RGB) as 8-bit PNG."""
    arr = np.clip(np.asarray(img, dtype=np.float32), 0.0, 1.0)
    arr8 = np.round(arr * 255.0).astype(np.uint8)
    Image.fromarray(arr8).save(path)


# ---------------------------------------------------------------------------
# Visualization
# ---------------------------------------------------------------------------

def flow_to_color(flow: FlowField, max_magnitude: float | None = None) -> np.ndarray:
    """Color-wheel rendering: hue = direction, saturation = magnitude, invalid = black.

    Returns HxWx3 uint8 RGB. ``max_magnitude=None`` normalizes by a robust
    (99th percentile) maximum over valid pixels.
    """
    from matplotlib.colors import hsv_to_rgb

    mag = flow.magnitude()
    if max_magnitude is None:
        valid_mags = mag[flow.valid]
        max_magnitude = float(np.percentile(valid_mags, 99)) if valid_mags.size else 1.0
    max_magnitude = max(max_magnitude, 1e-8)

    hue = (np.arctan2(-flow.v, -flow.u) / np.pi + 1.0) / 2.0  # [0, 1), 0 deg motion -> cyan-ish
    sat = np.clip(mag / max_magnitude, 0.0, 1.0)
    val = np.ones_like(sat)
    rgb = hsv_to_rgb(np.stack([hue, sat, val], axis=-1))
    rgb[~flow.valid] = 0.0
    return np.round(rgb * 255.0).astype(np.uint8)
