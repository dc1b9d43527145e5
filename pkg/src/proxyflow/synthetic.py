"""Synthetic moving-texture sequences with exact ground-truth flow.

Textured layers translate (optionally accelerate) over a constant background.
Because motion is analytic, per-pixel flow is exact and occlusion can be
decided by z-order reasoning in continuous coordinates: a pixel is invalid in
the flow field when its target position falls outside the canvas or under a
higher layer at t+1.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np

from .flowfield import FlowField

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SyntheticConfig:
    width: int = 64
    height: int = 32
    n_frames: int = 20
    n_layers: int = 2
    velocity_range: tuple[float, float] = (-4.0, 4.0)
    acceleration_range: tuple[float, float] = (0.0, 0.0)
    layer_size_range: tuple[float, float] = (0.35, 0.75)  # fraction of canvas
    background_value: float = 0.35
    full_frame: bool = False  # one canvas-covering layer: pure global translation
    noise_sigma: float = 0.0  # per-frame additive observation noise (intensity units)
    texture_cell: int = 4  # texture grain size in px (smaller = sharper detail)


@dataclass
class Layer:
    texture: np.ndarray  # (h, w) float32 in [0, 1]
    position: tuple[float, float]  # top-left (x, y) at t = 0
    velocity: tuple[float, float]  # (vx, vy) px/frame
    acceleration: tuple[float, float] = (0.0, 0.0)
    z: int = 0

    @classmethod
    def textured(cls, rng: np.random.Generator, size: tuple[int, int], position, velocity,
                 acceleration=(0.0, 0.0), z: int = 0, cell: int = 4) -> "Layer":
        """Multi-octave noise texture: structure at every scale from ``cell``
        px up, so coarse levels of an image pyramid stay trackable."""
        w, h = size
        tex = np.zeros((h, w), np.float32)
        c = max(1, cell)
        n_octaves = 0
        while n_octaves < 6:
            bh, bw = max(2, round(h / c)), max(2, round(w / c))
            base = rng.uniform(-1.0, 1.0, (bh, bw)).astype(np.float32)
            tex += cv2.resize(base, (w, h), interpolation=cv2.INTER_LINEAR)
            n_octaves += 1
            if bh == 2 and bw == 2:
                break
            c *= 2
        lo, hi = float(tex.min()), float(tex.max())
        tex = 0.05 + 0.9 * (tex - lo) / max(hi - lo, 1e-6)
        return cls(tex, tuple(position), tuple(velocity), tuple(acceleration), z)

    def position_at(self, t: float) -> tuple[float, float]:
        return (
            self.position[0] + self.velocity[0] * t + 0.5 * self.acceleration[0] * t * t,
            self.position[1] + self.velocity[1] * t + 0.5 * self.acceleration[1] * t * t,
        )

    def covers(self, qx: np.ndarray, qy: np.ndarray, t: float) -> np.ndarray:
        px, py = self.position_at(t)
        h, w = self.texture.shape
        return (qx >= px) & (qx <= px + w - 1) & (qy >= py) & (qy <= py + h - 1)


@dataclass
class SyntheticSequence:
    frames: np.ndarray  # (T, H, W) float32 in [0, 1]
    flows: list[FlowField]  # entry t: flow t -> t+1


def _bilinear(tex: np.ndarray, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    h, w = tex.shape
    x0 = np.clip(np.floor(x).astype(int), 0, w - 1)
    y0 = np.clip(np.floor(y).astype(int), 0, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = np.clip(x - x0, 0.0, 1.0)
    fy = np.clip(y - y0, 0.0, 1.0)
    return (
        tex[y0, x0] * (1 - fx) * (1 - fy)
        + tex[y0, x1] * fx * (1 - fy)
        + tex[y1, x0] * (1 - fx) * fy
        + tex[y1, x1] * fx * fy
    ).astype(np.float32)


def render_sequence(layers: list[Layer], cfg: SyntheticConfig) -> SyntheticSequence:
    layers = sorted(layers, key=lambda l: l.z)
    h, w = cfg.height, cfg.width
    xs, ys = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))

    frames = np.empty((cfg.n_frames, h, w), dtype=np.float32)
    owners = np.empty((cfg.n_frames, h, w), dtype=np.int32)
    for t in range(cfg.n_frames):
        frame = np.full((h, w), cfg.background_value, dtype=np.float32)
        owner = np.full((h, w), -1, dtype=np.int32)
        for li, layer in enumerate(layers):
            px, py = layer.position_at(t)
            m = layer.covers(xs, ys, t)
            if m.any():
                frame[m] = _bilinear(layer.texture, xs[m] - px, ys[m] - py)
                owner[m] = li
        frames[t] = frame
        owners[t] = owner

    flows = []
    for t in range(cfg.n_frames - 1):
        u = np.zeros((h, w), dtype=np.float32)
        v = np.zeros((h, w), dtype=np.float32)
        owner = owners[t]
        for li, layer in enumerate(layers):
            m = owner == li
            if m.any():
                x0, y0 = layer.position_at(t)
                x1, y1 = layer.position_at(t + 1)
                u[m] = x1 - x0
                v[m] = y1 - y0
        qx = xs + u
        qy = ys + v
        valid = (qx >= 0) & (qx <= w - 1) & (qy >= 0) & (qy <= h - 1)
        for li, layer in enumerate(layers):
            valid &= ~((owner < li) & layer.covers(qx, qy, t + 1))
        flows.append(FlowField(u, v, valid))
    return SyntheticSequence(frames, flows)


def _add_noise(seq: SyntheticSequence, sigma: float, rng: np.random.Generator) -> SyntheticSequence:
    if sigma > 0:
        noisy = seq.frames + rng.normal(0.0, sigma, seq.frames.shape).astype(np.float32)
        seq.frames = np.clip(noisy, 0.0, 1.0)
    return seq


def generate_synthetic_sequence(cfg: SyntheticConfig, rng: np.random.Generator) -> SyntheticSequence:
    if cfg.n_layers == 0 and not cfg.full_frame:
        return _add_noise(render_sequence([], cfg), cfg.noise_sigma, rng)

    def rand_velocity():
        return (float(rng.uniform(*cfg.velocity_range)), float(rng.uniform(*cfg.velocity_range)))

    def rand_accel():
        return (float(rng.uniform(*cfg.acceleration_range)), float(rng.uniform(*cfg.acceleration_range)))

    layers = []
    if cfg.full_frame:
        vel = rand_velocity()
        acc = rand_accel()
        t_end = cfg.n_frames - 1
        reach = max(
            abs(vel[0] * t_end + 0.5 * acc[0] * t_end**2),
            abs(vel[1] * t_end + 0.5 * acc[1] * t_end**2),
        )
        margin = int(np.ceil(reach)) + 2
        size = (cfg.width + 2 * margin, cfg.height + 2 * margin)
        layers.append(Layer.textured(rng, size, (-margin, -margin), vel, acc, z=0, cell=cfg.texture_cell))
    else:
        for z in range(cfg.n_layers):
            lw = max(4, int(round(rng.uniform(*cfg.layer_size_range) * cfg.width)))
            lh = max(4, int(round(rng.uniform(*cfg.layer_size_range) * cfg.height)))
            pos = (
                float(rng.uniform(-lw / 2, cfg.width - lw / 2)),
                float(rng.uniform(-lh / 2, cfg.height - lh / 2)),
            )
            layers.append(Layer.textured(rng, (lw, lh), pos, rand_velocity(), rand_accel(), z=z,
                                          cell=cfg.texture_cell))
    return _add_noise(render_sequence(layers, cfg), cfg.noise_sigma, rng)


# ---------------------------------------------------------------------------
# On-disk corpora
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CorpusConfig:
    n_sequences: int = 8
    sequence: SyntheticConfig = field(default_factory=SyntheticConfig)
    corpus_tag: str = "synthetic"


def write_synthetic_corpus(out_dir, cfg: CorpusConfig, seed: int) -> Path:
    """Materialize frames (8-bit PNG), flow (.flo + validity PNG), and a manifest."""
    from .data import ManifestEntry, write_manifest
    from .flowio import write_flo, write_image

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for i in range(cfg.n_sequences):
        rng = np.random.default_rng([seed, i])
        seq = generate_synthetic_sequence(cfg.sequence, rng)
        seq_name = f"seq_{i:03d}"
        seq_dir = out_dir / seq_name
        seq_dir.mkdir(exist_ok=True)
        for t, frame in enumerate(seq.frames):
            write_image(seq_dir / f"frame_{t:05d}.png", frame)
        for t, flow in enumerate(seq.flows):
            write_flo(seq_dir / f"flow_{t:05d}.flo", flow)
            write_image(seq_dir / f"valid_{t:05d}.png", flow.valid.astype(np.float32))
        entries.append(ManifestEntry(seq_name, len(seq.frames), cfg.corpus_tag))
        log.info("wrote %s: %d frames", seq_dir, len(seq.frames))
    manifest = out_dir / "manifest.txt"
    write_manifest(manifest, entries)
    return manifest
