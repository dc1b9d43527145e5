"""Sample enumeration, train/val splitting, normalization, augmentation, datasets.

Interpolation samples predict frame t from {t-3s, t-s, t+s, t+3s}; every
eligible center is emitted twice, once per spacing s in {1, 2}, so slow
movie-like footage still contributes large motions. Flow samples predict the
displacement t -> t+1 from the quadruple (t-1, t, t+1, t+2), duplicating the
terminal frame at sequence boundaries.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import cv2
import numpy as np
import torch

from .flowfield import FlowField

log = logging.getLogger(__name__)

EPS_STD = 1e-6

SPACINGS = (1, 2)
INPUT_OFFSETS = (-3, -1, 1, 3)


# ---------------------------------------------------------------------------
# Sample specs and enumeration
# ---------------------------------------------------------------------------

@dataclass(frozen=True, order=True)
class SampleSpec:
    sequence_id: str | int
    center: int
    spacing: int = 1
    kind: str = "interpolation"  # or "flow": displacement center -> center+1


def input_indices(spec: SampleSpec, length: int | None = None) -> tuple[int, ...]:
    """Frame indices feeding the network for this sample."""
    if spec.kind == "interpolation":
        return tuple(spec.center + o * spec.spacing for o in INPUT_OFFSETS)
    if length is None:
        raise ValueError("flow samples need the sequence length for boundary clamping")
    t = spec.center
    return tuple(min(max(i, 0), length - 1) for i in (t - 1, t, t + 1, t + 2))


def sample_window(spec: SampleSpec, length: int | None = None) -> set[int]:
    """All frames the sample touches (inputs plus target)."""
    if spec.kind == "interpolation":
        return set(input_indices(spec)) | {spec.center}
    return set(input_indices(spec, length)) | {spec.center, spec.center + 1}


def _as_length_items(sequence_lengths) -> list[tuple[str | int, int]]:
    if isinstance(sequence_lengths, Mapping):
        return sorted(sequence_lengths.items(), key=lambda kv: str(kv[0]))
    return list(enumerate(sequence_lengths))


def index_interpolation_samples(sequence_lengths) -> list[SampleSpec]:
    """All valid (center, spacing) pairs per sequence, deterministically ordered."""
    specs = []
    for seq_id, length in _as_length_items(sequence_lengths):
        for spacing in SPACINGS:
            lo, hi = 3 * spacing, length - 1 - 3 * spacing
            specs.extend(SampleSpec(seq_id, t, spacing) for t in range(lo, hi + 1))
    return specs


def index_flow_samples(sequence_lengths) -> list[SampleSpec]:
    """One flow sample per consecutive frame pair."""
    specs = []
    for seq_id, length in _as_length_items(sequence_lengths):
        specs.extend(SampleSpec(seq_id, t, kind="flow") for t in range(length - 1))
    return specs


# ---------------------------------------------------------------------------
# Train/validation splits
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SplitPolicy:
    kind: str = "frames"  # frame-sampled validation, or "sequences" for whole-sequence holdout
    val_fraction: float | None = None  # default 1% of frames / 10% of sequences
    seed: int = 0

    @property
    def fraction(self) -> float:
        if self.val_fraction is not None:
            return self.val_fraction
        return 0.01 if self.kind == "frames" else 0.10


@dataclass
class Split:
    train: list[SampleSpec]
    val: list[SampleSpec]
    train_sequences: list
    val_sequences: list


def _frame_split_one(seq_id, length, n_val, rng) -> tuple[list[SampleSpec], list[SampleSpec]]:
    all_specs = index_interpolation_samples({seq_id: length})
    lo, hi = 3, length - 4
    if hi < lo:
        return all_specs, []
    eligible = np.arange(lo, hi + 1)
    # draw validation centers from begin/center/end regions
    regions = np.array_split(eligible, 3)
    counts = [n_val // 3] * 3
    for i in range(n_val % 3):
        counts[i] += 1
    centers: list[int] = []
    for region, count in zip(regions, counts):
        take = min(count, len(region))
        if take:
            centers.extend(int(c) for c in rng.choice(region, size=take, replace=False))
    centers_set = set(centers)
    val = [s for s in all_specs if s.center in centers_set]
    blocked: set[int] = set()
    for s in val:
        blocked |= sample_window(s)
    train = [s for s in all_specs if not (sample_window(s) & blocked)]
    return train, val


def split_train_val(sequence_lengths, policy: SplitPolicy) -> Split:
    """Split per the policy: validation specs never share frames with training specs."""
    items = _as_length_items(sequence_lengths)
    if policy.kind == "frames":
        train: list[SampleSpec] = []
        val: list[SampleSpec] = []
        for idx, (seq_id, length) in enumerate(items):
            rng = np.random.default_rng([policy.seed, idx])
            n_val = max(1, round(policy.fraction * length))
            tr, va = _frame_split_one(seq_id, length, n_val, rng)
            train.extend(tr)
            val.extend(va)
        if not train or not val:
            log.warning(
                "corpus too small for the frame-sampled split policy; "
                "falling back to a sequence-level split"
            )
            return split_train_val(sequence_lengths, replace(policy, kind="sequences"))
        ids = [seq_id for seq_id, _ in items]
        return Split(train, val, ids, ids)

    if policy.kind != "sequences":
        raise ValueError(f"unknown split policy kind {policy.kind!r}")
    rng = np.random.default_rng(policy.seed)
    order = rng.permutation(len(items))
    n_val = max(1, round(policy.fraction * len(items)))
    val_ids = {items[i][0] for i in order[:n_val]}
    train_items = [(s, l) for s, l in items if s not in val_ids]
    val_items = [(s, l) for s, l in items if s in val_ids]
    return Split(
        index_interpolation_samples(dict(train_items)),
        index_interpolation_samples(dict(val_items)),
        [s for s, _ in train_items],
        [s for s, _ in val_items],
    )


# ---------------------------------------------------------------------------
# Normalization
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class NormStats:
    mean: float
    std: float
    degenerate: bool = False


def normalize_sample(frames: np.ndarray) -> tuple[np.ndarray, NormStats]:
    """Zero-mean unit-std normalization jointly over the four input frames."""
    frames = np.asarray(frames, dtype=np.float32)
    mean = float(frames.astype(np.float64).mean())
    std = float(frames.astype(np.float64).std())
    degenerate = std < EPS_STD
    if degenerate:
        std = EPS_STD
    return ((frames - mean) / std).astype(np.float32), NormStats(mean, std, degenerate)


def denormalize(values: np.ndarray, stats: NormStats) -> np.ndarray:
    return (np.asarray(values, dtype=np.float32) * stats.std + stats.mean).astype(np.float32)


# ---------------------------------------------------------------------------
# Training samples and augmentation
# ---------------------------------------------------------------------------

@dataclass
class TrainingSample:
    inputs: np.ndarray  # (4, H, W) float32
    target: np.ndarray | FlowField  # center frame (H, W) or FlowField
    kind: str = "interpolation"
    norm_stats: NormStats | None = None
    augment_record: "AugmentParams | None" = None
    spec: SampleSpec | None = None


@dataclass(frozen=True)
class AugmentConfig:
    target_size: tuple[int, int] = (384, 192)  # (width, height)
    hflip_prob: float = 0.5
    vflip_prob: float = 0.5
    reverse_prob: float = 0.5  # interpolation samples only


@dataclass(frozen=True)
class AugmentParams:
    crop: tuple[int, int, int, int]  # x0, y0, width, height
    hflip: bool
    vflip: bool
    reverse: bool
    target_size: tuple[int, int]  # (width, height)

    def with_(self, **kw) -> "AugmentParams":
        return replace(self, **kw)


def identity_params(source_hw: tuple[int, int], target_size: tuple[int, int]) -> AugmentParams:
    """Largest centered crop with the target aspect ratio, no flips or reversal."""
    sh, sw = source_hw
    tw, th = target_size
    aspect = tw / th
    cw = min(sw, int(round(aspect * sh)))
    ch = min(sh, int(round(cw / aspect)))
    cw = int(round(ch * aspect))
    x0 = (sw - cw) // 2
    y0 = (sh - ch) // 2
    return AugmentParams((x0, y0, cw, ch), False, False, False, tuple(target_size))


def sample_augment_params(rng: np.random.Generator, source_hw, cfg: AugmentConfig,
                          allow_reverse: bool = True) -> AugmentParams:
    sh, sw = source_hw
    tw, th = cfg.target_size
    aspect = tw / th
    max_w = min(sw, int(aspect * sh))
    if max_w < tw:
        raise ValueError(f"source {sw}x{sh} too small for {tw}x{th} crops")
    cw = int(rng.integers(tw, max_w + 1))
    ch = min(sh, max(th, int(round(cw / aspect))))
    x0 = int(rng.integers(0, sw - cw + 1))
    y0 = int(rng.integers(0, sh - ch + 1))
    return AugmentParams(
        crop=(x0, y0, cw, ch),
        hflip=bool(rng.random() < cfg.hflip_prob),
        vflip=bool(rng.random() < cfg.vflip_prob),
        reverse=bool(allow_reverse and rng.random() < cfg.reverse_prob),
        target_size=(tw, th),
    )


def _resize_frame(frame: np.ndarray, size_wh: tuple[int, int]) -> np.ndarray:
    if frame.shape == (size_wh[1], size_wh[0]):
        return frame.astype(np.float32, copy=False)
    return cv2.resize(frame.astype(np.float32), size_wh, interpolation=cv2.INTER_LINEAR)


def _apply_to_frame(frame: np.ndarray, p: AugmentParams) -> np.ndarray:
    x0, y0, cw, ch = p.crop
    out = _resize_frame(frame[y0 : y0 + ch, x0 : x0 + cw], p.target_size)
    if p.hflip:
        out = out[:, ::-1]
    if p.vflip:
        out = out[::-1, :]
    return np.ascontiguousarray(out)


def _apply_to_flow(flow: FlowField, p: AugmentParams) -> FlowField:
    x0, y0, cw, ch = p.crop
    tw, th = p.target_size
    sx, sy = tw / cw, th / ch
    u = _resize_frame(flow.u[y0 : y0 + ch, x0 : x0 + cw], p.target_size) * sx
    v = _resize_frame(flow.v[y0 : y0 + ch, x0 : x0 + cw], p.target_size) * sy
    valid = flow.valid[y0 : y0 + ch, x0 : x0 + cw].astype(np.uint8)
    if valid.shape != (th, tw):
        valid = cv2.resize(valid, (tw, th), interpolation=cv2.INTER_NEAREST)
    valid = valid.astype(bool)
    if p.hflip:
        u, v, valid = -u[:, ::-1], v[:, ::-1], valid[:, ::-1]
    if p.vflip:
        u, v, valid = u[::-1, :], -v[::-1, :], valid[::-1, :]
    return FlowField(np.ascontiguousarray(u), np.ascontiguousarray(v), np.ascontiguousarray(valid))


def apply_augment_interpolation(sample: TrainingSample, p: AugmentParams) -> TrainingSample:
    inputs = np.stack([_apply_to_frame(f, p) for f in sample.inputs])
    if p.reverse:
        inputs = inputs[::-1].copy()
    target = _apply_to_frame(sample.target, p)
    return TrainingSample(inputs, target, sample.kind, augment_record=p, spec=sample.spec)


def apply_augment_flow(sample: TrainingSample, p: AugmentParams) -> TrainingSample:
    if p.reverse:
        raise ValueError("temporal reversal is never applied to flow samples")
    inputs = np.stack([_apply_to_frame(f, p) for f in sample.inputs])
    target = _apply_to_flow(sample.target, p)
    return TrainingSample(inputs, target, sample.kind, augment_record=p, spec=sample.spec)


def _upscale_if_needed(sample: TrainingSample, cfg: AugmentConfig) -> TrainingSample:
    sh, sw = sample.inputs.shape[-2:]
    tw, th = cfg.target_size
    aspect = tw / th
    if sw >= tw and int(aspect * sh) >= tw:
        return sample
    scale = max(tw / sw, th / sh, tw / (aspect * sh))
    nw, nh = int(np.ceil(sw * scale)), int(np.ceil(sh * scale))
    log.warning("source %dx%d smaller than minimum crop; upscaling to %dx%d", sw, sh, nw, nh)
    inputs = np.stack([_resize_frame(f, (nw, nh)) for f in sample.inputs])
    if sample.kind == "interpolation":
        target = _resize_frame(sample.target, (nw, nh))
    else:
        f = sample.target
        target = FlowField(
            _resize_frame(f.u, (nw, nh)) * (nw / sw),
            _resize_frame(f.v, (nw, nh)) * (nh / sh),
            cv2.resize(f.valid.astype(np.uint8), (nw, nh), interpolation=cv2.INTER_NEAREST).astype(bool),
        )
    return TrainingSample(inputs, target, sample.kind, spec=sample.spec)


def augment_interpolation(sample: TrainingSample, rng: np.random.Generator,
                          cfg: AugmentConfig | None = None) -> TrainingSample:
    """Random crop/resize + flips + temporal reversal, consistent across the sample."""
    if sample.kind != "interpolation":
        raise ValueError(f"expected an interpolation sample, got kind={sample.kind!r}")
    cfg = cfg or AugmentConfig()
    sample = _upscale_if_needed(sample, cfg)
    p = sample_augment_params(rng, sample.inputs.shape[-2:], cfg, allow_reverse=True)
    return apply_augment_interpolation(sample, p)


def augment_flow(sample: TrainingSample, rng: np.random.Generator,
                 cfg: AugmentConfig | None = None) -> TrainingSample:
    """Same augmentations minus temporal reversal; flow vectors rescaled/negated to match."""
    if sample.kind != "flow":
        raise ValueError(f"expected a flow sample, got kind={sample.kind!r}")
    cfg = cfg or AugmentConfig()
    sample = _upscale_if_needed(sample, cfg)
    p = sample_augment_params(rng, sample.inputs.shape[-2:], cfg, allow_reverse=False)
    return apply_augment_flow(sample, p)


def finalize_sample(sample: TrainingSample) -> TrainingSample:
    """Normalize inputs jointly; interpolation targets share the input stats,
    flow targets stay in pixels."""
    inputs, stats = normalize_sample(sample.inputs)
    if sample.kind == "interpolation":
        target = ((np.asarray(sample.target, np.float32) - stats.mean) / stats.std).astype(np.float32)
    else:
        target = sample.target
    return TrainingSample(inputs, target, sample.kind, stats, sample.augment_record, sample.spec)


def load_raw_interpolation_sample(frames: np.ndarray, spec: SampleSpec) -> TrainingSample:
    idx = input_indices(spec)
    return TrainingSample(
        inputs=np.stack([frames[i] for i in idx]).astype(np.float32),
        target=np.asarray(frames[spec.center], dtype=np.float32),
        kind="interpolation",
        spec=spec,
    )


def load_raw_flow_sample(frames: np.ndarray, flow: FlowField, center: int,
                         spec: SampleSpec | None = None) -> TrainingSample:
    spec = spec or SampleSpec("", center, kind="flow")
    idx = input_indices(replace(spec, center=center), length=len(frames))
    return TrainingSample(
        inputs=np.stack([frames[i] for i in idx]).astype(np.float32),
        target=FlowField(flow.u.copy(), flow.v.copy(), flow.valid.copy()),
        kind="flow",
        spec=spec,
    )


# ---------------------------------------------------------------------------
# Torch datasets
# ---------------------------------------------------------------------------

class _SeededAugmentDataset(torch.utils.data.Dataset):
    """Augmentation is a pure function of (base_seed, epoch, index), so loading
    stays deterministic regardless of worker count."""

    def __init__(self, base_seed: int = 0, augment: bool = True,
                 augment_cfg: AugmentConfig | None = None):
        self.base_seed = base_seed
        self.augment = augment
        self.augment_cfg = augment_cfg or AugmentConfig()
        self.epoch = 0

    def set_epoch(self, epoch: int):
        self.epoch = epoch

    def _rng(self, index: int) -> np.random.Generator:
        return np.random.default_rng([self.base_seed, self.epoch, index])


class InterpolationDataset(_SeededAugmentDataset):
    def __init__(self, sequences: Mapping, specs: Sequence[SampleSpec], **kw):
        super().__init__(**kw)
        self.sequences = sequences
        self.specs = list(specs)

    def __len__(self):
        return len(self.specs)

    def __getitem__(self, index):
        spec = self.specs[index]
        raw = load_raw_interpolation_sample(np.asarray(self.sequences[spec.sequence_id]), spec)
        if self.augment:
            raw = augment_interpolation(raw, self._rng(index), self.augment_cfg)
        else:
            raw = apply_augment_interpolation(
                raw, identity_params(raw.inputs.shape[-2:], self.augment_cfg.target_size)
            )
        s = finalize_sample(raw)
        return torch.from_numpy(s.inputs), torch.from_numpy(s.target).unsqueeze(0)


class FlowDataset(_SeededAugmentDataset):
    """Items are (inputs, target uv, valid) built from (frames, FlowField) pairs."""

    def __init__(self, sequences: Mapping, flows: Mapping, specs: Sequence[SampleSpec], **kw):
        super().__init__(**kw)
        self.sequences = sequences
        self.flows = flows  # sequence_id -> list of FlowField, entry t: flow t -> t+1
        self.specs = list(specs)

    def __len__(self):
        return len(self.specs)

    def __getitem__(self, index):
        spec = self.specs[index]
        frames = np.asarray(self.sequences[spec.sequence_id])
        raw = load_raw_flow_sample(frames, self.flows[spec.sequence_id][spec.center], spec.center, spec)
        if self.augment:
            raw = augment_flow(raw, self._rng(index), self.augment_cfg)
        else:
            raw = apply_augment_flow(
                raw, identity_params(raw.inputs.shape[-2:], self.augment_cfg.target_size)
            )
        s = finalize_sample(raw)
        return (
            torch.from_numpy(s.inputs),
            torch.from_numpy(np.stack([s.target.u, s.target.v])),
            torch.from_numpy(s.target.valid.astype(np.float32)),
        )


# ---------------------------------------------------------------------------
# Corpus ingestion: image directories, videos, manifests
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ManifestEntry:
    path: str
    n_frames: int
    corpus: str


def write_manifest(path, entries: Iterable[ManifestEntry]) -> None:
    with open(path, "w") as f:
        for e in entries:
            f.write(f"{e.path}\t{e.n_frames}\t{e.corpus}\n")


def read_manifest(path) -> list[ManifestEntry]:
    entries = []
    for line_no, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise ValueError(f"{path}:{line_no}: expected 'path<TAB>frames<TAB>corpus'")
        entries.append(ManifestEntry(parts[0], int(parts[1]), parts[2]))
    return entries


@dataclass
class Corpus:
    """Frames plus any ground-truth flow found next to them, keyed by sequence id."""

    sequences: dict[str, np.ndarray]  # (T, H, W) grayscale float
    flows: dict[str, list[FlowField | None]]  # entry t: flow t -> t+1, None if absent
    tags: dict[str, str]  # sequence id -> corpus tag from the manifest

    def lengths(self) -> dict[str, int]:
        return {k: len(v) for k, v in self.sequences.items()}

    def flow_specs(self) -> list[SampleSpec]:
        """Flow samples for every pair that has ground truth."""
        return [
            s
            for s in index_flow_samples(self.lengths())
            if self.flows.get(s.sequence_id) and self.flows[s.sequence_id][s.center] is not None
        ]


def load_corpus(root) -> Corpus:
    """Load a manifest-described corpus: per-sequence frame directories with
    optional flow_%05d.flo (+ valid_%05d.png) or 16-bit PNG ground truth."""
    from . import flowio

    root = Path(root)
    manifest = root / "manifest.txt"
    if not manifest.exists():
        raise FileNotFoundError(f"{root}: no manifest.txt")
    sequences: dict[str, np.ndarray] = {}
    flows: dict[str, list[FlowField | None]] = {}
    tags: dict[str, str] = {}
    for entry in read_manifest(manifest):
        seq_dir = root / entry.path
        frames = load_sequence_frames(seq_dir)
        if len(frames) != entry.n_frames:
            raise ValueError(
                f"{seq_dir}: manifest declares {entry.n_frames} frames, found {len(frames)}"
            )
        seq_id = entry.path
        sequences[seq_id] = frames
        tags[seq_id] = entry.corpus
        seq_flows: list[FlowField | None] = []
        for t in range(len(frames) - 1):
            flo = seq_dir / f"flow_{t:05d}.flo"
            png = seq_dir / f"flow_{t:05d}.png"
            if flo.exists():
                f = flowio.read_flo(flo)
                mask_path = seq_dir / f"valid_{t:05d}.png"
                if mask_path.exists():
                    f = FlowField(f.u, f.v, flowio.read_image_gray(mask_path) > 0.5)
                seq_flows.append(f)
            elif png.exists():
                seq_flows.append(flowio.read_kitti_flow(png))
            else:
                seq_flows.append(None)
        flows[seq_id] = seq_flows
    return Corpus(sequences, flows, tags)


IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg"}


def load_sequence_frames(path) -> np.ndarray:
    """Load a sequence as grayscale float (T, H, W): a directory of numbered
    images or a container video decoded with OpenCV."""
    from .flowio import read_image_gray

    path = Path(path)
    if path.is_dir():
        files = [p for p in path.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES]
        frame_files = [p for p in files if p.stem.startswith("frame_")]
        if frame_files:
            files = frame_files  # corpus layout: flow/mask PNGs share the directory
        else:
            files = [p for p in files
                     if not p.stem.startswith("valid_") and not p.stem.startswith("flow_")]
        files.sort(key=lambda p: (len(p.stem), p.stem))
        if not files:
            raise ValueError(f"{path}: no image files found")
        return np.stack([read_image_gray(p) for p in files])

    cap = cv2.VideoCapture(str(path))
    if not cap.isOpened():
        raise ValueError(f"{path}: not a frame directory and not a decodable video")
    frames = []
    while True:
        ok, frame = cap.read()
        if not ok:
            break
        rgb = cv2.cvtColor(frame, cv2.COLOR_BGR2RGB).astype(np.float32) / 255.0
        frames.append(0.299 * rgb[..., 0] + 0.587 * rgb[..., 1] + 0.114 * rgb[..., 2])
    cap.release()
    if not frames:
        raise ValueError(f"{path}: video contained no frames")
    return np.stack(frames).astype(np.float32)
