"""Losses and evaluation metrics: SSIM, combined interpolation loss, PSNR, EPE, Fl-all."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict
from typing import Iterable, Mapping

import numpy as np
import torch
import torch.nn.functional as F

from .flowfield import FlowField

PSNR_CAP_DB = 99.0

# KITTI-2015 outlier rule: endpoint error > 3 px and > 5% of the GT magnitude
FL_ABS_THRESHOLD = 3.0
FL_REL_THRESHOLD = 0.05


@dataclass(frozen=True)
class SsimConfig:
    window_size: int = 11
    gaussian_sigma: float = 1.5
    k1: float = 0.01
    k2: float = 0.03
    dynamic_range: float = 1.0

    def __post_init__(self):
        if self.window_size < 3 or self.window_size % 2 == 0:
            raise ValueError(f"window_size must be odd and >= 3, got {self.window_size}")
        if self.k1 <= 0 or self.k2 <= 0 or self.dynamic_range <= 0:
            raise ValueError("stability constants require k1, k2, dynamic_range > 0")

    @property
    def c1(self) -> float:
        return (self.k1 * self.dynamic_range) ** 2

    @property
    def c2(self) -> float:
        return (self.k2 * self.dynamic_range) ** 2


def _gaussian_window(size: int, sigma: float, dtype, device) -> torch.Tensor:
    ax = torch.arange(size, dtype=dtype, device=device) - size // 2
    g = torch.exp(-(ax**2) / (2 * sigma**2))
    g = g / g.sum()
    return torch.outer(g, g).reshape(1, 1, size, size)


def _as_batched(x: torch.Tensor) -> torch.Tensor:
    if x.ndim == 2:
        return x.reshape(1, 1, *x.shape)
    if x.ndim == 3:
        return x.reshape(-1, 1, *x.shape[-2:])
    if x.ndim == 4:
        return x.reshape(-1, 1, *x.shape[-2:])
    raise ValueError(f"expected 2-4 dims, got shape {tuple(x.shape)}")


def ssim(a, b, cfg: SsimConfig | None = None):
    """Mean local SSIM over valid (unpadded) window positions.

    Accepts numpy arrays or torch tensors shaped (H, W) or (..., H, W);
    returns a float for numpy inputs and a differentiable scalar tensor for
    torch inputs.
    """
    cfg = cfg or SsimConfig()
    numpy_in = not isinstance(a, torch.Tensor)
    ta = torch.as_tensor(np.asarray(a)) if numpy_in else a
    tb = torch.as_tensor(np.asarray(b)) if not isinstance(b, torch.Tensor) else b
    if ta.shape != tb.shape:
        raise ValueError(f"shape mismatch: {tuple(ta.shape)} vs {tuple(tb.shape)}")
    if min(ta.shape[-2:]) < cfg.window_size:
        raise ValueError(f"images smaller than the {cfg.window_size}px SSIM window")
    if numpy_in:
        ta, tb = ta.double(), tb.double()

    x = _as_batched(ta)
    y = _as_batched(tb.to(ta.dtype))
    win = _gaussian_window(cfg.window_size, cfg.gaussian_sigma, x.dtype, x.device)

    mu_x = F.conv2d(x, win)
    mu_y = F.conv2d(y, win)
    var_x = F.conv2d(x * x, win) - mu_x**2
    var_y = F.conv2d(y * y, win) - mu_y**2
    cov = F.conv2d(x * y, win) - mu_x * mu_y

    score = ((2 * mu_x * mu_y + cfg.c1) * (2 * cov + cfg.c2)) / (
        (mu_x**2 + mu_y**2 + cfg.c1) * (var_x + var_y + cfg.c2)
    )
    out = score.mean()
    return float(out.item()) if numpy_in else out


def interpolation_loss(pred: torch.Tensor, target: torch.Tensor, cfg: SsimConfig | None = None) -> torch.Tensor:
    """Equal-weight sum of a structural dissimilarity term and mean absolute error.

    With no explicit config the SSIM dynamic range is estimated from the
    target batch, so the loss is usable directly on normalized intensities.
    """
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")
    if cfg is None:
        span = (target.detach().max() - target.detach().min()).item()
        cfg = SsimConfig(dynamic_range=max(span, 1e-2))
    return 0.5 * (1.0 - ssim(pred, target, cfg)) + 0.5 * (pred - target).abs().mean()


def psnr(pred, target, max_value: float = 1.0, cap_db: float = PSNR_CAP_DB) -> float:
    """10*log10(max_value^2 / MSE) in dB, capped at ``cap_db`` for zero MSE."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {target.shape}")
    mse = float(np.mean((pred - target) ** 2))
    if mse == 0.0:
        return cap_db
    return min(10.0 * math.log10(max_value**2 / mse), cap_db)


def _epe_tensor(pred: torch.Tensor, gt: torch.Tensor, valid: torch.Tensor | None) -> torch.Tensor:
    if pred.ndim == 3:
        pred, gt = pred.unsqueeze(0), gt.unsqueeze(0)
        if valid is not None and valid.ndim == 2:
            valid = valid.unsqueeze(0)
    if pred.shape != gt.shape or pred.ndim != 4 or pred.shape[1] != 2:
        raise ValueError(f"expected matching (B, 2, H, W) flows, got {tuple(pred.shape)} vs {tuple(gt.shape)}")
    err = torch.linalg.vector_norm(pred - gt, dim=1)  # (B, H, W)
    if valid is None:
        return err.mean(dim=(1, 2)).mean()
    valid = valid.to(err.dtype)
    counts = valid.sum(dim=(1, 2))
    if (counts == 0).any():
        raise ValueError("a sample has an empty validity mask")
    per_sample = (err * valid).sum(dim=(1, 2)) / counts
    return per_sample.mean()


def epe(flow, gt, valid=None):
    """Mean endpoint error over valid pixels.

    FlowField (or numpy) arguments give a float; torch tensors shaped
    (B, 2, H, W) or (2, H, W) give a differentiable scalar usable as a
    training loss (per-sample masked mean, then mean over the batch).
    """
    if isinstance(flow, torch.Tensor):
        return _epe_tensor(flow, gt, valid)
    if isinstance(flow, FlowField):
        flow, gt_field = flow, gt
        if valid is None:
            valid = gt_field.valid
        if flow.shape != gt_field.shape:
            raise ValueError(f"shape mismatch: {flow.shape} vs {gt_field.shape}")
        if not valid.any():
            raise ValueError("empty validity mask")
        du = flow.u.astype(np.float64) - gt_field.u.astype(np.float64)
        dv = flow.v.astype(np.float64) - gt_field.v.astype(np.float64)
        err = np.sqrt(du**2 + dv**2)
        return float(err[valid].mean())
    raise TypeError(f"unsupported flow type {type(flow)!r}")


def fl_all(flow: FlowField, gt: FlowField) -> float:
    """Percentage of valid pixels that are KITTI-2015 outliers."""
    if flow.shape != gt.shape:
        raise ValueError(f"shape mismatch: {flow.shape} vs {gt.shape}")
    if not gt.valid.any():
        raise ValueError("empty validity mask")
    du = flow.u.astype(np.float64) - gt.u.astype(np.float64)
    dv = flow.v.astype(np.float64) - gt.v.astype(np.float64)
    err = np.sqrt(du**2 + dv**2)[gt.valid]
    mag = gt.magnitude().astype(np.float64)[gt.valid]
    outlier = (err > FL_ABS_THRESHOLD) & (err > FL_REL_THRESHOLD * mag)
    return 100.0 * float(outlier.mean())


# ---------------------------------------------------------------------------
# Aggregated reports
# ---------------------------------------------------------------------------

_METRIC_KEYS = ("psnr", "ssim", "epe", "fl_all")


@dataclass
class MetricsRow:
    n_samples: int
    psnr: float | None = None
    ssim: float | None = None
    epe: float | None = None
    fl_all: float | None = None
    psnr_capped: int = 0

    def __post_init__(self):
        if self.ssim is not None and not -1.0 <= self.ssim <= 1.0:
            raise ValueError(f"ssim {self.ssim} outside [-1, 1]")
        if self.fl_all is not None and not 0.0 <= self.fl_all <= 100.0:
            raise ValueError(f"fl_all {self.fl_all} outside [0, 100]")
        if self.epe is not None and self.epe < 0:
            raise ValueError(f"epe {self.epe} negative")


@dataclass
class MetricsReport:
    """Per-corpus metric aggregates plus a sample-weighted 'All' row."""

    rows: dict[str, MetricsRow] = field(default_factory=dict)

    @classmethod
    def from_samples(cls, samples: Iterable[tuple[str, Mapping[str, float]]]) -> "MetricsReport":
        """Aggregate (corpus, per-sample metric dict) records by unweighted mean
        within each corpus; the 'All' row is the mean over every sample."""
        per_corpus: dict[str, list[Mapping[str, float]]] = {}
        everything: list[Mapping[str, float]] = []
        for corpus, record in samples:
            per_corpus.setdefault(corpus, []).append(record)
            everything.append(record)
        if not everything:
            raise ValueError("no samples to aggregate")

        def reduce(records) -> MetricsRow:
            agg: dict[str, float] = {}
            for key in _METRIC_KEYS:
                vals = [r[key] for r in records if key in r]
                if vals:
                    agg[key] = float(np.mean(vals))
            capped = sum(1 for r in records if r.get("psnr", 0.0) >= PSNR_CAP_DB)
            return MetricsRow(n_samples=len(records), psnr_capped=capped, **agg)

        report = cls({c: reduce(rs) for c, rs in per_corpus.items()})
        if len(per_corpus) > 1 or "All" not in per_corpus:
            report.rows["All"] = reduce(everything)
        return report

    def to_text(self) -> str:
        header = f"{'corpus':<18}{'n':>7}{'psnr_db':>10}{'ssim':>9}{'epe_px':>9}{'fl_all_%':>10}"
        lines = [header]
        for name, row in self.rows.items():
            def fmt(v, spec):
                return format(v, spec) if v is not None else "-"
            lines.append(
                f"{name:<18}{row.n_samples:>7}"
                f"{fmt(row.psnr, '.2f'):>10}{fmt(row.ssim, '.4f'):>9}"
                f"{fmt(row.epe, '.3f'):>9}{fmt(row.fl_all, '.2f'):>10}"
            )
        return "\n".join(lines) + "\n"

    def to_dict(self) -> dict:
        return {name: asdict(row) for name, row in self.rows.items()}

    @classmethod
    def from_dict(cls, data: Mapping) -> "MetricsReport":
        return cls({name: MetricsRow(**row) for name, row in data.items()})

    def write(self, path_base) -> None:
        """Write <base>.txt (table) and <base>.json (machine-readable)."""
        base = str(path_base)
        with open(base + ".txt", "w") as f:
            f.write(self.to_text())
        with open(base + ".json", "w") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)

    @classmethod
    def read(cls, path_base) -> "MetricsReport":
        with open(str(path_base) + ".json") as f:
            return cls.from_dict(json.load(f))
