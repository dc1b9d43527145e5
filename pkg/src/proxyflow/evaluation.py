"""Evaluation protocol: interpolation quality, flow benchmarks, comparisons.

Interpolation metrics are computed on denormalized images quantized to the
8-bit grid, matching how benchmark frames are stored. Flow evaluation runs
the boundary-doubling rule so every consecutive frame pair gets a field.
"""

from __future__ import annotations

import copy
import logging
from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .data import FlowDataset, denormalize, normalize_sample
from .flowfield import FlowField
from .metrics import MetricsReport, PSNR_CAP_DB, SsimConfig, epe, fl_all, psnr, ssim
from .model import InterpFlowNet, swap_head
from .training import (
    EpochRecord,
    TrainingSchedule,
    TrainResult,
    finetune,
    finetune_schedule,
    subsample_finetune,
    train_from_scratch,
)

log = logging.getLogger(__name__)


@dataclass
class EvalResult:
    report: MetricsReport
    samples: list[tuple[str, dict[str, float]]]
    baseline_samples: list[tuple[str, dict[str, float]]] | None = None


@contextmanager
def _eval_mode(net):
    was_training = net.training
    net.eval()
    try:
        yield
    finally:
        net.train(was_training)


def _forward_padded(net, stacked: np.ndarray) -> np.ndarray:
    """Forward (4, H, W) input at any size by replicate-padding to the
    network's resolution divisor and cropping the output back."""
    div = net.spec.resolution_divisor
    h, w = stacked.shape[-2:]
    ph, pw = (-h) % div, (-w) % div
    x = torch.from_numpy(np.ascontiguousarray(stacked)).unsqueeze(0)
    x = x.to(next(net.parameters()).device)
    if ph or pw:
        x = F.pad(x, (0, pw, 0, ph), mode="replicate")
    with _eval_mode(net), torch.no_grad():
        y = net(x)
    return y[0, :, :h, :w].cpu().numpy()


def predict_center_frame(net, quad: np.ndarray) -> np.ndarray:
    """Raw grayscale quadruple (4, H, W) -> raw center-frame prediction."""
    if net.spec.head != "interpolation":
        raise ValueError(f"needs an interpolation head, got {net.spec.head!r}")
    normed, stats = normalize_sample(quad)
    out = _forward_padded(net, normed)[0]
    return denormalize(out, stats)


def predict_center_color(net, quad: np.ndarray) -> np.ndarray:
    """(4, H, W, 3) color quadruple, one network pass per channel."""
    return np.stack([predict_center_frame(net, quad[..., c]) for c in range(3)], axis=-1)


# ---------------------------------------------------------------------------
# Interpolation evaluation
# ---------------------------------------------------------------------------

def make_interpolation_eval_items(frames: np.ndarray, specs) -> list[tuple[np.ndarray, np.ndarray]]:
    """(input quadruple, ground-truth center) pairs from a frame array
    shaped (T, H, W) or (T, H, W, 3)."""
    from .data import input_indices

    items = []
    for spec in specs:
        idx = input_indices(spec)
        items.append((np.stack([frames[i] for i in idx]), np.asarray(frames[spec.center])))
    return items


def _quantize8(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0


def _interp_scores(pred: np.ndarray, target: np.ndarray) -> dict[str, float]:
    pred_q = _quantize8(pred)
    target_q = _quantize8(target)
    if pred_q.ndim == 3:  # color: channels-last -> leading for windowed SSIM
        ssim_val = ssim(pred_q.transpose(2, 0, 1), target_q.transpose(2, 0, 1))
    else:
        ssim_val = ssim(pred_q, target_q)
    return {"psnr": psnr(pred_q, target_q, max_value=1.0), "ssim": ssim_val}


def eval_interpolation(net, eval_sets, include_linear_blend: bool = True) -> EvalResult:
    """PSNR/SSIM per corpus and overall, plus a linear-blend reference row
    (the mean of the two middle input frames)."""
    if net.spec.head != "interpolation":
        raise ValueError(f"needs an interpolation head, got {net.spec.head!r}")
    records: list[tuple[str, dict[str, float]]] = []
    baseline: list[tuple[str, dict[str, float]]] = []
    with _eval_mode(net):
        for corpus, items in eval_sets.items():
            if not items:
                raise ValueError(f"empty eval set {corpus!r}")
            for quad, target in items:
                quad = np.asarray(quad, dtype=np.float32)
                color = quad.ndim == 4
                pred = predict_center_color(net, quad) if color else predict_center_frame(net, quad)
                records.append((corpus, _interp_scores(pred, target)))
                if include_linear_blend:
                    blend = 0.5 * (quad[1] + quad[2])
                    baseline.append((corpus, _interp_scores(blend, target)))
    report = MetricsReport.from_samples(records)
    if include_linear_blend:
        base_report = MetricsReport.from_samples(baseline)
        for name, row in base_report.rows.items():
            report.rows[f"linear-blend/{name}"] = row
    return EvalResult(report, records, baseline or None)


# ---------------------------------------------------------------------------
# Flow evaluation
# ---------------------------------------------------------------------------

def flow_for_sequence(net, frames, postprocess=None) -> list[FlowField]:
    """One flow field per consecutive pair; terminal frames are doubled so the
    first and last pairs still get a four-frame input window.

    ``postprocess``, when given, is called as f(field, (frame_t, frame_t1))
    and may return a refined field (variational refinement hook point).
    """
    if net.spec.head != "flow":
        raise ValueError(f"needs a flow head, got {net.spec.head!r}")
    frames = np.asarray(frames, dtype=np.float32)
    n = len(frames)
    if n < 2:
        raise ValueError(f"need at least 2 frames, got {n}")
    fields = []
    with _eval_mode(net):
        for t in range(n - 1):
            idx = [min(max(i, 0), n - 1) for i in (t - 1, t, t + 1, t + 2)]
            normed, _ = normalize_sample(frames[idx])
            uv = _forward_padded(net, normed)
            field = FlowField(uv[0], uv[1])
            if postprocess is not None:
                field = postprocess(field, (frames[t], frames[t + 1]))
            fields.append(field)
    return fields


def eval_flow(net, flow_sets, postprocess=None) -> EvalResult:
    """Mean EPE and Fl-all over every frame pair with ground truth.

    ``flow_sets`` maps corpus name to a list of (frames, gt_flows) sequences;
    gt entries may be None where no ground truth exists.
    """
    records: list[tuple[str, dict[str, float]]] = []
    for corpus, sequences in flow_sets.items():
        n_before = len(records)
        for frames, gt_flows in sequences:
            preds = flow_for_sequence(net, frames, postprocess)
            for pred, gt in zip(preds, gt_flows):
                if gt is None:
                    continue
                records.append((corpus, {"epe": epe(pred, gt), "fl_all": fl_all(pred, gt)}))
        if len(records) == n_before:
            log.warning("corpus %r has no ground-truth flow; skipped", corpus)
    if not records:
        raise ValueError("no ground-truth flow in any corpus")
    return EvalResult(MetricsReport.from_samples(records), records)


# ---------------------------------------------------------------------------
# Pretraining-benefit and low-data experiments
# ---------------------------------------------------------------------------

@dataclass
class CompareResult:
    finetuned: list[EpochRecord]
    scratch: list[EpochRecord]
    final_ratio: float  # scratch EPE / fine-tuned EPE at the last epoch
    finetuned_net: InterpFlowNet | None = None
    scratch_net: InterpFlowNet | None = None


def compare_pretrained_vs_scratch(pretrained_net, train_ds, val_ds,
                                  schedule: TrainingSchedule | None = None, *,
                                  seed: int = 0, run_dir=None, device: str = "cpu",
                                  workers: int = 0) -> CompareResult:
    """Paired arms on identical data/schedule/seed: fine-tune the pretrained
    network vs train the same architecture from scratch."""
    schedule = schedule or finetune_schedule()
    torch.manual_seed(seed)
    if pretrained_net.spec.head == "interpolation":
        arm_a = swap_head(pretrained_net)
    else:
        arm_a = copy.deepcopy(pretrained_net)
    fine = finetune(arm_a, train_ds, val_ds, schedule, seed=seed, device=device,
                    workers=workers, run_dir=None if run_dir is None else f"{run_dir}/finetuned")
    scratch = train_from_scratch(pretrained_net.spec, train_ds, val_ds, schedule, seed=seed,
                                 device=device, workers=workers,
                                 run_dir=None if run_dir is None else f"{run_dir}/scratch")
    ratio = scratch.history[-1].val_metric / fine.history[-1].val_metric
    log.info("final validation EPE: fine-tuned %.4f, scratch %.4f (ratio %.2f)",
             fine.history[-1].val_metric, scratch.history[-1].val_metric, ratio)
    return CompareResult(fine.history, scratch.history, ratio, fine.net, scratch.net)


@dataclass
class SweepResult:
    sizes: list[int]
    mean_epe: list[float]  # final-epoch validation EPE averaged over repeats
    full_reference: float  # full training set, single run
    details: dict  # size -> SubsampleResult


def low_data_sweep(net, train_ds: FlowDataset, val_ds, sizes=(25, 50, 100, 200),
                   repeats: int = 3, schedule: TrainingSchedule | None = None, *,
                   seed: int = 0, run_dir=None, device: str = "cpu",
                   workers: int = 0) -> SweepResult:
    """Fine-tune on small random frame subsets of increasing size, averaged
    over repeats, with the full-training-set result as the reference line."""
    if net.spec.head != "flow":
        raise ValueError(f"needs a flow head (use swap_head first), got {net.spec.head!r}")
    schedule = schedule or finetune_schedule()
    available = len(train_ds.specs)
    kept = []
    for s in sorted(set(int(s) for s in sizes)):
        if s > available:
            log.warning("sweep size %d exceeds the %d available frames; dropped", s, available)
        else:
            kept.append(s)
    details = {}
    mean_epe = []
    for s in kept:
        sub = subsample_finetune(net, train_ds, val_ds, n_frames=s, repeats=repeats,
                                 seed=seed + s, schedule=schedule, device=device,
                                 workers=workers,
                                 run_dir=None if run_dir is None else f"{run_dir}/n{s}")
        details[s] = sub
        mean_epe.append(float(sub.mean_val_curve[-1]))
    reference = finetune(copy.deepcopy(net), train_ds, val_ds, schedule, seed=seed,
                         device=device, workers=workers,
                         run_dir=None if run_dir is None else f"{run_dir}/full")
    return SweepResult(kept, mean_epe, float(reference.history[-1].val_metric), details)


# ---------------------------------------------------------------------------
# Plots
# ---------------------------------------------------------------------------

def plot_compare(result: CompareResult, path) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot([r.epoch for r in result.finetuned], [r.val_metric for r in result.finetuned],
            label="fine-tuned from pretraining")
    ax.plot([r.epoch for r in result.scratch], [r.val_metric for r in result.scratch],
            label="from scratch")
    ax.set_xlabel("epoch")
    ax.set_ylabel("validation EPE (px)")
    ax.legend()
    ax.set_title(f"final EPE ratio scratch/fine-tuned = {result.final_ratio:.2f}")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_sweep(result: SweepResult, path) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(result.sizes, result.mean_epe, marker="o", label="subset fine-tuning")
    ax.axhline(result.full_reference, linestyle="--", color="gray", label="full training set")
    ax.set_xlabel("fine-tuning frames")
    ax.set_ylabel("validation EPE (px)")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
