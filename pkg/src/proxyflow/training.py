"""Training loops, learning-rate schedules, and checkpointing.

Two loops share one engine: unsupervised interpolation pretraining (milestone
lr halvings) and supervised flow fine-tuning (plateau halvings on validation
EPE). Runs are deterministic for a fixed seed: batch order and augmentations
derive from (seed, epoch) and never from global state.
"""

from __future__ import annotations

import copy
import json
import logging
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
from torch.utils.data import DataLoader

from .data import FlowDataset
from .errors import TrainingDiverged
from .metrics import epe, interpolation_loss
from .model import InterpFlowNet, NetworkSpec, build_network

log = logging.getLogger(__name__)

CKPT_MAGIC = b"PXFLOW01"


# ---------------------------------------------------------------------------
# Schedules
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class OptimizerConfig:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8


@dataclass(frozen=True)
class LrPolicy:
    kind: str  # "milestones" or "plateau"
    milestones: tuple[int, ...] = ()
    factor: float = 0.5
    patience: int = 20

    def __post_init__(self):
        object.__setattr__(self, "milestones", tuple(self.milestones))
        if self.kind not in ("milestones", "plateau"):
            raise ValueError(f"unknown lr policy {self.kind!r}")
        if any(b <= a for a, b in zip(self.milestones, self.milestones[1:])):
            raise ValueError(f"milestones must be strictly increasing, got {self.milestones}")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")


@dataclass(frozen=True)
class TrainingSchedule:
    lr_policy: LrPolicy
    total_epochs: int
    loss: str  # "interpolation" or "epe"
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    batch_size: int = 8

    def __post_init__(self):
        if self.optimizer.lr <= 0:
            raise ValueError("initial learning rate must be positive")
        if self.loss not in ("interpolation", "epe"):
            raise ValueError(f"unknown loss {self.loss!r}")
        if self.total_epochs < 1:
            raise ValueError("total_epochs must be >= 1")


def pretrain_schedule(**overrides) -> TrainingSchedule:
    """Interpolation pretraining defaults: lr 1e-4, batch 8, halvings after
    epochs 3/6/8/10, 12 epochs."""
    defaults = dict(
        lr_policy=LrPolicy("milestones", milestones=(3, 6, 8, 10)),
        total_epochs=12,
        loss="interpolation",
        optimizer=OptimizerConfig(lr=1e-4),
        batch_size=8,
    )
    defaults.update(overrides)
    return TrainingSchedule(**defaults)


def finetune_schedule(**overrides) -> TrainingSchedule:
    """Flow fine-tuning defaults: lr 1e-4, halve on a 20-epoch validation
    plateau, 200 epochs, endpoint-error loss."""
    defaults = dict(
        lr_policy=LrPolicy("plateau", patience=20, factor=0.5),
        total_epochs=200,
        loss="epe",
        optimizer=OptimizerConfig(lr=1e-4),
        batch_size=8,
    )
    defaults.update(overrides)
    return TrainingSchedule(**defaults)


def s_short_schedule(total_epochs: int = 200, milestones: tuple[int, ...] | None = None,
                     **overrides) -> TrainingSchedule:
    """Milestone preset for from-scratch flow training; default milestones sit
    at 60/80/90% of the epoch budget and are fully configurable."""
    if milestones is None:
        milestones = tuple(int(total_epochs * f) for f in (0.6, 0.8, 0.9))
    return finetune_schedule(
        lr_policy=LrPolicy("milestones", milestones=milestones),
        total_epochs=total_epochs,
        **overrides,
    )


def lr_trace(policy: LrPolicy, initial_lr: float, total_epochs: int,
             val_history=None) -> list[float]:
    """Learning rate in effect during each epoch, as a pure function of the
    policy (and, for plateau, the validation history)."""
    if policy.kind == "milestones":
        return [
            initial_lr * policy.factor ** sum(1 for m in policy.milestones if m <= e)
            for e in range(total_epochs)
        ]
    if val_history is None:
        raise ValueError("plateau trace needs the validation history")
    lrs = []
    lr = initial_lr
    best = float("inf")
    since = 0
    for e in range(total_epochs):
        lrs.append(lr)
        v = val_history[e]
        if v < best:
            best = v
            since = 0
        else:
            since += 1
            if since >= policy.patience:
                lr *= policy.factor
                since = 0
    return lrs


# ---------------------------------------------------------------------------
# Checkpoint container: magic, uint64 header length, JSON header, raw payload
# ---------------------------------------------------------------------------

@dataclass
class Checkpoint:
    spec: NetworkSpec
    net_state: dict[str, torch.Tensor]
    optimizer_state: dict | None
    epoch: int
    best_val: float | None
    seed: int
    trainer_state: dict | None


def save_checkpoint(path, net: InterpFlowNet, optimizer=None, *, epoch: int = 0,
                    best_val: float | None = None, seed: int = 0,
                    trainer_state: dict | None = None) -> None:
    entries = []
    payload = bytearray()

    def add(name: str, tensor: torch.Tensor):
        arr = np.ascontiguousarray(tensor.detach().cpu().numpy())
        if arr.dtype.byteorder == ">":
            arr = arr.astype(arr.dtype.newbyteorder("<"))
        entries.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape)})
        payload.extend(arr.tobytes())

    for k, v in net.state_dict().items():
        add(k, v)

    opt_header = None
    if optimizer is not None:
        osd = optimizer.state_dict()
        opt_header = {
            "param_groups": osd["param_groups"],
            "state": {str(pid): sorted(st) for pid, st in osd["state"].items()},
        }
        for pid in sorted(osd["state"]):
            for name in sorted(osd["state"][pid]):
                add(f"optim.{pid}.{name}", torch.as_tensor(osd["state"][pid][name]))

    header = {
        "format_version": 1,
        "spec": net.spec.to_dict(),
        "epoch": epoch,
        "best_val": best_val,
        "seed": seed,
        "trainer_state": trainer_state,
        "tensors": entries,
        "optimizer": opt_header,
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        f.write(bytes(payload))


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if raw[:8] != CKPT_MAGIC:
        raise ValueError(f"{path}: bad checkpoint magic {raw[:8]!r}")
    (hlen,) = struct.unpack_from("<Q", raw, 8)
    if 16 + hlen > len(raw):
        raise ValueError(f"{path}: truncated header")
    header = json.loads(raw[16 : 16 + hlen])
    offset = 16 + hlen
    tensors: dict[str, torch.Tensor] = {}
    for entry in header["tensors"]:
        dtype = np.dtype(entry["dtype"])
        count = int(np.prod(entry["shape"], dtype=np.int64)) if entry["shape"] else 1
        nbytes = count * dtype.itemsize
        if offset + nbytes > len(raw):
            raise ValueError(f"{path}: truncated payload at tensor {entry['name']!r}")
        arr = np.frombuffer(raw, dtype=dtype, count=count, offset=offset).reshape(entry["shape"])
        tensors[entry["name"]] = torch.from_numpy(arr.copy())
        offset += nbytes

    opt_state = None
    if header["optimizer"] is not None:
        opt_state = {
            "param_groups": header["optimizer"]["param_groups"],
            "state": {
                int(pid): {name: tensors.pop(f"optim.{pid}.{name}") for name in names}
                for pid, names in header["optimizer"]["state"].items()
            },
        }
    return Checkpoint(
        spec=NetworkSpec.from_dict(header["spec"]),
        net_state=tensors,
        optimizer_state=opt_state,
        epoch=header["epoch"],
        best_val=header["best_val"],
        seed=header["seed"],
        trainer_state=header["trainer_state"],
    )


def restore_network(ckpt: Checkpoint) -> InterpFlowNet:
    net = build_network(ckpt.spec)
    net.load_state_dict(ckpt.net_state)
    return net


def restore_optimizer(ckpt: Checkpoint, optimizer) -> None:
    if ckpt.optimizer_state is None:
        raise ValueError("checkpoint carries no optimizer state")
    optimizer.load_state_dict(copy.deepcopy(ckpt.optimizer_state))


# ---------------------------------------------------------------------------
# The training engine
# ---------------------------------------------------------------------------

@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    val_metric: float | None


@dataclass
class TrainResult:
    net: InterpFlowNet
    history: list[EpochRecord]
    best_val: float | None
    best_epoch: int | None
    best_state: dict | None
    lr_events: list[tuple[int, float]]
    n_train_samples: int


def _batch_loss(net, batch, loss_kind, device):
    if loss_kind == "interpolation":
        inputs, target = batch
        pred = net(inputs.to(device))
        return interpolation_loss(pred, target.to(device)), len(inputs)
    inputs, uv, valid = batch
    pred = net(inputs.to(device))
    return epe(pred, uv.to(device), valid.to(device)), len(inputs)


def _evaluate(net, loader, loss_kind, device):
    net.eval()
    total, count = 0.0, 0
    with torch.no_grad():
        for batch in loader:
            loss, n = _batch_loss(net, batch, loss_kind, device)
            total += float(loss) * n
            count += n
    return total / max(count, 1)


def _log_record(run_dir, record: dict):
    if run_dir is None:
        return
    with open(Path(run_dir) / "metrics.jsonl", "a") as f:
        f.write(json.dumps(record, sort_keys=True) + "\n")


def _run_training(net, train_ds, val_ds, schedule: TrainingSchedule, *, seed: int,
                  run_dir=None, device: str = "cpu", workers: int = 0,
                  optimizer=None, start_epoch: int = 0,
                  trainer_state: dict | None = None) -> TrainResult:
    torch.manual_seed(seed)
    net = net.to(device)
    if run_dir is not None:
        Path(run_dir).mkdir(parents=True, exist_ok=True)
    opt = optimizer or torch.optim.Adam(
        net.parameters(),
        lr=schedule.optimizer.lr,
        betas=(schedule.optimizer.beta1, schedule.optimizer.beta2),
        eps=schedule.optimizer.epsilon,
    )

    policy = schedule.lr_policy
    milestone_lrs = (
        lr_trace(policy, schedule.optimizer.lr, schedule.total_epochs)
        if policy.kind == "milestones"
        else None
    )
    state = dict(trainer_state or {"lr": schedule.optimizer.lr, "best": None, "since": 0})

    val_loader = (
        DataLoader(val_ds, batch_size=schedule.batch_size, shuffle=False, num_workers=workers)
        if val_ds is not None and len(val_ds) > 0
        else None
    )

    history: list[EpochRecord] = []
    lr_events: list[tuple[int, float]] = []
    best_val = state.get("best")
    best_epoch = None
    best_state = None

    def save_latest(epoch):
        if run_dir is not None:
            save_checkpoint(
                Path(run_dir) / "latest.ckpt", net, opt, epoch=epoch,
                best_val=best_val, seed=seed, trainer_state=state,
            )

    save_latest(start_epoch - 1)
    for epoch in range(start_epoch, schedule.total_epochs):
        lr = milestone_lrs[epoch] if milestone_lrs is not None else state["lr"]
        for group in opt.param_groups:
            group["lr"] = lr

        if hasattr(train_ds, "set_epoch"):
            train_ds.set_epoch(epoch)
        perm = np.random.default_rng([seed, 1000 + epoch]).permutation(len(train_ds))
        loader = DataLoader(
            train_ds, batch_size=schedule.batch_size, sampler=perm.tolist(), num_workers=workers
        )

        net.train()
        total, count = 0.0, 0
        for batch in loader:
            if len(batch[0]) == 1 and count > 0:
                continue  # a trailing singleton batch breaks batch-norm statistics
            opt.zero_grad()
            loss, n = _batch_loss(net, batch, schedule.loss, device)
            if not torch.isfinite(loss):
                ckpt = Path(run_dir) / "latest.ckpt" if run_dir is not None else None
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch}; last good checkpoint: {ckpt}", ckpt
                )
            loss.backward()
            opt.step()
            total += loss.item() * n
            count += n
        train_loss = total / max(count, 1)

        val_metric = _evaluate(net, val_loader, schedule.loss, device) if val_loader else None
        history.append(EpochRecord(epoch, lr, train_loss, val_metric))
        _log_record(run_dir, {"type": "epoch", "epoch": epoch, "lr": lr,
                              "train_loss": train_loss, "val_metric": val_metric})
        log.info("epoch %d: lr %.3g train %.5f val %s", epoch, lr, train_loss,
                 f"{val_metric:.5f}" if val_metric is not None else "-")

        if val_metric is not None and (best_val is None or val_metric < best_val):
            best_val = val_metric
            best_epoch = epoch
            best_state = {k: v.detach().cpu().clone() for k, v in net.state_dict().items()}
            if run_dir is not None:
                save_checkpoint(Path(run_dir) / "best.ckpt", net, opt, epoch=epoch,
                                best_val=best_val, seed=seed, trainer_state=state)

        if policy.kind == "plateau" and val_metric is not None:
            if state["best"] is None or val_metric < state["best"]:
                state["best"] = val_metric
                state["since"] = 0
            else:
                state["since"] += 1
                if state["since"] >= policy.patience:
                    state["lr"] = state["lr"] * policy.factor
                    state["since"] = 0
                    lr_events.append((epoch, state["lr"]))
                    _log_record(run_dir, {"type": "lr_halved", "epoch": epoch, "lr": state["lr"]})
                    log.info("validation plateau at epoch %d: lr -> %.3g", epoch, state["lr"])
        state["best_val"] = best_val
        save_latest(epoch)

    return TrainResult(net, history, best_val, best_epoch, best_state,
                       lr_events, len(train_ds))


def pretrain(net: InterpFlowNet, train_ds, val_ds, schedule: TrainingSchedule | None = None,
             *, seed: int = 0, run_dir=None, device: str = "cpu",
             workers: int = 0) -> TrainResult:
    """Unsupervised center-frame interpolation training."""
    if net.spec.head != "interpolation":
        raise ValueError(f"pretraining needs an interpolation head, got {net.spec.head!r}")
    schedule = schedule or pretrain_schedule()
    return _run_training(net, train_ds, val_ds, schedule, seed=seed, run_dir=run_dir,
                         device=device, workers=workers)


def holdout_split(train_ds: FlowDataset, fraction: float, seed: int):
    n = len(train_ds.specs)
    n_val = max(1, round(fraction * n))
    order = np.random.default_rng([seed, 777]).permutation(n)
    val_idx = set(order[:n_val].tolist())
    train_specs = [s for i, s in enumerate(train_ds.specs) if i not in val_idx]
    val_specs = [s for i, s in enumerate(train_ds.specs) if i in val_idx]
    sub_train = FlowDataset(train_ds.sequences, train_ds.flows, train_specs,
                            base_seed=train_ds.base_seed, augment=train_ds.augment,
                            augment_cfg=train_ds.augment_cfg)
    sub_val = FlowDataset(train_ds.sequences, train_ds.flows, val_specs,
                          base_seed=train_ds.base_seed, augment=False,
                          augment_cfg=train_ds.augment_cfg)
    return sub_train, sub_val


def finetune(net: InterpFlowNet, train_ds, val_ds=None, schedule: TrainingSchedule | None = None,
             *, seed: int = 0, run_dir=None, device: str = "cpu",
             workers: int = 0) -> TrainResult:
    """Supervised flow training with EPE loss; holds out 10% for validation
    when no explicit validation set is given."""
    if net.spec.head != "flow":
        raise ValueError(f"fine-tuning needs a flow head (use swap_head first), got {net.spec.head!r}")
    schedule = schedule or finetune_schedule()
    if val_ds is None:
        train_ds, val_ds = holdout_split(train_ds, 0.10, seed)
    return _run_training(net, train_ds, val_ds, schedule, seed=seed, run_dir=run_dir,
                         device=device, workers=workers)


def train_from_scratch(spec: NetworkSpec, train_ds, val_ds,
                       schedule: TrainingSchedule | None = None, *, seed: int = 0,
                       run_dir=None, device: str = "cpu", workers: int = 0) -> TrainResult:
    """Freshly initialized flow network trained with the fine-tuning loop."""
    torch.manual_seed(seed)
    net = build_network(replace(spec, head="flow"))
    schedule = schedule or finetune_schedule()
    if val_ds is None:
        train_ds, val_ds = holdout_split(train_ds, 0.10, seed)
    return _run_training(net, train_ds, val_ds, schedule, seed=seed, run_dir=run_dir,
                         device=device, workers=workers)


@dataclass
class SubsampleResult:
    histories: list[list[EpochRecord]]
    subsets: list[list[int]]  # chosen train indices per repeat
    mean_val_curve: np.ndarray


def subsample_finetune(net: InterpFlowNet, train_ds: FlowDataset, val_ds, n_frames: int,
                       repeats: int = 3, seed: int = 0,
                       schedule: TrainingSchedule | None = None, *, run_dir=None,
                       device: str = "cpu", workers: int = 0) -> SubsampleResult:
    """Fine-tune on random ``n_frames``-sized subsets, averaged over repeats.
    The starting weights are identical for every repeat."""
    n = len(train_ds.specs)
    if n_frames > n:
        raise ValueError(f"requested {n_frames} frames but only {n} available")
    schedule = schedule or finetune_schedule()
    histories = []
    subsets = []
    for r in range(repeats):
        if n_frames == n:
            idx = list(range(n))
        else:
            idx = sorted(np.random.default_rng([seed, r]).choice(n, n_frames, replace=False).tolist())
        subsets.append(idx)
        sub = FlowDataset(train_ds.sequences, train_ds.flows, [train_ds.specs[i] for i in idx],
                          base_seed=train_ds.base_seed, augment=train_ds.augment,
                          augment_cfg=train_ds.augment_cfg)
        net_r = copy.deepcopy(net)
        rdir = Path(run_dir) / f"repeat_{r}" if run_dir is not None else None
        result = finetune(net_r, sub, val_ds, schedule, seed=seed + r, run_dir=rdir,
                          device=device, workers=workers)
        histories.append(result.history)
    curve = np.array([[rec.val_metric for rec in h] for h in histories], dtype=np.float64)
    return SubsampleResult(histories, subsets, curve.mean(axis=0))


def resume_training(ckpt_path, train_ds, val_ds, schedule: TrainingSchedule, *,
                    run_dir=None, device: str = "cpu", workers: int = 0) -> TrainResult:
    """Continue a checkpointed run; epoch numbering picks up where it left off."""
    ckpt = load_checkpoint(ckpt_path)
    net = restore_network(ckpt)
    opt = torch.optim.Adam(
        net.parameters(),
        lr=schedule.optimizer.lr,
        betas=(schedule.optimizer.beta1, schedule.optimizer.beta2),
        eps=schedule.optimizer.epsilon,
    )
    if ckpt.optimizer_state is not None:
        restore_optimizer(ckpt, opt)
    return _run_training(net, train_ds, val_ds, schedule, seed=ckpt.seed, run_dir=run_dir,
                         device=device, workers=workers, optimizer=opt,
                         start_epoch=ckpt.epoch + 1, trainer_state=ckpt.trainer_state)
