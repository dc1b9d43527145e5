"""Command-line entry point: one command per pipeline stage.

Configuration is layered: built-in defaults, then a YAML file (--config),
then command-line flags. The merged config is dumped into every run
directory so a run can be reproduced from its snapshot alone.
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch
import yaml

from . import evaluation, flowio, training
from .data import (
    AugmentConfig,
    FlowDataset,
    InterpolationDataset,
    SplitPolicy,
    load_corpus,
    split_train_val,
)
from .errors import ConfigError, DataError, TrainingDiverged
from .model import NetworkSpec, build_network, swap_head
from .synthetic import CorpusConfig, SyntheticConfig, write_synthetic_corpus
from .training import (
    LrPolicy,
    OptimizerConfig,
    TrainingSchedule,
    finetune,
    holdout_split,
    load_checkpoint,
    pretrain,
    restore_network,
    resume_training,
    save_checkpoint,
    train_from_scratch,
)

log = logging.getLogger(__name__)

DATA_ROOT_ENV = "PROXYFLOW_DATA_ROOT"

DEFAULTS = {
    "seed": 0,
    "workers": 0,
    "device": "cpu",
    "data": {
        "root": None,
        "val_root": None,
        "split": "frames",
        "val_fraction": None,
        "augment": True,
    },
    "model": {
        "scale": 1,
        "n_input_frames": 4,
        "width": 384,
        "height": 192,
        "leaky_relu_slope": 0.1,
    },
    "pretrain": {
        "lr": 1e-4,
        "beta1": 0.9,
        "beta2": 0.999,
        "epsilon": 1e-8,
        "batch_size": 8,
        "epochs": 12,
        "policy": "milestones",
        "milestones": [3, 6, 8, 10],
        "factor": 0.5,
        "patience": 20,
    },
    "finetune": {
        "lr": 1e-4,
        "beta1": 0.9,
        "beta2": 0.999,
        "epsilon": 1e-8,
        "batch_size": 8,
        "epochs": 200,
        "policy": "plateau",
        "milestones": [],
        "factor": 0.5,
        "patience": 20,
        "init_checkpoint": None,
        "val_fraction": 0.1,
    },
    "synthetic": {
        "n_sequences": 8,
        "width": 64,
        "height": 32,
        "n_frames": 20,
        "n_layers": 2,
        "velocity_min": -4.0,
        "velocity_max": 4.0,
        "accel_min": 0.0,
        "accel_max": 0.0,
        "full_frame": False,
        "background": 0.35,
        "noise_sigma": 0.0,
        "texture_cell": 4,
        "corpus_tag": "synthetic",
    },
    "sweep": {
        "sizes": [25, 50, 100, 200],
        "repeats": 3,
    },
}


# ---------------------------------------------------------------------------
# Config plumbing
# ---------------------------------------------------------------------------

def _deep_merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _deep_merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def _unknown_keys(given: dict, schema: dict, prefix: str = "") -> list[str]:
    unknown = []
    for key, value in given.items():
        if key not in schema:
            unknown.append(prefix + str(key))
        elif isinstance(value, dict) and isinstance(schema[key], dict):
            unknown.extend(_unknown_keys(value, schema[key], prefix + f"{key}."))
    return unknown


def load_config(path, cli_overrides: dict) -> dict:
    """defaults <- YAML file <- CLI flags; rejects keys absent from defaults."""
    file_cfg = {}
    if path is not None:
        with open(path) as f:
            file_cfg = yaml.safe_load(f) or {}
        if not isinstance(file_cfg, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        unknown = _unknown_keys(file_cfg, DEFAULTS)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
    return _deep_merge(_deep_merge(DEFAULTS, file_cfg), cli_overrides)


def schedule_from_config(section: dict, kind: str) -> TrainingSchedule:
    policy_name = section["policy"]
    if policy_name == "milestones":
        policy = LrPolicy("milestones", milestones=tuple(section["milestones"]),
                          factor=section["factor"])
    elif policy_name == "plateau":
        policy = LrPolicy("plateau", patience=section["patience"], factor=section["factor"])
    elif policy_name == "s_short":
        milestones = tuple(section["milestones"]) or tuple(
            int(section["epochs"] * f) for f in (0.6, 0.8, 0.9)
        )
        policy = LrPolicy("milestones", milestones=milestones, factor=section["factor"])
    else:
        raise ConfigError(f"unknown lr policy {policy_name!r}")
    loss = "interpolation" if kind == "pretrain" else "epe"
    return TrainingSchedule(
        lr_policy=policy,
        total_epochs=section["epochs"],
        loss=loss,
        optimizer=OptimizerConfig(section["lr"], section["beta1"], section["beta2"],
                                  section["epsilon"]),
        batch_size=section["batch_size"],
    )


def spec_from_config(cfg: dict, head: str) -> NetworkSpec:
    m = cfg["model"]
    kwargs = dict(
        n_input_frames=m["n_input_frames"],
        head=head,
        leaky_relu_slope=m["leaky_relu_slope"],
        input_resolution=(m["width"], m["height"]),
    )
    if m["scale"] == 1:
        return NetworkSpec(**kwargs)
    return NetworkSpec.scaled(m["scale"], **kwargs)


def _resolve_data_root(cfg: dict, args) -> Path:
    root = getattr(args, "data", None) or cfg["data"]["root"] or os.environ.get(DATA_ROOT_ENV)
    if root is None:
        raise ConfigError("no data root: pass --data, set data.root, or export "
                          f"{DATA_ROOT_ENV}")
    root = Path(root)
    if not root.exists():
        raise DataError(f"data root {root} does not exist")
    return root


def _augment_cfg(cfg: dict) -> AugmentConfig:
    return AugmentConfig(target_size=(cfg["model"]["width"], cfg["model"]["height"]))


def _prepare_run_dir(args, cfg: dict) -> Path:
    run_dir = Path(args.out) if args.out else Path("runs") / args.command
    run_dir.mkdir(parents=True, exist_ok=True)
    with open(run_dir / "config.yaml", "w") as f:
        yaml.safe_dump(cfg, f, sort_keys=True)
    return run_dir


def _flow_dataset(cfg: dict, root: Path, seed: int, augment: bool | None = None) -> FlowDataset:
    corpus = load_corpus(root)
    specs = corpus.flow_specs()
    if not specs:
        raise DataError(f"{root}: corpus has no ground-truth flow")
    if augment is None:
        augment = cfg["data"]["augment"]
    return FlowDataset(corpus.sequences, corpus.flows, specs, base_seed=seed,
                       augment=augment, augment_cfg=_augment_cfg(cfg))


def _load_net(checkpoint, want_head: str | None = None):
    ckpt = load_checkpoint(checkpoint)
    net = restore_network(ckpt)
    if want_head is not None and net.spec.head != want_head:
        raise ConfigError(
            f"checkpoint {checkpoint} has head {net.spec.head!r}, command needs {want_head!r}"
        )
    return net


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_gen_synthetic(args, cfg) -> int:
    out = Path(args.out) if args.out else Path("runs") / "synthetic"
    if out.exists() and any(out.iterdir()) and not args.force:
        raise DataError(f"{out} exists and is not empty (use --force to overwrite)")
    s = cfg["synthetic"]
    seq_cfg = SyntheticConfig(
        width=s["width"], height=s["height"], n_frames=s["n_frames"], n_layers=s["n_layers"],
        velocity_range=(s["velocity_min"], s["velocity_max"]),
        acceleration_range=(s["accel_min"], s["accel_max"]),
        background_value=s["background"], full_frame=s["full_frame"],
        noise_sigma=s["noise_sigma"], texture_cell=s["texture_cell"],
    )
    manifest = write_synthetic_corpus(
        out, CorpusConfig(s["n_sequences"], seq_cfg, s["corpus_tag"]), cfg["seed"]
    )
    log.info("synthetic corpus at %s (%s)", out, manifest)
    return 0


def _write_interp_report(result, corpus, val_specs, run_dir) -> None:
    net = result.net
    if result.best_state is not None:
        net.load_state_dict(result.best_state)
    by_corpus: dict[str, list] = {}
    for spec in val_specs:
        by_corpus.setdefault(corpus.tags[spec.sequence_id], []).append(spec)
    eval_sets = {}
    for tag, specs in by_corpus.items():
        items = []
        for spec in specs:
            items.extend(evaluation.make_interpolation_eval_items(
                corpus.sequences[spec.sequence_id], [spec]))
        eval_sets[tag] = items
    if not eval_sets:
        return
    report = evaluation.eval_interpolation(net, eval_sets).report
    report.write(Path(run_dir) / "report")
    sys.stdout.write(report.to_text())


def cmd_pretrain(args, cfg) -> int:
    root = _resolve_data_root(cfg, args)
    run_dir = _prepare_run_dir(args, cfg)
    corpus = load_corpus(root)
    policy = SplitPolicy(cfg["data"]["split"], cfg["data"]["val_fraction"], cfg["seed"])
    split = split_train_val(corpus.lengths(), policy)
    acfg = _augment_cfg(cfg)
    train_ds = InterpolationDataset(corpus.sequences, split.train, base_seed=cfg["seed"],
                                    augment=cfg["data"]["augment"], augment_cfg=acfg)
    val_ds = InterpolationDataset(corpus.sequences, split.val, base_seed=cfg["seed"],
                                  augment=False, augment_cfg=acfg)
    schedule = schedule_from_config(cfg["pretrain"], "pretrain")
    if args.resume:
        result = resume_training(run_dir / "latest.ckpt", train_ds, val_ds, schedule,
                                 run_dir=run_dir, device=cfg["device"], workers=cfg["workers"])
    else:
        torch.manual_seed(cfg["seed"])
        net = build_network(spec_from_config(cfg, "interpolation"))
        result = pretrain(net, train_ds, val_ds, schedule, seed=cfg["seed"], run_dir=run_dir,
                          device=cfg["device"], workers=cfg["workers"])
    _write_interp_report(result, corpus, split.val, run_dir)
    return 0


def _write_flow_report(result, val_ds, run_dir) -> None:
    from .flowfield import FlowField
    from .metrics import MetricsReport, epe, fl_all

    net = result.net
    if result.best_state is not None:
        net.load_state_dict(result.best_state)
    records = []
    net.eval()
    with torch.no_grad():
        for i in range(len(val_ds)):
            inputs, uv, valid = val_ds[i]
            pred = net(inputs.unsqueeze(0))[0].numpy()
            gt = FlowField(uv[0].numpy(), uv[1].numpy(), valid.numpy() > 0.5)
            records.append(("val", {"epe": epe(FlowField(pred[0], pred[1]), gt),
                                    "fl_all": fl_all(FlowField(pred[0], pred[1]), gt)}))
    if not records:
        return
    report = MetricsReport.from_samples(records)
    report.write(Path(run_dir) / "report")
    sys.stdout.write(report.to_text())


def _finetune_like(args, cfg, scratch: bool) -> int:
    root = _resolve_data_root(cfg, args)
    run_dir = _prepare_run_dir(args, cfg)
    full = _flow_dataset(cfg, root, cfg["seed"])
    if cfg["data"]["val_root"]:
        train_ds = full
        val_ds = _flow_dataset(cfg, Path(cfg["data"]["val_root"]), cfg["seed"], augment=False)
    else:
        train_ds, val_ds = holdout_split(full, cfg["finetune"]["val_fraction"], cfg["seed"])
    schedule = schedule_from_config(cfg["finetune"], "finetune")
    if args.resume:
        result = resume_training(run_dir / "latest.ckpt", train_ds, val_ds, schedule,
                                 run_dir=run_dir, device=cfg["device"], workers=cfg["workers"])
    elif scratch:
        result = train_from_scratch(spec_from_config(cfg, "flow"), train_ds, val_ds, schedule,
                                    seed=cfg["seed"], run_dir=run_dir, device=cfg["device"],
                                    workers=cfg["workers"])
    else:
        checkpoint = args.checkpoint or cfg["finetune"]["init_checkpoint"]
        if checkpoint is None:
            raise ConfigError("fine-tuning needs --checkpoint (or finetune.init_checkpoint)")
        net = _load_net(checkpoint)
        if net.spec.head == "interpolation":
            torch.manual_seed(cfg["seed"])
            net = swap_head(net)
        result = finetune(net, train_ds, val_ds, schedule, seed=cfg["seed"], run_dir=run_dir,
                          device=cfg["device"], workers=cfg["workers"])
    _write_flow_report(result, val_ds, run_dir)
    return 0


def cmd_finetune(args, cfg) -> int:
    return _finetune_like(args, cfg, scratch=False)


def cmd_scratch(args, cfg) -> int:
    return _finetune_like(args, cfg, scratch=True)


def cmd_eval_interp(args, cfg) -> int:
    root = _resolve_data_root(cfg, args)
    run_dir = _prepare_run_dir(args, cfg)
    net = _load_net(args.checkpoint, want_head="interpolation")
    corpus = load_corpus(root)
    from .data import index_interpolation_samples
    eval_sets: dict[str, list] = {}
    for seq_id, frames in corpus.sequences.items():
        specs = index_interpolation_samples({seq_id: len(frames)})
        items = evaluation.make_interpolation_eval_items(frames, specs)
        eval_sets.setdefault(corpus.tags[seq_id], []).extend(items)
    result = evaluation.eval_interpolation(net, eval_sets)
    result.report.write(run_dir / "report")
    sys.stdout.write(result.report.to_text())
    return 0


def cmd_eval_flow(args, cfg) -> int:
    root = _resolve_data_root(cfg, args)
    run_dir = _prepare_run_dir(args, cfg)
    net = _load_net(args.checkpoint, want_head="flow")
    corpus = load_corpus(root)
    flow_sets: dict[str, list] = {}
    for seq_id, frames in corpus.sequences.items():
        flow_sets.setdefault(corpus.tags[seq_id], []).append((frames, corpus.flows[seq_id]))
    result = evaluation.eval_flow(net, flow_sets)
    result.report.write(run_dir / "report")
    sys.stdout.write(result.report.to_text())
    # one visualization per corpus, from the first pair of the first sequence
    for seq_id, frames in list(corpus.sequences.items())[:1]:
        fields = evaluation.flow_for_sequence(net, frames[:2])
        flowio.write_image(run_dir / "example_flow.png",
                           flowio.flow_to_color(fields[0]).astype(np.float32) / 255.0)
    return 0


def cmd_sweep(args, cfg) -> int:
    root = _resolve_data_root(cfg, args)
    run_dir = _prepare_run_dir(args, cfg)
    net = _load_net(args.checkpoint)
    if net.spec.head == "interpolation":
        torch.manual_seed(cfg["seed"])
        net = swap_head(net)
    full = _flow_dataset(cfg, root, cfg["seed"])
    train_ds, val_ds = holdout_split(full, cfg["finetune"]["val_fraction"], cfg["seed"])
    sizes = [int(s) for s in args.sizes.split(",")] if args.sizes else cfg["sweep"]["sizes"]
    repeats = args.repeats if args.repeats else cfg["sweep"]["repeats"]
    schedule = schedule_from_config(cfg["finetune"], "finetune")
    result = evaluation.low_data_sweep(net, train_ds, val_ds, sizes=sizes, repeats=repeats,
                                       schedule=schedule, seed=cfg["seed"],
                                       device=cfg["device"], workers=cfg["workers"])
    payload = {
        "sizes": [{"n_frames": s, "mean_val_epe": e} for s, e in zip(result.sizes, result.mean_epe)],
        "full_reference_epe": result.full_reference,
        "repeats": repeats,
    }
    (run_dir / "sweep.json").write_text(json.dumps(payload, indent=2, sort_keys=True))
    evaluation.plot_sweep(result, run_dir / "sweep.png")
    sys.stdout.write(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return 0


def cmd_compare(args, cfg) -> int:
    root = _resolve_data_root(cfg, args)
    run_dir = _prepare_run_dir(args, cfg)
    checkpoint = args.checkpoint or cfg["finetune"]["init_checkpoint"]
    if checkpoint is None:
        raise ConfigError("compare needs --checkpoint (or finetune.init_checkpoint)")
    net = _load_net(checkpoint)
    full = _flow_dataset(cfg, root, cfg["seed"])
    train_ds, val_ds = holdout_split(full, cfg["finetune"]["val_fraction"], cfg["seed"])
    schedule = schedule_from_config(cfg["finetune"], "finetune")
    result = evaluation.compare_pretrained_vs_scratch(
        net, train_ds, val_ds, schedule, seed=cfg["seed"],
        device=cfg["device"], workers=cfg["workers"], run_dir=run_dir,
    )
    payload = {
        "final_ratio": result.final_ratio,
        "finetuned_val_epe": [r.val_metric for r in result.finetuned],
        "scratch_val_epe": [r.val_metric for r in result.scratch],
    }
    (run_dir / "compare.json").write_text(json.dumps(payload, indent=2, sort_keys=True))
    evaluation.plot_compare(result, run_dir / "compare.png")
    sys.stdout.write(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return 0


def cmd_infer(args, cfg) -> int:
    net = _load_net(args.checkpoint)
    out = Path(args.out) if args.out else Path(".")
    out.mkdir(parents=True, exist_ok=True)
    frames = [flowio.read_image_gray(p) for p in args.frames]
    if net.spec.head == "interpolation":
        if len(frames) != net.spec.n_input_frames:
            raise ConfigError(
                f"interpolation needs exactly {net.spec.n_input_frames} frames, got {len(frames)}"
            )
        pred = evaluation.predict_center_frame(net, np.stack(frames))
        flowio.write_image(out / "interpolated.png", pred)
        log.info("wrote %s", out / "interpolated.png")
        return 0
    if len(frames) < 2:
        raise ConfigError("flow inference needs at least 2 frames")
    fields = evaluation.flow_for_sequence(net, np.stack(frames))
    for t, field in enumerate(fields):
        flowio.write_flo(out / f"flow_{t:05d}.flo", field)
        flowio.write_image(out / f"flow_{t:05d}.png",
                           flowio.flow_to_color(field).astype(np.float32) / 255.0)
    log.info("wrote %d flow fields to %s", len(fields), out)
    return 0


# ---------------------------------------------------------------------------
# Parser and dispatch
# ---------------------------------------------------------------------------

COMMANDS = {
    "gen-synthetic": cmd_gen_synthetic,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "scratch": cmd_scratch,
    "eval-interp": cmd_eval_interp,
    "eval-flow": cmd_eval_flow,
    "sweep": cmd_sweep,
    "compare": cmd_compare,
    "infer": cmd_infer,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="proxyflow",
                                     description="interpolation-pretrained optical flow toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, data=True, checkpoint=False, resume=False):
        p.add_argument("--config", default=None, help="YAML config file")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--workers", type=int, default=None)
        p.add_argument("--device", default=None)
        p.add_argument("--epochs", type=int, default=None)
        p.add_argument("--out", default=None, help="run/output directory")
        p.add_argument("--force", action="store_true")
        if data:
            p.add_argument("--data", default=None, help=f"corpus root (or ${DATA_ROOT_ENV})")
        if checkpoint:
            p.add_argument("--checkpoint", default=None)
        if resume:
            p.add_argument("--resume", action="store_true",
                           help="continue from <out>/latest.ckpt")

    common(sub.add_parser("gen-synthetic", help="write a synthetic corpus"), data=False)
    common(sub.add_parser("pretrain", help="unsupervised interpolation pretraining"), resume=True)
    common(sub.add_parser("finetune", help="supervised flow fine-tuning"),
           checkpoint=True, resume=True)
    common(sub.add_parser("scratch", help="flow training from scratch"), resume=True)
    common(sub.add_parser("eval-interp", help="interpolation PSNR/SSIM report"), checkpoint=True)
    common(sub.add_parser("eval-flow", help="flow EPE/Fl-all report"), checkpoint=True)
    p_sweep = sub.add_parser("sweep", help="low-data fine-tuning sweep")
    common(p_sweep, checkpoint=True)
    p_sweep.add_argument("--sizes", default=None, help="comma-separated subset sizes")
    p_sweep.add_argument("--repeats", type=int, default=None)
    common(sub.add_parser("compare", help="pretrained vs from-scratch comparison"),
           checkpoint=True)
    p_infer = sub.add_parser("infer", help="run a checkpoint on frames")
    common(p_infer, data=False, checkpoint=True)
    p_infer.add_argument("frames", nargs="+", help="input frame images, in order")
    return parser


def _cli_overrides(args) -> dict:
    overrides: dict = {}
    for key in ("seed", "workers", "device"):
        if getattr(args, key, None) is not None:
            overrides[key] = getattr(args, key)
    if getattr(args, "epochs", None) is not None:
        overrides.setdefault("pretrain", {})["epochs"] = args.epochs
        overrides.setdefault("finetune", {})["epochs"] = args.epochs
    return overrides


def main(argv=None) -> int:
    logging.basicConfig(stream=sys.stderr, level=logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        cfg = load_config(getattr(args, "config", None), _cli_overrides(args))
        return COMMANDS[args.command](args, cfg)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (DataError, FileNotFoundError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return 3
    except TrainingDiverged as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
