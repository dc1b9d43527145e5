#!/usr/bin/env python3
"""End-to-end desk-scale experiment: synthesize corpora, pretrain the
interpolation network, fine-tune it into a flow estimator, and reproduce the
pretrained-vs-scratch and low-data comparisons.

Everything runs through the CLI so each stage leaves a reproducible run
directory. Expect roughly half an hour on a laptop CPU.

    python scripts/toy_pipeline.py --workdir runs/toy
"""

import argparse
import subprocess
import sys
from pathlib import Path

import yaml

TOY_CONFIG = {
    "seed": 0,
    "model": {"scale": 16, "width": 64, "height": 32},
    "data": {"split": "sequences"},
    "pretrain": {"epochs": 12},
    "finetune": {"epochs": 60},
    "sweep": {"sizes": [25, 50, 100, 200], "repeats": 3},
    "synthetic": {
        "n_sequences": 54,
        "width": 64,
        "height": 32,
        "n_frames": 30,
        "n_layers": 2,
        "velocity_min": -4.0,
        "velocity_max": 4.0,
        "noise_sigma": 0.01,
    },
}

FLOW_CONFIG_OVERRIDES = {
    "synthetic": {
        "n_sequences": 30,
        "n_frames": 9,
        "n_layers": 1,
        "velocity_min": -5.5,
        "velocity_max": 5.5,
        "full_frame": True,
        "corpus_tag": "synthetic-flow",
    },
}


def run(*cmd):
    printable = " ".join(str(c) for c in cmd)
    print(f"\n$ {printable}", flush=True)
    code = subprocess.call([str(c) for c in cmd])
    if code != 0:
        sys.exit(code)


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--workdir", default="runs/toy")
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    work = Path(args.workdir)
    work.mkdir(parents=True, exist_ok=True)

    cfg = dict(TOY_CONFIG, seed=args.seed)
    cfg_path = work / "toy.yaml"
    cfg_path.write_text(yaml.safe_dump(cfg))

    flow_cfg = {**cfg, "synthetic": {**cfg["synthetic"], **FLOW_CONFIG_OVERRIDES["synthetic"]}}
    flow_cfg_path = work / "toy_flow.yaml"
    flow_cfg_path.write_text(yaml.safe_dump(flow_cfg))

    pretrain_corpus = work / "corpus_interp"
    flow_corpus = work / "corpus_flow"
    run("proxyflow", "gen-synthetic", "--config", cfg_path, "--out", pretrain_corpus, "--force")
    run("proxyflow", "gen-synthetic", "--config", flow_cfg_path, "--out", flow_corpus,
        "--seed", args.seed + 1, "--force")

    pre = work / "pretrain"
    run("proxyflow", "pretrain", "--config", cfg_path, "--data", pretrain_corpus, "--out", pre)

    fin = work / "finetune"
    run("proxyflow", "finetune", "--config", flow_cfg_path, "--data", flow_corpus,
        "--out", fin, "--checkpoint", pre / "best.ckpt")

    run("proxyflow", "eval-flow", "--config", flow_cfg_path, "--checkpoint", fin / "best.ckpt",
        "--data", flow_corpus, "--out", work / "eval_flow")
    run("proxyflow", "eval-interp", "--config", cfg_path, "--checkpoint", pre / "best.ckpt",
        "--data", pretrain_corpus, "--out", work / "eval_interp")

    run("proxyflow", "compare", "--config", flow_cfg_path, "--checkpoint", pre / "best.ckpt",
        "--data", flow_corpus, "--out", work / "compare")
    run("proxyflow", "sweep", "--config", flow_cfg_path, "--checkpoint", fin / "best.ckpt",
        "--data", flow_corpus, "--out", work / "sweep", "--epochs", "30")

    print(f"\nall stages complete; results under {work}/")


if __name__ == "__main__":
    main()
