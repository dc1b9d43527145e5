import json
from pathlib import Path

import numpy as np
import pytest
import torch
import yaml

from proxyflow import cli
from proxyflow.flowio import read_flo
from proxyflow.metrics import MetricsReport
from proxyflow.model import NetworkSpec, build_network, swap_head
from proxyflow.training import load_checkpoint, save_checkpoint


def run_cli(*argv):
    return cli.main([str(a) for a in argv])


def tree_bytes(root: Path) -> dict:
    return {p.relative_to(root): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture()
def toy_config(tmp_path):
    cfg = {
        "model": {"scale": 32, "width": 32, "height": 32},
        "pretrain": {"batch_size": 4, "epochs": 1},
        "finetune": {"batch_size": 4, "epochs": 1},
        "synthetic": {
            "n_sequences": 2,
            "width": 32,
            "height": 32,
            "n_frames": 24,
            "n_layers": 1,
            "velocity_min": -3.0,
            "velocity_max": 3.0,
            "full_frame": True,
        },
    }
    path = tmp_path / "toy.yaml"
    path.write_text(yaml.safe_dump(cfg))
    return path


@pytest.fixture()
def toy_corpus(tmp_path, toy_config):
    out = tmp_path / "corpus"
    assert run_cli("gen-synthetic", "--config", toy_config, "--out", out, "--seed", 7) == 0
    return out


class TestConfig:
    def test_defaults_reproduce_schedule_constants(self):
        cfg = cli.load_config(None, {})
        sched = cli.schedule_from_config(cfg["pretrain"], "pretrain")
        assert sched.optimizer.lr == 1e-4
        assert sched.batch_size == 8
        assert sched.lr_policy.milestones == (3, 6, 8, 10)
        assert sched.total_epochs == 12
        fsched = cli.schedule_from_config(cfg["finetune"], "finetune")
        assert fsched.lr_policy.kind == "plateau"
        assert fsched.lr_policy.patience == 20
        assert fsched.total_epochs == 200

    def test_unknown_keys_listed(self, tmp_path):
        bad = tmp_path / "bad.yaml"
        bad.write_text(yaml.safe_dump({"pretrain": {"learning_rate_typo": 1}}))
        with pytest.raises(cli.ConfigError, match="learning_rate_typo"):
            cli.load_config(bad, {})

    def test_cli_rejects_unknown_keys(self, tmp_path, capsys):
        bad = tmp_path / "bad.yaml"
        bad.write_text(yaml.safe_dump({"bogus_section": {"x": 1}}))
        assert run_cli("pretrain", "--config", bad, "--out", tmp_path / "r") == 2
        assert "bogus_section" in capsys.readouterr().err

    def test_file_overrides_defaults_and_flags_override_file(self, tmp_path):
        f = tmp_path / "c.yaml"
        f.write_text(yaml.safe_dump({"seed": 5, "pretrain": {"epochs": 3}}))
        cfg = cli.load_config(f, {"seed": 9})
        assert cfg["seed"] == 9
        assert cfg["pretrain"]["epochs"] == 3
        assert cfg["pretrain"]["batch_size"] == 8  # untouched default


class TestGenSynthetic:
    def test_deterministic_and_manifest(self, tmp_path, toy_config):
        a, b = tmp_path / "a", tmp_path / "b"
        assert run_cli("gen-synthetic", "--config", toy_config, "--out", a, "--seed", 7) == 0
        assert run_cli("gen-synthetic", "--config", toy_config, "--out", b, "--seed", 7) == 0
        ta, tb = tree_bytes(a), tree_bytes(b)
        assert list(ta) == list(tb)
        assert all(ta[k] == tb[k] for k in ta)
        manifest = (a / "manifest.txt").read_text().strip().splitlines()
        assert len(manifest) == 2

    def test_zero_motion_gives_flat_flow(self, tmp_path):
        cfg = tmp_path / "z.yaml"
        cfg.write_text(yaml.safe_dump({"synthetic": {
            "n_sequences": 1, "width": 32, "height": 32, "n_frames": 8,
            "n_layers": 1, "velocity_min": 0.0, "velocity_max": 0.0,
        }}))
        out = tmp_path / "zero"
        assert run_cli("gen-synthetic", "--config", cfg, "--out", out) == 0
        flow = read_flo(out / "seq_000" / "flow_00000.flo")
        assert np.allclose(flow.u, 0) and np.allclose(flow.v, 0)

    def test_refuses_nonempty_without_force(self, tmp_path, toy_config, toy_corpus):
        assert run_cli("gen-synthetic", "--config", toy_config, "--out", toy_corpus) == 3
        assert run_cli("gen-synthetic", "--config", toy_config, "--out", toy_corpus, "--force") == 0


class TestTrainingCommands:
    def test_pretrain_smoke_and_run_dir(self, tmp_path, toy_config, toy_corpus):
        run = tmp_path / "run"
        code = run_cli("pretrain", "--config", toy_config, "--data", toy_corpus,
                       "--out", run, "--epochs", 1, "--seed", 3)
        assert code == 0
        assert (run / "config.yaml").exists()
        assert (run / "metrics.jsonl").exists()
        assert (run / "latest.ckpt").exists()
        assert (run / "best.ckpt").exists()
        assert (run / "report.json").exists()  # final metrics report
        snapshot = yaml.safe_load((run / "config.yaml").read_text())
        assert snapshot["pretrain"]["epochs"] == 1
        assert snapshot["seed"] == 3
        records = [json.loads(l) for l in (run / "metrics.jsonl").read_text().splitlines()]
        assert [r["epoch"] for r in records if r["type"] == "epoch"] == [0]

    def test_resume_continues_epoch_numbering(self, tmp_path, toy_config, toy_corpus):
        run = tmp_path / "run"
        assert run_cli("pretrain", "--config", toy_config, "--data", toy_corpus,
                       "--out", run, "--epochs", 2, "--seed", 3) == 0
        assert run_cli("pretrain", "--config", toy_config, "--data", toy_corpus,
                       "--out", run, "--epochs", 4, "--seed", 3, "--resume") == 0
        records = [json.loads(l) for l in (run / "metrics.jsonl").read_text().splitlines()]
        epochs = [r["epoch"] for r in records if r["type"] == "epoch"]
        assert epochs == [0, 1, 2, 3]

    def test_finetune_from_checkpoint(self, tmp_path, toy_config, toy_corpus):
        pre = tmp_path / "pre"
        assert run_cli("pretrain", "--config", toy_config, "--data", toy_corpus,
                       "--out", pre, "--epochs", 1) == 0
        fin = tmp_path / "fin"
        code = run_cli("finetune", "--config", toy_config, "--data", toy_corpus,
                       "--out", fin, "--checkpoint", pre / "best.ckpt", "--epochs", 1)
        assert code == 0
        ckpt = load_checkpoint(fin / "latest.ckpt")
        assert ckpt.spec.head == "flow"
        report = MetricsReport.read(fin / "report")
        assert report.rows["val"].epe is not None

    def test_scratch_runs(self, tmp_path, toy_config, toy_corpus):
        run = tmp_path / "scr"
        assert run_cli("scratch", "--config", toy_config, "--data", toy_corpus,
                       "--out", run, "--epochs", 1) == 0
        assert load_checkpoint(run / "latest.ckpt").spec.head == "flow"

    def test_missing_data_is_data_error(self, tmp_path, toy_config):
        assert run_cli("pretrain", "--config", toy_config, "--data", tmp_path / "nope",
                       "--out", tmp_path / "r") == 3


def make_checkpoint(tmp_path, head="interpolation", seed=0):
    torch.manual_seed(seed)
    spec = NetworkSpec.scaled(32, head="interpolation", input_resolution=(32, 32))
    net = build_network(spec)
    if head == "flow":
        net = swap_head(net)
    path = tmp_path / f"{head}.ckpt"
    save_checkpoint(path, net, epoch=0, seed=seed)
    return path


class TestEvalCommands:
    def test_eval_flow_report_roundtrip(self, tmp_path, toy_config, toy_corpus):
        ckpt = make_checkpoint(tmp_path, head="flow")
        out = tmp_path / "evalflow"
        assert run_cli("eval-flow", "--config", toy_config, "--checkpoint", ckpt,
                       "--data", toy_corpus, "--out", out) == 0
        report = MetricsReport.read(out / "report")
        assert "All" in report.rows or len(report.rows) >= 1
        assert (out / "report.txt").exists()

    def test_eval_interp_writes_report(self, tmp_path, toy_config, toy_corpus):
        ckpt = make_checkpoint(tmp_path, head="interpolation")
        out = tmp_path / "evalinterp"
        assert run_cli("eval-interp", "--config", toy_config, "--checkpoint", ckpt,
                       "--data", toy_corpus, "--out", out) == 0
        report = MetricsReport.read(out / "report")
        assert any(name.startswith("linear-blend/") for name in report.rows)

    def test_head_mismatch_rejected(self, tmp_path, toy_config, toy_corpus):
        interp = make_checkpoint(tmp_path, head="interpolation")
        assert run_cli("eval-flow", "--config", toy_config, "--checkpoint", interp,
                       "--data", toy_corpus, "--out", tmp_path / "x") == 2

    def test_sweep_rows_per_size(self, tmp_path, toy_config, toy_corpus):
        ckpt = make_checkpoint(tmp_path, head="flow")
        out = tmp_path / "sweep"
        assert run_cli("sweep", "--config", toy_config, "--checkpoint", ckpt,
                       "--data", toy_corpus, "--out", out,
                       "--sizes", "4,6", "--repeats", 1, "--epochs", 1) == 0
        rows = json.loads((out / "sweep.json").read_text())
        assert [r["n_frames"] for r in rows["sizes"]] == [4, 6]
        assert (out / "sweep.png").exists()

    def test_compare_outputs(self, tmp_path, toy_config, toy_corpus):
        ckpt = make_checkpoint(tmp_path, head="interpolation")
        out = tmp_path / "cmp"
        assert run_cli("compare", "--config", toy_config, "--checkpoint", ckpt,
                       "--data", toy_corpus, "--out", out, "--epochs", 1) == 0
        summary = json.loads((out / "compare.json").read_text())
        assert "final_ratio" in summary
        assert len(summary["finetuned_val_epe"]) == len(summary["scratch_val_epe"]) == 1
        assert (out / "compare.png").exists()


class TestInfer:
    def write_frames(self, tmp_path, n):
        from proxyflow.flowio import write_image
        rng = np.random.default_rng(0)
        paths = []
        for i in range(n):
            p = tmp_path / f"f{i}.png"
            write_image(p, rng.random((32, 32)))
            paths.append(p)
        return paths

    def test_interpolation_one_image(self, tmp_path):
        ckpt = make_checkpoint(tmp_path, head="interpolation")
        frames = self.write_frames(tmp_path, 4)
        out = tmp_path / "o1"
        assert run_cli("infer", "--checkpoint", ckpt, "--out", out, *frames) == 0
        assert (out / "interpolated.png").exists()

    def test_interpolation_wrong_count_usage_error(self, tmp_path):
        ckpt = make_checkpoint(tmp_path, head="interpolation")
        frames = self.write_frames(tmp_path, 3)
        assert run_cli("infer", "--checkpoint", ckpt, "--out", tmp_path / "o", *frames) == 2

    def test_flow_five_frames_four_fields(self, tmp_path):
        ckpt = make_checkpoint(tmp_path, head="flow")
        frames = self.write_frames(tmp_path, 5)
        out = tmp_path / "o2"
        assert run_cli("infer", "--checkpoint", ckpt, "--out", out, *frames) == 0
        assert len(list(out.glob("flow_*.flo"))) == 4
        assert len(list(out.glob("flow_*.png"))) == 4

    def test_flow_two_frames_boundary_doubling(self, tmp_path):
        ckpt = make_checkpoint(tmp_path, head="flow")
        frames = self.write_frames(tmp_path, 2)
        out = tmp_path / "o3"
        assert run_cli("infer", "--checkpoint", ckpt, "--out", out, *frames) == 0
        assert len(list(out.glob("flow_*.flo"))) == 1
