import numpy as np
import pytest
import torch

from proxyflow.data import AugmentConfig, FlowDataset, InterpolationDataset, SampleSpec
from proxyflow.errors import TrainingDiverged
from proxyflow.model import NetworkSpec, build_network, swap_head
from proxyflow.synthetic import SyntheticConfig, generate_synthetic_sequence
from proxyflow.training import (
    LrPolicy,
    OptimizerConfig,
    TrainingSchedule,
    finetune,
    finetune_schedule,
    load_checkpoint,
    lr_trace,
    pretrain,
    pretrain_schedule,
    restore_network,
    restore_optimizer,
    save_checkpoint,
    s_short_schedule,
    subsample_finetune,
    train_from_scratch,
)

TINY = dict(input_resolution=(32, 32))


def tiny_spec(head="interpolation"):
    return NetworkSpec.scaled(32, head=head, **TINY)


def make_interp_data(seed=0, n_frames=24, size=(32, 32)):
    cfg = SyntheticConfig(width=size[0], height=size[1], n_frames=n_frames, n_layers=2,
                          velocity_range=(-3.0, 3.0))
    seq = generate_synthetic_sequence(cfg, np.random.default_rng(seed))
    return {"s0": seq.frames}, seq


def interp_dataset(specs_centers, frames, spacing=1, augment=False):
    specs = [SampleSpec("s0", c, spacing) for c in specs_centers]
    return InterpolationDataset(
        {"s0": frames}, specs, augment=augment,
        augment_cfg=AugmentConfig(target_size=(32, 32)),
    )


def make_flow_datasets(seed=1, n_train=12, n_val=4):
    cfg = SyntheticConfig(width=32, height=32, n_frames=n_train + n_val + 2, n_layers=1,
                          velocity_range=(-4.0, 4.0), full_frame=True)
    seq = generate_synthetic_sequence(cfg, np.random.default_rng(seed))
    sequences = {"f0": seq.frames}
    flows = {"f0": seq.flows}
    specs = [SampleSpec("f0", t, kind="flow") for t in range(len(seq.flows))]
    acfg = AugmentConfig(target_size=(32, 32))
    train = FlowDataset(sequences, flows, specs[:n_train], augment=False, augment_cfg=acfg)
    val = FlowDataset(sequences, flows, specs[n_train:], augment=False, augment_cfg=acfg)
    return train, val


# ---------------------------------------------------------------------------
# Schedules and learning-rate traces
# ---------------------------------------------------------------------------

class TestSchedules:
    def test_pretrain_defaults(self):
        s = pretrain_schedule()
        assert s.optimizer.lr == 1e-4
        assert s.batch_size == 8
        assert s.lr_policy.milestones == (3, 6, 8, 10)
        assert s.total_epochs == 12
        assert s.loss == "interpolation"

    def test_finetune_defaults(self):
        s = finetune_schedule()
        assert s.optimizer.lr == 1e-4
        assert s.lr_policy.kind == "plateau"
        assert s.lr_policy.patience == 20
        assert s.lr_policy.factor == 0.5
        assert s.total_epochs == 200
        assert s.loss == "epe"

    def test_s_short_preset_named_milestones(self):
        s = s_short_schedule(total_epochs=100)
        assert s.lr_policy.kind == "milestones"
        assert s.lr_policy.milestones == (60, 80, 90)
        custom = s_short_schedule(total_epochs=100, milestones=(40, 70))
        assert custom.lr_policy.milestones == (40, 70)

    def test_milestones_must_increase(self):
        with pytest.raises(ValueError):
            TrainingSchedule(lr_policy=LrPolicy(kind="milestones", milestones=(6, 3)),
                             total_epochs=12, loss="interpolation")

    def test_positive_lr_required(self):
        with pytest.raises(ValueError):
            TrainingSchedule(optimizer=OptimizerConfig(lr=0.0),
                             lr_policy=LrPolicy(kind="milestones", milestones=()),
                             total_epochs=1, loss="epe")


class TestLrTrace:
    def test_milestone_trace_paper_constants(self):
        trace = lr_trace(LrPolicy("milestones", milestones=(3, 6, 8, 10)), 1e-4, 12)
        assert trace[0] == pytest.approx(1e-4)
        assert trace[2] == pytest.approx(1e-4)
        assert trace[3] == pytest.approx(5e-5)
        assert trace[6] == pytest.approx(2.5e-5)
        assert trace[8] == pytest.approx(1.25e-5)
        assert trace[10] == pytest.approx(6.25e-6)
        assert trace[11] == pytest.approx(6.25e-6)
        assert len(trace) == 12

    def test_plateau_constant_series_first_halving(self):
        # constant validation: first observation improves on +inf, then 20
        # non-improving epochs trigger the halving
        val = [1.0] * 30
        trace = lr_trace(LrPolicy("plateau", patience=20), 1e-4, 30, val)
        assert all(lr == pytest.approx(1e-4) for lr in trace[:21])
        assert trace[21] == pytest.approx(5e-5)

    def test_plateau_never_triggers_when_improving(self):
        val = [1.0 / (e + 1) for e in range(40)]
        trace = lr_trace(LrPolicy("plateau", patience=20), 1e-4, 40, val)
        assert all(lr == pytest.approx(1e-4) for lr in trace)

    def test_plateau_tie_counts_as_no_improvement(self):
        val = [1.0, 0.5] + [0.5] * 25
        trace = lr_trace(LrPolicy("plateau", patience=20), 1e-4, 27, val)
        # improvement at epoch 1; epochs 2..21 are ties -> halve after epoch 21
        assert trace[21] == pytest.approx(1e-4)
        assert trace[22] == pytest.approx(5e-5)

    def test_trainer_replays_trace(self):
        torch.manual_seed(0)
        net = build_network(tiny_spec())
        frames, _ = make_interp_data()
        ds = interp_dataset(range(3, 10), frames["s0"])
        sched = pretrain_schedule(total_epochs=6, batch_size=4,
                                  lr_policy=LrPolicy("milestones", milestones=(2, 4)))
        result = pretrain(net, ds, ds, sched, seed=0)
        got = [r.lr for r in result.history]
        assert got == lr_trace(sched.lr_policy, sched.optimizer.lr, 6)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

class TestCheckpoint:
    def test_save_load_save_byte_identical(self, tmp_path):
        torch.manual_seed(1)
        net = build_network(tiny_spec())
        opt = torch.optim.Adam(net.parameters(), lr=1e-4)
        loss = net(torch.randn(2, 4, 32, 32)).mean()
        loss.backward()
        opt.step()

        p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        save_checkpoint(p1, net, opt, epoch=3, best_val=0.25, seed=7)
        ckpt = load_checkpoint(p1)
        net2 = restore_network(ckpt)
        opt2 = torch.optim.Adam(net2.parameters(), lr=1e-4)
        restore_optimizer(ckpt, opt2)
        save_checkpoint(p2, net2, opt2, epoch=ckpt.epoch, best_val=ckpt.best_val, seed=ckpt.seed)
        assert p1.read_bytes() == p2.read_bytes()

    def test_roundtrip_restores_parameters_exactly(self, tmp_path):
        torch.manual_seed(2)
        net = build_network(tiny_spec(head="flow"))
        p = tmp_path / "c.ckpt"
        save_checkpoint(p, net, epoch=0, seed=0)
        net2 = restore_network(load_checkpoint(p))
        assert net2.spec == net.spec
        for k, v in net.state_dict().items():
            assert torch.equal(v, net2.state_dict()[k]), k

    def test_header_fields(self, tmp_path):
        net = build_network(tiny_spec())
        p = tmp_path / "d.ckpt"
        save_checkpoint(p, net, epoch=5, best_val=1.5, seed=3)
        ckpt = load_checkpoint(p)
        assert ckpt.epoch == 5
        assert ckpt.best_val == 1.5
        assert ckpt.seed == 3
        assert ckpt.spec.head == "interpolation"

    def test_bad_magic_rejected(self, tmp_path):
        p = tmp_path / "junk.ckpt"
        p.write_bytes(b"NOTACKPT" + b"\0" * 64)
        with pytest.raises(ValueError, match="magic"):
            load_checkpoint(p)


# ---------------------------------------------------------------------------
# Training loops
# ---------------------------------------------------------------------------

class TestPretrain:
    def test_requires_interpolation_head(self):
        net = build_network(tiny_spec(head="flow"))
        frames, _ = make_interp_data()
        ds = interp_dataset(range(3, 8), frames["s0"])
        with pytest.raises(ValueError, match="head"):
            pretrain(net, ds, ds, pretrain_schedule(total_epochs=1))

    def test_overfit_two_samples(self):
        torch.manual_seed(3)
        net = build_network(tiny_spec())
        frames, _ = make_interp_data(seed=4)
        ds = interp_dataset([4, 9], frames["s0"])
        sched = pretrain_schedule(
            total_epochs=200, batch_size=2,
            optimizer=OptimizerConfig(lr=2e-3),
            lr_policy=LrPolicy("milestones", milestones=()),
        )
        result = pretrain(net, ds, None, sched, seed=0)
        first = result.history[0].train_loss
        assert result.history[-1].train_loss < 0.1 * first

    def test_fixed_seed_identical_history(self):
        frames, _ = make_interp_data(seed=5)
        ds = interp_dataset(range(3, 12), frames["s0"], augment=True)
        sched = pretrain_schedule(total_epochs=3, batch_size=4)
        histories = []
        for _ in range(2):
            torch.manual_seed(11)
            net = build_network(tiny_spec())
            result = pretrain(net, ds, ds, sched, seed=13)
            histories.append([(r.train_loss, r.val_metric) for r in result.history])
        assert histories[0] == histories[1]

    def test_best_checkpoint_and_history_recorded(self, tmp_path):
        torch.manual_seed(6)
        net = build_network(tiny_spec())
        frames, _ = make_interp_data(seed=6)
        ds = interp_dataset(range(3, 10), frames["s0"])
        sched = pretrain_schedule(total_epochs=2, batch_size=4)
        result = pretrain(net, ds, ds, sched, seed=0, run_dir=tmp_path)
        assert len(result.history) == 2
        assert (tmp_path / "latest.ckpt").exists()
        assert (tmp_path / "best.ckpt").exists()
        assert (tmp_path / "metrics.jsonl").exists()
        best = load_checkpoint(tmp_path / "best.ckpt")
        assert best.best_val == pytest.approx(result.best_val)

    def test_nan_loss_aborts_preserving_checkpoint(self, tmp_path):
        torch.manual_seed(7)
        net = build_network(tiny_spec())
        frames, _ = make_interp_data(seed=7)
        ds = interp_dataset(range(3, 8), frames["s0"])

        class PoisonDataset(torch.utils.data.Dataset):
            def __len__(self):
                return len(ds)

            def set_epoch(self, e):
                ds.set_epoch(e)

            def __getitem__(self, i):
                x, y = ds[i]
                return x, y * float("nan")

        with pytest.raises(TrainingDiverged):
            pretrain(net, PoisonDataset(), None, pretrain_schedule(total_epochs=1, batch_size=4),
                     seed=0, run_dir=tmp_path)
        assert (tmp_path / "latest.ckpt").exists()  # init checkpoint survives


class TestFinetune:
    def test_requires_flow_head(self):
        net = build_network(tiny_spec())
        train, val = make_flow_datasets()
        with pytest.raises(ValueError, match="head"):
            finetune(net, train, val, finetune_schedule(total_epochs=1))

    def test_history_tracks_validation_epe(self):
        torch.manual_seed(8)
        net = swap_head(build_network(tiny_spec()))
        train, val = make_flow_datasets(seed=8)
        sched = finetune_schedule(total_epochs=2, batch_size=4)
        result = finetune(net, train, val, sched, seed=0)
        assert len(result.history) == 2
        assert all(r.val_metric is not None and r.val_metric >= 0 for r in result.history)

    def test_default_holdout_when_no_val(self):
        torch.manual_seed(9)
        net = swap_head(build_network(tiny_spec()))
        train, _ = make_flow_datasets(seed=9, n_train=20, n_val=0)
        sched = finetune_schedule(total_epochs=1, batch_size=4)
        result = finetune(net, train, None, sched, seed=0)
        assert result.history[0].val_metric is not None
        assert result.n_train_samples == 18  # 10% held out

    def test_every_gradient_step_changes_parameters(self):
        torch.manual_seed(10)
        net = swap_head(build_network(tiny_spec()))
        train, val = make_flow_datasets(seed=10)
        before = {k: v.clone() for k, v in net.state_dict().items() if v.dtype.is_floating_point}
        finetune(net, train, val, finetune_schedule(total_epochs=1, batch_size=4), seed=0)
        changed = [k for k, v in net.state_dict().items()
                   if k in before and not torch.equal(before[k], v)]
        weights = [k for k in before if k.endswith(".weight") or k.endswith(".bias")]
        assert set(weights) <= set(changed)


class TestScratchAndSubsample:
    def test_scratch_history_length(self):
        train, val = make_flow_datasets(seed=11)
        sched = finetune_schedule(total_epochs=3, batch_size=4)
        result = train_from_scratch(tiny_spec(head="flow"), train, val, sched, seed=0)
        assert len(result.history) == sched.total_epochs
        assert result.net.spec.head == "flow"

    def test_subsample_full_set_matches_plain_finetune(self):
        train, val = make_flow_datasets(seed=12)
        sched = finetune_schedule(total_epochs=2, batch_size=4)

        torch.manual_seed(14)
        net = swap_head(build_network(tiny_spec()))
        plain = finetune(net, train, val, sched, seed=5)

        torch.manual_seed(14)
        net2 = swap_head(build_network(tiny_spec()))
        sub = subsample_finetune(net2, train, val, n_frames=len(train.specs), repeats=1,
                                 seed=5, schedule=sched)
        assert [r.val_metric for r in plain.history] == [r.val_metric for r in sub.histories[0]]

    def test_subsets_differ_across_repeats(self):
        train, val = make_flow_datasets(seed=13)
        sched = finetune_schedule(total_epochs=1, batch_size=4)
        torch.manual_seed(15)
        net = swap_head(build_network(tiny_spec()))
        sub = subsample_finetune(net, train, val, n_frames=4, repeats=3, seed=1, schedule=sched)
        assert len(sub.subsets) == 3
        assert len({tuple(s) for s in sub.subsets}) > 1
        assert all(len(s) == 4 for s in sub.subsets)

    def test_oversized_subsample_rejected(self):
        train, val = make_flow_datasets(seed=14)
        net = swap_head(build_network(tiny_spec()))
        with pytest.raises(ValueError, match=str(len(train.specs))):
            subsample_finetune(net, train, val, n_frames=10_000, repeats=1, seed=0,
                               schedule=finetune_schedule(total_epochs=1))

    def test_mean_curve_is_mean_of_histories(self):
        train, val = make_flow_datasets(seed=15)
        sched = finetune_schedule(total_epochs=2, batch_size=4)
        torch.manual_seed(16)
        net = swap_head(build_network(tiny_spec()))
        sub = subsample_finetune(net, train, val, n_frames=6, repeats=2, seed=2, schedule=sched)
        stacked = np.array([[r.val_metric for r in h] for h in sub.histories])
        assert np.allclose(sub.mean_val_curve, stacked.mean(axis=0))
