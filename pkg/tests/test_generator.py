"""Generator training loop, FID probing, and checkpoint selection."""

import pytest
import torch

from nearnd.fid import compute_stats, frechet_distance
from nearnd.generator import (
    CheckpointRecord,
    GenerationRun,
    GeneratorTrainConfig,
    SelectedCheckpoint,
    make_fid_probe,
    select_checkpoint,
    train_generator,
)
from nearnd.scorenets import MLPScoreNet
from nearnd.sde import SamplerConfig, VPSchedule


def _run_with_fids(fids):
    return GenerationRun(
        checkpoints=[
            CheckpointRecord(checkpoint_id=f"ckpt_{i}", step=(i + 1) * 10, fid=f, state={})
            for i, f in enumerate(fids)
        ],
        band=(30, 50),
        band_not_reached=False,
    )


class TestSelectCheckpoint:
    def test_first_in_band(self):
        run = _run_with_fids([300.0, 180.0, 45.0, 12.0])
        assert select_checkpoint(run, (30, 50)) == SelectedCheckpoint("ckpt_2", False)

    def test_nearest_to_midpoint_when_missed(self):
        run = _run_with_fids([300.0, 250.0])
        assert select_checkpoint(run, (30, 50)) == SelectedCheckpoint("ckpt_1", True)

    def test_alternate_band(self):
        run = _run_with_fids([300.0, 180.0, 45.0, 12.0])
        assert select_checkpoint(run, (100, 200)) == SelectedCheckpoint("ckpt_1", False)

    def test_empty_run_rejected(self):
        with pytest.raises(ValueError, match="empty"):
            select_checkpoint(GenerationRun(), (30, 50))


class TestGenerationRunValidation:
    def test_steps_strictly_increasing(self):
        with pytest.raises(ValueError, match="strictly increasing"):
            GenerationRun(
                checkpoints=[
                    CheckpointRecord("a", 10, 1.0, {}),
                    CheckpointRecord("b", 10, 2.0, {}),
                ]
            )

    def test_fid_must_be_finite_nonnegative(self):
        with pytest.raises(ValueError, match="invalid FID"):
            GenerationRun(checkpoints=[CheckpointRecord("a", 10, float("nan"), {})])
        with pytest.raises(ValueError, match="invalid FID"):
            GenerationRun(checkpoints=[CheckpointRecord("a", 10, -1.0, {})])


class TestMakeFidProbe:
    def test_identity_features_zero_for_same_distribution(self):
        rng = torch.Generator().manual_seed(0)
        real = torch.randn(500, 4, generator=rng)
        probe = make_fid_probe(lambda x: x.numpy(), real)
        same = real + 0.0
        assert probe(same) == pytest.approx(0.0, abs=1e-9)

    def test_matches_direct_frechet(self):
        rng = torch.Generator().manual_seed(1)
        real = torch.randn(300, 3, generator=rng)
        fake = torch.randn(300, 3, generator=rng) + 2.0
        probe = make_fid_probe(lambda x: x.numpy(), real)
        expected = frechet_distance(compute_stats(real.numpy()), compute_stats(fake.numpy()))
        assert probe(fake) == pytest.approx(expected, rel=1e-12)


def _tiny_setup(seed=0):
    schedule = VPSchedule()
    torch.manual_seed(seed)
    net = MLPScoreNet(dim=2, hidden=8, depth=1, schedule=schedule)
    data = torch.rand(64, 2, generator=torch.Generator().manual_seed(seed)) * 2 - 1
    return schedule, net, data


class TestTrainGenerator:
    def test_zero_budget_flags_band_not_reached(self):
        schedule, net, data = _tiny_setup()
        cfg = GeneratorTrainConfig(max_steps=0, probe_every=1, fid_band=(0.0, 1.0))
        run = train_generator(data, schedule, net, cfg, lambda s: 1.0)
        assert run.checkpoints == []
        assert run.band_not_reached

    def test_stops_at_first_in_band_probe(self):
        schedule, net, data = _tiny_setup()
        fids = iter([250.0, 120.0, 40.0, 5.0])
        cfg = GeneratorTrainConfig(
            max_steps=100,
            probe_every=10,
            fid_band=(30.0, 50.0),
            sampler=SamplerConfig(num_steps=4),
            probe_samples=8,
        )
        run = train_generator(data, schedule, net, cfg, lambda s: next(fids))
        assert not run.band_not_reached
        assert run.selected_id == "ckpt_0000030"
        assert [c.fid for c in run.checkpoints] == [250.0, 120.0, 40.0]
        assert [c.step for c in run.checkpoints] == [10, 20, 30]

    def test_budget_exhausted_returns_flagged_run(self):
        schedule, net, data = _tiny_setup()
        cfg = GeneratorTrainConfig(
            max_steps=30,
            probe_every=10,
            fid_band=(0.0, 0.1),
            sampler=SamplerConfig(num_steps=4),
            probe_samples=8,
        )
        run = train_generator(data, schedule, net, cfg, lambda s: 500.0)
        assert run.band_not_reached
        assert len(run.checkpoints) == 3

    def test_checkpoint_states_are_snapshots(self):
        # parameter snapshots must differ across steps (training moves them)
        schedule, net, data = _tiny_setup()
        cfg = GeneratorTrainConfig(
            max_steps=20,
            probe_every=10,
            lr=1e-2,
            fid_band=None,
            sampler=SamplerConfig(num_steps=4),
            probe_samples=8,
        )
        run = train_generator(data, schedule, net, cfg, lambda s: 100.0)
        first, second = run.checkpoints
        diffs = [
            (first.state[key] - second.state[key]).abs().max().item() for key in first.state
        ]
        assert max(diffs) > 0

    def test_deterministic_under_seed(self):
        states = []
        for _ in range(2):
            schedule, net, data = _tiny_setup(seed=3)
            cfg = GeneratorTrainConfig(
                max_steps=15,
                probe_every=15,
                fid_band=None,
                sampler=SamplerConfig(num_steps=4),
                probe_samples=8,
                seed=11,
            )
            run = train_generator(data, schedule, net, cfg, lambda s: 42.0)
            states.append(run.checkpoints[-1].state)
        for key in states[0]:
            assert torch.equal(states[0][key], states[1][key])

    def test_invalid_probe_value_rejected(self):
        schedule, net, data = _tiny_setup()
        cfg = GeneratorTrainConfig(
            max_steps=10, probe_every=10, fid_band=None,
            sampler=SamplerConfig(num_steps=4), probe_samples=8,
        )
        with pytest.raises(ValueError, match="invalid value"):
            train_generator(data, schedule, net, cfg, lambda s: float("nan"))

    def test_model_range_required_for_image_batches(self):
        from nearnd.data import ImageBatch, STORAGE_RANGE

        schedule, net, _ = _tiny_setup()
        batch = ImageBatch(torch.rand(4, 1, 8, 8), STORAGE_RANGE)
        cfg = GeneratorTrainConfig(max_steps=1, fid_band=None)
        with pytest.raises(ValueError, match="model-range"):
            train_generator(batch, schedule, net, cfg, lambda s: 1.0)


class TestConfigValidation:
    def test_band_order(self):
        with pytest.raises(ValueError, match="lo <= hi"):
            GeneratorTrainConfig(fid_band=(50.0, 30.0))

    def test_lr_decay_choices(self):
        with pytest.raises(ValueError, match="lr_decay"):
            GeneratorTrainConfig(lr_decay="exponential")
