"""Score-network training with FID-probed checkpoints and premature stopping.

Training optimizes the denoising score-matching loss; every probe_every steps
a probe batch is sampled and its FID against the normal training set is
recorded together with a parameter snapshot. Training stops as soon as a
probe FID lands inside the target band (the premature checkpoint the
near-anomaly pipeline wants), or when the step budget runs out, in which case
the run is flagged band_not_reached and the caller decides what to do.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numpy as np
import torch

from .data import ImageBatch
from .fid import compute_stats, frechet_distance
from .sde import SamplerConfig, dsm_loss, sample_tensor


@dataclass(frozen=True)
class GeneratorTrainConfig:
    """Budget, optimizer, probe cadence and the target FID band."""

    max_steps: int = 2000
    batch_size: int = 32
    lr: float = 1e-3
    lr_decay: str = "none"  # "none" or "cosine" (annealed to 0 over max_steps)
    optimizer: str = "adam"
    probe_every: int = 200
    probe_samples: int | None = None  # default min(1024, n_train)
    fid_band: tuple[float, float] | None = (30.0, 50.0)
    sampler: SamplerConfig = field(default_factory=lambda: SamplerConfig(num_steps=250))
    seed: int = 0

    def __post_init__(self):
        if self.max_steps < 0:
            raise ValueError("max_steps must be >= 0")
        if self.batch_size < 1 or self.probe_every < 1:
            raise ValueError("batch_size and probe_every must be >= 1")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.lr_decay not in ("none", "cosine"):
            raise ValueError(f"unknown lr_decay {self.lr_decay!r}")
        if self.fid_band is not None:
            lo, hi = self.fid_band
            if not (0 <= lo <= hi):
                raise ValueError(f"fid_band must satisfy 0 <= lo <= hi, got {self.fid_band}")


@dataclass
class CheckpointRecord:
    checkpoint_id: str
    step: int
    fid: float
    state: dict
    sample_manifest_path: str | None = None


@dataclass
class GenerationRun:
    """Ordered checkpoints (strictly increasing steps) with FID annotations."""

    checkpoints: list[CheckpointRecord] = field(default_factory=list)
    band: tuple[float, float] | None = None
    band_not_reached: bool = True
    selected_id: str | None = None
    seed: int = 0

    def __post_init__(self):
        steps = [c.step for c in self.checkpoints]
        if any(b <= a for a, b in zip(steps, steps[1:])):
            raise ValueError("checkpoint steps must be strictly increasing")
        for c in self.checkpoints:
            if not np.isfinite(c.fid) or c.fid < 0:
                raise ValueError(f"checkpoint {c.checkpoint_id} has invalid FID {c.fid}")

    def checkpoint(self, checkpoint_id: str) -> CheckpointRecord:
        for c in self.checkpoints:
            if c.checkpoint_id == checkpoint_id:
                return c
        raise KeyError(f"no checkpoint {checkpoint_id!r} in run")

    def fids(self) -> np.ndarray:
        return np.array([c.fid for c in self.checkpoints], dtype=np.float64)


class SelectedCheckpoint(NamedTuple):
    checkpoint_id: str
    approximate: bool


def select_checkpoint(run: GenerationRun, band: tuple[float, float]) -> SelectedCheckpoint:
    """Earliest checkpoint with FID inside the band; otherwise the one whose
    FID is closest to the band midpoint, flagged approximate."""
    if not run.checkpoints:
        raise ValueError("cannot select from an empty generation run")
    lo, hi = band
    for c in run.checkpoints:
        if lo <= c.fid <= hi:
            return SelectedCheckpoint(c.checkpoint_id, approximate=False)
    mid = (lo + hi) / 2.0
    best = min(run.checkpoints, key=lambda c: (abs(c.fid - mid), c.step))
    return SelectedCheckpoint(best.checkpoint_id, approximate=True)


def make_fid_probe(feature_fn: Callable[[torch.Tensor], np.ndarray], real: torch.Tensor):
    """FID probe against a fixed real set; real stats are computed once.

    feature_fn maps a raw sample tensor to an N x D feature matrix. For image
    pipelines this is a frozen encoder; for low-dimensional toy data the
    identity works.
    """
    real_stats = compute_stats(feature_fn(real))

    def probe(samples: torch.Tensor) -> float:
        return frechet_distance(real_stats, compute_stats(feature_fn(samples)))

    return probe


def _unwrap(data: ImageBatch | torch.Tensor) -> torch.Tensor:
    if isinstance(data, ImageBatch):
        if data.value_range != (-1.0, 1.0):
            raise ValueError("train_generator expects model-range [-1, 1] data")
        return data.data
    return data


def train_generator(
    normal_train: ImageBatch | torch.Tensor,
    schedule,
    score_net: torch.nn.Module,
    config: GeneratorTrainConfig,
    fid_probe: Callable[[torch.Tensor], float],
) -> GenerationRun:
    """Train the score network, probing FID on a cadence until the band is hit.

    The returned run carries in-memory parameter snapshots; persisting them
    is the caller's business. Deterministic under a fixed config seed.
    """
    data = _unwrap(normal_train)
    if data.shape[0] < 1:
        raise ValueError("normal_train must be nonempty")
    n = data.shape[0]
    sample_shape = tuple(data.shape[1:])
    probe_n = config.probe_samples if config.probe_samples is not None else min(1024, n)

    gen = torch.Generator().manual_seed(config.seed)
    if config.optimizer == "adam":
        opt = torch.optim.Adam(score_net.parameters(), lr=config.lr)
    else:
        opt = torch.optim.SGD(score_net.parameters(), lr=config.lr)
    lr_sched = None
    if config.lr_decay == "cosine" and config.max_steps > 0:
        lr_sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=config.max_steps)

    run = GenerationRun(band=config.fid_band, band_not_reached=True, seed=config.seed)
    score_net.train()
    for step in range(1, config.max_steps + 1):
        idx = torch.randint(0, n, (config.batch_size,), generator=gen)
        loss = dsm_loss(score_net, data[idx], schedule, gen)
        opt.zero_grad()
        loss.backward()
        opt.step()
        if lr_sched is not None:
            lr_sched.step()

        if step % config.probe_every == 0:
            score_net.eval()
            probe_cfg = SamplerConfig(
                num_steps=config.sampler.num_steps,
                t_min=config.sampler.t_min,
                corrector_steps=config.sampler.corrector_steps,
                corrector_snr=config.sampler.corrector_snr,
                rng_seed=config.seed,
            )
            probe_gen = torch.Generator().manual_seed(config.seed * 1_000_003 + step)
            samples = sample_tensor(score_net, schedule, probe_cfg, probe_n, sample_shape, probe_gen)
            fid = float(fid_probe(samples))
            if not np.isfinite(fid) or fid < 0:
                raise ValueError(f"FID probe returned invalid value {fid} at step {step}")
            ckpt = CheckpointRecord(
                checkpoint_id=f"ckpt_{step:07d}",
                step=step,
                fid=fid,
                state=copy.deepcopy(score_net.state_dict()),
            )
            run.checkpoints.append(ckpt)
            score_net.train()
            if config.fid_band is not None:
                lo, hi = config.fid_band
                if lo <= fid <= hi:
                    run.band_not_reached = False
                    run.selected_id = ckpt.checkpoint_id
                    break
    score_net.eval()
    return run
