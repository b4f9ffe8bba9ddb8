"""Feature extraction and binary fine-tuning against generated near-anomalies.

The desk-scale backbone is a stack of L conv blocks (GroupNorm, SiLU, two
stride-2 stages) followed by global average pooling; the pooled activations
are the embedding, so freezing the first d blocks freezes exactly the
parameters of blocks 0..d-1 and nothing else. Fine-tuning attaches a linear
two-way head, trains normal-vs-fake with plain SGD, and discards the head:
the returned object is a feature extractor only.
"""

from __future__ import annotations

import copy
import hashlib
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import MODEL_RANGE, ImageBatch
from .sde import DivergenceError

_EMBED_CHUNK = 256


@dataclass(frozen=True)
class EmbeddingMatrix:
    """N x D float32 feature matrix with a tag naming where it came from."""

    data: np.ndarray
    source_tag: str = ""

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float32)
        object.__setattr__(self, "data", data)
        if data.ndim != 2:
            raise ValueError(f"embedding matrix must be 2-D, got shape {data.shape}")
        if not np.isfinite(data).all():
            raise ValueError("embedding matrix contains non-finite values")

    @property
    def dim(self) -> int:
        return self.data.shape[1]

    def __len__(self) -> int:
        return self.data.shape[0]


class _BackboneBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int, stride: int):
        super().__init__()
        self.conv = nn.Conv2d(c_in, c_out, 3, stride=stride, padding=1)
        self.norm = nn.GroupNorm(min(8, c_out), c_out)

    def forward(self, x):
        return F.silu(self.norm(self.conv(x)))


class ConvBackbone(nn.Module):
    """Conv encoder with an ordered list of blocks and a freeze depth.

    Channel width doubles at each of the two stride-2 blocks (placed at
    L//3 and 2L//3), so the embedding dimension is 4 * width.
    """

    def __init__(
        self,
        in_channels: int = 1,
        num_blocks: int = 12,
        width: int = 16,
        pretrained_tag: str = "random",
        seed: int | None = None,
    ):
        super().__init__()
        if num_blocks < 3:
            raise ValueError("backbone needs at least 3 blocks")
        if seed is not None:
            torch.manual_seed(seed)
        self.in_channels = in_channels
        self.num_blocks = num_blocks
        self.width = width
        self.pretrained_tag = pretrained_tag
        self.freeze_depth = 0

        down_at = {num_blocks // 3, (2 * num_blocks) // 3}
        blocks = []
        c_prev = in_channels
        c_cur = width
        for i in range(num_blocks):
            stride = 2 if i in down_at else 1
            if stride == 2:
                c_cur = 2 * c_cur
            blocks.append(_BackboneBlock(c_prev, c_cur, stride))
            c_prev = c_cur
        self.blocks = nn.ModuleList(blocks)
        self.embed_dim = c_prev

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        for block in self.blocks:
            x = block(x)
        return torch.flatten(F.adaptive_avg_pool2d(x, 1), 1)

    def arch_config(self) -> dict:
        return {
            "in_channels": self.in_channels,
            "num_blocks": self.num_blocks,
            "width": self.width,
        }

    def set_freeze_depth(self, depth: int) -> None:
        if not 0 <= depth <= self.num_blocks:
            raise ValueError(f"freeze_depth must lie in [0, {self.num_blocks}]")
        self.freeze_depth = depth
        for i, block in enumerate(self.blocks):
            for p in block.parameters():
                p.requires_grad_(i >= depth)


def make_backbone(arch: dict, pretrained_tag: str = "random", seed: int | None = None) -> ConvBackbone:
    return ConvBackbone(pretrained_tag=pretrained_tag, seed=seed, **arch)


def backbone_fingerprint(backbone: ConvBackbone) -> str:
    """sha256 over parameter names and bytes; equal iff parameters are bit-equal."""
    h = hashlib.sha256()
    for name, param in sorted(backbone.state_dict().items()):
        h.update(name.encode())
        h.update(param.detach().cpu().numpy().tobytes())
    return h.hexdigest()


def embed(backbone: ConvBackbone, images: ImageBatch) -> EmbeddingMatrix:
    """Deterministic inference-mode embeddings, one row per image."""
    if images.value_range != MODEL_RANGE:
        raise ValueError("embed expects a model-range [-1, 1] batch; convert first")
    if images.channels != backbone.in_channels:
        raise ValueError(
            f"batch has {images.channels} channels but backbone expects {backbone.in_channels}"
        )
    backbone.eval()
    rows = []
    with torch.no_grad():
        for start in range(0, len(images), _EMBED_CHUNK):
            chunk = images.data[start : start + _EMBED_CHUNK]
            rows.append(backbone(chunk).cpu().numpy())
    return EmbeddingMatrix(np.concatenate(rows, axis=0), source_tag=backbone.pretrained_tag)


class HeadClassifier(nn.Module):
    """Backbone plus a linear softmax head over num_classes outputs."""

    def __init__(self, backbone: ConvBackbone, num_classes: int, head_seed: int | None = None):
        super().__init__()
        if head_seed is not None:
            torch.manual_seed(head_seed)
        self.backbone = backbone
        self.head = nn.Linear(backbone.embed_dim, num_classes)
        self.num_classes = num_classes

    def logits(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.backbone(x))


def classifier_loss(clf: HeadClassifier, x: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    return F.cross_entropy(clf.logits(x), labels)


def classifier_probs(clf, images: ImageBatch) -> np.ndarray:
    """Softmax probabilities, one row per image. Requires an attached head."""
    head = getattr(clf, "head", None)
    if head is None or not isinstance(clf, nn.Module):
        raise ValueError("classifier has no head attached")
    if images.value_range != MODEL_RANGE:
        raise ValueError("classifier_probs expects a model-range [-1, 1] batch")
    clf.eval()
    rows = []
    with torch.no_grad():
        for start in range(0, len(images), _EMBED_CHUNK):
            chunk = images.data[start : start + _EMBED_CHUNK]
            rows.append(torch.softmax(clf.logits(chunk), dim=1).cpu().numpy())
    return np.concatenate(rows, axis=0)


@dataclass(frozen=True)
class FinetuneConfig:
    """Binary fine-tuning settings; defaults follow the reference recipe
    (lr 4e-4, weight decay 5e-5, batch 16, plain SGD, first half of the
    blocks frozen)."""

    learning_rate: float = 4e-4
    weight_decay: float = 5e-5
    batch_size: int = 16
    optimizer: str = "sgd"
    max_epochs: int = 30
    freeze_depth: int | None = None
    convergence_delta: float = 1e-4
    convergence_patience: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 for balanced batches")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


@dataclass
class TrainingReport:
    """Per-epoch loss/accuracy plus run metadata."""

    epochs: list[dict] = field(default_factory=list)
    seed: int = 0
    converged: bool = False
    wall_time_s: float = 0.0
    final_loss: float = float("nan")
    final_accuracy: float = float("nan")

    def to_json_dict(self) -> dict:
        return {
            "epochs": self.epochs,
            "seed": self.seed,
            "converged": self.converged,
            "wall_time_s": self.wall_time_s,
            "final_loss": self.final_loss,
            "final_accuracy": self.final_accuracy,
        }


def _make_optimizer(name: str, params, lr: float, weight_decay: float):
    if name == "sgd":
        return torch.optim.SGD(params, lr=lr, weight_decay=weight_decay)
    return torch.optim.Adam(params, lr=lr, weight_decay=weight_decay)


def _resample_to(data: torch.Tensor, n: int, generator: torch.Generator) -> torch.Tensor:
    if data.shape[0] == n:
        return data
    idx = torch.randint(0, data.shape[0], (n,), generator=generator)
    return data[idx]


def finetune(
    backbone: ConvBackbone,
    normal: ImageBatch,
    fake: ImageBatch,
    config: FinetuneConfig = FinetuneConfig(),
) -> tuple[ConvBackbone, TrainingReport]:
    """Fine-tune a copy of the backbone to separate normal (label 0) from fake (label 1).

    Classes are balanced 1:1 by resampling the smaller pool, and every batch
    interleaves the two classes. Blocks below the freeze depth are untouched.
    Training stops once the epoch loss improves by less than
    convergence_delta for convergence_patience consecutive epochs, or at
    max_epochs. The head is discarded; the returned backbone is the feature
    extractor only.
    """
    if len(normal) < 1 or len(fake) < 1:
        raise ValueError("both the normal and the fake set must be nonempty")
    for batch in (normal, fake):
        if batch.value_range != MODEL_RANGE:
            raise ValueError("finetune expects model-range [-1, 1] batches")

    start_time = time.monotonic()
    tuned = copy.deepcopy(backbone)
    depth = config.freeze_depth if config.freeze_depth is not None else tuned.num_blocks // 2
    tuned.set_freeze_depth(depth)

    clf = HeadClassifier(tuned, num_classes=2, head_seed=config.seed)
    gen = torch.Generator().manual_seed(config.seed)

    n_side = max(len(normal), len(fake))
    normal_x = _resample_to(normal.data, n_side, gen)
    fake_x = _resample_to(fake.data, n_side, gen)

    opt = _make_optimizer(
        config.optimizer,
        [p for p in clf.parameters() if p.requires_grad],
        config.learning_rate,
        config.weight_decay,
    )

    per_side = max(config.batch_size // 2, 1)
    report = TrainingReport(seed=config.seed)
    best_loss = float("inf")
    stall = 0
    clf.train()
    for epoch in range(config.max_epochs):
        perm_n = torch.randperm(n_side, generator=gen)
        perm_f = torch.randperm(n_side, generator=gen)
        total_loss, total_correct, total_seen = 0.0, 0, 0
        for start in range(0, n_side, per_side):
            nx = normal_x[perm_n[start : start + per_side]]
            fx = fake_x[perm_f[start : start + per_side]]
            x = torch.cat([nx, fx], dim=0)
            y = torch.cat([torch.zeros(nx.shape[0]), torch.ones(fx.shape[0])]).long()
            logits = clf.logits(x)
            loss = F.cross_entropy(logits, y)
            if not torch.isfinite(loss):
                raise DivergenceError(f"fine-tuning loss became non-finite at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total_loss += loss.item() * y.shape[0]
            total_correct += (logits.argmax(dim=1) == y).sum().item()
            total_seen += y.shape[0]
        epoch_loss = total_loss / total_seen
        epoch_acc = total_correct / total_seen
        report.epochs.append({"epoch": epoch, "loss": epoch_loss, "accuracy": epoch_acc})
        if epoch_loss < best_loss - config.convergence_delta:
            best_loss = epoch_loss
            stall = 0
        else:
            stall += 1
            if stall >= config.convergence_patience:
                report.converged = True
                break

    tuned.eval()
    report.wall_time_s = time.monotonic() - start_time
    if report.epochs:
        report.final_loss = report.epochs[-1]["loss"]
        report.final_accuracy = report.epochs[-1]["accuracy"]
    return tuned, report


def save_backbone(backbone: ConvBackbone, path: str | Path) -> None:
    """Self-describing snapshot: architecture, parameters, freeze depth, tag."""
    path = Path(path)
    payload = {
        "format": "nearnd-backbone",
        "version": 1,
        "arch": backbone.arch_config(),
        "state": backbone.state_dict(),
        "freeze_depth": backbone.freeze_depth,
        "pretrained_tag": backbone.pretrained_tag,
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)


def load_backbone(path: str | Path) -> ConvBackbone:
    payload = torch.load(path, map_location="cpu", weights_only=True)
    if payload.get("format") != "nearnd-backbone":
        raise ValueError(f"'{path}' is not a backbone snapshot")
    backbone = ConvBackbone(pretrained_tag=payload["pretrained_tag"], **payload["arch"])
    backbone.load_state_dict(payload["state"])
    backbone.set_freeze_depth(payload["freeze_depth"])
    backbone.eval()
    return backbone
