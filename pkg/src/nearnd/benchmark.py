"""Evaluation-protocol constructors: closeness score, bottom-i, FSDE splits.

The closeness score of an abnormal class is the sum, over normal training
samples, of a rest-classifier's probability for that class; the argmax picks
the nearest abnormal class. bottom-i averages the i worst per-class AUROCs.
FSDE test sets pair the normal test split with an equal-size random subset of
a synthetic fake pool.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .data import ImageBatch, LabeledDataset, NDSplit, as_model_range
from .encoder import ConvBackbone, HeadClassifier, classifier_probs, make_backbone
from .sde import DivergenceError


@dataclass(frozen=True)
class ClosenessTable:
    """Per-abnormal-class closeness scores for one normal class.

    normal_class is None when the abnormal classes come from a different
    dataset than the normal one (the cross-dataset near-ND case)."""

    scores: np.ndarray
    abnormal_class_ids: list[int]
    class_names: list[str]
    normal_class: int | None
    classifier_tag: str = ""

    def __post_init__(self):
        scores = np.asarray(self.scores, dtype=np.float64)
        object.__setattr__(self, "scores", scores)
        if scores.ndim != 1 or scores.shape[0] != len(self.abnormal_class_ids):
            raise ValueError("scores and abnormal_class_ids lengths disagree")
        if scores.shape[0] < 1:
            raise ValueError("closeness table must cover at least one abnormal class")
        if (scores < 0).any():
            raise ValueError("closeness scores must be non-negative")

    def to_json_dict(self) -> dict:
        return {
            "normal_class": self.normal_class,
            "abnormal_class_ids": list(self.abnormal_class_ids),
            "class_names": list(self.class_names),
            "scores": [float(s) for s in self.scores],
            "nearest_class": nearest_class(self),
            "classifier_tag": self.classifier_tag,
        }


@dataclass(frozen=True)
class RestClassifierConfig:
    """Training settings for the K-1-way rest classifier."""

    epochs: int = 8
    learning_rate: float = 1e-3
    batch_size: int = 32
    optimizer: str = "adam"
    backbone_arch: dict = field(default_factory=lambda: {"num_blocks": 6, "width": 16})
    seed: int = 0


class RestClassifier:
    """Multiclass classifier over the abnormal classes of one dataset."""

    def __init__(self, clf: HeadClassifier, abnormal_class_ids: list[int], class_names: list[str]):
        self.clf = clf
        self.abnormal_class_ids = abnormal_class_ids
        self.class_names = class_names
        self.head = clf.head  # classifier_probs compatibility

    def probs(self, images: ImageBatch) -> np.ndarray:
        return classifier_probs(self.clf, as_model_range(images))


def train_rest_classifier(
    dataset: LabeledDataset,
    normal_class: int,
    config: RestClassifierConfig = RestClassifierConfig(),
    backbone: ConvBackbone | None = None,
) -> RestClassifier:
    """Train a (K-1)-way classifier on every class except the normal one."""
    k = dataset.num_classes
    if k < 3:
        raise ValueError(f"rest classifier needs K >= 3 classes, got {k}")
    if not 0 <= normal_class < k:
        raise ValueError(f"normal_class {normal_class} invalid for {k}-class dataset")
    return _train_class_classifier(dataset, [c for c in range(k) if c != normal_class], config, backbone)


def train_aux_classifier(
    aux_train: LabeledDataset,
    config: RestClassifierConfig = RestClassifierConfig(),
    backbone: ConvBackbone | None = None,
) -> RestClassifier:
    """Classifier over every class of an auxiliary dataset (all abnormal;
    the normal class lives in a different dataset)."""
    if aux_train.num_classes < 2:
        raise ValueError("aux classifier needs at least 2 classes")
    return _train_class_classifier(aux_train, list(range(aux_train.num_classes)), config, backbone)


def _train_class_classifier(
    dataset: LabeledDataset,
    class_ids: list[int],
    config: RestClassifierConfig,
    backbone: ConvBackbone | None,
) -> RestClassifier:
    remap = {orig: j for j, orig in enumerate(class_ids)}
    mask = np.isin(dataset.labels, class_ids)
    if not mask.any():
        raise ValueError("no training samples in the requested classes")
    images = as_model_range(dataset.images.subset(np.flatnonzero(mask)))
    labels = torch.as_tensor([remap[int(l)] for l in dataset.labels[mask]], dtype=torch.long)

    if backbone is None:
        backbone = make_backbone(
            {"in_channels": images.channels, **config.backbone_arch},
            pretrained_tag="rest-classifier",
            seed=config.seed,
        )
    clf = HeadClassifier(backbone, num_classes=len(class_ids), head_seed=config.seed)
    if config.optimizer == "adam":
        opt = torch.optim.Adam(clf.parameters(), lr=config.learning_rate)
    else:
        opt = torch.optim.SGD(clf.parameters(), lr=config.learning_rate)

    gen = torch.Generator().manual_seed(config.seed)
    n = len(images)
    clf.train()
    for epoch in range(config.epochs):
        perm = torch.randperm(n, generator=gen)
        for start in range(0, n, config.batch_size):
            idx = perm[start : start + config.batch_size]
            loss = F.cross_entropy(clf.logits(images.data[idx]), labels[idx])
            if not torch.isfinite(loss):
                raise DivergenceError(f"rest-classifier loss became non-finite at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
    clf.eval()
    return RestClassifier(clf, class_ids, dataset.class_names)


def closeness_scores(classifier: RestClassifier, normal_train: ImageBatch) -> ClosenessTable:
    """Sum the classifier's per-class probabilities over the normal samples.

    The scores add up to the number of normal samples (each row of
    probabilities sums to one)."""
    if len(normal_train) < 1:
        raise ValueError("normal_train must be nonempty")
    probs = classifier.probs(normal_train).astype(np.float64)
    excluded = [c for c in range(len(classifier.class_names)) if c not in classifier.abnormal_class_ids]
    return ClosenessTable(
        scores=probs.sum(axis=0),
        abnormal_class_ids=classifier.abnormal_class_ids,
        class_names=classifier.class_names,
        normal_class=excluded[0] if len(excluded) == 1 else None,
        classifier_tag=classifier.clf.backbone.pretrained_tag,
    )


def nearest_class(table: ClosenessTable) -> int:
    """Abnormal class with the highest closeness score; ties -> lower class id."""
    # abnormal_class_ids ascend, so argmax's first-match rule is the tie rule
    return int(table.abnormal_class_ids[int(np.argmax(table.scores))])


def bottom_i(per_class_auroc, i: int) -> float:
    """Mean of the i smallest per-class AUROCs; bottom-1 is the minimum."""
    values = np.asarray(per_class_auroc, dtype=np.float64)
    if values.ndim != 1 or values.size < 1:
        raise ValueError("per_class_auroc must be a nonempty vector")
    if not 1 <= i <= values.size:
        raise ValueError(f"i must lie in [1, {values.size}], got {i}")
    return float(np.sort(values)[:i].mean())


def build_fsde_testset(normal_test: ImageBatch, fake_pool: ImageBatch, rng_seed: int) -> NDSplit:
    """Scoring-only split: normal test images vs an equal-size random subset
    of the fake pool, sampled without replacement."""
    n = len(normal_test)
    if len(fake_pool) < n:
        raise ValueError(
            f"fake pool has {len(fake_pool)} samples but {n} are needed to match the normal test set"
        )
    rng = np.random.default_rng(rng_seed)
    idx = np.sort(rng.choice(len(fake_pool), size=n, replace=False))
    return NDSplit(
        normal_train=None,
        normal_test=normal_test,
        anomalous_test=fake_pool.subset(idx),
        provenance={
            "protocol": "fsde",
            "anomaly_source": "synthetic-pool",
            "fake_indices": idx.tolist(),
            "rng_seed": int(rng_seed),
        },
    )
