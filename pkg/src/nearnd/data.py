"""Dataset ingestion, tensor conventions, and labeled evaluation splits.

Images are stored as float32 tensors of shape (N, C, H, W). Two value ranges
exist: [0, 1] for storage/decoding and [-1, 1] for anything that touches a
network. Conversions are explicit; network-facing code rejects batches in the
wrong range so the preprocessing used to build a memory bank is provably the
same one used at test time.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image

STORAGE_RANGE = (0.0, 1.0)
MODEL_RANGE = (-1.0, 1.0)

_IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp")
_RANGE_TOL = 1e-6


class IngestionError(RuntimeError):
    """Raised when an image tree cannot be decoded into a dataset."""


class SplitError(ValueError):
    """Raised when an evaluation split cannot be constructed as requested."""


@dataclass(frozen=True)
class ImageBatch:
    """A batch of images with a declared value range.

    data: float32 tensor (N, C, H, W), N >= 1, C in {1, 3}.
    value_range: either STORAGE_RANGE [0, 1] or MODEL_RANGE [-1, 1].
    """

    data: torch.Tensor
    value_range: tuple[float, float] = STORAGE_RANGE

    def __post_init__(self):
        if self.data.ndim != 4:
            raise ValueError(f"image batch must be (N, C, H, W), got shape {tuple(self.data.shape)}")
        n, c = self.data.shape[0], self.data.shape[1]
        if n < 1:
            raise ValueError("image batch must contain at least one image")
        if c not in (1, 3):
            raise ValueError(f"channel count must be 1 or 3, got {c}")
        if self.value_range not in (STORAGE_RANGE, MODEL_RANGE):
            raise ValueError(f"value_range must be {STORAGE_RANGE} or {MODEL_RANGE}")
        if not torch.isfinite(self.data).all():
            raise ValueError("image batch contains non-finite values")
        lo, hi = self.value_range
        dmin, dmax = self.data.min().item(), self.data.max().item()
        if dmin < lo - _RANGE_TOL or dmax > hi + _RANGE_TOL:
            raise ValueError(
                f"values [{dmin:.4g}, {dmax:.4g}] fall outside declared range [{lo}, {hi}]"
            )
        if self.data.dtype != torch.float32:
            object.__setattr__(self, "data", self.data.to(torch.float32))

    def __len__(self) -> int:
        return self.data.shape[0]

    @property
    def image_size(self) -> tuple[int, int]:
        return (int(self.data.shape[2]), int(self.data.shape[3]))

    @property
    def channels(self) -> int:
        return int(self.data.shape[1])

    def subset(self, indices) -> "ImageBatch":
        idx = torch.as_tensor(np.asarray(indices, dtype=np.int64))
        return ImageBatch(self.data[idx], self.value_range)


def to_model_range(batch: ImageBatch) -> ImageBatch:
    """[0, 1] storage batch -> [-1, 1] model batch."""
    if batch.value_range != STORAGE_RANGE:
        raise ValueError("expected a storage-range [0, 1] batch")
    return ImageBatch(batch.data * 2.0 - 1.0, MODEL_RANGE)


def to_storage_range(batch: ImageBatch) -> ImageBatch:
    """[-1, 1] model batch -> [0, 1] storage batch. Exact inverse of to_model_range."""
    if batch.value_range != MODEL_RANGE:
        raise ValueError("expected a model-range [-1, 1] batch")
    return ImageBatch((batch.data + 1.0) * 0.5, STORAGE_RANGE)


def as_model_range(batch: ImageBatch) -> ImageBatch:
    """Convert to model range if needed; identity for batches already there."""
    return batch if batch.value_range == MODEL_RANGE else to_model_range(batch)


@dataclass(frozen=True)
class LabeledDataset:
    """Images plus integer class labels in [0, K) and a train/test tag."""

    images: ImageBatch
    labels: np.ndarray
    class_names: list[str]
    split_tag: str
    source_paths: list[str] | None = None

    def __post_init__(self):
        labels = np.asarray(self.labels, dtype=np.int64)
        object.__setattr__(self, "labels", labels)
        if labels.shape != (len(self.images),):
            raise ValueError(
                f"label count {labels.shape} does not match image count {len(self.images)}"
            )
        k = len(self.class_names)
        if labels.size and (labels.min() < 0 or labels.max() >= k):
            raise ValueError(f"labels must lie in [0, {k})")
        if self.split_tag not in ("train", "test"):
            raise ValueError(f"split_tag must be 'train' or 'test', got {self.split_tag!r}")
        if self.source_paths is not None and len(self.source_paths) != len(self.images):
            raise ValueError("source_paths length must match image count")

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def class_indices(self, class_id: int) -> np.ndarray:
        return np.flatnonzero(self.labels == class_id)

    def class_batch(self, class_id: int) -> ImageBatch:
        idx = self.class_indices(class_id)
        if idx.size == 0:
            raise SplitError(f"class '{self.class_names[class_id]}' has no samples")
        return self.images.subset(idx)

    def paths_for(self, indices: np.ndarray) -> list[str] | None:
        if self.source_paths is None:
            return None
        return [self.source_paths[i] for i in indices]


@dataclass(frozen=True)
class NDSplit:
    """A labeled novelty-detection split.

    normal_train is None for scoring-only splits (e.g. synthetic-anomaly test
    sets); anomalous_test is always nonempty. Provenance records where each
    side came from.
    """

    normal_train: ImageBatch | None
    normal_test: ImageBatch
    anomalous_test: ImageBatch
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.anomalous_test) < 1:
            raise ValueError("anomalous_test must be nonempty")


def _decode_image(path: Path, image_size: tuple[int, int], mode: str) -> np.ndarray:
    try:
        with Image.open(path) as img:
            img = img.convert(mode)
            # Bilinear, no corner alignment: pixel-center convention of PIL.
            img = img.resize((image_size[1], image_size[0]), Image.BILINEAR)
            arr = np.asarray(img, dtype=np.float32) / 255.0
    except (OSError, ValueError) as exc:
        raise IngestionError(f"cannot decode image file '{path}': {exc}") from exc
    if arr.ndim == 2:
        arr = arr[None, :, :]
    else:
        arr = arr.transpose(2, 0, 1)
    return arr


def load_dataset(
    root_path: str | Path,
    image_size: tuple[int, int],
    split_tag: str = "train",
) -> LabeledDataset:
    """Load a directory-per-class image tree.

    Class ids follow sorted subdirectory names; files are read in sorted order
    so two loads of the same tree are byte-identical. Images are resized to
    image_size with bilinear interpolation and scaled to [0, 1]. Grayscale
    trees (first image has a single channel) load as C=1, everything else as
    C=3.
    """
    root = Path(root_path)
    if not root.is_dir():
        raise IngestionError(f"dataset root '{root}' is not a directory")
    class_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not class_dirs:
        raise IngestionError(f"dataset root '{root}' contains no class directories")

    files_per_class: list[list[Path]] = []
    for cdir in class_dirs:
        files = sorted(p for p in cdir.iterdir() if p.suffix.lower() in _IMAGE_SUFFIXES)
        if not files:
            raise IngestionError(f"class '{cdir.name}' has no images")
        files_per_class.append(files)

    first = files_per_class[0][0]
    try:
        with Image.open(first) as probe:
            mode = "L" if probe.mode in ("1", "L", "I", "I;16", "F") else "RGB"
    except OSError as exc:
        raise IngestionError(f"cannot decode image file '{first}': {exc}") from exc

    arrays, labels, paths = [], [], []
    for class_id, files in enumerate(files_per_class):
        for f in files:
            arrays.append(_decode_image(f, image_size, mode))
            labels.append(class_id)
            paths.append(str(f))

    data = torch.from_numpy(np.clip(np.stack(arrays), 0.0, 1.0))
    return LabeledDataset(
        images=ImageBatch(data, STORAGE_RANGE),
        labels=np.asarray(labels, dtype=np.int64),
        class_names=[d.name for d in class_dirs],
        split_tag=split_tag,
        source_paths=paths,
    )


def load_image_dir(root_path: str | Path, image_size: tuple[int, int]) -> ImageBatch:
    """Load a flat directory of images (e.g. a generated-sample dump) in sorted order."""
    root = Path(root_path)
    if not root.is_dir():
        raise IngestionError(f"image directory '{root}' is not a directory")
    files = sorted(p for p in root.iterdir() if p.suffix.lower() in _IMAGE_SUFFIXES)
    if not files:
        raise IngestionError(f"image directory '{root}' has no images")
    try:
        with Image.open(files[0]) as probe:
            mode = "L" if probe.mode in ("1", "L", "I", "I;16", "F") else "RGB"
    except OSError as exc:
        raise IngestionError(f"cannot decode image file '{files[0]}': {exc}") from exc
    arrays = [_decode_image(f, image_size, mode) for f in files]
    data = torch.from_numpy(np.clip(np.stack(arrays), 0.0, 1.0))
    return ImageBatch(data, STORAGE_RANGE)


def make_one_vs_all_split(
    train_ds: LabeledDataset, test_ds: LabeledDataset, normal_class: int
) -> NDSplit:
    """One class normal, all other test classes anomalous."""
    for ds in (train_ds, test_ds):
        if not 0 <= normal_class < ds.num_classes:
            raise SplitError(f"normal_class {normal_class} invalid for {ds.num_classes}-class dataset")
    if train_ds.split_tag != "train" or test_ds.split_tag != "test":
        raise SplitError("one-vs-all split needs a train-tagged and a test-tagged dataset")

    train_idx = train_ds.class_indices(normal_class)
    if train_idx.size == 0:
        raise SplitError(f"class '{train_ds.class_names[normal_class]}' has no train samples")
    normal_idx = test_ds.class_indices(normal_class)
    anom_idx = np.flatnonzero(test_ds.labels != normal_class)
    if anom_idx.size == 0:
        raise SplitError("no anomalous test samples outside the normal class")

    return NDSplit(
        normal_train=train_ds.images.subset(train_idx),
        normal_test=test_ds.images.subset(normal_idx),
        anomalous_test=test_ds.images.subset(anom_idx),
        provenance={
            "protocol": "one-vs-all",
            "normal_class": train_ds.class_names[normal_class],
            "normal_class_id": int(normal_class),
            "anomaly_source": "other-classes",
            "files": {
                "normal_train": train_ds.paths_for(train_idx),
                "normal_test": test_ds.paths_for(normal_idx),
                "anomalous_test": test_ds.paths_for(anom_idx),
            },
        },
    )


def make_near_nd_split(
    normal_train_ds: LabeledDataset,
    normal_test_ds: LabeledDataset,
    aux_test_ds: LabeledDataset,
    normal_class: int,
    near_class: int,
) -> NDSplit:
    """Normal class from one dataset, a single near class from another as anomalies."""
    for ds in (normal_train_ds, normal_test_ds):
        if not 0 <= normal_class < ds.num_classes:
            raise SplitError(f"normal_class {normal_class} invalid for {ds.num_classes}-class dataset")
    if not 0 <= near_class < aux_test_ds.num_classes:
        raise SplitError(f"near_class {near_class} invalid for {aux_test_ds.num_classes}-class dataset")
    if normal_train_ds.split_tag != "train" or normal_test_ds.split_tag != "test":
        raise SplitError("near-ND split needs a train-tagged and a test-tagged normal dataset")
    if aux_test_ds.images.image_size != normal_test_ds.images.image_size:
        raise SplitError(
            f"aux image size {aux_test_ds.images.image_size} does not match "
            f"normal image size {normal_test_ds.images.image_size}"
        )

    train_idx = normal_train_ds.class_indices(normal_class)
    if train_idx.size == 0:
        raise SplitError(f"class '{normal_train_ds.class_names[normal_class]}' has no train samples")
    normal_idx = normal_test_ds.class_indices(normal_class)
    near_idx = aux_test_ds.class_indices(near_class)
    if near_idx.size == 0:
        raise SplitError(f"near class '{aux_test_ds.class_names[near_class]}' has no test samples")

    return NDSplit(
        normal_train=normal_train_ds.images.subset(train_idx),
        normal_test=normal_test_ds.images.subset(normal_idx),
        anomalous_test=aux_test_ds.images.subset(near_idx),
        provenance={
            "protocol": "near-nd",
            "normal_class": normal_train_ds.class_names[normal_class],
            "normal_class_id": int(normal_class),
            "near_class": aux_test_ds.class_names[near_class],
            "near_class_id": int(near_class),
            "anomaly_source": "other-dataset",
            "files": {
                "normal_train": normal_train_ds.paths_for(train_idx),
                "normal_test": normal_test_ds.paths_for(normal_idx),
                "anomalous_test": aux_test_ds.paths_for(near_idx),
            },
        },
    )


def split_manifest(split: NDSplit) -> dict:
    """JSON-ready manifest listing the file paths behind each side, when known."""
    files = split.provenance.get("files", {})
    return {
        "protocol": split.provenance.get("protocol"),
        "normal_class": split.provenance.get("normal_class"),
        "anomaly_source": split.provenance.get("anomaly_source"),
        "n_normal_train": None if split.normal_train is None else len(split.normal_train),
        "n_normal_test": len(split.normal_test),
        "n_anomalous_test": len(split.anomalous_test),
        "files": files,
    }
