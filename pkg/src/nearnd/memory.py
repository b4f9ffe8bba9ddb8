"""Memory bank of normal embeddings and the k-NN novelty score.

The score of a query is the sum of squared Euclidean distances to its k
nearest memory rows (ties broken by lower row index, which cannot change the
score value, only the neighbor identity). Scoring is exact brute force over
the full distance matrix; desk-scale memories are small and correctness
comes first.

Memory bank file format (all integers little-endian):
    magic   4 bytes  b"NDMB"
    version u32      1
    D       u32      embedding dimension
    M       u64      row count
    data    M*D*4    row-major float32 embeddings
    meta_len u64     byte length of the JSON metadata trailer
    meta    bytes    UTF-8 JSON metadata
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial.distance import cdist

from .data import ImageBatch, as_model_range
from .encoder import ConvBackbone, backbone_fingerprint, embed

_MAGIC = b"NDMB"
_VERSION = 1


@dataclass(frozen=True)
class MemoryBank:
    """Immutable M x D matrix of normal embeddings plus provenance.

    Held in float64 so scoring arithmetic is exact to ~1e-9; the on-disk
    format quantizes to float32."""

    embeddings: np.ndarray
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        emb = np.ascontiguousarray(self.embeddings, dtype=np.float64)
        emb.setflags(write=False)
        object.__setattr__(self, "embeddings", emb)
        if emb.ndim != 2 or emb.shape[0] < 1:
            raise ValueError(f"memory must be a nonempty 2-D matrix, got shape {emb.shape}")
        if not np.isfinite(emb).all():
            raise ValueError("memory contains non-finite embeddings")

    @property
    def size(self) -> int:
        return self.embeddings.shape[0]

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]

    def content_hash(self) -> str:
        return hashlib.sha256(self.embeddings.tobytes()).hexdigest()


@dataclass(frozen=True)
class NoveltyScorer:
    """A memory bank plus the neighbor count k (k=2 by default)."""

    memory: MemoryBank
    k: int = 2
    normalize: bool = False

    def __post_init__(self):
        if not 1 <= self.k <= self.memory.size:
            raise ValueError(f"k must lie in [1, {self.memory.size}], got {self.k}")


def build_memory(backbone: ConvBackbone, normal_train: ImageBatch, metadata: dict | None = None) -> MemoryBank:
    """Embed the normal training samples in dataset order and freeze them."""
    if len(normal_train) < 1:
        raise ValueError("normal_train must be nonempty")
    batch = as_model_range(normal_train)
    emb = embed(backbone, batch)
    meta = {
        "backbone_fingerprint": backbone_fingerprint(backbone),
        "pretrained_tag": backbone.pretrained_tag,
        "preprocessing": "storage[0,1] -> model[-1,1]",
        "image_size": list(normal_train.image_size),
        "channels": normal_train.channels,
    }
    if metadata:
        meta.update(metadata)
    return MemoryBank(embeddings=emb.data, metadata=meta)


def _l2_normalize(x: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    return x / np.maximum(norms, 1e-12)


def novelty_score(x_emb: np.ndarray, memory: MemoryBank, k: int, normalize: bool = False) -> float:
    """Sum of squared distances from x_emb to its k nearest memory rows."""
    x = np.asarray(x_emb, dtype=np.float64).reshape(-1)
    if x.shape[0] != memory.dim:
        raise ValueError(f"query dimension {x.shape[0]} does not match memory dimension {memory.dim}")
    if not 1 <= k <= memory.size:
        raise ValueError(f"k must lie in [1, {memory.size}], got {k}")
    rows = memory.embeddings
    if normalize:
        rows = _l2_normalize(rows)
        x = _l2_normalize(x[None, :])[0]
    d2 = ((rows - x) ** 2).sum(axis=1)
    order = np.argsort(d2, kind="stable")  # stable: ties go to the lower row index
    return float(d2[order[:k]].sum())


def score_embeddings(emb: np.ndarray, scorer: NoveltyScorer) -> np.ndarray:
    """Vectorized novelty scores for an N x D query matrix."""
    q = np.asarray(emb, dtype=np.float64)
    if q.ndim != 2 or q.shape[1] != scorer.memory.dim:
        raise ValueError(f"queries must be (N, {scorer.memory.dim}), got {q.shape}")
    rows = scorer.memory.embeddings
    if scorer.normalize:
        rows = _l2_normalize(rows)
        q = _l2_normalize(q)
    d2 = cdist(q, rows, metric="sqeuclidean")
    part = np.partition(d2, scorer.k - 1, axis=1)[:, : scorer.k]
    return part.sum(axis=1)


def score_batch(images: ImageBatch, backbone: ConvBackbone, scorer: NoveltyScorer) -> np.ndarray:
    """Novelty score of each image, order preserved."""
    batch = as_model_range(images)
    emb = embed(backbone, batch)
    return score_embeddings(emb.data, scorer)


def decide(score: float, threshold: float) -> int:
    """1 (anomalous) iff score strictly exceeds the threshold, else 0 (normal)."""
    return 1 if score > threshold else 0


def save_memory(bank: MemoryBank, path: str | Path) -> None:
    path = Path(path)
    meta = json.dumps(bank.metadata, sort_keys=True).encode("utf-8")
    blob = (
        _MAGIC
        + struct.pack("<IIQ", _VERSION, bank.dim, bank.size)
        + bank.embeddings.astype("<f4").tobytes()
        + struct.pack("<Q", len(meta))
        + meta
    )
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(blob)
    tmp.replace(path)


def load_memory(path: str | Path) -> MemoryBank:
    blob = Path(path).read_bytes()
    if blob[:4] != _MAGIC:
        raise ValueError(f"'{path}' is not a memory bank file (bad magic)")
    version, dim, size = struct.unpack("<IIQ", blob[4:20])
    if version != _VERSION:
        raise ValueError(f"unsupported memory bank version {version}")
    data_end = 20 + 4 * dim * size
    if len(blob) < data_end + 8:
        raise ValueError("memory bank file truncated")
    emb = np.frombuffer(blob, dtype="<f4", count=dim * size, offset=20).reshape(size, dim).copy()
    (meta_len,) = struct.unpack("<Q", blob[data_end : data_end + 8])
    meta_bytes = blob[data_end + 8 : data_end + 8 + meta_len]
    if len(meta_bytes) != meta_len:
        raise ValueError("memory bank metadata trailer truncated")
    metadata = json.loads(meta_bytes.decode("utf-8"))
    return MemoryBank(embeddings=emb, metadata=metadata)
