"""Frechet distance between feature-space Gaussians.

The matrix square root of Sigma_a Sigma_b is taken through the symmetrized
product A Sigma_b A with A = Sigma_a^(1/2), which is symmetric PSD, so a
plain eigendecomposition suffices and no complex arithmetic appears.
Eigenvalues in [-1e-3, 0) are treated as rounding noise and clamped to zero;
anything below -1e-3 means the statistics are too degenerate to trust.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

_MAGIC = b"NDFS"
_EIG_CLAMP = 1e-3
_COV_PSD_TOL = 1e-6
_SYM_TOL = 1e-8


class DegenerateStatsError(RuntimeError):
    """Covariance spectra are too negative for a trustworthy Frechet distance."""


@dataclass(frozen=True)
class FeatureStats:
    """Sample mean and unbiased covariance of a feature matrix."""

    mean: np.ndarray
    cov: np.ndarray
    count: int

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64)
        cov = np.asarray(self.cov, dtype=np.float64)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)
        d = mean.shape[0]
        if mean.ndim != 1 or cov.shape != (d, d):
            raise ValueError(f"mean (D,) and cov (D, D) shapes disagree: {mean.shape} vs {cov.shape}")
        if self.count < 2:
            raise ValueError("feature stats need at least 2 samples")
        if not (np.isfinite(mean).all() and np.isfinite(cov).all()):
            raise ValueError("feature stats contain non-finite values")
        if np.abs(cov - cov.T).max() > _SYM_TOL:
            raise ValueError("covariance is not symmetric")
        if np.linalg.eigvalsh(cov).min() < -_COV_PSD_TOL:
            raise ValueError("covariance is not positive semi-definite")

    @property
    def dim(self) -> int:
        return self.mean.shape[0]


def compute_stats(embeddings: np.ndarray) -> FeatureStats:
    """Mean and unbiased (N-1 divisor) covariance of an N x D matrix."""
    x = np.asarray(embeddings, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError(f"embeddings must be a 2-D matrix, got shape {x.shape}")
    n = x.shape[0]
    if n < 2:
        raise ValueError("need at least 2 embeddings to estimate a covariance")
    mean = x.mean(axis=0)
    cov = np.cov(x, rowvar=False, ddof=1).reshape(x.shape[1], x.shape[1])
    cov = (cov + cov.T) / 2.0
    return FeatureStats(mean=mean, cov=cov, count=n)


def _psd_sqrt(mat: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh(mat)
    if w.min() < -_EIG_CLAMP:
        raise DegenerateStatsError(f"covariance eigenvalue {w.min():.3e} below -{_EIG_CLAMP}")
    w = np.clip(w, 0.0, None)
    return (v * np.sqrt(w)) @ v.T


def frechet_distance(a: FeatureStats, b: FeatureStats) -> float:
    """||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a S_b)^(1/2)), floored at 0."""
    if a.dim != b.dim:
        raise ValueError(f"stats dimensions differ: {a.dim} vs {b.dim}")
    if np.array_equal(a.mean, b.mean) and np.array_equal(a.cov, b.cov):
        return 0.0
    root_a = _psd_sqrt(a.cov)
    prod = root_a @ b.cov @ root_a
    prod = (prod + prod.T) / 2.0
    w = np.linalg.eigvalsh(prod)
    if w.min() < -_EIG_CLAMP:
        raise DegenerateStatsError(f"product eigenvalue {w.min():.3e} below -{_EIG_CLAMP}")
    tr_sqrt = np.sqrt(np.clip(w, 0.0, None)).sum()
    diff = a.mean - b.mean
    fid = float(diff @ diff + np.trace(a.cov) + np.trace(b.cov) - 2.0 * tr_sqrt)
    return max(fid, 0.0)


def stats_to_bytes(stats: FeatureStats) -> bytes:
    """Binary blob: magic, D (u32), count (u64), mean then row-major cov as f64 LE."""
    head = _MAGIC + struct.pack("<IQ", stats.dim, stats.count)
    body = stats.mean.astype("<f8").tobytes() + np.ascontiguousarray(stats.cov, dtype="<f8").tobytes()
    return head + body


def stats_from_bytes(blob: bytes) -> FeatureStats:
    if blob[:4] != _MAGIC:
        raise ValueError("not a feature-stats blob (bad magic)")
    d, count = struct.unpack("<IQ", blob[4:16])
    expected = 16 + 8 * d + 8 * d * d
    if len(blob) != expected:
        raise ValueError(f"feature-stats blob length {len(blob)} != expected {expected}")
    mean = np.frombuffer(blob, dtype="<f8", count=d, offset=16).copy()
    cov = np.frombuffer(blob, dtype="<f8", count=d * d, offset=16 + 8 * d).reshape(d, d).copy()
    return FeatureStats(mean=mean, cov=cov, count=count)


def save_stats(stats: FeatureStats, path: str | Path) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(stats_to_bytes(stats))
    tmp.replace(path)


def load_stats(path: str | Path) -> FeatureStats:
    return stats_from_bytes(Path(path).read_bytes())


def fid_metadata_note() -> dict:
    """Reports embed this so readers know FID values are extractor-relative."""
    return {
        "fid_extractor": "pipeline-frozen-encoder",
        "note": "FID values are relative to the configured desk-scale feature extractor, "
        "not the conventional large classifier network; band thresholds are calibrated per extractor.",
    }
