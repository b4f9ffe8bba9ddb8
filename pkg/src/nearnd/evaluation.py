"""AUROC, rank correlation, and whole-detector evaluation over splits."""

from __future__ import annotations

from dataclasses import dataclass, field
from datetime import datetime, timezone

import numpy as np
from scipy.stats import rankdata

from .data import NDSplit, as_model_range
from .encoder import ConvBackbone, backbone_fingerprint
from .memory import NoveltyScorer, build_memory, score_batch


def auroc(scores_normal, scores_anomalous) -> float:
    """P(random anomalous score > random normal score), ties counted half.

    Mann-Whitney statistic computed from ranks in O(n log n).
    """
    normal = np.asarray(scores_normal, dtype=np.float64).reshape(-1)
    anom = np.asarray(scores_anomalous, dtype=np.float64).reshape(-1)
    if normal.size == 0 or anom.size == 0:
        raise ValueError("both score vectors must be nonempty")
    ranks = rankdata(np.concatenate([normal, anom]))
    r_anom = ranks[normal.size :].sum()
    m = anom.size
    return float((r_anom - m * (m + 1) / 2.0) / (normal.size * m))


def rank_correlation(a, b) -> float:
    """Spearman rank correlation with average ranks for ties."""
    x = np.asarray(a, dtype=np.float64).reshape(-1)
    y = np.asarray(b, dtype=np.float64).reshape(-1)
    if x.size != y.size:
        raise ValueError(f"length mismatch: {x.size} vs {y.size}")
    if x.size < 3:
        raise ValueError("rank correlation needs at least 3 points")
    rx, ry = rankdata(x), rankdata(y)
    sx, sy = rx.std(), ry.std()
    if sx == 0 or sy == 0:
        raise ValueError("rank correlation undefined for a constant vector")
    return float(((rx - rx.mean()) * (ry - ry.mean())).mean() / (sx * sy))


@dataclass
class DetectorReport:
    """Evaluation result for one split: AUROC, score histograms, metadata."""

    auroc: float
    n_normal: int
    n_anomalous: int
    k: int
    seeds: dict = field(default_factory=dict)
    backbone_snapshot: str = ""
    memory_hash: str = ""
    timestamp: str = ""
    histogram: dict = field(default_factory=dict)
    provenance: dict = field(default_factory=dict)
    scores_normal: np.ndarray | None = None
    scores_anomalous: np.ndarray | None = None

    def to_json_dict(self) -> dict:
        return {
            "auroc": self.auroc,
            "n_normal": self.n_normal,
            "n_anomalous": self.n_anomalous,
            "k": self.k,
            "seeds": self.seeds,
            "backbone_snapshot": self.backbone_snapshot,
            "memory_hash": self.memory_hash,
            "timestamp": self.timestamp,
            "histogram": self.histogram,
            "provenance": self.provenance,
        }


def _score_histogram(scores_normal: np.ndarray, scores_anomalous: np.ndarray, bins: int = 32) -> dict:
    combined = np.concatenate([scores_normal, scores_anomalous])
    lo, hi = float(combined.min()), float(combined.max())
    if lo == hi:
        hi = lo + 1.0
    edges = np.linspace(lo, hi, bins + 1)
    n_counts, _ = np.histogram(scores_normal, bins=edges)
    a_counts, _ = np.histogram(scores_anomalous, bins=edges)
    return {
        "bin_edges": edges.tolist(),
        "normal_counts": n_counts.tolist(),
        "anomalous_counts": a_counts.tolist(),
    }


def evaluate_detector(
    split: NDSplit,
    backbone: ConvBackbone,
    scorer: NoveltyScorer | None = None,
    k: int = 2,
    seeds: dict | None = None,
) -> DetectorReport:
    """Score both test sides of a split and report AUROC plus histograms.

    If no scorer is supplied, the memory bank is built from the split's
    normal_train side.
    """
    if scorer is None:
        if split.normal_train is None:
            raise ValueError("split has no normal_train side; supply a scorer")
        memory = build_memory(backbone, as_model_range(split.normal_train))
        scorer = NoveltyScorer(memory=memory, k=k)
    s_norm = score_batch(split.normal_test, backbone, scorer)
    s_anom = score_batch(split.anomalous_test, backbone, scorer)
    return DetectorReport(
        auroc=auroc(s_norm, s_anom),
        n_normal=len(split.normal_test),
        n_anomalous=len(split.anomalous_test),
        k=scorer.k,
        seeds=seeds or {},
        backbone_snapshot=backbone_fingerprint(backbone),
        memory_hash=scorer.memory.content_hash(),
        timestamp=datetime.now(timezone.utc).isoformat(),
        histogram=_score_histogram(s_norm, s_anom),
        provenance={
            key: value
            for key, value in split.provenance.items()
            if key != "files"
        },
        scores_normal=s_norm,
        scores_anomalous=s_anom,
    )
