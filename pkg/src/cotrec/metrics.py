"""Evaluation metrics and the serialized report they travel in."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .util import canonical_json

PROB_FLOOR = 1e-7
REPORT_SCHEMA = 1


def _rankdata(values: np.ndarray) -> np.ndarray:
    """1-based ranks with ties sharing their average rank."""
    order = np.argsort(values, kind="mergesort")
    ranks = np.empty(values.shape[0], dtype=np.float64)
    sorted_vals = values[order]
    i = 0
    while i < values.shape[0]:
        j = i
        while j + 1 < values.shape[0] and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def auc(labels, scores) -> float:
    """Probability a random positive outscores a random negative, ties half.

    Computed from average ranks, equivalent to the normalized pairwise
    count. Requires both classes present.
    """
    labels = np.asarray(labels, dtype=np.int64)
    scores = np.asarray(scores, dtype=np.float64)
    if labels.shape != scores.shape or labels.ndim != 1:
        raise ValueError(f"labels {labels.shape} and scores {scores.shape} must be 1-d and equal")
    n_pos = int((labels == 1).sum())
    n_neg = labels.shape[0] - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("auc needs at least one positive and one negative")
    ranks = _rankdata(scores)
    return float((ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def relaimpr(model_auc: float, base_auc: float) -> float:
    """Relative improvement (percent) over a baseline, measured above chance."""
    if base_auc == 0.5:
        raise ValueError("relaimpr undefined for a chance-level baseline")
    return ((model_auc - 0.5) / (base_auc - 0.5) - 1.0) * 100.0


def logloss(labels, probs) -> float:
    """Mean negative log-likelihood with probabilities clamped away from 0/1."""
    labels = np.asarray(labels, dtype=np.float64)
    probs = np.clip(np.asarray(probs, dtype=np.float64), PROB_FLOOR, 1.0 - PROB_FLOOR)
    if labels.shape != probs.shape or labels.ndim != 1:
        raise ValueError(f"labels {labels.shape} and probs {probs.shape} must be 1-d and equal")
    if labels.shape[0] == 0:
        raise ValueError("logloss needs at least one example")
    return float(-(labels * np.log(probs) + (1.0 - labels) * np.log(1.0 - probs)).mean())


def hit_at_k(rank: int, k: int) -> float:
    return 1.0 if rank <= k else 0.0


def ndcg_at_k(rank: int, k: int) -> float:
    """Single-relevant-item NDCG: 1/log2(rank+1) inside the cutoff, else 0."""
    if rank <= k:
        return 1.0 / float(np.log2(rank + 1))
    return 0.0


def topk_metrics(ranks, ks=(1, 5, 10)) -> dict[str, float]:
    """Mean HIT@K and NDCG@K over a list of 1-based ranks."""
    ranks = list(ranks)
    if not ranks:
        raise ValueError("topk_metrics needs at least one rank")
    out: dict[str, float] = {}
    for k in ks:
        out[f"hit@{k}"] = float(np.mean([hit_at_k(r, k) for r in ranks]))
        out[f"ndcg@{k}"] = float(np.mean([ndcg_at_k(r, k) for r in ranks]))
    return out


@dataclass
class MetricsReport:
    """Versioned, timestamp-free evaluation record (stable bytes per run)."""

    task: str
    split: str
    n_examples: int
    metrics: dict[str, float]
    config: dict = field(default_factory=dict)
    schema: int = REPORT_SCHEMA

    def to_json(self) -> str:
        return canonical_json({
            "schema": self.schema,
            "task": self.task,
            "split": self.split,
            "n_examples": self.n_examples,
            "metrics": self.metrics,
            "config": self.config,
        })

    @classmethod
    def from_json(cls, text: str) -> "MetricsReport":
        import json
        raw = json.loads(text)
        if raw.get("schema") != REPORT_SCHEMA:
            raise ValueError(f"unsupported report schema: {raw.get('schema')!r}")
        return cls(task=raw["task"], split=raw["split"], n_examples=raw["n_examples"],
                   metrics=raw["metrics"], config=raw.get("config", {}))
