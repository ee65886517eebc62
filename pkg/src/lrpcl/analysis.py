"""Similarity of task importance maps across layers, and forgetting metrics."""

from __future__ import annotations

import csv
import json
import re
import warnings
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence

import numpy as np
from scipy.stats import rankdata

from lrpcl.numerics import ShapeError

_BLOCK = re.compile(r"^block(\d+)\.(.+)$")


def topk_indices(values, k: int) -> np.ndarray:
    """Flat indices of the ``k`` largest ``|values|``, ties to the lowest index."""
    flat = np.abs(np.asarray(values, dtype=np.float64)).ravel()
    if k < 1:
        raise ValueError("k must be >= 1")
    if k > flat.size:
        raise ValueError(f"k={k} exceeds tensor size {flat.size}")
    return np.sort(np.argsort(-flat, kind="stable")[:k])


def topk_overlap(a, b, k: int) -> float:
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ShapeError(f"topk_overlap shape mismatch: {a.shape} vs {b.shape}")
    shared = np.intersect1d(topk_indices(a, k), topk_indices(b, k), assume_unique=True)
    return shared.size / k


def spearman(a, b) -> float:
    """Spearman rank correlation with tie-averaged ranks.

    Returns 0.0 and emits a ``RuntimeWarning`` when either input is constant.
    """
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ShapeError(f"spearman shape mismatch: {a.shape} vs {b.shape}")
    if a.size < 2:
        raise ValueError("spearman needs at least two elements")
    ra = rankdata(a) - (a.size + 1) / 2.0
    rb = rankdata(b) - (b.size + 1) / 2.0
    den = np.sqrt((ra * ra).sum() * (rb * rb).sum())
    if den == 0.0:
        warnings.warn("spearman: zero-variance ranks, returning 0", RuntimeWarning, stacklevel=2)
        return 0.0
    return float(np.clip((ra * rb).sum() / den, -1.0, 1.0))


@dataclass
class SimilarityReport:
    """Per-tensor rows plus per-layer means and pooled per-layer scores."""

    rows: List[dict] = field(default_factory=list)
    layer_means: Dict[int, Dict[str, float]] = field(default_factory=dict)
    pooled: Dict[int, Dict[str, float]] = field(default_factory=dict)
    setting: str = ""

    def mean(self, metric: str) -> float:
        return float(np.mean([m[metric] for m in self.layer_means.values()]))

    def csv_rows(self) -> List[dict]:
        out = []
        for r in self.rows:
            for metric in ("topk_overlap", "spearman"):
                out.append({"layer": r["layer"], "tensor": r["tensor"], "metric": metric,
                            "value": r[metric], "setting": self.setting})
        for layer, vals in sorted(self.pooled.items()):
            for metric, value in vals.items():
                out.append({"layer": layer, "tensor": "pooled", "metric": metric,
                            "value": value, "setting": self.setting})
        return out

    def summary(self) -> dict:
        return {
            "setting": self.setting,
            "layer_means": {str(k): v for k, v in sorted(self.layer_means.items())},
            "pooled": {str(k): v for k, v in sorted(self.pooled.items())},
            "mean_topk_overlap": self.mean("topk_overlap"),
            "mean_spearman": self.mean("spearman"),
        }


def _tensors(prior) -> Mapping[str, np.ndarray]:
    return prior.tensors if hasattr(prior, "tensors") else prior


def _k_for(size: int, k: Optional[int], k_fraction: float) -> int:
    if k is not None:
        return min(k, size)
    return max(1, min(size, int(round(k_fraction * size))))


def similarity_study(prior_a, prior_b, k: Optional[int] = None, k_fraction: float = 0.01,
                     setting: str = "") -> SimilarityReport:
    """Top-K overlap and Spearman correlation between two importance maps.

    ``k`` fixes the count per tensor; otherwise ``k_fraction`` of each
    tensor's elements (at least one) is used.
    """
    a, b = _tensors(prior_a), _tensors(prior_b)
    if set(a) != set(b):
        raise ShapeError("importance maps cover different tensors")
    report = SimilarityReport(setting=setting)
    per_layer: Dict[int, List[str]] = {}
    for name in a:
        m = _BLOCK.match(name)
        if m is None:
            continue
        if a[name].shape != b[name].shape:
            raise ShapeError(f"{name}: {a[name].shape} vs {b[name].shape}")
        layer = int(m.group(1))
        per_layer.setdefault(layer, []).append(name)
        kk = _k_for(a[name].size, k, k_fraction)
        report.rows.append({
            "layer": layer,
            "tensor": m.group(2),
            "k": kk,
            "topk_overlap": topk_overlap(a[name], b[name], kk),
            "spearman": spearman(a[name], b[name]) if a[name].size > 1 else 1.0,
        })
    for layer, names in sorted(per_layer.items()):
        rows = [r for r in report.rows if r["layer"] == layer]
        report.layer_means[layer] = {
            "topk_overlap": float(np.mean([r["topk_overlap"] for r in rows])),
            "spearman": float(np.mean([r["spearman"] for r in rows])),
        }
        fa = np.concatenate([a[n].ravel() for n in names])
        fb = np.concatenate([b[n].ravel() for n in names])
        kk = _k_for(fa.size, k, k_fraction)
        report.pooled[layer] = {"topk_overlap": topk_overlap(fa, fb, kk), "spearman": spearman(fa, fb)}
    return report


@dataclass
class ForgettingReport:
    accuracy: List[List[Optional[float]]]
    average_final: float
    bwt: float

    def to_dict(self) -> dict:
        return {"accuracy": self.accuracy, "average_final_accuracy": self.average_final,
                "backward_transfer": self.bwt}


def forgetting(acc: Sequence[Sequence[Optional[float]]]) -> ForgettingReport:
    """Average final accuracy and backward transfer from ``acc[task][stage]``."""
    T = len(acc)
    if T == 0 or any(len(row) != T for row in acc):
        raise ValueError("accuracy matrix must be square (task x stage)")
    for t in range(T):
        for s in range(t, T):
            v = acc[t][s]
            if v is None or not 0.0 <= v <= 1.0:
                raise ValueError(f"accuracy[{t}][{s}] must be in [0, 1], got {v!r}")
    final = [acc[t][T - 1] for t in range(T)]
    bwt = float(np.mean([acc[t][T - 1] - acc[t][t] for t in range(T - 1)])) if T > 1 else 0.0
    return ForgettingReport([list(r) for r in acc], float(np.mean(final)), bwt)


def write_similarity_csv(path, reports: Sequence[SimilarityReport]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["layer", "tensor", "metric", "value", "setting"])
        w.writeheader()
        for rep in reports:
            for row in rep.csv_rows():
                w.writerow(row)


def write_json(path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")
