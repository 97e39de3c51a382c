"""Rank-correlation and top-N accuracy metrics, plus legacy box metrics.

The primary quality signal is Spearman's rank-order correlation between
groundtruth MOS and predicted scores over one image's candidate crops,
averaged across images. The return-K-of-top-N accuracy measures whether
the K crops a model returns land in the groundtruth top-N set.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .grid import CropBox, ImageDims


class MetricError(ValueError):
    """Undefined metric (constant vector, bad K, empty input)."""


@dataclass(frozen=True)
class ScorePair:
    """Groundtruth MOS and predicted scores for one image, index-aligned."""

    g: np.ndarray
    p: np.ndarray

    def __post_init__(self):
        g = np.asarray(self.g, dtype=float)
        p = np.asarray(self.p, dtype=float)
        object.__setattr__(self, "g", g)
        object.__setattr__(self, "p", p)
        if g.ndim != 1 or p.shape != g.shape or g.size < 2:
            raise MetricError(f"need aligned 1-d vectors of length >= 2, got {g.shape} / {p.shape}")
        if not (np.isfinite(g).all() and np.isfinite(p).all()):
            raise MetricError("scores must be finite")


def fractional_ranks(v: np.ndarray) -> np.ndarray:
    """1-based ranks; tied values share the average of their positions."""
    v = np.asarray(v, dtype=float)
    order = np.argsort(v, kind="stable")
    ranks = np.empty(v.size, dtype=float)
    i = 0
    while i < v.size:
        j = i
        while j + 1 < v.size and v[order[j + 1]] == v[order[i]]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def srcc(pair: ScorePair) -> float:
    """Spearman coefficient: Pearson correlation of fractional ranks."""
    rg = fractional_ranks(pair.g)
    rp = fractional_ranks(pair.p)
    sg = rg.std()
    sp = rp.std()
    if sg == 0.0 or sp == 0.0:
        raise MetricError("SRCC undefined for a constant score vector")
    cov = ((rg - rg.mean()) * (rp - rp.mean())).mean()
    return float(cov / (sg * sp))


def mean_srcc(pairs: list[ScorePair]) -> float:
    if not pairs:
        raise MetricError("need at least one image")
    return float(np.mean([srcc(pair) for pair in pairs]))


def top_n_set(g: np.ndarray, n: int) -> set[int]:
    """Indices of the N largest MOS; ties resolved by candidate order."""
    g = np.asarray(g, dtype=float)
    order = sorted(range(g.size), key=lambda i: (-g[i], i))
    return set(order[:n])


def acc_k_n(pairs: list[ScorePair], returned: list[list[int]], n: int) -> float:
    """Fraction of returned crops that land in the groundtruth top-N."""
    if not pairs or len(returned) != len(pairs):
        raise MetricError("need one returned-index list per image")
    k = len(returned[0])
    if k < 1 or any(len(r) != k for r in returned):
        raise MetricError("all images must return the same K >= 1 crops")
    hits = 0
    for pair, idxs in zip(pairs, returned):
        if k > pair.g.size:
            raise MetricError(f"K={k} exceeds candidate count {pair.g.size}")
        top = top_n_set(pair.g, n)
        for idx in idxs:
            if not 0 <= idx < pair.g.size:
                raise MetricError(f"returned index {idx} out of range")
            hits += idx in top
    return hits / (len(pairs) * k)


def avg_acc_n(pairs: list[ScorePair], returned_per_k: list[list[list[int]]], n: int) -> float:
    """Mean of acc_k_n over K = 1..4; returned_per_k holds one list per K."""
    if len(returned_per_k) != 4:
        raise MetricError("expected returned crops for K = 1, 2, 3, 4")
    return float(np.mean([acc_k_n(pairs, ret, n) for ret in returned_per_k]))


def iou(a: CropBox, b: CropBox) -> float:
    ih = min(a.x2, b.x2) - max(a.x1, b.x1)
    iw = min(a.y2, b.y2) - max(a.y1, b.y1)
    inter = max(ih, 0) * max(iw, 0)
    union = a.area + b.area - inter
    return inter / union


def bde(a: CropBox, b: CropBox, dims: ImageDims) -> float:
    """Mean displacement of the four box edges, normalized per axis."""
    return (
        abs(a.x1 - b.x1) / dims.H + abs(a.x2 - b.x2) / dims.H
        + abs(a.y1 - b.y1) / dims.W + abs(a.y2 - b.y2) / dims.W
    ) / 4.0


def baseline_n(dims: ImageDims) -> CropBox:
    """No cropping: the full source image."""
    return CropBox(1, 1, dims.H, dims.W)


def baseline_c(dims: ImageDims) -> CropBox:
    """Central crop with spans 0.9 of each image axis."""
    h = int(np.floor(0.9 * dims.H + 0.5))
    w = int(np.floor(0.9 * dims.W + 0.5))
    x1 = (dims.H - h) // 2 + 1
    y1 = (dims.W - w) // 2 + 1
    return CropBox(x1, y1, x1 + h, y1 + w)


def baseline_l(candidates: list[CropBox]) -> CropBox:
    """Largest eligible candidate; ties keep the first in canonical order."""
    if not candidates:
        raise MetricError("baseline_l needs a non-empty candidate list")
    best = candidates[0]
    for box in candidates[1:]:
        if box.area > best.area:
            best = box
    return best


def nearest_anchor_box(box: CropBox, candidates: list[CropBox]) -> int:
    """Index of the candidate with maximum IoU; first wins on ties."""
    if not candidates:
        raise MetricError("nearest_anchor_box needs a non-empty candidate list")
    best_idx, best_iou = 0, -1.0
    for idx, cand in enumerate(candidates):
        v = iou(box, cand)
        if v > best_iou:
            best_idx, best_iou = idx, v
    return best_idx


ACC_KS = (1, 2, 3, 4)
ACC_NS = (5, 10)


@dataclass
class EvalReport:
    """Aggregate metrics over a test set."""

    mean_srcc: float
    acc: dict[tuple[int, int], float]
    acc5_bar: float
    acc10_bar: float
    per_image: list[float] = field(default_factory=list)

    def to_json(self) -> str:
        payload = {
            "mean_srcc": self.mean_srcc,
            "acc": {f"{k}/{n}": self.acc[(k, n)] for n in ACC_NS for k in ACC_KS},
            "acc5_bar": self.acc5_bar,
            "acc10_bar": self.acc10_bar,
        }
        return json.dumps(payload, indent=2)

    def to_table(self) -> str:
        """Plain-text table with percentage accuracies."""
        header = (
            "SRCC    "
            + "".join(f"Acc{k}/5  " for k in ACC_KS) + "Acc5_bar  "
            + "".join(f"Acc{k}/10  " for k in ACC_KS) + "Acc10_bar"
        )
        row = f"{self.mean_srcc:.3f}   "
        row += "".join(f"{100 * self.acc[(k, 5)]:5.1f}   " for k in ACC_KS)
        row += f"{100 * self.acc5_bar:5.1f}     "
        row += "".join(f"{100 * self.acc[(k, 10)]:5.1f}    " for k in ACC_KS)
        row += f"{100 * self.acc10_bar:5.1f}"
        return header + "\n" + row


def top_k_returned(p: np.ndarray, k: int) -> list[int]:
    """Indices of the K highest predictions; ties by candidate order."""
    p = np.asarray(p, dtype=float)
    order = sorted(range(p.size), key=lambda i: (-p[i], i))
    return order[:k]


def evaluate(pairs: list[ScorePair]) -> EvalReport:
    """Full report: mean SRCC plus Acc_{K/N} with model top-K returns."""
    per_image = [srcc(pair) for pair in pairs]
    acc = {}
    for n in ACC_NS:
        for k in ACC_KS:
            returned = [top_k_returned(pair.p, k) for pair in pairs]
            acc[(k, n)] = acc_k_n(pairs, returned, n)
    return EvalReport(
        mean_srcc=float(np.mean(per_image)),
        acc=acc,
        acc5_bar=float(np.mean([acc[(k, 5)] for k in ACC_KS])),
        acc10_bar=float(np.mean([acc[(k, 10)] for k in ACC_KS])),
        per_image=per_image,
    )
