"""Grid-anchor candidate crop enumeration.

An image is partitioned into M x N bins whose centers act as anchors.
The top-left corner of a crop is restricted to the m x n top-left anchor
block, the bottom-right corner to the m x n bottom-right block, which
caps the candidate set at m^2 * n^2 boxes before the area and
aspect-ratio filters are applied.

Coordinates follow a (row, column) convention: x runs down the image
height, y runs across the width. Boxes are 1-based with inclusive
bounds; crop height is x2 - x1 and width is y2 - y1.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator

import numpy as np


class GridSpecError(ValueError):
    """Invalid grid parameters or bin indices."""


@dataclass(frozen=True)
class GridSpec:
    """Anchor-grid parameters governing candidate enumeration."""

    M: int = 12
    N: int = 12
    m: int = 4
    n: int = 4
    lam: float = 0.5
    alpha1: float = 0.5
    alpha2: float = 2.0

    def __post_init__(self):
        if self.M < 2 or self.N < 2:
            raise GridSpecError(f"need M, N >= 2, got M={self.M}, N={self.N}")
        if self.m < 1 or self.n < 1:
            raise GridSpecError(f"need m, n >= 1, got m={self.m}, n={self.n}")
        if self.M < 2 * self.m or self.N < 2 * self.n:
            raise GridSpecError(
                "anchor blocks overlap: need M >= 2m and N >= 2n, got "
                f"M={self.M}, m={self.m}, N={self.N}, n={self.n}"
            )
        if not 0.0 < self.lam < 1.0:
            raise GridSpecError(f"lam must be in (0, 1), got {self.lam}")
        if self.alpha1 <= 0:
            raise GridSpecError(f"alpha1 must be > 0, got {self.alpha1}")
        if self.alpha2 < self.alpha1:
            raise GridSpecError(
                f"need alpha1 <= alpha2, got {self.alpha1} > {self.alpha2}"
            )

    def to_dict(self) -> dict:
        return {
            "M": self.M, "N": self.N, "m": self.m, "n": self.n,
            "lambda": self.lam, "alpha1": self.alpha1, "alpha2": self.alpha2,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GridSpec":
        return cls(
            M=d["M"], N=d["N"], m=d["m"], n=d["n"],
            lam=d.get("lambda", d.get("lam", 0.5)),
            alpha1=d["alpha1"], alpha2=d["alpha2"],
        )


@dataclass(frozen=True)
class ImageDims:
    """Pixel height and width of a source image."""

    H: int
    W: int

    def __post_init__(self):
        if self.H < 1 or self.W < 1:
            raise GridSpecError(f"degenerate image dims {self.H}x{self.W}")


@dataclass(frozen=True, order=True)
class CropBox:
    """Axis-aligned crop, 1-based inclusive (row, column) corners."""

    x1: int
    y1: int
    x2: int
    y2: int

    def __post_init__(self):
        if not (1 <= self.x1 < self.x2 and 1 <= self.y1 < self.y2):
            raise GridSpecError(f"degenerate crop box {self}")

    @property
    def height(self) -> int:
        return self.x2 - self.x1

    @property
    def width(self) -> int:
        return self.y2 - self.y1

    @property
    def area(self) -> int:
        return self.height * self.width

    @property
    def aspect_ratio(self) -> float:
        return self.width / self.height


@dataclass(frozen=True)
class AnchorPair:
    """Bin indices of the two crop corners."""

    i1: int
    j1: int
    i2: int
    j2: int


def _round_half_up(v: float) -> int:
    return math.floor(v + 0.5)


def anchor_center(i: int, j: int, dims: ImageDims, spec: GridSpec) -> tuple[float, float]:
    """Continuous (row, column) position of the center of bin (i, j)."""
    if not (1 <= i <= spec.M and 1 <= j <= spec.N):
        raise GridSpecError(
            f"bin index ({i}, {j}) outside grid {spec.M}x{spec.N}"
        )
    return (i - 0.5) * dims.H / spec.M, (j - 0.5) * dims.W / spec.N


def crop_from_anchors(pair: AnchorPair, dims: ImageDims, spec: GridSpec) -> CropBox:
    """Rounded integer box whose corners sit on the two anchor centers."""
    x1, y1 = anchor_center(pair.i1, pair.j1, dims, spec)
    x2, y2 = anchor_center(pair.i2, pair.j2, dims, spec)
    clamp = lambda v, hi: min(max(v, 1), hi)
    return CropBox(
        x1=clamp(_round_half_up(x1), dims.H),
        y1=clamp(_round_half_up(y1), dims.W),
        x2=clamp(_round_half_up(x2), dims.H),
        y2=clamp(_round_half_up(y2), dims.W),
    )


def passes_area_constraint(crop: CropBox, dims: ImageDims, spec: GridSpec) -> bool:
    """Crop area must be at least lam * image area (on the integer box)."""
    return crop.area >= spec.lam * dims.H * dims.W


def passes_aspect_constraint(crop: CropBox, spec: GridSpec) -> bool:
    """Width/height ratio must fall in [alpha1, alpha2], inclusive."""
    return spec.alpha1 <= crop.aspect_ratio <= spec.alpha2


def _anchor_pairs(spec: GridSpec) -> Iterator[AnchorPair]:
    for i1 in range(1, spec.m + 1):
        for j1 in range(1, spec.n + 1):
            for i2 in range(spec.M - spec.m + 1, spec.M + 1):
                for j2 in range(spec.N - spec.n + 1, spec.N + 1):
                    yield AnchorPair(i1, j1, i2, j2)


def enumerate_candidates(
    dims: ImageDims, spec: GridSpec | None = None, with_anchors: bool = False
):
    """All anchor-pair crops passing both filters, in canonical order.

    Canonical order: aspect ratio ascending, ties broken by
    (x1, y1, x2, y2), then by anchor indices. Duplicate rounded boxes
    keep the first pair in this order. Returns a list of CropBox, or
    (CropBox, AnchorPair) tuples when with_anchors is set.
    """
    spec = spec or GridSpec()
    if dims.H < spec.M or dims.W < spec.N:
        raise GridSpecError(
            f"image {dims.H}x{dims.W} smaller than grid {spec.M}x{spec.N}"
        )

    # all m^2 * n^2 anchor pairs at once, in _anchor_pairs order; the
    # arithmetic mirrors anchor_center / crop_from_anchors elementwise
    def snap(idx, extent, bins):
        v = (idx - 0.5) * extent / bins
        return np.clip(np.floor(v + 0.5), 1, extent).astype(int)

    gi1, gj1, gi2, gj2 = (
        g.ravel() for g in np.meshgrid(
            np.arange(1, spec.m + 1, dtype=np.float64),
            np.arange(1, spec.n + 1, dtype=np.float64),
            np.arange(spec.M - spec.m + 1, spec.M + 1, dtype=np.float64),
            np.arange(spec.N - spec.n + 1, spec.N + 1, dtype=np.float64),
            indexing="ij",
        )
    )
    x1, y1 = snap(gi1, dims.H, spec.M), snap(gj1, dims.W, spec.N)
    x2, y2 = snap(gi2, dims.H, spec.M), snap(gj2, dims.W, spec.N)
    bad = (x1 >= x2) | (y1 >= y2)
    if bad.any():
        k = int(np.argmax(bad))  # raises the same degenerate-box error
        crop_from_anchors(AnchorPair(int(gi1[k]), int(gj1[k]),
                                     int(gi2[k]), int(gj2[k])), dims, spec)
    h, w = x2 - x1, y2 - y1
    ar = w / h
    keep = ((h * w >= spec.lam * dims.H * dims.W)
            & (spec.alpha1 <= ar) & (ar <= spec.alpha2))
    survivors = [
        (CropBox(int(x1[k]), int(y1[k]), int(x2[k]), int(y2[k])),
         AnchorPair(int(gi1[k]), int(gj1[k]), int(gi2[k]), int(gj2[k])))
        for k in np.flatnonzero(keep)
    ]
    survivors.sort(
        key=lambda bp: (
            bp[0].aspect_ratio,
            (bp[0].x1, bp[0].y1, bp[0].x2, bp[0].y2),
            (bp[1].i1, bp[1].j1, bp[1].i2, bp[1].j2),
        )
    )
    seen: set[CropBox] = set()
    out = []
    for box, pair in survivors:
        if box in seen:
            continue
        seen.add(box)
        out.append((box, pair) if with_anchors else box)
    return out


def count_candidates(dims: ImageDims, spec: GridSpec | None = None) -> int:
    return len(enumerate_candidates(dims, spec))


def candidates_to_jsonl(dims: ImageDims, spec: GridSpec | None = None) -> str:
    """Serialize the candidate list, one JSON object per line."""
    lines = []
    for box, pair in enumerate_candidates(dims, spec, with_anchors=True):
        lines.append(
            '{"x1": %d, "y1": %d, "x2": %d, "y2": %d, '
            '"i1": %d, "j1": %d, "i2": %d, "j2": %d, '
            '"aspect_ratio": %.6f}'
            % (box.x1, box.y1, box.x2, box.y2,
               pair.i1, pair.j1, pair.i2, pair.j2, box.aspect_ratio)
        )
    return "\n".join(lines) + ("\n" if lines else "")
