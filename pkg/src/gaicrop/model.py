"""Crop scoring model: small conv backbone, RoI + RoD alignment into an
s x s grid, channel reduction, and an FC head predicting one score per
candidate crop.

The backbone runs exactly once per image; all candidate crops are scored
against the same feature map. The RoI branch resamples the features
inside the crop; the RoD branch zeroes the crop region out of the full
map and resamples the whole extent, so the model also sees what a crop
discards.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import ndtensor as nd
from .ndtensor.core import _outer_grid_forward
from .grid import CropBox
from .dataset import AnnotatedImage, DatasetError


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    backbone_channels: int = 32
    backbone_stride: int = 16
    align_size: int = 9
    cdim: int = 8
    fc_width: int = 128
    input_short_side: int = 256
    delta: float = 1.0
    lr: float = 1e-4
    epochs: int = 40
    crops_per_batch: int = 64

    def __post_init__(self):
        if self.backbone_stride not in (8, 16):
            raise ModelError(f"backbone_stride must be 8 or 16, got {self.backbone_stride}")
        if self.align_size < 3:
            raise ModelError(f"align_size must be >= 3, got {self.align_size}")
        if self.cdim < 1:
            raise ModelError(f"cdim must be >= 1, got {self.cdim}")
        if min(self.backbone_channels, self.fc_width, self.input_short_side,
               self.epochs, self.crops_per_batch) < 1 or self.delta <= 0 or self.lr <= 0:
            raise ModelError("all config values must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass
class FeatureMap:
    """Backbone output for one image plus the pixel-to-cell scale."""

    tensor: nd.Tensor  # CHW
    scale: float  # feature cells per model-input pixel (1 / stride)

    @property
    def hf(self) -> int:
        return self.tensor.data.shape[1]

    @property
    def wf(self) -> int:
        return self.tensor.data.shape[2]


@dataclass
class CropScore:
    index: int
    score: float


# global instrumentation: backbone passes since the last reset
_FEATURE_PASSES = 0


def feature_pass_count() -> int:
    return _FEATURE_PASSES


def reset_feature_pass_count():
    global _FEATURE_PASSES
    _FEATURE_PASSES = 0


# ---------------------------------------------------------------------------
# image resize

def resize_short_side(image: np.ndarray, target: int):
    """Bilinear resize so the short side equals target; returns the
    resized image and the (row, col) scale factors new/old."""
    if image.ndim != 3 or image.shape[0] < 2 or image.shape[1] < 2:
        raise ModelError(f"degenerate image of shape {image.shape}")
    h, w = image.shape[:2]
    if h <= w:
        nh = target
        nw = max(int(np.floor(w * target / h + 0.5)), 1)
    else:
        nw = target
        nh = max(int(np.floor(h * target / w + 0.5)), 1)
    if (nh, nw) == (h, w):
        return image.astype(np.float64), 1.0, 1.0
    ys = (np.arange(nh) + 0.5) * h / nh - 0.5
    xs = (np.arange(nw) + 0.5) * w / nw - 0.5
    y0 = np.clip(np.floor(ys).astype(int), 0, h - 2)
    x0 = np.clip(np.floor(xs).astype(int), 0, w - 2)
    ty = np.clip(ys - y0, 0.0, 1.0)[:, None, None]
    tx = np.clip(xs - x0, 0.0, 1.0)[None, :, None]
    img = image.astype(np.float64)
    out = (
        img[y0][:, x0] * (1 - ty) * (1 - tx)
        + img[y0][:, x0 + 1] * (1 - ty) * tx
        + img[y0 + 1][:, x0] * ty * (1 - tx)
        + img[y0 + 1][:, x0 + 1] * ty * tx
    )
    return out, nh / h, nw / w


# ---------------------------------------------------------------------------
# parameters

def _n_blocks(stride: int) -> int:
    return {8: 3, 16: 4}[stride]


def init_params(config: ModelConfig, seed: int) -> dict[str, nd.Tensor]:
    """He-initialized parameter set for the backbone, reduction and head."""
    rng = np.random.default_rng(seed)

    def conv_init(out_c, in_c, k):
        std = np.sqrt(2.0 / (in_c * k * k))
        return nd.Tensor(rng.normal(0.0, std, size=(out_c, in_c, k, k)), requires_grad=True)

    def fc_init(out_d, in_d):
        std = np.sqrt(2.0 / in_d)
        return nd.Tensor(rng.normal(0.0, std, size=(out_d, in_d)), requires_grad=True)

    def zeros(*shape):
        return nd.Tensor(np.zeros(shape), requires_grad=True)

    c = config.backbone_channels
    params: dict[str, nd.Tensor] = {}
    in_c = 3
    for i in range(_n_blocks(config.backbone_stride)):
        params[f"conv{i}_w"] = conv_init(c, in_c, 3)
        params[f"conv{i}_b"] = zeros(c)
        in_c = c
    params["reduce_w"] = conv_init(config.cdim, c, 1)
    params["reduce_b"] = zeros(config.cdim)
    d = 2 * config.cdim * config.align_size * config.align_size
    params["fc1_w"] = fc_init(config.fc_width, d)
    params["fc1_b"] = zeros(config.fc_width)
    params["fc2_w"] = fc_init(config.fc_width, config.fc_width)
    params["fc2_b"] = zeros(config.fc_width)
    params["out_w"] = fc_init(1, config.fc_width)
    params["out_b"] = zeros(1)
    return params


# ---------------------------------------------------------------------------
# forward pieces

def extract_features(image: np.ndarray | nd.Tensor, params: dict[str, nd.Tensor],
                     config: ModelConfig) -> FeatureMap:
    """One backbone pass over an HxWx3 model-input image (already resized)."""
    global _FEATURE_PASSES
    _FEATURE_PASSES += 1
    x = image if isinstance(image, nd.Tensor) else nd.Tensor(image)
    h, w = x.data.shape[:2]
    x = _transpose_hwc(nd.reshape(x, (1, h, w, 3)))
    for i in range(_n_blocks(config.backbone_stride)):
        x = nd.conv2d(x, params[f"conv{i}_w"], params[f"conv{i}_b"], stride=2, padding=1)
        x = nd.relu(x)
    chw = nd.reshape(x, x.data.shape[1:])
    return FeatureMap(tensor=chw, scale=1.0 / config.backbone_stride)


def _transpose_hwc(x: nd.Tensor) -> nd.Tensor:
    """(1, H, W, 3) -> (1, 3, H, W) with gradient support."""

    def backward_fn(grad):
        if x.requires_grad:
            x._accumulate(grad.transpose(0, 2, 3, 1))

    return nd.core._from_op(np.ascontiguousarray(x.data.transpose(0, 3, 1, 2)),
                            (x,), backward_fn)


def reduce_channels(fmap: FeatureMap, params: dict[str, nd.Tensor]) -> FeatureMap:
    c, h, w = fmap.tensor.data.shape
    x = nd.reshape(fmap.tensor, (1, c, h, w))
    x = nd.conv1x1_reduce(x, params["reduce_w"], params["reduce_b"])
    return FeatureMap(tensor=nd.reshape(x, x.data.shape[1:]), scale=fmap.scale)


def _cell_centers(lo: float, hi: float, s: int) -> np.ndarray:
    # same expression as the batched path in head_scores, for bit-equality
    return lo + ((np.arange(s) + 0.5) / s) * (hi - lo)


def _align_rect(fmap: FeatureMap, rect, s: int) -> nd.Tensor:
    """Bilinear center-sample an s x s grid over a rectangle given in
    feature edge coordinates; returns (C, s, s)."""
    fx1, fy1, fx2, fy2 = rect
    hf, wf = fmap.hf, fmap.wf
    xs = np.clip(_cell_centers(fx1, fx2, s) - 0.5, 0.0, hf - 1.0)
    ys = np.clip(_cell_centers(fy1, fy2, s) - 0.5, 0.0, wf - 1.0)
    gx = np.repeat(xs, s)
    gy = np.tile(ys, s)
    sampled = nd.grid_bilinear_sample(fmap.tensor, gx, gy)
    return nd.reshape(sampled, (fmap.tensor.data.shape[0], s, s))


def _crop_rect(crop, fmap: FeatureMap):
    x1, y1, x2, y2 = (crop.x1, crop.y1, crop.x2, crop.y2) if isinstance(crop, CropBox) else crop
    return (x1 * fmap.scale, y1 * fmap.scale, x2 * fmap.scale, y2 * fmap.scale)


def roi_align(fmap: FeatureMap, crop, s: int) -> nd.Tensor:
    """Resample the crop's feature region into s x s cells, one bilinear
    sample at each cell center. Crop coords are model-input pixels."""
    return _align_rect(fmap, _crop_rect(crop, fmap), s)


def rod_mask(fmap: FeatureMap, crop) -> np.ndarray:
    """Binary (H_f, W_f) mask, 0 where a cell center falls inside the
    crop's feature rectangle."""
    fx1, fy1, fx2, fy2 = _crop_rect(crop, fmap)
    ci = np.arange(fmap.hf) + 0.5
    cj = np.arange(fmap.wf) + 0.5
    inside = ((ci >= fx1) & (ci <= fx2))[:, None] & ((cj >= fy1) & (cj <= fy2))[None, :]
    return np.where(inside, 0.0, 1.0)


def rod_align(fmap: FeatureMap, crop, s: int) -> nd.Tensor:
    """Zero the crop region out of the full map, then resample the whole
    remaining extent into s x s cells."""
    mask = np.broadcast_to(rod_mask(fmap, crop), fmap.tensor.data.shape)
    zeroed = nd.mul_mask(fmap.tensor, np.ascontiguousarray(mask))
    masked = FeatureMap(tensor=zeroed, scale=fmap.scale)
    full = (0.0, 0.0, fmap.hf, fmap.wf)  # edge coords of the whole map
    return _align_rect(masked, full, s)


def head_scores(reduced: FeatureMap, boxes, params: dict[str, nd.Tensor],
                config: ModelConfig) -> nd.Tensor:
    """Scores for boxes (model-input pixel coords) as a length-B tensor.
    RoI block first, RoD block second along the channel axis.

    All crops' sampling grids go through one batched bilinear node per
    branch; results agree with per-crop roi_align/rod_align to machine
    precision (batched gemm may round differently than row-at-a-time).
    """
    s = config.align_size
    nb = len(boxes)
    c = reduced.tensor.data.shape[0]
    xs, ys, masks, full_xs, full_ys = _head_grids(reduced, boxes, s)
    # separable outer-product sampling; grids repeat across crops that
    # share an anchor row, so the row pass is amortized
    roi = nd.outer_grid_sample(reduced.tensor, xs, ys)
    # shared-grid mode: one sample grid for every crop, per-crop masks
    rod = nd.batched_bilinear_sample(reduced.tensor, np.repeat(full_xs, s),
                                     np.tile(full_ys, s), masks=masks)
    cat = nd.concat_channels(nd.reshape(roi, (nb, c, s, s)),
                             nd.reshape(rod, (nb, c, s, s)))
    x = nd.reshape(cat, (nb, 2 * c * s * s))
    x = nd.relu(nd.fully_connected(x, params["fc1_w"], params["fc1_b"]))
    x = nd.relu(nd.fully_connected(x, params["fc2_w"], params["fc2_b"]))
    x = nd.fully_connected(x, params["out_w"], params["out_b"])
    return nd.flatten(x)


def _head_grids(reduced: FeatureMap, boxes, s: int):
    """Sampling grids and RoD masks for a batch of boxes (model-input
    pixel coords): RoI cell-center grids (B, s) per axis, (B, Hf, Wf)
    outside-masks, and the shared full-extent grid."""
    c, hf, wf = reduced.tensor.data.shape
    rects = np.asarray(boxes, dtype=np.float64) * reduced.scale  # (B, 4)
    fx1, fy1, fx2, fy2 = rects.T
    centers = (np.arange(s) + 0.5) / s  # fractional cell centers
    xs = np.clip(fx1[:, None] + centers * (fx2 - fx1)[:, None] - 0.5, 0.0, hf - 1.0)
    ys = np.clip(fy1[:, None] + centers * (fy2 - fy1)[:, None] - 0.5, 0.0, wf - 1.0)
    ci = np.arange(hf) + 0.5
    cj = np.arange(wf) + 0.5
    inside = (
        ((ci >= fx1[:, None]) & (ci <= fx2[:, None]))[:, :, None]
        & ((cj >= fy1[:, None]) & (cj <= fy2[:, None]))[:, None, :]
    )
    masks = np.where(inside, 0.0, 1.0)
    full_xs = np.clip(_cell_centers(0.0, float(hf), s) - 0.5, 0.0, hf - 1.0)
    full_ys = np.clip(_cell_centers(0.0, float(wf), s) - 0.5, 0.0, wf - 1.0)
    return xs, ys, masks, full_xs, full_ys


def head_scores_fast(reduced: FeatureMap, boxes, params: dict[str, nd.Tensor],
                     config: ModelConfig) -> np.ndarray:
    """Inference-only head: same scores as head_scores (to floating-point
    reassociation, around 1e-12) without building the autodiff graph.

    The RoD branch never reaches the feature map directly: its aligned
    features are bilinear samples of the map on one shared grid, gated
    by each crop's binary outside-mask. That makes its first-FC
    contribution linear in the mask gathers, so the fc1 weights for the
    RoD half are folded into four small per-corner matrices up front and
    the whole branch collapses to four (B, n) x (n, fc) products.
    """
    s = config.align_size
    nb = len(boxes)
    c, hf, wf = reduced.tensor.data.shape
    n = s * s
    xs, ys, masks, full_xs, full_ys = _head_grids(reduced, boxes, s)
    fmap = reduced.tensor.data
    roi_flat = _outer_grid_forward(fmap, xs, ys)[0].reshape(nb, c * n)

    fc1_w = params["fc1_w"].data
    w_roi = fc1_w[:, : c * n]
    w_rod = fc1_w[:, c * n:].reshape(-1, c, n)  # (fc, c, n)
    flat_map = fmap.reshape(c, hf * wf)
    flat_masks = masks.reshape(nb, hf * wf)
    gx = np.repeat(full_xs, s)
    gy = np.tile(full_ys, s)
    x0 = np.clip(np.floor(gx).astype(int), 0, max(hf - 2, 0))
    y0 = np.clip(np.floor(gy).astype(int), 0, max(wf - 2, 0))
    tx, ty = gx - x0, gy - y0
    corner_w = ((1 - tx) * (1 - ty), (1 - tx) * ty, tx * (1 - ty), tx * ty)
    corner_idx = (x0 * wf + y0, x0 * wf + y0 + 1,
                  (x0 + 1) * wf + y0, (x0 + 1) * wf + y0 + 1)
    h1 = roi_flat @ w_roi.T
    h1 += params["fc1_b"].data
    # P: per-corner weighted map values; Q folds them through fc1 so the
    # whole RoD branch is one (B, 4n) x (4n, fc) product of mask gathers
    p = np.array([wgt * flat_map.take(idx, axis=1)
                  for wgt, idx in zip(corner_w, corner_idx)])  # (4, c, n)
    q = np.einsum("fcn,kcn->knf", w_rod, p).reshape(4 * n, -1)
    gathers = np.hstack([flat_masks.take(idx, axis=1) for idx in corner_idx])
    h1 += gathers @ q
    np.maximum(h1, 0.0, out=h1)
    h2 = h1 @ params["fc2_w"].data.T
    h2 += params["fc2_b"].data
    np.maximum(h2, 0.0, out=h2)
    out = h2 @ params["out_w"].data.T
    out += params["out_b"].data
    return out.reshape(-1)


def _scale_box(crop: CropBox, sh: float, sw: float):
    return (crop.x1 * sh, crop.y1 * sw, crop.x2 * sh, crop.y2 * sw)


def score_crops(image: np.ndarray, candidates: list[CropBox],
                params: dict[str, nd.Tensor], config: ModelConfig,
                timings: dict | None = None) -> list[CropScore]:
    """Score all candidates of one image (scores in normalized-MOS
    units). Exactly one backbone pass regardless of candidate count."""
    if not candidates:
        return []
    t0 = time.perf_counter()
    resized, sh, sw = resize_short_side(image, config.input_short_side)
    fmap = extract_features(resized, params, config)
    reduced = reduce_channels(fmap, params)
    t1 = time.perf_counter()
    boxes = [_scale_box(c, sh, sw) for c in candidates]
    scores = head_scores_fast(reduced, boxes, params, config)
    t2 = time.perf_counter()
    if timings is not None:
        timings["features_s"] = timings.get("features_s", 0.0) + (t1 - t0)
        timings["head_s"] = timings.get("head_s", 0.0) + (t2 - t1)
    return [CropScore(index=i, score=float(v)) for i, v in enumerate(scores)]


# ---------------------------------------------------------------------------
# training

@dataclass
class TrainLog:
    epoch_losses: list[float] = field(default_factory=list)
    mos_mean: float = 0.0
    mos_std: float = 1.0


def mos_normalization(images: list[AnnotatedImage]) -> tuple[float, float]:
    """Global train-set MOS mean and population std."""
    all_mos = np.concatenate([img.mos_vector() for img in images])
    std = float(all_mos.std())
    if std == 0.0:
        std = 1.0
    return float(all_mos.mean()), std


def train(images: list[AnnotatedImage], config: ModelConfig, seed: int = 0,
          progress=None) -> tuple[dict[str, nd.Tensor], TrainLog]:
    """Train on annotated images; one image plus crops_per_batch crops
    per step, Huber loss on normalized MOS, Adam updates. Deterministic
    given the seed."""
    if not images:
        raise DatasetError("training needs at least one image")
    for img in images:
        if not img.crops:
            raise DatasetError(f"image {img.id} has no annotated crops")
    mean, std = mos_normalization(images)
    rng = np.random.default_rng(seed)
    params = init_params(config, seed)
    state = nd.AdamState(params, learning_rate=config.lr)

    # resize once; crop boxes and targets are fixed across epochs
    prepared = []
    for img in images:
        resized, sh, sw = resize_short_side(img.load_pixels(), config.input_short_side)
        boxes = np.array([_scale_box(c.crop, sh, sw) for c in img.crops])
        targets = (img.mos_vector() - mean) / std
        prepared.append((resized, boxes, targets))

    log = TrainLog(mos_mean=mean, mos_std=std)
    batch = config.crops_per_batch
    for epoch in range(config.epochs):
        order = rng.permutation(len(prepared))
        losses = []
        for img_idx in order:
            resized, boxes, targets = prepared[img_idx]
            n = len(boxes)
            picks = rng.choice(n, size=batch, replace=n < batch)
            fmap = extract_features(resized, params, config)
            reduced = reduce_channels(fmap, params)
            pred = head_scores(reduced, [tuple(boxes[i]) for i in picks], params, config)
            loss = nd.huber_loss(pred, nd.Tensor(targets[picks]), delta=config.delta)
            nd.zero_grads(params)
            nd.backward(loss)
            nd.adam_step(params, state)
            losses.append(loss.item())
        log.epoch_losses.append(float(np.mean(losses)))
        if progress is not None:
            progress(epoch, log.epoch_losses[-1])
    return params, log


# ---------------------------------------------------------------------------
# checkpoints

def save_checkpoint(path, params: dict[str, nd.Tensor], config: ModelConfig,
                    mos_mean: float, mos_std: float):
    """Binary parameter container plus a JSON sidecar at <path>.json."""
    path = Path(path)
    nd.save_tensors(path, {k: p.data for k, p in sorted(params.items())})
    sidecar = {
        "config": config.to_dict(),
        "mos_mean": mos_mean,
        "mos_std": mos_std,
        "concat_order": "roi_rod",
    }
    Path(str(path) + ".json").write_text(json.dumps(sidecar, indent=2) + "\n")


def load_checkpoint(path):
    path = Path(path)
    arrays = nd.load_tensors(path)
    params = {k: nd.Tensor(v, requires_grad=True) for k, v in arrays.items()}
    sidecar = json.loads(Path(str(path) + ".json").read_text())
    if sidecar.get("concat_order") != "roi_rod":
        raise ModelError(f"unsupported concat_order {sidecar.get('concat_order')!r}")
    config = ModelConfig.from_dict(sidecar["config"])
    return params, config, sidecar["mos_mean"], sidecar["mos_std"]


# ---------------------------------------------------------------------------
# inference

def predict_scores_mos(image: np.ndarray, candidates: list[CropBox],
                       params, config: ModelConfig, mos_mean: float,
                       mos_std: float) -> np.ndarray:
    """De-normalized (MOS-unit) predicted scores in candidate order."""
    scored = score_crops(image, candidates, params, config)
    return np.array([cs.score for cs in scored]) * mos_std + mos_mean


def predict_top_k(image: np.ndarray, candidates: list[CropBox], k: int,
                  params, config: ModelConfig) -> list[tuple[CropBox, float]]:
    """Top-k candidates by predicted score; ties keep candidate order."""
    if k < 1:
        raise ModelError(f"k must be >= 1, got {k}")
    scored = score_crops(image, candidates, params, config)
    order = sorted(range(len(scored)), key=lambda i: (-scored[i].score, i))
    return [(candidates[i], scored[i].score) for i in order[:k]]


def predict_best_for_aspect(image: np.ndarray, candidates: list[CropBox],
                            ratio: float, params, config: ModelConfig,
                            tol: float = 0.05) -> tuple[CropBox, float]:
    """Best candidate whose aspect ratio is within tol*ratio of ratio."""
    band = [c for c in candidates if abs(c.aspect_ratio - ratio) <= tol * ratio]
    if not band:
        raise ModelError(f"no candidate within {tol:.2%} of aspect ratio {ratio}")
    return predict_top_k(image, band, 1, params, config)[0]
