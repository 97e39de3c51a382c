"""Annotated-crop dataset format, MOS statistics, splits, and a
synthetic planted-rule generator for verifiable end-to-end training.

File format is JSON lines. Line 1 is a header
{format_version, grid_spec, synthetic_rule?}; each following line is one
image {id, h, w, image_path?, crops: [...]}. Human crops carry integer
ratings in [1..5]; synthetic crops carry a real mos (the noisy training
target) plus mos_clean (the noise-free rule value) and a planted_best
flag on the rule's argmax crop. Reals are written with 9 significant
digits, so a file is byte-stable after one save/load round trip.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import imgio
from .grid import CropBox, GridSpec, ImageDims, enumerate_candidates

FORMAT_VERSION = 1


class DatasetError(ValueError):
    """Malformed dataset file or invalid annotation."""


def compute_mos(ratings: list[int]) -> tuple[float, float]:
    """Mean opinion score and population standard deviation."""
    if not ratings:
        raise DatasetError("cannot compute MOS of an empty rating list")
    arr = np.asarray(ratings, dtype=float)
    return float(arr.mean()), float(arr.std())


@dataclass
class CropAnnotation:
    crop: CropBox
    ratings: list[int] = field(default_factory=list)
    mos: float | None = None
    mos_clean: float | None = None
    planted_best: bool = False

    def __post_init__(self):
        for r in self.ratings:
            if not (isinstance(r, int) and 1 <= r <= 5):
                raise DatasetError(f"rating {r!r} outside [1..5]")
        if self.ratings:
            self.mos, self.rating_std = compute_mos(self.ratings)
        else:
            self.rating_std = 0.0


@dataclass
class AnnotatedImage:
    id: str
    dims: ImageDims
    crops: list[CropAnnotation]
    image_path: str | None = None
    pixels: np.ndarray | None = None

    def load_pixels(self, base_dir=None) -> np.ndarray:
        if self.pixels is not None:
            return self.pixels
        if self.image_path is None:
            raise DatasetError(f"image {self.id} has no pixels and no image_path")
        path = Path(base_dir) / self.image_path if base_dir else Path(self.image_path)
        self.pixels = imgio.load_image(path)
        return self.pixels

    def mos_vector(self, clean: bool = False) -> np.ndarray:
        vals = []
        for c in self.crops:
            v = c.mos_clean if clean and c.mos_clean is not None else c.mos
            if v is None:
                raise DatasetError(f"crop of image {self.id} has no MOS")
            vals.append(v)
        return np.asarray(vals, dtype=float)


@dataclass
class SyntheticRule:
    a: float
    b: float
    noise_sigma: float
    seed: int


@dataclass
class Dataset:
    grid_spec: GridSpec
    images: list[AnnotatedImage]
    synthetic_rule: SyntheticRule | None = None


@dataclass
class DatasetSplit:
    train_ids: list[str]
    test_ids: list[str]


def _fmt_real(v: float) -> str:
    return f"{v:.9g}"


def _crop_to_json(c: CropAnnotation) -> str:
    parts = [f'"x1": {c.crop.x1}, "y1": {c.crop.y1}, "x2": {c.crop.x2}, "y2": {c.crop.y2}']
    if c.ratings:
        parts.append(f'"ratings": {json.dumps(c.ratings)}')
    if c.mos is not None and not c.ratings:
        parts.append(f'"mos": {_fmt_real(c.mos)}')
    if c.mos_clean is not None:
        parts.append(f'"mos_clean": {_fmt_real(c.mos_clean)}')
    if c.planted_best:
        parts.append('"planted_best": true')
    return "{" + ", ".join(parts) + "}"


def save_dataset(dataset: Dataset, path, images_dir=None):
    """Write the dataset as JSON lines; optionally materialize in-memory
    pixels as PNG files under images_dir (paths stored relative to the
    dataset file's directory)."""
    path = Path(path)
    base = path.parent
    lines = []
    header: dict = {
        "format_version": FORMAT_VERSION,
        "grid_spec": dataset.grid_spec.to_dict(),
    }
    if dataset.synthetic_rule is not None:
        r = dataset.synthetic_rule
        header["synthetic_rule"] = {
            "a": r.a, "b": r.b, "noise_sigma": r.noise_sigma, "seed": r.seed,
        }
    lines.append(json.dumps(header))
    for img in dataset.images:
        if img.pixels is not None and img.image_path is None and images_dir is not None:
            images_dir = Path(images_dir)
            images_dir.mkdir(parents=True, exist_ok=True)
            img_file = images_dir / f"{img.id}.png"
            imgio.save_image(img_file, img.pixels)
            img.image_path = str(img_file.relative_to(base)) if img_file.is_relative_to(base) else str(img_file)
        crops = ", ".join(_crop_to_json(c) for c in img.crops)
        rec = f'{{"id": {json.dumps(img.id)}, "h": {img.dims.H}, "w": {img.dims.W}'
        if img.image_path is not None:
            rec += f', "image_path": {json.dumps(img.image_path)}'
        rec += f', "crops": [{crops}]}}'
        lines.append(rec)
    path.write_text("\n".join(lines) + "\n")


def _parse_crop(obj: dict, lineno: int, idx: int) -> CropAnnotation:
    where = f"line {lineno}, crop {idx}"
    for key in ("x1", "y1", "x2", "y2"):
        if key not in obj:
            raise DatasetError(f"{where}: missing field '{key}'")
    try:
        box = CropBox(obj["x1"], obj["y1"], obj["x2"], obj["y2"])
    except ValueError as exc:
        raise DatasetError(f"{where}: {exc}") from exc
    ratings = obj.get("ratings", [])
    for r in ratings:
        if not (isinstance(r, int) and 1 <= r <= 5):
            raise DatasetError(f"{where}: field 'ratings' value {r!r} outside [1..5]")
    return CropAnnotation(
        crop=box,
        ratings=list(ratings),
        mos=obj.get("mos"),
        mos_clean=obj.get("mos_clean"),
        planted_best=bool(obj.get("planted_best", False)),
    )


def load_dataset(path, check_canonical_order: bool = True) -> Dataset:
    """Read a JSONL dataset; raises DatasetError naming line and field."""
    path = Path(path)
    lines = path.read_text().splitlines()
    if not lines or not lines[0].strip():
        return Dataset(grid_spec=GridSpec(), images=[])
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise DatasetError(f"line 1: invalid JSON header: {exc}") from exc
    if header.get("format_version") != FORMAT_VERSION:
        raise DatasetError(f"line 1: unsupported format_version {header.get('format_version')}")
    spec = GridSpec.from_dict(header["grid_spec"])
    rule = None
    if "synthetic_rule" in header:
        r = header["synthetic_rule"]
        rule = SyntheticRule(a=r["a"], b=r["b"], noise_sigma=r["noise_sigma"], seed=r["seed"])
    images = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DatasetError(f"line {lineno}: invalid JSON: {exc}") from exc
        for key in ("id", "h", "w", "crops"):
            if key not in obj:
                raise DatasetError(f"line {lineno}: missing field '{key}'")
        dims = ImageDims(obj["h"], obj["w"])
        crops = [_parse_crop(c, lineno, i) for i, c in enumerate(obj["crops"])]
        img = AnnotatedImage(
            id=obj["id"], dims=dims, crops=crops,
            image_path=obj.get("image_path"),
        )
        if check_canonical_order and crops:
            expected = enumerate_candidates(dims, spec)
            got = [c.crop for c in crops]
            if got != expected:
                raise DatasetError(
                    f"line {lineno}: crops do not match canonical candidate "
                    f"order for the stored grid_spec"
                )
        images.append(img)
    return Dataset(grid_spec=spec, images=images, synthetic_rule=rule)


def consistency_fraction(dataset: Dataset, threshold: float = 1.0) -> float:
    """Fraction of rated crops whose rating standard deviation is below
    the threshold."""
    stds = [c.rating_std for img in dataset.images for c in img.crops if c.ratings]
    if not stds:
        raise DatasetError("dataset has no rated crops")
    return float(np.mean([s < threshold for s in stds]))


def split_dataset(dataset: Dataset, test_count: int, seed: int) -> DatasetSplit:
    """Seed-deterministic uniform train/test split over image ids."""
    ids = [img.id for img in dataset.images]
    if test_count >= len(ids) or test_count < 0:
        raise DatasetError(f"test_count {test_count} out of range for {len(ids)} images")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(ids))
    test = sorted(ids[i] for i in perm[:test_count])
    train = sorted(ids[i] for i in perm[test_count:])
    return DatasetSplit(train_ids=train, test_ids=test)


def select_images(dataset: Dataset, ids: list[str]) -> list[AnnotatedImage]:
    by_id = {img.id: img for img in dataset.images}
    return [by_id[i] for i in ids]


# ---------------------------------------------------------------------------
# synthetic planted-rule data

def _smooth_field(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    """Low-frequency random background in roughly [0.05, 0.45]."""
    coarse = rng.random((6, 6, 3))
    ys = np.linspace(0, 5, h)
    xs = np.linspace(0, 5, w)
    y0 = np.clip(ys.astype(int), 0, 4)
    x0 = np.clip(xs.astype(int), 0, 4)
    ty = (ys - y0)[:, None, None]
    tx = (xs - x0)[None, :, None]
    up = (
        coarse[y0][:, x0] * (1 - ty) * (1 - tx)
        + coarse[y0][:, x0 + 1] * (1 - ty) * tx
        + coarse[y0 + 1][:, x0] * ty * (1 - tx)
        + coarse[y0 + 1][:, x0 + 1] * ty * tx
    )
    return 0.05 + 0.40 * up


def planted_mos_clean(crop: CropBox, subject: tuple[float, float, float, float],
                      a: float, b: float) -> float:
    """Noise-free rule value for one crop.

    subject = (top, left, bottom, right) in continuous pixel coords.
    Penalizes distance of the subject center from the crop's nearest
    rule-of-thirds point (normalized by crop diagonal) and the fraction
    of subject area falling outside the crop.
    """
    sx1, sy1, sx2, sy2 = subject
    cx = (sx1 + sx2) / 2.0
    cy = (sy1 + sy2) / 2.0
    h = crop.height
    w = crop.width
    thirds = [
        (crop.x1 + h / 3.0, crop.y1 + w / 3.0),
        (crop.x1 + h / 3.0, crop.y1 + 2.0 * w / 3.0),
        (crop.x1 + 2.0 * h / 3.0, crop.y1 + w / 3.0),
        (crop.x1 + 2.0 * h / 3.0, crop.y1 + 2.0 * w / 3.0),
    ]
    d = min(math.hypot(cx - tx, cy - ty) for tx, ty in thirds)
    d_norm = d / math.hypot(h, w)
    inter_h = max(0.0, min(sx2, crop.x2) - max(sx1, crop.x1))
    inter_w = max(0.0, min(sy2, crop.y2) - max(sy1, crop.y1))
    subject_area = (sx2 - sx1) * (sy2 - sy1)
    frac_out = 1.0 - (inter_h * inter_w) / subject_area
    return float(np.clip(5.0 - a * d_norm - b * frac_out, 1.0, 5.0))


def generate_synthetic(count: int, spec: GridSpec | None = None, rule_seed: int = 0,
                       a: float = 9.0, b: float = 6.0, noise_sigma: float = 0.1,
                       dims_sampler=None) -> Dataset:
    """Smooth random images with one bright subject rectangle, every
    candidate crop scored by a known closed-form rule plus seeded noise.

    The noise-free rule argmax is flagged planted_best per image, and
    the rule coefficients go into the dataset header so any consumer can
    recompute the rule independently.
    """
    if count < 1:
        raise DatasetError("count must be >= 1")
    spec = spec or GridSpec()
    rng = np.random.default_rng(rule_seed)

    def default_dims(r: np.random.Generator) -> ImageDims:
        h = int(r.integers(256, 340))
        w = int(h * r.uniform(0.8, 1.25))
        return ImageDims(h, max(w, spec.N))

    dims_sampler = dims_sampler or default_dims
    images = []
    for i in range(count):
        dims = dims_sampler(rng)
        pixels = _smooth_field(rng, dims.H, dims.W)
        # subject spans 18-32% of each axis, fully inside with margin
        sh = dims.H * rng.uniform(0.18, 0.32)
        sw = dims.W * rng.uniform(0.18, 0.32)
        sx1 = rng.uniform(0.05 * dims.H, 0.95 * dims.H - sh)
        sy1 = rng.uniform(0.05 * dims.W, 0.95 * dims.W - sw)
        subject = (sx1, sy1, sx1 + sh, sy1 + sw)
        color = rng.uniform(0.80, 1.0, size=3)
        r0, c0 = int(sx1), int(sy1)
        r1, c1 = int(math.ceil(sx1 + sh)), int(math.ceil(sy1 + sw))
        pixels[r0:r1, c0:c1] = color
        crops = []
        best_idx, best_clean = 0, -np.inf
        for idx, box in enumerate(enumerate_candidates(dims, spec)):
            clean = planted_mos_clean(box, subject, a, b)
            noisy = float(np.clip(clean + rng.normal(0.0, noise_sigma), 1.0, 5.0))
            crops.append(CropAnnotation(crop=box, mos=noisy, mos_clean=clean))
            if clean > best_clean:
                best_idx, best_clean = idx, clean
        if crops:
            crops[best_idx].planted_best = True
        images.append(AnnotatedImage(id=f"synth-{i:04d}", dims=dims, crops=crops,
                                     pixels=pixels))
    return Dataset(grid_spec=spec, images=images,
                   synthetic_rule=SyntheticRule(a=a, b=b, noise_sigma=noise_sigma,
                                                seed=rule_seed))
