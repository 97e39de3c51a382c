"""Command-line entry point tying the library together.

Subcommands: gen (candidate enumeration), synth (planted-rule data),
train, eval, crop, bench, serve. Every subcommand is a thin wrapper over
library calls: identical flags and seeds give identical outputs. Logs go
to stderr; data goes to files or stdout.

Exit codes: 0 success, 2 validation error, 3 environment error (missing
or unreadable files, busy port), 4 internal error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import imgio, model
from .dataset import (
    DatasetError,
    generate_synthetic,
    load_dataset,
    save_dataset,
    select_images,
    split_dataset,
)
from .grid import (
    CropBox,
    GridSpec,
    GridSpecError,
    ImageDims,
    candidates_to_jsonl,
    enumerate_candidates,
)
from .imgio import ImageIOError
from .metrics import MetricError, ScorePair, evaluate
from .model import ModelConfig, ModelError

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_ENVIRONMENT = 3
EXIT_INTERNAL = 4

log = logging.getLogger("gaicrop")

_GRID_KEYS = set(GridSpec().to_dict())
_MODEL_KEYS = set(ModelConfig().to_dict())


class CliError(ValueError):
    """Flag combination or config file problem."""


def load_config(path) -> tuple[GridSpec, ModelConfig]:
    """Single JSON document mixing GridSpec and ModelConfig field names."""
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise CliError(f"config {path}: invalid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise CliError(f"config {path}: expected a JSON object")
    unknown = set(doc) - _GRID_KEYS - _MODEL_KEYS
    if unknown:
        raise CliError(f"config {path}: unknown keys {sorted(unknown)}")
    grid_doc = GridSpec().to_dict()
    grid_doc.update({k: v for k, v in doc.items() if k in _GRID_KEYS})
    model_doc = ModelConfig().to_dict()
    model_doc.update({k: v for k, v in doc.items() if k in _MODEL_KEYS})
    return GridSpec.from_dict(grid_doc), ModelConfig.from_dict(model_doc)


def _configs(args) -> tuple[GridSpec, ModelConfig]:
    if getattr(args, "config", None):
        return load_config(args.config)
    return GridSpec(), ModelConfig()


def _require_file(path, flag: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise CliError(f"{flag} path does not exist: {p}")
    return p


def _write_or_print(text: str, out: str | None):
    if out and out != "-":
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


# ---------------------------------------------------------------------------
# subcommands

def cmd_gen(args) -> int:
    spec, _ = _configs(args)
    if args.image:
        px = imgio.load_image(args.image)
        dims = ImageDims(px.shape[0], px.shape[1])
    elif args.image_h and args.image_w:
        dims = ImageDims(args.image_h, args.image_w)
    else:
        raise CliError("gen needs --image or both --image-h and --image-w")
    text = candidates_to_jsonl(dims, spec)
    _write_or_print(text, args.out)
    log.info("enumerated %d candidates for %dx%d", text.count("\n"), dims.H, dims.W)
    return EXIT_OK


def cmd_synth(args) -> int:
    spec, _ = _configs(args)
    ds = generate_synthetic(args.count, spec=spec, rule_seed=args.seed,
                            a=args.a, b=args.b, noise_sigma=args.noise_sigma)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_dataset(ds, out, images_dir=out.parent / (out.stem + "-images"))
    log.info("wrote %d synthetic images to %s", args.count, out)
    return EXIT_OK


def cmd_train(args) -> int:
    _, config = _configs(args)
    if args.epochs is not None:
        doc = config.to_dict()
        doc["epochs"] = args.epochs
        config = ModelConfig.from_dict(doc)
    ds = load_dataset(_require_file(args.data, "--data"))
    images = ds.images
    if args.test_count:
        split = split_dataset(ds, args.test_count, seed=args.seed)
        images = select_images(ds, split.train_ids)
        log.info("split: %d train / %d test", len(split.train_ids), len(split.test_ids))
    base = Path(args.data).parent

    def progress(epoch, loss):
        log.info("epoch %d/%d loss %.6f", epoch + 1, config.epochs, loss)

    for img in images:
        img.load_pixels(base_dir=base)
    params, tlog = model.train(images, config, seed=args.seed, progress=progress)
    model.save_checkpoint(args.out_checkpoint, params, config,
                          tlog.mos_mean, tlog.mos_std)
    log.info("checkpoint written to %s", args.out_checkpoint)
    return EXIT_OK


def _load_predictions(path, images) -> dict[str, np.ndarray]:
    """Prediction JSONL: one {"id", "scores"} object per line."""
    preds = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        obj = json.loads(line)
        if "id" not in obj or "scores" not in obj:
            raise CliError(f"predictions line {lineno}: need 'id' and 'scores'")
        preds[obj["id"]] = np.asarray(obj["scores"], dtype=float)
    missing = [img.id for img in images if img.id not in preds]
    if missing:
        raise CliError(f"predictions missing image ids {missing[:5]}")
    return preds


def eval_pairs(images, predict, jobs: int = 1) -> list[ScorePair]:
    """Per-image groundtruth/prediction pairs; prediction calls may run
    in parallel but pairing order always follows the image list."""
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            preds = list(pool.map(predict, images))
    else:
        preds = [predict(img) for img in images]
    return [ScorePair(g=img.mos_vector(clean=True), p=p)
            for img, p in zip(images, preds)]


def cmd_eval(args) -> int:
    ds = load_dataset(_require_file(args.data, "--data"))
    images = ds.images
    if args.test_count:
        split = split_dataset(ds, args.test_count, seed=args.seed)
        images = select_images(ds, split.test_ids)
    if not images:
        raise CliError("no images to evaluate")
    if args.predictions:
        preds = _load_predictions(args.predictions, images)
        pairs = eval_pairs(images, lambda img: preds[img.id], jobs=1)
    elif args.checkpoint:
        params, config, mean, std = model.load_checkpoint(_require_file(args.checkpoint, "--checkpoint"))
        base = Path(args.data).parent

        def predict(img):
            boxes = [c.crop for c in img.crops]
            return model.predict_scores_mos(img.load_pixels(base_dir=base), boxes,
                                            params, config, mean, std)

        for img in images:
            img.load_pixels(base_dir=base)
        pairs = eval_pairs(images, predict, jobs=args.jobs)
    else:
        raise CliError("eval needs --checkpoint or --predictions")
    report = evaluate(pairs)
    _write_or_print(report.to_json() + "\n", args.out_report)
    log.info("\n%s", report.to_table())
    return EXIT_OK


def _parse_aspect(text: str) -> float:
    try:
        w, h = text.split(":")
        ratio = float(w) / float(h)
    except (ValueError, ZeroDivisionError) as exc:
        raise CliError(f"bad --aspect {text!r}, expected W:H") from exc
    if ratio <= 0:
        raise CliError(f"aspect ratio must be positive, got {text!r}")
    return ratio


def _crop_pixels(px: np.ndarray, box: CropBox) -> np.ndarray:
    return px[box.x1 - 1:box.x2, box.y1 - 1:box.y2]


def cmd_crop(args) -> int:
    params, config, mean, std = model.load_checkpoint(_require_file(args.checkpoint, "--checkpoint"))
    px = imgio.load_image(_require_file(args.image, "--image"))
    dims = ImageDims(px.shape[0], px.shape[1])
    spec, _ = _configs(args)
    candidates = enumerate_candidates(dims, spec)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if args.aspect:
        ratio = _parse_aspect(args.aspect)
        # aspect_ratio of a CropBox is W/H already
        picks = [model.predict_best_for_aspect(px, candidates, ratio, params, config)]
    else:
        picks = model.predict_top_k(px, candidates, args.top_k, params, config)
    records = []
    for rank, (box, score) in enumerate(picks):
        name = f"crop_{rank}.png"
        imgio.save_image(out_dir / name, _crop_pixels(px, box))
        records.append({
            "rank": rank, "file": name, "score_mos": score * std + mean,
            "x1": box.x1, "y1": box.y1, "x2": box.x2, "y2": box.y2,
        })
    (out_dir / "crops.json").write_text(json.dumps(records, indent=2) + "\n")
    log.info("wrote %d crops to %s", len(records), out_dir)
    return EXIT_OK


def cmd_bench(args) -> int:
    params, config, _, _ = model.load_checkpoint(_require_file(args.checkpoint, "--checkpoint"))
    paths = sorted(p for p in Path(args.image_dir).iterdir()
                   if p.suffix.lower() in (".png", ".ppm"))
    if not paths:
        raise CliError(f"no .png/.ppm images in {args.image_dir}")
    images = [imgio.load_image(p) for p in paths]
    timings: dict[str, float] = {}
    n_scored = 0
    model.reset_feature_pass_count()
    for _ in range(args.repeat):
        for px in images:
            dims = ImageDims(px.shape[0], px.shape[1])
            model.score_crops(px, enumerate_candidates(dims), params, config,
                              timings=timings)
            n_scored += 1
    passes = model.feature_pass_count()
    if passes != n_scored:
        raise RuntimeError(f"{passes} backbone passes for {n_scored} images")
    total = timings["features_s"] + timings["head_s"]
    report = {
        "images": n_scored,
        "images_per_s": n_scored / total,
        "features_s": timings["features_s"],
        "head_s": timings["head_s"],
        "head_fraction": timings["head_s"] / total,
        "feature_passes": passes,
    }
    _write_or_print(json.dumps(report, indent=2) + "\n", args.out)
    return EXIT_OK


def cmd_serve(args) -> int:
    import uvicorn

    from .service import build_app

    app = build_app(args.data, checkpoint=args.checkpoint,
                    static_dir=args.static_dir)
    try:
        uvicorn.run(app, host=args.host, port=args.port, log_level="warning")
    except SystemExit as exc:
        # uvicorn exits 1 when it cannot bind
        raise OSError(f"could not serve on port {args.port}") from exc
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gaicrop")
    parser.add_argument("--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_config(p):
        p.add_argument("--config", help="JSON config overriding grid/model defaults")

    p = sub.add_parser("gen", help="enumerate candidate crops as JSONL")
    p.add_argument("--image-h", type=int)
    p.add_argument("--image-w", type=int)
    p.add_argument("--image", help="read dims from an image file instead")
    p.add_argument("--out", default="-")
    add_config(p)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("synth", help="generate a planted-rule synthetic dataset")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--a", type=float, default=9.0)
    p.add_argument("--b", type=float, default=6.0)
    p.add_argument("--noise-sigma", type=float, default=0.1)
    add_config(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a scorer on an annotated dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--out-checkpoint", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epochs", type=int, help="override config epochs")
    p.add_argument("--test-count", type=int, default=0,
                   help="hold out this many images from training")
    add_config(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint or predictions file")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--predictions", help="JSONL of {id, scores} per image")
    p.add_argument("--out-report", default="-")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--test-count", type=int, default=0,
                   help="evaluate only the held-out split")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("crop", help="write best crops of one image")
    p.add_argument("--image", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--top-k", type=int, default=1)
    p.add_argument("--aspect", help="W:H; return the best crop near this ratio")
    p.add_argument("--out-dir", required=True)
    add_config(p)
    p.set_defaults(func=cmd_crop)

    p = sub.add_parser("bench", help="throughput report over an image directory")
    p.add_argument("--image-dir", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--repeat", type=int, default=1)
    p.add_argument("--out", default="-")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("serve", help="run the annotation service")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--static-dir", help="directory of UI assets to serve at /")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=None)
    p.set_defaults(func=cmd_serve)
    return parser


VALIDATION_ERRORS = (CliError, GridSpecError, DatasetError, MetricError,
                     ModelError, ImageIOError)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(stream=sys.stderr,
                        level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(message)s")
    if args.command == "serve" and args.port is None:
        import os
        args.port = int(os.environ.get("GAIC_PORT", "8000"))
    try:
        return args.func(args)
    except VALIDATION_ERRORS as exc:
        log.error("%s", exc)
        return EXIT_VALIDATION
    except (FileNotFoundError, PermissionError, OSError) as exc:
        log.error("%s", exc)
        return EXIT_ENVIRONMENT
    except KeyboardInterrupt:
        return EXIT_OK
    except Exception as exc:  # pragma: no cover - defensive
        log.exception("internal error: %s", exc)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
