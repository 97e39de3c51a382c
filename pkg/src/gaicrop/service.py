"""HTTP annotation service: serve images and candidate crops, accept
1-5 ratings, recompute MOS incrementally, and expose model rankings for
review.

Persistence is an append-only JSONL event log next to the dataset file
(<data>.events.jsonl). Every rating is fsynced before the response is
sent, so an acknowledged rating survives a process kill. Cached MOS
values are audited against a full log replay every 100 events.
"""

from __future__ import annotations

import json
import os
import threading
import time
from pathlib import Path

import numpy as np
from fastapi import Body, FastAPI, Query
from fastapi.responses import FileResponse, JSONResponse, PlainTextResponse
from fastapi.staticfiles import StaticFiles

from . import model
from .dataset import (
    AnnotatedImage,
    CropAnnotation,
    Dataset,
    compute_mos,
    load_dataset,
    save_dataset,
)
from .metrics import MetricError, ScorePair, srcc

AUDIT_EVERY = 100


class ServiceError(RuntimeError):
    pass


class Store:
    """Dataset snapshot plus an append-only rating event log.

    All writes go through a single lock; reads copy out plain data so
    request handlers never hold the lock while serializing."""

    def __init__(self, data_path, checkpoint=None):
        self.data_path = Path(data_path)
        self.dataset = load_dataset(self.data_path)
        self.images = {img.id: img for img in self.dataset.images}
        self.log_path = Path(str(self.data_path) + ".events.jsonl")
        self.lock = threading.Lock()
        # ratings[(image_id, crop_index)] = {rater: score}, insertion-ordered
        self.ratings: dict[tuple[str, int], dict[str, int]] = {}
        self.event_count = 0
        self.checkpoint_path = checkpoint
        self._model = None
        self._rankings_cache: dict[str, dict] = {}
        if self.log_path.exists():
            for line in self.log_path.read_text().splitlines():
                if line.strip():
                    self._apply(json.loads(line))
        self._log_file = open(self.log_path, "a", encoding="utf-8")

    def _apply(self, event: dict):
        key = (event["image_id"], event["crop_index"])
        self.ratings.setdefault(key, {})[event["rater"]] = event["score"]
        self.event_count += 1

    def crop_stats(self, image_id: str, idx: int):
        scores = list(self.ratings.get((image_id, idx), {}).values())
        if not scores:
            return None
        mos, std = compute_mos(scores)
        return {"mos": mos, "std": std, "count": len(scores)}

    def add_rating(self, image_id: str, idx: int, rater: str, score: int) -> dict:
        with self.lock:
            img = self.images.get(image_id)
            if img is None or not 0 <= idx < len(img.crops):
                raise KeyError(image_id)
            if rater in self.ratings.get((image_id, idx), {}):
                raise ServiceError(f"rater {rater!r} already rated crop {idx}")
            event = {"image_id": image_id, "crop_index": idx, "rater": rater,
                     "score": score, "ts": time.time()}
            # durable before acknowledged
            self._log_file.write(json.dumps(event) + "\n")
            self._log_file.flush()
            os.fsync(self._log_file.fileno())
            self._apply(event)
            if self.event_count % AUDIT_EVERY == 0:
                self._audit()
            return self.crop_stats(image_id, idx)

    def _audit(self):
        """Replay the log and compare against the in-memory state."""
        replayed: dict[tuple[str, int], dict[str, int]] = {}
        self._log_file.flush()
        for line in self.log_path.read_text().splitlines():
            if line.strip():
                e = json.loads(line)
                replayed.setdefault((e["image_id"], e["crop_index"]), {})[e["rater"]] = e["score"]
        if replayed != self.ratings:
            raise ServiceError("event log and cached ratings diverged")

    def progress(self, img: AnnotatedImage) -> float:
        if not img.crops:
            return 0.0
        rated = sum(1 for i in range(len(img.crops))
                    if self.ratings.get((img.id, i)))
        return rated / len(img.crops)

    def snapshot(self) -> Dataset:
        """Consistent copy with current ratings folded into the crops."""
        with self.lock:
            images = []
            for img in self.dataset.images:
                crops = []
                for i, c in enumerate(img.crops):
                    scores = list(self.ratings.get((img.id, i), {}).values())
                    crops.append(CropAnnotation(crop=c.crop, ratings=scores))
                images.append(AnnotatedImage(id=img.id, dims=img.dims,
                                             crops=crops,
                                             image_path=img.image_path))
            return Dataset(grid_spec=self.dataset.grid_spec, images=images)

    def model_scores(self, image_id: str, checkpoint) -> np.ndarray:
        ck = str(checkpoint or self.checkpoint_path or "")
        if not ck:
            raise ServiceError("no checkpoint loaded")
        if self._model is None or self._model[0] != ck:
            self._model = (ck, model.load_checkpoint(ck))
            self._rankings_cache = {}
        cached = self._rankings_cache.get(image_id)
        if cached is None:
            params, config, mean, std = self._model[1]
            img = self.images[image_id]
            px = img.load_pixels(base_dir=self.data_path.parent)
            cached = model.predict_scores_mos(px, [c.crop for c in img.crops],
                                              params, config, mean, std)
            self._rankings_cache[image_id] = cached
        return cached


def build_app(data_path, checkpoint=None, static_dir=None) -> FastAPI:
    store = Store(data_path, checkpoint=checkpoint)
    app = FastAPI(title="gaicrop annotation service")
    app.state.store = store

    def not_found(what):
        return JSONResponse({"error": f"unknown {what}"}, status_code=404)

    @app.get("/api/healthz")
    def healthz():
        return PlainTextResponse("ok")

    @app.get("/api/images")
    def list_images():
        return [
            {
                "id": img.id, "h": img.dims.H, "w": img.dims.W,
                "n_candidates": len(img.crops),
                "rating_progress": store.progress(img),
            }
            for img in sorted(store.images.values(), key=lambda i: i.id)
        ]

    @app.get("/api/images/{image_id}/candidates")
    def candidates(image_id: str):
        img = store.images.get(image_id)
        if img is None:
            return not_found("image")
        out = []
        for i, c in enumerate(img.crops):
            entry = {
                "index": i,
                "x1": c.crop.x1, "y1": c.crop.y1,
                "x2": c.crop.x2, "y2": c.crop.y2,
                "aspect_ratio": c.crop.aspect_ratio,
            }
            stats = store.crop_stats(image_id, i)
            if stats:
                entry.update(stats)
            else:
                entry["count"] = 0
            out.append(entry)
        return out

    @app.get("/api/images/{image_id}/file")
    def image_file(image_id: str):
        img = store.images.get(image_id)
        if img is None or img.image_path is None:
            return not_found("image file")
        return FileResponse(store.data_path.parent / img.image_path)

    @app.get("/api/images/{image_id}/next")
    def next_unrated(image_id: str, rater: str):
        img = store.images.get(image_id)
        if img is None:
            return not_found("image")
        # canonical order is aspect-ratio ascending already
        for i in range(len(img.crops)):
            if rater not in store.ratings.get((image_id, i), {}):
                return {"crop_index": i}
        return {"crop_index": None}

    @app.post("/api/images/{image_id}/crops/{idx}/ratings")
    def rate(image_id: str, idx: int, payload: dict = Body(...)):
        rater = payload.get("rater")
        score = payload.get("score")
        if not isinstance(rater, str) or not rater:
            return JSONResponse({"error": "rater must be a non-empty string"},
                                status_code=422)
        if not isinstance(score, int) or isinstance(score, bool) or not 1 <= score <= 5:
            return JSONResponse({"error": f"score {score!r} outside [1..5]"},
                                status_code=422)
        try:
            return store.add_rating(image_id, idx, rater, score)
        except KeyError:
            return not_found("image or crop")
        except ServiceError as exc:
            return JSONResponse({"error": str(exc)}, status_code=409)

    @app.get("/api/images/{image_id}/rankings")
    def rankings(image_id: str, checkpoint: str | None = Query(default=None)):
        img = store.images.get(image_id)
        if img is None:
            return not_found("image")
        try:
            scores = store.model_scores(image_id, checkpoint)
        except ServiceError as exc:
            return JSONResponse({"error": str(exc)}, status_code=409)
        entries = []
        for i, c in enumerate(img.crops):
            e = {"index": i, "score": float(scores[i]),
                 "x1": c.crop.x1, "y1": c.crop.y1,
                 "x2": c.crop.x2, "y2": c.crop.y2}
            stats = store.crop_stats(image_id, i)
            if stats:
                e["mos"] = stats["mos"]
            entries.append(e)
        # ties keep canonical candidate order
        entries.sort(key=lambda e: (-e["score"], e["index"]))
        rated = [(e["mos"], e["score"]) for e in entries if "mos" in e]
        corr = None
        if len(rated) >= 2:
            g = np.array([m for m, _ in rated])
            p = np.array([s for _, s in rated])
            try:
                corr = srcc(ScorePair(g=g, p=p))
            except MetricError:
                corr = None
        return {"srcc": corr, "crops": entries}

    @app.post("/api/export")
    def export(payload: dict = Body(default={})):
        out = Path(payload.get("path") or str(store.data_path) + ".export.jsonl")
        snap = store.snapshot()
        save_dataset(snap, out)
        load_dataset(out)  # round-trip sanity before reporting success
        n_events = sum(len(c.ratings) for img in snap.images for c in img.crops)
        return {"path": str(out), "images": len(snap.images), "ratings": n_events}

    if static_dir:
        app.mount("/", StaticFiles(directory=static_dir, html=True), name="ui")
    return app
