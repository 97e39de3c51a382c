"""scikit-learn style estimator wrapping the crop scoring model.

CropScorer.fit takes a list of AnnotatedImage (or a Dataset); predict
returns MOS-unit scores for an image's candidate crops. get_params /
set_params come from sklearn's BaseEstimator so the model composes with
the usual tooling (cloning, grid search over config fields, pipelines).
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .dataset import AnnotatedImage, Dataset
from .grid import CropBox, GridSpec, ImageDims, enumerate_candidates
from .metrics import ScorePair, mean_srcc
from . import model as _model


class CropScorer(BaseEstimator):
    """Trainable candidate-crop scorer with a fit/predict surface."""

    def __init__(self, backbone_channels=32, backbone_stride=16, align_size=9,
                 cdim=8, fc_width=128, input_short_side=256, delta=1.0,
                 lr=1e-4, epochs=40, crops_per_batch=64, seed=0):
        self.backbone_channels = backbone_channels
        self.backbone_stride = backbone_stride
        self.align_size = align_size
        self.cdim = cdim
        self.fc_width = fc_width
        self.input_short_side = input_short_side
        self.delta = delta
        self.lr = lr
        self.epochs = epochs
        self.crops_per_batch = crops_per_batch
        self.seed = seed

    def _config(self) -> _model.ModelConfig:
        return _model.ModelConfig(
            backbone_channels=self.backbone_channels,
            backbone_stride=self.backbone_stride,
            align_size=self.align_size,
            cdim=self.cdim,
            fc_width=self.fc_width,
            input_short_side=self.input_short_side,
            delta=self.delta,
            lr=self.lr,
            epochs=self.epochs,
            crops_per_batch=self.crops_per_batch,
        )

    def fit(self, X, y=None, progress=None):
        """X: list of AnnotatedImage or a Dataset; y is ignored (targets
        are the per-crop MOS annotations)."""
        images = X.images if isinstance(X, Dataset) else list(X)
        config = self._config()
        params, log = _model.train(images, config, seed=self.seed, progress=progress)
        self.params_ = params
        self.config_ = config
        self.mos_mean_ = log.mos_mean
        self.mos_std_ = log.mos_std
        self.train_log_ = log
        return self

    def _check_fitted(self):
        if not hasattr(self, "params_"):
            raise NotFittedError("CropScorer is not fitted; call fit or load")

    def predict(self, image: np.ndarray, candidates: list[CropBox] | None = None,
                grid_spec: GridSpec | None = None) -> np.ndarray:
        """MOS-unit scores for an image's candidate crops, in candidate
        order. Candidates default to the grid-anchor enumeration."""
        self._check_fitted()
        if candidates is None:
            dims = ImageDims(image.shape[0], image.shape[1])
            candidates = enumerate_candidates(dims, grid_spec)
        return _model.predict_scores_mos(
            image, candidates, self.params_, self.config_,
            self.mos_mean_, self.mos_std_,
        )

    def score(self, X, y=None) -> float:
        """Mean per-image rank correlation between annotated MOS and
        predictions over a list of AnnotatedImage."""
        self._check_fitted()
        images = X.images if isinstance(X, Dataset) else list(X)
        pairs = []
        for img in images:
            pred = self.predict(img.load_pixels(), [c.crop for c in img.crops])
            pairs.append(ScorePair(g=img.mos_vector(clean=True), p=pred))
        return mean_srcc(pairs)

    def save(self, path):
        self._check_fitted()
        _model.save_checkpoint(path, self.params_, self.config_,
                               self.mos_mean_, self.mos_std_)

    @classmethod
    def load(cls, path) -> "CropScorer":
        params, config, mos_mean, mos_std = _model.load_checkpoint(path)
        est = cls(**config.to_dict())
        est.params_ = params
        est.config_ = config
        est.mos_mean_ = mos_mean
        est.mos_std_ = mos_std
        return est
