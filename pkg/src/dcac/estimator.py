"""scikit-learn style wrappers over the training loop and augmentation.

Both accept image batches shaped ``[N, 3, H, W]`` with values in [0, 1].
"""

from __future__ import annotations

import numpy as np
from scipy.special import expit
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.multiclass import unique_labels
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .backbone import Network
from .datapipe.augment import AugmentConfig, augment, preprocess, sample_rng
from .datapipe.images import ImageSource
from .datapipe.manifest import Manifest, SampleRecord
from .errors import ShapeError
from .evaluation import predict_logits
from .training import PhaseConfig, TrainConfig, train_two_phase


def check_images(X, y=None):
    """Validate an image batch (and optional labels); returns float64 arrays."""
    if y is None:
        X = check_array(X, allow_nd=True, dtype=np.float64, ensure_all_finite=True)
    else:
        X, y = check_X_y(X, y, allow_nd=True, dtype=np.float64, ensure_all_finite=True)
    if X.ndim != 4 or X.shape[1] != 3:
        raise ShapeError(f"expected images shaped [N, 3, H, W], got {X.shape}", dim="channels")
    if X.min() < 0.0 or X.max() > 1.0:
        raise ValueError("image values must lie in [0, 1]")
    return X if y is None else (X, y)


class DCACClassifier(ClassifierMixin, BaseEstimator):
    """Binary classifier trained with the two-phase head-then-full schedule.

    Parameters mirror :class:`TrainConfig`; ``network`` is a preset name,
    a config dict, or a JSON path.
    """

    def __init__(self, network="tiny", image_size=32, phase1_epochs=10, phase1_lr=1e-2,
                 phase2_epochs=10, phase2_lr=1e-3, batch_size=8, weight_decay=0.01,
                 augment=False, seed=0):
        self.network = network
        self.image_size = image_size
        self.phase1_epochs = phase1_epochs
        self.phase1_lr = phase1_lr
        self.phase2_epochs = phase2_epochs
        self.phase2_lr = phase2_lr
        self.batch_size = batch_size
        self.weight_decay = weight_decay
        self.augment = augment
        self.seed = seed

    def _train_config(self) -> TrainConfig:
        return TrainConfig(phase1=PhaseConfig(self.phase1_epochs, self.phase1_lr),
                           phase2=PhaseConfig(self.phase2_epochs, self.phase2_lr),
                           weight_decay=self.weight_decay, batch_size=self.batch_size,
                           seed=self.seed, image_size=self.image_size, augment=self.augment,
                           network=self.network)

    def fit(self, X, y):
        X, y = check_images(X, y)
        self.classes_ = unique_labels(y)
        if len(self.classes_) != 2:
            raise ValueError(f"need exactly two classes, got {list(self.classes_)}")
        target = (y == self.classes_[1]).astype(int)
        names = [f"x{i:06d}" for i in range(len(X))]
        manifest = Manifest(SampleRecord(n, n, int(t)) for n, t in zip(names, target))
        cfg = self._train_config()
        self.network_ = Network(cfg.network_config(), seed=self.seed)
        self.checkpoint_, self.log_ = train_two_phase(
            self.network_, manifest, None, cfg, ImageSource(images=dict(zip(names, X))))
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        return self

    def decision_function(self, X):
        check_is_fitted(self, "network_")
        X = check_images(X)
        self.network_.eval()
        return predict_logits(self.network_, [preprocess(x, self.image_size) for x in X])

    def predict_proba(self, X):
        p = expit(self.decision_function(X))
        return np.stack([1.0 - p, p], axis=1)

    def predict(self, X):
        check_is_fitted(self, "classes_")
        return self.classes_[(self.decision_function(X) > 0).astype(int)]


class ImageAugmenter(TransformerMixin, BaseEstimator):
    """Stateless random augmentation; image ``i`` uses substream ``(seed, i)``."""

    def __init__(self, output_size=160, max_rotation_deg=90.0, max_translate_frac=0.10,
                 scale_range=(0.8, 1.2), max_shear_deg=10.0, jitter_strength=0.5, hflip_p=0.5,
                 vflip_p=0.5, crop_area_range=(0.6, 1.0), crop_aspect_range=(0.75, 1.333),
                 seed=0):
        self.output_size = output_size
        self.max_rotation_deg = max_rotation_deg
        self.max_translate_frac = max_translate_frac
        self.scale_range = scale_range
        self.max_shear_deg = max_shear_deg
        self.jitter_strength = jitter_strength
        self.hflip_p = hflip_p
        self.vflip_p = vflip_p
        self.crop_area_range = crop_area_range
        self.crop_aspect_range = crop_aspect_range
        self.seed = seed

    def _config(self) -> AugmentConfig:
        params = self.get_params()
        params.pop("seed")
        for key in ("scale_range", "crop_area_range", "crop_aspect_range"):
            params[key] = tuple(params[key])
        return AugmentConfig(**params)

    def fit(self, X, y=None):
        X = check_images(X)
        self.config_ = self._config()
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        return self

    def transform(self, X):
        check_is_fitted(self, "config_")
        X = check_images(X)
        return np.stack([augment(x, self.config_, sample_rng(self.seed, i)) for i, x in enumerate(X)])
