"""scikit-learn style wrappers around alignment, augmentation and embedding training."""

from __future__ import annotations

from pathlib import Path

import numpy as np
import torch
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .augmentation import AugmentationPolicy, RandomStream, augmented_sample, calibrate_policy
from .geometry import ALIGNED_SIZE, AlignedFace, LandmarkSet, Transform2D, align_frontal, alignment_error
from .nets import NetConfig, extract_embedding
from .training import EmbedTrainConfig, FaceTensors, train_embeddings


def _check_images(X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float32)
    if X.ndim == 3:
        X = X[None]
    if X.ndim != 4 or X.shape[1:] != (ALIGNED_SIZE, ALIGNED_SIZE, 3):
        raise ValueError(f"expected aligned faces of shape (n, 112, 112, 3), got {X.shape}")
    if not np.isfinite(X).all():
        raise ValueError("images contain non-finite values")
    return X


def _check_pairs(X) -> list[tuple[np.ndarray, LandmarkSet]]:
    out = []
    for item in X:
        if len(item) != 2 or not isinstance(item[1], LandmarkSet):
            raise ValueError("each sample must be an (image, LandmarkSet) pair")
        out.append((np.asarray(item[0]), item[1]))
    if not out:
        raise ValueError("no samples")
    return out


class FaceAligner(TransformerMixin, BaseEstimator):
    """Stateless: maps ``(image, landmarks)`` samples to 112x112 aligned faces."""

    def fit(self, X, y=None):
        _check_pairs(X)
        self.n_features_in_ = 1
        return self

    def transform(self, X) -> np.ndarray:
        return np.stack([align_frontal(img, lms).image for img, lms in _check_pairs(X)])

    def alignment_errors(self, X) -> np.ndarray:
        return np.array([alignment_error(lms) for _, lms in _check_pairs(X)])


def _as_faces(X: np.ndarray) -> list[AlignedFace]:
    return [AlignedFace(img, Transform2D.identity()) for img in X]


class DefrontalizationAugmenter(TransformerMixin, BaseEstimator):
    """``fit(errors)`` calibrates the gate; ``transform(images, errors=...)`` augments."""

    def __init__(self, model=None, target_fraction: float = 0.2, apply_probability: float = 1.0, random_state: int = 0):
        self.model = model
        self.target_fraction = target_fraction
        self.apply_probability = apply_probability
        self.random_state = random_state

    def fit(self, X, y=None):
        errors = np.asarray(X, dtype=np.float64).ravel()
        self.policy_, self.report_ = calibrate_policy(
            errors, AugmentationPolicy(None, self.apply_probability, self.target_fraction, self.random_state)
        )
        self.threshold_ = self.policy_.error_threshold
        return self

    def transform(self, X, errors=None, offset: int = 0) -> np.ndarray:
        check_is_fitted(self, "policy_")
        X = _check_images(X)
        if errors is None:
            raise ValueError("per-image alignment errors are required")
        errors = np.asarray(errors, dtype=np.float64).ravel()
        if len(errors) != len(X):
            raise ValueError("one error per image required")
        stream = RandomStream(self.random_state, 0)
        out = []
        for i, face in enumerate(_as_faces(X)):
            img, _, _ = augmented_sample(face, float(errors[i]), None, self.policy_, self.model, stream, offset + i)
            out.append(img)
        return np.stack(out)


class FaceEmbedder(TransformerMixin, BaseEstimator):
    """Margin-softmax embedding model over aligned faces."""

    def __init__(self, net_config: NetConfig | None = None, train_config: EmbedTrainConfig | None = None, defront_model=None):
        self.net_config = net_config
        self.train_config = train_config
        self.defront_model = defront_model

    def fit(self, X, y, errors=None):
        X = _check_images(X)
        y = np.asarray(y)
        if len(y) != len(X):
            raise ValueError("one label per image required")
        cfg = self.train_config or EmbedTrainConfig(policy=AugmentationPolicy.disabled())
        self.classes_, labels = np.unique(y, return_inverse=True)
        errs = np.zeros(len(X)) if errors is None else np.asarray(errors, dtype=np.float64)
        data = FaceTensors(_as_faces(X), labels, errs, [Path(f"mem://{i}") for i in range(len(X))], [str(c) for c in self.classes_])
        result = train_embeddings(data, cfg, self.defront_model, self.net_config or NetConfig())
        self.backbone_ = result.backbone
        self.head_ = result.head
        self.augmented_fractions_ = result.augmented_fractions
        return self

    @torch.no_grad()
    def transform(self, X) -> np.ndarray:
        check_is_fitted(self, "backbone_")
        X = _check_images(X)
        self.backbone_.eval()
        x = torch.from_numpy(np.ascontiguousarray(X.transpose(0, 3, 1, 2)))
        return extract_embedding(self.backbone_, x).numpy()

    def predict(self, X) -> np.ndarray:
        """Class with the highest cosine to the learned class centre."""
        emb = self.transform(X)
        w = torch.nn.functional.normalize(self.head_.weight.detach(), dim=1).numpy()
        return self.classes_[np.argmax(emb @ w.T, axis=1)]
