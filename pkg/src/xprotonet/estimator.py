"""scikit-learn style wrapper around the staged prototype network trainer."""

from __future__ import annotations

import dataclasses
from pathlib import Path

import numpy as np
import torch
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from .config import LossConfig, ModelConfig, TrainConfig, desk_scale
from .data import ImageSet, box_pixel_mask
from .exceptions import ConfigError, DataError
from .explain import evaluate_scores, predict_proba
from .model import PrototypeNet, build_model
from .trainer import Trainer
from .transforms import resize_image


def check_images(X, channels: int | None = None) -> torch.Tensor:
    """Coerce ``(N, H, W)`` or ``(N, C, H, W)`` image data to a float32 tensor."""
    arr = torch.as_tensor(np.asarray(X, dtype=np.float32))
    if arr.ndim == 3:
        arr = arr[:, None]
    if arr.ndim != 4:
        raise DataError(f"images must be (N, H, W) or (N, C, H, W), got shape {tuple(arr.shape)}")
    if len(arr) == 0:
        raise DataError("no images given")
    if not torch.isfinite(arr).all():
        raise DataError("images contain NaN or infinite values")
    if channels is not None and arr.shape[1] != channels:
        if arr.shape[1] == 1:
            arr = arr.expand(-1, channels, -1, -1).contiguous()
        else:
            raise DataError(f"expected {channels} channel(s), got {arr.shape[1]}")
    return arr


def check_multilabel(Y, n_samples: int | None = None) -> np.ndarray:
    """Binary indicator matrix ``(N, C)``; a 1-D vector is read as a single class."""
    y = np.asarray(Y)
    if y.ndim == 1:
        y = y[:, None]
    if y.ndim != 2:
        raise DataError(f"labels must be (N, C), got shape {y.shape}")
    if not np.isin(y, (0, 1)).all():
        raise DataError("labels must be binary indicators")
    if n_samples is not None and len(y) != n_samples:
        raise DataError(f"{len(y)} label rows for {n_samples} images")
    return y.astype(np.int64)


class XProtoNetClassifier(ClassifierMixin, BaseEstimator):
    """Multi-label prototype classifier.

    ``model_config``, ``loss_config`` and ``train_config`` default to the
    desk-scale settings; ``num_classes`` and ``input_size`` are taken from the
    data at fit time. Images are standardized with training-set channel
    statistics and resized to the configured input size when they differ.

    ``fit`` accepts optional per-sample ``boxes`` (lists of ``(class, (x, y, w, h))``
    in input pixels) and an ``annotated`` flag vector for prior-condition training.
    """

    def __init__(self, variant: str = "xprotonet", model_config: ModelConfig | None = None,
                 loss_config: LossConfig | None = None, train_config: TrainConfig | None = None,
                 class_names=None, validation_fraction: float = 0.1, random_state: int = 0,
                 log_path: str | None = None, checkpoint_dir: str | None = None):
        self.variant = variant
        self.model_config = model_config
        self.loss_config = loss_config
        self.train_config = train_config
        self.class_names = class_names
        self.validation_fraction = validation_fraction
        self.random_state = random_state
        self.log_path = log_path
        self.checkpoint_dir = checkpoint_dir

    # -- helpers
    def _configs(self, n_classes: int, channels: int):
        desk = desk_scale()
        mc = dataclasses.replace(self.model_config or desk.model, num_classes=n_classes, in_channels=channels,
                                 variant=self.variant, seed=self.random_state)
        tc = dataclasses.replace(self.train_config or desk.train, seed=self.random_state)
        return mc, self.loss_config or desk.loss, tc

    def _prepare(self, X) -> torch.Tensor:
        x = check_images(X, self.model_.config.in_channels)
        size = self.model_.config.input_size
        if tuple(x.shape[-2:]) != tuple(size):
            x = resize_image(x, size)
        mean = torch.tensor(self.mean_, dtype=torch.float32).view(1, -1, 1, 1)
        std = torch.tensor(self.std_, dtype=torch.float32).view(1, -1, 1, 1)
        return (x - mean) / std

    def _image_set(self, x, y, ids, boxes, annotated, src_size) -> ImageSet:
        n, C = y.shape
        size = tuple(x.shape[-2:])
        masks = torch.zeros(n, C, *size, dtype=torch.bool)
        scaled_boxes = []
        for i in range(n):
            scaled = []
            for c, (bx, by, bw, bh) in (boxes[i] if boxes is not None else []):
                if not y[i, c]:
                    raise DataError(f"sample {i}: box for class {c} which is not labelled")
                sx, sy = size[1] / src_size[1], size[0] / src_size[0]
                b = (bx * sx, by * sy, bw * sx, bh * sy)
                masks[i, c] |= torch.from_numpy(box_pixel_mask(b, size))
                scaled.append((c, b))
            scaled_boxes.append(scaled)
        ann = torch.zeros(n, dtype=torch.bool) if annotated is None else torch.as_tensor(
            np.asarray(annotated, dtype=bool))
        return ImageSet(x, torch.as_tensor(y, dtype=torch.float32), list(ids), ann, masks, scaled_boxes)

    # -- estimator API
    def fit(self, X, Y, boxes=None, annotated=None, X_val=None, Y_val=None):
        x_raw = check_images(X)
        y = check_multilabel(Y, len(x_raw))
        n, C = y.shape
        if boxes is not None and len(boxes) != n:
            raise DataError(f"{len(boxes)} box lists for {n} images")
        if annotated is not None and len(annotated) != n:
            raise DataError(f"{len(annotated)} annotation flags for {n} images")
        mc, lc, tc = self._configs(C, x_raw.shape[1])
        self.mean_ = tuple(float(v) for v in x_raw.mean((0, 2, 3)))
        self.std_ = tuple(max(float(v), 1e-8) for v in x_raw.std((0, 2, 3)))
        names = self.class_names if self.class_names is not None else [f"class_{c}" for c in range(C)]
        if len(names) != C:
            raise ConfigError(f"{len(names)} class names for {C} label columns")
        self.model_ = build_model(mc, names)
        x = self._prepare(x_raw)
        ids = [f"train_{i}" for i in range(n)]
        full = self._image_set(x, y, ids, boxes, annotated, tuple(x_raw.shape[-2:]))
        if X_val is not None:
            train = full
            y_val = check_multilabel(Y_val)
            xv = self._prepare(X_val)
            val = self._image_set(xv, y_val, [f"val_{i}" for i in range(len(xv))], None, None, tuple(xv.shape[-2:]))
        else:
            if not 0 < self.validation_fraction < 1:
                raise ConfigError("validation_fraction must lie in (0, 1) when no validation data is given")
            order = np.random.default_rng(self.random_state).permutation(n)
            n_val = max(1, int(round(self.validation_fraction * n)))
            val, train = full.subset(order[:n_val]), full.subset(order[n_val:])
        trainer = Trainer(self.model_, train, val, tc, lc, log_path=self.log_path,
                          checkpoint_dir=self.checkpoint_dir)
        trainer.run()
        self.history_ = trainer.state.history
        self.best_val_auc_ = trainer.state.best_val_auc
        self.classes_ = np.arange(C)
        self.n_features_in_ = int(np.prod(x_raw.shape[1:]))
        return self

    def predict_proba(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        return predict_proba(self.model_, self._prepare(X))

    def predict(self, X) -> np.ndarray:
        return (self.predict_proba(X) >= 0.5).astype(np.int64)

    @torch.no_grad()
    def transform(self, X) -> np.ndarray:
        """Prototype similarities, ``(N, C * K)``; pruned prototypes read 0."""
        check_is_fitted(self, "model_")
        model: PrototypeNet = self.model_
        was_training = model.training
        model.eval()
        x = self._prepare(X)
        sims = torch.cat([model(x[i:i + 128]).similarities for i in range(0, len(x), 128)])
        model.train(was_training)
        sims = sims * model.active.to(sims.dtype)
        return sims.reshape(len(x), -1).double().numpy()

    def score(self, X, Y, sample_weight=None) -> float:
        """Mean per-class AUC over classes where it is defined."""
        if sample_weight is not None:
            raise ConfigError("sample weights are not supported")
        y = check_multilabel(Y)
        res = evaluate_scores(self.predict_proba(X), y, self.model_.class_names)
        return float("nan") if res.mean_auc is None else res.mean_auc

    def save(self, path) -> Path:
        """Write the fitted network as a checkpoint directory, with the input statistics."""
        from .checkpoint import save_checkpoint

        check_is_fitted(self, "model_")
        return save_checkpoint(path, self.model_, hyperparameters={"mean": self.mean_, "std": self.std_})
