"""End-to-end helpers shared by the command line and the acceptance suite."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .config import RunConfig
from .data import (
    NIH_CLASSES,
    ImageSet,
    Sample,
    SplitSpec,
    SyntheticSpec,
    build_image_set,
    channel_stats,
    generate_synthetic,
    load_nih_index,
    load_synthetic_dataset,
    quantize,
    rasterize_box,
    split,
)
from .exceptions import ConfigError
from .model import PrototypeNet, build_model
from .trainer import Trainer, TrainState


@dataclass
class PreparedData:
    train: ImageSet
    val: ImageSet
    test: ImageSet
    class_names: tuple[str, ...]
    splits: dict[str, list[Sample]]
    mean: tuple[float, ...]
    std: tuple[float, ...]


def synthetic_spec(cfg: RunConfig) -> SyntheticSpec:
    d = cfg.data
    return SyntheticSpec(image_size=d.image_size, noise=d.noise, annotated_fraction=d.annotated_fraction,
                         seed=d.seed)


def _synthetic_splits(cfg: RunConfig):
    d = cfg.data
    n = d.n_train + d.n_val + d.n_test
    if d.root is not None:
        samples, names = load_synthetic_dataset(d.root)
        if len(samples) < n:
            raise ConfigError(f"data.root: {d.root} holds {len(samples)} images, config asks for {n}")
    else:
        spec = synthetic_spec(cfg)
        samples, names = quantize(generate_synthetic(spec, n)), spec.class_names
    # every synthetic image is its own patient, so consecutive blocks are patient-disjoint
    parts = {"train": samples[:d.n_train], "val": samples[d.n_train:d.n_train + d.n_val],
             "test": samples[d.n_train + d.n_val:n]}
    return parts, tuple(names)


def _nih_splits(cfg: RunConfig):
    d = cfg.data
    if d.labels_csv is None:
        raise ConfigError("data.labels_csv: required for the nih source")
    samples = load_nih_index(d.labels_csv, d.bbox_csv, d.images_dir)
    test_ids = None
    if d.test_ids is not None:
        test_ids = tuple(Path(d.test_ids).read_text().split())
    spec = SplitSpec(fractions=d.fractions, mode=d.split_mode, seed=d.seed, fold=d.fold, test_ids=test_ids)
    return split(samples, spec), NIH_CLASSES


def prepare_data(cfg: RunConfig) -> PreparedData:
    """Load, split and tensorize the configured dataset."""
    parts, names = _synthetic_splits(cfg) if cfg.data.source == "synthetic" else _nih_splits(cfg)
    if cfg.model.num_classes != len(names):
        raise ConfigError(f"model.num_classes: {cfg.model.num_classes} but the dataset has {len(names)} classes")
    channels = cfg.model.in_channels
    if cfg.data.mean is not None and cfg.data.std is not None:
        mean, std = tuple(cfg.data.mean), tuple(cfg.data.std)
    else:
        mean, std = channel_stats(parts["train"], channels)
    if len(mean) != channels or len(std) != channels:
        raise ConfigError(f"data.mean/std: need {channels} value(s)")
    size = cfg.model.input_size
    sets = {k: build_image_set(v, len(names), size, mean, std) for k, v in parts.items()}
    return PreparedData(sets["train"], sets["val"], sets["test"], names, parts, mean, std)


def build_configured_model(cfg: RunConfig, class_names) -> PrototypeNet:
    return build_model(cfg.model, class_names)


def train_model(cfg: RunConfig, data: PreparedData, out_dir=None, prior: bool = False,
                model: PrototypeNet | None = None) -> tuple[PrototypeNet, TrainState]:
    """Run the staged training; logs and checkpoints go under ``out_dir`` when given."""
    model = model if model is not None else build_configured_model(cfg, data.class_names)
    tc = dataclasses.replace(cfg.train, prior_condition=prior)
    out = Path(out_dir) if out_dir is not None else None
    trainer = Trainer(model, data.train, data.val, tc, cfg.loss,
                      log_path=None if out is None else out / "metrics.jsonl",
                      checkpoint_dir=None if out is None else out / "checkpoint")
    return trainer.run()


@torch.no_grad()
def localization_hits(model: PrototypeNet, images: ImageSet, batch_size: int = 128):
    """Per positive ``(image, class)`` with a box: does the top prototype's map peak inside it?

    Returns ``(grid_hits, pixel_hits)``. The grid check takes the arg-max cell of
    the occurrence map and tests membership in the box's grid rasterization; the
    pixel check tests the arg-max of the bilinearly upsampled map against the
    box's pixel mask.
    """
    from .explain import top_prototype_peak

    if not model.has_occurrence:
        raise ConfigError("localization needs occurrence maps")
    was_training = model.training
    model.eval()
    size = tuple(images.images.shape[-2:])
    grid = model.config.feature_grid
    grid_hits, pixel_hits = [], []
    for start in range(0, len(images), batch_size):
        out = model(images.images[start:start + batch_size])
        for j in range(len(out.similarities)):
            i = start + j
            for c, box in images.boxes[i]:
                if not images.labels[i, c]:
                    continue
                k, (r, col) = top_prototype_peak(model, out.occurrence_maps[j], out.similarities[j], c, size)
                cell = np.unravel_index(int(torch.argmax(out.occurrence_maps[j, c, k])), grid)
                grid_hits.append(bool(rasterize_box(box, size, grid)[cell]))
                pixel_hits.append(bool(rasterize_box(box, size, size)[r, col]))
    model.train(was_training)
    return np.asarray(grid_hits), np.asarray(pixel_hits)
