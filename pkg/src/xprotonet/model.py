"""Occurrence-map prototype network and its functional building blocks.

Tensors follow the torch channel-first layout: feature maps are ``(B, D, H, W)``,
occurrence maps ``(B, C, K, H, W)``, similarities ``(B, C, K)``.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn

from .config import ModelConfig
from .exceptions import ConfigError, ProjectionError, PruningError

logger = logging.getLogger(__name__)

NORM_EPS = 1e-12


def set_deterministic(seed: int = 0) -> None:
    """Seed every RNG torch uses and force deterministic kernels."""
    torch.manual_seed(seed)
    np.random.seed(seed % (2**32))
    torch.use_deterministic_algorithms(True)


# ---------------------------------------------------------------------------
# functional pieces


def pool_feature(feature_map: torch.Tensor, occurrence_map: torch.Tensor) -> torch.Tensor:
    """Occurrence-weighted sum of feature vectors over the spatial grid.

    ``feature_map`` is ``(..., D, H, W)`` and ``occurrence_map`` is ``(..., H, W)``;
    leading dimensions broadcast. No area normalization is applied.
    """
    feature_map = torch.as_tensor(feature_map)
    occurrence_map = torch.as_tensor(occurrence_map, dtype=feature_map.dtype)
    if feature_map.shape[-2:] != occurrence_map.shape[-2:]:
        raise ConfigError(
            f"grid mismatch: feature map {tuple(feature_map.shape[-2:])} vs "
            f"occurrence map {tuple(occurrence_map.shape[-2:])}"
        )
    return (occurrence_map.unsqueeze(-3) * feature_map).sum(dim=(-2, -1))


def bbox_pooled_feature(feature_map, occurrence_map, bbox_mask) -> torch.Tensor:
    """:func:`pool_feature` restricted to grid cells inside ``bbox_mask``."""
    bbox_mask = torch.as_tensor(bbox_mask)
    if bbox_mask.ndim == 2 and not bool(bbox_mask.any()):
        raise ConfigError("bbox mask is empty; a box must claim at least one grid cell")
    occurrence_map = torch.as_tensor(occurrence_map)
    return pool_feature(feature_map, occurrence_map * bbox_mask.to(occurrence_map.dtype))


def cosine_similarity(f: torch.Tensor, p: torch.Tensor) -> torch.Tensor:
    """Cosine similarity along the last axis.

    A zero-norm ``f`` yields similarity 0 instead of NaN; see :func:`zero_norm_mask`.
    """
    f = torch.as_tensor(f)
    p = torch.as_tensor(p, dtype=f.dtype)
    num = (f * p).sum(-1)
    den = (f.norm(dim=-1) * p.norm(dim=-1)).clamp_min(NORM_EPS)
    return num / den


def floored_cosine(f: torch.Tensor, p: torch.Tensor, floor: float) -> torch.Tensor:
    """Cosine similarity with ``||f||`` replaced by ``sqrt(||f||^2 + floor^2)``.

    Similarity fades to 0 as the pooled vector vanishes, so shrinking every
    occurrence map uniformly is no longer free for the optimizer.
    """
    if floor <= 0:
        return cosine_similarity(f, p)
    num = (f * p).sum(-1)
    fn = (f.pow(2).sum(-1) + floor**2).sqrt()
    return num / (fn * p.norm(dim=-1)).clamp_min(NORM_EPS)


def zero_norm_mask(f: torch.Tensor, tol: float = NORM_EPS) -> torch.Tensor:
    return torch.as_tensor(f).norm(dim=-1) <= tol


def predict_class_score(similarities, weights, active=None) -> torch.Tensor:
    """Sigmoid of the active-masked weighted similarity sum over the last axis."""
    similarities = torch.as_tensor(similarities)
    if not similarities.is_floating_point():
        similarities = similarities.double()
    weights = torch.as_tensor(weights, dtype=similarities.dtype)
    if active is None:
        active = torch.ones_like(weights, dtype=torch.bool)
    active = torch.as_tensor(active, dtype=torch.bool)
    if not bool(active.any(-1).all()):
        raise PruningError("class score requested for a class with no active prototype")
    logits = (similarities * weights * active.to(similarities.dtype)).sum(-1)
    return torch.sigmoid(logits)


# ---------------------------------------------------------------------------
# backbones


def _small_cnn(in_channels: int, channels: tuple[int, ...]) -> nn.Sequential:
    # batch norm keeps the output scale fixed, as in the usual pretrained backbones;
    # per-sample norms would rescale noise-only images to look like signal
    layers: list[nn.Module] = []
    c_in = in_channels
    for c_out in channels:
        layers += [
            nn.Conv2d(c_in, c_out, 3, padding=1, bias=False),
            nn.BatchNorm2d(c_out),
            nn.ReLU(inplace=True),
            nn.Conv2d(c_out, c_out, 3, stride=2, padding=1, bias=False),
            nn.BatchNorm2d(c_out),
            nn.ReLU(inplace=True),
        ]
        c_in = c_out
    return nn.Sequential(*layers)


def _tiny_cnn(in_channels: int, channels: tuple[int, ...]) -> nn.Sequential:
    c1, c2 = (tuple(channels) + (8, 8))[:2]
    return nn.Sequential(
        nn.Conv2d(in_channels, c1, 3, stride=2, padding=1),
        nn.ReLU(),
        nn.Conv2d(c1, c2, 3, stride=2, padding=1),
        nn.ReLU(),
    )


def _resnet(name: str, in_channels: int) -> tuple[nn.Sequential, int]:
    import torchvision

    net = getattr(torchvision.models, name)(weights=None)
    if in_channels != 3:
        net.conv1 = nn.Conv2d(in_channels, 64, 7, stride=2, padding=3, bias=False)
    out = net.fc.in_features
    return nn.Sequential(*list(net.children())[:-2]), out


def build_backbone(cfg: ModelConfig) -> tuple[nn.Module, int]:
    if cfg.backbone_id == "small_cnn":
        return _small_cnn(cfg.in_channels, cfg.backbone_channels), cfg.backbone_channels[-1]
    if cfg.backbone_id == "tiny_cnn":
        net = _tiny_cnn(cfg.in_channels, cfg.backbone_channels)
        return net, net[2].out_channels
    return _resnet(cfg.backbone_id, cfg.in_channels)


def _module(c_in: int, hidden: int, c_out: int) -> nn.Sequential:
    return nn.Sequential(nn.Conv2d(c_in, hidden, 1), nn.ReLU(), nn.Conv2d(hidden, c_out, 1))


# ---------------------------------------------------------------------------
# model


@dataclass
class ModelOutput:
    probabilities: torch.Tensor  # (B, C)
    logits: torch.Tensor  # (B, C)
    similarities: torch.Tensor  # (B, C, K)
    pooled_features: torch.Tensor  # (B, C, K, D')
    occurrence_maps: torch.Tensor | None  # (B, C, K, H, W)
    feature_map: torch.Tensor  # (B, D, H, W)
    zero_norm: torch.Tensor  # (B, C, K) bool


@dataclass
class PrototypeRecord:
    """Where a projected prototype came from."""

    image_id: str
    class_index: int
    proto_index: int
    similarity: float
    occurrence_map: np.ndarray
    pooled: np.ndarray
    bbox_mask: np.ndarray | None = None


@dataclass
class PrototypeBank:
    vectors: np.ndarray
    active: np.ndarray
    provenance: dict[tuple[int, int], PrototypeRecord] = field(default_factory=dict)


class PrototypeNet(nn.Module):
    """Shared backbone, feature module, prototype layer and per-class heads.

    Subclasses decide how the feature map is turned into one vector per
    prototype (:meth:`prototype_features`).
    """

    variant = "base"
    has_occurrence = False

    def __init__(self, config: ModelConfig, class_names: list[str] | None = None):
        super().__init__()
        self.config = config
        self.class_names = list(class_names) if class_names else [f"class_{i}" for i in range(config.num_classes)]
        if len(self.class_names) != config.num_classes:
            raise ConfigError("class_names length does not match num_classes")
        C, K, D = config.num_classes, config.prototypes_per_class, config.feature_dim
        self.backbone, self.backbone_out = build_backbone(config)
        self.feature_module = _module(self.backbone_out, config.module_hidden, D)
        self.prototypes = nn.Parameter(torch.rand(C, K, self.prototype_dim))
        self.head = nn.Parameter(torch.ones(C, K))
        self.register_buffer("active", torch.ones(C, K, dtype=torch.bool))
        self.provenance: dict[tuple[int, int], PrototypeRecord] = {}
        self.pruned = False

    @property
    def prototype_dim(self) -> int:
        return self.config.feature_dim

    def similarity(self, pooled: torch.Tensor, prototypes: torch.Tensor) -> torch.Tensor:
        return floored_cosine(pooled, prototypes, self.config.norm_floor)

    # -- parameter groups used by the stage freezing logic
    def backbone_parameters(self):
        return list(self.backbone.parameters())

    def module_parameters(self):
        return list(self.feature_module.parameters())

    # -- forward pieces
    def _check_input(self, x: torch.Tensor) -> None:
        if x.ndim != 4 or x.shape[1] != self.config.in_channels or tuple(x.shape[-2:]) != self.config.input_size:
            raise ConfigError(
                f"expected input (B, {self.config.in_channels}, {self.config.input_size[0]}, "
                f"{self.config.input_size[1]}), got {tuple(x.shape)}"
            )

    def backbone_features(self, x: torch.Tensor) -> torch.Tensor:
        self._check_input(x)
        return self.backbone(x)

    def extract_feature_map(self, x: torch.Tensor) -> torch.Tensor:
        return self.feature_module(self.backbone_features(x))

    def prototype_features(self, feature_map, backbone_out, bbox_masks=None):
        """Return ``(pooled (B,C,K,D'), maps (B,C,K,H,W) | None, sims (B,C,K))``."""
        raise NotImplementedError

    def class_logits(self, similarities: torch.Tensor) -> torch.Tensor:
        return (similarities * self.head * self.active.to(similarities.dtype)).sum(-1)

    def forward(self, x: torch.Tensor, bbox_masks: torch.Tensor | None = None) -> ModelOutput:
        b = self.backbone_features(x)
        fmap = self.feature_module(b)
        pooled, maps, sims = self.prototype_features(fmap, b, bbox_masks)
        logits = self.class_logits(sims)
        return ModelOutput(
            probabilities=torch.sigmoid(logits),
            logits=logits,
            similarities=sims,
            pooled_features=pooled,
            occurrence_maps=maps,
            feature_map=fmap,
            zero_norm=zero_norm_mask(pooled),
        )

    def bank(self) -> PrototypeBank:
        return PrototypeBank(
            vectors=self.prototypes.detach().cpu().numpy().copy(),
            active=self.active.cpu().numpy().copy(),
            provenance=dict(self.provenance),
        )


class XProtoNet(PrototypeNet):
    """Prototype network whose feature vectors are pooled under learned occurrence maps."""

    variant = "xprotonet"
    has_occurrence = True

    def __init__(self, config: ModelConfig, class_names=None):
        super().__init__(config, class_names)
        C, K = config.num_classes, config.prototypes_per_class
        self.occurrence_module = nn.Sequential(
            _module(self.backbone_out, config.module_hidden, C * K), nn.Sigmoid()
        )

    def module_parameters(self):
        return list(self.feature_module.parameters()) + list(self.occurrence_module.parameters())

    def predict_occurrence_maps(self, backbone_out: torch.Tensor) -> torch.Tensor:
        m = self.occurrence_module(backbone_out)
        B, _, H, W = m.shape
        return m.view(B, self.config.num_classes, self.config.prototypes_per_class, H, W)

    def prototype_features(self, feature_map, backbone_out, bbox_masks=None):
        maps = self.predict_occurrence_maps(backbone_out)
        weights = maps if bbox_masks is None else maps * bbox_masks.to(maps.dtype).unsqueeze(2)
        pooled = torch.einsum("bckhw,bdhw->bckd", weights, feature_map)
        sims = self.similarity(pooled, self.prototypes.unsqueeze(0))
        return pooled, maps, sims


def build_model(config: ModelConfig, class_names=None) -> PrototypeNet:
    from .baselines import GAPProtoNet, PatchProtoNet

    torch.manual_seed(config.seed)
    cls = {"xprotonet": XProtoNet, "patch": PatchProtoNet, "gap": GAPProtoNet}[config.variant]
    return cls(config, class_names)


# ---------------------------------------------------------------------------
# projection and pruning


@torch.no_grad()
def _candidate_vectors(model: PrototypeNet, images, bbox_masks, batch_size):
    pooled_all, maps_all = [], []
    for start in range(0, len(images), batch_size):
        x = images[start:start + batch_size]
        masks = None if bbox_masks is None else bbox_masks[start:start + batch_size]
        fmap_b = model.backbone_features(x)
        fmap = model.feature_module(fmap_b)
        pooled, maps, _ = model.prototype_features(fmap, fmap_b, masks)
        if maps is None:
            maps = model.footprint_maps(fmap, fmap_b)
        if masks is not None:
            maps = maps * masks.to(maps.dtype).unsqueeze(2)
        pooled_all.append(pooled)
        maps_all.append(maps)
    return torch.cat(pooled_all), torch.cat(maps_all)


@torch.no_grad()
def calibrate_batch_norm(model: PrototypeNet, images: torch.Tensor, batch_size: int = 64,
                         refresh: bool = False) -> int:
    """Set backbone batch-norm running statistics from one exact pass over ``images``.

    By default only layers that have never seen data are touched: frozen stages
    run the backbone in eval mode, so its statistics must describe the data
    before the first of them, as a pretrained backbone's would. With
    ``refresh=True`` every layer is recomputed, which replaces the lagging
    momentum averages gathered on augmented batches while the weights moved.
    Returns the number of layers set.
    """
    layers = [m for m in model.backbone.modules()
              if isinstance(m, nn.modules.batchnorm._BatchNorm) and m.track_running_stats
              and (refresh or int(m.num_batches_tracked) == 0)]
    if not layers or len(images) == 0:
        return 0
    was_training = model.backbone.training
    momenta = [m.momentum for m in layers]
    for m in layers:
        m.reset_running_stats()
        m.momentum = None  # cumulative average over the whole pass
    model.backbone.train()
    for start in range(0, len(images), batch_size):
        model.backbone_features(images[start:start + batch_size])
    for m, momentum in zip(layers, momenta):
        m.momentum = momentum
    model.backbone.train(was_training)
    return len(layers)


@torch.no_grad()
def project_prototypes(
    model: PrototypeNet,
    images: torch.Tensor,
    labels,
    image_ids: list[str] | None = None,
    bbox_masks: torch.Tensor | None = None,
    batch_size: int = 64,
    require_all_classes: bool = False,
) -> PrototypeBank:
    """Replace each active prototype by its most similar pooled vector from positives.

    ``bbox_masks`` (``(N, C, H, W)``), when given, restricts pooling to each
    class's box and candidates to samples that carry a box for that class.
    Ties go to the lowest candidate index.
    """
    if len(images) == 0:
        raise ProjectionError("projection candidate set is empty")
    was_training = model.training
    model.eval()
    labels = torch.as_tensor(np.asarray(labels)).bool()
    if image_ids is None:
        image_ids = [str(i) for i in range(len(images))]
    pooled, maps = _candidate_vectors(model, images, bbox_masks, batch_size)
    C, K = model.active.shape
    new = model.prototypes.detach().clone()
    provenance = dict(model.provenance)
    for c in range(C):
        eligible = labels[:, c]
        if bbox_masks is not None:
            eligible = eligible & bbox_masks[:, c].flatten(1).any(1)
        idx = torch.nonzero(eligible).flatten()
        if len(idx) == 0:
            msg = f"no eligible positive sample for class {model.class_names[c]!r}"
            if require_all_classes:
                raise ProjectionError(msg)
            warnings.warn(msg + "; its prototypes are left unchanged", stacklevel=2)
            continue
        for k in range(K):
            if not model.active[c, k]:
                continue
            cand = pooled[idx, c, k]
            sims = cosine_similarity(cand, model.prototypes[c, k].unsqueeze(0))
            best = int(torch.argmax(sims))  # first max on ties
            i = int(idx[best])
            new[c, k] = cand[best]
            provenance[(c, k)] = PrototypeRecord(
                image_id=str(image_ids[i]),
                class_index=c,
                proto_index=k,
                similarity=float(sims[best]),
                occurrence_map=maps[i, c, k].cpu().numpy().copy(),
                pooled=cand[best].cpu().numpy().copy(),
                bbox_mask=None if bbox_masks is None else bbox_masks[i, c].cpu().numpy().copy(),
            )
    model.prototypes.data.copy_(new)
    model.provenance = provenance
    model.train(was_training)
    return model.bank()


@torch.no_grad()
def prune_prototypes(model: PrototypeNet) -> PrototypeBank:
    """Deactivate prototypes with strictly negative head weight."""
    keep = model.active & (model.head >= 0)
    dead = [model.class_names[c] for c in range(keep.shape[0]) if not bool(keep[c].any())]
    if dead:
        raise PruningError(f"pruning would remove every prototype of class(es): {', '.join(dead)}")
    removed = int((model.active & ~keep).sum())
    model.active.copy_(keep)
    model.pruned = True
    logger.info("pruned %d prototype(s)", removed)
    return model.bank()
