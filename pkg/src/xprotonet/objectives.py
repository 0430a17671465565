"""Loss terms: count-balanced focal classification, cluster/separation,
transformation consistency and occurrence sparsity, plus their weighted sum."""

from __future__ import annotations

from dataclasses import dataclass, field

import torch

from .config import LossConfig
from .exceptions import ConfigError
from .model import ModelOutput, PrototypeNet
from .transforms import CenterResize

PROB_EPS = 1e-7


@dataclass
class BatchLabels:
    y: torch.Tensor  # (B, C) in {0, 1}

    def __post_init__(self):
        self.y = torch.as_tensor(self.y)
        if self.y.ndim != 2:
            raise ConfigError(f"labels must be (B, C), got {tuple(self.y.shape)}")

    @property
    def n_pos(self) -> torch.Tensor:
        return self.y.sum(0)

    @property
    def n_neg(self) -> torch.Tensor:
        return (1 - self.y).sum(0)


def _labels(labels) -> BatchLabels:
    return labels if isinstance(labels, BatchLabels) else BatchLabels(labels)


def _inv_count(count: torch.Tensor) -> torch.Tensor:
    # zero-count sides contribute nothing
    return torch.where(count > 0, 1.0 / count.clamp_min(1), torch.zeros_like(count))


def classification_loss(p: torch.Tensor, labels, gamma: float = 2.0, per_class: bool = False):
    """Focal-style loss where each class side is normalized by its batch count."""
    labels = _labels(labels)
    p = torch.as_tensor(p)
    y = labels.y.to(p.dtype)
    if p.shape != y.shape:
        raise ConfigError(f"probabilities {tuple(p.shape)} vs labels {tuple(y.shape)}")
    p = p.clamp(PROB_EPS, 1 - PROB_EPS)
    pos = ((1 - p) ** gamma * y * torch.log(p)).sum(0) * _inv_count(y.sum(0))
    neg = (p**gamma * (1 - y) * torch.log(1 - p)).sum(0) * _inv_count((1 - y).sum(0))
    per = -(pos + neg)
    return per if per_class else per.sum()


def cluster_separation_losses(
    similarities: torch.Tensor,
    labels,
    active: torch.Tensor | None = None,
    sample_weights: torch.Tensor | None = None,
    class_mask: torch.Tensor | None = None,
):
    """Return ``(clst, sep)`` from the best per-class similarity of each sample.

    Positives contribute ``-max_k s`` and negatives ``+max_k s``, each side
    scaled by one over its batch count. ``sample_weights`` rescales individual
    samples; ``class_mask`` drops classes entirely.
    """
    labels = _labels(labels)
    s = torch.as_tensor(similarities)
    y = labels.y.to(s.dtype)
    if active is not None:
        s = s.masked_fill(~active.bool().unsqueeze(0), float("-inf"))
    best = s.max(-1).values  # (B, C)
    w = torch.ones(len(y), dtype=s.dtype) if sample_weights is None else torch.as_tensor(sample_weights, dtype=s.dtype)
    w = w.unsqueeze(1)
    clst = -(w * y * best).sum(0) * _inv_count(y.sum(0))
    sep = (w * (1 - y) * best).sum(0) * _inv_count((1 - y).sum(0))
    if class_mask is not None:
        keep = torch.as_tensor(class_mask, dtype=torch.bool)
        clst, sep = clst[keep], sep[keep]
    return clst.sum(), sep.sum()


def _batch_reduce(per_item: torch.Tensor, item_ndim: int, x: torch.Tensor) -> torch.Tensor:
    # a single item is summed; a batch of items is summed per item then averaged
    if x.ndim == item_ndim:
        return per_item.sum()
    return per_item.flatten(1).sum(1).mean()


def transformation_loss(maps_of_transformed_input: torch.Tensor, transformed_maps: torch.Tensor) -> torch.Tensor:
    """L1 distance between ``M(A(x))`` and ``A(M(x))`` for ``(C,K,H,W)`` or batched maps."""
    a, b = torch.as_tensor(maps_of_transformed_input), torch.as_tensor(transformed_maps)
    if a.shape != b.shape:
        raise ConfigError(f"map shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")
    return _batch_reduce((a - b).abs(), 4, a)


def occurrence_loss(maps: torch.Tensor, trans_term=0.0, bbox_mask: torch.Tensor | None = None) -> torch.Tensor:
    """``trans_term`` plus the L1 mass of the maps, outside ``bbox_mask`` when given.

    ``bbox_mask`` is ``(H, W)`` for a single ``(C,K,H,W)`` item, or ``(B, C, H, W)``
    per sample and class (all-zero rows mean "no box": the whole map counts).
    """
    maps = torch.as_tensor(maps)
    weight = maps
    if bbox_mask is not None:
        m = torch.as_tensor(bbox_mask).to(maps.dtype)
        if m.ndim == 2:
            outside = 1 - m
        else:
            outside = (1 - m).unsqueeze(-3)  # broadcast over prototypes
        weight = maps * outside
    return trans_term + _batch_reduce(weight, 4, maps)


@dataclass
class LossBreakdown:
    cls: torch.Tensor
    clst: torch.Tensor
    sep: torch.Tensor
    occur: torch.Tensor
    trans: torch.Tensor
    total: torch.Tensor
    lambda_clst: float
    lambda_sep: float
    lambda_occur: float
    per_class_cls: list[float] = field(default_factory=list)

    def record(self) -> dict[str, float]:
        out = {k: float(torch.as_tensor(getattr(self, k)).detach()) for k in ("cls", "clst", "sep", "occur", "trans", "total")}
        out["per_class_cls"] = [float(v) for v in self.per_class_cls]
        return out

    def recomputed_total(self) -> float:
        v = self.record()
        return v["cls"] + self.lambda_clst * v["clst"] + self.lambda_sep * v["sep"] + self.lambda_occur * v["occur"]


def total_loss(cls, clst, sep, occur, config: LossConfig, trans=0.0, per_class_cls=None) -> LossBreakdown:
    as_t = lambda v: v if torch.is_tensor(v) else torch.tensor(float(v), dtype=torch.float64)  # noqa: E731
    cls, clst, sep, occur, trans = map(as_t, (cls, clst, sep, occur, trans))
    total = cls + config.lambda_clst * clst + config.lambda_sep * sep + config.lambda_occur * occur
    return LossBreakdown(
        cls=cls, clst=clst, sep=sep, occur=occur, trans=trans, total=total,
        lambda_clst=config.lambda_clst, lambda_sep=config.lambda_sep, lambda_occur=config.lambda_occur,
        per_class_cls=[] if per_class_cls is None else list(per_class_cls.detach().flatten().tolist()),
    )


def masked_similarities(model: PrototypeNet, out: ModelOutput, bbox_masks: torch.Tensor) -> torch.Tensor:
    """Similarities recomputed from features pooled inside each class's box."""
    weights = out.occurrence_maps * bbox_masks.to(out.occurrence_maps.dtype).unsqueeze(2)
    pooled = torch.einsum("bckhw,bdhw->bckd", weights, out.feature_map)
    return model.similarity(pooled, model.prototypes.unsqueeze(0))


def compute_batch_loss(
    model: PrototypeNet,
    x: torch.Tensor,
    y: torch.Tensor,
    config: LossConfig,
    affine: CenterResize | None = None,
    bbox_masks: torch.Tensor | None = None,
    annotated: torch.Tensor | None = None,
    class_mask: torch.Tensor | None = None,
    head_only: bool = False,
) -> LossBreakdown:
    """Forward a batch and assemble every loss term.

    In prior-condition mode (``bbox_masks`` given, ``(B, C, H, W)`` grid masks):
    annotated samples use box-pooled similarities for cluster/separation where
    they carry a box, their clst/sep weight is scaled to ``lambda_annotated``,
    and their occurrence L1 only counts cells outside the box.
    """
    labels = BatchLabels(y)
    out = model(x)
    per_class = classification_loss(out.probabilities, labels, config.gamma, per_class=True)
    cls = per_class.sum()
    zero = cls.new_zeros(())
    if head_only:
        return total_loss(cls, zero, zero, zero, LossConfig(0.0, 0.0, 0.0, config.gamma), per_class_cls=per_class)

    sims = out.similarities
    clst_w = sep_w = None
    occ_mask = None
    if bbox_masks is not None:
        if not model.has_occurrence:
            raise ConfigError("prior-condition training requires the xprotonet variant")
        annotated = torch.as_tensor(annotated, dtype=torch.bool)
        masks = bbox_masks & annotated.view(-1, 1, 1, 1)
        has_box = masks.flatten(2).any(-1)  # (B, C)
        if bool(has_box.any()):
            sims = torch.where(has_box.unsqueeze(-1), masked_similarities(model, out, masks), sims)
        clst_w = _lambda_ratio(annotated, config.lambda_annotated, config.lambda_unannotated, config.lambda_clst, x.dtype)
        sep_w = _lambda_ratio(annotated, config.lambda_annotated, config.lambda_unannotated, config.lambda_sep, x.dtype)
        occ_mask = masks

    clst, _ = cluster_separation_losses(sims, labels, model.active, clst_w, class_mask)
    _, sep = cluster_separation_losses(sims, labels, model.active, sep_w, class_mask)

    if model.has_occurrence:
        trans = zero
        if affine is not None:
            out_t = model(affine(x))
            trans = transformation_loss(out_t.occurrence_maps, affine(out.occurrence_maps))
        occur = occurrence_loss(out.occurrence_maps, trans, occ_mask)
        lam = config
    else:
        trans = occur = zero
        lam = LossConfig(config.lambda_clst, config.lambda_sep, 0.0, config.gamma)
    return total_loss(cls, clst, sep, occur, lam, trans=trans, per_class_cls=per_class)


def _lambda_ratio(annotated, lam_annot, lam_unannot, lam_base, dtype):
    # weights relative to the base lambda, so that lam_base * weight = per-subset lambda
    if lam_base == 0:
        return torch.zeros(len(annotated), dtype=dtype)
    w = torch.where(annotated, torch.tensor(lam_annot / lam_base, dtype=dtype),
                    torch.tensor(lam_unannot / lam_base, dtype=dtype))
    return w
