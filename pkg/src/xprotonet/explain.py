"""AUC evaluation and prototype-based explanations.

Local explanations tabulate, for one image, each active prototype's
similarity, head weight and contribution, plus its occurrence map upsampled
to the input and contoured at a fraction of its maximum. Global explanations
describe each prototype through the training image it was projected onto.
"""

from __future__ import annotations

import io
import json
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from PIL import Image, ImageDraw
from scipy.stats import rankdata
from skimage import measure

from .exceptions import ProjectionError
from .model import PrototypeNet
from .transforms import upsample_map

SCHEMA_VERSION = 1


def auc(scores, labels) -> float | None:
    """Probability that a random positive outranks a random negative, ties 0.5.

    Returns ``None`` when only one class is present.
    """
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel().astype(bool)
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = rankdata(scores)
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


@torch.no_grad()
def predict_proba(model: PrototypeNet, images: torch.Tensor, batch_size: int = 128) -> np.ndarray:
    was_training = model.training
    model.eval()
    out = [model(images[i:i + batch_size]).probabilities for i in range(0, len(images), batch_size)]
    model.train(was_training)
    if not out:
        return np.zeros((0, model.config.num_classes))
    return torch.cat(out).double().numpy()


@dataclass
class EvalResult:
    per_class: dict[str, float | None]
    mean_auc: float | None

    def to_dict(self):
        return {"per_class": self.per_class, "mean_auc": self.mean_auc}


def evaluate_scores(probabilities: np.ndarray, labels, class_names) -> EvalResult:
    labels = np.asarray(labels)
    per = {name: auc(probabilities[:, c], labels[:, c]) for c, name in enumerate(class_names)}
    defined = [v for v in per.values() if v is not None]
    return EvalResult(per, float(np.mean(defined)) if defined else None)


def evaluate(model: PrototypeNet, images: torch.Tensor, labels, batch_size: int = 128) -> EvalResult:
    """Per-class AUC on a split and their mean over classes where AUC is defined."""
    probs = predict_proba(model, images, batch_size)
    return evaluate_scores(probs, np.asarray(labels), model.class_names)


# ---------------------------------------------------------------------------
# local explanations


def normalize_map(m: np.ndarray) -> tuple[np.ndarray, bool]:
    """Divide by the maximum; an all-zero map stays zero and is flagged."""
    peak = float(m.max())
    if peak <= 0:
        return np.zeros_like(m), True
    return m / peak, False


def contour_polygons(norm: np.ndarray, level: float = 0.3) -> list[np.ndarray]:
    """Closed iso-contours (row, col) around the region ``norm > level``."""
    padded = np.pad(norm, 1, constant_values=0.0)
    return [c - 1.0 for c in measure.find_contours(padded, level)]


def region_from_polygons(polygons, shape) -> np.ndarray:
    """Pixel centres enclosed by the polygons under the even-odd rule."""
    rr, cc = np.mgrid[0:shape[0], 0:shape[1]]
    pts = np.stack([rr.ravel(), cc.ravel()], 1).astype(np.float64)
    inside = np.zeros(len(pts), dtype=bool)
    for poly in polygons:
        inside ^= measure.points_in_poly(pts, poly)
    return inside.reshape(shape)


@dataclass
class PrototypeContribution:
    class_index: int
    proto_index: int
    similarity: float
    weight: float
    contribution: float
    peak: tuple[int, int] | None
    contours: list[list[list[float]]] = field(default_factory=list)
    zero_map: bool = False


@dataclass
class LocalExplanation:
    image_id: str
    class_names: list[str]
    probabilities: list[float]
    contributions: list[PrototypeContribution]
    schema_version: int = SCHEMA_VERSION

    def to_document(self) -> str:
        return json.dumps(asdict(self), indent=1, sort_keys=True)

    def class_probability_from_contributions(self, c: int) -> float:
        total = sum(p.contribution for p in self.contributions if p.class_index == c)
        return float(1.0 / (1.0 + np.exp(-total)))


def _display_image(image: torch.Tensor) -> np.ndarray:
    x = image.detach().double().numpy()
    x = x.mean(0) if x.ndim == 3 else x
    lo, hi = float(x.min()), float(x.max())
    return (x - lo) / (hi - lo) if hi > lo else np.zeros_like(x)


def _colormap(name: str):
    from matplotlib import colormaps

    return colormaps[name]


def overlay_png(gray: np.ndarray, norm_map: np.ndarray, polygons, colormap: str = "jet",
                alpha: float = 0.4) -> bytes:
    rgb = np.repeat(gray[..., None], 3, axis=-1)
    heat = _colormap(colormap)(norm_map)[..., :3]
    blended = (1 - alpha) * rgb + alpha * heat
    im = Image.fromarray(np.round(blended * 255).astype(np.uint8), mode="RGB")
    draw = ImageDraw.Draw(im)
    for poly in polygons:
        pts = [(float(c), float(r)) for r, c in poly]
        if len(pts) > 1:
            draw.line(pts + [pts[0]], fill=(255, 255, 255), width=1)
    buf = io.BytesIO()
    im.save(buf, format="PNG", optimize=False)
    return buf.getvalue()


@torch.no_grad()
def render_local(model: PrototypeNet, image: torch.Tensor, image_id: str = "image",
                 level: float = 0.3, colormap: str = "jet", alpha: float = 0.4,
                 with_overlays: bool = True):
    """Explain one normalized ``(Cin, H0, W0)`` image.

    Returns ``(LocalExplanation, overlays)`` where ``overlays`` maps
    ``(class, prototype)`` to PNG bytes.
    """
    was_training = model.training
    model.eval()
    out = model(image[None])
    model.train(was_training)
    size = tuple(image.shape[-2:])
    gray = _display_image(image)
    sims = out.similarities[0].double()
    weights = model.head.detach().double()
    maps = None if out.occurrence_maps is None else upsample_map(out.occurrence_maps[0].double(), size).numpy()
    rows, overlays = [], {}
    C, K = model.active.shape
    for c in range(C):
        for k in range(K):
            if not model.active[c, k]:
                continue
            s, w = float(sims[c, k]), float(weights[c, k])
            entry = PrototypeContribution(c, k, s, w, float(sims[c, k] * weights[c, k]), None)
            if maps is not None:
                norm, flat = normalize_map(maps[c, k])
                polys = [] if flat else contour_polygons(norm, level)
                entry.zero_map = flat
                entry.peak = None if flat else tuple(int(v) for v in np.unravel_index(np.argmax(norm), norm.shape))
                entry.contours = [p.round(4).tolist() for p in polys]
                if with_overlays:
                    overlays[(c, k)] = overlay_png(gray, norm, polys, colormap, alpha)
            rows.append(entry)
    expl = LocalExplanation(
        image_id=image_id,
        class_names=list(model.class_names),
        probabilities=[float(v) for v in out.probabilities[0].double()],
        contributions=rows,
    )
    return expl, overlays


def top_prototype_peak(model: PrototypeNet, out_maps: torch.Tensor, sims: torch.Tensor, c: int,
                       size) -> tuple[int, tuple[int, int]]:
    """Index and upsampled peak location of the top-contributing prototype of class ``c``."""
    contrib = (sims[c] * model.head[c]).masked_fill(~model.active[c], float("-inf"))
    k = int(torch.argmax(contrib))
    up = upsample_map(out_maps[c, k].double(), size).numpy()
    return k, tuple(int(v) for v in np.unravel_index(np.argmax(up), up.shape))


# ---------------------------------------------------------------------------
# global explanations


@dataclass
class NearestAnnotated:
    image_id: str
    similarity: float
    box_overlap: float


@dataclass
class GlobalRecord:
    class_index: int
    class_name: str
    proto_index: int
    weight: float
    source_image_id: str
    source_is_positive: bool | None
    source_similarity: float
    occurrence_region: list[list[bool]]
    nearest_annotated: NearestAnnotated | None = None
    schema_version: int = SCHEMA_VERSION

    def to_document(self) -> str:
        return json.dumps(asdict(self), indent=1, sort_keys=True)


def box_overlap_fraction(norm_map: np.ndarray, box_mask: np.ndarray, level: float = 0.3) -> float:
    """Share of the contoured occurrence mass (normalized map above ``level``) inside the box."""
    region = norm_map > level
    mass = norm_map[region].sum()
    if mass <= 0:
        return 0.0
    return float(norm_map[region & box_mask].sum() / mass)


@torch.no_grad()
def render_global(model: PrototypeNet, train_ids=None, train_labels=None, annotated=None,
                  level: float = 0.3, batch_size: int = 128) -> list[GlobalRecord]:
    """One record per active prototype, optionally with its nearest box-annotated image.

    ``annotated`` is an :class:`~xprotonet.data.ImageSet` whose ``pixel_masks``
    hold the ground-truth boxes; only images boxed for the prototype's class are
    searched.
    """
    C, K = model.active.shape
    missing = [(c, k) for c in range(C) for k in range(K) if model.active[c, k] and (c, k) not in model.provenance]
    if missing:
        raise ProjectionError(f"prototypes {missing} have no provenance; run projection first")
    label_of = {}
    if train_ids is not None:
        label_of = {i: np.asarray(l) for i, l in zip(train_ids, np.asarray(train_labels))}

    ann_sims = ann_maps = None
    if annotated is not None and len(annotated):
        was_training = model.training
        model.eval()
        sims, maps = [], []
        for i in range(0, len(annotated), batch_size):
            out = model(annotated.images[i:i + batch_size])
            sims.append(out.similarities)
            if out.occurrence_maps is not None:
                maps.append(out.occurrence_maps)
        model.train(was_training)
        ann_sims = torch.cat(sims)
        ann_maps = torch.cat(maps) if maps else None

    records = []
    for c in range(C):
        for k in range(K):
            if not model.active[c, k]:
                continue
            rec = model.provenance[(c, k)]
            norm, _ = normalize_map(np.asarray(rec.occurrence_map, dtype=np.float64))
            lab = label_of.get(rec.image_id)
            nearest = None
            if ann_sims is not None:
                boxed = annotated.pixel_masks[:, c].flatten(1).any(1)
                idx = torch.nonzero(boxed).flatten()
                if len(idx):
                    j = int(idx[int(torch.argmax(ann_sims[idx, c, k]))])
                    overlap = 0.0
                    if ann_maps is not None:
                        up = upsample_map(ann_maps[j, c, k].double(), tuple(annotated.images.shape[-2:])).numpy()
                        up_norm, _ = normalize_map(up)
                        overlap = box_overlap_fraction(up_norm, annotated.pixel_masks[j, c].numpy(), level)
                    nearest = NearestAnnotated(annotated.ids[j], float(ann_sims[j, c, k]), overlap)
            records.append(GlobalRecord(
                class_index=c,
                class_name=model.class_names[c],
                proto_index=k,
                weight=float(model.head[c, k]),
                source_image_id=rec.image_id,
                source_is_positive=None if lab is None else bool(lab[c]),
                source_similarity=rec.similarity,
                occurrence_region=(norm > level).tolist(),
                nearest_annotated=nearest,
            ))
    return records
