"""Dataset ingestion, patient-disjoint splits, preprocessing and the
planted-signal synthetic dataset."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .exceptions import DataError
from .transforms import augment, resize_image, sample_augmentation

logger = logging.getLogger(__name__)

NIH_CLASSES = (
    "Atelectasis", "Cardiomegaly", "Effusion", "Infiltration", "Mass", "Nodule", "Pneumonia",
    "Pneumothorax", "Consolidation", "Edema", "Emphysema", "Fibrosis", "Pleural_Thickening", "Hernia",
)
NO_FINDING = "No Finding"
# the official box list spells two findings differently from the label list
_LABEL_ALIASES = {"Infiltrate": "Infiltration", "Pleural Thickening": "Pleural_Thickening"}

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


@dataclass
class Sample:
    image_id: str
    labels: np.ndarray
    patient_id: str
    pixels: np.ndarray | None = None
    path: Path | None = None
    boxes: list[tuple[int, tuple[float, float, float, float]]] = field(default_factory=list)
    annotated: bool = False

    def load(self) -> np.ndarray:
        if self.pixels is not None:
            return self.pixels
        if self.path is None:
            raise DataError(f"{self.image_id}: no pixels and no file path")
        return load_image(self.path, self.image_id)


def load_image(path, image_id: str | None = None) -> np.ndarray:
    """Read an image file into float32 ``(H, W)`` or ``(H, W, 3)`` in [0, 1]."""
    try:
        with Image.open(path) as im:
            im = im.convert("RGB") if im.mode not in ("L", "I;16", "I") else im
            arr = np.asarray(im)
    except (OSError, ValueError) as exc:
        raise DataError(f"unreadable image {image_id or path}: {exc}") from exc
    scale = 65535.0 if arr.dtype == np.uint16 or arr.max(initial=0) > 255 else 255.0
    return arr.astype(np.float32) / scale


# ---------------------------------------------------------------------------
# NIH index


def _vocab_index(classes) -> dict[str, int]:
    return {name: i for i, name in enumerate(classes)}


def parse_finding_labels(text: str, classes=NIH_CLASSES) -> np.ndarray:
    vocab = _vocab_index(classes)
    y = np.zeros(len(classes), dtype=np.int64)
    tokens = [t.strip() for t in text.split("|") if t.strip()]
    unknown = [t for t in tokens if t != NO_FINDING and _LABEL_ALIASES.get(t, t) not in vocab]
    if unknown:
        raise DataError(f"unknown label token(s): {', '.join(unknown)}")
    for t in tokens:
        if t != NO_FINDING:
            y[vocab[_LABEL_ALIASES.get(t, t)]] = 1
    return y


def load_nih_index(labels_csv, bbox_csv=None, images_dir=None, classes=NIH_CLASSES) -> list[Sample]:
    """Parse the NIH label table (and optional box list) into samples.

    The label table needs ``Image Index``, ``Finding Labels`` and ``Patient ID``
    columns. The box table's first six columns are read as image index, finding
    label, x, y, w, h regardless of header spelling. Samples with at least one
    box are flagged as annotated.
    """
    samples: dict[str, Sample] = {}
    images_dir = Path(images_dir) if images_dir is not None else None
    with open(labels_csv, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = {"Image Index", "Finding Labels", "Patient ID"} - set(reader.fieldnames or ())
        if missing:
            raise DataError(f"{labels_csv}: missing column(s) {sorted(missing)}")
        for row in reader:
            image_id = row["Image Index"].strip()
            samples[image_id] = Sample(
                image_id=image_id,
                labels=parse_finding_labels(row["Finding Labels"], classes),
                patient_id=row["Patient ID"].strip(),
                path=None if images_dir is None else images_dir / image_id,
            )
    if bbox_csv is not None:
        vocab = _vocab_index(classes)
        with open(bbox_csv, newline="") as fh:
            reader = csv.reader(fh)
            next(reader, None)
            for row in reader:
                if not row or not row[0].strip():
                    continue
                image_id, label = row[0].strip(), row[1].strip()
                label = _LABEL_ALIASES.get(label, label)
                if image_id not in samples:
                    raise DataError(f"box references absent image {image_id}")
                if label not in vocab:
                    raise DataError(f"unknown label token(s): {label}")
                c = vocab[label]
                s = samples[image_id]
                if not s.labels[c]:
                    raise DataError(f"{image_id}: box for {label} but the image is not labelled with it")
                box = tuple(float(v) for v in row[2:6])
                if box[2] <= 0 or box[3] <= 0:
                    raise DataError(f"{image_id}: degenerate box {box}")
                s.boxes.append((c, box))
                s.annotated = True
    return list(samples.values())


def write_nih_index(samples: list[Sample], labels_csv, bbox_csv=None, classes=NIH_CLASSES,
                    annotated_only: bool = True) -> None:
    with open(labels_csv, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["Image Index", "Finding Labels", "Patient ID"])
        for s in samples:
            names = [classes[i] for i in np.flatnonzero(s.labels)]
            w.writerow([s.image_id, "|".join(names) if names else NO_FINDING, s.patient_id])
    if bbox_csv is not None:
        with open(bbox_csv, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["Image Index", "Finding Label", "x", "y", "w", "h"])
            for s in samples:
                if annotated_only and not s.annotated:
                    continue
                for c, (x, y, bw, bh) in s.boxes:
                    w.writerow([s.image_id, classes[c], f"{x:g}", f"{y:g}", f"{bw:g}", f"{bh:g}"])


# ---------------------------------------------------------------------------
# splitting


@dataclass
class SplitSpec:
    fractions: tuple[float, float, float] = (0.7, 0.1, 0.2)
    mode: str = "holdout"  # holdout | five-fold
    seed: int = 0
    fold: int = 0
    test_ids: tuple[str, ...] | None = None

    def __post_init__(self):
        if self.mode not in ("holdout", "five-fold"):
            raise DataError(f"unknown split mode {self.mode!r}")
        if len(self.fractions) != 3 or not math.isclose(sum(self.fractions), 1.0, abs_tol=1e-6):
            raise DataError(f"split fractions must be three values summing to 1, got {self.fractions}")
        if not 0 <= self.fold < 5:
            raise DataError("fold must lie in [0, 5)")


def _group_by_patient(samples):
    groups: dict[str, list[int]] = {}
    for i, s in enumerate(samples):
        groups.setdefault(s.patient_id, []).append(i)
    return groups


def _allocate(patients: list[str], sizes: dict[str, int], fractions) -> list[list[str]]:
    """Walk patients in order, assigning each to the split its first image falls in."""
    total = sum(sizes[p] for p in patients)
    bounds = np.cumsum([f * total for f in fractions])
    out: list[list[str]] = [[] for _ in fractions]
    pos = 0
    for p in patients:
        mid = pos + 0.5 * sizes[p]
        k = int(np.searchsorted(bounds, mid, side="right"))
        out[min(k, len(fractions) - 1)].append(p)
        pos += sizes[p]
    return out


def split(samples: list[Sample], spec: SplitSpec) -> dict[str, list[Sample]]:
    """Patient-disjoint train/val/test split.

    ``holdout`` splits by the given fractions, or uses ``test_ids`` as the test
    set and divides the rest in proportion to the train/val fractions.
    ``five-fold`` splits box-annotated and unannotated patients separately;
    fold ``f`` tests on the ``f``-th fifth and carves validation off the rest.
    """
    if not samples:
        raise DataError("cannot split an empty sample list")
    groups = _group_by_patient(samples)
    sizes = {p: len(ix) for p, ix in groups.items()}
    limit = max(spec.fractions) * len(samples)
    for p, n in sizes.items():
        if n > limit:
            raise DataError(f"patient {p} owns {n} images, more than the largest split allows")
    rng = np.random.default_rng(spec.seed)
    names = ("train", "val", "test")

    def shuffled(pats):
        pats = sorted(pats)
        return [pats[i] for i in rng.permutation(len(pats))]

    assignment: dict[str, str] = {}
    if spec.mode == "holdout":
        if spec.test_ids is not None:
            test_set = set(spec.test_ids)
            test_pats = {samples[i].patient_id for p, ix in groups.items() for i in ix
                         if samples[i].image_id in test_set}
            rest = shuffled(p for p in groups if p not in test_pats)
            tr, va = spec.fractions[0], spec.fractions[1]
            parts = _allocate(rest, sizes, (tr / (tr + va), va / (tr + va)))
            for p in test_pats:
                assignment[p] = "test"
            for name, pats in zip(names[:2], parts):
                for p in pats:
                    assignment[p] = name
        else:
            for name, pats in zip(names, _allocate(shuffled(groups), sizes, spec.fractions)):
                for p in pats:
                    assignment[p] = name
    else:
        annotated = {p for p, ix in groups.items() if any(samples[i].annotated for i in ix)}
        for subset in (annotated, set(groups) - annotated):
            pats = shuffled(subset)
            folds = _allocate(pats, sizes, (0.2,) * 5)
            test = folds[spec.fold]
            rest = [p for f, fp in enumerate(folds) if f != spec.fold for p in fp]
            train, val = _allocate(rest, sizes, (7 / 8, 1 / 8))
            for name, group in (("train", train), ("val", val), ("test", test)):
                for p in group:
                    assignment[p] = name
    out = {name: [] for name in names}
    for s in samples:
        out[assignment[s.patient_id]].append(s)
    return out


def write_split_manifest(splits: dict[str, list[Sample]], directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for name, items in splits.items():
        (directory / f"{name}.txt").write_text("".join(s.image_id + "\n" for s in items))


# ---------------------------------------------------------------------------
# preprocessing


def to_channels(pixels: np.ndarray, channels: int) -> np.ndarray:
    """``(H, W)`` or ``(H, W, c)`` -> ``(channels, H, W)``."""
    arr = np.asarray(pixels, dtype=np.float32)
    if arr.ndim == 2:
        arr = arr[None]
    elif arr.ndim == 3:
        arr = np.moveaxis(arr, -1, 0)
    else:
        raise DataError(f"expected a 2-D or 3-D image, got shape {arr.shape}")
    if arr.shape[0] == channels:
        return arr
    if arr.shape[0] == 1:
        return np.repeat(arr, channels, axis=0)
    if channels == 1:
        return arr.mean(0, keepdims=True)
    raise DataError(f"cannot map {arr.shape[0]} channels to {channels}")


def preprocess(image: np.ndarray, size=(64, 64), mean=(0.5,), std=(0.25,), train_mode: bool = False,
               seed: int = 0, channels: int | None = None) -> torch.Tensor:
    """Resize, optionally augment (rotation within 10 degrees, zoom 0.8-1.2), normalize."""
    channels = channels or len(mean)
    x = torch.from_numpy(to_channels(image, channels))
    x = resize_image(x, tuple(size))
    if train_mode:
        angles, scales = sample_augmentation(np.random.default_rng(seed), 1)
        x = augment(x[None], angles, scales)[0].to(torch.float32)
    m = torch.tensor(mean, dtype=torch.float32).view(-1, 1, 1)
    s = torch.tensor(std, dtype=torch.float32).view(-1, 1, 1)
    return (x - m) / s


# ---------------------------------------------------------------------------
# boxes


def rasterize_box(box, input_size, grid_size) -> np.ndarray:
    """Grid cells whose pixel footprint overlaps ``box = (x, y, w, h)`` by any positive area."""
    x, y, w, h = (float(v) for v in box)
    if w <= 0 or h <= 0:
        raise DataError(f"degenerate box {box}")
    H0, W0 = input_size
    H, W = grid_size
    ch, cw = H0 / H, W0 / W
    rows = (np.arange(H) * ch < y + h) & ((np.arange(H) + 1) * ch > y)
    cols = (np.arange(W) * cw < x + w) & ((np.arange(W) + 1) * cw > x)
    mask = rows[:, None] & cols[None, :]
    if not mask.any():
        raise DataError(f"box {box} lies outside the {W0}x{H0} image")
    return mask


def box_pixel_mask(box, size) -> np.ndarray:
    """Pixels whose unit square overlaps the box."""
    return rasterize_box(box, size, size)


def grid_masks_from_pixels(pixel_masks: torch.Tensor, grid_size) -> torch.Tensor:
    """Reduce ``(..., H0, W0)`` pixel masks to grid masks: a cell is set if any pixel is."""
    lead = pixel_masks.shape[:-2]
    flat = pixel_masks.reshape(-1, 1, *pixel_masks.shape[-2:]).float()
    kh = pixel_masks.shape[-2] // grid_size[0]
    kw = pixel_masks.shape[-1] // grid_size[1]
    pooled = F.max_pool2d(flat, (kh, kw))
    return pooled.reshape(*lead, *grid_size) > 0.5


# ---------------------------------------------------------------------------
# tensor dataset


@dataclass
class ImageSet:
    images: torch.Tensor  # (N, Cin, H0, W0) normalized
    labels: torch.Tensor  # (N, C) float
    ids: list[str]
    annotated: torch.Tensor  # (N,) bool
    pixel_masks: torch.Tensor | None = None  # (N, C, H0, W0) bool
    boxes: list[list] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.ids)

    def subset(self, index) -> "ImageSet":
        index = np.asarray(index)
        return ImageSet(
            images=self.images[index],
            labels=self.labels[index],
            ids=[self.ids[i] for i in index],
            annotated=self.annotated[index],
            pixel_masks=None if self.pixel_masks is None else self.pixel_masks[index],
            boxes=[self.boxes[i] for i in index] if self.boxes else [],
        )

    def grid_masks(self, grid_size) -> torch.Tensor | None:
        if self.pixel_masks is None:
            return None
        return grid_masks_from_pixels(self.pixel_masks, grid_size)


def channel_stats(samples: list[Sample], channels: int = 1) -> tuple[tuple[float, ...], tuple[float, ...]]:
    arr = np.stack([to_channels(s.load(), channels) for s in samples])
    return tuple(float(v) for v in arr.mean(axis=(0, 2, 3))), tuple(float(v) for v in arr.std(axis=(0, 2, 3)))


def build_image_set(samples: list[Sample], num_classes: int, size=(64, 64), mean=(0.5,), std=(0.25,),
                    with_masks: bool = True) -> ImageSet:
    images = torch.stack([preprocess(s.load(), size, mean, std, channels=len(mean)) for s in samples]) \
        if samples else torch.zeros(0, len(mean), *size)
    labels = torch.as_tensor(np.stack([s.labels for s in samples]) if samples else np.zeros((0, num_classes)),
                             dtype=torch.float32)
    masks = None
    boxes = []
    if with_masks:
        masks = torch.zeros(len(samples), num_classes, *size, dtype=torch.bool)
        for i, s in enumerate(samples):
            h, w = np.asarray(s.load()).shape[:2]
            scaled = []
            for c, (x, y, bw, bh) in s.boxes:
                sx, sy = size[1] / w, size[0] / h
                b = (x * sx, y * sy, bw * sx, bh * sy)
                scaled.append((c, b))
                masks[i, c] |= torch.from_numpy(box_pixel_mask(b, size))
            boxes.append(scaled)
    return ImageSet(
        images=images,
        labels=labels,
        ids=[s.image_id for s in samples],
        annotated=torch.tensor([bool(s.annotated) for s in samples], dtype=torch.bool),
        pixel_masks=masks,
        boxes=boxes,
    )


# ---------------------------------------------------------------------------
# synthetic planted-signal dataset


@dataclass
class Signature:
    name: str
    shape: str  # ellipse | blob | streak
    size_range: tuple[float, float]
    intensity: float


DEFAULT_SIGNATURES = (
    Signature("LargeEllipse", "ellipse", (9.0, 14.0), 0.22),
    Signature("SmallBlob", "blob", (1.6, 2.4), 0.45),
    Signature("Streak", "streak", (16.0, 24.0), 0.3),
)


@dataclass
class SyntheticSpec:
    image_size: int = 64
    signatures: tuple[Signature, ...] = DEFAULT_SIGNATURES
    background: float = 0.35
    noise: float = 0.08
    prevalence: tuple[float, ...] = (0.3, 0.3, 0.3)
    annotated_fraction: float = 0.25
    seed: int = 0

    @property
    def class_names(self) -> tuple[str, ...]:
        return tuple(s.name for s in self.signatures)

    def __post_init__(self):
        if len(self.prevalence) != len(self.signatures):
            raise DataError("prevalence needs one entry per signature")
        for sig in self.signatures:
            extent = 2 * sig.size_range[1] + 4
            if sig.shape == "streak":
                extent = sig.size_range[1] + 4
            if extent >= self.image_size:
                raise DataError(f"signature {sig.name} does not fit a {self.image_size}px image")


def _render(sig: Signature, rng: np.random.Generator, n: int):
    """Return ``(intensity layer, support mask)`` for one planted signature."""
    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64) + 0.5
    size = rng.uniform(*sig.size_range)
    if sig.shape == "ellipse":
        a = size
        b = size * rng.uniform(0.65, 0.9)
        t = rng.uniform(0, np.pi)
        margin = a + 2
        cx, cy = rng.uniform(margin, n - margin, size=2)
        u = (xx - cx) * np.cos(t) + (yy - cy) * np.sin(t)
        v = -(xx - cx) * np.sin(t) + (yy - cy) * np.cos(t)
        r = np.sqrt((u / a) ** 2 + (v / b) ** 2)
        layer = np.clip((1.0 - r) * 4.0, 0.0, 1.0)
    elif sig.shape == "blob":
        margin = 3 * size + 2
        cx, cy = rng.uniform(margin, n - margin, size=2)
        d2 = (xx - cx) ** 2 + (yy - cy) ** 2
        layer = np.exp(-d2 / (2 * size**2))
        layer[layer < 0.1] = 0.0
    elif sig.shape == "streak":
        half = size / 2
        t = rng.uniform(0, np.pi)
        margin = half + 2
        cx, cy = rng.uniform(margin, n - margin, size=2)
        dx, dy = np.cos(t), np.sin(t)
        along = (xx - cx) * dx + (yy - cy) * dy
        across = -(xx - cx) * dy + (yy - cy) * dx
        width = rng.uniform(0.9, 1.4)
        layer = np.clip(1.5 - np.abs(across) / width, 0, 1) * (np.abs(along) <= half)
    else:
        raise DataError(f"unknown signature shape {sig.shape!r}")
    return sig.intensity * layer, layer > 0


def _tight_box(support: np.ndarray):
    rows = np.flatnonzero(support.any(1))
    cols = np.flatnonzero(support.any(0))
    return (float(cols[0]), float(rows[0]), float(cols[-1] + 1 - cols[0]), float(rows[-1] + 1 - rows[0]))


def synthetic_sample(spec: SyntheticSpec, index: int) -> Sample:
    """One sample, a pure function of ``(spec.seed, index)``."""
    rng = np.random.default_rng([spec.seed, index])
    n = spec.image_size
    C = len(spec.signatures)
    labels = (rng.random(C) < np.asarray(spec.prevalence)).astype(np.int64)
    annotated = bool(rng.random() < spec.annotated_fraction) and bool(labels.any())
    img = spec.background + spec.noise * rng.standard_normal((n, n))
    boxes = []
    for c in np.flatnonzero(labels):
        layer, support = _render(spec.signatures[c], rng, n)
        img = img + layer
        boxes.append((int(c), _tight_box(support)))
    img = np.clip(img, 0.0, 1.0).astype(np.float32)
    return Sample(
        image_id=f"syn_{index:06d}.png",
        labels=labels,
        patient_id=f"P{index:06d}",
        pixels=img,
        boxes=boxes,
        annotated=annotated,
    )


def generate_synthetic(spec: SyntheticSpec, n: int, start: int = 0) -> list[Sample]:
    return [synthetic_sample(spec, i) for i in range(start, start + n)]


def quantize(samples: list[Sample]) -> list[Sample]:
    """Round pixels to 8 bits, matching what a PNG round trip yields."""
    for s in samples:
        s.pixels = (np.round(s.pixels * 255.0) / 255.0).astype(np.float32)
    return samples


def write_synthetic_dataset(spec: SyntheticSpec, n: int, directory) -> list[Sample]:
    """Write PNGs plus NIH-style index files.

    ``Data_Entry.csv`` and ``BBox_List.csv`` (annotated samples only) mirror the
    NIH layout; ``ground_truth_boxes.csv`` lists every planted box.
    """
    directory = Path(directory)
    (directory / "images").mkdir(parents=True, exist_ok=True)
    samples = generate_synthetic(spec, n)
    for s in samples:
        Image.fromarray(np.round(s.pixels * 255.0).astype(np.uint8), mode="L").save(
            directory / "images" / s.image_id, optimize=False
        )
    quantize(samples)
    names = spec.class_names
    write_nih_index(samples, directory / "Data_Entry.csv", directory / "BBox_List.csv", names)
    write_nih_index(samples, directory / "_all.csv", directory / "ground_truth_boxes.csv", names,
                    annotated_only=False)
    (directory / "_all.csv").unlink()
    (directory / "classes.txt").write_text("".join(c + "\n" for c in names))
    return samples


def load_synthetic_dataset(directory) -> tuple[list[Sample], tuple[str, ...]]:
    """Read a directory written by :func:`write_synthetic_dataset`, with every planted box attached."""
    directory = Path(directory)
    classes = tuple(directory.joinpath("classes.txt").read_text().split())
    samples = load_nih_index(directory / "Data_Entry.csv", directory / "BBox_List.csv",
                             directory / "images", classes)
    annotated = {s.image_id for s in samples if s.annotated}
    by_id = {s.image_id: s for s in samples}
    for s in samples:
        s.boxes = []
    with open(directory / "ground_truth_boxes.csv", newline="") as fh:
        reader = csv.reader(fh)
        next(reader)
        for row in reader:
            s = by_id[row[0]]
            s.boxes.append((classes.index(row[1]), tuple(float(v) for v in row[2:6])))
    for s in samples:
        s.annotated = s.image_id in annotated
    return samples, classes
