"""Synthetic scenes, COCO JSON ingestion and incremental-phase partitioning.

Each incremental phase introduces a disjoint class set. Within a phase only a
small labelled subset carries annotations, and those annotations are limited
to the phase's own classes; every other object in a labelled image is left as
background. Unlabelled images carry no annotations at all.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .geometry import Annotation, Box

SHAPES = ("square", "circle", "triangle", "plus", "diamond", "ring", "xcross", "frame")


@dataclass(frozen=True)
class ClassPrototype:
    name: str
    shape: str
    color: tuple[float, float, float]

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise ValueError(f"unknown shape {self.shape!r}; expected one of {SHAPES}")


DEFAULT_CATALOG = (
    ClassPrototype("red_square", "square", (0.90, 0.15, 0.15)),
    ClassPrototype("green_circle", "circle", (0.15, 0.85, 0.20)),
    ClassPrototype("blue_triangle", "triangle", (0.20, 0.30, 0.95)),
    ClassPrototype("yellow_plus", "plus", (0.95, 0.90, 0.15)),
    ClassPrototype("magenta_diamond", "diamond", (0.90, 0.20, 0.85)),
    ClassPrototype("cyan_ring", "ring", (0.15, 0.90, 0.90)),
    ClassPrototype("orange_xcross", "xcross", (1.00, 0.55, 0.05)),
    ClassPrototype("white_frame", "frame", (0.97, 0.97, 0.97)),
)


@dataclass(frozen=True)
class SceneConfig:
    classes: tuple[ClassPrototype, ...] = DEFAULT_CATALOG
    objects_per_image: tuple[int, int] = (1, 4)
    image_size: int = 64
    object_size: tuple[int, int] = (14, 34)
    noise: float = 0.04
    seed: int = 0
    max_tries: int = 40

    def __post_init__(self):
        if len(self.classes) < 2:
            raise ValueError("a scene catalog needs at least 2 classes")
        lo, hi = self.objects_per_image
        if not 0 <= lo <= hi:
            raise ValueError(f"bad objects_per_image range {self.objects_per_image}")
        smin, smax = self.object_size
        if not 2 <= smin <= smax <= self.image_size:
            raise ValueError(f"object sizes {self.object_size} do not fit a {self.image_size}px image")


@dataclass(frozen=True, eq=False)
class ImageSample:
    """An image with a dataset-unique id. ``pixels`` is HxWxC float32 in [0, 1].

    ``pixels`` may be None for annotation-only COCO loads.
    """

    id: int
    pixels: Optional[np.ndarray]

    @property
    def height(self) -> int:
        return int(self.pixels.shape[0])

    @property
    def width(self) -> int:
        return int(self.pixels.shape[1])


@dataclass(frozen=True, eq=False)
class LabelledSample:
    image: ImageSample
    annotations: tuple[Annotation, ...] = ()


@dataclass(frozen=True)
class TaskSpec:
    phase_classes: tuple[tuple[int, ...], ...]

    def __post_init__(self):
        seen: set[int] = set()
        for i, cls in enumerate(self.phase_classes):
            if not cls:
                raise ValueError(f"phase {i} has no classes")
            overlap = seen.intersection(cls)
            if overlap:
                raise ValueError(f"phase {i} repeats classes {sorted(overlap)}")
            seen.update(cls)

    @property
    def num_phases(self) -> int:
        return len(self.phase_classes)

    @property
    def all_classes(self) -> tuple[int, ...]:
        return tuple(c for cls in self.phase_classes for c in cls)

    def seen_classes(self, phase: int) -> tuple[int, ...]:
        """Classes of phases ``0..phase`` inclusive."""
        return tuple(c for cls in self.phase_classes[: phase + 1] for c in cls)


@dataclass(frozen=True, eq=False)
class PhaseDataset:
    labelled: tuple[LabelledSample, ...]
    unlabelled: tuple[ImageSample, ...]
    phase_index: int
    classes: tuple[int, ...] = field(default=())


def split_tasks(all_classes: Sequence[int], phase_sizes: Sequence[int]) -> TaskSpec:
    """Order-preserving partition of ``all_classes`` into consecutive phases."""
    if any(s < 1 for s in phase_sizes):
        raise ValueError(f"every phase needs at least one class, got sizes {list(phase_sizes)}")
    if sum(phase_sizes) != len(all_classes):
        raise ValueError(
            f"phase sizes {list(phase_sizes)} sum to {sum(phase_sizes)}, "
            f"but there are {len(all_classes)} classes"
        )
    out, start = [], 0
    for size in phase_sizes:
        out.append(tuple(all_classes[start : start + size]))
        start += size
    return TaskSpec(tuple(out))


def phase_pool(samples: Sequence[LabelledSample], spec: TaskSpec, phase: int) -> list[LabelledSample]:
    """Images containing at least one object of the phase's classes."""
    wanted = set(spec.phase_classes[phase])
    return [s for s in samples if any(a.class_id in wanted for a in s.annotations)]


def _half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def build_phase_dataset(
    samples: Sequence[LabelledSample],
    spec: TaskSpec,
    phase: int,
    label_ratio: float,
    seed: int,
    stratified: bool = False,
) -> PhaseDataset:
    """Split fully-annotated ``samples`` into the labelled/unlabelled halves of one phase.

    ``round(label_ratio * N)`` images are drawn uniformly without replacement
    as labelled; their annotations are stripped down to ``phase``'s classes.
    The rest lose their annotations and become unlabelled. With
    ``stratified=True`` the draw is spread proportionally over groups keyed by
    each image's first current-phase class.
    """
    if not 0.0 < label_ratio <= 1.0:
        raise ValueError(f"label_ratio {label_ratio} outside (0, 1]")
    if not 0 <= phase < spec.num_phases:
        raise ValueError(f"phase {phase} out of range for {spec.num_phases} phases")
    n = len(samples)
    n_lab = _half_up(label_ratio * n)
    if n_lab == 0:
        raise ValueError(f"label_ratio {label_ratio} of {n} images yields no labelled images")
    rng = np.random.default_rng(seed)
    classes = spec.phase_classes[phase]
    if stratified:
        chosen = _stratified_choice(samples, set(classes), n_lab, rng)
    else:
        chosen = rng.choice(n, size=n_lab, replace=False)
    chosen_set = set(int(i) for i in chosen)
    keep = set(classes)
    labelled, unlabelled = [], []
    for i, s in enumerate(samples):
        if i in chosen_set:
            anns = tuple(a for a in s.annotations if a.class_id in keep)
            labelled.append(LabelledSample(s.image, anns))
        else:
            unlabelled.append(s.image)
    return PhaseDataset(tuple(labelled), tuple(unlabelled), phase, tuple(classes))


def _stratified_choice(samples, classes, n_lab, rng):
    groups: dict[int, list[int]] = {}
    for i, s in enumerate(samples):
        key = next((a.class_id for a in s.annotations if a.class_id in classes), -1)
        groups.setdefault(key, []).append(i)
    keys = sorted(groups)
    n = len(samples)
    quota = {k: len(groups[k]) * n_lab / n for k in keys}
    take = {k: int(math.floor(q)) for k, q in quota.items()}
    # largest remainders get the leftover slots
    rest = n_lab - sum(take.values())
    for k in sorted(keys, key=lambda k: (-(quota[k] - take[k]), k))[:rest]:
        take[k] += 1
    chosen = []
    for k in keys:
        if take[k]:
            chosen.extend(rng.choice(groups[k], size=take[k], replace=False).tolist())
    return chosen


# ---------------------------------------------------------------------------
# synthetic scenes


def _shape_mask(shape: str, h: int, w: int) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    # normalised pixel-centre coordinates in [-1, 1]
    u = (xx + 0.5) / w * 2.0 - 1.0
    v = (yy + 0.5) / h * 2.0 - 1.0
    if shape == "square":
        return np.ones((h, w), dtype=bool)
    if shape == "circle":
        return u * u + v * v <= 1.0
    if shape == "triangle":
        t = (v + 1.0) / 2.0
        return np.abs(u) <= t
    if shape == "plus":
        return (np.abs(u) <= 0.34) | (np.abs(v) <= 0.34)
    if shape == "diamond":
        return np.abs(u) + np.abs(v) <= 1.0
    if shape == "ring":
        r2 = u * u + v * v
        return (r2 <= 1.0) & (r2 >= 0.36)
    if shape == "xcross":
        return (np.abs(u - v) <= 0.42) | (np.abs(u + v) <= 0.42)
    if shape == "frame":
        return (np.abs(u) >= 0.55) | (np.abs(v) >= 0.55)
    raise ValueError(shape)


def _boxes_intersect(a, b) -> bool:
    return a[0] < b[2] and b[0] < a[2] and a[1] < b[3] and b[1] < a[3]


def render_scene(config: SceneConfig, rng: np.random.Generator, image_id: int) -> LabelledSample:
    size = config.image_size
    base = rng.uniform(0.05, 0.35)
    pixels = np.full((size, size, 3), base, dtype=np.float64)
    pixels += rng.normal(0.0, config.noise, size=pixels.shape)
    lo, hi = config.objects_per_image
    k = int(rng.integers(lo, hi + 1))
    placed: list[tuple[int, int, int, int]] = []
    anns = []
    smin, smax = config.object_size
    for _ in range(k):
        cls = int(rng.integers(len(config.classes)))
        proto = config.classes[cls]
        for _attempt in range(config.max_tries):
            side = int(rng.integers(smin, smax + 1))
            aspect = rng.uniform(0.8, 1.25)
            w = max(smin, min(size, int(round(side * math.sqrt(aspect)))))
            h = max(smin, min(size, int(round(side / math.sqrt(aspect)))))
            x0 = int(rng.integers(0, size - w + 1))
            y0 = int(rng.integers(0, size - h + 1))
            cand = (x0, y0, x0 + w, y0 + h)
            if not any(_boxes_intersect(cand, p) for p in placed):
                break
        else:
            continue  # no room; object skipped
        mask = _shape_mask(proto.shape, h, w)
        ys, xs = np.nonzero(mask)
        if len(ys) == 0:
            continue
        shade = rng.uniform(0.85, 1.0)
        color = np.clip(np.asarray(proto.color) * shade, 0.0, 1.0)
        region = pixels[y0 : y0 + h, x0 : x0 + w]
        region[mask] = color + rng.normal(0.0, config.noise, size=(mask.sum(), 3))
        placed.append(cand)
        box = Box(float(x0 + xs.min()), float(y0 + ys.min()), float(x0 + xs.max() + 1), float(y0 + ys.max() + 1))
        anns.append(Annotation(box, cls))
    pixels = np.clip(pixels, 0.0, 1.0).astype(np.float32)
    return LabelledSample(ImageSample(image_id, pixels), tuple(anns))


def generate_synthetic_dataset(config: SceneConfig, n_images: int, id_offset: int = 0) -> list[LabelledSample]:
    """Render ``n_images`` scenes; identical ``config.seed`` gives identical output."""
    if n_images < 1:
        raise ValueError("n_images must be >= 1")
    rng = np.random.default_rng(config.seed)
    return [render_scene(config, rng, id_offset + i) for i in range(n_images)]


# ---------------------------------------------------------------------------
# COCO JSON


def _require(record: dict, keys, what: str):
    missing = [k for k in keys if k not in record]
    if missing:
        raise ValueError(f"{what} is missing keys {missing}")


def load_coco_annotations(path, image_dir=None) -> list[LabelledSample]:
    """Read a COCO detection file. Pixels are loaded only when ``image_dir`` is given."""
    path = Path(path)
    with open(path) as fh:
        doc = json.load(fh)
    _require(doc, ("images", "annotations", "categories"), f"{path}")
    category_ids = set()
    for c in doc["categories"]:
        _require(c, ("id",), f"category record {c!r}")
        category_ids.add(c["id"])
    images = {}
    order = []
    for rec in doc["images"]:
        _require(rec, ("id",), f"image record {rec!r}")
        if rec["id"] in images:
            raise ValueError(f"duplicate image id {rec['id']}")
        images[rec["id"]] = rec
        order.append(rec["id"])
    anns: dict = {i: [] for i in order}
    for rec in doc["annotations"]:
        _require(rec, ("id", "image_id", "category_id", "bbox"), f"annotation record {rec.get('id', rec)!r}")
        if rec["image_id"] not in images:
            raise ValueError(f"annotation id {rec['id']}: image_id {rec['image_id']} not in images")
        if rec["category_id"] not in category_ids:
            raise ValueError(f"annotation id {rec['id']}: unknown category_id {rec['category_id']}")
        x, y, w, h = rec["bbox"]
        if w <= 0 or h <= 0:
            raise ValueError(f"annotation id {rec['id']}: non-positive bbox size {rec['bbox']}")
        anns[rec["image_id"]].append(Annotation(Box.from_xywh(x, y, w, h), rec["category_id"]))
    out = []
    for img_id in order:
        pixels = None
        if image_dir is not None:
            pixels = _read_png(Path(image_dir) / images[img_id].get("file_name", f"{img_id:06d}.png"))
        out.append(LabelledSample(ImageSample(img_id, pixels), tuple(anns[img_id])))
    return out


def save_coco_annotations(samples: Sequence[LabelledSample], path, image_dir=None, categories=None) -> None:
    """Write ``samples`` as COCO JSON; PNGs are written too when ``image_dir`` is given."""
    path = Path(path)
    if categories is None:
        ids = sorted({a.class_id for s in samples for a in s.annotations})
        categories = [{"id": i, "name": f"class_{i}"} for i in ids]
    images, annotations = [], []
    next_ann = 1
    for s in samples:
        rec = {"id": s.image.id, "file_name": f"{s.image.id:06d}.png"}
        if s.image.pixels is not None:
            rec["height"], rec["width"] = s.image.height, s.image.width
        images.append(rec)
        for a in s.annotations:
            x, y, w, h = a.box.to_xywh()
            annotations.append(
                {
                    "id": next_ann,
                    "image_id": s.image.id,
                    "category_id": a.class_id,
                    "bbox": [x, y, w, h],
                    "area": w * h,
                    "iscrowd": 0,
                }
            )
            next_ann += 1
    if image_dir is not None:
        image_dir = Path(image_dir)
        image_dir.mkdir(parents=True, exist_ok=True)
        for s, rec in zip(samples, images):
            if s.image.pixels is not None:
                _write_png(image_dir / rec["file_name"], s.image.pixels)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump({"images": images, "annotations": annotations, "categories": categories}, fh)


def _write_png(path: Path, pixels: np.ndarray) -> None:
    from PIL import Image

    arr = np.clip(np.rint(np.asarray(pixels) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path)


def _read_png(path: Path) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32)
    return arr / 255.0
