"""Dataset split construction, manifests and loaders.

Three disjoint-seed splits are generated: a labeled split containing only
ID-class objects, an unlabeled split mixing ID and OOD objects whose
annotations are withheld from training (kept on disk for diagnostics), and
a test split where OOD objects are relabeled "unknown". Manifests are
line-delimited JSON and images are lossless PNG, so equal configs produce
byte-identical outputs.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .geometry import BoundingBox
from .labels import UNKNOWN_NAME, LabelSpace
from .shapes import SHAPE_CLASSES, ShapeImage, render_image

SPLIT_LABELED = "labeled"
SPLIT_UNLABELED = "unlabeled"
SPLIT_TEST = "test"
SPLIT_NAMES = (SPLIT_LABELED, SPLIT_UNLABELED, SPLIT_TEST)

_SEED_STRIDE = 1_000_003  # keeps seed blocks of different run seeds apart


class SplitGenerationError(RuntimeError):
    pass


@dataclass(frozen=True)
class SplitConfig:
    id_classes: tuple[str, ...]
    ood_classes: tuple[str, ...]
    num_labeled: int
    num_unlabeled: int
    num_test: int
    seed: int
    image_size: int = 64

    def __post_init__(self):
        id_set, ood_set = set(self.id_classes), set(self.ood_classes)
        if not id_set or not ood_set:
            raise ValueError("id_classes and ood_classes must both be non-empty")
        if id_set & ood_set:
            raise ValueError(f"id/ood classes overlap: {sorted(id_set & ood_set)}")
        unknown = (id_set | ood_set) - set(SHAPE_CLASSES)
        if unknown:
            raise ValueError(f"unknown shape classes {sorted(unknown)}")
        if min(self.num_labeled, self.num_unlabeled, self.num_test) < 1:
            raise ValueError("all split sizes must be at least 1")
        if self.image_size % 8 != 0:
            raise ValueError("image_size must be divisible by 8")


@dataclass(frozen=True)
class ObjectAnnotation:
    shape: str   # rendered shape class
    label: str   # training label: ID class name or "unknown"
    box: BoundingBox


@dataclass(frozen=True)
class ImageRecord:
    seed: int
    split: str
    path: str
    width: int
    height: int
    objects: tuple[ObjectAnnotation, ...]


@dataclass
class DatasetItem:
    """One image plus (optionally) its target arrays in internal label ids."""

    record: ImageRecord
    image: ShapeImage
    labels: np.ndarray | None
    boxes: np.ndarray | None


def label_space_for(cfg: SplitConfig) -> LabelSpace:
    return LabelSpace(tuple(sorted(cfg.id_classes)))


def _make_record(cfg: SplitConfig, split: str, img: ShapeImage) -> ImageRecord:
    id_set = set(cfg.id_classes)
    anns = []
    for shape, box in img.objects:
        label = shape if split == SPLIT_LABELED or shape in id_set else UNKNOWN_NAME
        anns.append(ObjectAnnotation(shape=shape, label=label, box=box))
    return ImageRecord(
        seed=img.seed,
        split=split,
        path=f"images/{split}_{img.seed}.png",
        width=img.width,
        height=img.height,
        objects=tuple(anns),
    )


def build_splits(cfg: SplitConfig) -> dict[str, list[tuple[ImageRecord, ShapeImage]]]:
    """Render all three splits in memory, deterministically from cfg."""
    size = cfg.image_size
    base = cfg.seed * _SEED_STRIDE
    all_classes = tuple(sorted(set(cfg.id_classes) | set(cfg.ood_classes)))
    ood_set = set(cfg.ood_classes)

    labeled = []
    for s in range(base, base + cfg.num_labeled):
        img = render_image(s, cfg.id_classes, height=size, width=size)
        labeled.append((_make_record(cfg, SPLIT_LABELED, img), img))

    test = []
    for s in range(base + cfg.num_labeled, base + cfg.num_labeled + cfg.num_test):
        img = render_image(s, all_classes, height=size, width=size)
        test.append((_make_record(cfg, SPLIT_TEST, img), img))

    unlabeled_start = base + cfg.num_labeled + cfg.num_test
    for attempt in range(16):
        start = unlabeled_start + attempt * cfg.num_unlabeled
        unlabeled = []
        has_ood = False
        for s in range(start, start + cfg.num_unlabeled):
            img = render_image(s, all_classes, height=size, width=size)
            has_ood = has_ood or any(shape in ood_set for shape, _ in img.objects)
            unlabeled.append((_make_record(cfg, SPLIT_UNLABELED, img), img))
        if has_ood:
            break
    else:  # pragma: no cover - vanishingly unlikely for sane sizes
        raise SplitGenerationError("could not generate an unlabeled split containing OOD objects")

    seeds = [r.seed for recs in (labeled, unlabeled, test) for r, _ in recs]
    if len(seeds) != len(set(seeds)):
        raise SplitGenerationError("split seed ranges overlap")
    return {SPLIT_LABELED: labeled, SPLIT_UNLABELED: unlabeled, SPLIT_TEST: test}


# ------------------------------------------------------------ persistence --


def _record_to_json(record: ImageRecord) -> str:
    payload = {
        "seed": record.seed,
        "split": record.split,
        "path": record.path,
        "width": record.width,
        "height": record.height,
        "objects": [
            {
                "shape": a.shape,
                "label": a.label,
                "box": [a.box.x_min, a.box.y_min, a.box.x_max, a.box.y_max],
            }
            for a in record.objects
        ],
    }
    return json.dumps(payload, sort_keys=True)


def _record_from_json(line: str) -> ImageRecord:
    d = json.loads(line)
    objects = tuple(
        ObjectAnnotation(shape=o["shape"], label=o["label"], box=BoundingBox(*o["box"]))
        for o in d["objects"]
    )
    return ImageRecord(
        seed=d["seed"], split=d["split"], path=d["path"],
        width=d["width"], height=d["height"], objects=objects,
    )


def save_image_png(path: Path, img: ShapeImage):
    arr = np.round(img.pixels * 255.0).astype(np.uint8)
    Image.fromarray(arr).save(path, format="PNG")


def load_image_png(path: Path) -> np.ndarray:
    arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.uint8)
    return arr.astype(np.float64) / 255.0


def write_splits(cfg: SplitConfig, out_dir: Path, force: bool = False) -> dict[str, Path]:
    """Write manifests and PNGs under ``out_dir``; refuses to clobber without force."""
    out_dir = Path(out_dir)
    if out_dir.exists() and any(out_dir.iterdir()) and not force:
        raise FileExistsError(f"split directory {out_dir} already exists (use --force to overwrite)")
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    splits = build_splits(cfg)
    paths = {}
    for split, entries in splits.items():
        manifest = out_dir / f"{split}.jsonl"
        with open(manifest, "w") as fh:
            for record, img in entries:
                save_image_png(out_dir / record.path, img)
                fh.write(_record_to_json(record) + "\n")
        paths[split] = manifest
    return paths


def read_manifest(path: Path) -> list[ImageRecord]:
    with open(path) as fh:
        return [_record_from_json(line) for line in fh if line.strip()]


def _item_from_record(
    record: ImageRecord, img: ShapeImage, space: LabelSpace, with_annotations: bool
) -> DatasetItem:
    if not with_annotations:
        image = ShapeImage(pixels=img.pixels, objects=[], seed=img.seed)
        return DatasetItem(record=record, image=image, labels=None, boxes=None)
    labels = np.array([space.index_of(a.label) for a in record.objects], dtype=np.int64)
    boxes = (
        np.stack([a.box.as_array() for a in record.objects])
        if record.objects
        else np.zeros((0, 4))
    )
    image = ShapeImage(
        pixels=img.pixels, objects=[(a.label, a.box) for a in record.objects], seed=img.seed
    )
    return DatasetItem(record=record, image=image, labels=labels, boxes=boxes)


def load_training_split(manifest: Path, root: Path, space: LabelSpace) -> list[DatasetItem]:
    """Training loader: unlabeled images come back with annotations stripped."""
    items = []
    for record in read_manifest(manifest):
        pixels = load_image_png(Path(root) / record.path)
        img = ShapeImage(pixels=pixels, objects=[], seed=record.seed)
        items.append(_item_from_record(record, img, space, record.split != SPLIT_UNLABELED))
    return items


def load_diagnostic_split(manifest: Path, root: Path, space: LabelSpace) -> list[DatasetItem]:
    """Diagnostic loader: hidden annotations included for every split."""
    items = []
    for record in read_manifest(manifest):
        pixels = load_image_png(Path(root) / record.path)
        img = ShapeImage(pixels=pixels, objects=[], seed=record.seed)
        items.append(_item_from_record(record, img, space, True))
    return items


def items_from_memory(cfg: SplitConfig, space: LabelSpace) -> dict[str, list[DatasetItem]]:
    """In-memory variant of the loaders, for tests and quick experiments."""
    splits = build_splits(cfg)
    out = {}
    for split, entries in splits.items():
        with_ann = split != SPLIT_UNLABELED
        out[split] = [_item_from_record(r, img, space, with_ann) for r, img in entries]
    return out
