"""Deterministic rendering of shape images and the weak/strong augmentations.

Each image is a pure function of its integer seed: 1-4 colored shapes on a
dark noisy background, quantized to 8-bit intensities so PNG round-trips
are exact. Ground-truth boxes are the exact pixel extents of each shape's
own mask (half-open coordinates, so they are integer-valued).

Augmentation draws the horizontal-flip decision first, so a weak and a
strong view built from the same seed share the flip and therefore the same
box frame; the strong view adds photometric jitter, noise and one erased
non-object region on top.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geometry import BoundingBox, iou

SHAPE_CLASSES = ("circle", "square", "triangle", "cross", "star", "ring")

WEAK = "weak"
STRONG = "strong"

_MIN_HALF = 6.0
_MAX_HALF = 11.0
_PLACE_TRIES = 30
_MAX_OVERLAP_IOU = 0.2


@dataclass
class ShapeImage:
    """Pixels in [0, 1] plus (name, box) annotations and the content seed."""

    pixels: np.ndarray
    objects: list[tuple[str, BoundingBox]]
    seed: int

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


def _polygon_mask(px: np.ndarray, py: np.ndarray, xs: list[float], ys: list[float]) -> np.ndarray:
    """Even-odd point-in-polygon test on pixel-center grids."""
    inside = np.zeros(px.shape, dtype=bool)
    j = len(xs) - 1
    for i in range(len(xs)):
        denom = ys[j] - ys[i]
        if denom != 0.0:
            straddle = (ys[i] > py) != (ys[j] > py)
            xint = (xs[j] - xs[i]) * (py - ys[i]) / denom + xs[i]
            inside ^= straddle & (px < xint)
        j = i
    return inside


def _regular_polygon(cx, cy, radii, angle):
    n = len(radii)
    xs, ys = [], []
    for i, r in enumerate(radii):
        a = angle + 2.0 * math.pi * i / n
        xs.append(cx + r * math.cos(a))
        ys.append(cy + r * math.sin(a))
    return xs, ys


def object_mask(
    shape: str, cx: float, cy: float, half: float, angle: float, height: int, width: int
) -> np.ndarray:
    """Boolean occupancy mask of one shape, evaluated at pixel centers."""
    px, py = np.meshgrid(np.arange(width) + 0.5, np.arange(height) + 0.5)
    dx = px - cx
    dy = py - cy
    if shape == "circle":
        return dx * dx + dy * dy <= half * half
    if shape == "ring":
        d2 = dx * dx + dy * dy
        return (d2 <= half * half) & (d2 >= (0.55 * half) ** 2)
    if shape == "square":
        s = 0.9 * half
        return (np.abs(dx) <= s) & (np.abs(dy) <= s)
    if shape == "cross":
        c, s = math.cos(-angle), math.sin(-angle)
        rx = c * dx - s * dy
        ry = s * dx + c * dy
        arm = 0.34 * half
        return ((np.abs(rx) <= arm) & (np.abs(ry) <= half)) | (
            (np.abs(ry) <= arm) & (np.abs(rx) <= half)
        )
    if shape == "triangle":
        xs, ys = _regular_polygon(cx, cy, [half] * 3, angle)
        return _polygon_mask(px, py, xs, ys)
    if shape == "star":
        radii = [half if i % 2 == 0 else 0.45 * half for i in range(10)]
        xs, ys = _regular_polygon(cx, cy, radii, angle)
        return _polygon_mask(px, py, xs, ys)
    raise ValueError(f"unknown shape class {shape!r}")


def mask_extent_box(mask: np.ndarray) -> BoundingBox | None:
    """Tightest half-open box around true pixels; integer coordinates."""
    rows = np.nonzero(mask.any(axis=1))[0]
    cols = np.nonzero(mask.any(axis=0))[0]
    if rows.size == 0 or cols.size == 0:
        return None
    return BoundingBox(float(cols[0]), float(rows[0]), float(cols[-1] + 1), float(rows[-1] + 1))


def render_image(
    seed: int,
    allowed_classes,
    *,
    height: int = 64,
    width: int = 64,
    min_objects: int = 1,
    max_objects: int = 4,
) -> ShapeImage:
    """Render a shape image as a pure function of ``seed``.

    Objects are drawn only from ``allowed_classes``; placement retries keep
    pairwise box IoU at or below 0.2. Pixels are quantized to 8-bit levels.
    """
    allowed = sorted(set(allowed_classes))
    if not allowed:
        raise ValueError("allowed_classes must be non-empty")
    bad = [c for c in allowed if c not in SHAPE_CLASSES]
    if bad:
        raise ValueError(f"unknown shape classes {bad}; choose from {SHAPE_CLASSES}")

    rng = np.random.default_rng(seed)
    n_objects = int(rng.integers(min_objects, max_objects + 1))
    base = rng.uniform(0.03, 0.10)
    pixels = base + rng.normal(0.0, 0.02, size=(height, width, 3))

    objects: list[tuple[str, BoundingBox]] = []
    placed_boxes: list[BoundingBox] = []
    for _ in range(n_objects):
        for _ in range(_PLACE_TRIES):
            name = allowed[int(rng.integers(len(allowed)))]
            half = float(rng.uniform(_MIN_HALF, _MAX_HALF))
            cx = float(rng.uniform(half + 1.0, width - half - 1.0))
            cy = float(rng.uniform(half + 1.0, height - half - 1.0))
            angle = float(rng.uniform(0.0, 2.0 * math.pi))
            color = rng.uniform(0.35, 1.0, size=3)
            mask = object_mask(name, cx, cy, half, angle, height, width)
            if int(mask.sum()) < 12:
                continue
            box = mask_extent_box(mask)
            if any(iou(box, other) > _MAX_OVERLAP_IOU for other in placed_boxes):
                continue
            pixels[mask] = color
            objects.append((name, box))
            placed_boxes.append(box)
            break

    pixels = np.round(np.clip(pixels, 0.0, 1.0) * 255.0) / 255.0
    return ShapeImage(pixels=pixels, objects=objects, seed=seed)


def _flip_box(box: BoundingBox, width: int) -> BoundingBox:
    return BoundingBox(width - box.x_max, box.y_min, width - box.x_min, box.y_max)


def _boxes_intersect(x0, y0, x1, y1, box: BoundingBox) -> bool:
    return not (x1 <= box.x_min or box.x_max <= x0 or y1 <= box.y_min or box.y_max <= y0)


def augment(img: ShapeImage, strength: str, seed: int) -> ShapeImage:
    """Seeded augmentation; weak is flip-only, strong adds photometric noise.

    The flip decision is the first random draw, so weak/strong views of the
    same (image, seed) pair land in the same geometric frame.
    """
    if strength not in (WEAK, STRONG):
        raise ValueError(f"strength must be '{WEAK}' or '{STRONG}', got {strength!r}")
    rng = np.random.default_rng(seed)
    pixels = img.pixels
    objects = list(img.objects)
    if rng.random() < 0.5:
        pixels = pixels[:, ::-1].copy()
        objects = [(name, _flip_box(box, img.width)) for name, box in objects]
    if strength == WEAK:
        return ShapeImage(pixels=pixels.copy(), objects=objects, seed=img.seed)

    pixels = pixels.copy()
    brightness = rng.uniform(-0.15, 0.15)
    contrast = rng.uniform(0.8, 1.25)
    pixels = (pixels - 0.5) * contrast + 0.5 + brightness
    pixels += rng.normal(0.0, 0.02, size=pixels.shape)
    pixels = np.clip(pixels, 0.0, 1.0)

    h, w = pixels.shape[:2]
    ew = int(rng.integers(6, 15))
    eh = int(rng.integers(6, 15))
    for _ in range(10):
        ex = int(rng.integers(0, w - ew + 1))
        ey = int(rng.integers(0, h - eh + 1))
        if any(_boxes_intersect(ex, ey, ex + ew, ey + eh, box) for _, box in objects):
            continue
        pixels[ey : ey + eh, ex : ex + ew] = rng.uniform(0.0, 1.0, size=(eh, ew, 3))
        break
    return ShapeImage(pixels=pixels, objects=objects, seed=img.seed)
