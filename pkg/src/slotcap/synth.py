"""Synthetic dataset generator.

Emits JSON-lines records with known ground truth: every object gets a
ground-truth box, at least one proposal overlapping it at IoU >= 0.5 with
the right category, and captions built from a small grammar whose visual
words name the placed objects.  Pooled features carry a noisy one-hot of
the category so the pointer has signal to learn from.
"""
from __future__ import annotations

import importlib.resources
import json
from dataclasses import dataclass, field

import numpy as np

from .corpus import CategoryMap

TWO_OBJECT_PATTERNS = (
    "a {a} and a {b}",
    "a {a} next to a {b}",
    "a {a} on a {b}",
    "a {a} near a {b}",
    "the {a} by a {b}",
)
ONE_OBJECT_PATTERNS = (
    "a {a} in the picture",
    "there is a {a} here",
    "a {a} all alone",
)
PLURAL_PATTERNS = (
    "some {a} and a {b}",
    "two {a} near a {b}",
)


@dataclass
class SynthSpec:
    n_images: int = 20
    categories: list = field(default_factory=list)   # empty -> all in the map
    image_size: int = 256
    min_objects: int = 1
    max_objects: int = 2
    max_distractors: int = 1
    captions_per_image: int = 1
    plural_fraction: float = 0.15
    d_p: int = 0                # 0 -> one-hot size (len(categories) + 2)
    grid_count: int = 4
    seed: int = 42

    def validate(self):
        if self.n_images <= 0:
            raise ValueError("n_images must be positive")
        if not 1 <= self.min_objects <= self.max_objects <= 2:
            raise ValueError("objects per image must satisfy 1 <= min <= max <= 2")
        if self.captions_per_image < 1:
            raise ValueError("captions_per_image must be >= 1")
        if not 0 <= self.plural_fraction <= 1:
            raise ValueError("plural_fraction must be in [0, 1]")


def default_category_map():
    """The toy category map shipped with the package."""
    text = (importlib.resources.files("slotcap.data") / "toy_categories.json"
            ).read_text()
    return CategoryMap.from_json(json.loads(text))


def _iou(a, b):
    ix = min(a[2], b[2]) - max(a[0], b[0])
    iy = min(a[3], b[3]) - max(a[1], b[1])
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    area_a = (a[2] - a[0]) * (a[3] - a[1])
    area_b = (b[2] - b[0]) * (b[3] - b[1])
    return inter / (area_a + area_b - inter)


def _random_box(rng, size):
    w = rng.uniform(0.2 * size, 0.45 * size)
    h = rng.uniform(0.2 * size, 0.45 * size)
    x = rng.uniform(0, size - w)
    y = rng.uniform(0, size - h)
    return [x, y, x + w, y + h]


def _jitter_box(rng, box, size):
    """A box overlapping the input at IoU well above 0.5."""
    x1, y1, x2, y2 = box
    w, h = x2 - x1, y2 - y1
    dx = rng.uniform(-0.08, 0.08) * w
    dy = rng.uniform(-0.08, 0.08) * h
    nx1 = min(max(x1 + dx, 0.0), size - 1.0)
    ny1 = min(max(y1 + dy, 0.0), size - 1.0)
    nx2 = max(min(x2 + dx, float(size)), nx1 + 1.0)
    ny2 = max(min(y2 + dy, float(size)), ny1 + 1.0)
    return [nx1, ny1, nx2, ny2]


def _feature(rng, cat_idx, d_p):
    f = rng.normal(0.0, 0.05, size=d_p)
    f[cat_idx] += 1.0
    return f


def generate_records(spec, category_map=None):
    """List of JSON-ready record dicts; deterministic given the seed."""
    spec.validate()
    category_map = category_map or default_category_map()
    categories = list(spec.categories) or category_map.category_names()
    unknown = [c for c in categories if c not in category_map.categories]
    if unknown:
        raise ValueError(f"unknown categories in synthesis spec: {unknown}")
    if len(categories) < spec.max_objects:
        raise ValueError("need at least max_objects distinct categories")
    cat_idx = {c: i for i, c in enumerate(categories)}
    d_p = spec.d_p or len(categories) + 2
    if d_p < len(categories):
        raise ValueError("d_p smaller than the category count leaves features ambiguous")
    rng = np.random.default_rng(spec.seed)
    size = spec.image_size
    records = []
    for n in range(spec.n_images):
        n_objects = int(rng.integers(spec.min_objects, spec.max_objects + 1))
        chosen = [categories[i] for i in
                  rng.choice(len(categories), size=n_objects, replace=False)]
        gt_boxes, proposals = [], []
        for cat in chosen:
            box = _random_box(rng, size)
            # keep objects apart so NMS never eats a ground-truth proposal
            while any(_iou(box, g["box"]) > 0.3 for g in gt_boxes):
                box = _random_box(rng, size)
            gt_boxes.append({"box": box, "category": cat})
            proposals.append({
                "box": _jitter_box(rng, box, size),
                "category": cat,
                "confidence": float(rng.uniform(0.75, 0.99)),
                "feature": _feature(rng, cat_idx[cat], d_p).tolist(),
            })
        others = [c for c in categories if c not in chosen]
        n_distract = int(rng.integers(0, spec.max_distractors + 1))
        for _ in range(min(n_distract, len(others))):
            cat = others[int(rng.integers(len(others)))]
            others.remove(cat)
            proposals.append({
                "box": _random_box(rng, size),
                "category": cat,
                "confidence": float(rng.uniform(0.55, 0.7)),
                "feature": _feature(rng, cat_idx[cat], d_p).tolist(),
            })
        captions = [_caption(rng, chosen, category_map, spec.plural_fraction)
                    for _ in range(spec.captions_per_image)]
        grid = rng.normal(0.0, 0.1, size=(spec.grid_count, d_p))
        records.append({
            "image_id": n,
            "width": size,
            "height": size,
            "proposals": proposals,
            "gt_boxes": gt_boxes,
            "grid_features": grid.tolist(),
            "captions": captions,
        })
    return records


def _caption(rng, chosen, category_map, plural_fraction):
    def surface(cat, plural=False):
        words = category_map.finegrained(cat)
        word = words[int(rng.integers(len(words)))]
        return category_map.pluralize(word) if plural else word

    if len(chosen) == 1:
        pattern = ONE_OBJECT_PATTERNS[int(rng.integers(len(ONE_OBJECT_PATTERNS)))]
        return pattern.format(a=surface(chosen[0]))
    if rng.uniform() < plural_fraction:
        pattern = PLURAL_PATTERNS[int(rng.integers(len(PLURAL_PATTERNS)))]
        return pattern.format(a=surface(chosen[0], plural=True),
                              b=surface(chosen[1]))
    pattern = TWO_OBJECT_PATTERNS[int(rng.integers(len(TWO_OBJECT_PATTERNS)))]
    return pattern.format(a=surface(chosen[0]), b=surface(chosen[1]))


def write_dataset(path, records):
    with open(path, "w") as f:
        for record in records:
            json.dump(record, f, sort_keys=True, separators=(",", ":"))
            f.write("\n")
