"""Split builders: compositional (rare co-occurring pairs held out) and
novel-object exclusion splits, driven by caption category mentions."""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .corpus import mentioned_categories, tokenize

TRAIN, VAL, TEST = "train", "val", "test"


@dataclass
class CooccurrenceMatrix:
    categories: list                 # sorted category names
    counts: np.ndarray               # CxC symmetric, zero diagonal
    instance_counts: dict            # category -> images mentioning it

    def pair_count(self, a, b):
        i, j = self.categories.index(a), self.categories.index(b)
        return int(self.counts[i, j])


@dataclass
class SplitAssignment:
    assignment: dict                 # image_id -> TRAIN | VAL | TEST
    excluded_pairs: list = field(default_factory=list)
    excluded_categories: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def ids(self, part):
        return [i for i, p in self.assignment.items() if p == part]

    def to_json(self):
        meta = dict(self.meta)
        if self.excluded_pairs:
            meta["excluded_pairs"] = [list(p) for p in self.excluded_pairs]
        if self.excluded_categories:
            meta["excluded_categories"] = list(self.excluded_categories)
        return {"train": self.ids(TRAIN), "val": self.ids(VAL),
                "test": self.ids(TEST), "meta": meta}

    @classmethod
    def from_json(cls, obj):
        assignment = {}
        for part in (TRAIN, VAL, TEST):
            for i in obj.get(part, []):
                assignment[i] = part
        meta = dict(obj.get("meta", {}))
        pairs = [tuple(p) for p in meta.pop("excluded_pairs", [])]
        cats = list(meta.pop("excluded_categories", []))
        return cls(assignment=assignment, excluded_pairs=pairs,
                   excluded_categories=cats, meta=meta)

    def save(self, path):
        with open(path, "w") as f:
            json.dump(self.to_json(), f, sort_keys=True, separators=(",", ":"))
            f.write("\n")

    @classmethod
    def load(cls, path):
        with open(path) as f:
            return cls.from_json(json.load(f))


def record_mentions(record, category_map):
    """Union of categories mentioned across a record's captions."""
    cats = set()
    for caption in record.captions:
        cats |= mentioned_categories(tokenize(caption), category_map)
    return cats


def cooccurrence(corpus):
    """Per-image co-occurrence counts of mentioned category pairs."""
    categories = corpus.category_map.category_names()
    index = {c: i for i, c in enumerate(categories)}
    counts = np.zeros((len(categories), len(categories)), dtype=np.int64)
    instances = {c: 0 for c in categories}
    for record in corpus.records:
        cats = sorted(record_mentions(record, corpus.category_map))
        for c in cats:
            instances[c] += 1
        for i, a in enumerate(cats):
            for b in cats[i + 1:]:
                counts[index[a], index[b]] += 1
                counts[index[b], index[a]] += 1
    return CooccurrenceMatrix(categories=categories, counts=counts,
                              instance_counts=instances)


def build_robust_split(corpus, val_fraction=0.1, seed=42):
    """Hold out images of the rarest co-occurring category pairs.

    Pairs are visited by ascending count (ties lexicographic).  A pair's
    images move to test unless that would leave some category with fewer
    than half its instances in train.  Val is carved from train at the end
    with the given seed.
    """
    if not corpus.records:
        raise ValueError("cannot split an empty corpus")
    matrix = cooccurrence(corpus)
    mentions = {rec.image_id: record_mentions(rec, corpus.category_map)
                for rec in corpus.records}
    totals = matrix.instance_counts
    required = {c: -(-totals[c] // 2) for c in totals}   # ceil(total/2)
    train_counts = dict(totals)
    assignment = {rec.image_id: TRAIN for rec in corpus.records}

    pairs = []
    for i, a in enumerate(matrix.categories):
        for j in range(i + 1, len(matrix.categories)):
            count = int(matrix.counts[i, j])
            if count > 0:
                pairs.append((count, a, matrix.categories[j]))
    pairs.sort()

    excluded = []
    for _, a, b in pairs:
        movers = [rec.image_id for rec in corpus.records
                  if assignment[rec.image_id] == TRAIN
                  and a in mentions[rec.image_id] and b in mentions[rec.image_id]]
        if not movers:
            continue
        lost = {}
        for i in movers:
            for c in mentions[i]:
                lost[c] = lost.get(c, 0) + 1
        if any(train_counts[c] - n < required[c] for c, n in lost.items()):
            continue
        for i in movers:
            assignment[i] = TEST
            for c in mentions[i]:
                train_counts[c] -= 1
        excluded.append((a, b))

    train_ids = [rec.image_id for rec in corpus.records
                 if assignment[rec.image_id] == TRAIN]
    rng = np.random.default_rng(seed)
    n_val = int(len(train_ids) * val_fraction)
    for idx in rng.permutation(len(train_ids))[:n_val]:
        assignment[train_ids[idx]] = VAL
    if not any(p == TRAIN for p in assignment.values()):
        blocking = sorted(c for c in totals if totals[c] > 0)
        raise ValueError(
            f"corpus too small: no records left for training "
            f"(categories involved: {blocking})")
    return SplitAssignment(assignment=assignment, excluded_pairs=excluded)


def build_exclusion_split(corpus, excluded, test_fraction=0.2,
                          val_fraction=0.1, seed=42):
    """Drop every record mentioning an excluded category from training.

    Mentioning records form the out-of-domain test set; an in-domain test
    set of clean records is carved out so both subsets exist.  Per-category
    positives (which test images mention which excluded category) are kept
    in the metadata for F1 scoring.
    """
    known = set(corpus.category_map.categories)
    unknown = [c for c in excluded if c not in known]
    if unknown:
        raise ValueError(f"excluded categories not in the category map: {unknown}")
    mentions = {rec.image_id: record_mentions(rec, corpus.category_map)
                for rec in corpus.records}
    excluded = list(excluded)
    out_ids = [rec.image_id for rec in corpus.records
               if mentions[rec.image_id] & set(excluded)]
    clean = [rec.image_id for rec in corpus.records
             if not mentions[rec.image_id] & set(excluded)]
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(clean))
    n_test = int(len(clean) * test_fraction)
    n_val = int(len(clean) * val_fraction)
    assignment = {i: TEST for i in out_ids}
    for pos, idx in enumerate(order):
        if pos < n_test:
            assignment[clean[idx]] = TEST
        elif pos < n_test + n_val:
            assignment[clean[idx]] = VAL
        else:
            assignment[clean[idx]] = TRAIN
    positives = {c: sorted((i for i in out_ids if c in mentions[i]), key=str)
                 for c in excluded}
    meta = {"out_of_domain": sorted(out_ids, key=str),
            "in_domain_test": sorted((i for i in clean
                                      if assignment[i] == TEST), key=str),
            "category_positives": positives}
    return SplitAssignment(assignment=assignment,
                           excluded_categories=excluded, meta=meta)


DEFAULT_EXCLUDED = ("bottle", "bus", "couch", "microwave",
                    "pizza", "racket", "suitcase", "zebra")
