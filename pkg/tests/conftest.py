import numpy as np
import pytest

from slotcap import (BoundingBox, CategoryMap, ImageRecord, ModelConfig,
                     RegionProposal, Vocabulary, init_params)
from slotcap.corpus import build_corpus


@pytest.fixture
def toy_map():
    return CategoryMap(
        {
            "dog": ["dog", "puppy", "pup"],
            "cat": ["cat", "kitten"],
            "cake": ["cake", "cupcake"],
            "table": ["table", "desk"],
            "sheep": ["sheep", "lamb"],
            "bus": ["bus"],
        },
        lemma_table={"sheep": "sheep", "people": "person"},
        plural_irregulars={"sheep": "sheep"},
    )


def make_box(x1, y1, x2, y2):
    return BoundingBox(x1, y1, x2, y2)


def make_proposal(box, category, confidence=0.9, d_p=4, feature=None):
    if feature is None:
        feature = np.zeros(d_p)
    return RegionProposal(box=box, category=category, confidence=confidence,
                          pooled_feature=feature)


def make_record(image_id=0, width=100.0, height=100.0, proposals=(),
                gt_boxes=(), captions=(), grid=None):
    return ImageRecord(image_id=image_id, width=width, height=height,
                       proposals=list(proposals), gt_boxes=list(gt_boxes),
                       captions=list(captions), grid_features=grid)


@pytest.fixture
def tiny_setup(toy_map):
    """A small untrained model plus a two-region record and vocabulary."""
    rng = np.random.default_rng(3)
    d_p = 4
    vocab = Vocabulary(["a", "on", "the", "sitting", "and", "dog", "cat",
                        "table"])
    config = ModelConfig(d=12, m=6, d_p=d_p, d_l=3, d_g=5,
                         vocab_size=len(vocab), embed_dim=5, grid_count=2,
                         k_max=3)
    params = init_params(config, toy_map, seed=5)
    record = make_record(
        proposals=[
            make_proposal(make_box(10, 10, 40, 40), "dog", 0.9, d_p,
                          rng.normal(size=d_p)),
            make_proposal(make_box(50, 50, 90, 90), "table", 0.8, d_p,
                          rng.normal(size=d_p)),
        ],
        gt_boxes=[(make_box(10, 10, 40, 40), "dog"),
                  (make_box(50, 50, 90, 90), "table")],
        captions=["a puppy sitting on a table"],
        grid=rng.normal(size=(2, d_p)),
    )
    return params, record, vocab, toy_map


def synth_corpus(n_images=20, seed=42, categories=None, **kwargs):
    """Build an annotated corpus from the synthetic generator."""
    from slotcap import synth

    spec = synth.SynthSpec(
        n_images=n_images, seed=seed,
        categories=categories or ["dog", "cat", "cake", "table", "pizza",
                                  "bird", "horse", "car"],
        **kwargs)
    category_map = synth.default_category_map()
    records = [ImageRecord.from_json(obj)
               for obj in synth.generate_records(spec, category_map)]
    return build_corpus(records, category_map, min_count=1), category_map


def independent_robust_split(corpus, category_map):
    """Plain-dict re-implementation of the greedy robust-split builder,
    used as an oracle against the production code."""
    from slotcap.splits import TEST, TRAIN, record_mentions

    mentions = {r.image_id: record_mentions(r, category_map)
                for r in corpus.records}
    pair_images = {}
    for i, cats in mentions.items():
        cats = sorted(cats)
        for x in range(len(cats)):
            for y in range(x + 1, len(cats)):
                pair_images.setdefault((cats[x], cats[y]), []).append(i)
    totals = {}
    for cats in mentions.values():
        for c in cats:
            totals[c] = totals.get(c, 0) + 1
    in_train = {i: True for i in mentions}
    excluded = []
    for pair in sorted(pair_images, key=lambda p: (len(pair_images[p]), p)):
        movers = [i for i in pair_images[pair] if in_train[i]]
        if not movers:
            continue
        ok = True
        for c, total in totals.items():
            now = sum(1 for i in mentions if in_train[i] and c in mentions[i])
            lost = sum(1 for i in movers if c in mentions[i])
            if now - lost < (total + 1) // 2:
                ok = False
                break
        if ok:
            for i in movers:
                in_train[i] = False
            excluded.append(pair)
    return {i: (TRAIN if t else TEST) for i, t in in_train.items()}, excluded
