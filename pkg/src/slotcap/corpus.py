"""Dataset model: records, vocabulary, visual-word extraction, grounding.

Captions are tokenized by lowercasing, splitting on whitespace and stripping
punctuation from token ends.  A token is a *visual word* when its base form
is one of the fine-grained words of a detector category; everything else is
textual.  Visual words are matched to detected regions by IoU against the
ground-truth boxes of their category and demoted back to textual when no
region qualifies.
"""
from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field, replace

import numpy as np

MAX_CAPTION_TOKENS = 16
GROUNDING_IOU = 0.5

# ordered plural suffix rewrites, tried after the explicit lemma table
PLURAL_SUFFIX_RULES = (("ies", "y"), ("es", ""), ("s", ""))

_PUNCT = ".,!?;:\"'()[]"

TEXTUAL = "textual"
VISUAL = "visual"
SINGULAR = 0
PLURAL = 1


@dataclass(frozen=True)
class BoundingBox:
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        if not (self.x_max > self.x_min and self.y_max > self.y_min):
            raise ValueError(f"degenerate box {self.as_tuple()}")
        if self.x_min < 0 or self.y_min < 0:
            raise ValueError(f"negative coordinates in box {self.as_tuple()}")

    def area(self):
        return (self.x_max - self.x_min) * (self.y_max - self.y_min)

    def as_tuple(self):
        return (self.x_min, self.y_min, self.x_max, self.y_max)


def iou(a: BoundingBox, b: BoundingBox) -> float:
    """Intersection area over union area of two boxes, in [0, 1]."""
    ix = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    iy = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if ix <= 0.0 or iy <= 0.0:
        return 0.0
    inter = ix * iy
    return inter / (a.area() + b.area() - inter)


def location_feature(box: BoundingBox, width: float, height: float) -> np.ndarray:
    """Corner coordinates normalized by image size, as a 4-vector."""
    if width <= 0 or height <= 0:
        raise ValueError("image dimensions must be positive")
    return np.array([box.x_min / width, box.y_min / height,
                     box.x_max / width, box.y_max / height], dtype=np.float64)


@dataclass(frozen=True)
class RegionProposal:
    box: BoundingBox
    category: str
    confidence: float
    pooled_feature: np.ndarray
    is_ground_truth: bool = False

    def __post_init__(self):
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence {self.confidence} outside [0, 1]")
        object.__setattr__(self, "pooled_feature",
                           np.asarray(self.pooled_feature, dtype=np.float64))


@dataclass
class ImageRecord:
    image_id: object
    width: float
    height: float
    proposals: list          # filtered RegionProposals once the corpus is built
    gt_boxes: list           # (BoundingBox, category) pairs
    captions: list
    grid_features: np.ndarray | None = None
    annotated: list = field(default_factory=list)   # one token list per caption

    @classmethod
    def from_json(cls, obj):
        width, height = float(obj["width"]), float(obj["height"])

        def parse_box(coords):
            box = BoundingBox(*[float(c) for c in coords])
            if box.x_max > width or box.y_max > height:
                raise ValueError(
                    f"box {box.as_tuple()} outside image {width}x{height} "
                    f"(record {obj.get('image_id')})")
            return box

        proposals = [RegionProposal(box=parse_box(p["box"]),
                                    category=p["category"],
                                    confidence=float(p["confidence"]),
                                    pooled_feature=np.asarray(p["feature"], dtype=np.float64))
                     for p in obj.get("proposals", [])]
        gt_boxes = [(parse_box(g["box"]), g["category"]) for g in obj.get("gt_boxes", [])]
        grid = obj.get("grid_features")
        if grid is not None:
            grid = np.asarray(grid, dtype=np.float64)
        return cls(image_id=obj["image_id"], width=width, height=height,
                   proposals=proposals, gt_boxes=gt_boxes,
                   captions=list(obj.get("captions", [])), grid_features=grid)


class CategoryMap:
    """Category -> fine-grained words, plus the lemma machinery.

    Every fine-grained word belongs to exactly one category; the first word
    in a category's list is its canonical name used for word embeddings.
    """

    def __init__(self, categories, lemma_table=None, plural_irregulars=None):
        self.categories = {c: list(words) for c, words in categories.items()}
        self.lemma_table = dict(lemma_table or {})
        self.plural_irregulars = dict(plural_irregulars or {})
        self.word_to_category = {}
        self.word_to_index = {}
        for cat, words in self.categories.items():
            if not words:
                raise ValueError(f"category {cat!r} has no fine-grained words")
            for i, w in enumerate(words):
                if w in self.word_to_category:
                    raise ValueError(
                        f"fine-grained word {w!r} mapped to both "
                        f"{self.word_to_category[w]!r} and {cat!r}")
                self.word_to_category[w] = cat
                self.word_to_index[w] = i

    @classmethod
    def from_json(cls, obj):
        categories = {k: v["finegrained"] for k, v in obj.items()
                      if k not in ("lemmas", "plurals")}
        return cls(categories, obj.get("lemmas"), obj.get("plurals"))

    @classmethod
    def load(cls, path):
        with open(path) as f:
            return cls.from_json(json.load(f))

    def to_json(self):
        obj = {c: {"finegrained": words} for c, words in self.categories.items()}
        obj["lemmas"] = dict(self.lemma_table)
        obj["plurals"] = dict(self.plural_irregulars)
        return obj

    def category_names(self):
        return sorted(self.categories)

    def canonical(self, category):
        return self.categories[category][0]

    def finegrained(self, category):
        return self.categories[category]

    def lemma(self, word):
        """Base form: explicit table first, then suffix rules gated on known words."""
        if word in self.lemma_table:
            return self.lemma_table[word]
        if word in self.word_to_category:
            return word
        for suffix, repl in PLURAL_SUFFIX_RULES:
            if word.endswith(suffix) and len(word) > len(suffix):
                candidate = word[: -len(suffix)] + repl
                if candidate in self.word_to_category:
                    return candidate
        return word

    def pluralize(self, word):
        """Surface plural of a base form: irregulars first, then suffix rules."""
        if word in self.plural_irregulars:
            return self.plural_irregulars[word]
        if word.endswith("y") and len(word) > 1 and word[-2] not in "aeiou":
            return word[:-1] + "ies"
        if word.endswith(("s", "x", "z", "ch", "sh")):
            return word + "es"
        return word + "s"


def tokenize(text):
    """Lowercase, split on whitespace, strip punctuation from token ends."""
    tokens = []
    for raw in text.lower().split():
        tok = raw.strip(_PUNCT)
        if tok:
            tokens.append(tok)
    return tokens


class Vocabulary:
    """Dense word -> index map over the textual vocabulary plus specials."""

    BOS = "<s>"
    EOS = "</s>"
    UNK = "<unk>"

    def __init__(self, words):
        self._words = [self.BOS, self.EOS, self.UNK] + [
            w for w in words if w not in (self.BOS, self.EOS, self.UNK)]
        self._index = {w: i for i, w in enumerate(self._words)}

    def __len__(self):
        return len(self._words)

    def __contains__(self, word):
        return word in self._index

    def index(self, word):
        return self._index.get(word, self._index[self.UNK])

    def word(self, i):
        return self._words[i]

    @property
    def bos_index(self):
        return self._index[self.BOS]

    @property
    def eos_index(self):
        return self._index[self.EOS]

    @property
    def unk_index(self):
        return self._index[self.UNK]

    def words(self):
        return list(self._words)


def build_vocabulary(captions, min_count=5):
    """Vocabulary of words appearing at least ``min_count`` times.

    ``captions`` is an iterable of token lists.  Words are ordered by
    descending count, ties alphabetical, so indices are deterministic.
    """
    counts = Counter()
    n = 0
    for tokens in captions:
        n += 1
        counts.update(tokens)
    if n == 0:
        raise ValueError("cannot build a vocabulary from an empty caption list")
    kept = sorted((w for w, c in counts.items() if c >= min_count),
                  key=lambda w: (-counts[w], w))
    return Vocabulary(kept)


@dataclass(frozen=True)
class AnnotatedToken:
    surface: str
    kind: str                      # TEXTUAL or VISUAL
    category: str | None = None
    plurality_target: int | None = None   # SINGULAR / PLURAL
    finegrained_target: int | None = None
    grounding_regions: tuple = ()
    vocab_index: int | None = None  # surface word in the textual vocabulary
    input_index: int | None = None  # embedding row fed when this token is input

    def __post_init__(self):
        if self.kind == VISUAL and self.category is None:
            raise ValueError("visual token without a category")


def extract_visual_words(tokens, category_map):
    """Tag each token visual or textual and set plurality/fine-grained targets.

    Grounding regions are not assigned here; see match_grounding_regions.
    """
    out = []
    for surface in tokens:
        lemma = category_map.lemma(surface)
        cat = category_map.word_to_category.get(lemma)
        if cat is None:
            out.append(AnnotatedToken(surface=surface, kind=TEXTUAL))
        else:
            out.append(AnnotatedToken(
                surface=surface, kind=VISUAL, category=cat,
                plurality_target=PLURAL if surface != lemma else SINGULAR,
                finegrained_target=category_map.word_to_index[lemma]))
    return out


def match_grounding_regions(token, record, threshold=GROUNDING_IOU):
    """Attach grounding regions to a visual token, or demote it to textual.

    A proposal grounds the token when it has the token's category and IoU at
    least ``threshold`` with some ground-truth box of that category.
    """
    if token.kind != VISUAL:
        return token
    gt = [box for box, cat in record.gt_boxes if cat == token.category]
    regions = tuple(
        i for i, prop in enumerate(record.proposals)
        if prop.category == token.category
        and any(iou(prop.box, g) >= threshold for g in gt))
    if not regions:
        return AnnotatedToken(surface=token.surface, kind=TEXTUAL)
    return replace(token, grounding_regions=regions)


def filter_proposals(proposals, nms_iou=0.7, class_iou=0.3, min_conf=0.5):
    """Greedy NMS across all proposals, then per-category NMS, then a
    confidence floor.  Output is ordered by descending confidence with ties
    broken by input index."""
    order = sorted(range(len(proposals)),
                   key=lambda i: (-proposals[i].confidence, i))
    kept = []
    for i in order:
        if all(iou(proposals[i].box, proposals[j].box) <= nms_iou for j in kept):
            kept.append(i)
    by_class = []
    for i in kept:
        same = (j for j in by_class if proposals[j].category == proposals[i].category)
        if all(iou(proposals[i].box, proposals[j].box) <= class_iou for j in same):
            by_class.append(i)
    return [proposals[i] for i in by_class if proposals[i].confidence >= min_conf]


@dataclass
class Corpus:
    records: list
    vocabulary: Vocabulary
    category_map: CategoryMap

    def examples(self):
        """All (record, annotated caption) pairs, in dataset order."""
        return [(rec, tokens) for rec in self.records for tokens in rec.annotated]


def mentioned_categories(tokens, category_map):
    """Categories whose fine-grained words appear (by lemma) in the tokens."""
    cats = set()
    for tok in tokens:
        cat = category_map.word_to_category.get(category_map.lemma(tok))
        if cat is not None:
            cats.add(cat)
    return cats


def annotate_record(record, category_map, vocab, threshold=GROUNDING_IOU):
    """Tokenize, truncate, tag and ground every caption of a record."""
    record.annotated = []
    for caption in record.captions:
        tokens = tokenize(caption)[:MAX_CAPTION_TOKENS]
        annotated = []
        for token in extract_visual_words(tokens, category_map):
            token = match_grounding_regions(token, record, threshold)
            if token.kind == VISUAL:
                feed = vocab.index(category_map.canonical(token.category))
            else:
                feed = vocab.index(token.surface)
            annotated.append(replace(token,
                                     vocab_index=vocab.index(token.surface),
                                     input_index=feed))
        record.annotated.append(annotated)
    return record


def load_records(path):
    """Parse a JSON-lines dataset into ImageRecords (no filtering)."""
    records = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if line:
                records.append(ImageRecord.from_json(json.loads(line)))
    return records


def build_corpus(records, category_map, min_count=5, nms_iou=0.7,
                 class_iou=0.3, min_conf=0.5, grounding_iou=GROUNDING_IOU):
    """Filter proposals, build the vocabulary and annotate every caption."""
    if not records:
        raise ValueError("cannot build a corpus from zero records")
    for rec in records:
        rec.proposals = filter_proposals(rec.proposals, nms_iou, class_iou, min_conf)
    vocab = build_vocabulary(
        (tokenize(c)[:MAX_CAPTION_TOKENS] for rec in records for c in rec.captions),
        min_count=min_count)
    for rec in records:
        annotate_record(rec, category_map, vocab, grounding_iou)
    return Corpus(records=records, vocabulary=vocab, category_map=category_map)


def load_corpus(path, category_map, **kwargs):
    return build_corpus(load_records(path), category_map, **kwargs)
