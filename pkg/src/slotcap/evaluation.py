"""Caption metrics: BLEU-n, compositional-pair accuracy, novel-object F1 and
grounding accuracy.

"Mention" is always lemma-based through the category map, never substring
matching, so "busy" does not count as mentioning a bus.  All metrics
normalize case and terminal punctuation first.
"""
from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass

from .corpus import iou, mentioned_categories, tokenize


def _ngrams(tokens, n):
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def corpus_bleu(candidates, references, n):
    """Corpus-level BLEU-n: clipped n-gram precision, geometric mean over
    orders 1..n, brevity penalty against the closest reference length.
    No smoothing; any empty order zeroes the score."""
    if not 1 <= n <= 4:
        raise ValueError("n must be in 1..4")
    if len(candidates) != len(references):
        raise ValueError("candidate/reference count mismatch")
    matched = [0] * n
    total = [0] * n
    cand_len = 0
    ref_len = 0
    for cand, refs in zip(candidates, references):
        if not refs:
            raise ValueError("every candidate needs at least one reference")
        cand_len += len(cand)
        ref_len += min((len(r) for r in refs),
                       key=lambda L: (abs(L - len(cand)), L))
        for k in range(1, n + 1):
            counts = _ngrams(cand, k)
            if not counts:
                continue
            best = Counter()
            for ref in refs:
                for gram, c in _ngrams(ref, k).items():
                    if c > best[gram]:
                        best[gram] = c
            matched[k - 1] += sum(min(c, best[gram]) for gram, c in counts.items())
            total[k - 1] += sum(counts.values())
    if cand_len == 0 or any(t == 0 for t in total) or any(m == 0 for m in matched):
        return 0.0
    log_precision = sum(math.log(m / t) for m, t in zip(matched, total)) / n
    brevity = 1.0 if cand_len > ref_len else math.exp(1.0 - ref_len / cand_len)
    return brevity * math.exp(log_precision)


def bleu_n(candidate, references, n):
    """BLEU-n of a single candidate against its references."""
    return corpus_bleu([candidate], [references], n)


def sentence_bleu_smoothed(candidate, references, n):
    """Sentence-level BLEU with +1 smoothing on every order (so short or
    imperfect sentences score above zero); labeled, non-standard."""
    if not candidate:
        return 0.0
    matched = [0] * n
    total = [0] * n
    for k in range(1, n + 1):
        counts = _ngrams(candidate, k)
        best = Counter()
        for ref in references:
            for gram, c in _ngrams(ref, k).items():
                if c > best[gram]:
                    best[gram] = c
        matched[k - 1] = sum(min(c, best[gram]) for gram, c in counts.items())
        total[k - 1] = sum(counts.values())
    log_precision = sum(math.log((m + 1) / (t + 1))
                        for m, t in zip(matched, total)) / n
    ref_len = min((len(r) for r in references),
                  key=lambda L: (abs(L - len(candidate)), L))
    brevity = 1.0 if len(candidate) > ref_len else math.exp(1.0 - ref_len / len(candidate))
    return brevity * math.exp(log_precision)


def caption_mentions(caption, category_map):
    """Categories mentioned in a raw caption string."""
    return mentioned_categories(tokenize(caption), category_map)


def compositional_accuracy(captions, pair_annotations, category_map):
    """Percent of images whose caption mentions both halves of at least one
    annotated held-out pair.  ``captions`` and ``pair_annotations`` map
    image id to caption string / list of category pairs."""
    scored = 0
    hits = 0
    for image_id, pairs in pair_annotations.items():
        if not pairs:
            continue
        scored += 1
        mentions = caption_mentions(captions.get(image_id, ""), category_map)
        if any(a in mentions and b in mentions for a, b in pairs):
            hits += 1
    if scored == 0:
        return 0.0
    return 100.0 * hits / scored


def heldout_pairs(corpus, split, category_map):
    """Which excluded pairs each test image actually exhibits (both
    categories mentioned in its ground-truth captions)."""
    from .splits import TEST, record_mentions
    annotations = {}
    for record in corpus.records:
        if split.assignment.get(record.image_id) != TEST:
            continue
        mentions = record_mentions(record, category_map)
        annotations[record.image_id] = [
            (a, b) for a, b in split.excluded_pairs
            if a in mentions and b in mentions]
    return annotations


def f1_score(tp, fp, fn):
    """F1 with the 0/0 convention -> 0."""
    if 2 * tp + fp + fn == 0:
        return 0.0
    return 2.0 * tp / (2 * tp + fp + fn)


def novel_object_f1(captions, split, category, category_map):
    """F1 of mentioning an excluded category on the test set.

    A test image is a ground-truth positive when its captions mention the
    category (recorded in the split metadata); the prediction is positive
    when the generated caption mentions it."""
    if category not in split.excluded_categories:
        raise ValueError(f"{category!r} is not an excluded category of this split")
    positives = set(split.meta["category_positives"][category])
    test_ids = split.ids("test")
    tp = fp = fn = 0
    for image_id in test_ids:
        predicted = category in caption_mentions(
            captions.get(image_id, ""), category_map)
        actual = image_id in positives
        if predicted and actual:
            tp += 1
        elif predicted:
            fp += 1
        elif actual:
            fn += 1
    return f1_score(tp, fp, fn)


def macro_novel_object_f1(captions, split, category_map):
    scores = {c: novel_object_f1(captions, split, c, category_map)
              for c in split.excluded_categories}
    macro = sum(scores.values()) / len(scores) if scores else 0.0
    return scores, macro


def grounding_accuracy(templates, records, category_map):
    """Percent of slots whose chosen region overlaps (IoU >= 0.5) a
    ground-truth box of the realized word's category."""
    total = 0
    correct = 0
    for image_id, template in templates.items():
        record = records[image_id]
        for g in template.groundings:
            total += 1
            category = category_map.word_to_category.get(
                category_map.lemma(g.word))
            if category is None:
                continue
            box = record.proposals[g.region].box
            gt = [b for b, c in record.gt_boxes if c == category]
            if any(iou(box, b) >= 0.5 for b in gt):
                correct += 1
    if total == 0:
        return 0.0
    return 100.0 * correct / total


@dataclass
class EvalReport:
    bleu1: float | None = None
    bleu4: float | None = None
    compositional: float | None = None
    f1_per_category: dict | None = None
    f1_macro: float | None = None
    grounding: float | None = None
    counts: dict | None = None

    def to_json(self):
        return {k: v for k, v in self.__dict__.items() if v is not None}

    def format_table(self):
        rows = []
        if self.bleu1 is not None:
            rows.append(("BLEU-1", f"{self.bleu1:.4f}"))
        if self.bleu4 is not None:
            rows.append(("BLEU-4", f"{self.bleu4:.4f}"))
        if self.compositional is not None:
            rows.append(("compositional pair accuracy", f"{self.compositional:.1f}%"))
        if self.f1_macro is not None:
            rows.append(("novel object F1 (macro)", f"{self.f1_macro:.4f}"))
        if self.f1_per_category:
            for cat, score in sorted(self.f1_per_category.items()):
                rows.append((f"  F1 [{cat}]", f"{score:.4f}"))
        if self.grounding is not None:
            rows.append(("grounding accuracy", f"{self.grounding:.1f}%"))
        if self.counts:
            for key, value in sorted(self.counts.items()):
                rows.append((key, str(value)))
        width = max((len(r[0]) for r in rows), default=0)
        return "\n".join(f"{name.ljust(width)}  {value}" for name, value in rows)

    def dumps(self):
        return json.dumps(self.to_json(), sort_keys=True)
