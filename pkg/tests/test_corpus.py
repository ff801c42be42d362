import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from slotcap import (BoundingBox, CategoryMap, Vocabulary, build_vocabulary,
                     extract_visual_words, filter_proposals, iou,
                     location_feature, match_grounding_regions)
from slotcap.corpus import (MAX_CAPTION_TOKENS, TEXTUAL, VISUAL,
                            annotate_record, build_corpus, mentioned_categories,
                            tokenize)

from conftest import make_box, make_proposal, make_record


boxes = st.builds(
    lambda x, y, w, h: BoundingBox(x, y, x + w, y + h),
    st.floats(0, 50), st.floats(0, 50),
    st.floats(1, 50), st.floats(1, 50))


class TestIou:
    def test_identical_boxes(self):
        b = make_box(3, 4, 10, 12)
        assert iou(b, b) == 1.0

    def test_disjoint_boxes(self):
        assert iou(make_box(0, 0, 1, 1), make_box(2, 2, 3, 3)) == 0.0

    def test_partial_overlap_one_seventh(self):
        # inter = 1, union = 4 + 4 - 1 = 7
        assert iou(make_box(0, 0, 2, 2), make_box(1, 1, 3, 3)) == pytest.approx(1 / 7)

    @settings(max_examples=100, deadline=None)
    @given(boxes, boxes)
    def test_symmetric_and_bounded(self, a, b):
        ab, ba = iou(a, b), iou(b, a)
        assert ab == ba
        assert 0.0 <= ab <= 1.0

    @settings(max_examples=50, deadline=None)
    @given(boxes)
    def test_self_iou_is_one(self, a):
        assert iou(a, a) == pytest.approx(1.0)


class TestLocationFeature:
    def test_full_image_box(self):
        assert np.allclose(location_feature(make_box(0, 0, 640, 480), 640, 480),
                           [0, 0, 1, 1])

    def test_direct_division(self):
        assert np.allclose(location_feature(make_box(10, 20, 30, 40), 100, 100),
                           [0.1, 0.2, 0.3, 0.4])

    def test_degenerate_box_rejected_at_construction(self):
        with pytest.raises(ValueError):
            make_box(5, 5, 5, 9)


class TestFilterProposals:
    def test_identical_boxes_same_class_keeps_strongest(self):
        box = make_box(0, 0, 10, 10)
        props = [make_proposal(box, "dog", 0.9), make_proposal(box, "dog", 0.8)]
        kept = filter_proposals(props)
        assert len(kept) == 1 and kept[0].confidence == 0.9

    def test_disjoint_boxes_survive(self):
        props = [make_proposal(make_box(0, 0, 10, 10), "dog", 0.9),
                 make_proposal(make_box(50, 50, 60, 60), "dog", 0.6)]
        assert len(filter_proposals(props)) == 2

    def test_low_overlap_same_class_survives(self):
        # IoU 1/7 < class threshold 0.3
        props = [make_proposal(make_box(0, 0, 2, 2), "dog", 0.9),
                 make_proposal(make_box(1, 1, 3, 3), "dog", 0.8)]
        assert len(filter_proposals(props)) == 2

    def test_cross_class_nms_only_at_high_iou(self):
        # nested boxes: IoU = 68/100 < 0.7 so both live despite the overlap
        props = [make_proposal(make_box(0, 0, 10, 10), "dog", 0.9),
                 make_proposal(make_box(0, 0, 10, 6.8), "cat", 0.8)]
        assert len(filter_proposals(props)) == 2

    def test_confidence_floor(self):
        props = [make_proposal(make_box(0, 0, 10, 10), "dog", 0.4)]
        assert filter_proposals(props) == []

    def test_output_sorted_by_confidence(self):
        props = [make_proposal(make_box(0, 0, 5, 5), "dog", 0.6),
                 make_proposal(make_box(20, 20, 30, 30), "cat", 0.95),
                 make_proposal(make_box(50, 50, 60, 60), "dog", 0.8)]
        kept = filter_proposals(props)
        assert [p.confidence for p in kept] == [0.95, 0.8, 0.6]

    def test_idempotent(self):
        rng = np.random.default_rng(8)
        props = []
        for i in range(25):
            x, y = rng.uniform(0, 80, size=2)
            w, h = rng.uniform(5, 20, size=2)
            props.append(make_proposal(
                make_box(x, y, x + w, y + h),
                ["dog", "cat", "bus"][int(rng.integers(3))],
                float(rng.uniform(0.3, 1.0))))
        once = filter_proposals(props)
        twice = filter_proposals(once)
        assert once == twice


class TestVocabulary:
    def test_min_count_threshold(self):
        captions = [["cat"]] * 5 + [["ocelot"]] * 4
        vocab = build_vocabulary(captions, min_count=5)
        assert "cat" in vocab
        assert "ocelot" not in vocab
        assert vocab.index("ocelot") == vocab.unk_index

    def test_min_count_one_keeps_everything(self):
        captions = [["a", "b"], ["c"]]
        vocab = build_vocabulary(captions, min_count=1)
        assert all(w in vocab for w in "abc")
        assert len(vocab) == 6  # three words + three specials

    def test_empty_corpus_errors(self):
        with pytest.raises(ValueError):
            build_vocabulary([], min_count=1)

    def test_round_trip(self):
        vocab = build_vocabulary([["x", "y", "z", "x"]], min_count=1)
        for i in range(len(vocab)):
            assert vocab.index(vocab.word(i)) == i

    def test_specials_present(self):
        vocab = Vocabulary([])
        assert vocab.bos_index == 0 and vocab.eos_index == 1
        assert vocab.unk_index == 2


class TestTokenize:
    def test_lowercase_and_punctuation(self):
        assert tokenize("A Dog, sitting!") == ["a", "dog", "sitting"]

    def test_empty_tokens_dropped(self):
        assert tokenize("a ... b") == ["a", "b"]


class TestExtractVisualWords:
    def test_plural_finegrained(self, toy_map):
        tokens = extract_visual_words(["puppies"], toy_map)
        tok = tokens[0]
        assert tok.kind == VISUAL
        assert tok.category == "dog"
        assert tok.plurality_target == 1
        assert tok.finegrained_target == toy_map.finegrained("dog").index("puppy")

    def test_unmapped_word_is_textual(self, toy_map):
        assert extract_visual_words(["sitting"], toy_map)[0].kind == TEXTUAL

    def test_singular_cake(self, toy_map):
        tok = extract_visual_words(["cake"], toy_map)[0]
        assert tok.kind == VISUAL
        assert tok.category == "cake"
        assert tok.plurality_target == 0
        assert tok.finegrained_target == 0

    def test_suffix_rules_gated_on_known_words(self, toy_map):
        # "buses" -> "bus" via the -es rule; "bes" stays textual
        tok = extract_visual_words(["buses"], toy_map)[0]
        assert tok.kind == VISUAL and tok.category == "bus"
        assert extract_visual_words(["bes"], toy_map)[0].kind == TEXTUAL

    def test_duplicate_finegrained_word_rejected(self):
        with pytest.raises(ValueError):
            CategoryMap({"dog": ["dog", "pet"], "cat": ["cat", "pet"]})


class TestGroundingMatch:
    def _record(self, proposals, gt):
        return make_record(proposals=proposals, gt_boxes=gt)

    def _visual(self, toy_map, word="puppy"):
        return extract_visual_words([word], toy_map)[0]

    def test_exact_match_selected(self, toy_map):
        box = make_box(10, 10, 40, 40)
        rec = self._record([make_proposal(box, "dog")], [(box, "dog")])
        tok = match_grounding_regions(self._visual(toy_map), rec)
        assert tok.kind == VISUAL and tok.grounding_regions == (0,)

    def test_low_iou_demotes_to_textual(self, toy_map):
        rec = self._record([make_proposal(make_box(0, 0, 2, 2), "dog")],
                           [(make_box(1, 1, 3, 3), "dog")])
        tok = match_grounding_regions(self._visual(toy_map), rec)
        assert tok.kind == TEXTUAL and tok.grounding_regions == ()

    def test_wrong_category_demotes(self, toy_map):
        box = make_box(10, 10, 40, 40)
        rec = self._record([make_proposal(box, "cat")], [(box, "dog")])
        assert match_grounding_regions(self._visual(toy_map), rec).kind == TEXTUAL

    def test_two_regions_at_point_six(self, toy_map):
        # both proposals overlap the gt box at IoU 2/3 >= 0.5
        gt = make_box(0, 0, 10, 12)
        rec = self._record(
            [make_proposal(make_box(0, 0, 10, 9.6), "dog"),
             make_proposal(make_box(0, 2.4, 10, 12), "dog")],
            [(gt, "dog")])
        for prop in rec.proposals:
            assert iou(prop.box, gt) >= 0.5
        tok = match_grounding_regions(self._visual(toy_map), rec)
        assert tok.grounding_regions == (0, 1)

    def test_brute_force_agreement_on_random_records(self, toy_map):
        rng = np.random.default_rng(11)
        cats = ["dog", "cat", "table"]
        for _ in range(60):
            proposals, gt = [], []
            for _ in range(int(rng.integers(1, 6))):
                x, y = rng.uniform(0, 60, size=2)
                w, h = rng.uniform(5, 40, size=2)
                proposals.append(make_proposal(
                    make_box(x, y, x + w, y + h),
                    cats[int(rng.integers(3))], 0.9))
            for _ in range(int(rng.integers(1, 4))):
                x, y = rng.uniform(0, 60, size=2)
                w, h = rng.uniform(5, 40, size=2)
                gt.append((make_box(x, y, x + w, y + h),
                           cats[int(rng.integers(3))]))
            rec = self._record(proposals, gt)
            tok = match_grounding_regions(self._visual(toy_map), rec)
            expected = tuple(
                i for i, p in enumerate(proposals)
                if p.category == "dog" and any(
                    iou(p.box, g) >= 0.5 for g, c in gt if c == "dog"))
            if expected:
                assert tok.grounding_regions == expected
            else:
                assert tok.kind == TEXTUAL


class TestAnnotation:
    def test_caption_truncated_to_sixteen(self, toy_map):
        vocab = Vocabulary(["w"])
        rec = make_record(captions=[" ".join(["w"] * 30)])
        annotate_record(rec, toy_map, vocab)
        assert len(rec.annotated[0]) == MAX_CAPTION_TOKENS

    def test_kind_invariants(self, toy_map):
        box = make_box(10, 10, 40, 40)
        rec = make_record(proposals=[make_proposal(box, "dog")],
                          gt_boxes=[(box, "dog")],
                          captions=["a puppy sitting"])
        vocab = build_vocabulary([tokenize(rec.captions[0])], min_count=1)
        annotate_record(rec, toy_map, vocab)
        for tok in rec.annotated[0]:
            if tok.kind == VISUAL:
                assert tok.grounding_regions
            else:
                assert tok.grounding_regions == ()

    def test_visual_input_is_canonical_name(self, toy_map):
        box = make_box(10, 10, 40, 40)
        rec = make_record(proposals=[make_proposal(box, "dog")],
                          gt_boxes=[(box, "dog")],
                          captions=["a puppy and a dog"])
        vocab = build_vocabulary([tokenize(rec.captions[0])], min_count=1)
        annotate_record(rec, toy_map, vocab)
        puppy = rec.annotated[0][1]
        assert puppy.kind == VISUAL
        assert puppy.input_index == vocab.index("dog")

    def test_mentioned_categories(self, toy_map):
        cats = mentioned_categories(["puppies", "sitting", "on", "tables"],
                                    toy_map)
        assert cats == {"dog", "table"}

    def test_build_corpus_empty_errors(self, toy_map):
        with pytest.raises(ValueError):
            build_corpus([], toy_map)
