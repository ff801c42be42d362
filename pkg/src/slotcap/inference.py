"""Template decoding and slot filling.

Decoding chooses, at every step, between emitting a textual word (scored by
sentinel probability times word probability) and pointing at a region
(scored by that region's probability).  Region choices become slots, filled
immediately from the refinement heads.  Beam search explores the same
candidate set; at beam width 1 it reproduces greedy decoding exactly,
including tie handling (textual first, then lowest region index).
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import model as md
from .corpus import RegionProposal


@dataclass(frozen=True)
class Slot:
    region: int


@dataclass(frozen=True)
class SlotGrounding:
    slot_pos: int      # position in the template token list
    region: int        # proposal index
    word: str          # realized surface form
    box: tuple


@dataclass
class Template:
    tokens: list                     # str | Slot entries
    filled: list                     # surface words, same length as tokens
    groundings: list                 # SlotGrounding per slot, in order
    score: float = 0.0               # sum of chosen-candidate log probabilities
    constraints_satisfied: bool = True

    def caption(self):
        return " ".join(self.filled)

    def to_json(self, record):
        return {
            "image_id": record.image_id,
            "caption": self.caption(),
            "template": [t if isinstance(t, str) else {"slot": t.region}
                         for t in self.tokens],
            "groundings": [{"slot_pos": g.slot_pos, "region": g.region,
                            "box": list(g.box), "word": g.word}
                           for g in self.groundings],
            "score": self.score,
            "constraints_satisfied": self.constraints_satisfied,
        }


@dataclass
class DecodeConfig:
    mode: str = "greedy"             # greedy | beam | constrained
    beam_width: int = 1
    max_length: int = 16             # tokens before EOS
    required: tuple = ()             # word sets, constrained mode only
    constrain_top: int = 0           # pick required sets from top-N detections
    oracle_regions: bool = False     # decode against ground-truth boxes
    embedding_substitutions: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.beam_width < 1:
            raise ValueError("beam width must be >= 1")


@dataclass(frozen=True)
class Choice:
    kind: str          # "textual" or "region"
    index: int         # word index or region index
    logp: float


def _candidate_logps(step_out):
    """Log scores of all candidates: textual joint and per-region pointer."""
    with np.errstate(divide="ignore"):
        txt = np.log(step_out.textual_dist.value) + np.log(step_out.sentinel_prob)
        if step_out.n_regions:
            reg = np.log(step_out.region_dist.value[:-1])
        else:
            reg = np.zeros(0)
    return txt, reg


def decode_step_choice(step_out):
    """Joint argmax over textual words and regions; ties favor textual, then
    the lowest region index."""
    txt, reg = _candidate_logps(step_out)
    best_word = int(np.argmax(txt))
    if reg.size == 0:
        return Choice("textual", best_word, float(txt[best_word]))
    best_region = int(np.argmax(reg))
    if txt[best_word] >= reg[best_region]:
        return Choice("textual", best_word, float(txt[best_word]))
    return Choice("region", best_region, float(reg[best_region]))


def fill_slot(slot, record, step_out, category_map):
    """Surface word for a slot: fine-grained argmax, pluralized if the
    plurality head says so."""
    region = slot.region if isinstance(slot, Slot) else int(slot)
    category = record.proposals[region].category
    words = category_map.finegrained(category)
    word = words[int(np.argmax(step_out.finegrained[region].value))]
    if int(np.argmax(step_out.plurality.value[region])) == 1:
        word = category_map.pluralize(word)
    return word


def oracle_proposals(record, d_p):
    """Ground-truth boxes as proposals; pooled features are copied from an
    exactly matching detected proposal when one exists, else zeros."""
    out = []
    for box, category in record.gt_boxes:
        feature = np.zeros(d_p)
        for prop in record.proposals:
            if prop.category == category and prop.box == box:
                feature = prop.pooled_feature
                break
        out.append(RegionProposal(box=box, category=category, confidence=1.0,
                                  pooled_feature=feature, is_ground_truth=True))
    return out


class _Decoder:
    """Shared stepping machinery for greedy / beam / constrained decoding."""

    def __init__(self, record, params, vocab, category_map, config):
        self.record = record
        self.params = params
        self.vocab = vocab
        self.category_map = category_map
        self.config = config
        if config.oracle_regions:
            record = replace_proposals(record, oracle_proposals(record, params.config.d_p))
            self.record = record
        self.features = md.build_region_features(record, self.params)
        self.categories = [p.category for p in record.proposals]

    def advance(self, state, feed_index):
        return md.step(state, feed_index, self.features,
                       self.record.grid_features, self.params, self.categories)

    def feed_for_region(self, region):
        category = self.record.proposals[region].category
        category = self.config.embedding_substitutions.get(category, category)
        return self.vocab.index(self.category_map.canonical(category))


def replace_proposals(record, proposals):
    out = type(record)(image_id=record.image_id, width=record.width,
                       height=record.height, proposals=proposals,
                       gt_boxes=record.gt_boxes, captions=record.captions,
                       grid_features=record.grid_features)
    return out


def greedy_decode(record, params, vocab, category_map, config=None):
    """Follow decode_step_choice until EOS or the length cap."""
    config = config or DecodeConfig()
    dec = _Decoder(record, params, vocab, category_map, config)
    state = md.initial_state(params.config)
    feed = vocab.bos_index
    tokens, filled, groundings = [], [], []
    score = 0.0
    while len(tokens) < config.max_length:
        step_out, state = dec.advance(state, feed)
        choice = decode_step_choice(step_out)
        score += choice.logp
        if choice.kind == "textual":
            if choice.index == vocab.eos_index:
                break
            word = vocab.word(choice.index)
            tokens.append(word)
            filled.append(word)
            feed = choice.index
        else:
            slot = Slot(choice.index)
            word = fill_slot(slot, dec.record, step_out, category_map)
            groundings.append(SlotGrounding(
                slot_pos=len(tokens), region=choice.index, word=word,
                box=dec.record.proposals[choice.index].box.as_tuple()))
            tokens.append(slot)
            filled.append(word)
            feed = dec.feed_for_region(choice.index)
    return Template(tokens=tokens, filled=filled, groundings=groundings,
                    score=score)


@dataclass
class _Hypothesis:
    state: object
    feed: int
    logp: float
    tokens: list
    filled: list
    groundings: list
    satisfied: frozenset = frozenset()
    finished: bool = False

    def template(self, flag=True):
        return Template(tokens=list(self.tokens), filled=list(self.filled),
                        groundings=list(self.groundings), score=self.logp,
                        constraints_satisfied=flag)


def _expand(dec, hyp, required, vocab, category_map):
    """All successor hypotheses of one live hypothesis, in canonical order
    (textual words by index, then regions by index)."""
    step_out, state = dec.advance(hyp.state, hyp.feed)
    txt, reg = _candidate_logps(step_out)
    full = frozenset(range(len(required)))
    successors = []
    for w in range(txt.size):
        logp = hyp.logp + float(txt[w])
        if w == vocab.eos_index:
            if hyp.satisfied == full:
                successors.append(replace(hyp, logp=logp, finished=True,
                                          state=state))
            continue
        word = vocab.word(w)
        satisfied = _advance_constraints(hyp.satisfied, word, required)
        successors.append(_Hypothesis(
            state=state, feed=w, logp=logp,
            tokens=hyp.tokens + [word], filled=hyp.filled + [word],
            groundings=list(hyp.groundings), satisfied=satisfied))
    for r in range(reg.size):
        logp = hyp.logp + float(reg[r])
        slot = Slot(r)
        word = fill_slot(slot, dec.record, step_out, category_map)
        satisfied = _advance_constraints(hyp.satisfied, word, required)
        grounding = SlotGrounding(
            slot_pos=len(hyp.tokens), region=r, word=word,
            box=dec.record.proposals[r].box.as_tuple())
        successors.append(_Hypothesis(
            state=state, feed=dec.feed_for_region(r), logp=logp,
            tokens=hyp.tokens + [slot], filled=hyp.filled + [word],
            groundings=hyp.groundings + [grounding], satisfied=satisfied))
    return successors


def _advance_constraints(satisfied, word, required):
    for j, words in enumerate(required):
        if j not in satisfied and word in words:
            satisfied = satisfied | {j}
    return satisfied


def beam_decode(record, params, vocab, category_map, config=None):
    """Plain beam search; returns templates sorted by score, descending."""
    config = config or DecodeConfig(mode="beam")
    dec = _Decoder(record, params, vocab, category_map, config)
    start = _Hypothesis(state=md.initial_state(params.config),
                        feed=vocab.bos_index, logp=0.0,
                        tokens=[], filled=[], groundings=[])
    beams, finished = [start], []
    for _ in range(config.max_length):
        candidates = []
        for hyp in beams:
            candidates.extend(_expand(dec, hyp, (), vocab, category_map))
        candidates.sort(key=lambda h: -h.logp)
        beams = []
        for hyp in candidates:
            if hyp.finished:
                finished.append(hyp)
            else:
                beams.append(hyp)
            if len(beams) >= config.beam_width:
                break
        if not beams:
            break
    finished.extend(beams)   # length-capped hypotheses count as complete
    finished.sort(key=lambda h: -h.logp)
    return [h.template() for h in finished[:config.beam_width]]


def top_detected_concepts(record, category_map, top_n):
    """Required word sets from the top-N distinct detected categories by
    confidence: each set holds the category's fine-grained words and their
    plurals."""
    best = {}
    for prop in record.proposals:
        if prop.category not in best or prop.confidence > best[prop.category]:
            best[prop.category] = prop.confidence
    ranked = sorted(best, key=lambda c: (-best[c], c))[:top_n]
    required = []
    for category in ranked:
        words = set()
        for w in category_map.finegrained(category):
            words.add(w)
            words.add(category_map.pluralize(w))
        required.append(frozenset(words))
    return required


def constrained_beam_decode(record, params, vocab, category_map, required,
                            config=None):
    """Beam search over the product with a constraint-satisfaction FSM.

    States are sets of satisfied constraints; EOS is only allowed once all
    constraints hold.  When no hypothesis can finish, the best partial is
    returned with ``constraints_satisfied`` False.
    """
    required = [frozenset(w) for w in required]
    for words in required:
        if not words:
            raise ValueError("empty required word set")
    config = config or DecodeConfig(mode="constrained")
    if not required:
        return beam_decode(record, params, vocab, category_map, config)[0]
    dec = _Decoder(record, params, vocab, category_map, config)
    full = frozenset(range(len(required)))
    start = _Hypothesis(state=md.initial_state(params.config),
                        feed=vocab.bos_index, logp=0.0,
                        tokens=[], filled=[], groundings=[])
    banks = {frozenset(): [start]}
    finished = []
    for _ in range(config.max_length):
        successors = {}
        for bank in banks.values():
            for hyp in bank:
                for nxt in _expand(dec, hyp, required, vocab, category_map):
                    if nxt.finished:
                        finished.append(nxt)
                    else:
                        successors.setdefault(nxt.satisfied, []).append(nxt)
        banks = {}
        for state_key, bank in successors.items():
            bank.sort(key=lambda h: -h.logp)
            banks[state_key] = bank[:config.beam_width]
        if not banks:
            break
    if full in banks:
        finished.extend(banks[full])   # length-capped but fully satisfied
    if finished:
        best = max(finished, key=lambda h: h.logp)
        return best.template(flag=True)
    partials = [h for bank in banks.values() for h in bank]
    if not partials:
        raise RuntimeError("constrained search produced no hypotheses")
    best = max(partials, key=lambda h: (len(h.satisfied), h.logp))
    return best.template(flag=False)


def decode(record, params, vocab, category_map, config):
    """Dispatch on DecodeConfig.mode; always returns a single Template."""
    if config.mode == "greedy":
        return greedy_decode(record, params, vocab, category_map, config)
    if config.mode == "beam":
        return beam_decode(record, params, vocab, category_map, config)[0]
    if config.mode == "constrained":
        required = list(config.required)
        if config.constrain_top:
            dec_record = record
            if config.oracle_regions:
                dec_record = replace_proposals(
                    record, oracle_proposals(record, params.config.d_p))
            required.extend(top_detected_concepts(dec_record, category_map,
                                                  config.constrain_top))
        return constrained_beam_decode(record, params, vocab, category_map,
                                       required, config)
    raise ValueError(f"unknown decode mode {config.mode!r}")
