"""Caption decoder: two-layer attention LSTM, region pointer with a visual
sentinel, textual-word head, and the plurality / fine-grained refinement heads.

All math runs on the autodiff graph so one code path serves decoding,
training and gradient checking.  Per step:

  layer-1 LSTM input  = [word embedding; mean grid feature; previous h2]
  sentinel            = sigmoid(W_x input + W_h h1_prev) * tanh(c1)
  grid / region attention queried by h1
  layer-2 LSTM input  = [grid context; region context; h1]
  pointer score u_i   = score . tanh(feat_proj v_i + query_proj h2)
  sentinel logit      = score . tanh(sentinel_proj s + query_proj h2)
  region distribution = softmax([u; sentinel logit])   (sentinel last)
  textual distribution= softmax(txt_out h2)

query_proj and score are shared between the pointer scores and the sentinel
logit: a single Param backs both uses.
"""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .corpus import location_feature


@dataclass(frozen=True)
class ModelConfig:
    d: int = 64            # LSTM hidden size
    m: int = 32            # attention hidden size
    d_p: int = 16          # pooled region-feature dim
    d_l: int = 8           # location embedding dim
    d_g: int = 16          # category / fine-grained embedding dim
    vocab_size: int = 0    # textual vocabulary size, set from the corpus
    embed_dim: int = 32    # word embedding dim
    grid_count: int = 4    # grid feature rows per image
    k_max: int = 8         # most fine-grained words in any category

    def __post_init__(self):
        for name in ("d", "m", "d_p", "d_l", "d_g", "embed_dim", "grid_count", "k_max"):
            if getattr(self, name) <= 0:
                raise ValueError(f"ModelConfig.{name} must be positive")

    @property
    def d_r(self):
        return self.d_p + self.d_l + self.d_g

    @property
    def refine_hidden(self):
        return max(1, self.d // 2)

    def to_json(self):
        return {"d": self.d, "m": self.m, "d_p": self.d_p, "d_l": self.d_l,
                "d_g": self.d_g, "vocab_size": self.vocab_size,
                "embed_dim": self.embed_dim, "grid_count": self.grid_count,
                "k_max": self.k_max}

    @classmethod
    def from_json(cls, obj):
        return cls(**obj)


@dataclass
class AttentionParams:
    feat_proj: ad.Param   # (feature dim, m)
    query_proj: ad.Param  # (d, m)
    score: ad.Param       # (m,)


PARAM_ORDER = (
    "word_embed",
    "lstm1_in_w", "lstm1_hid_w", "lstm1_b",
    "lstm2_in_w", "lstm2_hid_w", "lstm2_b",
    "grid_feat_proj", "grid_query_proj", "grid_score",
    "region_feat_proj", "region_query_proj", "region_score",
    "ptr_feat_proj", "ptr_query_proj", "ptr_score", "sentinel_proj",
    "gate_input_w", "gate_hidden_w",
    "txt_out",
    "plur_hidden_w", "plur_hidden_b", "plur_out",
    "fg_hidden_w", "fg_hidden_b", "fg_proj", "fg_embed",
    "loc_proj_w", "loc_proj_b",
    "cat_embed",
)


class ModelParams:
    """Every learned array of the decoder, plus the fine-grained row layout.

    ``ptr_query_proj`` and ``ptr_score`` are single Params used by both the
    pointer scores and the sentinel logit.
    """

    def __init__(self, config, category_names, fg_rows, params):
        self.config = config
        self.category_names = list(category_names)
        self.category_index = {c: i for i, c in enumerate(self.category_names)}
        self.fg_rows = dict(fg_rows)   # category -> rows into fg_embed
        for name, p in params.items():
            setattr(self, name, p)
        self._names = list(params)

    def all(self):
        """Name -> Param in a fixed order (checkpoints, optimizer state)."""
        return {name: getattr(self, name) for name in self._names}

    def copy(self):
        clone = {name: ad.Param(name, p.value.copy())
                 for name, p in self.all().items()}
        return ModelParams(self.config, self.category_names, self.fg_rows, clone)


def init_params(config, category_map, seed=42):
    """Uniform [-0.1, 0.1] weights, zero biases, +1 LSTM forget-gate bias."""
    if config.vocab_size <= 0:
        raise ValueError("vocab_size must be set before initializing params")
    rng = np.random.default_rng(seed)
    d, m = config.d, config.m
    d_r, h = config.d_r, config.refine_hidden
    i1 = config.embed_dim + config.d_p + d        # [word emb; grid mean; h2]
    i2 = config.d_p + d_r + d                     # [grid ctx; region ctx; h1]

    category_names = category_map.category_names()
    fg_rows, row = {}, 0
    for cat in category_names:
        k = len(category_map.finegrained(cat))
        fg_rows[cat] = list(range(row, row + k))
        row += k
    total_fg = row

    def uniform(name, *shape):
        return ad.Param(name, rng.uniform(-0.1, 0.1, size=shape))

    def zeros(name, *shape):
        return ad.Param(name, np.zeros(shape))

    def lstm_bias(name):
        b = np.zeros(4 * d)
        b[d:2 * d] = 1.0
        return ad.Param(name, b)

    params = {
        "word_embed": uniform("word_embed", config.vocab_size, config.embed_dim),
        "lstm1_in_w": uniform("lstm1_in_w", 4 * d, i1),
        "lstm1_hid_w": uniform("lstm1_hid_w", 4 * d, d),
        "lstm1_b": lstm_bias("lstm1_b"),
        "lstm2_in_w": uniform("lstm2_in_w", 4 * d, i2),
        "lstm2_hid_w": uniform("lstm2_hid_w", 4 * d, d),
        "lstm2_b": lstm_bias("lstm2_b"),
        "grid_feat_proj": uniform("grid_feat_proj", config.d_p, m),
        "grid_query_proj": uniform("grid_query_proj", d, m),
        "grid_score": uniform("grid_score", m),
        "region_feat_proj": uniform("region_feat_proj", d_r, m),
        "region_query_proj": uniform("region_query_proj", d, m),
        "region_score": uniform("region_score", m),
        "ptr_feat_proj": uniform("ptr_feat_proj", d_r, m),
        "ptr_query_proj": uniform("ptr_query_proj", d, m),
        "ptr_score": uniform("ptr_score", m),
        "sentinel_proj": uniform("sentinel_proj", d, m),
        "gate_input_w": uniform("gate_input_w", d, i1),
        "gate_hidden_w": uniform("gate_hidden_w", d, d),
        "txt_out": uniform("txt_out", d, config.vocab_size),
        "plur_hidden_w": uniform("plur_hidden_w", d_r + d, h),
        "plur_hidden_b": zeros("plur_hidden_b", h),
        "plur_out": uniform("plur_out", h, 2),
        "fg_hidden_w": uniform("fg_hidden_w", d_r + d, h),
        "fg_hidden_b": zeros("fg_hidden_b", h),
        "fg_proj": uniform("fg_proj", h, config.d_g),
        "fg_embed": uniform("fg_embed", total_fg, config.d_g),
        "loc_proj_w": uniform("loc_proj_w", config.d_l, 4),
        "loc_proj_b": zeros("loc_proj_b", config.d_l),
        "cat_embed": uniform("cat_embed", len(category_names), config.d_g),
    }
    assert tuple(params) == PARAM_ORDER
    return ModelParams(config, category_names, fg_rows, params)


@dataclass
class DecoderState:
    h1: ad.Node
    c1: ad.Node
    h2: ad.Node
    c2: ad.Node


def initial_state(config):
    z = lambda: ad.const(np.zeros(config.d))
    return DecoderState(h1=z(), c1=z(), h2=z(), c2=z())


class StepOutput:
    """Per-timestep distributions; fields are graph nodes (use ``.value``).

    The refinement heads (``plurality``, ``finegrained``) are computed on
    first access since most steps never look at them.
    """

    __slots__ = ("region_dist", "textual_dist", "h", "pointer_logits",
                 "sentinel_logit", "n_regions", "_refine", "_plurality",
                 "_finegrained")

    def __init__(self, region_dist, textual_dist, h, pointer_logits,
                 sentinel_logit, n_regions, refine_thunk):
        self.region_dist = region_dist    # N+1 probabilities, sentinel last
        self.textual_dist = textual_dist  # V probabilities
        self.h = h                        # layer-2 hidden state
        self.pointer_logits = pointer_logits
        self.sentinel_logit = sentinel_logit
        self.n_regions = n_regions
        self._refine = refine_thunk
        self._plurality = None
        self._finegrained = None

    def _run_refine(self):
        if self._finegrained is None:
            self._plurality, self._finegrained = self._refine()
        return self._plurality, self._finegrained

    @property
    def plurality(self):
        """(N, 2) row distributions over {singular, plural}; None when N=0."""
        return self._run_refine()[0]

    @property
    def finegrained(self):
        """Per region, a distribution over its category's fine-grained words."""
        return self._run_refine()[1]

    @property
    def sentinel_prob(self):
        return float(self.region_dist.value[-1])


def region_feature(proposal, record, params):
    """[pooled feature; projected location; category embedding] as one node."""
    config = params.config
    if proposal.pooled_feature.shape[0] != config.d_p:
        raise ad.ShapeError(
            f"pooled feature has dim {proposal.pooled_feature.shape[0]}, "
            f"config expects {config.d_p}")
    if proposal.category not in params.category_index:
        raise ValueError(f"unknown category {proposal.category!r}")
    loc = ad.const(location_feature(proposal.box, record.width, record.height))
    v_l = ad.add(ad.matmul(params.loc_proj_w.node(), loc), params.loc_proj_b.node())
    v_g = ad.lookup(params.cat_embed.node(), params.category_index[proposal.category])
    return ad.concat([ad.const(proposal.pooled_feature), v_l, v_g])


def build_region_features(record, params):
    return [region_feature(p, record, params) for p in record.proposals]


def attend(features, h, attn):
    """Additive attention: weights over rows of ``features`` and their mix."""
    if not isinstance(features, ad.Node):
        features = ad.const(features)
    if features.value.ndim != 2 or features.value.shape[0] == 0:
        raise ValueError("attend needs a nonempty feature matrix")
    query = ad.matmul(h, attn.query_proj.node())
    scores = ad.scored_tanh(features, attn.feat_proj.node(), query,
                            attn.score.node())
    weights = ad.softmax(scores)
    return weights, ad.matmul(weights, features)


def _lstm_cell(x, h_prev, c_prev, w_in, w_hid, bias, d):
    """(h, c, tanh(c)) nodes for one cell update."""
    gates = ad.affine(((w_in.node(), x), (w_hid.node(), h_prev)), bias.node())
    hc = ad.lstm_state(gates, c_prev)
    return (ad.subvec(hc, 0, d), ad.subvec(hc, d, 2 * d),
            ad.subvec(hc, 2 * d, 3 * d))


def _refine_from_rows(region_mat, h, params):
    """Vectorized refinement heads over all regions; P_g stays per-region
    because fine-grained list lengths differ by category."""
    rin = ad.augment_rows(region_mat, h)
    hb = ad.relu(ad.add(ad.matmul(rin, params.plur_hidden_w.node()),
                        params.plur_hidden_b.node()))
    plurality = ad.softmax_rows(ad.matmul(hb, params.plur_out.node()))
    hg = ad.relu(ad.add(ad.matmul(rin, params.fg_hidden_w.node()),
                        params.fg_hidden_b.node()))
    proj = ad.matmul(hg, params.fg_proj.node())
    return plurality, proj


def refine(v, h, category, params):
    """Plurality and fine-grained distributions for one region feature."""
    if category not in params.fg_rows:
        raise ValueError(f"unknown category {category!r}")
    rin = ad.concat([v, h])
    hb = ad.relu(ad.add(ad.matmul(rin, params.plur_hidden_w.node()),
                        params.plur_hidden_b.node()))
    plurality = ad.softmax(ad.matmul(hb, params.plur_out.node()))
    hg = ad.relu(ad.add(ad.matmul(rin, params.fg_hidden_w.node()),
                        params.fg_hidden_b.node()))
    proj = ad.matmul(hg, params.fg_proj.node())
    rows = ad.lookup(params.fg_embed.node(), params.fg_rows[category])
    finegrained = ad.softmax(ad.matmul(rows, proj))
    return plurality, finegrained


def step(state, token_index, region_feats, grid, params, categories=None):
    """One decoder step.

    ``token_index`` is the embedding row of the previous token,
    ``region_feats`` the per-proposal feature nodes (may be empty, leaving
    only the sentinel), ``grid`` a (K, d_p) array or None, ``categories``
    the per-region category names (needed for the fine-grained head).
    """
    config = params.config
    if grid is None:
        grid = np.zeros((config.grid_count, config.d_p))
    grid = np.asarray(grid, dtype=np.float64)
    if grid.shape != (config.grid_count, config.d_p):
        raise ad.ShapeError(
            f"grid features {grid.shape} do not match "
            f"({config.grid_count}, {config.d_p})")
    x_word = ad.lookup(params.word_embed.node(), token_index)
    x1 = ad.concat([x_word, ad.const(grid.mean(axis=0)), state.h2])
    h1, c1, tanh_c1 = _lstm_cell(x1, state.h1, state.c1,
                                 params.lstm1_in_w, params.lstm1_hid_w,
                                 params.lstm1_b, config.d)
    gate = ad.sigmoid(ad.affine(((params.gate_input_w.node(), x1),
                                 (params.gate_hidden_w.node(), state.h1))))
    sentinel = ad.mul(gate, tanh_c1)

    grid_attn = AttentionParams(params.grid_feat_proj, params.grid_query_proj,
                                params.grid_score)
    _, grid_ctx = attend(ad.const(grid), h1, grid_attn)

    n = len(region_feats)
    region_mat = ad.stack_rows(region_feats) if n else None
    if n:
        region_attn = AttentionParams(params.region_feat_proj,
                                      params.region_query_proj,
                                      params.region_score)
        _, region_ctx = attend(region_mat, h1, region_attn)
    else:
        region_ctx = ad.const(np.zeros(config.d_r))

    x2 = ad.concat([grid_ctx, region_ctx, h1])
    h2, c2, _ = _lstm_cell(x2, state.h2, state.c2,
                           params.lstm2_in_w, params.lstm2_hid_w,
                           params.lstm2_b, config.d)

    query = ad.matmul(h2, params.ptr_query_proj.node())
    sentinel_logit = ad.scored_tanh(sentinel, params.sentinel_proj.node(),
                                    query, params.ptr_score.node())
    if n:
        pointer_logits = ad.scored_tanh(region_mat, params.ptr_feat_proj.node(),
                                        query, params.ptr_score.node())
        region_dist = ad.softmax(ad.concat([pointer_logits,
                                            ad.as_vector(sentinel_logit)]))
    else:
        pointer_logits = None
        region_dist = ad.softmax(ad.as_vector(sentinel_logit))

    textual_dist = ad.softmax(ad.matmul(h2, params.txt_out.node()))

    if n and categories is None:
        raise ValueError("categories required when regions are present")

    def refine_thunk():
        if not n:
            return None, []
        plurality, fg_proj = _refine_from_rows(region_mat, h2, params)
        finegrained = []
        for i, cat in enumerate(categories):
            rows = ad.lookup(params.fg_embed.node(), params.fg_rows[cat])
            finegrained.append(
                ad.softmax(ad.matmul(rows, ad.slice_row(fg_proj, i))))
        return plurality, finegrained

    out = StepOutput(region_dist=region_dist, textual_dist=textual_dist,
                     h=h2, pointer_logits=pointer_logits,
                     sentinel_logit=sentinel_logit, n_regions=n,
                     refine_thunk=refine_thunk)
    return out, DecoderState(h1=h1, c1=c1, h2=h2, c2=c2)


def run_step_on_record(record, params, state, token_index):
    """Convenience wrapper building region features from a record."""
    feats = build_region_features(record, params)
    cats = [p.category for p in record.proposals]
    return step(state, token_index, feats, record.grid_features, params, cats)


def save_checkpoint(path, params, vocab_words):
    """JSON checkpoint: config header, vocab, categories, flat param arrays.

    Serialization uses repr-exact floats and sorted keys, so a checkpoint
    round-trips bit-exactly and identical params give identical bytes.
    """
    obj = {
        "config": params.config.to_json(),
        "categories": params.category_names,
        "fg_rows": {c: params.fg_rows[c] for c in params.category_names},
        "vocab": list(vocab_words),
        "params": {
            name: {"shape": list(p.value.shape),
                   "values": p.value.reshape(-1).tolist()}
            for name, p in params.all().items()
        },
    }
    with open(path, "w") as f:
        json.dump(obj, f, sort_keys=True, separators=(",", ":"))
        f.write("\n")


def load_checkpoint(path):
    """Returns (ModelParams, config, vocab word list)."""
    with open(path) as f:
        obj = json.load(f)
    config = ModelConfig.from_json(obj["config"])
    loaded = {}
    for name, entry in obj["params"].items():
        loaded[name] = ad.Param(
            name, np.asarray(entry["values"], dtype=np.float64)
                    .reshape(entry["shape"]))
    missing = [n for n in PARAM_ORDER if n not in loaded]
    if missing:
        raise ValueError(f"checkpoint is missing params: {missing}")
    ordered = {name: loaded[name] for name in PARAM_ORDER}
    params = ModelParams(config, obj["categories"], obj["fg_rows"], ordered)
    return params, config, obj["vocab"]
