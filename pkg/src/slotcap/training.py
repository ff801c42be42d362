"""Teacher-forced training with the compound caption loss.

Per-token loss: a textual target pays -log of (its textual-word probability
times the sentinel probability); a visual target pays -log of (plurality
times fine-grained probability, evaluated at the most probable target
region, times the averaged probability of its target grounding regions).
The sequence loss is the per-token mean including the closing EOS.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import model as md
from .corpus import TEXTUAL, VISUAL, AnnotatedToken


@dataclass
class TrainConfig:
    learning_rate: float = 5e-4
    anneal_factor: float = 0.8     # multiply lr by this every anneal_every epochs
    anneal_every: int = 3
    max_epochs: int = 50
    batch_size: int = 100
    patience: int = 10             # epochs without val improvement before stopping
    grad_clip: float | None = None
    seed: int = 42

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not 0 < self.anneal_factor <= 1:
            raise ValueError("anneal_factor must be in (0, 1]")


@dataclass
class LossBreakdown:
    total: float
    textual: float        # textual-word + sentinel contribution
    pointer: float        # averaged target-region contribution
    refinement: float     # plurality + fine-grained contribution
    token_count: int
    node: ad.Node | None = field(default=None, repr=False)


class TrainingDiverged(RuntimeError):
    pass


def _token_loss_terms(step_out, target):
    """(loss node, textual, pointer, refinement) component values."""
    n = step_out.n_regions
    if target.kind == TEXTUAL:
        word_lp = ad.safe_log(ad.element(step_out.textual_dist, target.vocab_index))
        sent_lp = ad.safe_log(ad.element(step_out.region_dist, n))
        node = ad.mul(ad.add(word_lp, sent_lp), -1.0)
        return node, float(node.value), 0.0, 0.0
    if not target.grounding_regions:
        raise ValueError(f"visual target {target.surface!r} has no grounding regions")
    regions = list(target.grounding_regions)
    probs = step_out.region_dist.value[regions]
    cond = regions[int(np.argmax(probs))]   # region conditioning the refinement
    avg_lp = ad.safe_log(ad.mul(ad.vsum(ad.gather(step_out.region_dist, regions)),
                                1.0 / len(regions)))
    plur_lp = ad.safe_log(ad.element2(step_out.plurality, cond,
                                      target.plurality_target))
    fg_lp = ad.safe_log(ad.element(step_out.finegrained[cond],
                                   target.finegrained_target))
    node = ad.mul(ad.add(ad.add(plur_lp, fg_lp), avg_lp), -1.0)
    return node, 0.0, -float(avg_lp.value), -(float(plur_lp.value) + float(fg_lp.value))


def token_loss(step_out, target):
    """Compound cross-entropy loss for one step, as a scalar graph node."""
    return _token_loss_terms(step_out, target)[0]


def sequence_loss(record, tokens, params, vocab):
    """Teacher-forced loss over a caption (EOS included), per-token mean."""
    feats = md.build_region_features(record, params)
    cats = [p.category for p in record.proposals]
    state = md.initial_state(params.config)
    eos = AnnotatedToken(surface=vocab.EOS, kind=TEXTUAL,
                         vocab_index=vocab.eos_index)
    targets = list(tokens) + [eos]
    inputs = [vocab.bos_index] + [t.input_index for t in tokens]
    pieces, textual, pointer, refinement = [], 0.0, 0.0, 0.0
    for feed, target in zip(inputs, targets):
        step_out, state = md.step(state, feed, feats, record.grid_features,
                                  params, cats)
        node, t, p, r = _token_loss_terms(step_out, target)
        pieces.append(node)
        textual += t
        pointer += p
        refinement += r
    count = len(targets)
    total = pieces[0]
    for node in pieces[1:]:
        total = ad.add(total, node)
    total = ad.mul(total, 1.0 / count)
    return LossBreakdown(total=float(total.value), textual=textual / count,
                         pointer=pointer / count, refinement=refinement / count,
                         token_count=count, node=total)


class Adam:
    """Adam with bias correction; state arrays keyed by param name."""

    def __init__(self, params, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {name: np.zeros_like(p.value) for name, p in params.all().items()}
        self.v = {name: np.zeros_like(p.value) for name, p in params.all().items()}

    def step(self, params, lr):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        correction = np.sqrt(1.0 - b2 ** self.t) / (1.0 - b1 ** self.t)
        for name, p in params.all().items():
            self.m[name] = b1 * self.m[name] + (1 - b1) * p.grad
            self.v[name] = b2 * self.v[name] + (1 - b2) * p.grad ** 2
            p.value -= lr * correction * self.m[name] / (np.sqrt(self.v[name]) + self.eps)


def _clip_grads(params, max_norm):
    total = 0.0
    for p in params.all().values():
        total += float((p.grad ** 2).sum())
    norm = np.sqrt(total)
    if norm > max_norm:
        scale = max_norm / norm
        for p in params.all().values():
            p.grad *= scale


def learning_rate_at(config, epoch):
    """Annealed learning rate for a 0-based epoch index."""
    return config.learning_rate * config.anneal_factor ** (epoch // config.anneal_every)


def _mean_loss(examples, params, vocab):
    total = 0.0
    for record, tokens in examples:
        total += sequence_loss(record, tokens, params, vocab).total
    return total / len(examples)


def fit(corpus, model_config, train_config, val_corpus=None, initial=None):
    """Train the decoder; returns (params, history).

    History rows carry epoch (0-based), lr, train_loss, val_loss and the
    epoch wall time.  Without a validation corpus the training loss doubles
    as the early-stopping monitor.  Training is deterministic given the
    seed; params are returned as of the final epoch run.
    """
    params = initial if initial is not None else md.init_params(
        model_config, corpus.category_map, seed=train_config.seed)
    examples = corpus.examples()
    if not examples:
        raise ValueError("corpus has no annotated captions")
    val_examples = val_corpus.examples() if val_corpus is not None else None
    vocab = corpus.vocabulary
    rng = np.random.default_rng(train_config.seed)
    optimizer = Adam(params)
    plist = list(params.all().values())
    history = []
    best, since_best = np.inf, 0
    for epoch in range(train_config.max_epochs):
        started = time.perf_counter()
        lr = learning_rate_at(train_config, epoch)
        order = rng.permutation(len(examples))
        epoch_loss = 0.0
        for lo in range(0, len(order), train_config.batch_size):
            batch = order[lo:lo + train_config.batch_size]
            ad.zero_grads(plist)
            for idx in batch:
                record, tokens = examples[idx]
                breakdown = sequence_loss(record, tokens, params, vocab)
                if not np.isfinite(breakdown.total):
                    raise TrainingDiverged(
                        f"non-finite loss on record {record.image_id!r} "
                        f"at epoch {epoch}")
                ad.backward(breakdown.node)
                epoch_loss += breakdown.total
            for p in plist:
                p.grad /= len(batch)
            if train_config.grad_clip is not None:
                _clip_grads(params, train_config.grad_clip)
            optimizer.step(params, lr)
        train_loss = epoch_loss / len(examples)
        val_loss = (_mean_loss(val_examples, params, vocab)
                    if val_examples else train_loss)
        history.append({"epoch": epoch, "lr": lr, "train_loss": train_loss,
                        "val_loss": val_loss,
                        "seconds": time.perf_counter() - started})
        monitor = val_loss
        if monitor < best - 1e-12:
            best, since_best = monitor, 0
        else:
            since_best += 1
            if since_best >= train_config.patience:
                break
    return params, history
