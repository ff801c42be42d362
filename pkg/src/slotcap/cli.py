"""Command-line harness: synth, train, caption, split, eval, gradcheck.

One JSON config file can prefill any option; explicit flags win.  All
diagnostics go to stderr (level set by the NBT_LOG environment variable);
results go to the named output files or stdout.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from . import autodiff as ad
from . import evaluation as ev
from . import inference as inf
from . import model as md
from . import splits as sp
from . import synth
from . import training as tr
from .corpus import (CategoryMap, Corpus, Vocabulary, AnnotatedToken,
                     annotate_record, build_corpus, filter_proposals,
                     load_records, tokenize, TEXTUAL, VISUAL)

log = logging.getLogger("slotcap")


def _setup_logging():
    level = {"error": logging.ERROR, "info": logging.INFO,
             "debug": logging.DEBUG}.get(os.environ.get("NBT_LOG", "info"),
                                         logging.INFO)
    logging.basicConfig(stream=sys.stderr, level=level,
                        format="%(levelname)s %(message)s")


def _load_config(path):
    if not path:
        return {}
    with open(path) as f:
        return json.load(f)


def _pick(args, config, section, key, default=None):
    """Flag value if given, else config-file value, else default."""
    value = getattr(args, key.replace("-", "_"), None)
    if value is not None:
        return value
    return config.get(section, {}).get(key, default)


def _category_map(path):
    if path and os.path.exists(path):
        return CategoryMap.load(path)
    return synth.default_category_map()


def _infer_dims(records):
    """(d_p, grid_count) from the data; grid_count 0 when no grids present."""
    d_p = None
    grid = 0
    for rec in records:
        for prop in rec.proposals:
            n = prop.pooled_feature.shape[0]
            if d_p is None:
                d_p = n
            elif d_p != n:
                raise ValueError("inconsistent pooled feature dims across records")
        if rec.grid_features is not None:
            if grid and grid != rec.grid_features.shape[0]:
                raise ValueError("inconsistent grid feature rows across records")
            grid = rec.grid_features.shape[0]
    if d_p is None:
        raise ValueError("dataset has no proposals; cannot infer feature dims")
    return d_p, max(grid, 1)


def cmd_synth(args, config):
    spec = synth.SynthSpec(
        n_images=_pick(args, config, "synth", "images", 20),
        categories=(args.categories.split(",") if args.categories else
                    config.get("synth", {}).get("categories", [])),
        min_objects=_pick(args, config, "synth", "min_objects", 1),
        max_objects=_pick(args, config, "synth", "max_objects", 2),
        max_distractors=_pick(args, config, "synth", "distractors", 1),
        captions_per_image=_pick(args, config, "synth", "captions_per_image", 1),
        plural_fraction=_pick(args, config, "synth", "plural_fraction", 0.15),
        d_p=_pick(args, config, "synth", "d_p", 0),
        grid_count=_pick(args, config, "synth", "grid_count", 4),
        seed=args.seed,
    )
    if args.category_map and os.path.exists(args.category_map):
        category_map = CategoryMap.load(args.category_map)
    else:
        category_map = synth.default_category_map()
        if args.category_map:
            with open(args.category_map, "w") as f:
                json.dump(category_map.to_json(), f, indent=2, sort_keys=True)
                f.write("\n")
            log.info("wrote toy category map to %s", args.category_map)
    records = synth.generate_records(spec, category_map)
    synth.write_dataset(args.out, records)
    log.info("wrote %d records to %s", len(records), args.out)
    return 0


def _split_records(records, args, seed):
    """(train, val) record lists, honoring --split or --val-fraction."""
    if args.split:
        assignment = sp.SplitAssignment.load(args.split).assignment
        train = [r for r in records if assignment.get(r.image_id) == sp.TRAIN]
        val = [r for r in records if assignment.get(r.image_id) == sp.VAL]
        return train, val
    frac = args.val_fraction or 0.0
    if frac <= 0:
        return list(records), []
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(records))
    n_val = int(len(records) * frac)
    val_idx = set(int(i) for i in order[:n_val])
    train = [r for i, r in enumerate(records) if i not in val_idx]
    val = [r for i, r in enumerate(records) if i in val_idx]
    return train, val


def cmd_train(args, config):
    category_map = _category_map(args.category_map)
    records = load_records(args.dataset)
    train_records, val_records = _split_records(records, args, args.seed)
    if not train_records:
        raise ValueError("no training records selected")
    min_count = _pick(args, config, "train", "min_count", 5)
    corpus = build_corpus(train_records, category_map, min_count=min_count)
    val_corpus = None
    if val_records:
        for rec in val_records:
            rec.proposals = filter_proposals(rec.proposals)
            annotate_record(rec, category_map, corpus.vocabulary)
        val_corpus = Corpus(records=val_records, vocabulary=corpus.vocabulary,
                            category_map=category_map)

    d_p, grid_count = _infer_dims(train_records)
    mc = config.get("model", {})
    model_config = md.ModelConfig(
        d=_pick(args, config, "model", "hidden", mc.get("d", 64)),
        m=_pick(args, config, "model", "attn_hidden", mc.get("m", 32)),
        d_p=d_p,
        d_l=mc.get("d_l", 8),
        d_g=mc.get("d_g", 16),
        vocab_size=len(corpus.vocabulary),
        embed_dim=_pick(args, config, "model", "embed_dim", mc.get("embed_dim", 32)),
        grid_count=grid_count,
        k_max=max(len(w) for w in category_map.categories.values()),
    )
    train_config = tr.TrainConfig(
        learning_rate=_pick(args, config, "train", "lr", 5e-4),
        anneal_factor=_pick(args, config, "train", "anneal_factor", 0.8),
        anneal_every=_pick(args, config, "train", "anneal_every", 3),
        max_epochs=_pick(args, config, "train", "epochs", 50),
        batch_size=_pick(args, config, "train", "batch_size", 100),
        patience=_pick(args, config, "train", "patience", 10),
        grad_clip=_pick(args, config, "train", "grad_clip"),
        seed=args.seed,
    )

    initial, epoch_offset = None, 0
    if args.resume:
        initial, loaded_config, vocab_words = md.load_checkpoint(args.resume)
        if vocab_words != corpus.vocabulary.words():
            raise ValueError("resume checkpoint vocabulary does not match dataset")
        model_config = loaded_config
        if args.log and os.path.exists(args.log):
            with open(args.log) as f:
                rows = f.read().strip().splitlines()
            epoch_offset = len(rows) - 1 if len(rows) > 1 else 0

    log.info("training on %d captions (%d val), vocab %d, %d params",
             len(corpus.examples()),
             len(val_corpus.examples()) if val_corpus else 0,
             len(corpus.vocabulary),
             sum(p.value.size for p in
                 md.init_params(model_config, category_map, 0).all().values())
             if initial is None else
             sum(p.value.size for p in initial.all().values()))
    try:
        params, history = tr.fit(corpus, model_config, train_config,
                                 val_corpus=val_corpus, initial=initial)
    except tr.TrainingDiverged as exc:
        log.error("%s", exc)
        return 3

    md.save_checkpoint(args.out, params, corpus.vocabulary.words())
    log.info("wrote checkpoint to %s", args.out)
    if args.log:
        mode = "a" if (args.resume and epoch_offset) else "w"
        with open(args.log, mode) as f:
            if mode == "w":
                f.write("epoch,lr,train_loss,val_loss\n")
            for row in history:
                f.write(f"{row['epoch'] + epoch_offset},{row['lr']!r},"
                        f"{row['train_loss']!r},{row['val_loss']!r}\n")
        log.info("wrote training log to %s", args.log)
    if history:
        total = sum(r["seconds"] for r in history)
        log.info("trained %d epochs in %.1fs, final train loss %.4f",
                 len(history), total, history[-1]["train_loss"])
    return 0


def _restore_vocab(words):
    vocab = Vocabulary(words[3:])
    if vocab.words() != list(words):
        raise ValueError("checkpoint vocabulary is malformed")
    return vocab


def cmd_caption(args, config):
    if not os.path.exists(args.checkpoint):
        log.error("checkpoint %s does not exist", args.checkpoint)
        return 2
    category_map = _category_map(args.category_map)
    params, _, vocab_words = md.load_checkpoint(args.checkpoint)
    vocab = _restore_vocab(vocab_words)
    records = load_records(args.dataset)
    for rec in records:
        rec.proposals = filter_proposals(rec.proposals)
    if args.split and args.subset != "all":
        assignment = sp.SplitAssignment.load(args.split).assignment
        records = [r for r in records if assignment.get(r.image_id) == args.subset]

    substitutions = {}
    for pair in args.substitute or []:
        novel, _, standin = pair.partition("=")
        if not standin:
            raise ValueError(f"--substitute needs novel=standin, got {pair!r}")
        substitutions[novel] = standin
    mode = "greedy"
    if args.constrain:
        mode = "constrained"
    elif args.beam > 1:
        mode = "beam"
    decode_config = inf.DecodeConfig(
        mode=mode,
        beam_width=max(args.beam, 1),
        max_length=args.max_length,
        constrain_top={"T1": 1, "T2": 2}.get(args.constrain, 0),
        oracle_regions=args.oracle_regions,
        embedding_substitutions=substitutions,
    )
    with open(args.out, "w") as f:
        for rec in records:
            template = inf.decode(rec, params, vocab, category_map, decode_config)
            json.dump(template.to_json(rec), f, sort_keys=True,
                      separators=(",", ":"))
            f.write("\n")
    log.info("wrote %d captions to %s", len(records), args.out)
    return 0


def cmd_split(args, config):
    category_map = _category_map(args.category_map)
    records = load_records(args.dataset)
    corpus = build_corpus(records, category_map,
                          min_count=_pick(args, config, "train", "min_count", 5))
    if args.mode == "robust":
        split = sp.build_robust_split(corpus, val_fraction=args.val_fraction or 0.1,
                                      seed=args.seed)
        _check_robust_invariants(corpus, split)
    else:
        excluded = (args.excluded.split(",") if args.excluded
                    else list(sp.DEFAULT_EXCLUDED))
        excluded = [c for c in excluded if c in category_map.categories]
        split = sp.build_exclusion_split(
            corpus, excluded, test_fraction=args.test_fraction or 0.2,
            val_fraction=args.val_fraction or 0.1, seed=args.seed)
    split.save(args.out)
    log.info("wrote %s split (%d/%d/%d train/val/test) to %s", args.mode,
             len(split.ids(sp.TRAIN)), len(split.ids(sp.VAL)),
             len(split.ids(sp.TEST)), args.out)
    return 0


def _check_robust_invariants(corpus, split):
    matrix = sp.cooccurrence(corpus)
    mentions = {rec.image_id: sp.record_mentions(rec, corpus.category_map)
                for rec in corpus.records}
    train = set(split.ids(sp.TRAIN)) | set(split.ids(sp.VAL))
    for cat, total in matrix.instance_counts.items():
        in_train = sum(1 for i in train if cat in mentions[i])
        if total and in_train < -(-total // 2):
            raise AssertionError(f"halving invariant violated for {cat!r}")
    for a, b in split.excluded_pairs:
        for i in train:
            if a in mentions[i] and b in mentions[i]:
                raise AssertionError(f"excluded pair {(a, b)} co-occurs in train")


def cmd_eval(args, config):
    category_map = _category_map(args.category_map)
    records = {r.image_id: r for r in load_records(args.dataset)}
    for rec in records.values():
        rec.proposals = filter_proposals(rec.proposals)
    captions, templates = {}, {}
    with open(args.captions) as f:
        for line in f:
            if not line.strip():
                continue
            obj = json.loads(line)
            image_id = obj["image_id"]
            captions[image_id] = obj["caption"]
            tokens = [t if isinstance(t, str) else inf.Slot(t["slot"])
                      for t in obj.get("template", [])]
            groundings = [inf.SlotGrounding(slot_pos=g["slot_pos"],
                                            region=g["region"],
                                            word=g["word"],
                                            box=tuple(g["box"]))
                          for g in obj.get("groundings", [])]
            templates[image_id] = inf.Template(
                tokens=tokens, filled=obj["caption"].split(),
                groundings=groundings, score=obj.get("score", 0.0))

    ids = [i for i in captions if i in records]
    report = ev.EvalReport(counts={"images": len(ids)})
    cands = [tokenize(captions[i]) for i in ids]
    refs = [[tokenize(c) for c in records[i].captions] for i in ids]
    scorable = [(c, r) for c, r in zip(cands, refs) if r]
    if scorable:
        report.bleu1 = ev.corpus_bleu([c for c, _ in scorable],
                                      [r for _, r in scorable], 1)
        report.bleu4 = ev.corpus_bleu([c for c, _ in scorable],
                                      [r for _, r in scorable], 4)
    if any(records[i].gt_boxes for i in ids):
        report.grounding = ev.grounding_accuracy(
            {i: templates[i] for i in ids}, records, category_map)

    if args.split:
        split = sp.SplitAssignment.load(args.split)
        if split.excluded_pairs:
            corpus = Corpus(records=[records[i] for i in ids],
                            vocabulary=None, category_map=category_map)
            pairs = ev.heldout_pairs(corpus, split, category_map)
            report.compositional = ev.compositional_accuracy(
                captions, pairs, category_map)
        if split.excluded_categories:
            per_cat, macro = ev.macro_novel_object_f1(captions, split,
                                                      category_map)
            report.f1_per_category = per_cat
            report.f1_macro = macro

    print(report.dumps())
    print(report.format_table(), file=sys.stderr)
    return 0


def _gradcheck_setup(hidden, n_regions, vocab_size, seed):
    """A tiny record + caption with visual and textual targets."""
    from .corpus import BoundingBox, ImageRecord, RegionProposal

    categories = {"dog": ["dog", "puppy"], "cat": ["cat"], "table": ["table"]}
    category_map = CategoryMap(categories)
    vocab = Vocabulary([f"w{i}" for i in range(vocab_size - 3)])
    assert len(vocab) == vocab_size
    config = md.ModelConfig(d=hidden, m=max(4, hidden // 2), d_p=5, d_l=3,
                            d_g=5, vocab_size=vocab_size, embed_dim=6,
                            grid_count=2, k_max=2)
    rng = np.random.default_rng(seed)
    cats = ["dog", "dog", "cat", "table"][:n_regions]
    proposals = [RegionProposal(
        box=BoundingBox(10 * i, 10 * i, 10 * i + 30, 10 * i + 30),
        category=cats[i], confidence=0.9,
        pooled_feature=rng.normal(size=config.d_p)) for i in range(n_regions)]
    record = ImageRecord(image_id=0, width=100, height=100,
                         proposals=proposals,
                         gt_boxes=[(proposals[0].box, "dog")],
                         captions=[],
                         grid_features=rng.normal(size=(2, config.d_p)))
    tokens = [
        AnnotatedToken(surface="w0", kind=TEXTUAL, vocab_index=vocab.index("w0"),
                       input_index=vocab.index("w0")),
        AnnotatedToken(surface="puppies", kind=VISUAL, category="dog",
                       plurality_target=1, finegrained_target=1,
                       grounding_regions=tuple(
                           i for i in range(n_regions) if cats[i] == "dog"),
                       vocab_index=vocab.unk_index, input_index=vocab.unk_index),
    ]
    params = md.init_params(config, category_map, seed=seed)
    # move params off their init point so ReLU kinks are unlikely at 0
    for p in params.all().values():
        p.value += rng.normal(0.0, 0.02, size=p.value.shape)
    return record, tokens, params, vocab


def cmd_gradcheck(args, config):
    record, tokens, params, vocab = _gradcheck_setup(
        args.hidden, args.regions, args.vocab, args.seed)

    def loss():
        return tr.sequence_loss(record, tokens, params, vocab).node

    err = ad.grad_check(loss, params.all().values(), eps=args.eps)
    print(json.dumps({"max_relative_error": err, "tolerance": args.tol}))
    log.info("gradient check: max relative error %.3g (tolerance %.3g)",
             err, args.tol)
    return 0 if err < args.tol else 1


def _add_common(p):
    p.add_argument("--config", help="JSON config file; flags override it")
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--jobs", type=int, default=1,
                   help="worker cap (runs are sequential at this scale)")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="slotcap",
        description="Grounded captioning with pointer-based slot templates")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    _add_common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--category-map", help="JSON map; written if missing")
    p.add_argument("--images", type=int)
    p.add_argument("--categories", help="comma-separated category subset")
    p.add_argument("--min-objects", type=int, dest="min_objects")
    p.add_argument("--max-objects", type=int, dest="max_objects")
    p.add_argument("--distractors", type=int)
    p.add_argument("--captions-per-image", type=int, dest="captions_per_image")
    p.add_argument("--plural-fraction", type=float, dest="plural_fraction")
    p.add_argument("--d-p", type=int, dest="d_p")
    p.add_argument("--grid-count", type=int, dest="grid_count")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train the decoder")
    _add_common(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--category-map")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--log", help="CSV training log path")
    p.add_argument("--split", help="train on the train portion of this split file")
    p.add_argument("--val-fraction", type=float, dest="val_fraction")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--patience", type=int)
    p.add_argument("--anneal-every", type=int, dest="anneal_every")
    p.add_argument("--anneal-factor", type=float, dest="anneal_factor")
    p.add_argument("--grad-clip", type=float, dest="grad_clip")
    p.add_argument("--min-count", type=int, dest="min_count")
    p.add_argument("--hidden", type=int)
    p.add_argument("--attn-hidden", type=int, dest="attn_hidden")
    p.add_argument("--embed-dim", type=int, dest="embed_dim")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("caption", help="decode captions for a dataset")
    _add_common(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--category-map")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--beam", type=int, default=1)
    p.add_argument("--constrain", choices=["T1", "T2"],
                   help="constrained beam search on top detected concepts")
    p.add_argument("--oracle-regions", action="store_true", dest="oracle_regions")
    p.add_argument("--max-length", type=int, default=16, dest="max_length")
    p.add_argument("--split", help="split file for --subset")
    p.add_argument("--subset", default="all",
                   choices=["all", "train", "val", "test"])
    p.add_argument("--substitute", action="append", metavar="NOVEL=STANDIN",
                   help="category embedding substitution, repeatable")
    p.set_defaults(func=cmd_caption)

    p = sub.add_parser("split", help="build a dataset split")
    _add_common(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--category-map")
    p.add_argument("--mode", required=True, choices=["robust", "exclusion"])
    p.add_argument("--out", required=True)
    p.add_argument("--val-fraction", type=float, dest="val_fraction")
    p.add_argument("--test-fraction", type=float, dest="test_fraction")
    p.add_argument("--excluded", help="comma-separated categories (exclusion mode)")
    p.add_argument("--min-count", type=int, dest="min_count")
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("eval", help="score generated captions")
    _add_common(p)
    p.add_argument("--captions", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--category-map")
    p.add_argument("--split")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of the decoder")
    _add_common(p)
    p.add_argument("--hidden", type=int, default=16)
    p.add_argument("--regions", type=int, default=3)
    p.add_argument("--vocab", type=int, default=20)
    p.add_argument("--eps", type=float, default=1e-4,
                   help="finite-difference step; at 1e-5 the difference "
                        "rounding noise dominates tiny gradients")
    p.add_argument("--tol", type=float, default=1e-3)
    p.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv=None):
    _setup_logging()
    args = build_parser().parse_args(argv)
    config = _load_config(args.config)
    if args.jobs < 1:
        print("--jobs must be >= 1", file=sys.stderr)
        return 2
    try:
        return args.func(args, config)
    except (ValueError, FileNotFoundError, ad.ShapeError) as exc:
        log.error("%s", exc)
        return 2


if __name__ == "__main__":
    sys.exit(main())
