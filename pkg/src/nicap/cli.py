"""Command-line entry point.

One binary, subcommand style. Progress goes to stderr; machine-readable
artifacts go to files or stdout. Exit codes: 0 success, 1 validation or
lint failure, 2 I/O or format error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import os
import sys

from . import plots, text
from .data import (
    FeatureFormatError,
    ManifestError,
    generate_fixture,
    lint_caption,
    load_feature,
    load_manifest,
    split_dataset,
)
from .evaluate import evaluate_captions
from .meteor import SynonymLexicon, corpus_score, format_report, score_pair
from .model import (
    CheckpointFormatError,
    ModelConfig,
    NicParams,
    NonFiniteLossError,
    beam_decode,
    build_training_samples,
    classify,
    greedy_decode,
    init_params,
    joint_loss,
    load_checkpoint,
    parameter_shapes,
    predict_label,
    save_checkpoint,
    train,
)
from .tensor import Rng, gradcheck

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_IO = 2
EXIT_NUMERIC = 3


def _progress(message: str) -> None:
    print(message, file=sys.stderr)


def _require(condition: bool, message: str) -> None:
    if not condition:
        raise ValueError(message)


def _load_lexicon(path) -> SynonymLexicon | None:
    return SynonymLexicon.load(path) if path else None


def _decode_to_text(params, vocab, feature, beam_width):
    if beam_width:
        indices, _ = beam_decode(params, feature, beam_width)
    else:
        indices = greedy_decode(params, feature)
    words = [
        "unk" if i == text.UNK else vocab.index_to_token[i]
        for i in indices
        if i not in (text.PAD, text.BOS, text.EOS)
    ]
    return " ".join(words)


def cmd_preprocess(args) -> int:
    _require(args.min_freq >= 1, "--min-freq must be >= 1")
    _require(args.max_len >= 1, "--max-len must be >= 1")
    records = load_manifest(args.manifest)
    tokenized = [
        text.tokenize(text.normalize_caption(c)) for r in records for c in r.captions
    ]
    kept = text.filter_by_length(tokenized, args.max_len)
    corpus = tokenized if args.filter_order == "vocab-first" else kept
    vocab = text.build_vocabulary(corpus, args.min_freq)
    vocab.save(args.vocab_out)
    _progress(f"vocabulary written to {args.vocab_out}")
    print(f"captions_total\t{len(tokenized)}")
    print(f"captions_kept\t{len(kept)}")
    print(f"captions_discarded\t{len(tokenized) - len(kept)}")
    print(f"vocab_size\t{len(vocab)}")
    return EXIT_OK


def cmd_train(args) -> int:
    _require(args.epochs >= 0, "--epochs must be >= 0")
    _require(args.lr >= 0, "--lr must be >= 0")
    _require(args.batch >= 1, "--batch must be >= 1")
    _require(0 < args.split_fraction < 1, "--split-fraction must be in (0, 1)")
    _require(0 <= args.dropout < 1, "--dropout must be in [0, 1)")
    _require(args.loss_weight >= 0, "--lambda must be >= 0")
    _require(args.clip > 0, "--clip must be > 0")

    vocab = text.Vocabulary.load(args.vocab)
    records = load_manifest(args.manifest)
    train_records, _ = split_dataset(records, args.split_fraction, args.seed)

    if args.resume:
        params, start_epoch = load_checkpoint(args.resume)
        _require(
            params.config.vocab_size == len(vocab),
            f"checkpoint vocab size {params.config.vocab_size} != vocabulary file {len(vocab)}",
        )
        config = params.config
        _progress(f"resumed {args.resume} at epoch {start_epoch}")
    else:
        config = ModelConfig(
            vocab_size=len(vocab),
            feature_dim=args.feature_dim,
            embed_dim=args.embed_dim,
            hidden_dim=args.hidden_dim,
            max_caption_len=args.max_len,
            dropout_rate=args.dropout,
            classifier_hidden=(args.classifier_h1, args.classifier_h2),
            loss_weight=args.loss_weight,
        )
        params = init_params(config, Rng(args.seed))
        start_epoch = 0

    samples = build_training_samples(
        train_records, vocab, config.max_caption_len,
        base_dir=os.path.dirname(os.path.abspath(args.manifest)),
        expected_dim=config.feature_dim,
    )
    _require(bool(samples), "no usable training samples after length filtering")
    _progress(f"training on {len(samples)} samples from {len(train_records)} records")

    stem, _ = os.path.splitext(args.checkpoint)
    log_path, curve_path = stem + "_loss.tsv", stem + "_loss.png"

    def on_epoch_end(epoch, mean_loss):
        save_checkpoint(args.checkpoint, params, trained_epochs=epoch + 1)
        _progress(f"epoch {epoch}: mean loss {mean_loss:.6f}")

    history = []
    if args.epochs > 0:
        history = train(
            params, samples, args.epochs, args.lr, Rng(args.seed),
            clip_norm=args.clip, batch_size=args.batch, max_steps=args.max_steps,
            start_epoch=start_epoch, on_epoch_end=on_epoch_end,
        )
    save_checkpoint(args.checkpoint, params, trained_epochs=start_epoch + len(history))
    with open(log_path, "w", encoding="utf-8") as fh:
        fh.write("epoch\tmean_loss\n")
        for k, value in enumerate(history):
            fh.write(f"{start_epoch + k}\t{value:.6f}\n")
    if history:
        plots.save_loss_curve(history, curve_path)
    print(f"checkpoint\t{args.checkpoint}")
    print(f"loss_log\t{log_path}")
    return EXIT_OK


def cmd_caption(args) -> int:
    _require(args.beam is None or args.beam >= 1, "--beam must be >= 1")
    params, _ = load_checkpoint(args.checkpoint)
    vocab = text.Vocabulary.load(args.vocab)
    _require(
        len(vocab) == params.config.vocab_size,
        f"vocabulary file size {len(vocab)} != checkpoint vocab {params.config.vocab_size}",
    )
    feature = load_feature(args.feature, params.config.feature_dim)
    print(_decode_to_text(params, vocab, feature, args.beam))
    return EXIT_OK


def cmd_classify(args) -> int:
    params, _ = load_checkpoint(args.checkpoint)
    feature = load_feature(args.feature, params.config.feature_dim)
    probability = classify(params, feature)
    print(f"{predict_label(probability)}\t{probability:.6f}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    _require(args.beam is None or args.beam >= 1, "--beam must be >= 1")
    _require(0 < args.split_fraction < 1, "--split-fraction must be in (0, 1)")
    _require(args.jobs >= 1, "--jobs must be >= 1")
    params, _ = load_checkpoint(args.checkpoint)
    vocab = text.Vocabulary.load(args.vocab)
    _require(
        len(vocab) == params.config.vocab_size,
        f"vocabulary file size {len(vocab)} != checkpoint vocab {params.config.vocab_size}",
    )
    records = load_manifest(args.manifest)
    if args.split != "all":
        train_recs, test_recs = split_dataset(records, args.split_fraction, args.seed)
        records = train_recs if args.split == "train" else test_recs
    result = evaluate_captions(
        params, vocab, records,
        lexicon=_load_lexicon(args.lexicon),
        decode_mode="beam" if args.beam else "greedy",
        beam_width=args.beam or 3,
        base_dir=os.path.dirname(os.path.abspath(args.manifest)),
        jobs=args.jobs,
    )
    with open(args.report, "w", encoding="utf-8") as fh:
        fh.write(result.report())
    stem, _ = os.path.splitext(args.report)
    plots.save_score_histogram([s.score for _, s in result.entries], stem + "_scores.png")
    if result.cm is not None:
        plots.save_confusion_matrix(result.cm, stem + "_confusion.png")
    _progress(f"report written to {args.report}")
    print(f"POOLED_METEOR_X100\t{result.pooled_x100:.2f}")
    print(f"MEAN_METEOR_X100\t{result.mean_x100:.2f}")
    if result.cm is not None:
        cm = result.cm
        acc = (cm.tp + cm.tn) / cm.total
        print(f"ACCURACY\t{acc:.4f}")
    return EXIT_OK


def cmd_score_meteor(args) -> int:
    _require(args.jobs >= 1, "--jobs must be >= 1")
    with open(args.hyp, encoding="utf-8") as fh:
        hyp_lines = fh.read().splitlines()
    with open(args.ref, encoding="utf-8") as fh:
        ref_lines = fh.read().splitlines()
    if len(hyp_lines) != len(ref_lines):
        print(
            f"error: {args.hyp} has {len(hyp_lines)} lines but {args.ref} has {len(ref_lines)}",
            file=sys.stderr,
        )
        return EXIT_IO
    _require(bool(hyp_lines), "input files are empty")
    lexicon = _load_lexicon(args.lexicon)

    def tokens(line):
        return text.tokenize(text.normalize_caption(line))

    pairs = [(tokens(h), [tokens(r)]) for h, r in zip(hyp_lines, ref_lines)]
    if args.jobs > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=args.jobs) as pool:
            stats = list(pool.map(lambda p: score_pair(p[0], p[1][0], lexicon), pairs))
        from .meteor import pool_stats

        pooled, mean = pool_stats(stats), sum(s.score for s in stats) / len(stats)
    else:
        pooled, mean = corpus_score(pairs, lexicon)
        stats = [score_pair(h, rs[0], lexicon) for h, rs in pairs]
    report = format_report(
        [(str(i + 1), s) for i, s in enumerate(stats)], pooled, mean
    )
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(report)
        _progress(f"report written to {args.out}")
    else:
        sys.stdout.write(report)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    _require(args.samples >= 1, "--samples must be >= 1")
    _require(args.epsilon > 0, "--epsilon must be > 0")
    config = ModelConfig(
        vocab_size=args.vocab_size,
        feature_dim=args.feature_dim,
        embed_dim=args.embed_dim,
        hidden_dim=args.hidden_dim,
        max_caption_len=max(args.caption_len, 1),
        dropout_rate=0.0,
        classifier_hidden=(args.classifier_h1, args.classifier_h2),
        loss_weight=1.0,
    )
    rng = Rng(args.seed)
    # healthy weight scale: keeps sampled gradients above fd roundoff
    tensors = {
        name: rng.uniform(-0.8, 0.8, shape)
        for name, shape in parameter_shapes(config).items()
    }
    params = NicParams(config, tensors)
    feature = rng.normal(shape=(config.feature_dim,))
    words = [4 + int(k) for k in rng.integers(0, config.vocab_size - 4, size=args.caption_len)]
    target = [text.BOS] + words + [text.EOS]

    def loss_fn():
        return joint_loss(params, feature, target, "anomaly")

    worst = gradcheck(loss_fn, params.all(), epsilon=args.epsilon,
                      samples=args.samples, rng=rng.child(1))
    print(f"max_rel_err\t{worst:.3e}")
    if worst <= args.threshold:
        print("PASS")
        return EXIT_OK
    print("FAIL")
    return EXIT_NUMERIC


def cmd_lint(args) -> int:
    records = load_manifest(args.manifest)
    hard_count = 0
    for rec in records:
        for idx, caption in enumerate(rec.captions):
            for violation in lint_caption(caption):
                if violation.severity == "hard":
                    hard_count += 1
                print(
                    f"{rec.id}\t{idx}\t{violation.code}\t{violation.severity}\t{violation.message}"
                )
    _progress(f"{hard_count} hard violation(s) in {len(records)} records")
    return EXIT_VALIDATION if hard_count else EXIT_OK


def cmd_fixture(args) -> int:
    _require(args.records >= 1, "--records must be >= 1")
    _require(args.feature_dim >= 1, "--feature-dim must be >= 1")
    manifest = generate_fixture(
        args.out_dir, args.records, vocab_words=args.vocab_words,
        seed=args.seed, feature_dim=args.feature_dim,
    )
    print(f"manifest\t{manifest}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="nicap",
        description="caption + anomaly-classification toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("preprocess", help="build a vocabulary from manifest captions")
    p.add_argument("--manifest", required=True)
    p.add_argument("--vocab-out", required=True)
    p.add_argument("--min-freq", type=int, default=3)
    p.add_argument("--max-len", type=int, default=14)
    p.add_argument("--filter-order", choices=("length-first", "vocab-first"),
                   default="length-first")
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train", help="train the joint model")
    p.add_argument("--manifest", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--checkpoint", required=True, help="output checkpoint path")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--lr", type=float, default=0.1)
    p.add_argument("--batch", type=int, default=1)
    p.add_argument("--lambda", dest="loss_weight", type=float, default=1.0)
    p.add_argument("--dropout", type=float, default=0.5)
    p.add_argument("--max-len", type=int, default=14)
    p.add_argument("--clip", type=float, default=5.0)
    p.add_argument("--split-fraction", type=float, default=0.8)
    p.add_argument("--feature-dim", type=int, default=2048)
    p.add_argument("--embed-dim", type=int, default=512)
    p.add_argument("--hidden-dim", type=int, default=512)
    p.add_argument("--classifier-h1", type=int, default=256)
    p.add_argument("--classifier-h2", type=int, default=64)
    p.add_argument("--max-steps", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("caption", help="caption one feature file")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--feature", required=True)
    p.add_argument("--beam", type=int, help="beam width (omit for greedy)")
    p.set_defaults(func=cmd_caption)

    p = sub.add_parser("classify", help="anomaly probability of one feature file")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--feature", required=True)
    p.set_defaults(func=cmd_classify)

    p = sub.add_parser("evaluate", help="caption + classification report over a split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--report", required=True, help="output report path")
    p.add_argument("--lexicon")
    p.add_argument("--beam", type=int, help="beam width (omit for greedy)")
    p.add_argument("--split", choices=("train", "test", "all"), default="test")
    p.add_argument("--split-fraction", type=float, default=0.8)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("score-meteor", help="score line-aligned hypothesis/reference files")
    p.add_argument("--hyp", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument("--lexicon")
    p.add_argument("--out", help="report path (default stdout)")
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_score_meteor)

    p = sub.add_parser("gradcheck", help="finite-difference check of the joint model")
    p.add_argument("--vocab-size", type=int, default=11)
    p.add_argument("--feature-dim", type=int, default=32)
    p.add_argument("--embed-dim", type=int, default=8)
    p.add_argument("--hidden-dim", type=int, default=8)
    p.add_argument("--caption-len", type=int, default=4)
    p.add_argument("--classifier-h1", type=int, default=16)
    p.add_argument("--classifier-h2", type=int, default=8)
    p.add_argument("--samples", type=int, default=200)
    p.add_argument("--epsilon", type=float, default=1e-5)
    p.add_argument("--threshold", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("lint", help="check manifest captions against the caption rules")
    p.add_argument("--manifest", required=True)
    p.set_defaults(func=cmd_lint)

    p = sub.add_parser("fixture", help="generate a synthetic dataset")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--records", type=int, default=8)
    p.add_argument("--vocab-words", type=int, default=24)
    p.add_argument("--feature-dim", type=int, default=2048)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_fixture)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ManifestError, FeatureFormatError, CheckpointFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except NonFiniteLossError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
