"""Test-split evaluation: anomaly confusion counts and corpus caption scores.

The polarity convention throughout: positive = normal image, negative =
anomaly. Hypotheses and references go through exactly the same
normalize/tokenize pipeline as training preprocessing.
"""

from __future__ import annotations

from dataclasses import dataclass

from . import meteor, text
from .data import resolve_feature
from .model import beam_decode, classify, greedy_decode, predict_label


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int  # predicted normal, is normal
    fp: int  # predicted normal, is anomaly
    fn: int  # predicted anomaly, is normal
    tn: int  # predicted anomaly, is anomaly

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def ratios(self) -> list[list[float]]:
        """Row-normalized form; rows are the true classes (normal, anomaly)."""
        rows = []
        for correct, wrong in ((self.tp, self.fn), (self.tn, self.fp)):
            n = correct + wrong
            rows.append([correct / n, wrong / n] if n else [0.0, 0.0])
        return rows


def confusion(preds: list[str], labels: list[str]) -> ConfusionMatrix:
    if len(preds) != len(labels):
        raise ValueError(f"{len(preds)} predictions vs {len(labels)} labels")
    if not preds:
        raise ValueError("nothing to evaluate")
    tp = fp = fn = tn = 0
    for pred, label in zip(preds, labels):
        if label == "normal":
            if pred == "normal":
                tp += 1
            else:
                fn += 1
        else:
            if pred == "normal":
                fp += 1
            else:
                tn += 1
    return ConfusionMatrix(tp, fp, fn, tn)


def accuracy(cm: ConfusionMatrix) -> float:
    if cm.total == 0:
        raise ValueError("empty confusion matrix")
    return (cm.tp + cm.tn) / cm.total


@dataclass
class CaptionEvaluation:
    entries: list[tuple[str, meteor.MeteorStats]]
    pooled: meteor.MeteorStats
    mean_score: float
    cm: ConfusionMatrix | None
    hypotheses: dict[str, str]

    @property
    def pooled_x100(self) -> float:
        return 100.0 * self.pooled.score

    @property
    def mean_x100(self) -> float:
        return 100.0 * self.mean_score

    def report(self) -> str:
        out = meteor.format_report(self.entries, self.pooled, self.mean_score)
        if self.cm is not None:
            cm = self.cm
            out += "CLASSIFICATION\tTP\tFP\tFN\tTN\tACCURACY\n"
            out += (
                f"COUNTS\t{cm.tp}\t{cm.fp}\t{cm.fn}\t{cm.tn}\t{accuracy(cm):.6f}\n"
            )
        return out


def _decode_tokens(params, vocab: text.Vocabulary, indices: list[int]) -> list[str]:
    # decoded specials never reach the scorer; UNK turns into a plain token
    words = []
    for idx in indices:
        if idx in (text.PAD, text.BOS, text.EOS):
            continue
        words.append("unk" if idx == text.UNK else vocab.index_to_token[idx])
    return words


def evaluate_captions(params, vocab: text.Vocabulary, records, lexicon=None,
                      decode_mode: str = "greedy", beam_width: int = 3,
                      base_dir=None, with_classification: bool = True,
                      jobs: int = 1, decode_fn=None) -> CaptionEvaluation:
    """Decode every record, score against its reference captions, and
    (optionally) run the anomaly classifier.

    Records are processed independently (parallelizable by ``jobs``) and
    the report is assembled in record-id order regardless of job count.
    ``decode_fn`` overrides decoding (record, feature) -> token list, as a
    seam for tests and custom decoders.
    """
    if not records:
        raise ValueError("empty evaluation split")
    if decode_mode not in ("greedy", "beam"):
        raise ValueError(f"unknown decode mode {decode_mode!r}")

    def score_one(record):
        feature = resolve_feature(record, base_dir, params.config.feature_dim)
        if decode_fn is not None:
            hyp_tokens = list(decode_fn(record, feature))
        elif decode_mode == "beam":
            indices, _ = beam_decode(params, feature, beam_width)
            hyp_tokens = _decode_tokens(params, vocab, indices)
        else:
            hyp_tokens = _decode_tokens(params, vocab, greedy_decode(params, feature))
        hyp = text.tokenize(text.normalize_caption(" ".join(hyp_tokens)))
        refs = [text.tokenize(text.normalize_caption(c)) for c in record.captions]
        stats = meteor.score_multi_ref(hyp, refs, lexicon)
        pred = predict_label(classify(params, feature)) if with_classification else None
        return record.id, stats, " ".join(hyp), pred

    ordered = sorted(records, key=lambda r: r.id)
    if jobs > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(score_one, ordered))
    else:
        results = [score_one(r) for r in ordered]

    entries = [(rec_id, stats) for rec_id, stats, _, _ in results]
    hypotheses = {rec_id: hyp for rec_id, _, hyp, _ in results}
    pooled = meteor.pool_stats([stats for _, stats in entries])
    mean_score = sum(stats.score for _, stats in entries) / len(entries)
    cm = None
    if with_classification:
        preds = [pred for _, _, _, pred in results]
        labels = [r.label for r in ordered]
        cm = confusion(preds, labels)
    return CaptionEvaluation(entries, pooled, mean_score, cm, hypotheses)
