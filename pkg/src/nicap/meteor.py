"""Unigram-alignment caption metric.

Hypothesis and reference tokens are aligned in three sequential stages
(exact form, shared word stem, lexicon synonymy), each stage matching as
many of the still-unmatched words as possible and, among the
maximum-cardinality injective mappings, picking one with the fewest
crossing pairs. The final score combines a recall-weighted harmonic mean
with a fragmentation penalty derived from the number of chunks.

All scoring is pure; sentence pairs may be scored in parallel. A loaded
SynonymLexicon is immutable and freely shareable.
"""

from __future__ import annotations

from dataclasses import dataclass

from .porter import porter_stem

STAGE_EXACT = "exact"
STAGE_STEM = "stem"
STAGE_SYNONYM = "synonym"


@dataclass(frozen=True)
class MatchPair:
    hyp: int
    ref: int
    stage: str


@dataclass(frozen=True)
class Alignment:
    """Injective unigram mapping, pairs sorted by hypothesis position."""

    pairs: tuple[MatchPair, ...]

    @property
    def m(self) -> int:
        return len(self.pairs)


@dataclass(frozen=True)
class MeteorStats:
    m: int
    chunks: int
    hyp_len: int
    ref_len: int
    precision: float
    recall: float
    fscore: float
    penalty: float
    score: float


class SynonymLexicon:
    """Token synonymy from user-supplied groups.

    Two distinct tokens are synonyms iff they share at least one group.
    The relation is symmetric by construction and not necessarily
    transitive (a token may belong to several groups).
    """

    def __init__(self, groups=()):
        self.groups: tuple[frozenset[str], ...] = tuple(frozenset(g) for g in groups)
        self._membership: dict[str, set[int]] = {}
        for gid, group in enumerate(self.groups):
            for token in group:
                self._membership.setdefault(token, set()).add(gid)

    def synonyms(self, a: str, b: str) -> bool:
        ga = self._membership.get(a)
        if not ga:
            return False
        gb = self._membership.get(b)
        return bool(gb) and not ga.isdisjoint(gb)

    def __len__(self) -> int:
        return len(self.groups)

    @classmethod
    def empty(cls) -> "SynonymLexicon":
        return cls()

    @classmethod
    def load(cls, path) -> "SynonymLexicon":
        """One synonym group per line, space-separated; ``#`` lines ignored."""
        groups = []
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                tokens = line.split()
                if len(tokens) >= 2:
                    groups.append(tokens)
        return cls(groups)


def _count_crosses(pairs) -> int:
    """Pairs (i,j),(i',j') cross iff (i-i')*(j-j') < 0."""
    n = 0
    for a in range(len(pairs)):
        for b in range(a + 1, len(pairs)):
            if (pairs[a][0] - pairs[b][0]) * (pairs[a][1] - pairs[b][1]) < 0:
                n += 1
    return n


def _best_stage_mapping(candidates: dict[int, tuple[int, ...]]) -> list[tuple[int, int]]:
    """Exact search for one stage's mapping.

    ``candidates`` maps each unmatched hypothesis position to the sorted
    reference positions its word may pair with. Among all injective
    mappings the result maximizes the number of pairs, then minimizes
    crossing pairs, then is the lexicographically smallest sorted pair
    list. Exact via memoized search over (hyp position, used-ref set).
    """
    hs = sorted(h for h, refs in candidates.items() if refs)
    if not hs:
        return []
    rs = sorted({r for h in hs for r in candidates[h]})
    rpos = {r: k for k, r in enumerate(rs)}
    adj = [tuple(rpos[r] for r in candidates[h]) for h in hs]
    memo: dict[tuple[int, int], tuple[int, int]] = {}

    def value(k: int, used: int) -> tuple[int, int]:
        # best (matches, -crosses) achievable for suffix hs[k:]
        if k == len(hs):
            return (0, 0)
        key = (k, used)
        cached = memo.get(key)
        if cached is not None:
            return cached
        best = value(k + 1, used)
        for bit in adj[k]:
            if used >> bit & 1:
                continue
            # earlier-chosen refs with larger index each cross this pair
            added = (used >> (bit + 1)).bit_count()
            sub = value(k + 1, used | (1 << bit))
            cand = (sub[0] + 1, sub[1] - added)
            if cand > best:
                best = cand
        memo[key] = best
        return best

    # forward walk: matching the current hyp position (with the smallest
    # viable ref) always lexicographically beats skipping it
    pairs: list[tuple[int, int]] = []
    used = 0
    for k in range(len(hs)):
        target = value(k, used)
        for bit in adj[k]:
            if used >> bit & 1:
                continue
            added = (used >> (bit + 1)).bit_count()
            sub = value(k + 1, used | (1 << bit))
            if (sub[0] + 1, sub[1] - added) == target:
                pairs.append((hs[k], rs[bit]))
                used |= 1 << bit
                break
    return pairs


def align(hyp: list[str], ref: list[str], lexicon: SynonymLexicon | None = None) -> Alignment:
    """Three-stage injective alignment between token lists.

    Stages run in the order exact, stem, synonym; each operates only on
    words left unmatched by earlier stages and resolves ties by fewest
    crossings within the stage, then lexicographically smallest pair list.
    """
    hyp_left = set(range(len(hyp)))
    ref_left = set(range(len(ref)))
    hyp_stems = [porter_stem(w) for w in hyp]
    ref_stems = [porter_stem(w) for w in ref]

    def predicate(stage):
        if stage == STAGE_EXACT:
            return lambda i, j: hyp[i] == ref[j]
        if stage == STAGE_STEM:
            return lambda i, j: hyp_stems[i] == ref_stems[j]
        return lambda i, j: lexicon.synonyms(hyp[i], ref[j])

    all_pairs: list[MatchPair] = []
    for stage in (STAGE_EXACT, STAGE_STEM, STAGE_SYNONYM):
        if stage == STAGE_SYNONYM and not lexicon:
            continue
        pred = predicate(stage)
        candidates = {
            i: tuple(j for j in sorted(ref_left) if pred(i, j)) for i in sorted(hyp_left)
        }
        for i, j in _best_stage_mapping(candidates):
            all_pairs.append(MatchPair(i, j, stage))
            hyp_left.discard(i)
            ref_left.discard(j)
    all_pairs.sort(key=lambda p: p.hyp)
    return Alignment(tuple(all_pairs))


def count_chunks(alignment: Alignment) -> int:
    """Number of maximal runs of matches adjacent in both sentences.

    A run continues only while both the hypothesis position and the
    reference position advance by exactly one. Zero when nothing matched.
    """
    chunks = 0
    prev = None
    for pair in alignment.pairs:
        if prev is None or pair.hyp != prev.hyp + 1 or pair.ref != prev.ref + 1:
            chunks += 1
        prev = pair
    return chunks


def _stats(m: int, chunks: int, hyp_len: int, ref_len: int) -> MeteorStats:
    if m == 0:
        return MeteorStats(0, chunks, hyp_len, ref_len, 0.0, 0.0, 0.0, 0.0, 0.0)
    precision = m / hyp_len
    recall = m / ref_len
    fscore = 10.0 * precision * recall / (recall + 9.0 * precision)
    penalty = 0.5 * (chunks / m) ** 3
    return MeteorStats(
        m, chunks, hyp_len, ref_len, precision, recall, fscore, penalty,
        fscore * (1.0 - penalty),
    )


def score_pair(hyp: list[str], ref: list[str], lexicon: SynonymLexicon | None = None) -> MeteorStats:
    """Score one tokenized hypothesis against one tokenized reference."""
    alignment = align(hyp, ref, lexicon)
    return _stats(alignment.m, count_chunks(alignment), len(hyp), len(ref))


def score_multi_ref(hyp: list[str], refs: list[list[str]], lexicon: SynonymLexicon | None = None) -> MeteorStats:
    """Stats of the best-scoring reference (ties keep the first)."""
    if not refs:
        raise ValueError("at least one reference required")
    best = None
    for ref in refs:
        stats = score_pair(hyp, ref, lexicon)
        if best is None or stats.score > best.score:
            best = stats
    return best


def corpus_score(pairs, lexicon: SynonymLexicon | None = None) -> tuple[MeteorStats, float]:
    """Corpus aggregation over (hyp, refs) pairs.

    Returns pooled stats (counts summed over each sentence's
    best-reference alignment, then the score equations applied once) and
    the arithmetic mean of per-sentence scores.
    """
    per_sentence = [score_multi_ref(hyp, refs, lexicon) for hyp, refs in pairs]
    return pool_stats(per_sentence), sum(s.score for s in per_sentence) / len(per_sentence)


def pool_stats(per_sentence: list[MeteorStats]) -> MeteorStats:
    if not per_sentence:
        raise ValueError("empty corpus")
    return _stats(
        sum(s.m for s in per_sentence),
        sum(s.chunks for s in per_sentence),
        sum(s.hyp_len for s in per_sentence),
        sum(s.ref_len for s in per_sentence),
    )


def _stat_row(label: str, s: MeteorStats) -> str:
    return (
        f"{label}\t{s.m}\t{s.chunks}\t{s.precision:.6f}\t{s.recall:.6f}"
        f"\t{s.fscore:.6f}\t{s.penalty:.6f}\t{s.score:.6f}"
    )


def format_report(entries, pooled: MeteorStats, mean_score: float) -> str:
    """Tab-separated report: one row per pair, then POOLED and MEAN lines.

    Columns: id, m, chunks, P, R, F, penalty, score.
    """
    lines = [_stat_row(str(pair_id), stats) for pair_id, stats in entries]
    lines.append(_stat_row("POOLED", pooled))
    lines.append(f"MEAN\t{mean_score:.6f}")
    return "\n".join(lines) + "\n"
