"""Caption text pipeline: normalization, tokenization, vocabulary, encoding.

Everything here is a pure function over immutable inputs; a built
:class:`Vocabulary` never changes after construction and can be shared
freely across threads.
"""

from __future__ import annotations

import re
from collections import Counter

PAD = 0
BOS = 1
EOS = 2
UNK = 3
SPECIAL_TOKENS = ("<pad>", "<bos>", "<eos>", "<unk>")

_SEPARATOR_RUN = re.compile(r"[^a-z0-9]+")
_VALID_TOKEN = re.compile(r"^[a-z0-9]+$")


def normalize_caption(raw: str) -> str:
    """Lowercase ``raw`` and reduce it to [a-z0-9] words split by single spaces.

    Every run of non-alphanumeric characters acts as a separator, so
    punctuation splits words apart instead of fusing them
    ("man's" -> "man s", never "mans").
    """
    return _SEPARATOR_RUN.sub(" ", raw.lower()).strip()


def tokenize(normalized: str) -> list[str]:
    """Split an already-normalized caption into word tokens."""
    return normalized.split()


class Vocabulary:
    """Bidirectional token<->index map with the four reserved specials.

    Indices 0-3 are always ``<pad>``, ``<bos>``, ``<eos>``, ``<unk>`` in that
    order; regular tokens start at index 4.
    """

    def __init__(self, tokens: list[str], min_freq: int = 1):
        for tok in tokens:
            if not _VALID_TOKEN.match(tok):
                raise ValueError(f"invalid vocabulary token {tok!r}")
        self.index_to_token: tuple[str, ...] = SPECIAL_TOKENS + tuple(tokens)
        self.token_to_index: dict[str, int] = {
            tok: i for i, tok in enumerate(self.index_to_token)
        }
        if len(self.token_to_index) != len(self.index_to_token):
            raise ValueError("duplicate token in vocabulary")
        self.min_freq = min_freq

    def __len__(self) -> int:
        return len(self.index_to_token)

    def __contains__(self, token: str) -> bool:
        return token in self.token_to_index

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, Vocabulary)
            and self.index_to_token == other.index_to_token
        )

    def index(self, token: str) -> int:
        """Index of ``token``, falling back to the unknown-word index."""
        return self.token_to_index.get(token, UNK)

    def token(self, index: int) -> str:
        if not 0 <= index < len(self.index_to_token):
            raise IndexError(f"index {index} outside vocabulary of size {len(self)}")
        return self.index_to_token[index]

    def save(self, path) -> None:
        """Write one token per line; the line number is the index."""
        with open(path, "w", encoding="utf-8") as fh:
            for tok in self.index_to_token:
                fh.write(tok + "\n")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        with open(path, encoding="utf-8") as fh:
            lines = fh.read().splitlines()
        if tuple(lines[:4]) != SPECIAL_TOKENS:
            raise ValueError(
                f"{path}: first four lines must be {' '.join(SPECIAL_TOKENS)}"
            )
        return cls(list(lines[4:]))


def build_vocabulary(corpus: list[list[str]], min_freq: int = 1) -> Vocabulary:
    """Build a vocabulary from tokenized captions.

    Keeps exactly the tokens occurring at least ``min_freq`` times, ordered
    by descending frequency with ties broken lexicographically so identical
    corpora always produce identical index assignments.
    """
    if min_freq < 1:
        raise ValueError("min_freq must be >= 1")
    counts = Counter()
    for tokens in corpus:
        counts.update(tokens)
    kept = [tok for tok, n in counts.items() if n >= min_freq]
    kept.sort(key=lambda tok: (-counts[tok], tok))
    return Vocabulary(kept, min_freq)


def filter_by_length(token_lists: list[list[str]], max_len: int) -> list[list[str]]:
    """Retain the token lists of at most ``max_len`` words (strictly longer
    ones are discarded; the begin/end markers added later do not count)."""
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    return [tokens for tokens in token_lists if len(tokens) <= max_len]


def encode(tokens: list[str], vocab: Vocabulary, max_len: int) -> list[int]:
    """Map tokens to indices, bracketed by BOS/EOS and right-padded.

    The result always has length ``max_len + 2``. Out-of-vocabulary tokens
    map to UNK. Raises ValueError when there are more than ``max_len``
    tokens.
    """
    if len(tokens) > max_len:
        raise ValueError(f"caption of {len(tokens)} tokens exceeds max_len={max_len}")
    indices = [BOS] + [vocab.index(tok) for tok in tokens] + [EOS]
    indices.extend([PAD] * (max_len + 2 - len(indices)))
    return indices


def decode(indices: list[int], vocab: Vocabulary) -> list[str]:
    """Inverse of :func:`encode` up to UNK lossiness.

    Stops at the first EOS, skips BOS and PAD, and raises on indices outside
    the vocabulary.
    """
    tokens = []
    for idx in indices:
        if not 0 <= idx < len(vocab):
            raise IndexError(f"index {idx} outside vocabulary of size {len(vocab)}")
        if idx == EOS:
            break
        if idx in (BOS, PAD):
            continue
        tokens.append(vocab.index_to_token[idx])
    return tokens
