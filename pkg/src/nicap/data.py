"""Dataset manifest and feature-file handling.

The manifest is JSON Lines: one object per line with keys ``id``,
``captions`` (non-empty array of strings), ``label`` (``anomaly`` or
``normal``), one of ``feature`` (path, resolved against the manifest
directory) or ``feature_inline`` (array of reals), and an optional
``split`` (``train``/``test``). Feature files are binary: magic ``NICF``,
u32 version=1, u32 dim, then dim little-endian float32 values (widened to
float64 on load).
"""

from __future__ import annotations

import json
import math
import os
import re
import struct
from dataclasses import dataclass, field

import numpy as np

from .tensor import Rng

FEATURE_MAGIC = b"NICF"
FEATURE_VERSION = 1
LABELS = ("anomaly", "normal")

HARD = "hard"
ADVISORY = "advisory"


class ManifestError(ValueError):
    """Malformed manifest content."""


class FeatureFormatError(ValueError):
    """Malformed or mismatched feature file."""


@dataclass(eq=False)
class DatasetRecord:
    id: str
    captions: list[str]
    label: str
    feature_path: str | None = None
    feature_inline: np.ndarray | None = None
    split: str | None = None

    def __post_init__(self):
        if self.feature_inline is not None:
            self.feature_inline = np.asarray(self.feature_inline, dtype=np.float64)


def load_manifest(path) -> list[DatasetRecord]:
    """Parse and validate a JSON-Lines manifest.

    Raises ManifestError naming the offending line for malformed JSON,
    duplicate ids, unknown labels, or empty caption lists.
    """
    records = []
    seen = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"{path}:{lineno}: invalid JSON ({exc})") from exc
            try:
                record = _record_from_object(obj)
            except ManifestError as exc:
                raise ManifestError(f"{path}:{lineno}: {exc}") from None
            if record.id in seen:
                raise ManifestError(f"{path}:{lineno}: duplicate id {record.id!r}")
            seen.add(record.id)
            records.append(record)
    return records


def _record_from_object(obj) -> DatasetRecord:
    if not isinstance(obj, dict):
        raise ManifestError("record is not an object")
    rec_id = obj.get("id")
    if not isinstance(rec_id, str) or not rec_id:
        raise ManifestError("missing or empty id")
    captions = obj.get("captions")
    if not isinstance(captions, list) or not captions or not all(
        isinstance(c, str) for c in captions
    ):
        raise ManifestError(f"record {rec_id!r}: captions must be a non-empty string array")
    label = obj.get("label")
    if label not in LABELS:
        raise ManifestError(f"record {rec_id!r}: unknown label {label!r}")
    split = obj.get("split")
    if split is not None and split not in ("train", "test"):
        raise ManifestError(f"record {rec_id!r}: unknown split {split!r}")
    feature_path = obj.get("feature")
    feature_inline = obj.get("feature_inline")
    if feature_inline is not None and not isinstance(feature_inline, list):
        raise ManifestError(f"record {rec_id!r}: feature_inline must be an array")
    return DatasetRecord(
        id=rec_id,
        captions=list(captions),
        label=label,
        feature_path=feature_path,
        feature_inline=feature_inline,
        split=split,
    )


def write_manifest(records: list[DatasetRecord], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            obj = {"id": rec.id, "captions": rec.captions, "label": rec.label}
            if rec.feature_path is not None:
                obj["feature"] = rec.feature_path
            if rec.feature_inline is not None:
                obj["feature_inline"] = rec.feature_inline.tolist()
            if rec.split is not None:
                obj["split"] = rec.split
            fh.write(json.dumps(obj) + "\n")


def write_feature(path, values) -> None:
    """Write a feature vector in the binary feature format (float32)."""
    arr = np.ascontiguousarray(values, dtype="<f4")
    if arr.ndim != 1:
        raise FeatureFormatError("feature must be a 1-d vector")
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<II", FEATURE_VERSION, arr.size))
        fh.write(arr.tobytes())


def load_feature(path, expected_dim: int | None = None) -> np.ndarray:
    """Load a feature vector, widened to float64.

    Raises FeatureFormatError on bad magic, unknown version, truncation,
    or (when ``expected_dim`` is given) dimension mismatch.
    """
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != FEATURE_MAGIC:
        raise FeatureFormatError(f"{path}: bad magic {blob[:4]!r}")
    if len(blob) < 12:
        raise FeatureFormatError(f"{path}: truncated header")
    version, dim = struct.unpack("<II", blob[4:12])
    if version != FEATURE_VERSION:
        raise FeatureFormatError(f"{path}: unsupported format version {version}")
    if len(blob) != 12 + 4 * dim:
        raise FeatureFormatError(
            f"{path}: expected {12 + 4 * dim} bytes for dim {dim}, found {len(blob)}"
        )
    if expected_dim is not None and dim != expected_dim:
        raise FeatureFormatError(f"{path}: feature dim {dim} != expected {expected_dim}")
    return np.frombuffer(blob[12:], dtype="<f4").astype(np.float64)


def resolve_feature(record: DatasetRecord, base_dir, expected_dim: int | None = None) -> np.ndarray:
    """Feature vector of a record: inline values or its file."""
    if record.feature_inline is not None:
        values = record.feature_inline
        if expected_dim is not None and values.size != expected_dim:
            raise FeatureFormatError(
                f"record {record.id!r}: inline feature dim {values.size} != expected {expected_dim}"
            )
        return values
    if record.feature_path is None:
        raise FeatureFormatError(f"record {record.id!r}: no feature available")
    path = record.feature_path
    if not os.path.isabs(path) and base_dir is not None:
        path = os.path.join(base_dir, path)
    try:
        return load_feature(path, expected_dim)
    except FileNotFoundError as exc:
        raise FeatureFormatError(f"record {record.id!r}: missing feature file {path}") from exc


def split_dataset(records, train_fraction: float, seed: int):
    """Deterministic train/test partition.

    Records with an explicit ``split`` field keep it; the rest are
    shuffled by seed and the first ceil(fraction * n) go to train.
    """
    if not records:
        raise ValueError("empty dataset")
    if not 0.0 < train_fraction < 1.0:
        raise ValueError("train_fraction must be in (0, 1)")
    train = [r for r in records if r.split == "train"]
    test = [r for r in records if r.split == "test"]
    rest = [r for r in records if r.split is None]
    order = Rng(seed).permutation(len(rest))
    n_train = math.ceil(train_fraction * len(rest))
    train.extend(rest[i] for i in order[:n_train])
    test.extend(rest[i] for i in order[n_train:])
    return train, test


@dataclass(frozen=True)
class Violation:
    code: str
    severity: str
    message: str


_TERMINATOR = re.compile(r"[.!?](?=\s|$)")


def lint_caption(raw: str) -> list[Violation]:
    """Check one raw caption against the captioning instructions.

    Hard violations: digits anywhere; more than one sentence terminator.
    Advisory: word count outside 7-18; an uppercase first letter.
    """
    violations = []
    if any(ch.isdigit() for ch in raw):
        violations.append(
            Violation("CONTAINS_DIGIT", HARD, "digits are not allowed; spell numbers out")
        )
    if len(_TERMINATOR.findall(raw)) > 1:
        violations.append(
            Violation("MULTIPLE_SENTENCES", HARD, "caption must be a single sentence")
        )
    words = raw.split()
    if not 7 <= len(words) <= 18:
        violations.append(
            Violation("LENGTH_ADVISORY", ADVISORY, f"{len(words)} words; 7-18 advised")
        )
    if raw[:1].isalpha() and raw[:1].isupper():
        violations.append(
            Violation("NOT_LOWERCASE_START", ADVISORY, "captions conventionally start lowercase")
        )
    return violations


# small caption grammar for synthetic fixtures
_SUBJECTS = ("man", "woman", "officer", "worker", "driver", "nurse", "child", "dog")
_VERBS = ("running", "shouting", "burning", "falling", "fighting", "bleeding", "smoking", "waving")
_PLACES = ("street", "kitchen", "station", "yard", "market", "bridge", "garage", "hall")


def generate_fixture(out_dir, n_records: int, vocab_words: int = 24, seed: int = 0,
                     feature_dim: int = 2048) -> str:
    """Write a synthetic manifest plus feature files; returns the manifest path.

    Features are constructed so that mean(feature) > 0 exactly when the
    record is an anomaly, making labels perfectly recoverable. Captions are
    distinct draws from a small grammar, free of hard lint violations.
    Fully deterministic for a given seed.
    """
    if n_records < 1:
        raise ValueError("n_records must be >= 1")
    pool = max(2, min(8, vocab_words // 3))
    combos = [
        (s, v, p)
        for s in _SUBJECTS[:pool]
        for v in _VERBS[:pool]
        for p in _PLACES[:pool]
    ]
    rng = Rng(seed)
    order = rng.permutation(len(combos))
    feature_dir = os.path.join(out_dir, "features")
    os.makedirs(feature_dir, exist_ok=True)
    records = []
    for k in range(n_records):
        subject, verb, place = combos[int(order[k % len(combos)])]
        rec_id = f"rec{k:04d}"
        label = "anomaly" if rng.random() >= 0.5 else "normal"
        values = rng.normal(shape=(feature_dim,))
        values -= values.mean()
        values += 0.25 if label == "anomaly" else -0.25
        rel = os.path.join("features", f"{rec_id}.nicf")
        write_feature(os.path.join(out_dir, rel), values)
        records.append(
            DatasetRecord(
                id=rec_id,
                captions=[f"a {subject} is {verb} near the {place}"],
                label=label,
                feature_path=rel,
            )
        )
    manifest_path = os.path.join(out_dir, "manifest.jsonl")
    write_manifest(records, manifest_path)
    return manifest_path
