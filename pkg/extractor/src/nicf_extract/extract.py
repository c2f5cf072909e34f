"""Single-image and batch extraction into NICF files.

The NICF format (shared contract with the training toolkit): magic
``NICF``, u32 version=1, u32 dim, then dim little-endian float32 values.
Writes are atomic (temp file + rename). Batch mode consumes a JSON-Lines
manifest whose records carry an ``image`` path and rewrites it with
``feature`` paths so the training toolkit can load it directly.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import dataclass

import numpy as np
from PIL import Image, UnidentifiedImageError

from .backbones import FEATURE_DIM

NICF_MAGIC = b"NICF"
NICF_VERSION = 1


class ExtractionError(RuntimeError):
    pass


def write_nicf(path, values: np.ndarray) -> None:
    """Atomically write one feature vector."""
    arr = np.ascontiguousarray(values, dtype="<f4")
    if arr.ndim != 1:
        raise ExtractionError("feature must be a 1-d vector")
    blob = NICF_MAGIC + struct.pack("<II", NICF_VERSION, arr.size) + arr.tobytes()
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def extract(image_path, backbone, out_path, expected_dim: int = FEATURE_DIM) -> np.ndarray:
    """Run one image through the backbone and write the NICF file.

    Aborts (never writes) when the backbone emits anything but
    ``expected_dim`` values.
    """
    try:
        with Image.open(image_path) as image:
            values = backbone(image)
    except (UnidentifiedImageError, OSError) as exc:
        raise ExtractionError(f"{image_path}: cannot decode image ({exc})") from exc
    values = np.asarray(values)
    if values.ndim != 1 or values.size != expected_dim:
        raise ExtractionError(
            f"{image_path}: backbone produced shape {values.shape}, expected ({expected_dim},)"
        )
    write_nicf(out_path, values)
    return values


@dataclass
class BatchResult:
    extracted: list[str]
    skipped: list[str]
    failures: dict[str, str]
    manifest_path: str


def read_manifest_lines(path) -> list[dict]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ExtractionError(f"{path}:{lineno}: invalid JSON ({exc})") from exc
            if not isinstance(obj, dict) or not obj.get("id"):
                raise ExtractionError(f"{path}:{lineno}: record needs an id")
            records.append(obj)
    return records


def extract_batch(manifest_path, out_dir, backbone, force: bool = False,
                  jobs: int = 1, expected_dim: int = FEATURE_DIM) -> BatchResult:
    """Extract every record's image; write features and an updated manifest.

    Existing feature files are kept unless ``force``. Per-record failures
    are collected (not fatal mid-run); the updated manifest lists only
    successful records. Output feature paths are relative to the updated
    manifest, which lands at out_dir/manifest.jsonl.
    """
    records = read_manifest_lines(manifest_path)
    base_dir = os.path.dirname(os.path.abspath(manifest_path))
    feature_dir = os.path.join(out_dir, "features")
    os.makedirs(feature_dir, exist_ok=True)

    def resolve(rec):
        image = rec.get("image")
        if not image:
            raise ExtractionError(f"record {rec['id']!r}: no image path")
        return image if os.path.isabs(image) else os.path.join(base_dir, image)

    def run_one(rec):
        out_path = os.path.join(feature_dir, f"{rec['id']}.nicf")
        if os.path.exists(out_path) and not force:
            return rec, "skipped"
        extract(resolve(rec), backbone, out_path, expected_dim)
        return rec, "extracted"

    results = []
    failures: dict[str, str] = {}
    if jobs > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=jobs) as pool:
            futures = {pool.submit(run_one, rec): rec for rec in records}
            for future, rec in futures.items():
                try:
                    results.append(future.result())
                except ExtractionError as exc:
                    failures[rec["id"]] = str(exc)
    else:
        for rec in records:
            try:
                results.append(run_one(rec))
            except ExtractionError as exc:
                failures[rec["id"]] = str(exc)

    results.sort(key=lambda pair: pair[0]["id"])
    updated_manifest = os.path.join(out_dir, "manifest.jsonl")
    with open(updated_manifest, "w", encoding="utf-8") as fh:
        for rec, _ in results:
            updated = dict(rec)
            updated["feature"] = os.path.join("features", f"{rec['id']}.nicf")
            fh.write(json.dumps(updated) + "\n")
    return BatchResult(
        extracted=[r["id"] for r, status in results if status == "extracted"],
        skipped=[r["id"] for r, status in results if status == "skipped"],
        failures=failures,
        manifest_path=updated_manifest,
    )
