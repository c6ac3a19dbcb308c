"""
Dataset manifests, the CAPF feature-grid format, splitting, and a synthetic
captioning dataset.

CAPF layout (little-endian)::

    b"CAPF" | u32 version=1 | u32 S | u32 feature_dim | S*feature_dim f32, row-major
"""

from __future__ import annotations

import json
import struct
import unicodedata
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, FormatError, ManifestError
from .tensor import rng_for

CAPF_MAGIC = b"CAPF"
CAPF_VERSION = 1
_HEADER = struct.Struct("<4sIII")


@dataclass
class ManifestRecord:
    image_id: str
    feature_path: str
    captions: list

    def to_json(self) -> str:
        return json.dumps({"image_id": self.image_id, "feature_path": self.feature_path,
                           "captions": list(self.captions)}, ensure_ascii=False)


@dataclass
class Manifest:
    records: list
    base_dir: Path = field(default_factory=Path)

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def feature_file(self, record: ManifestRecord) -> Path:
        p = Path(record.feature_path)
        return p if p.is_absolute() else self.base_dir / p

    def image_ids(self) -> list:
        return [r.image_id for r in self.records]


def _validate_record(obj, where: str) -> ManifestRecord:
    if not isinstance(obj, dict):
        raise ManifestError(f"{where}: record must be a JSON object")
    for key in ("image_id", "feature_path", "captions"):
        if key not in obj:
            raise ManifestError(f"{where}: missing field {key!r}")
    if not isinstance(obj["image_id"], str) or not isinstance(obj["feature_path"], str):
        raise ManifestError(f"{where}: image_id and feature_path must be strings")
    caps = obj["captions"]
    if not isinstance(caps, list) or not all(isinstance(c, str) for c in caps):
        raise ManifestError(f"{where}: captions must be a list of strings")
    if not caps:
        raise ManifestError(f"{where}: image {obj['image_id']!r} has no captions")
    return ManifestRecord(obj["image_id"], obj["feature_path"], list(caps))


def check_unique(records) -> None:
    seen = set()
    for r in records:
        if r.image_id in seen:
            raise ManifestError(f"duplicate image_id {r.image_id!r}")
        seen.add(r.image_id)


def load_manifest(path) -> Manifest:
    """Read a JSON-lines manifest; blank lines are skipped.  Feature files are not
    touched until they are read."""
    path = Path(path)
    records, seen = [], set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from None
            rec = _validate_record(obj, f"{path}:{lineno}")
            if rec.image_id in seen:
                raise ManifestError(f"{path}:{lineno}: duplicate image_id {rec.image_id!r}")
            seen.add(rec.image_id)
            records.append(rec)
    return Manifest(records, path.parent)


def write_manifest(manifest: Manifest, path) -> None:
    check_unique(manifest.records)
    Path(path).write_text("".join(r.to_json() + "\n" for r in manifest.records), encoding="utf-8")


def write_feature_file(path, features) -> None:
    arr = np.asarray(features)
    if arr.ndim != 2:
        raise FormatError(f"feature grid must be 2-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise DataError("feature grid contains NaN or Inf")
    payload = np.ascontiguousarray(arr, dtype="<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(CAPF_MAGIC, CAPF_VERSION, arr.shape[0], arr.shape[1]))
        fh.write(payload)


def read_feature_file(path) -> np.ndarray:
    """Return the ``[S, feature_dim]`` grid widened to float64."""
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise FormatError(f"{path}: file shorter than the CAPF header")
    magic, version, S, dim = _HEADER.unpack_from(raw)
    if magic != CAPF_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != CAPF_VERSION:
        raise FormatError(f"{path}: unsupported CAPF version {version}")
    expected = 4 * S * dim
    if len(raw) - _HEADER.size != expected:
        raise FormatError(f"{path}: payload is {len(raw) - _HEADER.size} bytes, expected {expected}")
    if S == 0 or dim == 0:
        raise FormatError(f"{path}: empty feature grid ({S}x{dim})")
    grid = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size).reshape(S, dim)
    if not np.all(np.isfinite(grid)):
        raise DataError(f"{path}: payload contains NaN or Inf")
    return grid.astype(np.float64)


def split_dataset(manifest: Manifest, train_fraction: float = 0.8, seed: int = 0):
    """Image-level seeded split; train gets ``round(N * train_fraction)`` images."""
    if not 0.0 < train_fraction < 1.0:
        raise ConfigError(f"train_fraction must be in (0, 1), got {train_fraction}")
    records = sorted(manifest.records, key=lambda r: r.image_id)
    order = rng_for(seed, 0x5B17).permutation(len(records))
    n_train = int(round(len(records) * train_fraction))
    if n_train == 0 or n_train == len(records):
        raise ConfigError(f"split of {len(records)} images at {train_fraction} leaves one side empty")
    train = [records[i] for i in order[:n_train]]
    val = [records[i] for i in order[n_train:]]
    return Manifest(train, manifest.base_dir), Manifest(val, manifest.base_dir)


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------

_WORDS = (
    "ছেলে মেয়ে কুকুর বিড়াল মাঠে খেলছে দাঁড়িয়ে আছে একটি লাল নীল গাড়ি "
    "রাস্তায় নদী নৌকা গাছ পাখি বসে মানুষ হাঁটছে বাজারে শিশু সবুজ আকাশ"
).split()

MAX_SYNTH_WORDS = 7


def synth_words(n: int) -> list:
    words = [unicodedata.normalize("NFC", w) for w in _WORDS[:n]]
    words += [f"শব্দ{i}" for i in range(len(words), n)]
    return words


def synth_dataset(out_dir, n_images: int = 16, S: int = 4, feature_dim: int = 32,
                  vocab_size_tokens: int = 12, seed: int = 0) -> Manifest:
    """Write ``n_images`` feature grids plus ``manifest.jsonl`` under ``out_dir``.

    Each image gets a distinct caption of 3..7 words followed by a danda.  Row
    ``s`` of its grid carries a one-hot of the caption's ``s``-th word plus a
    small per-image code, so the caption is a deterministic function of the
    features.  Both captions of an image are identical.
    """
    if min(n_images, S, feature_dim, vocab_size_tokens) < 1:
        raise ConfigError("synthetic dataset sizes must all be positive")
    rng = rng_for(seed, 0xDA7A)
    words = synth_words(vocab_size_tokens)
    out = Path(out_dir)
    (out / "features").mkdir(parents=True, exist_ok=True)

    n_possible = sum(vocab_size_tokens ** L for L in range(3, MAX_SYNTH_WORDS + 1))
    if n_images > n_possible:
        raise ConfigError(f"cannot draw {n_images} distinct captions from {vocab_size_tokens} words")
    seen, records = set(), []
    for i in range(n_images):
        while True:
            L = int(rng.integers(3, MAX_SYNTH_WORDS + 1))
            toks = tuple(int(t) for t in rng.integers(0, vocab_size_tokens, size=L))
            if toks not in seen:
                seen.add(toks)
                break
        grid = 0.1 * rng.standard_normal((S, feature_dim))
        for s in range(min(S, L)):
            grid[s, toks[s] % feature_dim] += 1.0
        rel = f"features/img_{i:04d}.capf"
        write_feature_file(out / rel, grid)
        caption = " ".join(words[t] for t in toks) + "।"
        records.append(ManifestRecord(f"img_{i:04d}", rel, [caption, caption]))
    manifest = Manifest(records, out)
    write_manifest(manifest, out / "manifest.jsonl")
    return manifest
