"""Item modality features: loading, text hashing, and condition projection.

Feature files are CSV with rows ``item_id,f0,f1,...`` keyed by original item
id. Raw text files carry one ``item_id<TAB>free text`` line per item and are
folded into fixed-width vectors with a seeded feature-hashing encoder.
"""

from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass

import numpy as np

from .data import Dataset
from .errors import ConfigError, DataFormatError
from .numerics import affine

ENCODER_KINDS = ("precomputed", "hashed_tokens")
NORMALIZATIONS = ("none", "l2")


@dataclass
class EncoderChoice:
    """How item modalities become condition vectors."""

    kind: str = "precomputed"
    dim: int = 64
    normalization: str = "none"

    def validate(self) -> None:
        if self.kind not in ENCODER_KINDS:
            raise ConfigError(f"unknown encoder kind {self.kind!r}")
        if self.normalization not in NORMALIZATIONS:
            raise ConfigError(f"unknown normalization {self.normalization!r}")
        if self.dim < 1:
            raise ConfigError(f"encoder dim must be positive, got {self.dim}")


@dataclass
class FeatureTable:
    """Dense item-feature matrix indexed by dense item id."""

    dim: int
    rows: np.ndarray  # (n_items, dim) float64

    def vector(self, item: int) -> np.ndarray:
        if not (0 <= item < self.rows.shape[0]):
            raise ConfigError(f"unknown item {item} in feature table")
        return self.rows[item]


def l2_normalize_rows(x: np.ndarray) -> np.ndarray:
    """Scale each row to unit norm; zero rows stay zero."""
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    safe = np.where(norms > 0, norms, 1.0)
    return x / safe


def load_features(
    path: str, dataset: Dataset, normalization: str = "none"
) -> FeatureTable:
    """Load a feature CSV covering every dataset item.

    Items missing from the file raise an error listing their original ids.
    """
    if normalization not in NORMALIZATIONS:
        raise ConfigError(f"unknown normalization {normalization!r}")
    item_map = {original: dense for dense, original in enumerate(dataset.item_ids)}
    vectors: dict[int, np.ndarray] = {}
    dim = None
    with open(path, newline="") as f:
        for lineno, row in enumerate(csv.reader(f), start=1):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if lineno == 1 and row[0].strip().lower() in ("item_id", "item"):
                continue
            raw_id = row[0].strip()
            if raw_id not in item_map:
                continue  # extra items are harmless
            try:
                vec = np.array([float(v) for v in row[1:]], dtype=np.float64)
            except ValueError as exc:
                raise DataFormatError(f"{path}:{lineno}: bad feature value") from exc
            if vec.size == 0:
                raise DataFormatError(f"{path}:{lineno}: row has no feature values")
            if dim is None:
                dim = vec.size
            elif vec.size != dim:
                raise DataFormatError(
                    f"{path}:{lineno}: expected {dim} features, got {vec.size}"
                )
            vectors[item_map[raw_id]] = vec
    missing = [
        dataset.item_ids[i] for i in range(dataset.n_items) if i not in vectors
    ]
    if missing:
        shown = ", ".join(missing[:20])
        more = "" if len(missing) <= 20 else f" (+{len(missing) - 20} more)"
        raise DataFormatError(f"{path}: missing features for items: {shown}{more}")
    rows = np.stack([vectors[i] for i in range(dataset.n_items)])
    if normalization == "l2":
        rows = l2_normalize_rows(rows)
    return FeatureTable(dim=int(rows.shape[1]), rows=rows)


def hashed_token_encode(text: str, dim: int, seed: int) -> np.ndarray:
    """Fold whitespace tokens into a signed-bucket vector of width ``dim``.

    Tokens are lowercased; each one is hashed to a bucket in [0, dim) and a
    sign in {-1, +1}. The signed counts are l2-normalized when nonzero, so the
    output norm is 0 (empty text) or 1.
    """
    if dim < 1:
        raise ConfigError(f"hash dim must be positive, got {dim}")
    vec = np.zeros(dim, dtype=np.float64)
    key = int(seed).to_bytes(8, "little", signed=False)
    for token in text.lower().split():
        digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8, key=key)
        h = int.from_bytes(digest.digest(), "little")
        bucket = h % dim
        sign = 1.0 if (h >> 63) & 1 else -1.0
        vec[bucket] += sign
    norm = np.linalg.norm(vec)
    if norm > 0:
        vec /= norm
    return vec


def encode_texts(path: str, dataset: Dataset, dim: int, seed: int) -> FeatureTable:
    """Encode a ``item_id<TAB>text`` file into a hashed feature table."""
    item_map = {original: dense for dense, original in enumerate(dataset.item_ids)}
    rows = np.zeros((dataset.n_items, dim), dtype=np.float64)
    seen: set[int] = set()
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            if "\t" not in line:
                raise DataFormatError(f"{path}:{lineno}: expected item_id<TAB>text")
            raw_id, text = line.split("\t", 1)
            raw_id = raw_id.strip()
            if raw_id not in item_map:
                continue
            dense = item_map[raw_id]
            rows[dense] = hashed_token_encode(text, dim, seed)
            seen.add(dense)
    missing = [dataset.item_ids[i] for i in range(dataset.n_items) if i not in seen]
    if missing:
        shown = ", ".join(missing[:20])
        more = "" if len(missing) <= 20 else f" (+{len(missing) - 20} more)"
        raise DataFormatError(f"{path}: missing text for items: {shown}{more}")
    return FeatureTable(dim=dim, rows=rows)


def project_condition(m: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Affine projection of raw modality vectors into the model width."""
    return affine(m, w, b)
