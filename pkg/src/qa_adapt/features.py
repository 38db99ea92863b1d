"""Word-embedding tables, averaged text features and binary feature files."""

from __future__ import annotations

import enum
import string
import struct
from dataclasses import dataclass
from pathlib import Path
from types import MappingProxyType
from typing import Iterable, Mapping

import numpy as np

from .nn import FormatError

DEFAULT_TEXT_DIM = 300
DEFAULT_IMAGE_DIM = 2048

FEATURE_MAGIC = b"QAFV"
FEATURE_VERSION = 1
_HEADER = struct.Struct("<4sIIQ")

_PUNCT = str.maketrans({c: " " for c in string.punctuation})


class QuestionType(str, enum.Enum):
    WHAT = "What"
    WHERE = "Where"
    HOW = "How"
    WHEN = "When"
    WHY = "Why"
    WHO = "Who"
    OTHER = "Other"


_SIX_W = {t.value.lower(): t for t in QuestionType if t is not QuestionType.OTHER}


def tokenize(text: str) -> list[str]:
    """Lowercase, replace ASCII punctuation with spaces, split on whitespace."""
    return text.lower().translate(_PUNCT).split()


def question_type(question: str) -> QuestionType:
    tokens = tokenize(question)
    if not tokens:
        return QuestionType.OTHER
    return _SIX_W.get(tokens[0], QuestionType.OTHER)


@dataclass(frozen=True)
class EmbeddingTable:
    dim: int
    entries: Mapping[str, np.ndarray]

    def __post_init__(self):
        if self.dim <= 0:
            raise ValueError("embedding dim must be positive")
        frozen = {}
        for tok, vec in self.entries.items():
            vec = np.array(vec, dtype=np.float64)
            if vec.shape != (self.dim,):
                raise ValueError(f"vector for {tok!r} has shape {vec.shape}, expected ({self.dim},)")
            vec.setflags(write=False)
            frozen[tok.lower()] = vec
        object.__setattr__(self, "entries", MappingProxyType(frozen))

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, token: str) -> bool:
        return token.lower() in self.entries

    def __getitem__(self, token: str) -> np.ndarray:
        return self.entries[token.lower()]


def load_embedding_table(path: str | Path) -> EmbeddingTable:
    """Read the classic word-vector text format (optional ``count dim`` header)."""
    entries: dict[str, np.ndarray] = {}
    dim = None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts:
                continue
            if lineno == 1 and len(parts) == 2 and all(p.isdigit() for p in parts):
                dim = int(parts[1])
                continue
            token, values = parts[0], parts[1:]
            if dim is None:
                dim = len(values)
                if dim == 0:
                    raise FormatError(f"{path}:{lineno}: token without vector")
            if len(values) != dim:
                raise FormatError(f"{path}:{lineno}: expected {dim} values, found {len(values)}")
            try:
                vec = np.array([float(v) for v in values])
            except ValueError as exc:
                raise FormatError(f"{path}:{lineno}: {exc}") from None
            if not np.all(np.isfinite(vec)):
                raise FormatError(f"{path}:{lineno}: non-finite value")
            entries.setdefault(token.lower(), vec)
    if not entries:
        raise FormatError(f"{path}: no embedding entries")
    return EmbeddingTable(dim, entries)


def embed_text(table: EmbeddingTable, text: str) -> np.ndarray:
    """Mean of the in-vocabulary token vectors; zeros if none are known."""
    vecs = [table.entries[t] for t in tokenize(text) if t in table.entries]
    if not vecs:
        return np.zeros(table.dim)
    return np.mean(vecs, axis=0)


class ImageFeatureStore:
    """Precomputed image features keyed by unsigned 64-bit image id."""

    def __init__(self, dim: int = DEFAULT_IMAGE_DIM, records: Mapping[int, np.ndarray] | None = None):
        if dim <= 0:
            raise ValueError("feature dim must be positive")
        self.dim = dim
        self._index: dict[int, int] = {}
        rows = []
        for image_id, vec in (records or {}).items():
            vec = np.asarray(vec, dtype=np.float64)
            if vec.shape != (dim,):
                raise ValueError(f"image {image_id}: shape {vec.shape}, expected ({dim},)")
            if not np.all(np.isfinite(vec)):
                raise ValueError(f"image {image_id}: non-finite feature")
            self._index[int(image_id)] = len(rows)
            rows.append(vec)
        self._matrix = np.array(rows, dtype=np.float64).reshape(len(rows), dim)
        self._matrix.setflags(write=False)

    @classmethod
    def from_arrays(cls, ids: Iterable[int], matrix: np.ndarray) -> "ImageFeatureStore":
        ids = [int(i) for i in ids]
        matrix = np.asarray(matrix, dtype=np.float64)
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate image id")
        return cls(matrix.shape[1], dict(zip(ids, matrix)))

    def __len__(self) -> int:
        return len(self._index)

    def __contains__(self, image_id: int) -> bool:
        return int(image_id) in self._index

    def __getitem__(self, image_id: int) -> np.ndarray:
        return self._matrix[self._index[int(image_id)]]

    def ids(self) -> list[int]:
        return list(self._index)

    def gather(self, image_ids: Iterable[int]) -> np.ndarray:
        rows = [self._index[int(i)] for i in image_ids]
        return self._matrix[rows]


def write_feature_file(path: str | Path, dim: int, records: Iterable[tuple[int, np.ndarray]]) -> None:
    """Write ``QAFV`` v1: magic, u32 version, u32 dim, u64 count, then
    (u64 id, dim x f32) records, all little-endian."""
    records = list(records)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(FEATURE_MAGIC, FEATURE_VERSION, dim, len(records)))
        for key, vec in records:
            vec = np.asarray(vec)
            if vec.shape != (dim,):
                raise ValueError(f"record {key}: shape {vec.shape}, expected ({dim},)")
            fh.write(struct.pack("<Q", int(key)))
            fh.write(vec.astype("<f4").tobytes())


def read_feature_file(path: str | Path) -> tuple[int, list[int], np.ndarray]:
    """Return (dim, ids, float32 matrix) from a ``QAFV`` file."""
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, version, dim, count = _HEADER.unpack_from(data)
    if magic != FEATURE_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != FEATURE_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if dim == 0:
        raise FormatError(f"{path}: dim must be positive")
    rec = np.dtype([("id", "<u8"), ("vec", "<f4", (dim,))])
    expected = _HEADER.size + count * rec.itemsize
    if len(data) != expected:
        raise FormatError(f"{path}: expected {expected} bytes for {count} records, found {len(data)}")
    table = np.frombuffer(data, dtype=rec, count=count, offset=_HEADER.size)
    return dim, [int(i) for i in table["id"]], np.array(table["vec"], dtype=np.float32).reshape(count, dim)


def load_image_features(path: str | Path) -> ImageFeatureStore:
    dim, ids, matrix = read_feature_file(path)
    if len(set(ids)) != len(ids):
        raise FormatError(f"{path}: duplicate image id")
    if not np.all(np.isfinite(matrix)):
        raise FormatError(f"{path}: non-finite feature values")
    store = ImageFeatureStore(dim)
    store._index = {i: r for r, i in enumerate(ids)}
    store._matrix = matrix.astype(np.float64)
    store._matrix.setflags(write=False)
    return store


def save_image_features(path: str | Path, store: ImageFeatureStore) -> None:
    write_feature_file(path, store.dim, ((i, store[i]) for i in store.ids()))
