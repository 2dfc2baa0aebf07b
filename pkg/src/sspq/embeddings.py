"""Embedding containers, normalization, subvector splitting, and similarity kernels.

All arithmetic is done in float64; the on-disk ``EMB1`` format stores float32.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    FormatError,
    IndivisibleDimensionError,
    LengthMismatchError,
)

# Norms below this are treated as degenerate (zero) vectors.
NORM_EPS = 1e-12

# Guard added to norm products in cosine similarity; makes the similarity of a
# zero vector 0 instead of NaN.
COSINE_EPS = 1e-12

EMB_MAGIC = b"EMB1"
_EMB_DTYPE_F32 = 0


@dataclass(frozen=True)
class EmbeddingMatrix:
    """N x d matrix of embedding vectors, one row per item.

    Immutable after construction. ``normalized`` asserts that every row has
    unit L2 norm (within 1e-6); constructing with the flag set and
    non-unit rows raises.
    """

    data: np.ndarray
    normalized: bool = False

    def __post_init__(self) -> None:
        data = np.ascontiguousarray(np.asarray(self.data, dtype=np.float64))
        if data.ndim != 2:
            raise ValueError(f"embedding data must be 2-D, got shape {data.shape}")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)
        if self.normalized and data.shape[0] > 0:
            norms = np.linalg.norm(data, axis=1)
            worst = float(np.max(np.abs(norms - 1.0)))
            if worst > 1e-6:
                raise ValueError(
                    f"normalized flag set but a row norm deviates from 1.0 by {worst:.3g}"
                )

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[1]

    def row(self, i: int) -> np.ndarray:
        return self.data[i]


@dataclass(frozen=True)
class SubvectorView:
    """View of one contiguous subspace slice of an embedding matrix.

    Subspace ``j`` (0-based) of ``m`` covers columns [j*d*, (j+1)*d*) where
    d* = dim / m.
    """

    parent: EmbeddingMatrix
    subspace_index: int
    num_subspaces: int

    def __post_init__(self) -> None:
        if self.parent.dim % self.num_subspaces != 0:
            raise IndivisibleDimensionError(
                f"dim {self.parent.dim} is not a multiple of {self.num_subspaces}"
            )
        if not 0 <= self.subspace_index < self.num_subspaces:
            raise ValueError(f"subspace index {self.subspace_index} out of range")

    @property
    def sub_dim(self) -> int:
        return self.parent.dim // self.num_subspaces

    @property
    def values(self) -> np.ndarray:
        j, ds = self.subspace_index, self.sub_dim
        return self.parent.data[:, j * ds : (j + 1) * ds]


def subvector_views(emb: EmbeddingMatrix, m: int) -> list[SubvectorView]:
    """Split an embedding matrix into m contiguous column-block views."""
    return [SubvectorView(emb, j, m) for j in range(m)]


def l2_normalize(v: np.ndarray) -> tuple[np.ndarray, bool]:
    """Scale a vector to unit L2 norm, preserving direction.

    Returns:
        (unit_vector, degenerate). Vectors with norm below 1e-12 are returned
        unchanged with degenerate=True.
    """
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1 or v.size < 1:
        raise ValueError("l2_normalize expects a non-empty 1-D vector")
    n = float(np.linalg.norm(v))
    if n < NORM_EPS:
        return v.copy(), True
    return v / n, False


def normalize_rows(x: np.ndarray) -> np.ndarray:
    """Row-wise L2 normalization; rows with norm below 1e-12 stay unchanged."""
    x = np.asarray(x, dtype=np.float64)
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    safe = np.where(norms < NORM_EPS, 1.0, norms)
    return x / safe


def split_subvectors(v: np.ndarray, m: int) -> list[np.ndarray]:
    """Split a length-d vector into m contiguous subvectors of length d/m.

    Raises:
        IndivisibleDimensionError: if d is not an exact multiple of m.
    """
    v = np.asarray(v, dtype=np.float64)
    d = v.shape[0]
    if m < 1 or d % m != 0:
        raise IndivisibleDimensionError(f"dim {d} is not a multiple of {m}")
    return list(np.split(v, m))


def cosine_sim(a: np.ndarray, b: np.ndarray) -> float:
    """Cosine similarity a.b / (|a||b| + 1e-12); 0 for zero-norm inputs."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise LengthMismatchError(f"lengths differ: {a.shape} vs {b.shape}")
    denom = float(np.linalg.norm(a)) * float(np.linalg.norm(b)) + COSINE_EPS
    return float(np.dot(a, b) / denom)


def neg_euclid_sim(a: np.ndarray, b: np.ndarray) -> float:
    """Negative Euclidean distance -|a - b|; 0 iff a == b."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise LengthMismatchError(f"lengths differ: {a.shape} vs {b.shape}")
    return -float(np.linalg.norm(a - b))


def export_embeddings(emb: EmbeddingMatrix, path: str | Path) -> None:
    """Write an embedding matrix in the EMB1 binary format.

    Layout: magic ``EMB1``, u32 LE row count, u32 LE dim, u8 dtype tag
    (0 = float32), then rows*dim little-endian float32 values, row-major.
    """
    payload = emb.data.astype("<f4").tobytes()
    header = EMB_MAGIC + struct.pack("<IIB", emb.rows, emb.dim, _EMB_DTYPE_F32)
    Path(path).write_bytes(header + payload)


def import_embeddings(path: str | Path) -> EmbeddingMatrix:
    """Read an EMB1 file back into an EmbeddingMatrix.

    The normalized flag is set when every stored row has unit norm within
    1e-6 (float32 round-off of unit rows stays well inside that bound).

    Raises:
        FormatError: on bad magic, bad dtype tag, or truncated payload.
    """
    raw = Path(path).read_bytes()
    if len(raw) < 13:
        raise FormatError(f"{path}: file too short for EMB1 header")
    if raw[:4] != EMB_MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:4]!r}")
    rows, dim, dtype = struct.unpack("<IIB", raw[4:13])
    if dtype != _EMB_DTYPE_F32:
        raise FormatError(f"{path}: unsupported dtype tag {dtype}")
    expected = rows * dim * 4
    payload = raw[13:]
    if len(payload) != expected:
        raise FormatError(
            f"{path}: payload is {len(payload)} bytes, header promises {expected}"
        )
    data = np.frombuffer(payload, dtype="<f4").astype(np.float64).reshape(rows, dim)
    normalized = False
    if rows > 0 and dim > 0:
        norms = np.linalg.norm(data, axis=1)
        normalized = bool(np.max(np.abs(norms - 1.0)) <= 1e-6)
    return EmbeddingMatrix(data, normalized=normalized)


def write_labels(labels: np.ndarray, path: str | Path) -> None:
    """Write a label sidecar CSV with header ``id,label``; ids are row indices."""
    labels = np.asarray(labels)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "label"])
        for i, lab in enumerate(labels):
            writer.writerow([i, int(lab)])


def read_labels(path: str | Path, expected_rows: int | None = None) -> np.ndarray:
    """Read a label sidecar CSV; validates the header and 0-based id sequence."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["id", "label"]:
            raise FormatError(f"{path}: expected header 'id,label', got {header}")
        labels = []
        for i, row in enumerate(reader):
            if len(row) != 2 or int(row[0]) != i:
                raise FormatError(f"{path}: bad row {i}: {row}")
            labels.append(int(row[1]))
    out = np.asarray(labels, dtype=np.int64)
    if expected_rows is not None and out.shape[0] != expected_rows:
        raise FormatError(
            f"{path}: {out.shape[0]} labels for {expected_rows} embeddings"
        )
    return out
