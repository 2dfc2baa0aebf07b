"""Product-quantizer training, encoding, and ADC-based quantized search.

A codebook is trained by running seeded k-means independently on each of M
contiguous subvector blocks; the Cartesian product of the M sub-codebooks
implicitly defines K^M anchor points that are never materialized.
"""

from __future__ import annotations

import math
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .embeddings import EmbeddingMatrix, normalize_rows
from .errors import (
    BadConfigError,
    EmptyGalleryError,
    EmptyInputError,
    FormatError,
    IndivisibleDimensionError,
    LengthMismatchError,
    NonPowerOfTwoKError,
)

PQC_MAGIC = b"PQC1"


def _as_points(points: EmbeddingMatrix | np.ndarray) -> np.ndarray:
    if isinstance(points, EmbeddingMatrix):
        return points.data
    x = np.asarray(points, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError(f"points must be 2-D, got shape {x.shape}")
    return x


@dataclass
class KMeansResult:
    """Outcome of one Lloyd run.

    ``assignments`` pair with the returned centroids (the last update step).
    ``objective_history`` records the post-update objective per iteration and
    is non-increasing.
    """

    centroids: np.ndarray
    assignments: np.ndarray
    objective: float
    iterations_run: int
    objective_history: list[float] = field(default_factory=list)


def _kmeans_pp_init(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """Greedy k-means++ seeding.

    Each step draws 2 + floor(log2(k)) candidate points with D^2-weighted
    sampling and keeps the candidate that minimizes the resulting potential.
    """
    n = x.shape[0]
    trials = 2 + int(math.log2(k)) if k > 1 else 1
    centroids = np.empty((k, x.shape[1]), dtype=np.float64)
    centroids[0] = x[int(rng.integers(n))]
    d2 = ((x - centroids[0]) ** 2).sum(axis=1)
    for i in range(1, k):
        total = float(d2.sum())
        if total <= 0.0:
            # Every point coincides with a chosen centroid; any pick works.
            centroids[i] = x[int(rng.integers(n))]
            continue
        cumulative = np.cumsum(d2)
        best_idx, best_d2, best_potential = -1, d2, math.inf
        for threshold in rng.random(trials) * total:
            idx = min(int(np.searchsorted(cumulative, threshold, side="right")), n - 1)
            cand_d2 = np.minimum(d2, ((x - x[idx]) ** 2).sum(axis=1))
            potential = float(cand_d2.sum())
            if potential < best_potential:
                best_idx, best_d2, best_potential = idx, cand_d2, potential
        centroids[i] = x[best_idx]
        d2 = best_d2
    return centroids


def kmeans_fit(
    points: EmbeddingMatrix | np.ndarray,
    k: int,
    seed: int,
    max_iters: int = 50,
    rel_tol: float = 1e-4,
) -> KMeansResult:
    """Lloyd's algorithm from a k-means++ start, deterministic given seed.

    Empty clusters are repaired by reassigning the point currently farthest
    from its centroid (ties to the lowest point index); with the objective
    measured after each centroid update this keeps the objective sequence
    non-increasing. Stops at ``max_iters`` or when the relative objective
    decrease falls below ``rel_tol``.

    Raises:
        EmptyInputError: if there are no points.
    """
    x = _as_points(points)
    n = x.shape[0]
    if n == 0:
        raise EmptyInputError("kmeans_fit requires at least one point")
    if k < 1:
        raise BadConfigError(f"k must be >= 1, got {k}")

    rng = np.random.default_rng(seed)
    centroids = _kmeans_pp_init(x, k, rng)
    assignments = np.zeros(n, dtype=np.int64)
    history: list[float] = []
    prev = math.inf
    iterations = 0
    x_sq = np.einsum("nd,nd->n", x, x)

    for _ in range(max_iters):
        iterations += 1
        # Expanded form for the argmin only; the repair bookkeeping and the
        # objective use exact per-point distances.
        c_sq = np.einsum("kd,kd->k", centroids, centroids)
        d2 = x_sq[:, None] + c_sq[None, :] - 2.0 * (x @ centroids.T)
        assignments = np.argmin(d2, axis=1)
        diff = x - centroids[assignments]
        point_d2 = np.einsum("nd,nd->n", diff, diff)

        if k <= n:
            counts = np.bincount(assignments, minlength=k)
            for empty in np.flatnonzero(counts == 0):
                j = int(np.argmax(point_d2))
                assignments[j] = empty
                point_d2[j] = 0.0  # do not pick the same point twice

        counts = np.bincount(assignments, minlength=k)
        sums = np.empty((k, x.shape[1]))
        for dim in range(x.shape[1]):
            sums[:, dim] = np.bincount(assignments, weights=x[:, dim], minlength=k)
        occupied = counts > 0
        centroids[occupied] = sums[occupied] / counts[occupied, None]

        diff = x - centroids[assignments]
        objective = float(np.einsum("nd,nd->", diff, diff))
        history.append(objective)

        if math.isfinite(prev) and (prev - objective) <= rel_tol * max(prev, 1e-300):
            break
        if objective == 0.0:
            break
        prev = objective

    return KMeansResult(
        centroids=centroids,
        assignments=assignments,
        objective=history[-1],
        iterations_run=iterations,
        objective_history=history,
    )


@dataclass(frozen=True)
class SubCodebook:
    """K centroids of dimension d* for one subspace (0-based index)."""

    subspace_index: int
    centroids: np.ndarray  # (K, d*) float32, read-only

    def __post_init__(self) -> None:
        cent = np.ascontiguousarray(np.asarray(self.centroids, dtype=np.float32))
        if cent.ndim != 2 or cent.shape[0] < 1:
            raise ValueError(f"centroids must be a non-empty 2-D matrix, got {cent.shape}")
        cent.setflags(write=False)
        object.__setattr__(self, "centroids", cent)

    @property
    def k(self) -> int:
        return self.centroids.shape[0]

    @property
    def sub_dim(self) -> int:
        return self.centroids.shape[1]


@dataclass(frozen=True)
class ProductCodebook:
    """M sub-codebooks of K centroids each; anchors are their Cartesian product."""

    m: int
    k: int
    dim: int
    sub_codebooks: tuple[SubCodebook, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "sub_codebooks", tuple(self.sub_codebooks))
        if len(self.sub_codebooks) != self.m:
            raise ValueError(f"expected {self.m} sub-codebooks, got {len(self.sub_codebooks)}")
        if self.dim % self.m != 0:
            raise IndivisibleDimensionError(f"dim {self.dim} is not a multiple of {self.m}")
        ds = self.dim // self.m
        for j, sub in enumerate(self.sub_codebooks):
            if sub.subspace_index != j:
                raise ValueError("sub-codebooks must be sorted by subspace index")
            if sub.k != self.k or sub.sub_dim != ds:
                raise ValueError(
                    f"sub-codebook {j} has shape {sub.centroids.shape}, "
                    f"expected ({self.k}, {ds})"
                )
        stacked = np.stack([sub.centroids.astype(np.float64) for sub in self.sub_codebooks])
        stacked.setflags(write=False)
        norms = np.linalg.norm(stacked, axis=2)
        norms.setflags(write=False)
        object.__setattr__(self, "_stacked", stacked)
        object.__setattr__(self, "_norms", norms)

    @property
    def sub_dim(self) -> int:
        return self.dim // self.m

    @property
    def anchor_count(self) -> int:
        """Number of implicit anchor points, K^M (exact integer)."""
        return self.k**self.m

    def stacked(self) -> np.ndarray:
        """All centroids as one (M, K, d*) float64 array."""
        return self._stacked  # type: ignore[attr-defined]

    def centroid_norms(self) -> np.ndarray:
        """L2 norms of all centroids, shape (M, K)."""
        return self._norms  # type: ignore[attr-defined]


@dataclass(frozen=True)
class PQCode:
    """Per-subspace centroid indices for one encoded vector."""

    codes: tuple[int, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "codes", tuple(int(c) for c in self.codes))


def train_product_codebook(
    features: EmbeddingMatrix | np.ndarray,
    m: int,
    k: int,
    seed: int,
    normalize: bool = False,
    max_iters: int = 50,
    rel_tol: float = 1e-4,
) -> ProductCodebook:
    """Train one sub-codebook per subspace with seeded k-means.

    Subspace j (0-based) uses seed + j, so m=1 reproduces a flat
    ``kmeans_fit`` run at the same seed. Features are clustered as-is unless
    ``normalize`` is set, which L2-normalizes rows first.

    Args:
        features: n x d training matrix.
        m: number of subspaces; d must be a multiple of m.
        k: centroids per subspace.
        seed: base seed; subspace j derives seed + j.

    Raises:
        IndivisibleDimensionError: if d is not a multiple of m.
        EmptyInputError: if there are no feature rows.
    """
    x = _as_points(features)
    n, d = x.shape
    if n == 0:
        raise EmptyInputError("cannot train a codebook on zero feature rows")
    if m < 1 or d % m != 0:
        raise IndivisibleDimensionError(f"dim {d} is not a multiple of {m}")
    if n < k:
        warnings.warn(
            f"training {k} centroids per subspace from only {n} points; "
            "some clusters will be empty",
            stacklevel=2,
        )
    if normalize:
        x = normalize_rows(x)

    ds = d // m
    subs = []
    for j in range(m):
        result = kmeans_fit(x[:, j * ds : (j + 1) * ds], k, seed + j, max_iters, rel_tol)
        subs.append(SubCodebook(j, result.centroids.astype(np.float32)))
    return ProductCodebook(m=m, k=k, dim=d, sub_codebooks=tuple(subs))


def encode(codebook: ProductCodebook, v: np.ndarray) -> PQCode:
    """Quantize a vector: nearest centroid per subspace, ties to lowest index."""
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (codebook.dim,):
        raise LengthMismatchError(f"vector has shape {v.shape}, codebook dim {codebook.dim}")
    u = v.reshape(codebook.m, codebook.sub_dim)
    diff = codebook.stacked() - u[:, None, :]
    d2 = np.einsum("mkd,mkd->mk", diff, diff)
    return PQCode(tuple(int(i) for i in np.argmin(d2, axis=1)))


def encode_matrix(codebook: ProductCodebook, x: EmbeddingMatrix | np.ndarray) -> np.ndarray:
    """Quantize every row of a matrix; returns (n, M) int32 code indices."""
    data = _as_points(x)
    if data.shape[1] != codebook.dim:
        raise LengthMismatchError(
            f"matrix dim {data.shape[1]} does not match codebook dim {codebook.dim}"
        )
    n = data.shape[0]
    ds = codebook.sub_dim
    cents = codebook.stacked()
    codes = np.empty((n, codebook.m), dtype=np.int32)
    # Exact squared distances so ties resolve identically to encode();
    # chunked to bound the (rows, K, d*) temporary.
    chunk = max(1, (1 << 22) // max(1, codebook.k * ds))
    for j in range(codebook.m):
        sub = data[:, j * ds : (j + 1) * ds]
        for start in range(0, n, chunk):
            block = sub[start : start + chunk]
            diff = block[:, None, :] - cents[j][None, :, :]
            d2 = np.einsum("nkd,nkd->nk", diff, diff)
            codes[start : start + chunk, j] = np.argmin(d2, axis=1)
    return codes


def reconstruct(codebook: ProductCodebook, code: PQCode | np.ndarray) -> np.ndarray:
    """Concatenate the centroids a code points at; length-d float64 vector."""
    idx = np.asarray(code.codes if isinstance(code, PQCode) else code, dtype=np.int64)
    if idx.shape != (codebook.m,):
        raise LengthMismatchError(f"code has shape {idx.shape}, expected ({codebook.m},)")
    cents = codebook.stacked()
    return np.concatenate([cents[j, idx[j]] for j in range(codebook.m)])


def adc_table(codebook: ProductCodebook, query: np.ndarray) -> np.ndarray:
    """Squared distances from each query subvector to every centroid, (M, K)."""
    query = np.asarray(query, dtype=np.float64)
    if query.shape != (codebook.dim,):
        raise LengthMismatchError(f"query has shape {query.shape}, codebook dim {codebook.dim}")
    u = query.reshape(codebook.m, codebook.sub_dim)
    diff = codebook.stacked() - u[:, None, :]
    return np.einsum("mkd,mkd->mk", diff, diff)


def _codes_array(codebook: ProductCodebook, codes) -> np.ndarray:
    if isinstance(codes, np.ndarray):
        arr = codes.astype(np.int64, copy=False)
    else:
        arr = np.asarray([c.codes if isinstance(c, PQCode) else c for c in codes], dtype=np.int64)
    if arr.ndim != 2 or arr.shape[1] != codebook.m:
        raise LengthMismatchError(f"codes have shape {arr.shape}, expected (n, {codebook.m})")
    return arr


def adc_scores(codebook: ProductCodebook, codes, query: np.ndarray) -> np.ndarray:
    """Approximate squared distances from a query to every code via table lookup."""
    arr = _codes_array(codebook, codes)
    table = adc_table(codebook, query)
    scores = np.zeros(arr.shape[0], dtype=np.float64)
    for j in range(codebook.m):
        scores += table[j, arr[:, j]]
    return scores


def adc_search(
    codebook: ProductCodebook,
    codes,
    query: np.ndarray,
    top_k: int,
) -> list[tuple[int, float]]:
    """Rank encoded gallery items by ADC distance to a raw query.

    The score of a code equals the exact squared distance between the query
    and the code's reconstruction. Ascending by distance, ties broken by
    lower gallery index.

    Returns:
        top_k (gallery_index, squared_distance) pairs.

    Raises:
        EmptyGalleryError: if there are no codes.
        LengthMismatchError: if the query dimension does not match.
    """
    arr = _codes_array(codebook, codes)
    n = arr.shape[0]
    if n == 0:
        raise EmptyGalleryError("adc_search against an empty gallery")
    if not 1 <= top_k <= n:
        raise BadConfigError(f"top_k must be in [1, {n}], got {top_k}")
    scores = adc_scores(codebook, arr, query)
    order = np.lexsort((np.arange(n), scores))[:top_k]
    return [(int(i), float(scores[i])) for i in order]


def pq_memory_bytes(n: int, m: int, k: int) -> float:
    """Storage for n PQ codes: n * m * log2(k) / 8 bytes (codes only).

    Raises:
        NonPowerOfTwoKError: if k is not a power of two.
    """
    if k < 1 or (k & (k - 1)) != 0:
        raise NonPowerOfTwoKError(f"k must be a power of two, got {k}")
    bits_per_code = m * k.bit_length() - m  # m * log2(k)
    return n * bits_per_code / 8


def memory_report(n: int, m: int, k: int) -> dict:
    """Code-storage accounting as a JSON-ready dict."""
    code_bytes = pq_memory_bytes(n, m, k)
    return {
        "n": n,
        "m": m,
        "k": k,
        "code_bytes": code_bytes,
        "mib": round(code_bytes / (1024 * 1024), 2),
    }


def codebook_save(codebook: ProductCodebook, path: str | Path) -> None:
    """Write a codebook in the PQC1 format.

    Layout: magic ``PQC1``, u32 LE M, u32 LE K, u32 LE d, then M blocks of
    K x d* little-endian float32 centroids.
    """
    header = PQC_MAGIC + struct.pack("<III", codebook.m, codebook.k, codebook.dim)
    blocks = b"".join(
        sub.centroids.astype("<f4").tobytes() for sub in codebook.sub_codebooks
    )
    Path(path).write_bytes(header + blocks)


def codebook_load(path: str | Path) -> ProductCodebook:
    """Read a PQC1 file; the round trip through save/load is bit-exact.

    Raises:
        FormatError: on bad magic, indivisible dimensions, or truncation.
    """
    raw = Path(path).read_bytes()
    if len(raw) < 16:
        raise FormatError(f"{path}: file too short for PQC1 header")
    if raw[:4] != PQC_MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:4]!r}")
    m, k, dim = struct.unpack("<III", raw[4:16])
    if m < 1 or k < 1 or dim < 1 or dim % m != 0:
        raise FormatError(f"{path}: invalid header m={m} k={k} d={dim}")
    ds = dim // m
    expected = m * k * ds * 4
    payload = raw[16:]
    if len(payload) != expected:
        raise FormatError(
            f"{path}: payload is {len(payload)} bytes, header promises {expected}"
        )
    cents = np.frombuffer(payload, dtype="<f4").reshape(m, k, ds)
    subs = tuple(SubCodebook(j, cents[j]) for j in range(m))
    return ProductCodebook(m=m, k=k, dim=dim, sub_codebooks=subs)
