"""Scene-level neighbour retrieval between labelled shots and an unlabelled pool."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ShapeError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class EmbeddingMatrix:
    """``Z x count`` matrix; column ``j`` embeds the image with ``ids[j]``."""

    values: np.ndarray
    ids: tuple

    def __post_init__(self):
        if self.values.ndim != 2 or self.values.shape[1] != len(self.ids):
            raise ShapeError(f"{self.values.shape} embedding matrix for {len(self.ids)} ids")

    @property
    def dim(self) -> int:
        return self.values.shape[0]


@dataclass(frozen=True)
class DistanceMatrix:
    values: np.ndarray  # (N_t, M_t)
    row_ids: tuple
    col_ids: tuple


@dataclass(frozen=True)
class Neighborhood:
    per_query: tuple  # per labelled image: ordered tuple of pool ids, nearest first
    union: tuple  # deduplicated pool ids, ascending
    clamped: bool = False  # K exceeded the pool size

    def __len__(self):
        return len(self.union)


def embed_set(embedder, images: Sequence[np.ndarray], ids: Sequence | None = None,
              cache: "EmbeddingCache | None" = None) -> EmbeddingMatrix:
    if len(images) == 0:
        raise ValueError("cannot embed an empty image list")
    ids = tuple(ids) if ids is not None else tuple(range(1, len(images) + 1))
    cols = []
    for img_id, image in zip(ids, images):
        vec = cache.get(embedder.tag, img_id) if cache is not None else None
        if vec is None:
            try:
                vec = np.asarray(embedder(image), dtype=np.float64)
            except Exception as exc:
                raise RuntimeError(f"embedder {embedder.tag!r} failed on image {img_id!r}: {exc}") from exc
            if cache is not None:
                cache.put(embedder.tag, img_id, vec)
        cols.append(vec)
    return EmbeddingMatrix(np.stack(cols, axis=1), ids)


def _values(m):
    return m.values if isinstance(m, EmbeddingMatrix) else np.asarray(m, dtype=np.float64)


def pairwise_cosine_distance(F, G) -> DistanceMatrix:
    """``d_ij = 1 - cos(f_i, g_j)`` for columns of ``F`` (Z x N) and ``G`` (Z x M).

    A zero-norm column has distance 1 to everything.
    """
    f, g = _values(F), _values(G)
    if f.shape[0] != g.shape[0]:
        raise ShapeError(f"embedding sizes differ: {f.shape[0]} vs {g.shape[0]}")
    fn = np.linalg.norm(f, axis=0)
    gn = np.linalg.norm(g, axis=0)
    denom = np.outer(fn, gn)
    with np.errstate(invalid="ignore", divide="ignore"):
        cos = np.where(denom > 0, (f.T @ g) / np.where(denom > 0, denom, 1.0), 0.0)
    d = np.clip(1.0 - cos, 0.0, 2.0)
    row_ids = F.ids if isinstance(F, EmbeddingMatrix) else tuple(range(1, f.shape[1] + 1))
    col_ids = G.ids if isinstance(G, EmbeddingMatrix) else tuple(range(1, g.shape[1] + 1))
    return DistanceMatrix(d, row_ids, col_ids)


def knn_neighborhoods(D, K: int) -> Neighborhood:
    """K nearest pool ids per row; ties go to the lower id.

    ``D`` may be a :class:`DistanceMatrix` or a bare array (pool ids are then
    1-based column positions). K larger than the pool is clamped with a
    warning and ``clamped=True``.
    """
    if K < 1:
        raise ValueError("K must be >= 1")
    if isinstance(D, DistanceMatrix):
        values, col_ids = D.values, D.col_ids
    else:
        values = np.asarray(D, dtype=np.float64)
        col_ids = tuple(range(1, values.shape[1] + 1))
    M = values.shape[1]
    clamped = K > M
    if clamped:
        log.warning("K=%d exceeds pool size %d; using %d", K, M, M)
        K = M
    ids = np.asarray(col_ids)
    order = np.argsort(ids, kind="stable")
    # sort columns by id first so a stable distance sort breaks ties by id
    v = values[:, order]
    idx = np.argsort(v, axis=1, kind="stable")[:, :K]
    per = tuple(tuple(ids[order][row].tolist()) for row in idx)
    union = tuple(sorted({i for row in per for i in row}))
    return Neighborhood(per, union, clamped)


def scale_invariance_check(F, G, alpha: float, K: int = 10) -> bool:
    """True iff rescaling ``F`` by ``alpha > 0`` selects the same neighbour sets."""
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    f = _values(F)
    a = knn_neighborhoods(pairwise_cosine_distance(f, G), K)
    b = knn_neighborhoods(pairwise_cosine_distance(alpha * f, G), K)
    return [set(r) for r in a.per_query] == [set(r) for r in b.per_query]


class EmbeddingCache:
    """On-disk embedding cache, one ``.npz`` per embedder tag, keyed by image id."""

    def __init__(self, directory):
        self.directory = Path(directory)
        self._tables: dict[str, dict[str, np.ndarray]] = {}
        self._dirty: set[str] = set()

    def _path(self, tag):
        safe = "".join(ch if ch.isalnum() or ch in "-_." else "_" for ch in tag)
        return self.directory / f"{safe}.npz"

    def _table(self, tag):
        if tag not in self._tables:
            path = self._path(tag)
            if path.exists():
                with np.load(path) as z:
                    self._tables[tag] = {k: z[k] for k in z.files}
            else:
                self._tables[tag] = {}
        return self._tables[tag]

    def get(self, tag, img_id):
        return self._table(tag).get(str(img_id))

    def put(self, tag, img_id, vec):
        self._table(tag)[str(img_id)] = np.asarray(vec, dtype=np.float64)
        self._dirty.add(tag)

    def flush(self):
        self.directory.mkdir(parents=True, exist_ok=True)
        for tag in sorted(self._dirty):
            table = self._tables[tag]
            np.savez(self._path(tag), **{k: table[k] for k in sorted(table)})
        self._dirty.clear()
