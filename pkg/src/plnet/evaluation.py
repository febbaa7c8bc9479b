"""Single-query retrieval metrics: CMC rank-k and mean average precision."""

from __future__ import annotations

import logging
from fractions import Fraction
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .descriptor import distance_matrix
from .errors import EvaluationError

logger = logging.getLogger(__name__)

DEFAULT_RANKS = (1, 5, 10)


@dataclass(frozen=True)
class RetrievalResult:
    query: int
    ranking: tuple[int, ...]  # eligible gallery indices, nearest first
    relevant: tuple[bool, ...]  # aligned with ranking

    def first_hit(self) -> int | None:
        """1-based rank of the first relevant item, None if there is none."""
        for r, hit in enumerate(self.relevant, 1):
            if hit:
                return r
        return None


def rank_gallery(
    distances: Sequence[float],
    query_identity: int,
    gallery_identities: Sequence[int],
    query_camera: int | None = None,
    gallery_cameras: Sequence[int] | None = None,
    query: int = 0,
) -> RetrievalResult:
    """Order the gallery by distance to one query.

    Ties keep gallery order. When cameras are known, gallery images of the
    query identity taken by the query's camera are left out, and only
    same-identity images from other cameras count as relevant.
    """
    d = np.asarray(distances, dtype=float)
    ids = np.asarray(gallery_identities)
    keep = np.ones(len(d), dtype=bool)
    if query_camera is not None and gallery_cameras is not None:
        keep &= ~((ids == query_identity) & (np.asarray(gallery_cameras) == query_camera))
    eligible = np.flatnonzero(keep)
    if len(eligible) == 0:
        raise EvaluationError(f"query {query} has an empty eligible gallery")
    order = eligible[np.argsort(d[eligible], kind="stable")]
    return RetrievalResult(query, tuple(int(i) for i in order), tuple(bool(ids[i] == query_identity) for i in order))


def retrieve(
    query_features: np.ndarray,
    gallery_features: np.ndarray,
    query_identities: Sequence[int],
    gallery_identities: Sequence[int],
    query_cameras: Sequence[int] | None = None,
    gallery_cameras: Sequence[int] | None = None,
    metric: str = "euclidean",
) -> list[RetrievalResult]:
    dist = distance_matrix(query_features, gallery_features, metric)
    return [
        rank_gallery(
            dist[q],
            query_identities[q],
            gallery_identities,
            None if query_cameras is None else query_cameras[q],
            gallery_cameras,
            query=q,
        )
        for q in range(len(dist))
    ]


def _scored(results: Sequence[RetrievalResult]) -> list[RetrievalResult]:
    kept = [r for r in results if any(r.relevant)]
    skipped = len(results) - len(kept)
    if skipped:
        logger.warning("%d queries without relevant gallery items were excluded", skipped)
    if not kept:
        raise EvaluationError("no query has a relevant gallery item")
    return kept


def cmc(results: Sequence[RetrievalResult], ranks: Sequence[int] = DEFAULT_RANKS) -> list[float]:
    """Fraction of queries whose first relevant item is ranked <= r, for each r."""
    firsts = np.array([r.first_hit() for r in _scored(results)])
    return [float(np.mean(firsts <= r)) for r in ranks]


def _exact_ap(relevant: Sequence[bool]) -> Fraction:
    hits = np.flatnonzero(np.asarray(relevant, dtype=bool)) + 1
    if len(hits) == 0:
        raise EvaluationError("average precision needs at least one relevant item")
    return sum((Fraction(i, int(r)) for i, r in enumerate(hits, 1)), Fraction(0)) / len(hits)


def average_precision(relevant: Sequence[bool]) -> float:
    """Precision at each relevant rank, averaged.

    Summed in exact rational arithmetic so the result is the correctly
    rounded value (5/6 comes out as the float nearest 5/6).
    """
    return float(_exact_ap(relevant))


def mean_ap(results: Sequence[RetrievalResult]) -> float:
    """Mean over queries of the precision averaged at each relevant rank."""
    kept = _scored(results)
    return float(sum((_exact_ap(r.relevant) for r in kept), Fraction(0)) / len(kept))


@dataclass(frozen=True)
class Scores:
    map: float
    rank1: float
    rank5: float
    rank10: float
    excluded: int = 0

    def row(self, method: str) -> list:
        return [method, self.map, self.rank1, self.rank5, self.rank10]


def score(results: Sequence[RetrievalResult]) -> Scores:
    r1, r5, r10 = cmc(results, DEFAULT_RANKS)
    excluded = sum(1 for r in results if not any(r.relevant))
    return Scores(mean_ap(results), r1, r5, r10, excluded)


REPORT_HEADER = ["method", "mAP", "Rank-1", "Rank-5", "Rank-10"]


def format_csv(rows: Sequence[Sequence]) -> str:
    lines = [",".join(REPORT_HEADER)]
    for method, *values in rows:
        lines.append(",".join([str(method), *(f"{100 * v:.2f}" for v in values)]))
    return "\n".join(lines) + "\n"


def format_table(rows: Sequence[Sequence]) -> str:
    """Aligned text table with percentages, one line per method."""
    cells = [REPORT_HEADER] + [[str(m), *(f"{100 * v:.2f}" for v in vals)] for m, *vals in rows]
    widths = [max(len(row[i]) for row in cells) for i in range(len(REPORT_HEADER))]
    out = []
    for n, row in enumerate(cells):
        out.append("  ".join(c.ljust(widths[0]) if i == 0 else c.rjust(widths[i]) for i, c in enumerate(row)))
        if n == 0:
            out.append("  ".join("-" * w for w in widths))
    return "\n".join(out) + "\n"
