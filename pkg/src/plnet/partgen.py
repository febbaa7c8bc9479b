"""Unsupervised part boxes from feature maps, and RoI max pooling.

Parts are found by locating each channel's peak, clustering the peak rows
into K groups, averaging each group's channels into a saliency map, and
taking the bounding rectangle of the thresholded map. All coordinates are
feature-grid cells; boxes are inclusive on both ends. Parts and clusters
are indexed from 0, top of the image first.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, DegenerateInputError
from .tensor import Node, custom_op

MAX_LLOYD_ITERATIONS = 100


@dataclass(frozen=True)
class ArgmaxLocation:
    channel: int
    row: int
    col: int


@dataclass(frozen=True)
class PartBox:
    index: int
    top: int
    bottom: int
    left: int
    right: int

    @property
    def height(self) -> int:
        return self.bottom - self.top + 1

    @property
    def width(self) -> int:
        return self.right - self.left + 1

    def validate(self, height: int, width: int) -> None:
        if not (0 <= self.top <= self.bottom < height and 0 <= self.left <= self.right < width):
            raise ConfigurationError(f"{self} does not fit a {height}×{width} grid")


@dataclass(frozen=True)
class ClusterAssignment:
    labels: tuple[int, ...]  # cluster per channel
    centers: tuple[float, ...]  # ascending

    @property
    def k(self) -> int:
        return len(self.centers)

    def members(self, k: int) -> list[int]:
        return [z for z, c in enumerate(self.labels) if c == k]


def argmax_locations(x: np.ndarray) -> list[ArgmaxLocation]:
    """Peak cell of every channel of a Z×H×W array (first in row-major order on ties)."""
    x = np.asarray(x)
    if x.ndim != 3 or x.shape[0] < 1:
        raise ConfigurationError(f"expected Z×H×W feature maps, got shape {x.shape}")
    _, _, w = x.shape
    flat = x.reshape(x.shape[0], -1).argmax(axis=1)
    return [ArgmaxLocation(z, int(i // w), int(i % w)) for z, i in enumerate(flat)]


def cluster_vertical(locations, k: int, seed: int | None = None, method: str = "exact") -> ClusterAssignment:
    """Cluster channels into `k` groups by the row of their peak.

    ``method="exact"`` returns a partition minimising the within-cluster sum
    of squared row deviations (1-D k-means solved by dynamic programming
    over the sorted rows). ``method="lloyd"`` runs Lloyd iterations from
    centers at the (i - 0.5)/k quantiles until assignments stop changing,
    which can stall in a local optimum. Either way every cluster is
    non-empty and labels ascend with the cluster center. `seed` is accepted
    for interface symmetry; both methods are deterministic.
    """
    rows = np.array([loc.row if isinstance(loc, ArgmaxLocation) else loc for loc in locations], dtype=float)
    n = len(rows)
    if k < 1:
        raise ConfigurationError(f"K must be >= 1, got {k}")
    if n < k:
        raise DegenerateInputError(
            f"cannot split {n} channels into {k} parts; use K <= {n} (a smaller K)"
        )
    if method == "exact":
        labels = _exact_labels(rows, k)
    elif method == "lloyd":
        labels = _lloyd_labels(rows, k)
    else:
        raise ConfigurationError(f"unknown clustering method {method!r}")
    centers = np.array([rows[labels == j].mean() for j in range(k)])
    order = np.argsort(centers, kind="stable")
    rank = np.empty(k, dtype=int)
    rank[order] = np.arange(k)
    return ClusterAssignment(
        labels=tuple(int(rank[c]) for c in labels),
        centers=tuple(float(centers[j]) for j in order),
    )


def _exact_labels(rows: np.ndarray, k: int) -> np.ndarray:
    values, inverse, counts = np.unique(rows, return_inverse=True, return_counts=True)
    if len(values) >= k:
        # channels sharing a row never gain from being split, so cluster the
        # distinct rows weighted by multiplicity
        return _segment_labels(values, counts.astype(float), k)[inverse]
    order = np.argsort(rows, kind="stable")
    labels = np.empty(len(rows), dtype=int)
    labels[order] = _segment_labels(rows[order], np.ones(len(rows)), k)
    return labels


def _segment_labels(v: np.ndarray, weight: np.ndarray, k: int) -> np.ndarray:
    """Optimal split of sorted values `v` into k contiguous weighted segments."""
    n = len(v)
    s0 = np.concatenate([[0.0], np.cumsum(weight)])
    s1 = np.concatenate([[0.0], np.cumsum(weight * v)])
    s2 = np.concatenate([[0.0], np.cumsum(weight * v * v)])

    def cost(i, j):  # weighted SSE of v[i:j]
        return (s2[j] - s2[i]) - (s1[j] - s1[i]) ** 2 / (s0[j] - s0[i])

    i_idx, j_idx = np.meshgrid(np.arange(n + 1), np.arange(n + 1), indexing="ij")
    with np.errstate(divide="ignore", invalid="ignore"):
        seg = np.where(i_idx < j_idx, cost(i_idx, j_idx), np.inf)
    # best[m, j]: least SSE splitting v[:j] into m segments; ties keep the earliest cut
    best = np.full((k + 1, n + 1), np.inf)
    cut = np.zeros((k + 1, n + 1), dtype=int)
    best[0, 0] = 0.0
    for m in range(1, k + 1):
        cand = best[m - 1][:, None] + seg
        low = cand.min(axis=0)
        tol = 1e-9 * np.maximum(1.0, np.abs(low))
        cut[m] = np.argmax(cand <= (low + tol)[None, :], axis=0)
        best[m] = low
    labels = np.empty(n, dtype=int)
    j = n
    for m in range(k, 0, -1):
        i = cut[m, j]
        labels[i:j] = m - 1
        j = i
    return labels


def _lloyd_labels(rows: np.ndarray, k: int) -> np.ndarray:
    centers = np.quantile(np.sort(rows), (np.arange(1, k + 1) - 0.5) / k)
    labels = None
    for _ in range(MAX_LLOYD_ITERATIONS):
        dist = np.abs(rows[:, None] - centers[None, :])
        new = dist.argmin(axis=1)
        _fill_empty(rows, centers, new, k)
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
        centers = np.array([rows[labels == j].mean() for j in range(k)])
    return labels


def _fill_empty(rows: np.ndarray, centers: np.ndarray, labels: np.ndarray, k: int) -> None:
    for j in range(k):
        if np.any(labels == j):
            continue
        counts = np.bincount(labels, minlength=k)
        spread = np.abs(rows - centers[labels])
        spread[counts[labels] < 2] = -1.0  # never empty another cluster
        z = int(spread.argmax())
        labels[z] = j
        centers[j] = rows[z]


def cluster_saliency(x: np.ndarray, assignment: ClusterAssignment, k: int) -> np.ndarray:
    """Max-min normalized mean of the cluster's channels (all zeros if flat)."""
    members = assignment.members(k)
    if not members:
        raise DegenerateInputError(f"cluster {k} has no channels")
    mean = np.asarray(x)[members].mean(axis=0)
    lo, hi = mean.min(), mean.max()
    if hi == lo:
        return np.zeros_like(mean)
    return (mean - lo) / (hi - lo)


def binarize_and_box(saliency: np.ndarray, threshold: float = 0.5, index: int = 0) -> PartBox:
    """Bounding rectangle of cells strictly above `threshold`; whole grid if none."""
    fg = np.asarray(saliency) > threshold
    h, w = fg.shape
    if not fg.any():
        return PartBox(index, 0, h - 1, 0, w - 1)
    rows = np.flatnonzero(fg.any(axis=1))
    cols = np.flatnonzero(fg.any(axis=0))
    return PartBox(index, int(rows[0]), int(rows[-1]), int(cols[0]), int(cols[-1]))


def generate_parts(x: np.ndarray, k: int, seed: int | None = None, threshold: float = 0.5) -> list[PartBox]:
    x = np.asarray(x)
    assignment = cluster_vertical(argmax_locations(x), k, seed)
    return [binarize_and_box(cluster_saliency(x, assignment, j), threshold, index=j) for j in range(k)]


def grid_parts(height: int, width: int, k: int) -> list[PartBox]:
    """K equal horizontal stripes spanning the full width."""
    if not 1 <= k <= height:
        raise ConfigurationError(f"grid parts need 1 <= K <= {height}, got {k}")
    return [
        PartBox(j, j * height // k, (j + 1) * height // k - 1, 0, width - 1)
        for j in range(k)
    ]


def bin_edges(start: int, length: int, bins: int) -> list[tuple[int, int]]:
    """Half-open cell ranges splitting [start, start + length) into `bins` parts.

    Bin i covers [floor(i·L/n), floor((i+1)·L/n)). A bin that comes out empty
    (only when L < n) takes the single cell at floor(i·L/n), which belongs
    to its nearest non-empty neighbour.
    """
    edges = []
    for i in range(bins):
        lo = i * length // bins
        hi = (i + 1) * length // bins
        if hi <= lo:
            lo = min(lo, length - 1)
            hi = lo + 1
        edges.append((start + lo, start + hi))
    return edges


def roi_pool(x: Node, box: PartBox, out: tuple[int, int] = (4, 4)) -> Node:
    """Max-pool the box region of a Z×H×W node into Z×out[0]×out[1] bins.

    The gradient of each bin flows to the cell holding its maximum (first in
    row-major order within the bin).
    """
    xv = x.value
    if xv.ndim != 3:
        raise ConfigurationError(f"roi_pool expects Z×H×W input, got shape {x.shape}")
    z, h, w = xv.shape
    box.validate(h, w)
    oh, ow = out
    row_bins = bin_edges(box.top, box.height, oh)
    col_bins = bin_edges(box.left, box.width, ow)
    pooled = np.empty((z, oh, ow), dtype=xv.dtype)
    src_r = np.empty((z, oh, ow), dtype=np.intp)
    src_c = np.empty((z, oh, ow), dtype=np.intp)
    for i, (r0, r1) in enumerate(row_bins):
        for j, (c0, c1) in enumerate(col_bins):
            region = xv[:, r0:r1, c0:c1].reshape(z, -1)
            arg = region.argmax(axis=1)
            pooled[:, i, j] = region[np.arange(z), arg]
            src_r[:, i, j] = r0 + arg // (c1 - c0)
            src_c[:, i, j] = c0 + arg % (c1 - c0)
    chan = np.broadcast_to(np.arange(z)[:, None, None], pooled.shape)

    def backward_fn(g):
        gx = np.zeros(xv.shape, dtype=g.dtype)
        np.add.at(gx, (chan, src_r, src_c), g)
        return (gx,)

    return custom_op(pooled, "roi_pool", (x,), backward_fn)
