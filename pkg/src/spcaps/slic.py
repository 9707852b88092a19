"""SLIC superpixels with connectivity enforcement and exact-count normalization.

The clustering loop is vectorized over all (seed, window pixel) pairs per
iteration rather than looping over seeds, which keeps S in the thousands
affordable on a 256x256 image.
"""
from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from .tensorio import Image, Space, srgb_to_lab_array


@dataclass(frozen=True)
class SlicParams:
    n_segments: int = 36
    compactness: float = 0.1
    sigma: float = 0.0
    iterations: int = 10
    seed_perturb: bool = True

    def __post_init__(self):
        if self.n_segments < 1:
            raise ValueError("n_segments must be >= 1")
        if not self.compactness > 0:
            raise ValueError("compactness must be > 0")
        if self.sigma < 0:
            raise ValueError("sigma must be >= 0")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")


@dataclass(eq=False)
class Segmentation:
    """Per-pixel labels in ``[0, count)``.

    Labels listed in ``padded`` own no pixels; they exist only so that
    downstream tensors keep a fixed superpixel axis.
    """

    labels: np.ndarray
    count: int
    padded: frozenset = field(default_factory=frozenset)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.labels.ndim != 2:
            raise ValueError("labels must be 2-D")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.count):
            raise ValueError("label out of range")
        self.padded = frozenset(int(p) for p in self.padded)

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def width(self) -> int:
        return self.labels.shape[1]

    @property
    def region_sizes(self) -> np.ndarray:
        return np.bincount(self.labels.ravel(), minlength=self.count)

    @property
    def mask(self) -> np.ndarray:
        """True for superpixels that own at least one pixel."""
        return self.region_sizes > 0

    @property
    def nonempty(self) -> int:
        return int(np.count_nonzero(self.region_sizes))


def slic_distance(p1, p2, s: float, m: float) -> float:
    """Distance between two (L, a, b, x, y) points: color plus scaled spatial term."""
    if not s > 0:
        raise ValueError("sampling interval must be > 0")
    p1 = np.asarray(p1, dtype=np.float64)
    p2 = np.asarray(p2, dtype=np.float64)
    dc2 = np.sum((p1[..., :3] - p2[..., :3]) ** 2, axis=-1)
    ds2 = np.sum((p1[..., 3:] - p2[..., 3:]) ** 2, axis=-1)
    return np.sqrt(dc2 + ds2 / (s * s) * (m * m))


def sampling_interval(height: int, width: int, n_segments: int) -> float:
    return math.sqrt(height * width / n_segments)


def _grid_shape(height: int, width: int, n_segments: int) -> tuple[int, int]:
    ny = max(1, min(height, round(math.sqrt(n_segments * height / width))))
    nx = max(1, min(width, math.ceil(n_segments / ny)))
    return ny, nx


def _gradient(lab: np.ndarray) -> np.ndarray:
    pad = np.pad(lab, ((1, 1), (1, 1), (0, 0)), mode="edge")
    dx = pad[1:-1, 2:] - pad[1:-1, :-2]
    dy = pad[2:, 1:-1] - pad[:-2, 1:-1]
    return np.sum(dx * dx, axis=-1) + np.sum(dy * dy, axis=-1)


def init_seeds(lab: Image | np.ndarray, n_segments: int, perturb: bool = True) -> np.ndarray:
    """Place seeds at the centers of a regular grid.

    Returns an array of shape ``(K, 5)`` holding ``(L, a, b, row, col)`` per
    seed.  ``K`` is the smallest grid count covering ``n_segments`` for the
    image aspect ratio, so it may slightly exceed the request.
    """
    arr = lab.data if isinstance(lab, Image) else np.asarray(lab, dtype=np.float64)
    if isinstance(lab, Image) and lab.space != Space.LAB:
        raise ValueError("init_seeds expects a LAB image")
    h, w = arr.shape[:2]
    if n_segments < 1 or n_segments > h * w:
        raise ValueError(f"n_segments={n_segments} must be in [1, {h * w}]")
    ny, nx = _grid_shape(h, w, n_segments)
    rows = np.floor((np.arange(ny) + 0.5) * h / ny).astype(int)
    cols = np.floor((np.arange(nx) + 0.5) * w / nx).astype(int)
    rr, cc = np.meshgrid(rows, cols, indexing="ij")
    rr, cc = rr.ravel(), cc.ravel()
    if perturb:
        grad = _gradient(arr)
        best_r, best_c = rr.copy(), cc.copy()
        best_g = grad[rr, cc]
        for dr in (-1, 0, 1):
            for dc in (-1, 0, 1):
                r2 = np.clip(rr + dr, 0, h - 1)
                c2 = np.clip(cc + dc, 0, w - 1)
                g = grad[r2, c2]
                better = g < best_g
                best_r = np.where(better, r2, best_r)
                best_c = np.where(better, c2, best_c)
                best_g = np.where(better, g, best_g)
        rr, cc = best_r, best_c
    return np.column_stack([arr[rr, cc], rr, cc]).astype(np.float64)


def _grid_labels(h: int, w: int, n_segments: int) -> np.ndarray:
    ny, nx = _grid_shape(h, w, n_segments)
    ri = np.minimum(np.arange(h) * ny // h, ny - 1)
    ci = np.minimum(np.arange(w) * nx // w, nx - 1)
    return (ri[:, None] * nx + ci[None, :]).astype(np.int64)


def _features(lab: np.ndarray) -> np.ndarray:
    h, w = lab.shape[:2]
    rr, cc = np.mgrid[0:h, 0:w]
    return np.concatenate([lab, rr[..., None], cc[..., None]], axis=-1).reshape(-1, 5).astype(np.float64)


def _energy_terms(feats: np.ndarray, seeds: np.ndarray, labels: np.ndarray, s: float, m: float) -> np.ndarray:
    return slic_distance(feats, seeds[labels], s, m)


def slic_energy(lab: np.ndarray, seeds: np.ndarray, labels: np.ndarray, s: float, m: float) -> float:
    """Total clustering energy: sum of per-pixel distances to the assigned seed."""
    return float(_energy_terms(_features(lab), seeds, labels.ravel(), s, m).sum())


def assign_step(lab: np.ndarray, seeds: np.ndarray, labels: np.ndarray, s: float, m: float) -> np.ndarray:
    """Assign each pixel to the nearest seed among those whose 2s x 2s window covers it.

    A pixel's current seed always stays a candidate, so the step never raises
    the total energy.  Ties go to the lowest seed index.
    """
    h, w = lab.shape[:2]
    feats = _features(lab)
    flat = labels.ravel()
    k = len(seeds)
    half = int(math.ceil(s))
    off = np.arange(-half, half + 1)
    cy = np.rint(seeds[:, 3]).astype(np.int64)
    cx = np.rint(seeds[:, 4]).astype(np.int64)
    rows = cy[:, None] + off[None, :]  # (K, P1)
    cols = cx[:, None] + off[None, :]
    inside = (
        (rows[:, :, None] >= 0)
        & (rows[:, :, None] < h)
        & (cols[:, None, :] >= 0)
        & (cols[:, None, :] < w)
        & (np.abs(rows[:, :, None] - seeds[:, 3, None, None]) <= s)
        & (np.abs(cols[:, None, :] - seeds[:, 4, None, None]) <= s)
    )
    seed_idx = np.broadcast_to(np.arange(k)[:, None, None], inside.shape)[inside]
    pix = (rows[:, :, None] * w + cols[:, None, :])
    pix = np.broadcast_to(pix, inside.shape)[inside]

    pix = np.concatenate([np.arange(h * w), pix])
    seed_idx = np.concatenate([flat, seed_idx])
    dist = slic_distance(feats[pix], seeds[seed_idx], s, m)

    best = np.full(h * w, np.inf)
    np.minimum.at(best, pix, dist)
    hit = dist == best[pix]
    new = np.full(h * w, k, dtype=np.int64)
    np.minimum.at(new, pix[hit], seed_idx[hit])
    return new.reshape(h, w)


def update_step(lab: np.ndarray, seeds: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Move each seed to the 5-D centroid of its pixels; empty seeds stay put."""
    feats = _features(lab)
    flat = labels.ravel()
    k = len(seeds)
    counts = np.bincount(flat, minlength=k).astype(np.float64)
    sums = np.stack([np.bincount(flat, weights=feats[:, d], minlength=k) for d in range(5)], axis=1)
    out = seeds.copy()
    nz = counts > 0
    out[nz] = sums[nz] / counts[nz, None]
    return out


# --------------------------------------------------------------------------
# region merging


class _RegionGraph:
    """Adjacency (shared 4-neighbor edge counts) between integer regions 0..n-1."""

    def __init__(self, regions: np.ndarray, n: int):
        self.n = n
        self.size = np.bincount(regions.ravel(), minlength=n).astype(np.int64)
        self.adj: list[dict[int, int]] = [dict() for _ in range(n)]
        a = np.concatenate([regions[:, :-1].ravel(), regions[:-1, :].ravel()])
        b = np.concatenate([regions[:, 1:].ravel(), regions[1:, :].ravel()])
        diff = a != b
        lo = np.minimum(a[diff], b[diff])
        hi = np.maximum(a[diff], b[diff])
        keys, counts = np.unique(lo * n + hi, return_counts=True)
        for key, cnt in zip(keys.tolist(), counts.tolist()):
            i, j = divmod(key, n)
            self.adj[i][j] = cnt
            self.adj[j][i] = cnt
        self.parent = np.arange(n)

    def best_neighbor(self, r: int, rank) -> int | None:
        """Neighbor with the longest shared boundary; ties go to the lowest ``rank``."""
        nbrs = self.adj[r]
        if not nbrs:
            return None
        return max(nbrs, key=lambda q: (nbrs[q], -rank[q]))

    def merge(self, src: int, dst: int) -> None:
        for q, cnt in self.adj[src].items():
            if q == dst:
                continue
            self.adj[dst][q] = self.adj[dst].get(q, 0) + cnt
            self.adj[q][dst] = self.adj[q].get(dst, 0) + cnt
            del self.adj[q][src]
        self.adj[dst].pop(src, None)
        self.adj[src] = {}
        self.size[dst] += self.size[src]
        self.size[src] = 0
        self.parent[src] = dst

    def resolve(self) -> np.ndarray:
        p = self.parent.copy()
        while True:
            nxt = p[p]
            if np.array_equal(nxt, p):
                return p
            p = nxt

    def merge_smallest(self, rank, alive: np.ndarray, stop) -> None:
        """Repeatedly fold the smallest live region into its best neighbor.

        ``stop(size, n_alive)`` is consulted with the current smallest region
        size; merging halts when it returns True.
        """
        heap = [(int(self.size[r]), rank[r], r) for r in np.flatnonzero(alive)]
        heapq.heapify(heap)
        n_alive = int(alive.sum())
        while heap:
            size, _, r = heapq.heappop(heap)
            if not alive[r] or size != self.size[r]:
                continue
            if stop(size, n_alive):
                break
            dst = self.best_neighbor(r, rank)
            if dst is None:
                continue
            self.merge(r, dst)
            alive[r] = False
            n_alive -= 1
            heapq.heappush(heap, (int(self.size[dst]), rank[dst], dst))


def _components(labels: np.ndarray) -> tuple[np.ndarray, int]:
    """4-connected same-label components, numbered by first pixel in raster order."""
    h, w = labels.shape
    idx = np.arange(h * w).reshape(h, w)
    hor = labels[:, :-1] == labels[:, 1:]
    ver = labels[:-1, :] == labels[1:, :]
    src = np.concatenate([idx[:, :-1][hor], idx[:-1, :][ver]])
    dst = np.concatenate([idx[:, 1:][hor], idx[1:, :][ver]])
    graph = coo_matrix((np.ones(len(src), dtype=np.int8), (src, dst)), shape=(h * w, h * w))
    n, comp = connected_components(graph, directed=False)
    _, first = np.unique(comp, return_index=True)
    order = np.argsort(first, kind="stable")
    remap = np.empty(n, dtype=np.int64)
    remap[order] = np.arange(n)
    return remap[comp].reshape(h, w), n


def _dense(labels: np.ndarray, keys: np.ndarray) -> tuple[np.ndarray, int]:
    """Renumber the labels present in ``labels`` to 0..n-1 in ascending ``keys`` order."""
    present = np.unique(labels)
    order = present[np.lexsort((present, keys[present]))]
    remap = np.full(labels.max() + 1, -1, dtype=np.int64)
    remap[order] = np.arange(len(order))
    return remap[labels], len(order)


def enforce_connectivity(labels: np.ndarray, n_segments: int | None = None, min_size: float | None = None) -> np.ndarray:
    """Make every label's pixel set 4-connected.

    Fragments smaller than ``min_size`` (default a quarter of the mean cell
    area ``H*W/n_segments``) are absorbed into the adjacent region sharing the
    longest boundary.  Larger detached fragments become labels of their own.
    The result is densely numbered, keeping the input label order.
    """
    labels = np.asarray(labels, dtype=np.int64)
    h, w = labels.shape
    if min_size is None:
        n_segments = n_segments or int(labels.max()) + 1
        min_size = (h * w / n_segments) / 4.0
    comp, n = _components(labels)
    comp_label = np.zeros(n, dtype=np.int64)
    comp_label[comp.ravel()] = labels.ravel()
    graph = _RegionGraph(comp, n)
    alive = np.ones(n, dtype=bool)
    rank = comp_label.tolist()
    graph.merge_smallest(rank, alive, stop=lambda size, _n: size >= min_size)
    comp = graph.resolve()[comp]

    # surviving components: the largest per original label keeps its slot,
    # others sort right after it
    live = np.flatnonzero(alive)
    sizes = graph.size[live]
    lab_of = comp_label[live]
    order = np.lexsort((live, -sizes, lab_of))
    keys = np.zeros(n, dtype=np.int64)
    keys[live[order]] = np.arange(len(live))
    out, _ = _dense(comp, keys)
    return out


def normalize_count(seg: Segmentation, n_segments: int) -> Segmentation:
    """Merge smallest regions or append empty labels until exactly ``n_segments`` remain."""
    labels, n = _dense(seg.labels, np.arange(seg.labels.max() + 1))
    if n > n_segments:
        graph = _RegionGraph(labels, n)
        alive = np.ones(n, dtype=bool)
        graph.merge_smallest(list(range(n)), alive, stop=lambda _s, n_alive: n_alive <= n_segments)
        labels, n = _dense(graph.resolve()[labels], np.arange(n))
    padded = frozenset(range(n, n_segments))
    return Segmentation(labels, n_segments, padded)


def smooth_rgb(rgb: np.ndarray, sigma: float) -> np.ndarray:
    rgb = np.asarray(rgb, dtype=np.float64)
    if sigma <= 0:
        return rgb
    return ndimage.gaussian_filter(rgb, sigma=(sigma, sigma, 0), mode="nearest")


def segment(image: Image, params: SlicParams | None = None) -> Segmentation:
    """Full SLIC pipeline returning exactly ``params.n_segments`` labels."""
    params = params or SlicParams()
    if image.space != Space.RGB8:
        raise ValueError(f"space mismatch: expected RGB8, got {image.space.value}")
    h, w = image.height, image.width
    if h * w == 0:
        raise ValueError("empty image")
    rgb = image.data.astype(np.float64)
    if image.channels == 1:
        rgb = np.repeat(rgb, 3, axis=2)
    lab = srgb_to_lab_array(smooth_rgb(rgb, params.sigma) / 255.0)
    S = params.n_segments
    seeds = init_seeds(lab, S, params.seed_perturb)
    s = sampling_interval(h, w, S)
    labels = _grid_labels(h, w, S)
    for _ in range(params.iterations):
        labels = assign_step(lab, seeds, labels, s, params.compactness)
        seeds = update_step(lab, seeds, labels)
    labels = enforce_connectivity(labels, S)
    return normalize_count(Segmentation(labels, int(labels.max()) + 1), S)


def is_connected(labels: np.ndarray) -> bool:
    """True when every label present forms one 4-connected region."""
    _, n = _components(labels)
    return n == len(np.unique(labels))


def mean_color(image: Image, seg: Segmentation) -> Image:
    """Paint each superpixel with its mean RGB color."""
    flat = seg.labels.ravel()
    sizes = np.maximum(seg.region_sizes, 1).astype(np.float64)
    rgb = image.data.reshape(-1, image.channels).astype(np.float64)
    means = np.stack([np.bincount(flat, weights=rgb[:, c], minlength=seg.count) / sizes for c in range(image.channels)], axis=1)
    out = np.clip(np.round(means[flat]), 0, 255).reshape(seg.height, seg.width, image.channels)
    if out.shape[2] == 1:
        out = np.repeat(out, 3, axis=2)
    return Image.rgb(out)


def draw_boundaries(image: Image, seg: Segmentation, color=(255, 0, 0)) -> Image:
    lab = seg.labels
    edge = np.zeros(lab.shape, dtype=bool)
    edge[:, :-1] |= lab[:, :-1] != lab[:, 1:]
    edge[:-1, :] |= lab[:-1, :] != lab[1:, :]
    out = image.data.copy()
    if out.shape[2] == 1:
        out = np.repeat(out, 3, axis=2)
    out[edge] = color
    return Image.rgb(out)
