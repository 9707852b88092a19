"""Hue-histogram entropy of superpixels versus equal-area sliding windows."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass

import numpy as np

from .slic import Segmentation, SlicParams, segment
from .tensorio import Image, Space, rgb_to_hue

N_BINS = 256


@dataclass(frozen=True)
class EntropyReport:
    S: int
    T: int
    sp_entropy: float
    conv_entropy: float
    global_entropy: float
    M: float
    compression_input: float
    compression_conv: float


def _hue_values(hue) -> np.ndarray:
    if isinstance(hue, Image):
        if hue.space != Space.HUE:
            raise ValueError(f"space mismatch: expected HUE, got {hue.space.value}")
        return hue.data[:, :, 0]
    return np.asarray(hue, dtype=np.float64)


def hue_bins(hue) -> np.ndarray:
    """Bin index floor(hue * 256), clamped to [0, 255]."""
    return np.clip(np.floor(_hue_values(hue) * N_BINS), 0, N_BINS - 1).astype(np.int64)


def _entropy_of_counts(counts: np.ndarray, axis: int = -1) -> np.ndarray:
    counts = np.asarray(counts, dtype=np.float64)
    total = counts.sum(axis=axis, keepdims=True)
    p = np.divide(counts, total, out=np.zeros_like(counts), where=total > 0)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, -p * np.log2(np.where(p > 0, p, 1.0)), 0.0)
    return terms.sum(axis=axis)


def region_entropy(hue, region) -> float:
    """Entropy in bits of the 256-bin hue histogram over ``region``.

    ``region`` is a boolean mask or an index array into the image.
    """
    values = hue_bins(hue)[region].ravel()
    if values.size == 0:
        raise ValueError("empty region")
    return float(_entropy_of_counts(np.bincount(values, minlength=N_BINS)))


def global_entropy(hue) -> float:
    return float(_entropy_of_counts(np.bincount(hue_bins(hue).ravel(), minlength=N_BINS)))


def region_entropies(hue, seg: Segmentation) -> np.ndarray:
    """Per-label entropies, NaN for padded (empty) labels."""
    bins = hue_bins(hue)
    if bins.shape != seg.labels.shape:
        raise ValueError(f"grid mismatch: hue {bins.shape} vs segmentation {seg.labels.shape}")
    flat = seg.labels.ravel() * N_BINS + bins.ravel()
    hist = np.bincount(flat, minlength=seg.count * N_BINS).reshape(seg.count, N_BINS)
    ent = _entropy_of_counts(hist)
    ent[hist.sum(axis=1) == 0] = np.nan
    return ent


def mean_superpixel_entropy(hue, seg: Segmentation) -> float:
    """Size-weighted mean of region entropies; empty labels carry no weight."""
    ent = region_entropies(hue, seg)
    sizes = seg.region_sizes.astype(np.float64)
    keep = sizes > 0
    return float(np.sum(sizes[keep] * ent[keep]) / sizes[keep].sum())


def equivalent_window(seg_or_shape, n_nonempty: int | None = None) -> int:
    """Side of the square window whose area matches the mean superpixel."""
    if isinstance(seg_or_shape, Segmentation):
        h, w = seg_or_shape.labels.shape
        n_nonempty = seg_or_shape.nonempty
    else:
        h, w = seg_or_shape
    return int(round(math.sqrt(h * w / n_nonempty)))


def sliding_window_entropy(hue, T: int) -> float:
    """Mean entropy over all valid T x T windows at stride 1."""
    bins = hue_bins(hue)
    h, w = bins.shape
    if not 1 <= T <= min(h, w):
        raise ValueError(f"window size {T} outside [1, {min(h, w)}]")
    if T == 1:
        return 0.0
    nh, nw = h - T + 1, w - T + 1
    used = np.unique(bins)
    # integral image per occupied bin; windows are box sums
    total = np.zeros((nh, nw))
    for chunk in np.array_split(used, max(1, len(used) // 16)):
        onehot = (bins[None, :, :] == chunk[:, None, None]).astype(np.int32)
        integ = np.zeros((len(chunk), h + 1, w + 1), dtype=np.int32)
        integ[:, 1:, 1:] = onehot.cumsum(axis=1).cumsum(axis=2)
        counts = integ[:, T:, T:] - integ[:, :-T, T:] - integ[:, T:, :-T] + integ[:, :-T, :-T]
        p = counts / float(T * T)
        with np.errstate(divide="ignore", invalid="ignore"):
            total += np.where(p > 0, -p * np.log2(np.where(p > 0, p, 1.0)), 0.0).sum(axis=0)
    return float(total.mean())


def entropy_report(image: Image, seg: Segmentation, conv_grid: int = 8, hue: Image | None = None) -> EntropyReport:
    hue = hue if hue is not None else rgb_to_hue(image)
    h, w = seg.labels.shape
    sp = mean_superpixel_entropy(hue, seg)
    T = min(equivalent_window(seg), h, w)
    g = global_entropy(hue)
    return EntropyReport(
        S=seg.count,
        T=T,
        sp_entropy=sp,
        conv_entropy=sliding_window_entropy(hue, T),
        global_entropy=g,
        M=sp / g if g > 0 else 0.0,
        compression_input=seg.count / (h * w) * 100.0,
        compression_conv=seg.count / (conv_grid * conv_grid) * 100.0,
    )


def entropy_sweep(image: Image, counts, params: SlicParams | None = None) -> list[EntropyReport]:
    """Segment at each superpixel count and report superpixel vs window entropy."""
    params = params or SlicParams()
    hue = rgb_to_hue(image)
    reports = []
    for S in counts:
        p = SlicParams(int(S), params.compactness, params.sigma, params.iterations, params.seed_perturb)
        reports.append(entropy_report(image, segment(image, p), hue=hue))
    return reports


def loglog_slope(reports: list[EntropyReport]) -> float:
    """Least-squares slope of log M against log S (reports with M > 0 only)."""
    S = np.array([r.S for r in reports], dtype=np.float64)
    M = np.array([r.M for r in reports], dtype=np.float64)
    keep = M > 0
    return float(np.polyfit(np.log(S[keep]), np.log(M[keep]), 1)[0])


CSV_FIELDS = ["S", "T", "sp_entropy", "conv_entropy", "global_entropy", "M", "compression_input", "compression_conv"]


def reports_to_csv(reports: list[EntropyReport]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=CSV_FIELDS, lineterminator="\n")
    writer.writeheader()
    for r in reports:
        row = asdict(r)
        writer.writerow({k: (f"{v:.10g}" if isinstance(v, float) else v) for k, v in row.items()})
    return buf.getvalue()
