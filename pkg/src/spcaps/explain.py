"""Per-superpixel contributions to class capsules, rendered as heatmaps."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from .capsroute import CapsuleState
from .slic import Segmentation
from .sppool import unpool
from .tensorio import Image, Space

_EPS = 1e-12


@dataclass
class ContributionMap:
    z: np.ndarray  # (S, J)
    degenerate: np.ndarray  # (J,) True where |v_j| == 0


@dataclass
class Heatmap:
    image: Image
    flat: bool  # column was constant over unmasked rows


def contribution(state: CapsuleState, sample: int = 0) -> ContributionMap:
    """Scalar projection of every prediction u_hat_ij onto the class direction v_j."""
    u_hat = state.u_hat[sample]  # (S, J, k1)
    v = state.v[sample]  # (J, k1)
    norm = np.linalg.norm(v, axis=-1)
    degenerate = norm <= _EPS
    unit = np.divide(v, norm[:, None], out=np.zeros_like(v), where=~degenerate[:, None])
    z = np.einsum("sja,ja->sj", u_hat, unit)
    z = z * state.mask[sample][:, None]
    return ContributionMap(z, degenerate)


def weighted_contribution(state: CapsuleState, cmap: ContributionMap, sample: int = 0) -> np.ndarray:
    """sum_i c_ij z_ij per class; equals |s_j| whenever v_j is non-zero."""
    return np.sum(state.c[sample] * cmap.z, axis=0)


def normalize_column(col: np.ndarray, mask: np.ndarray) -> tuple[np.ndarray, bool]:
    """Min-max scale unmasked entries to [0, 255]; a constant column maps to 128."""
    vals = col[mask]
    if vals.size == 0:
        return np.full_like(col, 128.0, dtype=np.float64), True
    lo, hi = vals.min(), vals.max()
    if hi - lo <= _EPS * max(1.0, abs(hi)):
        return np.full(col.shape, 128.0), True
    return (col - lo) / (hi - lo) * 255.0, False


def render_contribution(z: np.ndarray, cls: int, seg: Segmentation, mask: np.ndarray | None = None) -> Heatmap:
    if not 0 <= cls < z.shape[1]:
        raise ValueError(f"class {cls} outside [0, {z.shape[1]})")
    mask = seg.mask if mask is None else np.asarray(mask, dtype=bool)
    scaled, flat = normalize_column(z[:, cls], mask)
    gray = np.clip(np.round(unpool(scaled, seg)), 0, 255).astype(np.uint8)
    return Heatmap(Image.gray(gray), flat)


def overlay(heat: Image, base: Image, alpha: float = 0.6) -> Image:
    """Blend a heatmap (red-yellow ramp) over an RGB image."""
    if base.space != Space.RGB8:
        raise ValueError("overlay needs an RGB8 base image")
    h = heat.data[:, :, 0].astype(np.float64) / 255.0
    ramp = np.stack([np.ones_like(h), h, np.zeros_like(h)], axis=-1) * 255.0
    out = alpha * ramp + (1 - alpha) * base.data.astype(np.float64)
    return Image.rgb(np.clip(np.round(out), 0, 255))


def contributions_csv(z: np.ndarray, mask: np.ndarray) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["superpixel", "valid"] + [f"class{j}" for j in range(z.shape[1])])
    for i in range(z.shape[0]):
        w.writerow([i, int(mask[i])] + [f"{x:.9g}" for x in z[i]])
    return buf.getvalue()
