"""Superpixel pooling of a coarse feature grid.

A feature cell at ``(r, c)`` covers the ``t x t`` pixel tile starting at
``(r*t, c*t)``.  Each superpixel's feature is the mean over its pixels of the
tile-upscaled map, which reduces to a weighted sum over cells with weights
``|R_j & tile_i| / |R_j|``.  Those weights form a fixed ``S x (h*w)`` matrix,
so forward is one matmul and backward is its transpose.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .slic import Segmentation
from .tensorio import Image


@dataclass(frozen=True)
class TileAssociation:
    tile: int
    feat_h: int
    feat_w: int
    img_h: int
    img_w: int


@dataclass
class SpFeatures:
    values: np.ndarray  # (S, k)
    mask: np.ndarray  # (S,) bool
    seg: Segmentation | None = None


def tile_map(feature_res: tuple[int, int], image_res: tuple[int, int]) -> TileAssociation:
    h, w = feature_res
    H, W = image_res
    if h <= 0 or w <= 0 or H % h or W % w or H // h != W // w:
        raise ValueError(f"image {H}x{W} is not an isotropic integer multiple of features {h}x{w}")
    return TileAssociation(H // h, h, w, H, W)


def cell_index(seg: Segmentation, assoc: TileAssociation) -> np.ndarray:
    """Feature-cell index of every pixel, shape (H, W)."""
    if seg.labels.shape != (assoc.img_h, assoc.img_w):
        raise ValueError(f"grid mismatch: segmentation {seg.labels.shape} vs association {(assoc.img_h, assoc.img_w)}")
    rows = np.arange(assoc.img_h) // assoc.tile
    cols = np.arange(assoc.img_w) // assoc.tile
    return rows[:, None] * assoc.feat_w + cols[None, :]


def overlap_counts(seg: Segmentation, assoc: TileAssociation) -> np.ndarray:
    """``|R_j & V_i|`` for every superpixel j and feature cell i, shape (S, h*w)."""
    ncell = assoc.feat_h * assoc.feat_w
    key = seg.labels.ravel() * ncell + cell_index(seg, assoc).ravel()
    return np.bincount(key, minlength=seg.count * ncell).reshape(seg.count, ncell)


def pooling_matrix(seg: Segmentation, assoc: TileAssociation, dtype=np.float64) -> np.ndarray:
    """Row-normalized overlap weights; rows of empty superpixels are zero."""
    counts = overlap_counts(seg, assoc).astype(dtype)
    sizes = counts.sum(axis=1, keepdims=True)
    return np.divide(counts, sizes, out=np.zeros_like(counts), where=sizes > 0)


def _flat_features(features: np.ndarray, assoc: TileAssociation) -> np.ndarray:
    if features.ndim != 3 or features.shape[:2] != (assoc.feat_h, assoc.feat_w):
        raise ValueError(f"feature map {features.shape} does not match {assoc.feat_h}x{assoc.feat_w}xk")
    return features.reshape(assoc.feat_h * assoc.feat_w, -1)


def pool_forward(features: np.ndarray, seg: Segmentation, assoc: TileAssociation) -> SpFeatures:
    """Pool an ``(h, w, k)`` feature map into ``(S, k)`` superpixel features."""
    x = _flat_features(np.asarray(features), assoc)
    A = pooling_matrix(seg, assoc, dtype=np.result_type(x.dtype, np.float32))
    return SpFeatures(A @ x, seg.mask, seg)


def pool_backward(grad_out: np.ndarray, seg: Segmentation, assoc: TileAssociation) -> np.ndarray:
    """Adjoint of :func:`pool_forward`: ``(S, k)`` gradient to ``(h, w, k)``."""
    grad_out = np.asarray(grad_out)
    if grad_out.ndim != 2 or grad_out.shape[0] != seg.count:
        raise ValueError(f"gradient shape {grad_out.shape} does not match S={seg.count}")
    A = pooling_matrix(seg, assoc, dtype=np.result_type(grad_out.dtype, np.float32))
    return (A.T @ grad_out).reshape(assoc.feat_h, assoc.feat_w, -1)


def upscale(features: np.ndarray, tile: int) -> np.ndarray:
    """Nearest tile replication of an ``(h, w, k)`` map; pixel p reads cell (p // t)."""
    return np.repeat(np.repeat(features, tile, axis=0), tile, axis=1)


def unpool(values, seg: Segmentation) -> np.ndarray:
    """Paint per-superpixel values back onto the label map."""
    values = np.asarray(values)
    if values.shape[0] != seg.count:
        raise ValueError(f"expected {seg.count} values, got {values.shape[0]}")
    return values[seg.labels]


def unpool_image(values, seg: Segmentation) -> Image:
    """:func:`unpool` rounded into a GRAY image."""
    return Image.gray(np.clip(np.round(unpool(values, seg)), 0, 255))
