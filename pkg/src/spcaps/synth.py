"""Procedural images: value-noise textures, a 4-class shape dataset and scene images.

Every generator draws from a ``numpy.random.Generator`` passed in by the
caller, so a fixed seed reproduces images byte for byte.
"""
from __future__ import annotations

import math

import numpy as np
from scipy import ndimage

CLASS_NAMES = ("circle", "square_outline", "triangle", "dot_cluster")


def value_noise(rng: np.random.Generator, size: int, octaves: int = 4, base: int = 4, persistence: float = 0.5) -> np.ndarray:
    """Fractal value noise in [0, 1]: random lattices upsampled with cubic splines and summed."""
    out = np.zeros((size, size))
    amp, total = 1.0, 0.0
    cells = base
    for _ in range(octaves):
        lattice = rng.random((cells + 3, cells + 3))
        zoom = size / cells
        layer = ndimage.zoom(lattice, zoom, order=3, mode="nearest", grid_mode=True)
        off = int(round(zoom))
        out += amp * layer[off : off + size, off : off + size]
        total += amp
        amp *= persistence
        cells *= 2
    out /= total
    lo, hi = out.min(), out.max()
    return (out - lo) / (hi - lo) if hi > lo else np.zeros_like(out)


def hsv_to_rgb(h: np.ndarray, s: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Vectorized HSV -> RGB, all inputs in [0, 1]; returns float RGB in [0, 1]."""
    h = np.mod(h, 1.0) * 6.0
    i = np.floor(h).astype(int) % 6
    f = h - np.floor(h)
    p = v * (1 - s)
    q = v * (1 - s * f)
    t = v * (1 - s * (1 - f))
    choices = [
        (v, t, p),
        (q, v, p),
        (p, v, t),
        (p, q, v),
        (t, p, v),
        (v, p, q),
    ]
    rgb = np.zeros(h.shape + (3,))
    for k, (r, g, b) in enumerate(choices):
        sel = i == k
        rgb[sel, 0] = np.broadcast_to(r, h.shape)[sel]
        rgb[sel, 1] = np.broadcast_to(g, h.shape)[sel]
        rgb[sel, 2] = np.broadcast_to(b, h.shape)[sel]
    return rgb


def to_uint8(rgb: np.ndarray) -> np.ndarray:
    return np.clip(np.round(rgb * 255.0), 0, 255).astype(np.uint8)


def textured_background(rng: np.random.Generator, size: int) -> np.ndarray:
    """Muted two-tone value-noise texture, float RGB in [0, 1]."""
    n = value_noise(rng, size, octaves=4, base=max(2, size // 16))
    hue = rng.random()
    h = hue + 0.08 * (n - 0.5)
    s = np.full_like(n, 0.15 + 0.2 * rng.random())
    v = 0.3 + 0.35 * n
    return hsv_to_rgb(h, s, v)


# --------------------------------------------------------------------------
# shape masks (analytic, sampled at pixel centers)


def _grid(size: int):
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    return yy, xx


def circle_mask(size, cy, cx, r):
    yy, xx = _grid(size)
    return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r


def square_outline_mask(size, cy, cx, half, thick):
    yy, xx = _grid(size)
    outer = (np.abs(yy - cy) <= half) & (np.abs(xx - cx) <= half)
    inner = (np.abs(yy - cy) <= half - thick) & (np.abs(xx - cx) <= half - thick)
    return outer & ~inner


def triangle_mask(size, cy, cx, r, angle):
    yy, xx = _grid(size)
    pts = [(cy - r * math.cos(angle + k * 2 * math.pi / 3), cx + r * math.sin(angle + k * 2 * math.pi / 3)) for k in range(3)]
    crosses = []
    for k in range(3):
        (y0, x0), (y1, x1) = pts[k], pts[(k + 1) % 3]
        crosses.append((x1 - x0) * (yy - y0) - (y1 - y0) * (xx - x0))
    crosses = np.stack(crosses)
    # inside when on the same side of all three edges, whatever the winding
    return np.all(crosses <= 0, axis=0) | np.all(crosses >= 0, axis=0)


def dot_cluster_mask(size, cy, cx, spread, r):
    m = np.zeros((size, size), dtype=bool)
    for dy, dx in ((-1, -1), (-1, 1), (1, -1), (1, 1)):
        m |= circle_mask(size, cy + dy * spread, cx + dx * spread, r)
    return m


def shape_area(label: int, geom: dict) -> float:
    """Analytic area of a shape from its geometry parameters."""
    if label == 0:
        return math.pi * geom["r"] ** 2
    if label == 1:
        a, b = 2 * geom["half"], 2 * (geom["half"] - geom["thick"])
        return a * a - b * b
    if label == 2:
        return 3 * math.sqrt(3) / 4 * geom["r"] ** 2
    return 4 * math.pi * geom["r"] ** 2


def random_shape(rng: np.random.Generator, label: int, size: int) -> tuple[np.ndarray, dict]:
    """Foreground mask for one class with randomized position and scale."""
    scale = size / 64.0
    if label == 0:
        r = rng.uniform(10, 16) * scale
        cy, cx = rng.uniform(r + 2 * scale, size - r - 2 * scale, 2)
        geom = dict(cy=cy, cx=cx, r=r)
        return circle_mask(size, cy, cx, r), geom
    if label == 1:
        # whole-pixel geometry so the thin outline rasterizes exactly
        half = round(rng.uniform(12, 20) * scale)
        thick = max(1, round(rng.uniform(3, 5) * scale))
        cy, cx = np.round(rng.uniform(half + 2 * scale, size - half - 2 * scale, 2))
        geom = dict(cy=cy, cx=cx, half=half, thick=thick)
        return square_outline_mask(size, cy, cx, half, thick), geom
    if label == 2:
        r = rng.uniform(14, 22) * scale
        angle = rng.uniform(-0.4, 0.4)
        cy, cx = rng.uniform(r + 2 * scale, size - r - 2 * scale, 2)
        geom = dict(cy=cy, cx=cx, r=r, angle=angle)
        return triangle_mask(size, cy, cx, r, angle), geom
    if label == 3:
        spread = rng.uniform(7, 11) * scale
        r = rng.uniform(4, 6) * scale
        ext = spread + r + 2 * scale
        cy, cx = rng.uniform(ext, size - ext, 2)
        geom = dict(cy=cy, cx=cx, spread=spread, r=r)
        return dot_cluster_mask(size, cy, cx, spread, r), geom
    raise ValueError(f"unknown class {label}")


def shape_image(rng: np.random.Generator, label: int, size: int = 64) -> tuple[np.ndarray, np.ndarray, dict]:
    """Render one sample: (uint8 RGB image, boolean foreground mask, geometry)."""
    bg = textured_background(rng, size)
    mask, geom = random_shape(rng, label, size)
    fg_noise = value_noise(rng, size, octaves=2, base=4)
    hue = rng.random()
    fg = hsv_to_rgb(
        np.full((size, size), hue) + 0.03 * (fg_noise - 0.5),
        np.full((size, size), rng.uniform(0.6, 1.0)),
        rng.uniform(0.75, 1.0) - 0.15 * fg_noise,
    )
    rgb = np.where(mask[:, :, None], fg, bg)
    return to_uint8(rgb), mask, geom


def scene_image(rng: np.random.Generator, size: int = 256, n_regions: int = 4, n_objects: int = 5, texture: float = 0.06) -> np.ndarray:
    """Scene of a few large background regions plus wobbly foreground objects.

    Each region has one hue drawn from a 256-level palette; texture only
    modulates brightness, the way illumination varies across a real surface.
    """
    fields = np.stack([value_noise(rng, size, octaves=2, base=2) for _ in range(n_regions)])
    owner = np.argmax(fields, axis=0)
    yy, xx = _grid(size)
    scale = size / 256.0
    for k in range(n_objects):
        r = rng.uniform(12, 40) * scale
        cy, cx = rng.uniform(r, size - r, 2)
        ang = np.arctan2(yy - cy, xx - cx)
        ph = rng.uniform(0, 2 * np.pi, 2)
        rr = r * (1 + 0.2 * np.sin(3 * ang + ph[0]) + 0.1 * np.sin(5 * ang + ph[1]))
        owner[(yy - cy) ** 2 + (xx - cx) ** 2 <= rr**2] = n_regions + k
    n = n_regions + n_objects
    hues = (rng.integers(0, 256, n) + 0.5) / 256
    sats = rng.uniform(0.7, 0.95, n)
    vals = rng.uniform(0.7, 0.95, n)
    shade = value_noise(rng, size, octaves=4, base=4)
    v = vals[owner] * (1 - texture + texture * shade)
    return to_uint8(hsv_to_rgb(hues[owner], sats[owner], v))
