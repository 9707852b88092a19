"""Central finite-difference checks of the analytic gradients (64-bit)."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .backbone import BackboneConfig
from .data import Sample
from .model import Model, ModelConfig
from .tensorio import Image


@dataclass
class Probe:
    name: str
    index: tuple
    analytic: float
    numeric: float

    @property
    def rel_error(self) -> float:
        denom = max(abs(self.analytic), abs(self.numeric), 1e-8)
        return abs(self.analytic - self.numeric) / denom


def numeric_grad(f, x: np.ndarray, index: tuple, eps: float = 1e-6) -> float:
    """d f / d x[index] by central differences; ``x`` is modified in place and restored."""
    old = x[index]
    x[index] = old + eps
    fp = f()
    x[index] = old - eps
    fm = f()
    x[index] = old
    return (fp - fm) / (2 * eps)


def probe_array(name: str, f, x: np.ndarray, grad: np.ndarray, n: int, rng: np.random.Generator, eps: float = 1e-6) -> list[Probe]:
    """Compare ``grad`` with finite differences of scalar ``f()`` at ``n`` random entries of ``x``."""
    out = []
    for flat in rng.choice(x.size, size=min(n, x.size), replace=False):
        idx = np.unravel_index(int(flat), x.shape)
        out.append(Probe(name, tuple(int(i) for i in idx), float(grad[idx]), numeric_grad(f, x, idx, eps)))
    return out


def small_config(seed: int = 0) -> ModelConfig:
    """Tiny float64 model: 8x8 inputs, one conv stage without pooling (tile 1)."""
    return ModelConfig(
        S=6, Q=4, J=4, backbone=BackboneConfig(input_size=8, in_channels=3, stages=((1, 4, False),)),
        caps_init_scale=0.5, dtype="float64", seed=seed,
    )


def small_batch(seed: int = 0, n: int = 1, size: int = 8):
    rng = np.random.default_rng([seed, 7])
    samples = [Sample(Image.rgb(rng.integers(0, 256, (size, size, 3))), int(rng.integers(0, 4))) for _ in range(n)]
    return samples


def end_to_end(seed: int = 0, n_probes: int = 20, eps: float = 1e-6) -> list[Probe]:
    """Probe random parameters of the small pipeline against the total margin loss."""
    cfg = small_config(seed)
    model = Model(cfg)
    samples = small_batch(seed)
    pools = np.stack([model.pool_matrix(s.segmentation(cfg.slic)) for s in samples])
    images = np.stack([s.image.data for s in samples])
    labels = np.array([s.label for s in samples])
    _, _, grads = model.loss_and_grads(images, pools, labels)

    def f():
        fwd = model.forward(images, pools)
        return float(np.sum(model.loss(fwd, labels)[0]))

    rng = np.random.default_rng([seed, 11])
    params = model.params()
    names = sorted(params)
    total = sum(params[k].size for k in names)
    weights = np.array([params[k].size for k in names]) / total
    counts = np.bincount(rng.choice(len(names), size=n_probes, p=weights), minlength=len(names))
    probes = []
    for name, k in zip(names, counts):
        if k:
            probes += probe_array(name, f, params[name], grads[name], int(k), rng, eps)
    return probes
