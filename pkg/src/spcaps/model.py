"""The superpixel capsule network: backbone -> superpixel pooling -> routing."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import capsroute
from .backbone import Backbone, BackboneConfig
from .capsroute import CapsuleState
from .slic import Segmentation, SlicParams, segment
from .sppool import pooling_matrix, tile_map
from .tensorio import Image, read_tensors, write_tensors

# schedule used for directory datasets, sized for a pretrained backbone
INGEST_LR = 2e-5
INGEST_EPOCHS = 120


@dataclass(frozen=True)
class ParamCount:
    backbone: int
    capsules: int

    @property
    def total(self) -> int:
        return self.backbone + self.capsules


@dataclass(frozen=True)
class ModelConfig:
    S: int = 36
    Q: int = 16
    J: int = 4
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    compactness: float = 0.1
    sigma: float = 0.0
    slic_iterations: int = 10
    seed_perturb: bool = True
    routing_iters: int = 3
    m_plus: float = 0.9
    m_minus: float = 0.1
    lam: float = 0.5
    lr: float = 0.05
    epochs: int = 40
    batch_size: int = 1
    seed: int = 0
    caps_init_scale: float = 0.01
    dtype: str = "float32"

    def __post_init__(self):
        if isinstance(self.backbone, dict):
            object.__setattr__(self, "backbone", BackboneConfig(**self.backbone))
        if self.S < 1 or self.Q < 1 or self.J < 2:
            raise ValueError("need S >= 1, Q >= 1, J >= 2")
        if self.lr < 0:
            raise ValueError("learning rate must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    @property
    def slic(self) -> SlicParams:
        return SlicParams(self.S, self.compactness, self.sigma, self.slic_iterations, self.seed_perturb)

    @property
    def k0(self) -> int:
        return self.backbone.out_channels

    @property
    def np_dtype(self):
        return np.dtype(self.dtype).type

    def to_dict(self) -> dict:
        d = asdict(self)
        d["backbone"]["stages"] = [list(s) for s in self.backbone.stages]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config fields: {sorted(unknown)}")
        d = dict(d)
        if "backbone" in d and isinstance(d["backbone"], dict):
            d["backbone"] = BackboneConfig(**d["backbone"])
        return cls(**d)

    def replace(self, **kw) -> "ModelConfig":
        return replace(self, **kw)


def param_count(config: ModelConfig) -> ParamCount:
    return ParamCount(
        backbone=config.backbone.param_count(),
        capsules=capsroute.param_count(config.S, config.J, config.k0, config.Q),
    )


@dataclass
class Forward:
    state: CapsuleState
    probs: np.ndarray  # (N, J)
    features: np.ndarray  # (N, h, w, k)
    pool: np.ndarray  # (N, S, h*w)


class Model:
    def __init__(self, config: ModelConfig, rng: np.random.Generator | None = None):
        self.config = config
        rng = rng if rng is not None else np.random.default_rng(config.seed)
        dt = config.np_dtype
        self.backbone = Backbone(config.backbone, rng, dt)
        self.W = capsroute.init_weights(config.S, config.J, config.k0, config.Q, rng, config.caps_init_scale, dt)
        fs = config.backbone.feature_size
        self.assoc = tile_map((fs, fs), (config.backbone.input_size, config.backbone.input_size))

    # parameters ------------------------------------------------------------

    def params(self) -> dict[str, np.ndarray]:
        out = dict(self.backbone.params())
        out["caps.W"] = self.W
        return out

    def load_params(self, params: dict[str, np.ndarray]) -> None:
        self.backbone.load_params(params)
        self.W = np.asarray(params["caps.W"], dtype=self.config.np_dtype).reshape(self.W.shape).copy()

    def set_param(self, name: str, value: np.ndarray) -> None:
        params = self.params()
        params[name] = value
        self.load_params(params)

    # inference -------------------------------------------------------------

    def segment(self, image: Image) -> Segmentation:
        return segment(image, self.config.slic)

    def pool_matrix(self, seg: Segmentation) -> np.ndarray:
        return pooling_matrix(seg, self.assoc, dtype=self.config.np_dtype)

    def forward(self, images: np.ndarray, pools: np.ndarray) -> Forward:
        """Run a batch.  ``images`` are uint8 or float ``(N, H, W, 3)``; ``pools`` ``(N, S, h*w)``."""
        images = np.asarray(images)
        if images.ndim == 3:
            images = images[None]
            pools = np.asarray(pools)[None]
        x = images.astype(self.config.np_dtype)
        if images.dtype == np.uint8:
            x = x / self.config.np_dtype(255.0)
        feats = self.backbone.forward(x)
        n, h, w, k = feats.shape
        u = np.einsum("nsc,nck->nsk", pools, feats.reshape(n, h * w, k), optimize=True)
        mask = pools.sum(axis=2) > 0
        state = capsroute.capsule_forward(u, self.W, mask, self.config.routing_iters)
        return Forward(state, capsroute.class_probability(state.v), feats, pools)

    def loss(self, fwd: Forward, targets) -> tuple[np.ndarray, np.ndarray]:
        c = self.config
        return capsroute.margin_loss(fwd.state.v, np.asarray(targets), c.m_plus, c.m_minus, c.lam)

    def backward(self, fwd: Forward, grad_v: np.ndarray) -> dict[str, np.ndarray]:
        _, g_u, g_W = capsroute.routing_backward(fwd.state, grad_v, self.W)
        n, h, w, k = fwd.features.shape
        g_feat = np.einsum("nsc,nsk->nck", fwd.pool, g_u, optimize=True).reshape(n, h, w, k)
        grads = self.backbone.backward(g_feat)
        grads["caps.W"] = g_W
        return grads

    def loss_and_grads(self, images, pools, targets):
        fwd = self.forward(images, pools)
        loss, gv = self.loss(fwd, targets)
        grads = self.backward(fwd, gv)
        return fwd, loss, grads

    def sgd_step(self, grads: dict[str, np.ndarray], lr: float, scale: float = 1.0) -> None:
        if lr == 0:
            return
        for name, p in self.params().items():
            p -= (lr * scale) * grads[name].astype(p.dtype)

    # persistence -----------------------------------------------------------

    def save(self, path, **meta) -> None:
        """Write weights to ``path`` (SPCT records) and a JSON manifest beside it."""
        path = Path(path)
        offsets = write_tensors(self.params(), path)
        manifest = {"config": self.config.to_dict(), "tensors": offsets, **meta}
        manifest_path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "Model":
        path = Path(path)
        manifest = json.loads(manifest_path(path).read_text())
        model = cls(ModelConfig.from_dict(manifest["config"]))
        model.load_params(read_tensors(path, manifest["tensors"]))
        model.manifest = manifest
        return model


def manifest_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")
