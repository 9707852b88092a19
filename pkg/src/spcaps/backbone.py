"""Small trainable conv net producing the coarse feature grid.

Arrays are NHWC throughout.  Kernels are stored ``(k_out, k_in, 3, 3)``.
Each layer caches what its backward pass needs on the instance, so a layer
object serves one forward/backward pair at a time.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class Conv3x3:
    """3x3 same-padding cross-correlation, bias, then ReLU."""

    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator | None = None, dtype=np.float32):
        self.c_in, self.c_out = c_in, c_out
        if rng is None:
            self.W = np.zeros((c_out, c_in, 3, 3), dtype=dtype)
        else:
            bound = np.sqrt(6.0 / (c_in * 9))
            self.W = rng.uniform(-bound, bound, size=(c_out, c_in, 3, 3)).astype(dtype)
        self.b = np.zeros(c_out, dtype=dtype)
        self._cache = None

    def _wmat(self) -> np.ndarray:
        # rows ordered (dy, dx, c_in) to match the column layout
        return self.W.transpose(2, 3, 1, 0).reshape(9 * self.c_in, self.c_out)

    def forward(self, x: np.ndarray) -> np.ndarray:
        if x.ndim != 4 or x.shape[3] != self.c_in:
            raise ValueError(f"expected (N, H, W, {self.c_in}) input, got {x.shape}")
        n, h, w, c = x.shape
        xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
        cols = np.empty((n, h, w, 3, 3, c), dtype=np.result_type(x.dtype, self.W.dtype))
        for dy in range(3):
            for dx in range(3):
                cols[:, :, :, dy, dx, :] = xp[:, dy : dy + h, dx : dx + w, :]
        cols = cols.reshape(n * h * w, 9 * c)
        z = cols @ self._wmat() + self.b
        out = np.maximum(z, 0).reshape(n, h, w, self.c_out)
        self._cache = (x.shape, cols, z > 0)
        return out

    def backward(self, grad_out: np.ndarray):
        """Returns ``(grad_input, grad_W, grad_b)``."""
        shape, cols, active = self._cache
        n, h, w, c = shape
        if grad_out.shape != (n, h, w, self.c_out):
            raise ValueError(f"gradient shape {grad_out.shape} does not match output {(n, h, w, self.c_out)}")
        gz = grad_out.reshape(-1, self.c_out) * active
        gb = gz.sum(axis=0)
        gW = (cols.T @ gz).reshape(3, 3, c, self.c_out).transpose(3, 2, 0, 1)
        gcols = (gz @ self._wmat().T).reshape(n, h, w, 3, 3, c)
        gxp = np.zeros((n, h + 2, w + 2, c), dtype=gcols.dtype)
        for dy in range(3):
            for dx in range(3):
                gxp[:, dy : dy + h, dx : dx + w, :] += gcols[:, :, :, dy, dx, :]
        return gxp[:, 1:-1, 1:-1, :], gW, gb


class MaxPool2:
    """2x2 max pooling, stride 2.  Ties route to the first position in scan order."""

    def __init__(self):
        self._cache = None

    def forward(self, x: np.ndarray):
        n, h, w, c = x.shape
        if h % 2 or w % 2:
            raise ValueError(f"max pool needs even spatial dims, got {h}x{w}")
        win = x.reshape(n, h // 2, 2, w // 2, 2, c).transpose(0, 1, 3, 5, 2, 4).reshape(n, h // 2, w // 2, c, 4)
        arg = win.argmax(axis=-1)
        out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
        self._cache = (x.shape, arg)
        return out, arg

    def backward(self, grad_out: np.ndarray, arg: np.ndarray | None = None, shape=None) -> np.ndarray:
        if arg is None:
            shape, arg = self._cache
        n, h, w, c = shape
        onehot = np.zeros(arg.shape + (4,), dtype=grad_out.dtype)
        np.put_along_axis(onehot, arg[..., None], grad_out[..., None], axis=-1)
        return onehot.reshape(n, h // 2, w // 2, c, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(n, h, w, c)


@dataclass(frozen=True)
class BackboneConfig:
    """Stages of 3x3 conv layers, each stage optionally followed by 2x2 max pooling.

    Stage entries are ``(n_conv, channels)`` or ``(n_conv, channels, pool)``.
    """

    input_size: int = 64
    in_channels: int = 3
    stages: tuple = ((1, 16), (1, 32), (2, 64))

    def __post_init__(self):
        norm = []
        for st in self.stages:
            st = tuple(st)
            norm.append(st if len(st) == 3 else (st[0], st[1], True))
        object.__setattr__(self, "stages", tuple(norm))
        if self.input_size % (2 ** self.n_pools):
            raise ValueError("input size must be divisible by 2 per pooling stage")

    @property
    def n_pools(self) -> int:
        return sum(1 for st in self.stages if st[2])

    @property
    def feature_size(self) -> int:
        return self.input_size // 2**self.n_pools

    @property
    def out_channels(self) -> int:
        return self.stages[-1][1] if self.stages else self.in_channels

    def layer_shapes(self) -> list[tuple[int, int]]:
        shapes, c = [], self.in_channels
        for n_conv, ch, _ in self.stages:
            for _ in range(n_conv):
                shapes.append((c, ch))
                c = ch
        return shapes

    def param_count(self) -> int:
        return sum(ci * co * 9 + co for ci, co in self.layer_shapes())


class Backbone:
    def __init__(self, config: BackboneConfig = BackboneConfig(), rng: np.random.Generator | None = None, dtype=np.float32):
        self.config = config
        self.dtype = dtype
        self.layers: list = []
        self.conv_names: list[str] = []
        c = config.in_channels
        for si, (n_conv, ch, pool) in enumerate(config.stages):
            for ci in range(n_conv):
                self.layers.append(Conv3x3(c, ch, rng, dtype))
                self.conv_names.append(f"conv{si}_{ci}")
                c = ch
            if pool:
                self.layers.append(MaxPool2())

    def convs(self):
        return [l for l in self.layers if isinstance(l, Conv3x3)]

    def params(self) -> dict[str, np.ndarray]:
        out = {}
        for name, conv in zip(self.conv_names, self.convs()):
            out[f"{name}.W"] = conv.W
            out[f"{name}.b"] = conv.b
        return out

    def load_params(self, params: dict[str, np.ndarray]) -> None:
        for name, conv in zip(self.conv_names, self.convs()):
            conv.W = np.asarray(params[f"{name}.W"], dtype=self.dtype).reshape(conv.W.shape).copy()
            conv.b = np.asarray(params[f"{name}.b"], dtype=self.dtype).reshape(conv.b.shape).copy()

    def forward(self, images: np.ndarray) -> np.ndarray:
        """``(N, H, W, C)`` inputs in [0, 1] to ``(N, h, w, k)`` features."""
        x = np.asarray(images, dtype=self.dtype)
        if x.ndim == 3:
            x = x[None]
        s = self.config.input_size
        if x.shape[1:] != (s, s, self.config.in_channels):
            raise ValueError(f"expected input {(s, s, self.config.in_channels)}, got {x.shape[1:]}")
        for layer in self.layers:
            x = layer.forward(x)
            if isinstance(layer, MaxPool2):
                x = x[0]
        return x

    def backward(self, grad: np.ndarray) -> dict[str, np.ndarray]:
        grads = {}
        names = iter(reversed(self.conv_names))
        g = grad
        for layer in reversed(self.layers):
            if isinstance(layer, MaxPool2):
                g = layer.backward(g)
            else:
                name = next(names)
                g, gW, gb = layer.backward(g)
                grads[f"{name}.W"] = gW
                grads[f"{name}.b"] = gb
        return grads
