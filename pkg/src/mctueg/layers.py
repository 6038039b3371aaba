"""Small feed-forward layer family with hand-written reverse passes.

A :class:`Network` is a sequence of layers whose parameters live in named
segments of a :class:`~mctueg.diffcore.ParamVector`. ``forward`` records a tape
of per-layer caches; ``backward`` walks it in reverse and accumulates parameter
gradients into a flat buffer laid out like the parameter vector.
"""
from __future__ import annotations

import numpy as np

from .diffcore import ParamVector


class Dense:
    def __init__(self, n_in: int, n_out: int):
        self.n_in = int(n_in)
        self.n_out = int(n_out)

    def param_shapes(self):
        return [("W", (self.n_in, self.n_out)), ("b", (self.n_out,))]

    def init(self, rng: np.random.Generator, scale: float = 1.0):
        W = rng.standard_normal((self.n_in, self.n_out)) * (scale / np.sqrt(self.n_in))
        return {"W": W, "b": np.zeros(self.n_out)}

    def forward(self, p, x):
        return x @ p["W"] + p["b"], x

    def backward(self, p, x, dy, grads):
        if grads is not None:
            grads["W"] += x.T @ dy
            grads["b"] += dy.sum(axis=0)
        return dy @ p["W"].T


class Tanh:
    def param_shapes(self):
        return []

    def forward(self, p, x):
        y = np.tanh(x)
        return y, y

    def backward(self, p, y, dy, grads):
        return dy * (1.0 - y * y)


class ReLU:
    def param_shapes(self):
        return []

    def forward(self, p, x):
        mask = x > 0
        return x * mask, mask

    def backward(self, p, mask, dy, grads):
        return dy * mask


class Affine:
    """Fixed elementwise ``scale * (x + shift)``; no parameters."""

    def __init__(self, shift: float, scale: float):
        self.shift = float(shift)
        self.scale = float(scale)

    def param_shapes(self):
        return []

    def forward(self, p, x):
        return (x + self.shift) * self.scale, None

    def backward(self, p, cache, dy, grads):
        return dy * self.scale


class Conv2d:
    """Valid (unpadded) strided convolution on flattened channel-first images."""

    def __init__(self, in_shape: tuple[int, int, int], out_channels: int, kernel: int, stride: int = 1):
        self.c, self.h, self.w = (int(s) for s in in_shape)
        self.oc = int(out_channels)
        self.k = int(kernel)
        self.s = int(stride)
        self.ho = (self.h - self.k) // self.s + 1
        self.wo = (self.w - self.k) // self.s + 1
        if self.ho < 1 or self.wo < 1:
            raise ValueError("kernel larger than input")

    @property
    def out_shape(self):
        return (self.oc, self.ho, self.wo)

    @property
    def n_out(self):
        return self.oc * self.ho * self.wo

    def param_shapes(self):
        return [("W", (self.c * self.k * self.k, self.oc)), ("b", (self.oc,))]

    def init(self, rng: np.random.Generator, scale: float = 1.0):
        fan_in = self.c * self.k * self.k
        return {
            "W": rng.standard_normal((fan_in, self.oc)) * (scale / np.sqrt(fan_in)),
            "b": np.zeros(self.oc),
        }

    def _cols(self, x):
        n = x.shape[0]
        img = x.reshape(n, self.c, self.h, self.w)
        win = np.lib.stride_tricks.sliding_window_view(img, (self.k, self.k), axis=(2, 3))
        win = win[:, :, :: self.s, :: self.s][:, :, : self.ho, : self.wo]
        # (n, ho, wo, c, k, k) -> rows of patches
        return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(
            n * self.ho * self.wo, self.c * self.k * self.k
        )

    def forward(self, p, x):
        n = x.shape[0]
        cols = self._cols(x)
        y = cols @ p["W"] + p["b"]
        y = y.reshape(n, self.ho, self.wo, self.oc).transpose(0, 3, 1, 2).reshape(n, -1)
        return y, cols

    def backward(self, p, cols, dy, grads):
        n = dy.shape[0]
        dy2 = dy.reshape(n, self.oc, self.ho, self.wo).transpose(0, 2, 3, 1).reshape(-1, self.oc)
        if grads is not None:
            grads["W"] += cols.T @ dy2
            grads["b"] += dy2.sum(axis=0)
        dcols = (dy2 @ p["W"].T).reshape(n, self.ho, self.wo, self.c, self.k, self.k)
        dx = np.zeros((n, self.c, self.h, self.w))
        for i in range(self.k):
            for j in range(self.k):
                dx[:, :, i: i + self.s * self.ho: self.s, j: j + self.s * self.wo: self.s] += (
                    dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
                )
        return dx.reshape(n, -1)


class Network:
    def __init__(self, layers, prefix: str):
        self.layers = list(layers)
        self.prefix = prefix
        self._names = []
        for i, layer in enumerate(self.layers):
            self._names.append({k: f"{prefix}.{i}.{k}" for k, _ in layer.param_shapes()})

    def layout_entries(self):
        out = []
        for i, layer in enumerate(self.layers):
            for k, shape in layer.param_shapes():
                out.append((self._names[i][k], shape))
        return out

    def init_values(self, rng: np.random.Generator, scale: float = 1.0, last_scale: float | None = None):
        """Initial arrays in layout order. ``last_scale`` overrides the final layer."""
        vals = []
        param_layers = [i for i, l in enumerate(self.layers) if l.param_shapes()]
        for i, layer in enumerate(self.layers):
            if not layer.param_shapes():
                continue
            s = last_scale if (last_scale is not None and i == param_layers[-1]) else scale
            init = layer.init(rng, s)
            for k, _ in layer.param_shapes():
                vals.append(init[k].ravel())
        return np.concatenate(vals) if vals else np.zeros(0)

    def _params(self, params: ParamVector, i: int):
        return {k: params.view(name) for k, name in self._names[i].items()}

    def forward(self, params: ParamVector, x):
        tape = []
        for i, layer in enumerate(self.layers):
            x, cache = layer.forward(self._params(params, i), x)
            tape.append(cache)
        return x, tape

    def backward(self, params: ParamVector, tape, dout, grad_buf: np.ndarray | None):
        """Reverse pass returning the input gradient.

        Parameter gradients are accumulated into ``grad_buf`` (flat, same layout
        as ``params``); pass ``None`` to skip them.
        """
        for i in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[i]
            p = self._params(params, i)
            if grad_buf is None or not p:
                g = None
            else:
                g = {}
                for k, name in self._names[i].items():
                    seg = params.segment(name)
                    g[k] = grad_buf[seg.offset:seg.offset + seg.length].reshape(seg.shape)
            dout = layer.backward(p, tape[i], dout, g)
        return dout


def mlp(sizes, prefix: str, activation: str = "tanh", final_activation: bool = False) -> Network:
    act = {"tanh": Tanh, "relu": ReLU}[activation]
    layers = []
    for i in range(len(sizes) - 1):
        layers.append(Dense(sizes[i], sizes[i + 1]))
        if i < len(sizes) - 2 or final_activation:
            layers.append(act())
    return Network(layers, prefix)
