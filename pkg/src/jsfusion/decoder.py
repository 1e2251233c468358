"""Convolutional reduction of the fused grid down to a score vector.

Three convolution stages shrink the grid; each stage multiplies its
feature maps by a one-channel sigmoid gate computed from the same input
(no other nonlinearity on the feature path).  A full-extent mean pool
collapses the final grid to one vector per item, and a three-layer tanh
head plus an affine output layer produce the score(s).
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .errors import ShapeError
from .layers import Dense, Param, glorot
from .tensor import Rng, Tensor


class ConvStage:
    """One convolution with an optional one-channel multiplicative gate."""

    def __init__(self, name: str, kernel: int, c_in: int, c_out: int, stride: int,
                 rng: Rng, gated: bool = True):
        self.name = name
        self.stride = stride
        self.gated = gated
        fan = kernel * kernel * c_in
        self.kernels = Tensor(glorot(rng.spawn(1), (kernel, kernel, c_in, c_out), fan, c_out),
                              requires_grad=True)
        self.bias = T.zeros(c_out, requires_grad=True)
        self.c_out = c_out
        if gated:
            self.gate_kernels = Tensor(glorot(rng.spawn(2), (kernel, kernel, c_in, 1), fan, 1),
                                       requires_grad=True)
            self.gate_bias = T.zeros(1, requires_grad=True)

    def __call__(self, x: Tensor, maps: dict | None = None) -> Tensor:
        out = T.conv2d(x, self.kernels, self.stride, self.bias)
        if not self.gated:
            return out
        gate_map = T.conv2d(x, self.gate_kernels, self.stride, self.gate_bias)
        bsz, h, w, _ = gate_map.shape
        gate = T.sigmoid(T.reshape(gate_map, (bsz, h, w)))
        if maps is not None:
            maps[f"{self.name}.gate"] = gate.data.copy()
        return T.hadamard(out, T.tile_new_axis(gate, 3, self.c_out))

    def params(self) -> list[Param]:
        out = [Param(f"{self.name}.k", self.kernels, True),
               Param(f"{self.name}.b", self.bias, False)]
        if self.gated:
            out += [Param(f"{self.name}.gate_k", self.gate_kernels, True),
                    Param(f"{self.name}.gate_b", self.gate_bias, False)]
        return out


class HierarchicalDecoder:
    def __init__(self, d_in: int, conv_channels, conv_kernel: int, conv_strides,
                 head_dims, output_dim: int, rng: Rng, gating: bool = True,
                 bn_decay: float = 0.99, bn_eps: float = 1e-5):
        chans = [d_in] + list(conv_channels)
        self.stages = [
            ConvStage(f"decoder.conv{i + 1}", conv_kernel, chans[i], chans[i + 1],
                      conv_strides[i], rng.spawn(10 + i), gated=gating)
            for i in range(3)
        ]
        h1, h2, h3 = head_dims
        self.head1 = Dense("decoder.head1", conv_channels[2], h1, rng.spawn(20),
                           activation="tanh", use_bn=True, bn_decay=bn_decay, bn_eps=bn_eps)
        self.head2 = Dense("decoder.head2", h1, h2, rng.spawn(21),
                           activation="tanh", use_bn=True, bn_decay=bn_decay, bn_eps=bn_eps)
        self.head3 = Dense("decoder.head3", h2, h3, rng.spawn(22),
                           activation="tanh", use_bn=True, bn_decay=bn_decay, bn_eps=bn_eps)
        self.out = Dense("decoder.out", h3, output_dim, rng.spawn(23),
                         activation=None, use_bn=False)

    def decode(self, grid: Tensor, maps: dict | None = None) -> Tensor:
        """Reduce (B, N, M, C) to pooled features (B, C3) via the conv stages."""
        x = grid
        for stage in self.stages:
            x = stage(x, maps=maps)
        bsz, h, w, c = x.shape
        if h != w:
            raise ShapeError(f"decoder expects a square grid before pooling, got {h}x{w}")
        pooled = T.mean_pool(x, h)
        return T.reshape(pooled, (bsz, c))

    def head_features(self, pooled: Tensor, mode: str, dropout_rate: float = 0.0,
                      dropout_rng=None) -> Tensor:
        """Three tanh dense layers; dropout (when configured) on each layer's input."""
        x = pooled
        for dense in (self.head1, self.head2, self.head3):
            x = T.dropout(x, dropout_rate, mode, dropout_rng)
            x = dense(x, mode)
        return x

    def output(self, features: Tensor) -> Tensor:
        """Affine output layer; unbounded."""
        return self.out(features, mode=T.INFER)

    def params(self) -> list[Param]:
        out = []
        for stage in self.stages:
            out += stage.params()
        for dense in (self.head1, self.head2, self.head3, self.out):
            out += dense.params()
        return out

    def state_arrays(self):
        out = []
        for dense in (self.head1, self.head2, self.head3):
            out += dense.state_arrays()
        return out

    def load_state(self, name: str, value: np.ndarray):
        for dense in (self.head1, self.head2, self.head3):
            if name.startswith(dense.name + "."):
                dense.load_state(name, value)
                return
        raise KeyError(name)
