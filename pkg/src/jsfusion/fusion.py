"""Pairwise fusion of the two modalities into a gated joint grid.

Every (frame, word) pair is fused by the elementwise product of the two
projected vectors.  Each cell then produces a scalar gate through a
bottleneck layer and a sigmoid, and a dense representation through two
stacked layers; the cell's final value is the representation scaled by
its gate.  With gating disabled the representation passes through
unchanged, which is the matching ablation.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .layers import Dense, Param, glorot
from .tensor import Rng, Tensor


class JointFusion:
    def __init__(self, d1: int, d2: int, d3: int, d4: int, rng: Rng,
                 gating: bool = True, bn_decay: float = 0.99, bn_eps: float = 1e-5):
        self.d1, self.d4 = d1, d4
        self.gating = gating
        self.att_dense = Dense("fusion.att", d1, d2, rng.spawn(1),
                               activation="tanh", use_bn=True,
                               bn_decay=bn_decay, bn_eps=bn_eps)
        self.att_w = Tensor(glorot(rng.spawn(2), (d2, 1), d2, 1), requires_grad=True)
        self.att_b = T.zeros(1, requires_grad=True)
        self.rep1 = Dense("fusion.rep1", d1, d3, rng.spawn(3), activation="tanh",
                          use_bn=True, bn_decay=bn_decay, bn_eps=bn_eps)
        self.rep2 = Dense("fusion.rep2", d3, d4, rng.spawn(4), activation="tanh",
                          use_bn=True, bn_decay=bn_decay, bn_eps=bn_eps)

    def pairwise_fuse(self, video_proj: Tensor, word_proj: Tensor) -> Tensor:
        """(B, N, d1) x (B, M, d1) -> (B, N, M, d1) elementwise products."""
        bsz, n, _ = video_proj.shape
        m = word_proj.shape[1]
        v = T.tile_new_axis(video_proj, 2, m)   # (B, N, M, d1)
        w = T.tile_new_axis(word_proj, 1, n)    # (B, N, M, d1)
        return T.hadamard(v, w)

    def attention_weights(self, fused_flat: Tensor, mode: str) -> Tensor:
        """Per-cell scalar gate in (0, 1): sigmoid of a linear read of the bottleneck."""
        h = self.att_dense(fused_flat, mode)
        return T.sigmoid(T.add_bias(T.matmul(h, self.att_w), self.att_b))

    def joint_representation(self, fused_flat: Tensor, mode: str) -> Tensor:
        """Per-cell dense representation (cells, d4) through two stacked layers."""
        return self.rep2(self.rep1(fused_flat, mode), mode)

    def forward(self, video_proj: Tensor, word_proj: Tensor, mode: str,
                maps: dict | None = None) -> Tensor:
        """Fused gated grid (B, N, M, d4)."""
        bsz, n, _ = video_proj.shape
        m = word_proj.shape[1]
        fused = self.pairwise_fuse(video_proj, word_proj)
        flat = T.reshape(fused, (bsz * n * m, self.d1))
        grid = T.reshape(self.joint_representation(flat, mode), (bsz, n, m, self.d4))
        if not self.gating:
            if maps is not None:
                maps["attention"] = np.ones((bsz, n, m))
            return grid
        alpha = T.reshape(self.attention_weights(flat, mode), (bsz, n, m))
        if maps is not None:
            maps["attention"] = alpha.data.copy()
        return T.hadamard(grid, T.tile_new_axis(alpha, 3, self.d4))

    def params(self) -> list[Param]:
        out = self.rep1.params() + self.rep2.params()
        if self.gating:
            out = (self.att_dense.params()
                   + [Param("fusion.att.read_w", self.att_w, True),
                      Param("fusion.att.read_b", self.att_b, False)]
                   + out)
        return out

    def state_arrays(self):
        out = self.rep1.state_arrays() + self.rep2.state_arrays()
        if self.gating:
            out = self.att_dense.state_arrays() + out
        return out

    def load_state(self, name: str, value: np.ndarray):
        for dense in (self.att_dense, self.rep1, self.rep2):
            if name.startswith(dense.name + "."):
                dense.load_state(name, value)
                return
        raise KeyError(name)
