"""Parameter containers: dense layers with optional batch norm and activation."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .errors import ConfigError
from .tensor import BatchNormStats, Rng, Tensor


def glorot(rng: Rng, shape, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, shape)


class Param:
    """Named trainable tensor; decay marks it for the L2 penalty."""

    __slots__ = ("name", "tensor", "decay")

    def __init__(self, name: str, tensor: Tensor, decay: bool):
        self.name = name
        self.tensor = tensor
        self.decay = decay


class Dense:
    """x @ W + b, then optional batch norm over the batch axis, then activation.

    Weight matrices carry the L2 penalty; biases and batch-norm scale/shift
    do not.  Running statistics live outside the parameter list and are
    serialized separately.
    """

    def __init__(self, name: str, d_in: int, d_out: int, rng: Rng,
                 activation: str | None = "tanh", use_bn: bool = True,
                 bn_decay: float = 0.99, bn_eps: float = 1e-5):
        if activation not in (None, "tanh", "sigmoid"):
            raise ConfigError(f"unsupported activation {activation!r}")
        self.name = name
        self.d_in = d_in
        self.d_out = d_out
        self.activation = activation
        self.use_bn = use_bn
        self.bn_decay = bn_decay
        self.bn_eps = bn_eps
        self.w = Tensor(glorot(rng, (d_in, d_out), d_in, d_out), requires_grad=True)
        self.b = T.zeros(d_out, requires_grad=True)
        if use_bn:
            self.gamma = T.ones(d_out, requires_grad=True)
            self.beta = T.zeros(d_out, requires_grad=True)
            self.stats = BatchNormStats(d_out)

    def __call__(self, x: Tensor, mode: str, update_stats: bool | None = None) -> Tensor:
        y = T.add_bias(T.matmul(x, self.w), self.b)
        if self.use_bn:
            y = T.batch_norm(y, self.gamma, self.beta, self.stats, mode,
                             decay=self.bn_decay, eps=self.bn_eps,
                             update_stats=update_stats)
        if self.activation == "tanh":
            y = T.tanh(y)
        elif self.activation == "sigmoid":
            y = T.sigmoid(y)
        return y

    def params(self) -> list[Param]:
        out = [Param(f"{self.name}.w", self.w, True),
               Param(f"{self.name}.b", self.b, False)]
        if self.use_bn:
            out.append(Param(f"{self.name}.gamma", self.gamma, False))
            out.append(Param(f"{self.name}.beta", self.beta, False))
        return out

    def state_arrays(self) -> list[tuple[str, np.ndarray]]:
        if not self.use_bn:
            return []
        return [(f"{self.name}.running_mean", self.stats.mean),
                (f"{self.name}.running_var", self.stats.var)]

    def load_state(self, name: str, value: np.ndarray):
        if name.endswith(".running_mean"):
            self.stats.mean = value.astype(np.float64).copy()
        elif name.endswith(".running_var"):
            self.stats.var = value.astype(np.float64).copy()
        else:
            raise ConfigError(f"unknown state entry {name!r}")
