"""Small network building blocks on top of the tape."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Node, Tape

LOG_STD_MIN = -5.0
LOG_STD_MAX = 2.0


@dataclass(frozen=True)
class MLP:
    """Fully connected net; hidden layers use ``act``, the output layer is linear."""

    prefix: str
    sizes: tuple[int, ...]
    act: str = "tanh"

    def init(self, rng: np.random.Generator, out_scale: float = 1.0) -> dict[str, np.ndarray]:
        params = {}
        n_layers = len(self.sizes) - 1
        for k, (fan_in, fan_out) in enumerate(zip(self.sizes[:-1], self.sizes[1:])):
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            if k == n_layers - 1:
                bound *= out_scale
            params[f"{self.prefix}.W{k}"] = rng.uniform(-bound, bound, (fan_in, fan_out)).astype(np.float32)
            params[f"{self.prefix}.b{k}"] = np.zeros(fan_out, dtype=np.float32)
        return params

    def __call__(self, tape: Tape, x: Node) -> Node:
        n_layers = len(self.sizes) - 1
        for k in range(n_layers):
            x = tape.affine(x, tape.param(f"{self.prefix}.W{k}"), tape.param(f"{self.prefix}.b{k}"))
            if k < n_layers - 1:
                x = tape.tanh(x) if self.act == "tanh" else tape.relu(x)
        return x

    @property
    def n_params(self) -> int:
        return sum(a * b + b for a, b in zip(self.sizes[:-1], self.sizes[1:]))


def gaussian_head(tape: Tape, raw: Node, dim: int) -> tuple[Node, Node]:
    """Split a ``2*dim`` output into (mean, clamped log-std)."""
    mean = tape.slice(raw, 0, dim)
    log_std = tape.clip(tape.slice(raw, dim, 2 * dim), LOG_STD_MIN, LOG_STD_MAX)
    return mean, log_std


def reparam_sample(tape: Tape, mean: Node, log_std: Node, noise) -> Node:
    """mean + exp(log_std) * noise; returns the mean when ``noise`` is None."""
    if noise is None:
        return mean
    eps = tape.input(np.asarray(noise, dtype=mean.value.dtype))
    return tape.add(mean, tape.mul(tape.exp(log_std), eps))


def count_params(params: dict[str, np.ndarray], prefix: str = "") -> int:
    return int(sum(v.size for k, v in params.items() if k.startswith(prefix)))
