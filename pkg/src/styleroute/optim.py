"""First-order optimizers and parameter initialization helpers."""

from __future__ import annotations

import numpy as np

from .autograd import Tensor

__all__ = ["Adam", "AdaBelief", "uniform_fan_in", "make_optimizer"]


def uniform_fan_in(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) initialization."""
    bound = 1.0 / np.sqrt(max(fan_in, 1))
    return rng.uniform(-bound, bound, size=shape)


class Adam:
    """Standard Adam. Parameters with identically-zero gradient history stay put."""

    def __init__(self, params: list[Tensor], lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def _second_moment_update(self, i: int, g: np.ndarray) -> None:
        self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g

    def step(self) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for i, p in enumerate(self.params):
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g
            self._second_moment_update(i, g)
            m_hat = self.m[i] / bc1
            v_hat = self.v[i] / bc2
            p.data -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


class AdaBelief(Adam):
    """Adam variant tracking the variance of the gradient around its EMA."""

    def _second_moment_update(self, i: int, g: np.ndarray) -> None:
        diff = g - self.m[i]
        self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * diff * diff + self.eps


def make_optimizer(name: str, params: list[Tensor], lr: float) -> Adam:
    if name == "adam":
        return Adam(params, lr)
    if name == "adabelief":
        return AdaBelief(params, lr)
    raise ValueError(f"unknown optimizer: {name!r}")
