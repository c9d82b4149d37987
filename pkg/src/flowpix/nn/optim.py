from __future__ import annotations

from typing import Sequence

import numpy as np

from flowpix.nn.tensor import Parameter


class NonFiniteGradient(FloatingPointError):
    def __init__(self, name: str):
        super().__init__(f"non-finite gradient in parameter {name!r}")
        self.parameter = name


def _check(params: Sequence[Parameter]) -> None:
    for p in params:
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            raise NonFiniteGradient(p.name)


class Adam:
    """Adam with bias-corrected moments. Only trainable parameters are updated."""

    def __init__(self, params, lr: float = 1e-4, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        if lr < 0:
            raise ValueError("learning rate must be non-negative")
        self.params = [p for p in params if p.trainable]
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        _check(self.params)
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            if self.lr:
                p.data -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.data.dtype)


class SGD:
    def __init__(self, params, lr: float = 1e-4, momentum: float = 0.0):
        self.params = [p for p in params if p.trainable]
        self.lr, self.momentum = lr, momentum
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        _check(self.params)
        for p, vel in zip(self.params, self.velocity):
            if p.grad is None:
                continue
            vel *= self.momentum
            vel += p.grad
            if self.lr:
                p.data -= (self.lr * vel).astype(p.data.dtype)


def make_optimizer(name: str, params, lr: float):
    if name == "adam":
        return Adam(params, lr)
    if name == "sgd":
        return SGD(params, lr, momentum=0.9)
    raise ValueError(f"unknown optimizer {name!r}; expected 'adam' or 'sgd'")
