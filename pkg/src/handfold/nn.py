"""Shared-weights MLP layers with named parameters."""
from __future__ import annotations

from typing import Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import RunningStats, Tensor


class Dense:
    """One point-wise layer: linear, optionally followed by batch norm + ReLU."""

    def __init__(self, name: str, cin: int, cout: int, rng: np.random.Generator, bn_relu: bool = True):
        bound = 1.0 / np.sqrt(cin)
        self.name = name
        self.W = Tensor(rng.uniform(-bound, bound, (cin, cout)), requires_grad=True, name=f"{name}.weight")
        self.b = Tensor(rng.uniform(-bound, bound, cout), requires_grad=True, name=f"{name}.bias")
        self.bn_relu = bn_relu
        if bn_relu:
            self.gamma = Tensor(np.ones(cout), requires_grad=True, name=f"{name}.bn.gamma")
            self.beta = Tensor(np.zeros(cout), requires_grad=True, name=f"{name}.bn.beta")
            self.stats = RunningStats.fresh(cout)

    @property
    def cin(self) -> int:
        return self.W.shape[0]

    @property
    def cout(self) -> int:
        return self.W.shape[1]

    def __call__(self, x: Tensor, training: bool = True) -> Tensor:
        if not self.bn_relu:
            return ad.linear(x, self.W, self.b)
        return ad.dense_bn_relu(x, self.W, self.b, self.gamma, self.beta, self.stats, training)

    def parameters(self) -> Iterator[Tensor]:
        yield self.W
        yield self.b
        if self.bn_relu:
            yield self.gamma
            yield self.beta

    def buffers(self) -> Iterator[tuple[str, RunningStats]]:
        if self.bn_relu:
            yield f"{self.name}.bn", self.stats


class SharedMLP:
    """Stack of :class:`Dense` layers; ``bare_last`` leaves the final layer without BN/ReLU."""

    def __init__(self, name: str, cin: int, channels, rng: np.random.Generator, bare_last: bool = False):
        self.layers = []
        for i, c in enumerate(channels):
            last = i == len(channels) - 1
            self.layers.append(Dense(f"{name}.{i}", cin, c, rng, bn_relu=not (bare_last and last)))
            cin = c

    def __call__(self, x: Tensor, training: bool = True) -> Tensor:
        for layer in self.layers:
            x = layer(x, training)
        return x

    def pooled(self, x: Tensor, training: bool = True, start: int = 0) -> tuple[Tensor, np.ndarray]:
        """Apply layers ``start:``, then max over axis -2 (fused with the last BN+ReLU layer)."""
        for layer in self.layers[start:-1]:
            x = layer(x, training)
        last = self.layers[-1]
        if not last.bn_relu:
            return ad.max_over_axis(last(x, training), axis=-2)
        return ad.dense_bn_relu_max(x, last.W, last.b, last.gamma, last.beta, last.stats, training)

    def parameters(self) -> Iterator[Tensor]:
        for layer in self.layers:
            yield from layer.parameters()

    def buffers(self) -> Iterator[tuple[str, RunningStats]]:
        for layer in self.layers:
            yield from layer.buffers()
