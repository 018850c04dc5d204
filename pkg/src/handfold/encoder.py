"""Hierarchical point-set encoder: two set-abstraction levels and a global level."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import kernels
from .autodiff import Tensor
from .nn import SharedMLP


@dataclass(frozen=True)
class SetAbstractionConfig:
    radius: float
    nsample: int
    npoint: int
    mlp: tuple[int, ...]

    def __post_init__(self):
        if self.radius <= 0 or self.nsample < 1 or self.npoint < 1:
            raise ValueError(f"invalid set-abstraction config {self}")


@dataclass
class LevelOutput:
    coords: np.ndarray  # B x N^l x 3, plain data
    features: Tensor  # B x N^l x C^l


def sample_centroids(n: int, count: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform random centroid indices, distinct unless ``n < count``."""
    if n < 1:
        raise ValueError("cannot sample centroids from an empty set")
    if n >= count:
        return rng.permutation(n)[:count]
    return rng.integers(0, n, count)


def ball_query(centroids: np.ndarray, points: np.ndarray, radius: float, nsample: int) -> np.ndarray:
    """K x S neighbour table of the first ``nsample`` points within ``radius`` in scan order.

    Short rows repeat their first hit; rows with no hit use the nearest point.
    """
    c = np.ascontiguousarray(centroids, dtype=np.float64)
    p = np.ascontiguousarray(points, dtype=np.float64)
    if radius <= 0:
        raise ValueError("ball_query radius must be positive")
    if len(p) == 0:
        raise ValueError("ball_query over an empty point set")
    return kernels.ball_query_kernel(c, p, float(radius) ** 2, int(nsample))


def _batch_flat(idx: np.ndarray, n: int) -> np.ndarray:
    # per-sample indices -> rows of the [B*n, C] flattened array
    offs = (np.arange(idx.shape[0]) * n).reshape((-1,) + (1,) * (idx.ndim - 1))
    return idx + offs


def group(coords: np.ndarray, feats: Tensor | None, centers: np.ndarray, nbr: np.ndarray):
    """Relative neighbour coordinates (numpy) and gathered neighbour features."""
    B, N, _ = coords.shape
    flat = _batch_flat(nbr, N)
    rel = coords.reshape(B * N, 3)[flat] - centers[:, :, None, :]
    gathered = None
    if feats is not None:
        gathered = ad.gather_rows(ad.reshape(feats, (B * N, feats.shape[-1])), flat)
    return rel, gathered


def set_abstraction(coords: np.ndarray, feats: Tensor, cfg: SetAbstractionConfig, mlp: SharedMLP,
                    rng: np.random.Generator, training: bool = True) -> LevelOutput:
    B, N, _ = coords.shape
    cidx = np.stack([sample_centroids(N, cfg.npoint, rng) for _ in range(B)])
    centers = np.take_along_axis(coords, cidx[:, :, None], axis=1)
    nbr = np.stack([ball_query(centers[b], coords[b], cfg.radius, cfg.nsample) for b in range(B)])
    rel, gathered = group(coords, feats, centers, nbr)
    x = ad.concat_last([Tensor(rel), gathered])
    pooled, _ = mlp.pooled(x, training)
    return LevelOutput(centers, pooled)


def global_feature(level: LevelOutput, mlp: SharedMLP, training: bool = True) -> Tensor:
    """Shared MLP over every row of the last level, then max over all rows -> B x C^g."""
    x = ad.concat_last([Tensor(level.coords), level.features])
    g, _ = mlp.pooled(x, training)
    return g


class Encoder:
    def __init__(self, sa1: SetAbstractionConfig, sa2: SetAbstractionConfig, global_mlp: tuple[int, ...],
                 rng: np.random.Generator, in_features: int = 3):
        self.cfg1, self.cfg2 = sa1, sa2
        self.mlp1 = SharedMLP("sa1", 3 + in_features, sa1.mlp, rng)
        self.mlp2 = SharedMLP("sa2", 3 + sa1.mlp[-1], sa2.mlp, rng)
        self.mlp3 = SharedMLP("sa3", 3 + sa2.mlp[-1], global_mlp, rng)

    def __call__(self, points: np.ndarray, normals: np.ndarray, rng: np.random.Generator,
                 training: bool = True) -> tuple[list[LevelOutput], Tensor]:
        level0 = LevelOutput(np.asarray(points, dtype=ad.get_dtype()), Tensor(normals))
        level1 = set_abstraction(level0.coords, level0.features, self.cfg1, self.mlp1, rng, training)
        level2 = set_abstraction(level1.coords, level1.features, self.cfg2, self.mlp2, rng, training)
        return [level0, level1, level2], global_feature(level2, self.mlp3, training)

    def mlps(self):
        return [self.mlp1, self.mlp2, self.mlp3]
