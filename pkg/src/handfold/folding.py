"""Skeleton-folding decoders and the assembled network.

The global fold turns the 2D skeleton plus the global feature into initial
joints and per-joint folding embeddings. Each local fold groups level
features around the current joints, appends the neighbour-joint embeddings
and predicts a residual correction.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import RunningStats, Tensor
from .encoder import Encoder, LevelOutput, SetAbstractionConfig, _batch_flat, ball_query, group
from .nn import Dense, SharedMLP
from .skeleton import AdjacencyMap, SkeletonPrior

LOCAL_LEVELS = {"input": 0, "0": 0, "1": 1, "2": 2}


@dataclass
class ModelConfig:
    num_joints: int = 16
    num_local_folds: int = 2
    n_points: int = 1024
    in_features: int = 3
    sa1: SetAbstractionConfig = field(default_factory=lambda: SetAbstractionConfig(0.12, 64, 512, (32, 32, 128)))
    sa2: SetAbstractionConfig = field(default_factory=lambda: SetAbstractionConfig(0.2, 64, 128, (64, 64, 256)))
    global_mlp: tuple[int, ...] = (128, 128, 512)
    fold_channels: int = 256
    local_radius: float = 0.4
    local_nsample: int = 64
    local_level: int = 1
    use_local_feature: bool = True
    use_spatial_dependency: bool = True

    def level_channels(self, level: int) -> int:
        return (self.in_features, self.sa1.mlp[-1], self.sa2.mlp[-1])[level]

    def level_points(self, level: int) -> int:
        return (self.n_points, self.sa1.npoint, self.sa2.npoint)[level]

    def local_input_split(self) -> tuple[int, int]:
        """Widths of the per-neighbour part and the per-joint (replicated) part of a local-fold row."""
        per_neighbor = 3 + (self.level_channels(self.local_level) if self.use_local_feature else 0)
        per_joint = (3 if self.use_spatial_dependency else 1) * self.fold_channels
        return per_neighbor, per_joint

    def to_dict(self) -> dict:
        d = asdict(self)
        d["sa1"] = asdict(self.sa1)
        d["sa2"] = asdict(self.sa2)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        for key in ("sa1", "sa2"):
            if isinstance(d.get(key), dict):
                sa = dict(d[key])
                sa["mlp"] = tuple(sa["mlp"])
                d[key] = SetAbstractionConfig(**sa)
        if "global_mlp" in d:
            d["global_mlp"] = tuple(d["global_mlp"])
        return cls(**d)


@dataclass
class PoseEstimate:
    stages: list[Tensor]  # stage 0 = global fold, then one per local fold; each B x J x 3
    embeddings: list[Tensor]

    @property
    def final(self) -> Tensor:
        return self.stages[-1]


# ---------------------------------------------------------------------------
# decoder pieces


class GlobalFold:
    def __init__(self, g_channels: int, fold_channels: int, rng: np.random.Generator):
        self.h_e = SharedMLP("global_fold.h_e", 2 + g_channels, (fold_channels, fold_channels), rng)
        self.h_p = Dense("global_fold.h_p", fold_channels, 3, rng, bn_relu=False)

    def mlps(self):
        return [self.h_e, self.h_p]


def global_fold(g: Tensor, skel: SkeletonPrior, params: GlobalFold, training: bool = True) -> tuple[Tensor, Tensor]:
    """Joints (B x J x 3) and folding embeddings (B x J x C^f) from the global feature."""
    B = g.shape[0]
    J = skel.num_joints
    grid = Tensor(np.broadcast_to(skel.coords2d, (B, J, 2)))
    rows = ad.concat_last([grid, ad.expand(g, 1, J)])
    emb = params.h_e(rows, training)
    return params.h_p(emb, training), emb


def rearrange(emb: Tensor, adj: AdjacencyMap) -> Tensor:
    """Row j becomes [e_j, e_adj1(j), e_adj2(j)] -> B x J x 3C."""
    B, J, C = emb.shape
    flat = ad.reshape(emb, (B * J, C))
    e1 = ad.gather_rows(flat, _batch_flat(np.broadcast_to(adj.adj1, (B, J)), J))
    e2 = ad.gather_rows(flat, _batch_flat(np.broadcast_to(adj.adj2, (B, J)), J))
    return ad.concat_last([emb, e1, e2])


class LocalFold:
    def __init__(self, name: str, cfg: ModelConfig, rng: np.random.Generator):
        c = cfg.fold_channels
        per_neighbor, per_joint = cfg.local_input_split()
        self.split = per_neighbor
        self.h_f = SharedMLP(f"{name}.h_f", per_neighbor + per_joint, (c, c, c), rng)
        self.h_r = SharedMLP(f"{name}.h_r", c, (c, c, 3), rng, bare_last=True)

    def mlps(self):
        return [self.h_f, self.h_r]


def local_fold(joints: Tensor, emb: Tensor, level: LevelOutput, params: LocalFold, adj: AdjacencyMap,
               cfg: ModelConfig, training: bool = True) -> tuple[Tensor, Tensor]:
    """One residual refinement block; returns the new joints and embedding."""
    B, J, _ = joints.shape
    M = level.coords.shape[1]
    if M == 0:
        raise ValueError("local_fold: empty level map")
    S = cfg.local_nsample
    nbr = np.stack([ball_query(joints.data[b], level.coords[b], cfg.local_radius, S) for b in range(B)])
    grouped_xyz, gathered = group(level.coords, level.features if cfg.use_local_feature else None,
                                  np.zeros((B, J, 3), dtype=level.coords.dtype), nbr)
    rel = ad.sub(Tensor(grouped_xyz), ad.expand(joints, 2, S))
    per_neighbor = ad.concat_last([rel, gathered]) if gathered is not None else rel
    per_joint = rearrange(emb, adj) if cfg.use_spatial_dependency else emb

    # first h_f layer on [per_neighbor, per_joint replicated S times], evaluated
    # as two products so the replicated block is multiplied once per joint
    first = params.h_f.layers[0]
    W = first.W
    z = ad.add(ad.linear(per_neighbor, ad.row_slice(W, 0, params.split), first.b),
               ad.expand(ad.linear(per_joint, ad.row_slice(W, params.split, W.shape[0])), 2, S))
    h = ad.relu(ad.batch_norm(z, first.gamma, first.beta, first.stats, training))
    new_emb, _ = params.h_f.pooled(h, training, start=1)
    residual = params.h_r(new_emb, training)
    return ad.add(residual, joints), new_emb


def local_fold_reference(joints: Tensor, emb: Tensor, level: LevelOutput, params: LocalFold, adj: AdjacencyMap,
                         cfg: ModelConfig, training: bool = True) -> tuple[Tensor, Tensor]:
    """Literal form: replicate the dependency map S times and concatenate before h_f."""
    B, J, _ = joints.shape
    S = cfg.local_nsample
    nbr = np.stack([ball_query(joints.data[b], level.coords[b], cfg.local_radius, S) for b in range(B)])
    grouped_xyz, gathered = group(level.coords, level.features if cfg.use_local_feature else None,
                                  np.zeros((B, J, 3), dtype=level.coords.dtype), nbr)
    rel = ad.sub(Tensor(grouped_xyz), ad.expand(joints, 2, S))
    per_joint = rearrange(emb, adj) if cfg.use_spatial_dependency else emb
    parts = [rel] + ([gathered] if gathered is not None else []) + [ad.expand(per_joint, 2, S)]
    first = params.h_f.layers[0]
    h = ad.relu(ad.batch_norm(ad.linear(ad.concat_last(parts), first.W, first.b),
                              first.gamma, first.beta, first.stats, training))
    new_emb, _ = params.h_f.pooled(h, training, start=1)
    return ad.add(params.h_r(new_emb, training), joints), new_emb


# ---------------------------------------------------------------------------
# full network


class HandFoldingNet:
    def __init__(self, cfg: ModelConfig, skeleton: SkeletonPrior, seed: int = 0):
        if skeleton.num_joints != cfg.num_joints:
            raise ValueError(f"skeleton has {skeleton.num_joints} joints, config expects {cfg.num_joints}")
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        self.skeleton = skeleton
        self.encoder = Encoder(cfg.sa1, cfg.sa2, cfg.global_mlp, rng, cfg.in_features)
        self.global_fold = GlobalFold(cfg.global_mlp[-1], cfg.fold_channels, rng)
        self.local_folds = [LocalFold(f"local_fold{k + 1}", cfg, rng) for k in range(cfg.num_local_folds)]

    def _mlps(self):
        out = self.encoder.mlps() + self.global_fold.mlps()
        for lf in self.local_folds:
            out += lf.mlps()
        return out

    def parameters(self) -> dict[str, Tensor]:
        params = {}
        for m in self._mlps():
            for p in m.parameters():
                params[p.name] = p
        return params

    def buffers(self) -> dict[str, RunningStats]:
        return {name: st for m in self._mlps() for name, st in m.buffers()}

    def zero_grad(self) -> None:
        for p in self.parameters().values():
            p.grad = None

    def forward(self, points: np.ndarray, normals: np.ndarray, rng: np.random.Generator | int,
                training: bool = True) -> PoseEstimate:
        """``points``/``normals`` are B x N x 3; returns every stage's joints."""
        rng = np.random.default_rng(rng)
        points = np.asarray(points)
        normals = np.asarray(normals)
        if points.ndim == 2:
            points, normals = points[None], normals[None]
        levels, g = self.encoder(points, normals, rng, training)
        joints, emb = global_fold(g, self.skeleton, self.global_fold, training)
        stages, embs = [joints], [emb]
        level = levels[self.cfg.local_level]
        for lf in self.local_folds:
            joints, emb = local_fold(joints, emb, level, lf, self.skeleton.adjacency, self.cfg, training)
            stages.append(joints)
            embs.append(emb)
        return PoseEstimate(stages, embs)

    __call__ = forward

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters().values())


def model_forward(frame, model: HandFoldingNet, rng: np.random.Generator | int = 0,
                  training: bool = False) -> PoseEstimate:
    """Run one PointFrame (or a list of them) through ``model``."""
    frames = frame if isinstance(frame, (list, tuple)) else [frame]
    pts = np.stack([f.points for f in frames])
    nrm = np.stack([f.normals for f in frames])
    return model.forward(pts, nrm, rng, training)


# ---------------------------------------------------------------------------
# accounting


def _mlp_params(cin: int, channels, bn_flags) -> int:
    total = 0
    for c, bn in zip(channels, bn_flags):
        total += cin * c + c + (2 * c if bn else 0)
        cin = c
    return total


def count_params(cfg: ModelConfig) -> int:
    """Learnable scalars (weights, biases, batch-norm scale/shift) of the network described by ``cfg``."""
    c = cfg.fold_channels
    total = _mlp_params(3 + cfg.in_features, cfg.sa1.mlp, [True] * 3)
    total += _mlp_params(3 + cfg.sa1.mlp[-1], cfg.sa2.mlp, [True] * 3)
    total += _mlp_params(3 + cfg.sa2.mlp[-1], cfg.global_mlp, [True] * 3)
    total += _mlp_params(2 + cfg.global_mlp[-1], (c, c, 3), [True, True, False])
    per_neighbor, per_joint = cfg.local_input_split()
    block = _mlp_params(per_neighbor + per_joint, (c, c, c), [True] * 3)
    block += _mlp_params(c, (c, c, 3), [True, True, False])
    return total + cfg.num_local_folds * block


def _mlp_macs(rows: int, cin: int, channels) -> int:
    total = 0
    for c in channels:
        total += rows * cin * c
        cin = c
    return total


def count_flops(cfg: ModelConfig, convention: str = "mac2") -> int:
    """Inference operation count for one frame.

    ``mac2``: 2 FLOPs per multiply-accumulate of every linear layer plus one
    per comparison in each max-pool. ``mac``: multiply-accumulates only.
    Counts follow the nominal architecture (dependency map replicated S times).
    """
    J, c = cfg.num_joints, cfg.fold_channels
    macs = _mlp_macs(cfg.sa1.npoint * cfg.sa1.nsample, 3 + cfg.in_features, cfg.sa1.mlp)
    macs += _mlp_macs(cfg.sa2.npoint * cfg.sa2.nsample, 3 + cfg.sa1.mlp[-1], cfg.sa2.mlp)
    macs += _mlp_macs(cfg.sa2.npoint, 3 + cfg.sa2.mlp[-1], cfg.global_mlp)
    macs += _mlp_macs(J, 2 + cfg.global_mlp[-1], (c, c, 3))
    cmps = cfg.sa1.npoint * (cfg.sa1.nsample - 1) * cfg.sa1.mlp[-1]
    cmps += cfg.sa2.npoint * (cfg.sa2.nsample - 1) * cfg.sa2.mlp[-1]
    cmps += (cfg.sa2.npoint - 1) * cfg.global_mlp[-1]
    per_neighbor, per_joint = cfg.local_input_split()
    for _ in range(cfg.num_local_folds):
        macs += _mlp_macs(J * cfg.local_nsample, per_neighbor + per_joint, (c, c, c))
        macs += _mlp_macs(J, c, (c, c, 3))
        cmps += J * (cfg.local_nsample - 1) * c
    if convention == "mac2":
        return 2 * macs + cmps
    if convention == "mac":
        return macs
    raise ValueError(f"unknown FLOP convention {convention!r}")
