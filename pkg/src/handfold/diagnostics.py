"""Finite-difference gradient checks for every registered op and for the full network."""
from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import RunningStats, Tensor
from .encoder import SetAbstractionConfig
from .folding import HandFoldingNet, ModelConfig, global_fold, local_fold
from .losses import joint_loss
from .skeleton import default_skeleton

OP_TOL = 1e-4
PIPELINE_TOL = 1e-3
EPS = 1e-6
# the network is piecewise smooth (ReLU, max-pool argmax) and its first-level
# gradients reach ~1e3, so a small step is needed to stay inside one smooth piece
PIPELINE_EPS = 1e-8


@dataclass
class CheckResult:
    name: str
    rel_error: float
    tol: float

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.rel_error) and self.rel_error < self.tol)

    def line(self) -> str:
        return f"{self.name:<18} rel_err={self.rel_error:.3e} tol={self.tol:.0e} {'PASS' if self.passed else 'FAIL'}"


def _param(rng, *shape, low=-1.0, high=1.0) -> Tensor:
    return Tensor(rng.uniform(low, high, shape), requires_grad=True)


def _away_from_zero(rng, shape, margin=0.05) -> np.ndarray:
    return rng.choice([-1.0, 1.0], shape) * rng.uniform(margin, 1.0, shape)


def _project(y: Tensor, rng) -> Tensor:
    # random linear functional so every output entry contributes to the scalar
    return ad.sum_all(ad.mul(y, Tensor(rng.normal(size=y.shape))))


def _distinct_groups(rng, shape, gap=0.05) -> np.ndarray:
    # values along axis -2 are a shuffled ladder, so the max is unique with a margin
    a, s, c = shape
    ladder = np.arange(s) * gap
    out = np.empty(shape)
    for i in range(a):
        for j in range(c):
            out[i, :, j] = rng.permutation(ladder) + rng.uniform(-1, 1)
    return out


def _case(op: str, rng: np.random.Generator) -> tuple[Callable[[], Tensor], list[Tensor]]:
    """Scalar test function exercising ``op`` plus the tensors to differentiate."""
    P = lambda y: _project(y, np.random.default_rng(99))  # noqa: E731 - same functional on every call
    if op in ("add", "sub", "mul"):
        a, b = _param(rng, 3, 4), _param(rng, 3, 4)
        fn = getattr(ad, op)
        return (lambda: P(fn(a, b))), [a, b]
    if op == "scale":
        x = _param(rng, 3, 4)
        return (lambda: P(ad.scale(x, -1.7))), [x]
    if op == "reshape":
        x = _param(rng, 3, 4)
        return (lambda: P(ad.reshape(x, (2, 6)))), [x]
    if op == "expand":
        x = _param(rng, 3, 4)
        return (lambda: P(ad.expand(x, 1, 5))), [x]
    if op == "row_slice":
        x = _param(rng, 6, 3)
        return (lambda: P(ad.row_slice(x, 1, 4))), [x]
    if op == "concat_last":
        a, b = _param(rng, 2, 3, 2), _param(rng, 2, 3, 4)
        return (lambda: P(ad.concat_last([a, b]))), [a, b]
    if op == "gather_rows":
        x = _param(rng, 5, 3)
        idx = np.array([[0, 2, 2], [4, 1, 0]])
        return (lambda: P(ad.gather_rows(x, idx))), [x]
    if op == "max_over_axis":
        x = Tensor(_distinct_groups(rng, (3, 5, 4)), requires_grad=True)
        return (lambda: P(ad.max_over_axis(x, axis=1)[0])), [x]
    if op == "sum":
        x = _param(rng, 3, 4)
        return (lambda: ad.scale(ad.sum_all(ad.mul(x, x)), 0.5)), [x]
    if op == "linear":
        x, W, b = _param(rng, 2, 3, 4), _param(rng, 4, 5), _param(rng, 5)
        return (lambda: P(ad.linear(x, W, b))), [x, W, b]
    if op == "relu":
        x = Tensor(_away_from_zero(rng, (3, 4)), requires_grad=True)
        return (lambda: P(ad.relu(x))), [x]
    if op == "smooth_l1":
        # both regimes of the piecewise definition, away from the joint at 0.01 and the kink at 0
        mag = np.concatenate([rng.uniform(0.002, 0.008, 6), rng.uniform(0.02, 1.0, 6)])
        x = Tensor((rng.choice([-1.0, 1.0], 12) * mag).reshape(3, 4), requires_grad=True)
        return (lambda: P(ad.smooth_l1(x))), [x]
    if op == "batch_norm":
        x, g, b = _param(rng, 4, 3, 5), _param(rng, 5, low=0.5, high=1.5), _param(rng, 5)
        return (lambda: P(ad.batch_norm(x, g, b, RunningStats.fresh(5), True))), [x, g, b]
    if op in ("dense_bn_relu", "dense_bn_relu_max"):
        x, W, b = _param(rng, 2, 3, 6, 4), _param(rng, 4, 5), _param(rng, 5)
        g, be = _param(rng, 5, low=0.5, high=1.5), _param(rng, 5, low=-0.3, high=0.3)
        if op == "dense_bn_relu":
            f = lambda: P(ad.dense_bn_relu(x, W, b, g, be, RunningStats.fresh(5), True))  # noqa: E731
        else:
            f = lambda: P(ad.dense_bn_relu_max(x, W, b, g, be, RunningStats.fresh(5), True)[0])  # noqa: E731
        return f, [x, W, b, g, be]
    raise KeyError(op)


def check_op(op: str, seed: int = 0) -> CheckResult:
    with ad.precision("float64"):
        f, inputs = _case(op, np.random.default_rng([seed, ad.OPS.index(op)]))
        return CheckResult(op, ad.gradcheck(f, inputs, EPS), OP_TOL)


def check_ops(seed: int = 0) -> list[CheckResult]:
    """One result per registered op, in registry order."""
    return [check_op(op, seed) for op in ad.OPS]


def pipeline_config() -> ModelConfig:
    """K=1 network at full layer widths, with sampling sized for a 64-point cloud."""
    return ModelConfig(num_joints=16, num_local_folds=1, n_points=64,
                       sa1=SetAbstractionConfig(0.25, 16, 32, (32, 32, 128)),
                       sa2=SetAbstractionConfig(0.4, 16, 16, (64, 64, 256)),
                       local_nsample=8)


def check_pipeline(seed: int = 0, fraction: float = 0.01, n_points: int = 64) -> CheckResult:
    """Loss gradient w.r.t. a random ``fraction`` of all parameter scalars vs central differences."""
    _, analytic, numeric = pipeline_gradients(seed, fraction, n_points)
    return CheckResult("pipeline", ad.rel_error(analytic, numeric), PIPELINE_TOL)


def pipeline_gradients(seed: int = 0, fraction: float = 0.01, n_points: int = 64):
    """(labels, analytic, numeric) for the sampled parameter scalars."""
    with ad.precision("float64"):
        cfg = pipeline_config()
        model = HandFoldingNet(cfg, default_skeleton("icvl"), seed=seed)
        rng = np.random.default_rng(seed)
        # two clouds: with one, training-mode batch norm over the J joint rows cancels the
        # global feature and the upper encoder levels would get identically zero gradient
        pts = rng.uniform(-0.5, 0.5, (2, n_points, 3))
        nrm = rng.normal(size=(2, n_points, 3))
        nrm /= np.linalg.norm(nrm, axis=-1, keepdims=True)
        gt = rng.uniform(-0.3, 0.3, (2, cfg.num_joints, 3))

        def f():
            return joint_loss(model.forward(pts, nrm, seed, training=True).stages, gt).total

        staged = _staged_losses(model, pts, nrm, gt, seed)
        named = model.parameters()
        sizes = np.array([p.size for p in named.values()])
        offsets = np.concatenate([[0], np.cumsum(sizes)])
        pick = np.sort(rng.choice(offsets[-1], max(1, int(round(fraction * offsets[-1]))), replace=False))
        picks = {}
        for k, name in enumerate(named):
            sel = pick[(pick >= offsets[k]) & (pick < offsets[k + 1])] - offsets[k]
            if len(sel):
                picks[name] = sel
        model.zero_grad()
        ad.backward(f())
        analytic = np.concatenate([named[n].grad.reshape(-1)[sel] if named[n].grad is not None
                                   else np.zeros(len(sel)) for n, sel in picks.items()])
        numeric = np.concatenate([ad.numerical_grad(staged[_stage_of(n)], named[n], PIPELINE_EPS, sel)
                                  for n, sel in picks.items()])
        labels = [f"{n}[{i}]" for n, sel in picks.items() for i in sel]
        return labels, analytic, numeric


def _stage_of(param_name: str) -> int:
    """0 encoder, 1 global fold, 1 + k local fold k."""
    if param_name.startswith("global_fold"):
        return 1
    if param_name.startswith("local_fold"):
        return 1 + int(param_name[len("local_fold"):].split(".")[0])
    return 0


def _staged_losses(model: HandFoldingNet, pts, nrm, gt, seed) -> list[Callable[[], Tensor]]:
    """Loss closures indexed by stage; closure ``s`` recomputes stages ``s..`` and reuses
    the unperturbed activations upstream, so a probe only pays for what it can change."""
    cfg = model.cfg
    with ad.no_grad():
        levels, g = model.encoder(pts, nrm, np.random.default_rng(seed), True)
        cached = [global_fold(g, model.skeleton, model.global_fold, True)]
        for lf in model.local_folds:
            cached.append(local_fold(*cached[-1], levels[cfg.local_level], lf, model.skeleton.adjacency, cfg, True))

    def make(start):
        def run():
            if start == 0:
                return joint_loss(model.forward(pts, nrm, seed, training=True).stages, gt).total
            outs = list(cached[:start - 1])
            outs.append(global_fold(g, model.skeleton, model.global_fold, True) if start == 1 else
                        local_fold(*cached[start - 2], levels[cfg.local_level], model.local_folds[start - 2],
                                   model.skeleton.adjacency, cfg, True))
            for lf in model.local_folds[start - 1:]:
                outs.append(local_fold(*outs[-1], levels[cfg.local_level], lf, model.skeleton.adjacency, cfg, True))
            return joint_loss([j for j, _ in outs], gt).total
        return run

    return [make(s) for s in range(2 + cfg.num_local_folds)]


def perturbing_hook(scale: float = 1e-2) -> Callable[[tuple], tuple]:
    """Negative control: bias every non-empty input gradient of an op by ``scale``."""
    def hook(grads):
        return tuple(None if g is None else g + scale for g in grads)
    return hook


def run_suite(seed: int = 0, perturb: str | None = None, pipeline: bool = True) -> list[CheckResult]:
    ctx = ad.grad_hook(perturb, perturbing_hook()) if perturb else contextlib.nullcontext()
    with ctx:
        results = check_ops(seed)
        if pipeline:
            results.append(check_pipeline(seed))
    return results
