"""Optimizer, augmentation, checkpoints and the training loop."""
from __future__ import annotations

import json
import logging
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .folding import HandFoldingNet, ModelConfig
from .losses import frame_errors, joint_loss
from .preprocess import NormalizationTransform, PointFrame
from .skeleton import AdjacencyMap, LAYOUTS, SkeletonPrior, build_skeleton

log = logging.getLogger(__name__)

CKPT_MAGIC = b"HFLD"
CKPT_VERSION = 1


class DivergenceError(FloatingPointError):
    pass


class CheckpointFormatError(ValueError):
    pass


@dataclass
class TrainConfig:
    lr: float = 1e-3
    beta1: float = 0.5
    beta2: float = 0.999
    batch: int = 32
    epochs: int = 400
    lr_decay: float = 0.1
    lr_decay_epoch: int | None = None
    seed: int = 0
    augment: bool = True
    rotation_deg: float = 37.5
    scale_range: tuple[float, float] = (0.9, 1.1)
    translation_mm: float = 10.0
    loss_variant: str = "kinked"
    checkpoint_every: int = 10
    workers: int = 1

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("Adam betas must lie in [0, 1)")
        if self.batch < 1:
            raise ValueError("batch must be >= 1")
        self.scale_range = tuple(self.scale_range)

    def lr_at(self, epoch: int) -> float:
        if self.lr_decay_epoch is not None and epoch >= self.lr_decay_epoch:
            return self.lr * self.lr_decay
        return self.lr

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


# ---------------------------------------------------------------------------
# optimizer


class Adam:
    """Adam with bias correction (epsilon 1e-8)."""

    def __init__(self, params: dict[str, ad.Tensor], lr: float = 1e-3, betas=(0.5, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self) -> None:
        for name, p in self.params.items():
            if p.grad is not None and not np.all(np.isfinite(p.grad)):
                raise DivergenceError(f"non-finite gradient in {name} at step {self.t + 1}")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1 - b1 ** self.t
        c2 = 1 - b2 ** self.t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * (g * g)
            step = (self.lr / c1) * m / (np.sqrt(v / c2) + self.eps)
            p.data -= step.astype(p.data.dtype)


def adam_step(params: dict[str, ad.Tensor], opt: Adam) -> None:
    opt.step()


# ---------------------------------------------------------------------------
# augmentation


def _rot_z(theta: float) -> np.ndarray:
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def apply_similarity(frame: PointFrame, theta_deg: float, scale: float, translation_mm) -> PointFrame:
    """Rotate about the OBB z axis, scale, and translate (mm, converted to normalized units)."""
    R = _rot_z(np.radians(theta_deg))
    shift = np.asarray(translation_mm, dtype=np.float64) / frame.transform.scale
    pts = scale * frame.points @ R.T + shift
    nrm = None if frame.normals is None else frame.normals @ R.T
    gt = None if frame.gt_joints is None else scale * frame.gt_joints @ R.T + shift
    return PointFrame(pts, nrm, frame.transform, gt)


def augment(frame: PointFrame, rng: np.random.Generator | int, cfg: TrainConfig | None = None) -> PointFrame:
    cfg = cfg or TrainConfig()
    rng = np.random.default_rng(rng)
    theta = rng.uniform(-cfg.rotation_deg, cfg.rotation_deg)
    s = rng.uniform(*cfg.scale_range)
    t = rng.uniform(-cfg.translation_mm, cfg.translation_mm, 3)
    return apply_similarity(frame, theta, s, t)


# ---------------------------------------------------------------------------
# checkpoints


def skeleton_to_dict(s: SkeletonPrior) -> dict:
    return {"names": list(s.joint_names), "coords": s.coords2d.tolist(),
            "adj1": s.adjacency.adj1.tolist(), "adj2": s.adjacency.adj2.tolist()}


def skeleton_from_dict(d: dict) -> SkeletonPrior:
    return SkeletonPrior(np.array(d["coords"], dtype=np.float64), tuple(d["names"]),
                         AdjacencyMap(np.array(d["adj1"], dtype=np.int64), np.array(d["adj2"], dtype=np.int64)))


def save_checkpoint(path: str | Path, model: HandFoldingNet, opt: Adam | None = None, epoch: int = 0,
                    train_cfg: TrainConfig | None = None, extra: dict | None = None) -> None:
    arrays: list[tuple[str, np.ndarray]] = []
    for name, p in model.parameters().items():
        arrays.append((f"param/{name}", p.data))
    for name, st in model.buffers().items():
        arrays.append((f"bn_mean/{name}", st.mean))
        arrays.append((f"bn_var/{name}", st.var))
    if opt is not None:
        for name in model.parameters():
            arrays.append((f"adam_m/{name}", opt.m[name]))
            arrays.append((f"adam_v/{name}", opt.v[name]))
    header = {
        "model_config": model.cfg.to_dict(),
        "train_config": None if train_cfg is None else asdict(train_cfg),
        "skeleton": skeleton_to_dict(model.skeleton),
        "epoch": epoch,
        "adam_t": 0 if opt is None else opt.t,
        "extra": extra or {},
        "tensors": [{"name": n, "shape": list(a.shape), "dtype": np.dtype(a.dtype).newbyteorder("<").str}
                    for n, a in arrays],
    }
    blob = json.dumps(header, sort_keys=True).encode()
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "wb") as f:
        f.write(CKPT_MAGIC + struct.pack("<II", CKPT_VERSION, len(blob)))
        f.write(blob)
        for (n, a), meta in zip(arrays, header["tensors"]):
            f.write(np.ascontiguousarray(a, dtype=meta["dtype"]).tobytes())
    tmp.replace(path)


def read_checkpoint(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    if raw[:4] != CKPT_MAGIC:
        raise CheckpointFormatError(f"{path}: bad magic")
    if len(raw) < 12:
        raise CheckpointFormatError(f"{path}: truncated header")
    version, hlen = struct.unpack("<II", raw[4:12])
    if version != CKPT_VERSION:
        raise CheckpointFormatError(f"{path}: unsupported version {version}")
    try:
        header = json.loads(raw[12:12 + hlen])
    except ValueError as e:
        raise CheckpointFormatError(f"{path}: unreadable header ({e})") from None
    off = 12 + hlen
    arrays = {}
    for meta in header["tensors"]:
        dt = np.dtype(meta["dtype"])
        n = int(np.prod(meta["shape"], dtype=np.int64))
        if off + n * dt.itemsize > len(raw):
            raise CheckpointFormatError(f"{path}: payload truncated at {meta['name']}")
        arrays[meta["name"]] = np.frombuffer(raw, dtype=dt, count=n, offset=off).reshape(meta["shape"]).copy()
        off += n * dt.itemsize
    if off != len(raw):
        raise CheckpointFormatError(f"{path}: trailing or missing payload bytes")
    return header, arrays


def load_checkpoint(path: str | Path) -> tuple[HandFoldingNet, Adam, dict]:
    """Rebuild model and optimizer state; returns (model, optimizer, header)."""
    header, arrays = read_checkpoint(path)
    cfg = ModelConfig.from_dict(header["model_config"])
    model = HandFoldingNet(cfg, skeleton_from_dict(header["skeleton"]))
    params = model.parameters()
    for name, p in params.items():
        p.data = arrays[f"param/{name}"].astype(p.data.dtype)
    for name, st in model.buffers().items():
        st.mean = arrays[f"bn_mean/{name}"]
        st.var = arrays[f"bn_var/{name}"]
    tc = header.get("train_config") or {}
    opt = Adam(params, tc.get("lr", 1e-3), (tc.get("beta1", 0.5), tc.get("beta2", 0.999)))
    if f"adam_m/{next(iter(params))}" in arrays:
        for name in params:
            opt.m[name] = arrays[f"adam_m/{name}"].astype(params[name].data.dtype)
            opt.v[name] = arrays[f"adam_v/{name}"].astype(params[name].data.dtype)
        opt.t = header["adam_t"]
    return model, opt, header


# ---------------------------------------------------------------------------
# training loop


@dataclass
class EpochLog:
    epoch: int
    loss: float
    per_stage: list[float]
    mean_error_norm: float
    mean_error_mm: float
    lr: float

    def to_line(self) -> str:
        stages = " ".join(f"{x:.6f}" for x in self.per_stage)
        return (f"epoch {self.epoch} loss {self.loss:.6f} stages [{stages}] "
                f"err_norm {self.mean_error_norm:.6f} err_mm {self.mean_error_mm:.4f} lr {self.lr:g}")


@dataclass
class TrainResult:
    model: HandFoldingNet
    optimizer: Adam
    log: list[EpochLog] = field(default_factory=list)


def epoch_rng(seed: int, epoch: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, epoch]))


def _stack(frames: Sequence[PointFrame]):
    return (np.stack([f.points for f in frames]), np.stack([f.normals for f in frames]),
            np.stack([f.gt_joints for f in frames]), np.array([f.transform.scale for f in frames]))


def skeleton_for(frames: Sequence[PointFrame], layout_name: str | None = None, seed: int = 0) -> SkeletonPrior:
    """Skeleton prior built from the frames' ground truth."""
    J = frames[0].gt_joints.shape[0]
    layout = LAYOUTS[layout_name] if layout_name else next(l for l in LAYOUTS.values() if l.num_joints == J)
    return build_skeleton(np.stack([f.gt_joints for f in frames]), layout, seed=seed)


def train(dataset: Sequence[PointFrame], model_cfg: ModelConfig, cfg: TrainConfig,
          skeleton: SkeletonPrior | None = None, out_dir: str | Path | None = None,
          resume: str | Path | None = None, on_epoch: Callable[[EpochLog], None] | None = None) -> TrainResult:
    """Mini-batch Adam on the all-stage joint loss.

    Epoch ``e`` shuffles, augments and samples centroids from a generator
    seeded by ``(cfg.seed, e)``, so resuming at any epoch replays exactly.
    """
    if len(dataset) == 0:
        raise ValueError("training set is empty")
    start = 0
    if resume is not None:
        model, opt, header = load_checkpoint(resume)
        start = header["epoch"] + 1
    else:
        skeleton = skeleton or skeleton_for(dataset, seed=cfg.seed)
        model = HandFoldingNet(model_cfg, skeleton, seed=cfg.seed)
        opt = Adam(model.parameters(), cfg.lr, (cfg.beta1, cfg.beta2))
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    result = TrainResult(model, opt)
    pool = ThreadPoolExecutor(cfg.workers) if cfg.workers > 1 else None
    try:
        for epoch in range(start, cfg.epochs):
            opt.lr = cfg.lr_at(epoch)
            rng = epoch_rng(cfg.seed, epoch)
            order = rng.permutation(len(dataset))
            sample_seeds = rng.integers(0, 2 ** 63 - 1, len(dataset))
            tot, stages_acc, err_n, err_mm, seen = 0.0, None, 0.0, 0.0, 0
            for b0 in range(0, len(order), cfg.batch):
                ids = order[b0:b0 + cfg.batch]
                frames = [dataset[i] for i in ids]
                if cfg.augment:
                    jobs = [(f, sample_seeds[i]) for f, i in zip(frames, ids)]
                    frames = list(pool.map(lambda a: augment(a[0], a[1], cfg), jobs)) if pool else \
                        [augment(f, s, cfg) for f, s in jobs]
                pts, nrm, gt, scales = _stack(frames)
                model.zero_grad()
                est = model.forward(pts, nrm, rng, training=True)
                report = joint_loss(est.stages, gt, cfg.loss_variant)
                if not np.isfinite(report.value):
                    raise DivergenceError(f"loss became {report.value} at epoch {epoch}")
                ad.backward(report.total)
                opt.step()
                n = len(ids)
                tot += report.value * n
                ps = np.array(report.per_stage) * n
                stages_acc = ps if stages_acc is None else stages_acc + ps
                e = frame_errors(est.final.data, gt)
                err_n += float(e.sum())
                err_mm += float((e * scales).sum())
                seen += n
            entry = EpochLog(epoch, tot / seen, list(stages_acc / seen), err_n / seen, err_mm / seen, opt.lr)
            result.log.append(entry)
            log.info(entry.to_line())
            if on_epoch:
                on_epoch(entry)
            if out is not None and ((epoch + 1) % cfg.checkpoint_every == 0 or epoch + 1 == cfg.epochs):
                save_checkpoint(out / "last.hfld", model, opt, epoch, cfg)
    finally:
        if pool:
            pool.shutdown()
    return result


# ---------------------------------------------------------------------------
# evaluation


def predict(model: HandFoldingNet, frames: Sequence[PointFrame], seed: int = 0, batch: int = 32) -> np.ndarray:
    """Eval-mode final-stage joints in normalized coordinates, F x J x 3."""
    out = []
    for b0 in range(0, len(frames), batch):
        chunk = frames[b0:b0 + batch]
        rng = np.random.default_rng(np.random.SeedSequence([seed, b0]))
        est = model.forward(np.stack([f.points for f in chunk]), np.stack([f.normals for f in chunk]),
                            rng, training=False)
        out.append(est.final.data.astype(np.float64))
    return np.concatenate(out)


def evaluate_mm(model: HandFoldingNet, frames: Sequence[PointFrame], seed: int = 0) -> np.ndarray:
    """Per-frame mean joint error in mm (eval mode, denormalized)."""
    pred = predict(model, frames, seed)
    errs = []
    for p, f in zip(pred, frames):
        errs.append(frame_errors(f.transform.denormalize(p)[None], f.transform.denormalize(f.gt_joints)[None])[0])
    return np.array(errs)


def denormalized(frame: PointFrame, joints: np.ndarray) -> np.ndarray:
    tf: NormalizationTransform = frame.transform
    return tf.denormalize(joints)
