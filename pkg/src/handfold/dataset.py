"""Dataset manifests: a text index of depth files with camera-space joint annotations.

Format (``#`` starts a comment, blank lines are ignored)::

    intrinsics <fx> <fy> <cx> <cy>
    joints <J>
    layout <icvl|msra|nyu>          # optional, names the joints
    <depth_file> x1 y1 z1 ... xJ yJ zJ

Depth file paths are relative to the manifest's directory. Coordinates are
camera-space millimetres.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .preprocess import CameraIntrinsics, PointFrame, foreground_mask, preprocess_depth, read_depth, write_depth
from .skeleton import LAYOUTS
from .synth import render_hand


class ManifestError(ValueError):
    pass


@dataclass
class DatasetManifest:
    root: Path
    intrinsics: CameraIntrinsics
    num_joints: int
    layout: str | None = None
    files: list[str] = field(default_factory=list)
    joints_mm: list[np.ndarray] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.files)

    def path(self, i: int) -> Path:
        return self.root / self.files[i]


def parse_manifest(text: str, root: str | Path = ".", check_files: bool = True) -> DatasetManifest:
    root = Path(root)
    intr, J, layout = None, None, None
    files, joints = [], []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tok = line.split()
        try:
            if tok[0] == "intrinsics":
                intr = CameraIntrinsics(*map(float, tok[1:5]))
                if len(tok) != 5:
                    raise ValueError("expected 4 values")
            elif tok[0] == "joints":
                J = int(tok[1])
            elif tok[0] == "layout":
                layout = tok[1]
                if layout not in LAYOUTS:
                    raise ValueError(f"unknown layout {layout!r}")
            else:
                if J is None:
                    raise ValueError("sample line before the 'joints' record")
                vals = np.array([float(v) for v in tok[1:]])
                if len(vals) != 3 * J:
                    raise ValueError(f"{len(vals)} coordinates, expected {3 * J}")
                files.append(tok[0])
                joints.append(vals.reshape(J, 3))
        except (ValueError, IndexError, TypeError) as e:
            raise ManifestError(f"manifest line {lineno}: {e}") from None
    if intr is None or J is None:
        raise ManifestError("manifest needs 'intrinsics' and 'joints' records")
    if layout is not None and LAYOUTS[layout].num_joints != J:
        raise ManifestError(f"layout {layout} has {LAYOUTS[layout].num_joints} joints, manifest says {J}")
    m = DatasetManifest(root, intr, J, layout, files, joints)
    if check_files:
        missing = [f for f in files if not (root / f).is_file()]
        if missing:
            raise ManifestError(f"manifest references missing files: {missing[:3]}")
    return m


def load_manifest(path: str | Path, check_files: bool = True) -> DatasetManifest:
    path = Path(path)
    if not path.is_file():
        raise ManifestError(f"manifest not found: {path}")
    return parse_manifest(path.read_text(), path.parent, check_files)


def write_manifest(path: str | Path, m: DatasetManifest) -> None:
    lines = [f"intrinsics {m.intrinsics.fx!r} {m.intrinsics.fy!r} {m.intrinsics.cx!r} {m.intrinsics.cy!r}",
             f"joints {m.num_joints}"]
    if m.layout:
        lines.append(f"layout {m.layout}")
    for f, j in zip(m.files, m.joints_mm):
        lines.append(f + " " + " ".join(repr(float(v)) for v in np.asarray(j).reshape(-1)))
    Path(path).write_text("\n".join(lines) + "\n")


def load_frames(m: DatasetManifest, n_points: int = 1024, k: int = 30, seed: int = 0,
                half_window: float = 150.0) -> list[PointFrame]:
    """Preprocess every sample; the depth window is centred on the annotated joints' mean depth."""
    frames = []
    for i in range(len(m)):
        depth = read_depth(m.path(i))
        gt = m.joints_mm[i]
        mask = foreground_mask(depth, center_depth=float(gt[:, 2].mean()), half_window=half_window)
        rng = np.random.default_rng(np.random.SeedSequence([seed, i]))
        frames.append(preprocess_depth(depth, m.intrinsics, mask, n_points, k, rng, gt))
    return frames


def write_synthetic(out_dir: str | Path, count: int, seed: int = 0, layout: str = "icvl") -> Path:
    """Render ``count`` synthetic hands to depth files plus ``manifest.txt``; returns the manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    files, joints, intr = [], [], None
    for i in range(count):
        hand = render_hand(rng, LAYOUTS[layout])
        name = f"frame_{i:05d}.dpth"
        write_depth(out / name, hand.depth)
        files.append(name)
        joints.append(hand.joints_mm)
        intr = hand.intrinsics
    m = DatasetManifest(out, intr, LAYOUTS[layout].num_joints, layout, files, joints)
    write_manifest(out / "manifest.txt", m)
    return out / "manifest.txt"
