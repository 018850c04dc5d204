"""Fixed 2D hand skeleton prior and the joint adjacency map.

The skeleton is the template the decoder folds: each finger chain is laid
out as a straight ray from the root joint with the training set's average
link lengths. Non-thumb fingers are equally spaced over a 90 degree fan
centred on +y; the thumb sits a further 30 degrees beyond the index finger.
"""
from __future__ import annotations

from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np


@dataclass(frozen=True)
class HandLayout:
    name: str
    joint_names: tuple[str, ...]
    root: int
    chains: tuple[tuple[int, ...], ...]  # root-to-tip joint indices, root excluded
    angles_deg: tuple[float, ...]  # ray direction per chain
    palm_neighbors: tuple[int, int]

    @property
    def num_joints(self) -> int:
        return len(self.joint_names)

    def links(self) -> list[tuple[int, int]]:
        out = []
        for chain in self.chains:
            prev = self.root
            for j in chain:
                out.append((prev, j))
                prev = j
        return out

    def validate(self) -> None:
        seen = [self.root] + [j for c in self.chains for j in c]
        if sorted(seen) != list(range(self.num_joints)):
            raise ValueError(f"layout {self.name}: chains must cover every joint exactly once")
        if len(self.angles_deg) != len(self.chains):
            raise ValueError(f"layout {self.name}: one angle per chain required")


_FINGER_ANGLES = (135.0, 105.0, 75.0, 45.0)  # index, middle, ring, pinky
_THUMB_ANGLE = 165.0

ICVL = HandLayout(
    "icvl",
    ("palm", "thumb_root", "thumb_mid", "thumb_tip", "index_root", "index_mid", "index_tip",
     "middle_root", "middle_mid", "middle_tip", "ring_root", "ring_mid", "ring_tip",
     "pinky_root", "pinky_mid", "pinky_tip"),
    root=0,
    chains=((1, 2, 3), (4, 5, 6), (7, 8, 9), (10, 11, 12), (13, 14, 15)),
    angles_deg=(_THUMB_ANGLE,) + _FINGER_ANGLES,
    palm_neighbors=(1, 4),
)

MSRA = HandLayout(
    "msra",
    ("wrist",
     "index_mcp", "index_pip", "index_dip", "index_tip",
     "middle_mcp", "middle_pip", "middle_dip", "middle_tip",
     "ring_mcp", "ring_pip", "ring_dip", "ring_tip",
     "pinky_mcp", "pinky_pip", "pinky_dip", "pinky_tip",
     "thumb_mcp", "thumb_pip", "thumb_dip", "thumb_tip"),
    root=0,
    chains=((1, 2, 3, 4), (5, 6, 7, 8), (9, 10, 11, 12), (13, 14, 15, 16), (17, 18, 19, 20)),
    angles_deg=_FINGER_ANGLES + (_THUMB_ANGLE,),
    palm_neighbors=(17, 1),
)

NYU = HandLayout(
    "nyu",
    ("pinky_tip", "pinky_mid", "ring_tip", "ring_mid", "middle_tip", "middle_mid",
     "index_tip", "index_mid", "thumb_tip", "thumb_mid", "thumb_root", "wrist_1", "wrist_2", "palm"),
    root=13,
    chains=((10, 9, 8), (7, 6), (5, 4), (3, 2), (1, 0), (11,), (12,)),
    angles_deg=(_THUMB_ANGLE,) + _FINGER_ANGLES + (255.0, 285.0),
    palm_neighbors=(10, 7),
)

LAYOUTS = {lay.name: lay for lay in (ICVL, MSRA, NYU)}


@dataclass
class AdjacencyMap:
    adj1: np.ndarray
    adj2: np.ndarray


@dataclass
class SkeletonPrior:
    coords2d: np.ndarray  # J x 2
    joint_names: tuple[str, ...]
    adjacency: AdjacencyMap

    @property
    def num_joints(self) -> int:
        return len(self.joint_names)


def build_adjacency(layout: HandLayout) -> AdjacencyMap:
    """Predecessor/successor along each chain; tips map to themselves, the root to ``palm_neighbors``."""
    layout.validate()
    J = layout.num_joints
    adj1 = np.full(J, -1, dtype=np.int64)
    adj2 = np.full(J, -1, dtype=np.int64)
    adj1[layout.root], adj2[layout.root] = layout.palm_neighbors
    for chain in layout.chains:
        for pos, j in enumerate(chain):
            adj1[j] = layout.root if pos == 0 else chain[pos - 1]
            adj2[j] = chain[pos + 1] if pos + 1 < len(chain) else j
    if (adj1 < 0).any() or (adj2 < 0).any() or (adj1 >= J).any() or (adj2 >= J).any():
        raise ValueError(f"layout {layout.name}: malformed chain")
    return AdjacencyMap(adj1, adj2)


def average_link_lengths(samples: np.ndarray, layout: HandLayout) -> dict[tuple[int, int], float]:
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim != 3 or samples.shape[1:] != (layout.num_joints, 3):
        raise ValueError(f"expected samples of shape (M, {layout.num_joints}, 3), got {samples.shape}")
    return {(a, b): float(np.linalg.norm(samples[:, b] - samples[:, a], axis=1).mean())
            for a, b in layout.links()}


def build_skeleton(samples: np.ndarray, layout: HandLayout = ICVL, n_samples: int = 1000,
                   seed: int = 0) -> SkeletonPrior:
    """Unfold each chain of ``layout`` along its ray using mean link lengths of ``samples``.

    ``samples`` are ground-truth joints (M x J x 3) in normalized coordinates;
    at most ``n_samples`` of them are drawn at random.
    """
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim != 3 or samples.shape[1] != layout.num_joints:
        raise ValueError(f"samples have {samples.shape[1] if samples.ndim == 3 else '?'} joints, "
                         f"layout {layout.name} needs {layout.num_joints}")
    rng = np.random.default_rng(seed)
    if len(samples) > n_samples:
        samples = samples[rng.choice(len(samples), n_samples, replace=False)]
    lengths = average_link_lengths(samples, layout)
    coords = np.zeros((layout.num_joints, 2))
    for chain, ang in zip(layout.chains, layout.angles_deg):
        ray = np.array([np.cos(np.radians(ang)), np.sin(np.radians(ang))])
        dist, prev = 0.0, layout.root
        for j in chain:
            dist += lengths[(prev, j)]
            coords[j] = dist * ray
            prev = j
    return SkeletonPrior(coords, layout.joint_names, build_adjacency(layout))


# ---------------------------------------------------------------------------
# text persistence


def save_skeleton(prior: SkeletonPrior, skel_path: str | Path, adj_path: str | Path) -> None:
    with open(skel_path, "w") as f:
        for name, (x, y) in zip(prior.joint_names, prior.coords2d):
            f.write(f"{name} {float(x)!r} {float(y)!r}\n")
    with open(adj_path, "w") as f:
        for name, a, b in zip(prior.joint_names, prior.adjacency.adj1, prior.adjacency.adj2):
            f.write(f"{name} {int(a)} {int(b)}\n")


def _parse(text: str) -> list[list[str]]:
    return [ln.split() for ln in text.splitlines() if ln.strip() and not ln.lstrip().startswith("#")]


def parse_skeleton(skel_text: str, adj_text: str) -> SkeletonPrior:
    rows = _parse(skel_text)
    names = tuple(r[0] for r in rows)
    coords = np.array([[float(r[1]), float(r[2])] for r in rows])
    adj_rows = {r[0]: (int(r[1]), int(r[2])) for r in _parse(adj_text)}
    if set(adj_rows) != set(names):
        raise ValueError("skeleton and adjacency files name different joints")
    adj1 = np.array([adj_rows[n][0] for n in names], dtype=np.int64)
    adj2 = np.array([adj_rows[n][1] for n in names], dtype=np.int64)
    J = len(names)
    if (adj1 < 0).any() or (adj2 < 0).any() or (adj1 >= J).any() or (adj2 >= J).any():
        raise ValueError("adjacency index out of range")
    return SkeletonPrior(coords, names, AdjacencyMap(adj1, adj2))


def load_skeleton(skel_path: str | Path, adj_path: str | Path) -> SkeletonPrior:
    return parse_skeleton(Path(skel_path).read_text(), Path(adj_path).read_text())


def default_skeleton(dataset: str = "icvl") -> SkeletonPrior:
    """The checked-in skeleton for ``dataset`` (icvl, msra or nyu)."""
    pkg = resources.files("handfold") / "data"
    return parse_skeleton((pkg / f"{dataset}.skel").read_text(), (pkg / f"{dataset}.adj").read_text())
