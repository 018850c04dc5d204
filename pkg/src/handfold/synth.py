"""Procedural articulated hands rendered to depth images.

A hand is a set of capsules (finger segments and palm struts) driven by
random joint angles inside rough anatomical limits. It is ray-cast from a
pinhole camera into a 16-bit depth image and then goes through the same
preprocessing path as real data.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .preprocess import CameraIntrinsics, PointFrame, preprocess_depth
from .skeleton import LAYOUTS, HandLayout

SYNTH_INTRINSICS = CameraIntrinsics(475.0, 475.0, 320.0, 240.0)
SYNTH_SIZE = (480, 640)

# hand-local frame, mm: wrist at origin, fingers along +y, palm facing -z
_MCP = {"index": (22.0, 86.0), "middle": (2.0, 90.0), "ring": (-17.0, 85.0), "pinky": (-33.0, 75.0)}
_LENGTHS = {"index": (40.0, 25.0, 20.0), "middle": (45.0, 28.0, 22.0),
            "ring": (42.0, 27.0, 21.0), "pinky": (33.0, 20.0, 18.0), "thumb": (38.0, 32.0, 27.0)}
_SPREAD = {"index": 8.0, "middle": 0.0, "ring": -8.0, "pinky": -16.0}
_RADII = (9.0, 8.0, 7.0)
_THUMB_BASE = (20.0, 18.0, -4.0)
_FINGERS = ("index", "middle", "ring", "pinky")


def _rot(axis: str, deg: float) -> np.ndarray:
    a = np.radians(deg)
    c, s = np.cos(a), np.sin(a)
    if axis == "x":
        return np.array([[1, 0, 0], [0, c, -s], [0, s, c]])
    if axis == "y":
        return np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]])
    return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])


def _chain(base: np.ndarray, frame: np.ndarray, lengths, flex_deg) -> list[np.ndarray]:
    # flexion rotates about the chain's local x axis, curling toward the palm (-z)
    pts = [base]
    phi = 0.0
    for length, f in zip(lengths, flex_deg):
        phi += np.radians(f)
        d = frame @ np.array([0.0, np.cos(phi), -np.sin(phi)])
        pts.append(pts[-1] + length * d)
    return pts


def pose_hand(rng: np.random.Generator) -> tuple[np.ndarray, list[tuple[np.ndarray, np.ndarray, float]]]:
    """Random 21-joint hand (wrist, then mcp/pip/dip/tip per finger, thumb last) plus capsules."""
    joints = [np.zeros(3)]
    capsules = []
    for name in _FINGERS:
        mcp = np.array([*_MCP[name], 0.0])
        frame = _rot("z", _SPREAD[name] + rng.uniform(-8, 8))
        pip = rng.uniform(0, 100)
        flex = (rng.uniform(-10, 80), pip, pip * 2 / 3 + rng.uniform(-5, 5))
        pts = _chain(mcp, frame, _LENGTHS[name], flex)
        joints.extend(pts)
        for a, b, r in zip(pts[:-1], pts[1:], _RADII):
            capsules.append((a, b, r))
        capsules.append((np.array([mcp[0] * 0.6, 12.0, 0.0]), mcp, 13.0))
    base = np.array(_THUMB_BASE)
    frame = _rot("z", -rng.uniform(30, 60)) @ _rot("y", -rng.uniform(10, 40))
    flex = (rng.uniform(0, 40), rng.uniform(0, 50), rng.uniform(0, 70))
    pts = _chain(base, frame, _LENGTHS["thumb"], flex)
    joints.extend(pts)
    for a, b, r in zip(pts[:-1], pts[1:], (12.0, 10.0, 8.5)):
        capsules.append((a, b, r))
    capsules.append((np.array([-20.0, 8.0, 0.0]), np.array([20.0, 8.0, 0.0]), 14.0))
    capsules.append((np.array([_MCP["index"][0], _MCP["index"][1], 0.0]),
                     np.array([_MCP["pinky"][0], _MCP["pinky"][1], 0.0]), 12.0))
    return np.array(joints), capsules


def layout_joints(j21: np.ndarray, layout: HandLayout) -> np.ndarray:
    """Map the internal 21-joint hand to a dataset joint layout."""
    wrist = j21[0]
    f = {name: j21[1 + 4 * i: 5 + 4 * i] for i, name in enumerate(_FINGERS + ("thumb",))}
    palm = 0.5 * (wrist + f["middle"][0])
    if layout.name == "msra":
        return j21.copy()
    if layout.name == "icvl":
        rows = [palm]
        for name in ("thumb",) + _FINGERS:
            rows.extend(f[name][[1, 2, 3]] if name == "thumb" else f[name][[0, 1, 3]])
        return np.array(rows)
    if layout.name == "nyu":
        side = 0.5 * (f["index"][0] - f["pinky"][0])
        side[2] = 0.0
        rows = []
        for name in ("pinky", "ring", "middle", "index"):
            rows.extend([f[name][3], f[name][1]])
        rows.extend([f["thumb"][3], f["thumb"][2], f["thumb"][1], wrist + 0.5 * side, wrist - 0.5 * side, palm])
        return np.array(rows)
    raise ValueError(f"unknown layout {layout.name!r}")


def _raycast_capsules(dirs: np.ndarray, capsules) -> np.ndarray:
    """Nearest hit distance along unit rays from the origin; inf where nothing is hit."""
    best = np.full(len(dirs), np.inf)
    for pa, pb, r in capsules:
        ba = pb - pa
        oa = -pa
        baba = ba @ ba
        bard = dirs @ ba
        baoa = ba @ oa
        rdoa = dirs @ oa
        oaoa = oa @ oa
        a = baba - bard ** 2
        b = baba * rdoa - baoa * bard
        c = baba * oaoa - baoa ** 2 - r * r * baba
        h = b * b - a * c
        hit = h >= 0
        with np.errstate(invalid="ignore", divide="ignore"):
            t = (-b - np.sqrt(np.where(hit, h, 0))) / a
            y = baoa + t * bard
            body = hit & (y > 0) & (y < baba) & (t > 0)
            best = np.where(body, np.minimum(best, t), best)
            for end in (pa, pb):
                oc = -end
                bb = dirs @ oc
                cc = oc @ oc - r * r
                hh = bb * bb - cc
                tc = -bb - np.sqrt(np.where(hh > 0, hh, 0))
                ok = (hh > 0) & (tc > 0)
                best = np.where(ok, np.minimum(best, tc), best)
    return best


@dataclass
class SynthHand:
    depth: np.ndarray  # H x W uint16 mm
    joints_mm: np.ndarray  # J x 3 camera space
    intrinsics: CameraIntrinsics


def render_hand(rng: np.random.Generator, layout: HandLayout,
                intrinsics: CameraIntrinsics = SYNTH_INTRINSICS, size: tuple[int, int] = SYNTH_SIZE) -> SynthHand:
    j21, caps = pose_hand(rng)
    center = np.array([0.0, 60.0, 0.0])
    R = _rot("z", rng.uniform(-180, 180)) @ _rot("x", rng.uniform(-30, 30)) @ _rot("y", rng.uniform(-30, 30))
    t = np.array([rng.uniform(-40, 40), rng.uniform(-40, 40), rng.uniform(350, 450)])

    def place(p):
        return (np.asarray(p) - center) @ R.T + t

    caps = [(place(a), place(b), r) for a, b, r in caps]
    joints = place(layout_joints(j21, layout))
    ends = np.array([p for a, b, _ in caps for p in (a, b)])
    uv = intrinsics.project(ends)
    pad = 20.0 * intrinsics.fx / ends[:, 2].min()
    h, w = size
    u0, v0 = (np.floor(uv.min(axis=0) - pad).astype(int)).clip(0)
    u1, v1 = np.ceil(uv.max(axis=0) + pad).astype(int)
    u1, v1 = min(u1, w - 1), min(v1, h - 1)
    vv, uu = np.mgrid[v0:v1 + 1, u0:u1 + 1]
    dirs = np.stack([(uu - intrinsics.cx) / intrinsics.fx, (vv - intrinsics.cy) / intrinsics.fy,
                     np.ones(uu.shape)], axis=-1).reshape(-1, 3)
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    dist = _raycast_capsules(dirs, caps)
    z = np.where(np.isfinite(dist), dist * dirs[:, 2], 0.0)
    depth = np.zeros(size, dtype=np.uint16)
    depth[v0:v1 + 1, u0:u1 + 1] = np.rint(z).reshape(uu.shape).astype(np.uint16)
    return SynthHand(depth, joints, intrinsics)


def synth_hands(count: int, seed: int = 0, layout: str | HandLayout = "icvl", n_points: int = 1024,
                k: int = 30) -> list[PointFrame]:
    """``count`` preprocessed synthetic frames with normalized ground-truth joints."""
    if count < 1:
        raise ValueError("count must be >= 1")
    lay = LAYOUTS[layout] if isinstance(layout, str) else layout
    rng = np.random.default_rng(seed)
    frames = []
    for _ in range(count):
        hand = render_hand(rng, lay)
        frames.append(preprocess_depth(hand.depth, hand.intrinsics, None, n_points, k,
                                       rng, hand.joints_mm))
    return frames
