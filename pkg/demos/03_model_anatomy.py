"""What the network looks like: skeleton, parameter and FLOP ladder, stages.

The decoder folds a fixed 2D hand skeleton into 3D joints. Every extra local
folding block adds about half a million parameters and one refinement stage.
"""
import numpy as np

from handfold import HandFoldingNet, ModelConfig, count_flops, count_params, default_skeleton
from handfold.synth import synth_hands

skel = default_skeleton("icvl")
print("2D skeleton (normalized units):")
for name, (x, y), a, b in zip(skel.joint_names, skel.coords2d, skel.adjacency.adj1, skel.adjacency.adj2):
    print(f"  {name:<10} ({x:+.3f}, {y:+.3f})  maps to {skel.joint_names[a]}, {skel.joint_names[b]}")

print("\nK  params     GMAC   GFLOP(2 per MAC)")
for k in range(4):
    cfg = ModelConfig(num_local_folds=k)
    print(f"{k}  {count_params(cfg):>9,}  {count_flops(cfg, 'mac') / 1e9:.3f}  {count_flops(cfg, 'mac2') / 1e9:.3f}")

print("\nablations at K=2:")
for label, kw in [("full", {}), ("no local feature", dict(use_local_feature=False)),
                  ("no spatial dependency", dict(use_spatial_dependency=False)),
                  ("local features from input", dict(local_level=0)),
                  ("local features from level 2", dict(local_level=2))]:
    print(f"  {label:<28} {count_params(ModelConfig(**kw)):>9,}")

frames = synth_hands(2, seed=1)
model = HandFoldingNet(ModelConfig(num_local_folds=2), skel, seed=0)
est = model.forward(np.stack([f.points for f in frames]), np.stack([f.normals for f in frames]), 0, training=False)
print(f"\nuntrained forward on 2 frames: {len(est.stages)} stages of shape {est.stages[0].shape}, "
      f"embeddings {est.embeddings[0].shape}")
