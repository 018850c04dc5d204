"""Training on synthetic hands, evaluation in millimetres, checkpoints.

A reduced-width model trains for a few epochs on eight rendered hands so the
demo finishes in about a minute. The checkpoint reloads bit-exactly, and the
success-rate curve is written as CSV.
"""
import tempfile
from pathlib import Path

import numpy as np

from handfold import ModelConfig, TrainConfig, load_checkpoint, synth_hands, train
from handfold.encoder import SetAbstractionConfig
from handfold.losses import success_rate_curve, write_curve_csv
from handfold.training import evaluate_mm, predict

small = ModelConfig(num_local_folds=1, n_points=256,
                    sa1=SetAbstractionConfig(0.24, 16, 64, (16, 16, 32)),
                    sa2=SetAbstractionConfig(0.4, 16, 16, (32, 32, 64)),
                    global_mlp=(32, 32, 128), fold_channels=64, local_nsample=16)
frames = synth_hands(8, seed=2, n_points=256)

with tempfile.TemporaryDirectory() as tmp:
    out = Path(tmp)
    result = train(frames, small, TrainConfig(epochs=20, batch=8, lr=3e-3, augment=False, seed=1,
                                              checkpoint_every=10), out_dir=out)
    for e in result.log[::5] + [result.log[-1]]:
        print(e.to_line())

    model, _, header = load_checkpoint(out / "last.hfld")
    same = np.array_equal(predict(model, frames), predict(result.model, frames))
    print(f"checkpoint epoch {header['epoch']}, reloaded predictions identical: {same}")

    errs = evaluate_mm(model, frames)
    thresholds = np.arange(0, 81, 2)
    write_curve_csv(out / "curve.csv", thresholds, success_rate_curve(errs, thresholds))
    print(f"eval-mode mean error {errs.mean():.1f} mm; curve rows: "
          f"{len((out / 'curve.csv').read_text().splitlines()) - 1}")
