"""A short pretraining run on synthetic Sentinel-2 regions.

This trains the full-width model for a few dozen steps on one CPU, saves a
checkpoint, resumes from it, and confirms that the resumed run continues the
same trajectory.  Loss is the masked reconstruction error on per-patch
normalized pixels, so it starts near 1.

Run with ``python3 demos/03_pretrain_tiny.py`` (about a minute).
"""
import tempfile
from pathlib import Path

import numpy as np

from geomae.synthgen import SynthConfig, SynthDataset
from geomae.trainer import Checkpoint, TrainConfig, Trainer

data = SynthDataset(SynthConfig(seed=0, profiles=["sentinel2"], revisits={"sentinel2": (2, 2)}), 16)
batch = 4
config = TrainConfig(effective_batch=batch, base_lr=1e-3 * 256 / batch, steps=40, warmup_steps=4,
                     mask_scheme="tube", mask_ratio=0.75, seed=0, workers=2)

trainer = Trainer(config, data)
history = trainer.run(20)
for m in history[::5]:
    print(f"step {m['step']:3d}  loss {m['loss']:.4f}  lr {m['lr']:.2e}  grad norm {m['grad_norm']:.3f}")

with tempfile.TemporaryDirectory() as tmp:
    path = Path(tmp) / "step20.emck"
    trainer.checkpoint().save(path)
    resumed = Trainer(config, data, checkpoint=Checkpoint.load(path))

tail_a = trainer.run()
tail_b = resumed.run()
print(f"\nloss over the last 10 steps: {np.mean([m['loss'] for m in tail_a[-10:]]):.4f}")
print(f"resumed trajectory identical: {tail_a == tail_b}")
