"""Train the scene and motion models plus a guide segmenter, then synthesize a few videos.

Run: python3 demos/03_train_and_synthesize.py [steps] [out_dir]

The default of 2000 steps per model takes roughly 10 minutes on one CPU core;
pass a smaller number for a quick look at the mechanics.
"""
# %%
import sys
import time
from pathlib import Path

import numpy as np
import torch

from sfvd import io
from sfvd.cli import contact_sheet
from sfvd.denoiser import TrainConfig, train_motion, train_scene
from sfvd.metrics import dice
from sfvd.sampler import VideoGuidance, generate_videos
from sfvd.segmenter import SegTrainConfig, predict_masks, train_segmenter
from sfvd.synth import FrameSet, consecutive_mse, make_fvideo_set

torch.set_num_threads(1)
steps = int(sys.argv[1]) if len(sys.argv) > 1 else 2000
out = Path(sys.argv[2] if len(sys.argv) > 2 else "demo_out")
out.mkdir(exist_ok=True)

real = make_fvideo_set(40, seed=0)
frames = FrameSet.from_videos(real)

# %% Scene model: one frame given its mask (or the absent-mask sentinel).
t0 = time.time()
scene, log = train_scene(frames, TrainConfig(steps=steps, lr=3e-4, ema_decay=0.995))
print(f"scene: smoothed loss ratio {log.smoothed_ratio():.3f} in {time.time() - t0:.0f} s")

# %% Motion model: a frame given its mask and another frame of the same video at signed distance.
t0 = time.time()
motion, log = train_motion(real, TrainConfig(steps=steps, lr=3e-4, ema_decay=0.995))
print(f"motion: smoothed loss ratio {log.smoothed_ratio():.3f}, conditioning counts {log.counters}")

# %% Guide segmenter, trained on noised inputs so its gradient is useful during sampling.
guide, _ = train_segmenter(frames, SegTrainConfig(steps=steps), noise_augment=True)
oracle, _ = train_segmenter(frames, SegTrainConfig(steps=steps, seed=1))
for name, model in (("scene", scene), ("motion", motion), ("guide", guide)):
    io.write_ckpt(out / f"{name}.ckpt", model)

# %% Synthesize videos for unseen mask sequences.
masks = [v.masks for v in make_fvideo_set(4, seed=99)]
t0 = time.time()
videos = generate_videos(masks, scene, motion, guide, VideoGuidance(), seeds=[0, 1, 2, 3])
print(f"synthesized {len(videos)} videos in {time.time() - t0:.0f} s")
for i, v in enumerate(videos):
    d = np.mean([dice(p, m) for p, m in zip(predict_masks(oracle, v.frames), v.masks)])
    print(f"video {i}: gamma={v.gamma:5.2f}  oracle Dice vs conditioning masks {d:.2f}  "
          f"consecutive MSE {consecutive_mse(v.frames):.4f}")
    contact_sheet(out / f"synth_{i}.png", v.frames, v.masks)
print("real consecutive MSE:", round(float(np.mean([consecutive_mse(v.frames) for v in real])), 4))
