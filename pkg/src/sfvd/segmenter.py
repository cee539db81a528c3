"""Wire segmentation network, used both for sampling guidance and downstream evaluation."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import metrics
from .nets import UNetArch, build_unet, load_blob, to_blob
from .schedule import build_schedule, forward_sample
from .synth import FrameSet


class SegmenterModel(nn.Module):
    """Per-pixel wire probability from a single frame.

    Circular padding makes the network commute with circular shifts by
    multiples of 4 pixels (two 2x pooling levels).
    """

    def __init__(self, widths=(16, 32, 32), seed=0, noise_trained=False, schedule=None):
        super().__init__()
        self.arch = UNetArch(in_channels=1, out_channels=1, widths=tuple(widths), padding_mode="circular")
        self.seed = seed
        self.noise_trained = noise_trained
        self.schedule = schedule
        self.steps_trained = 0
        self.net = build_unet(self.arch, seed)

    def forward(self, x):
        """Logits, shape (B, 1, H, W)."""
        return self.net(x)

    def header(self):
        return {"role": "segmenter", "arch": self.arch.to_dict(), "seed": self.seed,
                "noise_trained": self.noise_trained, "steps_trained": self.steps_trained,
                "schedule": self.schedule.describe() if self.schedule is not None else None}


def _as_batch(x, dtype):
    x = torch.as_tensor(np.asarray(x) if not torch.is_tensor(x) else x, dtype=dtype)
    if x.ndim == 2:
        x = x[None, None]
    elif x.ndim == 3:
        x = x[:, None]
    return x


def segment(psi: SegmenterModel, frame):
    """Wire probability map with the input's spatial shape, values in (0, 1)."""
    dtype = next(psi.parameters()).dtype
    x = _as_batch(frame, dtype)
    if x.shape[-2] % 4 or x.shape[-1] % 4:
        raise ValueError("frame height and width must be multiples of 4")
    with torch.no_grad():
        p = torch.sigmoid(psi(x))
    shape = frame.shape
    return p.reshape(shape) if torch.is_tensor(frame) else p.reshape(shape).numpy()


def mask_log_likelihood(psi: SegmenterModel, x, mask):
    """Per-sample sum over pixels of M log s(x) + (1 - M) log(1 - s(x))."""
    logits = psi(x)
    mask = mask.to(logits.dtype)
    ll = mask * F.logsigmoid(logits) + (1 - mask) * F.logsigmoid(-logits)
    return ll.flatten(1).sum(1)


def seg_loss(logits, target):
    bce = F.binary_cross_entropy_with_logits(logits, target)
    p = torch.sigmoid(logits)
    soft_dice = 1 - (2 * (p * target).sum() + 1) / (p.sum() + target.sum() + 1)
    return bce + soft_dice


@dataclass
class SegTrainConfig:
    steps: int = 2000
    batch_size: int = 16
    lr: float = 1e-3
    seed: int = 0
    widths: tuple = (16, 32, 32)
    schedule_kind: str = "cosine"
    T: int = 1000
    eval_every: int = 0  # >0 with validation data: keep the best-validation parameters
    threshold: float = 0.5


@dataclass
class SegTrainLog:
    rows: list = field(default_factory=list)
    counters: dict = field(default_factory=dict)
    val: list = field(default_factory=list)

    @property
    def losses(self):
        return np.array([r[1] for r in self.rows])

    def smoothed_ratio(self, window=200):
        x = self.losses
        w = min(window, len(x) // 2)
        return float(x[-w:].mean() / x[:w].mean())

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "loss"])
            w.writerows(self.rows)


def _pool(data):
    if isinstance(data, FrameSet):
        data = data.annotated_only()
        return data.frames, data.masks
    frames, masks = data
    return frames, masks


def predict_masks(psi, frames, threshold=0.5, batch=256):
    frames = np.asarray(frames, dtype=np.float32)
    out = [segment(psi, frames[i:i + batch]) > threshold for i in range(0, len(frames), batch)]
    return np.concatenate(out)


def train_segmenter(data, config: SegTrainConfig = None, noise_augment=False, synthetic=None, val=None):
    """Minimize BCE + soft Dice on labeled frames.

    ``data`` is a FrameSet (annotated frames are used) or a ``(frames, masks)``
    pair. ``synthetic``, if given, is a second pool; each batch then draws
    half its samples from each. With ``noise_augment`` the inputs are
    diffusion-noised at a step drawn uniformly from ``0..T//2`` (0 = clean).
    """
    config = config or SegTrainConfig()
    frames, masks = _pool(data)
    if len(frames) == 0:
        raise ValueError("empty dataset")
    pools = [(torch.as_tensor(np.asarray(frames, np.float32))[:, None],
              torch.as_tensor(np.asarray(masks, np.float32))[:, None])]
    if synthetic is not None:
        sf, sm = _pool(synthetic)
        pools.append((torch.as_tensor(np.asarray(sf, np.float32))[:, None],
                      torch.as_tensor(np.asarray(sm, np.float32))[:, None]))
    sched = build_schedule(config.schedule_kind, config.T) if noise_augment else None
    psi = SegmenterModel(config.widths, config.seed, noise_augment, sched)
    opt = torch.optim.Adam(psi.parameters(), lr=config.lr)
    gen = torch.Generator().manual_seed(config.seed)
    log = SegTrainLog()
    best = (-1.0, None)
    share = [config.batch_size // len(pools)] * len(pools)
    share[0] += config.batch_size - sum(share)
    psi.train()
    for step in range(config.steps):
        xs, ys = [], []
        for (pf, pm), n in zip(pools, share):
            idx = torch.randint(0, len(pf), (n,), generator=gen)
            xs.append(pf[idx])
            ys.append(pm[idx])
        x, y = torch.cat(xs), torch.cat(ys)
        if noise_augment:
            t = torch.randint(0, config.T // 2 + 1, (len(x),), generator=gen)
            eps = torch.randn(x.shape, generator=gen)
            noised = t > 0
            if noised.any():
                x = x.clone()
                x[noised] = forward_sample(x[noised], t[noised], eps[noised], sched)
            log.counters["noised"] = log.counters.get("noised", 0) + int(noised.sum())
            log.counters["clean"] = log.counters.get("clean", 0) + int((~noised).sum())
        else:
            log.counters["clean"] = log.counters.get("clean", 0) + len(x)
        loss = seg_loss(psi(x), y)
        opt.zero_grad()
        loss.backward()
        opt.step()
        log.rows.append((step, loss.item()))
        psi.steps_trained += 1
        if val is not None and config.eval_every and ((step + 1) % config.eval_every == 0 or step + 1 == config.steps):
            psi.eval()
            vf, vm = _pool(val)
            score = float(np.mean([metrics.dice(p, g) for p, g in zip(predict_masks(psi, vf, config.threshold), vm)]))
            log.val.append((step, score))
            if score > best[0]:
                best = (score, to_blob(psi).copy())
            psi.train()
    psi.eval()
    if best[1] is not None:
        load_blob(psi, best[1])
    return psi, log


def evaluate_videos(psi, videos, threshold=0.5, tolerance_px=2.0):
    """Per-video frame-averaged reports and their aggregate."""
    reports = [metrics.video_metrics(predict_masks(psi, v.frames, threshold), v.masks, tolerance_px)
               for v in videos]
    return reports, metrics.SegMetricsReport.mean(reports)


@dataclass
class AugmentationReport:
    seed: int
    baseline: metrics.SegMetricsReport
    augmented: metrics.SegMetricsReport
    baseline_videos: list = field(default_factory=list, repr=False)
    augmented_videos: list = field(default_factory=list, repr=False)

    @property
    def dice_gain(self):
        return self.augmented.dice - self.baseline.dice


def augmentation_experiment(splits: dict, synthesized, config: SegTrainConfig = None, seeds=(0, 1, 2),
                            baseline_cache: dict = None):
    """Train real-only and real+synthetic segmenters per seed; evaluate both on the test split.

    ``splits`` maps ``train``/``val``/``test`` to lists of LabeledVideo;
    ``synthesized`` is a list of videos carrying masks (LabeledVideo or
    GeneratedVideo). Pass the same ``baseline_cache`` dict to several calls
    with identical splits and config to train each real-only baseline once.
    """
    config = config or SegTrainConfig()
    ids = {k: {v.meta.get("video_id", id(v)) for v in splits[k]} for k in ("train", "val", "test")}
    if ids["train"] & ids["test"] or ids["train"] & ids["val"] or ids["val"] & ids["test"]:
        raise ValueError("train/val/test splits share videos")
    if any(getattr(v, "masks", None) is None for v in synthesized):
        raise ValueError("synthesized videos must carry masks")
    real = FrameSet.from_videos(splits["train"])
    val = FrameSet.from_videos(splits["val"]) if splits.get("val") else None
    synth = (np.concatenate([np.asarray(v.frames, np.float32) for v in synthesized]),
             np.concatenate([np.asarray(v.masks, np.uint8) for v in synthesized]))
    out = []
    for seed in seeds:
        cfg = SegTrainConfig(**{**config.__dict__, "seed": seed})
        if baseline_cache is not None and seed in baseline_cache:
            bv, b = baseline_cache[seed]
        else:
            base, _ = train_segmenter(real, cfg, val=val)
            bv, b = evaluate_videos(base, splits["test"], cfg.threshold)
            if baseline_cache is not None:
                baseline_cache[seed] = (bv, b)
        aug, _ = train_segmenter(real, cfg, synthetic=synth, val=val)
        av, a = evaluate_videos(aug, splits["test"], cfg.threshold)
        out.append(AugmentationReport(seed, b, a, bv, av))
    return out


def write_augmentation_csv(path, reports):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["seed", "arm", *metrics.SEG_COLUMNS])
        for r in reports:
            w.writerow([r.seed, "baseline", *[f"{v:.6g}" for v in r.baseline.row()]])
            w.writerow([r.seed, "augmented", *[f"{v:.6g}" for v in r.augmented.row()]])
