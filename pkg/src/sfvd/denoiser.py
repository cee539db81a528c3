"""Condition-aware denoising networks for the scene and motion models.

Both roles share one encoder-decoder; they differ in input channels and in
whether the signed frame distance is embedded next to the timestep.

Channel layout (after the noisy frame ``x_t``):

* scene:  ``[mask]``
* motion: ``[mask, ref_frame_1, ref_frame_2]`` and a frame distance scalar

An absent mask is an all ``-1`` channel, an absent frame an all ``0``
channel, and an absent frame distance is encoded as ``0`` (present
distances are never zero).
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .nets import UNet, UNetArch, build_unet
from .schedule import (NoiseSchedule, build_schedule, forward_sample, posterior_mean_variance,
                       reverse_log_variance, reverse_mean)

SCENE = "scene"
MOTION = "motion"
MASK_ABSENT = -1.0
FRAME_ABSENT = 0.0
DELTA_ABSENT = 0

_COND_CHANNELS = {SCENE: 1, MOTION: 3}


@dataclass
class ConditionSet:
    """Conditions for one predict call. ``None`` marks an absent condition."""

    mask: torch.Tensor = None
    ref_frame_1: torch.Tensor = None
    ref_frame_2: torch.Tensor = None
    frame_distance: object = None

    def validate(self, role):
        has_ref = self.ref_frame_1 is not None or self.ref_frame_2 is not None
        if role == SCENE and has_ref:
            raise ValueError("the scene model takes no reference frames")
        if role == MOTION and self.mask is None:
            raise ValueError("the motion model requires a mask")
        if has_ref != (self.frame_distance is not None):
            raise ValueError("frame_distance must be given exactly when a reference frame is")
        if self.frame_distance is not None:
            d = torch.as_tensor(self.frame_distance)
            if torch.any(d == 0):
                raise ValueError("frame distance must be non-zero")


def encode_conditions(role, cond: ConditionSet, like: torch.Tensor):
    """Turn a ConditionSet into (channels, delta) tensors shaped for ``like``."""
    cond.validate(role)
    B = like.shape[0]

    def chan(v, fill):
        if v is None:
            return torch.full_like(like, fill)
        v = torch.as_tensor(v, dtype=like.dtype, device=like.device)
        if v.shape != like.shape:
            raise ValueError(f"condition shape {tuple(v.shape)} does not match x_t {tuple(like.shape)}")
        return v

    chans = [chan(cond.mask, MASK_ABSENT)]
    delta = None
    if role == MOTION:
        chans += [chan(cond.ref_frame_1, FRAME_ABSENT), chan(cond.ref_frame_2, FRAME_ABSENT)]
        d = DELTA_ABSENT if cond.frame_distance is None else cond.frame_distance
        delta = torch.as_tensor(d, dtype=like.dtype, device=like.device).expand(B).clone()
    return torch.cat(chans, dim=1), delta


class DenoiserModel(nn.Module):
    """Predicts (eps_hat, v_hat) from a noisy frame and its condition channels."""

    def __init__(self, role, schedule: NoiseSchedule, widths=(32, 32, 64), seed=0):
        super().__init__()
        if role not in _COND_CHANNELS:
            raise ValueError(f"unknown role {role!r}")
        self.role = role
        self.schedule = schedule
        self.seed = seed
        self.arch = UNetArch(in_channels=1 + _COND_CHANNELS[role], out_channels=2,
                             widths=tuple(widths), emb_inputs=2 if role == MOTION else 1)
        self.net = build_unet(self.arch, seed)

    def forward(self, x_t, t, cond_channels, delta=None):
        t = torch.as_tensor(t, device=x_t.device).expand(x_t.shape[0])
        scalars = [t] if delta is None else [t, delta]
        out = self.net(torch.cat([x_t, cond_channels], dim=1), scalars)
        return out[:, :1], torch.sigmoid(out[:, 1:])

    def header(self):
        return {"role": self.role, "arch": self.arch.to_dict(), "schedule": self.schedule.describe(),
                "seed": self.seed}


def predict(model: DenoiserModel, x_t, t, cond: ConditionSet, sched: NoiseSchedule = None):
    """Evaluate the model at step ``t`` of ``sched`` (default: the training schedule)."""
    sched = sched or model.schedule
    sched.check_step(t)
    p = next(model.parameters())
    x_t = x_t.to(p.dtype)
    channels, delta = encode_conditions(model.role, cond, x_t)
    if torch.is_tensor(t) and t.ndim > 0:
        t_model = torch.as_tensor(sched.timesteps[t.long().cpu().numpy() - 1], device=x_t.device)
    else:
        t_model = torch.tensor(int(sched.timesteps[int(t) - 1]), device=x_t.device)
    return model(x_t, t_model.to(x_t.dtype), channels, delta)


# -- losses ----------------------------------------------------------------------------

def normal_kl(mean1, logvar1, mean2, logvar2):
    """Elementwise KL(N(mean1, e^logvar1) || N(mean2, e^logvar2))."""
    logvar1 = torch.as_tensor(logvar1, dtype=mean1.dtype)
    logvar2 = torch.as_tensor(logvar2, dtype=mean1.dtype)
    return 0.5 * (-1.0 + logvar2 - logvar1 + torch.exp(logvar1 - logvar2)
                  + (mean1 - mean2) ** 2 * torch.exp(-logvar2))


def _std_normal_cdf(x):
    return 0.5 * (1.0 + torch.erf(x / math.sqrt(2.0)))


def discretized_gaussian_log_likelihood(x0, mean, log_scale, bin_width=2.0 / 255.0):
    """Log-probability of ``x0`` under a Gaussian discretized to 8-bit bins on [-1, 1]."""
    centered = x0 - mean
    inv_std = torch.exp(-log_scale)
    cdf_plus = _std_normal_cdf(inv_std * (centered + bin_width / 2))
    cdf_min = _std_normal_cdf(inv_std * (centered - bin_width / 2))
    log_cdf_plus = torch.log(cdf_plus.clamp(min=1e-12))
    log_one_minus_cdf_min = torch.log((1.0 - cdf_min).clamp(min=1e-12))
    log_delta = torch.log((cdf_plus - cdf_min).clamp(min=1e-12))
    return torch.where(x0 < -0.999, log_cdf_plus, torch.where(x0 > 0.999, log_one_minus_cdf_min, log_delta))


@dataclass
class LossTerms:
    total: torch.Tensor
    simple: torch.Tensor
    vlb: torch.Tensor


def vlb_terms(model, x0, x_t, t, eps_hat, v_hat):
    """Per-sample variational bound term L_{t-1} in bits/dim, eps path gradient-stopped."""
    sched = model.schedule
    mean_model = reverse_mean(x_t, eps_hat.detach(), t, sched)
    logvar_model = reverse_log_variance(v_hat, t, sched)
    true_mean, true_logvar = posterior_mean_variance(x0, x_t, t, sched)
    kl = normal_kl(true_mean, true_logvar, mean_model, logvar_model).flatten(1).mean(1) / math.log(2.0)
    nll = -discretized_gaussian_log_likelihood(x0, mean_model, 0.5 * logvar_model).flatten(1).mean(1) / math.log(2.0)
    t = torch.as_tensor(t).expand(x0.shape[0])
    return torch.where(t == 1, nll, kl)


def _hybrid(model, x0, t, eps, channels, delta, lam):
    x_t = forward_sample(x0, t, eps, model.schedule)
    t_in = torch.as_tensor(t, dtype=x0.dtype).expand(x0.shape[0])
    eps_hat, v_hat = model(x_t, t_in, channels, delta)
    simple = F.mse_loss(eps_hat, eps)
    # T * E_t[L_t] estimates the full bound, so lam=0.001 at T=1000 weighs one term at 1.
    vlb = model.schedule.T * vlb_terms(model, x0, x_t, t, eps_hat, v_hat).mean()
    return LossTerms(simple + lam * vlb, simple, vlb)


def hybrid_loss(model: DenoiserModel, x0, t, eps, cond: ConditionSet, lam=0.001, return_terms=False):
    """L_simple + lam * L_vlb for one batch."""
    model.schedule.check_step(t)
    x0 = x0.to(next(model.parameters()).dtype)
    eps = eps.to(x0.dtype)
    channels, delta = encode_conditions(model.role, cond, x0)
    terms = _hybrid(model, x0, t, eps, channels, delta, lam)
    return terms if return_terms else terms.total


# -- training ----------------------------------------------------------------------------

@dataclass
class TrainConfig:
    steps: int = 2000
    batch_size: int = 16
    lr: float = 3e-4
    grad_clip: float = 1.0
    lam: float = 0.001
    seed: int = 0
    p_drop: float = 0.2
    ema_decay: float = 0.995  # >0: return an exponential moving average of the weights
    widths: tuple = (32, 32, 64)
    schedule_kind: str = "cosine"
    T: int = 1000


@dataclass
class LossLog:
    rows: list = field(default_factory=list)
    counters: dict = field(default_factory=dict)

    def add(self, step, terms: LossTerms):
        self.rows.append((step, terms.total.item(), terms.simple.item(), terms.vlb.item()))

    @property
    def losses(self):
        return np.array([r[1] for r in self.rows])

    def smoothed_ratio(self, window=200):
        """Mean of the last ``window`` losses over the mean of the first ``window``."""
        x = self.losses
        w = min(window, len(x) // 2)
        return float(x[-w:].mean() / x[:w].mean())

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "loss", "l_simple", "l_vlb"])
            w.writerows(self.rows)

    def count(self, key, n=1):
        self.counters[key] = self.counters.get(key, 0) + int(n)


def _optimize(model, config: TrainConfig, make_batch, log: LossLog):
    opt = torch.optim.Adam(model.parameters(), lr=config.lr)
    gen = torch.Generator().manual_seed(config.seed)
    T = model.schedule.T
    ema = [p.detach().clone() for p in model.parameters()] if config.ema_decay > 0 else None
    model.train()
    for step in range(config.steps):
        x0, channels, delta = make_batch(gen)
        t = torch.randint(1, T + 1, (x0.shape[0],), generator=gen)
        eps = torch.randn(x0.shape, generator=gen, dtype=x0.dtype)
        terms = _hybrid(model, x0, t, eps, channels, delta, config.lam)
        opt.zero_grad()
        terms.total.backward()
        nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip)
        opt.step()
        log.add(step, terms)
        if ema is not None:
            with torch.no_grad():
                for e, p in zip(ema, model.parameters()):
                    e.lerp_(p, 1.0 - config.ema_decay)
    if ema is not None:
        with torch.no_grad():
            for e, p in zip(ema, model.parameters()):
                p.copy_(e)
    model.eval()
    return model


def train_scene(dataset, config: TrainConfig = None):
    """Train the scene model on a mixed pool of annotated and unannotated frames.

    Annotated frames get their mask as condition, unannotated ones the
    mask-absent sentinel, so one network learns both the conditional and the
    unconditional distribution.
    """
    config = config or TrainConfig()
    frames = torch.as_tensor(np.asarray(dataset.frames, dtype=np.float32))[:, None]
    masks = torch.as_tensor(np.asarray(dataset.masks, dtype=np.float32))[:, None]
    annotated = torch.as_tensor(np.asarray(dataset.annotated, dtype=bool))
    if len(frames) == 0:
        raise ValueError("empty dataset")
    if not annotated.any():
        raise ValueError("dataset has no annotated frames; the mask condition cannot be learned")
    cond = torch.where(annotated[:, None, None, None], masks, torch.full_like(masks, MASK_ABSENT))
    sched = build_schedule(config.schedule_kind, config.T)
    model = DenoiserModel(SCENE, sched, config.widths, config.seed)
    log = LossLog()

    def make_batch(gen):
        idx = torch.randint(0, len(frames), (config.batch_size,), generator=gen)
        log.count("annotated", annotated[idx].sum())
        log.count("unannotated", (~annotated[idx]).sum())
        return frames[idx], cond[idx], None

    return _optimize(model, config, make_batch, log), log


def train_motion(videos, config: TrainConfig = None):
    """Train the motion model on fully annotated videos.

    Each example is a target frame with its mask and one reference frame
    from the same video at a signed offset ``delta = target - ref``. With
    probability ``p_drop`` the reference is replaced by the frame-absent
    sentinel (and delta by its absent code) so the mask-only prediction is
    learned too.
    """
    config = config or TrainConfig()
    if len(videos) == 0:
        raise ValueError("empty dataset")
    for v in videos:
        if not np.all(v.annotated):
            raise ValueError("motion training needs fully annotated videos")
    lengths = {len(v.frames) for v in videos}
    if min(lengths) < 2:
        raise ValueError("videos need at least two frames")
    frames = [torch.as_tensor(np.asarray(v.frames, dtype=np.float32)) for v in videos]
    masks = [torch.as_tensor(np.asarray(v.masks, dtype=np.float32)) for v in videos]
    sched = build_schedule(config.schedule_kind, config.T)
    model = DenoiserModel(MOTION, sched, config.widths, config.seed)
    log = LossLog()

    def make_batch(gen):
        vid = torch.randint(0, len(videos), (config.batch_size,), generator=gen).tolist()
        u = torch.rand(config.batch_size, 3, generator=gen)
        xs, ms, refs, deltas = [], [], [], []
        for k, v in enumerate(vid):
            n = len(frames[v])
            i = int(u[k, 0] * n)
            j = int(u[k, 1] * (n - 1))
            j += j >= i  # any frame other than i
            drop = bool(u[k, 2] < config.p_drop)
            xs.append(frames[v][i])
            ms.append(masks[v][i])
            if drop:
                refs.append(torch.full_like(frames[v][i], FRAME_ABSENT))
                deltas.append(DELTA_ABSENT)
                log.count("ref_absent")
            else:
                refs.append(frames[v][j])
                deltas.append(i - j)
                log.count("delta_pos" if i > j else "delta_neg")
        x0 = torch.stack(xs)[:, None]
        ref = torch.stack(refs)[:, None]
        channels = torch.cat([torch.stack(ms)[:, None], ref, torch.full_like(ref, FRAME_ABSENT)], 1)
        return x0, channels, torch.tensor(deltas, dtype=torch.float32)

    return _optimize(model, config, make_batch, log), log
