"""Reverse diffusion loop and three-stage video generation.

A video is generated frame by frame following a :class:`FramePlan`. In
subdivision mode the first frame comes from the scene model, the last frame
from the motion model conditioned on the first, and the rest by repeatedly
filling the midpoint of each generated pair with frame-consistency
composition. Chronological mode (the ablation) conditions every frame on its
predecessor instead.

Frame distances are signed: ``delta = target - reference``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from . import guidance as G
from .denoiser import ConditionSet, DenoiserModel, encode_conditions
from .schedule import NoiseSchedule, reverse_mean, reverse_variance

LEADING, CONCLUDING, INTERMEDIATE = "leading", "concluding", "intermediate"
SUBDIVISION, CHRONOLOGICAL = "subdivision", "chronological"


@dataclass(frozen=True)
class PlanStep:
    target: int
    refs: tuple = ()  # ((ref_index, delta), ...)
    stage: str = LEADING


@dataclass(frozen=True)
class FramePlan:
    n_frames: int
    steps: tuple

    @property
    def order(self):
        return [s.target for s in self.steps]

    def validate(self):
        seen = set()
        for s in self.steps:
            if s.target in seen:
                raise ValueError(f"frame {s.target} generated twice")
            want = {LEADING: 0, CONCLUDING: 1, INTERMEDIATE: (1, 2)}[s.stage]
            if len(s.refs) not in np.atleast_1d(want):
                raise ValueError(f"stage {s.stage} with {len(s.refs)} references")
            for ref, delta in s.refs:
                if ref not in seen:
                    raise ValueError(f"frame {s.target} uses frame {ref} before it exists")
                if delta != s.target - ref:
                    raise ValueError("delta must equal target - reference")
            seen.add(s.target)
        if seen != set(range(self.n_frames)):
            raise ValueError("plan does not cover every frame exactly once")
        return self


def subdivision_order(n_frames: int) -> FramePlan:
    """Leading, concluding, then breadth-first floor-midpoint insertion."""
    if n_frames < 1:
        raise ValueError("need at least one frame")
    steps = [PlanStep(0)]
    if n_frames > 1:
        last = n_frames - 1
        steps.append(PlanStep(last, ((0, last),), CONCLUDING))
        level = [(0, last)]
        while level:
            nxt = []
            for a, b in level:
                if b - a < 2:
                    continue
                m = (a + b) // 2
                steps.append(PlanStep(m, ((a, m - a), (b, m - b)), INTERMEDIATE))
                nxt += [(a, m), (m, b)]
            level = nxt
    return FramePlan(n_frames, tuple(steps))


def chronological_order(n_frames: int) -> FramePlan:
    if n_frames < 1:
        raise ValueError("need at least one frame")
    steps = [PlanStep(0)] + [PlanStep(i, ((i - 1, 1),), CONCLUDING) for i in range(1, n_frames)]
    return FramePlan(n_frames, tuple(steps))


@dataclass
class VideoGuidance:
    """Per-stage guidance weights and the segmentation-guidance range.

    If ``gamma`` is set it is used for every video; otherwise each video
    draws one value uniformly from ``[0, gamma_max]``.
    """

    omega_scene: float = G.OMEGA_SCENE
    omega_concluding: float = G.OMEGA_CONCLUDING
    omega_intermediate: float = G.OMEGA_INTERMEDIATE
    gamma_max: float = G.GAMMA_MAX
    gamma: float = None
    sample_steps: int = 100
    clip_x0: bool = True  # clamp the implied clean frame to [-1, 1] at every step

    def __post_init__(self):
        if self.gamma_max < 0 or (self.gamma is not None and self.gamma < 0):
            raise ValueError("gamma must be non-negative")
        if self.sample_steps < 1:
            raise ValueError("sample_steps must be positive")

    def draw_gamma(self, seed):
        if self.gamma is not None:
            return float(self.gamma)
        return float(np.random.default_rng([int(seed), 0x5FD]).uniform(0.0, self.gamma_max))

    def for_step(self, step: PlanStep, gamma):
        if step.stage == LEADING:
            return G.GuidanceSpec(self.omega_scene, gamma, "scene")
        if len(step.refs) == 1:
            return G.GuidanceSpec(self.omega_concluding, gamma, "motion_single")
        return G.GuidanceSpec(self.omega_intermediate, gamma, "motion_pair")


@dataclass
class GeneratedVideo:
    frames: np.ndarray
    masks: np.ndarray
    gamma: float
    seed: int
    mode: str = SUBDIVISION
    order: list = field(default_factory=list)

    def __post_init__(self):
        if np.shape(self.frames) != np.shape(self.masks):
            raise ValueError("frames and masks must match in count and shape")

    @property
    def annotated(self):
        return np.ones(len(self.frames), dtype=bool)

    def __len__(self):
        return len(self.frames)


def _gaussian(shape, rng, dtype):
    """Standard normal draws; one generator per batch row keeps videos independent."""
    if isinstance(rng, torch.Generator):
        return torch.randn(shape, generator=rng, dtype=dtype)
    return torch.stack([torch.randn(shape[1:], generator=g, dtype=dtype) for g in rng])


def reverse_step(x_t, t, eps_bar, v_hat, sched: NoiseSchedule, rng, gamma=0.0, seg_grad=None, clip_x0=False):
    """One ancestral step: Gaussian with the (optionally segmentation-shifted) mean."""
    if x_t.shape != eps_bar.shape or x_t.shape != v_hat.shape:
        raise ValueError("x_t, eps_bar and v_hat must have one shape")
    sched.check_step(t)
    mu = reverse_mean(x_t, eps_bar, t, sched, clip_x0)
    sigma2 = reverse_variance(v_hat, t, sched)
    if seg_grad is not None:
        mu = G.seg_guided_mean(mu, sigma2, seg_grad, gamma)
    if int(t) == 1:
        return mu
    return mu + torch.sqrt(sigma2) * _gaussian(x_t.shape, rng, x_t.dtype)


def _branches(model: DenoiserModel, x, t_model, conds):
    """Evaluate several condition sets in one batched forward pass."""
    enc = [encode_conditions(model.role, c, x) for c in conds]
    channels = torch.cat([c for c, _ in enc])
    delta = None if enc[0][1] is None else torch.cat([d for _, d in enc])
    xs = x.repeat(len(conds), 1, 1, 1)
    with torch.no_grad():
        eps, v = model(xs, t_model.expand(xs.shape[0]), channels, delta)
    return list(zip(eps.chunk(len(conds)), v.chunk(len(conds))))


def _compose(step, spec, model, x, t_model, mask, refs):
    if spec.mode == "scene":
        (eps_u, _), (eps_c, v) = _branches(model, x, t_model, [ConditionSet(), ConditionSet(mask=mask)])
        return G.combine_scene(eps_u, eps_c, spec.omega), v
    conds = [ConditionSet(mask=mask)] + [ConditionSet(mask=mask, ref_frame_1=f, frame_distance=d) for f, d in refs]
    out = _branches(model, x, t_model, conds)
    if spec.mode == "motion_single":
        (eps_m, _), (eps_mf, v) = out
        return G.combine_motion(eps_m, eps_mf, spec.omega), v
    (eps_m, v), (eps_1, _), (eps_2, _) = out
    return G.combine_fc(eps_m, eps_1, eps_2, spec.omega), v


def generate_frame(step: PlanStep, masks, generated: dict, scene: DenoiserModel, motion: DenoiserModel,
                   psi, sched: NoiseSchedule, spec: G.GuidanceSpec, rng, gamma=None, clip_x0=True):
    """Run the full reverse loop for one plan step over a batch of videos.

    ``masks`` is ``(B, N, H, W)``; ``generated`` maps frame index to
    ``(B, 1, H, W)``; ``rng`` is a torch Generator or one per video.
    ``gamma`` overrides ``spec.gamma`` with per-video values.
    """
    missing = [r for r, _ in step.refs if r not in generated]
    if missing:
        raise ValueError(f"reference frames {missing} have not been generated")
    masks = torch.as_tensor(masks, dtype=torch.float32)
    if masks.ndim != 4:
        raise ValueError("masks must be (B, N, H, W)")
    B, _, H, W = masks.shape
    mask = masks[:, step.target][:, None]
    refs = []
    for r, d in step.refs:
        f = generated[r]
        if f.shape != mask.shape:
            raise ValueError("reference frame shape does not match the mask")
        refs.append((f, d))
    model = scene if step.stage == LEADING else motion
    gamma = torch.as_tensor(spec.gamma if gamma is None else gamma, dtype=torch.float32).expand(B)
    guided = psi is not None and bool(torch.any(gamma > 0))
    x = _gaussian((B, 1, H, W), rng, torch.float32)
    for k in range(sched.T, 0, -1):
        t_model = torch.tensor(float(sched.timesteps[k - 1]))
        eps_bar, v_hat = _compose(step, spec, model, x, t_model, mask, refs)
        grad = G.seg_log_likelihood_grad(psi, x, mask) if guided else None
        x = reverse_step(x, k, eps_bar, v_hat, sched, rng, gamma, grad, clip_x0)
    return x.clamp(-1.0, 1.0)


def generate_videos(mask_seqs, scene, motion, psi=None, guidance: VideoGuidance = None,
                    mode=SUBDIVISION, seeds=(0,)):
    """Generate one video per mask sequence, batched across videos."""
    guidance = guidance or VideoGuidance()
    masks = torch.as_tensor(np.stack([np.asarray(m, dtype=np.float32) for m in mask_seqs]))
    if masks.ndim != 4 or masks.shape[1] < 1:
        raise ValueError("mask sequences must be non-empty and uniformly shaped")
    if len(seeds) != len(masks):
        raise ValueError("one seed per video")
    n = masks.shape[1]
    plan = {SUBDIVISION: subdivision_order, CHRONOLOGICAL: chronological_order}[mode](n).validate()
    sched = scene.schedule.respace(guidance.sample_steps)
    gammas = [guidance.draw_gamma(s) if psi is not None else 0.0 for s in seeds]
    rngs = [torch.Generator().manual_seed(int(s)) for s in seeds]
    frames = {}
    for step in plan.steps:
        spec = guidance.for_step(step, 0.0)
        frames[step.target] = generate_frame(step, masks, frames, scene, motion, psi, sched, spec, rngs, gammas,
                                            guidance.clip_x0)
    video = torch.cat([frames[i] for i in range(n)], dim=1).numpy()
    return [GeneratedVideo(video[b], mask_seqs[b].astype(np.uint8) if isinstance(mask_seqs[b], np.ndarray)
                           else np.asarray(mask_seqs[b], np.uint8), gammas[b], int(seeds[b]), mode, plan.order)
            for b in range(len(seeds))]


def generate_video(masks, scene, motion, psi=None, guidance: VideoGuidance = None, mode=SUBDIVISION, seed=0):
    return generate_videos([np.asarray(masks)], scene, motion, psi, guidance, mode, [seed])[0]
