"""Synthetic fluoroscopy-like videos with exact wire masks.

These stand in for clinical data, which is not available. Each scene is a
smooth random field, a slowly breathing soft edge (diaphragm-like), a few
static dark oblique bands (rib-like), and one or more thin dark wires that
move faster than the background. Every appearance property here is a
construction rule, not a claim of realism.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage
from scipy.interpolate import make_interp_spline


@dataclass(frozen=True)
class SceneConfig:
    size: int = 32
    n_frames: int = 8
    # background
    field_scale: float = 5.0
    field_amp: float = 0.12
    base_level: tuple = (-0.1, 0.15)
    diaphragm_amp: tuple = (0.2, 0.35)
    diaphragm_shift: tuple = (0.4, 1.0)  # peak horizontal excursion, px
    diaphragm_period: tuple = (12.0, 20.0)  # frames per breathing cycle
    n_ribs: tuple = (2, 4)
    rib_width: tuple = (1.5, 3.0)
    rib_amp: tuple = (0.2, 0.4)
    # wire
    wire_count: int = 1
    control_points: int = 4
    wire_width: tuple = (1, 2)
    contrast: tuple = (0.2, 0.6)
    wire_motion: tuple = (1.0, 2.0)  # per-control-point oscillation amplitude, px
    wire_drift: tuple = (0.3, 0.8)  # per-frame rigid drift, px
    noise: float = 0.08

    def validate(self):
        if self.size < 8 or self.size % 4:
            raise ValueError("size must be a multiple of 4 and at least 8")
        if self.n_frames < 1:
            raise ValueError("n_frames must be >= 1")
        if not 1 <= self.wire_width[0] <= self.wire_width[1] <= 3:
            raise ValueError("wire width must lie in 1..3 px")
        if not 0 < self.contrast[0] <= self.contrast[1] <= 1:
            raise ValueError("contrast must lie in (0, 1]")
        if self.control_points < 2 or self.wire_count < 1:
            raise ValueError("need >= 2 control points and >= 1 wire")
        if self.noise < 0 or self.field_amp < 0:
            raise ValueError("noise and field amplitude must be non-negative")
        for name in ("base_level", "diaphragm_amp", "diaphragm_shift", "diaphragm_period",
                     "n_ribs", "rib_width", "rib_amp", "wire_motion", "wire_drift"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name}: lower bound exceeds upper bound")
        return self

    def to_dict(self):
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


@dataclass
class LabeledVideo:
    frames: np.ndarray  # (N, H, W) float32 in [-1, 1]
    masks: np.ndarray  # (N, H, W) uint8 in {0, 1}
    annotated: np.ndarray  # (N,) bool
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float32)
        self.masks = np.asarray(self.masks, dtype=np.uint8)
        self.annotated = np.asarray(self.annotated, dtype=bool)
        if self.frames.shape != self.masks.shape or self.frames.ndim != 3:
            raise ValueError("frames and masks must both be (N, H, W)")
        if self.annotated.shape != (len(self.frames),):
            raise ValueError("one annotation flag per frame")

    def __len__(self):
        return len(self.frames)


@dataclass
class FrameSet:
    """Flat pool of frames with masks, annotation flags and source video ids."""

    frames: np.ndarray
    masks: np.ndarray
    annotated: np.ndarray
    video_ids: np.ndarray

    def __len__(self):
        return len(self.frames)

    @classmethod
    def from_videos(cls, videos, ids=None):
        ids = range(len(videos)) if ids is None else ids
        return cls(np.concatenate([v.frames for v in videos]),
                   np.concatenate([v.masks for v in videos]),
                   np.concatenate([v.annotated for v in videos]),
                   np.concatenate([np.full(len(v), i) for i, v in zip(ids, videos)]))

    def concat(self, other):
        return FrameSet(*(np.concatenate([a, b]) for a, b in
                          zip((self.frames, self.masks, self.annotated, self.video_ids),
                              (other.frames, other.masks, other.annotated, other.video_ids))))

    def annotated_only(self):
        keep = self.annotated
        return FrameSet(self.frames[keep], self.masks[keep], self.annotated[keep], self.video_ids[keep])


def _uniform(rng, lo_hi):
    return float(rng.uniform(*lo_hi))


def _rasterize(points, size, width):
    """Mark every pixel touched by a densely sampled curve, then thicken."""
    mask = np.zeros((size, size), dtype=bool)
    ij = np.round(points).astype(int)
    ok = (ij >= 0).all(1) & (ij < size).all(1)
    mask[ij[ok, 0], ij[ok, 1]] = True
    if width > 1:
        mask = ndimage.binary_dilation(mask, structure=np.ones((width, width), dtype=bool))
    return mask


def _wire_curve(rng, cfg: SceneConfig):
    """Control points of a random open curve spanning most of the frame."""
    s = cfg.size
    theta = rng.uniform(0, np.pi)
    direction = np.array([np.cos(theta), np.sin(theta)])
    normal = np.array([-direction[1], direction[0]])
    center = rng.uniform(0.35 * s, 0.65 * s, size=2)
    along = np.linspace(-0.38 * s, 0.38 * s, cfg.control_points)
    across = rng.normal(0, 0.12 * s, size=cfg.control_points)
    return center + along[:, None] * direction + across[:, None] * normal


def _sample_curve(ctrl, size, n=None):
    k = min(3, len(ctrl) - 1)
    seg = np.linalg.norm(np.diff(ctrl, axis=0), axis=1)
    u = np.concatenate([[0], np.cumsum(seg)])
    u /= u[-1]
    spline = make_interp_spline(u, ctrl, k=k)
    n = n or int(8 * size)
    pts = spline(np.linspace(0, 1, n))
    return np.clip(pts, 1, size - 2)


def make_video(cfg: SceneConfig, seed) -> LabeledVideo:
    cfg.validate()
    rng = np.random.default_rng(seed)
    s, N = cfg.size, cfg.n_frames
    yy, xx = np.mgrid[0:s, 0:s].astype(np.float64)

    noise_field = ndimage.gaussian_filter(rng.normal(size=(s, s)), cfg.field_scale, mode="wrap")
    noise_field /= noise_field.std() + 1e-12
    static = _uniform(rng, cfg.base_level) + cfg.field_amp * noise_field

    # rib-like bands: static, oblique, sharp-edged and dark
    phi = rng.uniform(0, np.pi)
    d = xx * np.cos(phi) + yy * np.sin(phi)
    d_lo, d_hi = d.min(), d.max()
    for _ in range(int(rng.integers(cfg.n_ribs[0], cfg.n_ribs[1] + 1))):
        c = rng.uniform(d_lo, d_hi)
        w = _uniform(rng, cfg.rib_width)
        band = 1 / (1 + np.exp(-(d - c + w / 2) / 0.4)) - 1 / (1 + np.exp(-(d - c - w / 2) / 0.4))
        static = static - _uniform(rng, cfg.rib_amp) * band

    # diaphragm-like soft edge translating slowly along x
    dia_amp = _uniform(rng, cfg.diaphragm_amp)
    dia_shift = _uniform(rng, cfg.diaphragm_shift)
    dia_period = _uniform(rng, cfg.diaphragm_period)
    dia_phase = rng.uniform(0, 2 * np.pi)
    dia_center = rng.uniform(0.3 * s, 0.7 * s)
    dia_slope = rng.uniform(-0.6, 0.6)
    edge_pos = dia_center + dia_shift * np.sin(2 * np.pi * np.arange(N) / dia_period + dia_phase)

    width = int(rng.integers(cfg.wire_width[0], cfg.wire_width[1] + 1))
    contrast = _uniform(rng, cfg.contrast)
    wires = []
    for _ in range(cfg.wire_count):
        ctrl = _wire_curve(rng, cfg)
        amp = _uniform(rng, cfg.wire_motion)
        phases = rng.uniform(0, 2 * np.pi, size=(cfg.control_points, 2))
        drift_dir = rng.normal(size=2)
        drift = _uniform(rng, cfg.wire_drift) * drift_dir / np.linalg.norm(drift_dir)
        wires.append((ctrl, amp, phases, drift))

    frames = np.empty((N, s, s), dtype=np.float32)
    masks = np.empty((N, s, s), dtype=np.uint8)
    centroids = np.empty((N, 2))
    for f in range(N):
        edge = edge_pos[f] + dia_slope * (yy - s / 2)
        bg = static + dia_amp / (1 + np.exp(-(xx - edge) / 1.5))
        m = np.zeros((s, s), dtype=bool)
        for ctrl, amp, phases, drift in wires:
            wobble = amp * np.sin(2 * np.pi * f / max(N, 2) + phases)
            pts = _sample_curve(ctrl + wobble + drift * (f - (N - 1) / 2), s)
            m |= _rasterize(pts, s, width)
        img = np.where(m, bg - contrast * (bg + 1.0), bg)
        img = img + cfg.noise * rng.normal(size=(s, s))
        frames[f] = np.clip(img, -1, 1)
        masks[f] = m
        centroids[f] = np.argwhere(m).mean(0)

    meta = {"seed": int(seed) if np.isscalar(seed) else None, "wire_count": cfg.wire_count,
            "contrast": contrast, "wire_width": width,
            "wire_speed": float(np.linalg.norm(np.diff(centroids, axis=0), axis=1).mean()) if N > 1 else 0.0,
            "edge_speed": float(np.abs(np.diff(edge_pos)).mean()) if N > 1 else 0.0}
    return LabeledVideo(frames, masks, np.ones(N, dtype=bool), meta)


def _child_seeds(seed, count):
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(count)]


def make_fvideo_set(count: int, cfg: SceneConfig = None, seed=0):
    """``count`` fully annotated videos, deterministic per seed."""
    if count < 1:
        raise ValueError("count must be >= 1")
    cfg = cfg or SceneConfig()
    videos = [make_video(cfg, s) for s in _child_seeds(seed, count)]
    for i, v in enumerate(videos):
        v.meta["video_id"] = i
    return videos


def make_pimage_set(video_count: int, annotated_fraction: float, cfg: SceneConfig = None, seed=0) -> FrameSet:
    """Frame pool from ``video_count`` videos with partial, per-video annotation.

    Exactly ``round(fraction * total)`` frames are annotated. Videos are
    visited in random order and each takes a random share, so some videos are
    partially annotated and others not at all. Unannotated masks are zeroed.
    """
    if not 0 <= annotated_fraction <= 1:
        raise ValueError("annotated_fraction must lie in [0, 1]")
    if video_count < 1:
        raise ValueError("empty output: video_count must be >= 1")
    cfg = cfg or SceneConfig()
    rng = np.random.default_rng(np.random.SeedSequence(seed).spawn(2)[1])
    videos = [make_video(cfg, s) for s in _child_seeds(seed, video_count)]
    N = cfg.n_frames
    remaining = int(round(annotated_fraction * video_count * N))
    for i, vi in enumerate(rng.permutation(video_count)):
        left_after = video_count - i - 1
        lo = max(0, remaining - left_after * N)
        hi = min(N, remaining)
        take = int(rng.integers(lo, hi + 1)) if hi > lo else hi
        flags = np.zeros(N, dtype=bool)
        flags[rng.choice(N, size=take, replace=False)] = True
        videos[vi].annotated = flags
        videos[vi].masks[~flags] = 0
        remaining -= take
    return FrameSet.from_videos(videos)


def split_indices(count: int, seed=0, fractions=(0.8, 0.1, 0.1)):
    """Disjoint train/val/test video indices."""
    perm = np.random.default_rng(seed).permutation(count)
    n_train = int(round(fractions[0] * count))
    n_val = int(round(fractions[1] * count))
    return {"train": sorted(perm[:n_train].tolist()),
            "val": sorted(perm[n_train:n_train + n_val].tolist()),
            "test": sorted(perm[n_train + n_val:].tolist())}


def consecutive_mse(frames) -> float:
    frames = np.asarray(frames, dtype=np.float64)
    return float(np.mean((frames[1:] - frames[:-1]) ** 2))
