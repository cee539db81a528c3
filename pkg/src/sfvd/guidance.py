"""Noise-composition rules and the segmentation-guided mean shift."""
from __future__ import annotations

from dataclasses import dataclass

import torch

from .segmenter import SegmenterModel, mask_log_likelihood

OMEGA_SCENE = 0.7
OMEGA_CONCLUDING = -2.5
OMEGA_INTERMEDIATE = -1.5
GAMMA_MAX = 15.0

MODES = ("scene", "motion_single", "motion_pair")


@dataclass(frozen=True)
class GuidanceSpec:
    omega: float
    gamma: float = 0.0
    mode: str = "scene"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.gamma < 0:
            raise ValueError("gamma must be non-negative")


def _same_shape(*xs):
    s = xs[0].shape
    if any(x.shape != s for x in xs[1:]):
        raise ValueError("shape mismatch: " + ", ".join(str(tuple(x.shape)) for x in xs))


def combine_scene(eps_u, eps_c, omega):
    """(1 - omega) * unconditional + omega * mask-conditional."""
    _same_shape(eps_u, eps_c)
    # lerp is exact at omega in {0, 1} and when the inputs are equal
    return torch.lerp(eps_u, eps_c, float(omega))


def combine_motion(eps_m, eps_mf, omega):
    """(1 - omega) * mask-only + omega * mask-and-frame."""
    _same_shape(eps_m, eps_mf)
    return torch.lerp(eps_m, eps_mf, float(omega))


def combine_fc(eps_m, eps_mf1, eps_mf2, omega):
    """(1 - 2 omega) * mask-only + omega * (first-frame + second-frame branch)."""
    _same_shape(eps_m, eps_mf1, eps_mf2)
    return eps_m + omega * ((eps_mf1 - eps_m) + (eps_mf2 - eps_m))


def seg_log_likelihood_grad(psi: SegmenterModel, x_t, mask, scale=1.0):
    """Gradient w.r.t. ``x_t`` of ``scale`` times the summed per-pixel mask log-likelihood."""
    if not isinstance(psi, SegmenterModel):
        raise TypeError("psi must be a SegmenterModel")
    if psi.steps_trained < 1:
        raise ValueError("segmenter is untrained")
    if x_t.shape != mask.shape:
        raise ValueError(f"shape mismatch: {tuple(x_t.shape)} vs {tuple(mask.shape)}")
    dtype = next(psi.parameters()).dtype
    with torch.enable_grad():
        x = x_t.detach().to(dtype).requires_grad_(True)
        ll = scale * mask_log_likelihood(psi, x, mask.to(dtype)).sum()
        (grad,) = torch.autograd.grad(ll, x)
    return grad.to(x_t.dtype)


def seg_guided_mean(mu, sigma2, grad, gamma):
    """mu + gamma * sigma^2 * grad; ``gamma`` may be a per-sample tensor."""
    _same_shape(mu, sigma2, grad)
    g = torch.as_tensor(gamma, dtype=mu.dtype, device=mu.device)
    if torch.any(g < 0):
        raise ValueError("gamma must be non-negative")
    if not torch.any(g != 0):
        return mu
    if g.ndim == 1:
        g = g.view(-1, *([1] * (mu.ndim - 1)))
    return mu + g * sigma2 * grad
