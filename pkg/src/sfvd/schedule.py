"""Diffusion noise schedules and the closed-form Gaussian process math.

All per-step constants are held in float64 numpy arrays indexed by ``t - 1``
(steps run ``1..T``). Tensor operations cast the scalar coefficients to the
input dtype, so float32 inputs stay float32.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch

COSINE_OFFSET = 0.008
MAX_BETA = 0.999


def _readonly(a):
    a = np.ascontiguousarray(a, dtype=np.float64)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    """Immutable per-step diffusion constants.

    ``timesteps[k]`` is the step of the *training* schedule that step ``k + 1``
    of this schedule corresponds to; it is the identity unless the schedule
    was produced by :meth:`respace`.
    """

    kind: str
    betas: np.ndarray
    beta_range: tuple = (None, None)
    timesteps: np.ndarray = None
    base_T: int = None
    alphas: np.ndarray = field(init=False)
    alpha_bars: np.ndarray = field(init=False)
    alpha_bars_prev: np.ndarray = field(init=False)
    posterior_variance: np.ndarray = field(init=False)
    log_var_lower: np.ndarray = field(init=False)
    log_var_upper: np.ndarray = field(init=False)

    def __post_init__(self):
        betas = np.asarray(self.betas, dtype=np.float64)
        if betas.ndim != 1 or betas.size < 1:
            raise ValueError("betas must be a non-empty 1-D array")
        if not np.all((betas > 0) & (betas <= MAX_BETA)):
            raise ValueError(f"every beta must lie in (0, {MAX_BETA}]")
        alphas = 1.0 - betas
        alpha_bars = np.cumprod(alphas)
        alpha_bars_prev = np.concatenate([[1.0], alpha_bars[:-1]])
        post = betas * (1.0 - alpha_bars_prev) / (1.0 - alpha_bars)
        upper = np.log(betas)
        lower = upper.copy()
        lower[1:] = np.log(post[1:])
        ts = self.timesteps
        ts = np.arange(1, betas.size + 1) if ts is None else np.asarray(ts, dtype=np.int64)
        ts = ts.copy()
        ts.setflags(write=False)
        set_ = object.__setattr__
        set_(self, "betas", _readonly(betas))
        set_(self, "timesteps", ts)
        set_(self, "base_T", int(self.base_T or betas.size))
        set_(self, "alphas", _readonly(alphas))
        set_(self, "alpha_bars", _readonly(alpha_bars))
        set_(self, "alpha_bars_prev", _readonly(alpha_bars_prev))
        set_(self, "posterior_variance", _readonly(post))
        set_(self, "log_var_lower", _readonly(lower))
        set_(self, "log_var_upper", _readonly(upper))

    @property
    def T(self) -> int:
        return self.betas.size

    def check_step(self, t):
        tt = np.asarray(t.detach().cpu() if torch.is_tensor(t) else t)
        if tt.size == 0 or tt.min() < 1 or tt.max() > self.T:
            raise ValueError(f"step index out of range 1..{self.T}: {t}")

    def respace(self, n_steps: int) -> "NoiseSchedule":
        """Evenly strided sub-schedule with ``n_steps`` steps (IDDPM respacing)."""
        if n_steps >= self.T:
            return self
        if n_steps < 1:
            raise ValueError("n_steps must be positive")
        keep = np.unique(np.round(np.linspace(1, self.T, n_steps)).astype(np.int64))
        abar = self.alpha_bars[keep - 1]
        prev = np.concatenate([[1.0], abar[:-1]])
        betas = np.minimum(1.0 - abar / prev, MAX_BETA)
        return NoiseSchedule(self.kind, betas, self.beta_range, self.timesteps[keep - 1], self.base_T)

    def describe(self) -> dict:
        return {"kind": self.kind, "T": self.base_T, "beta_range": list(self.beta_range)}


def cosine_alpha_bar(t, T, s=COSINE_OFFSET):
    f = lambda u: math.cos((u / T + s) / (1 + s) * math.pi / 2) ** 2
    return f(t) / f(0)


def build_schedule(kind: str = "cosine", T: int = 1000, beta_start: float = 1e-4,
                   beta_end: float = 0.02) -> NoiseSchedule:
    if int(T) != T or T < 2:
        raise ValueError("T must be an integer >= 2")
    T = int(T)
    if kind == "linear":
        betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
        if not np.all((betas > 0) & (betas <= MAX_BETA)):
            raise ValueError(f"linear betas must lie in (0, {MAX_BETA}]")
        return NoiseSchedule("linear", betas, (beta_start, beta_end))
    if kind == "cosine":
        betas = np.array([min(1 - cosine_alpha_bar(t, T) / cosine_alpha_bar(t - 1, T), MAX_BETA)
                          for t in range(1, T + 1)])
        return NoiseSchedule("cosine", betas, (None, None))
    raise ValueError(f"unknown schedule kind {kind!r}")


def schedule_from_description(desc: dict) -> NoiseSchedule:
    lo, hi = desc.get("beta_range") or (None, None)
    if desc["kind"] == "linear":
        return build_schedule("linear", desc["T"], lo, hi)
    return build_schedule(desc["kind"], desc["T"])


def _coef(values, t, like):
    """Gather per-step constants for step(s) ``t`` and shape them to broadcast."""
    if torch.is_tensor(t) and t.ndim > 0:
        idx = t.detach().cpu().long().numpy() - 1
        c = torch.as_tensor(np.asarray(values)[idx], dtype=like.dtype, device=like.device)
        return c.view(-1, *([1] * (like.ndim - 1)))
    return float(values[int(t) - 1])


def forward_sample(x0, t, eps, sched: NoiseSchedule):
    """Draw x_t ~ q(x_t | x_0) with the supplied standard-normal ``eps``."""
    if x0.shape != eps.shape:
        raise ValueError(f"shape mismatch: {tuple(x0.shape)} vs {tuple(eps.shape)}")
    sched.check_step(t)
    a = _coef(np.sqrt(sched.alpha_bars), t, x0)
    b = _coef(np.sqrt(1.0 - sched.alpha_bars), t, x0)
    return a * x0 + b * eps


def predict_x0(x_t, eps_hat, t, sched: NoiseSchedule):
    """Clean image implied by a noise prediction: (x_t - sqrt(1 - abar) eps) / sqrt(abar)."""
    a = _coef(1.0 / np.sqrt(sched.alpha_bars), t, x_t)
    b = _coef(np.sqrt(1.0 / sched.alpha_bars - 1.0), t, x_t)
    return a * x_t - b * eps_hat


def reverse_mean(x_t, eps_hat, t, sched: NoiseSchedule, clip_x0=False):
    """Mean of p(x_{t-1} | x_t) from a noise prediction.

    With ``clip_x0`` the implied clean image is clamped to [-1, 1] and the
    posterior mean is taken at that estimate. Without clamping the two forms
    agree exactly in real arithmetic.
    """
    if x_t.shape != eps_hat.shape:
        raise ValueError(f"shape mismatch: {tuple(x_t.shape)} vs {tuple(eps_hat.shape)}")
    sched.check_step(t)
    if clip_x0:
        x0 = predict_x0(x_t, eps_hat, t, sched).clamp(-1.0, 1.0)
        return posterior_mean_variance(x0, x_t, t, sched)[0]
    inv_sqrt_alpha = _coef(1.0 / np.sqrt(sched.alphas), t, x_t)
    eps_coef = _coef(sched.betas / np.sqrt(1.0 - sched.alpha_bars), t, x_t)
    return inv_sqrt_alpha * (x_t - eps_coef * eps_hat)


def reverse_log_variance(v_hat, t, sched: NoiseSchedule):
    if torch.any(v_hat < 0) or torch.any(v_hat > 1):
        raise ValueError("v_hat must lie in [0, 1]")
    sched.check_step(t)
    lo = _coef(sched.log_var_lower, t, v_hat)
    hi = _coef(sched.log_var_upper, t, v_hat)
    return v_hat * lo + (1 - v_hat) * hi


def reverse_variance(v_hat, t, sched: NoiseSchedule):
    """sigma^2 = exp(v * log(beta_tilde_t) + (1 - v) * log(beta_t))."""
    return torch.exp(reverse_log_variance(v_hat, t, sched))


def posterior_mean_variance(x0, x_t, t, sched: NoiseSchedule):
    """Mean and log-variance of the true posterior q(x_{t-1} | x_t, x_0)."""
    sched.check_step(t)
    c0 = _coef(sched.betas * np.sqrt(sched.alpha_bars_prev) / (1 - sched.alpha_bars), t, x0)
    ct = _coef((1 - sched.alpha_bars_prev) * np.sqrt(sched.alphas) / (1 - sched.alpha_bars), t, x0)
    logvar = _coef(sched.log_var_lower, t, x0)
    return c0 * x0 + ct * x_t, logvar
