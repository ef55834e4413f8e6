"""Gaussian denoising chain: forward corruption, reverse-step arithmetic,
and ancestral/deterministic samplers with reproducible noise streams.

Timesteps are 1-based (t runs from T down to 1); schedule arrays are
indexed t-1. All step arithmetic works on plain arrays and on taped
tensors alike, so the training-time chain can carry gradients while
sampling runs on raw numpy.
"""

from __future__ import annotations

import math

import numpy as np

from . import numerics as nm
from .numerics import Tensor


class DiffusionError(ValueError):
    """Raised for invalid schedules, timesteps, or sampler arguments."""


REF_STEPS = 1000


def linear_betas(t_steps: int, beta_start: float = 1e-4, beta_end: float = 0.02,
                 ref_steps: int = REF_STEPS) -> np.ndarray:
    """Linear variance schedule with endpoints scaled by ref_steps/t_steps,
    so shorter chains keep the cumulative corruption of the reference one."""
    if t_steps < 1:
        raise DiffusionError("t_steps must be >= 1")
    scale = ref_steps / t_steps
    return np.linspace(scale * beta_start, scale * beta_end, t_steps)


def _exp(x):
    return nm.exp(x) if isinstance(x, Tensor) else np.exp(x)


class NoiseSchedule:
    """Precomputed per-step quantities of a corruption chain."""

    def __init__(self, betas):
        betas = np.asarray(betas, dtype=np.float64)
        if betas.ndim != 1 or betas.size == 0:
            raise DiffusionError("betas must be a non-empty 1-d array")
        if np.any(betas <= 0.0) or np.any(betas >= 1.0):
            raise DiffusionError("betas must lie strictly in (0, 1)")
        self.betas = betas
        self.t_steps = int(betas.size)
        self.alphas = 1.0 - betas
        self.alpha_bar = np.cumprod(self.alphas)
        self.alpha_bar_prev = np.concatenate([[1.0], self.alpha_bar[:-1]])
        self.sqrt_alpha_bar = np.sqrt(self.alpha_bar)
        self.sqrt_one_minus = np.sqrt(1.0 - self.alpha_bar)
        self.posterior_var = (
            betas * (1.0 - self.alpha_bar_prev) / (1.0 - self.alpha_bar)
        )
        # the t=1 posterior variance is exactly zero; clamp its log to the
        # t=2 entry so learned-variance interpolation stays finite there
        pv = self.posterior_var.copy()
        pv[0] = pv[1] if pv.size > 1 else betas[0]
        self.posterior_log_var = np.log(pv)

    @classmethod
    def linear(cls, t_steps: int) -> "NoiseSchedule":
        return cls(linear_betas(t_steps))

    def _check_t(self, t: int) -> int:
        t = int(t)
        if not 1 <= t <= self.t_steps:
            raise DiffusionError(f"timestep {t} outside [1, {self.t_steps}]")
        return t

    # ------------------------------------------------------------------
    # forward corruption

    def q_sample(self, x0, t, noise):
        """Corrupt clean data to level t; t may be an int or a [B] array."""
        t_arr = np.asarray(t)
        if t_arr.ndim == 0:
            i = self._check_t(t_arr)
            a = self.sqrt_alpha_bar[i - 1]
            b = self.sqrt_one_minus[i - 1]
        else:
            if np.any(t_arr < 1) or np.any(t_arr > self.t_steps):
                raise DiffusionError("timestep array outside schedule range")
            lead = (-1,) + (1,) * (np.ndim(getattr(x0, "data", x0)) - 1)
            a = self.sqrt_alpha_bar[t_arr - 1].reshape(lead)
            b = self.sqrt_one_minus[t_arr - 1].reshape(lead)
        return a * x0 + b * noise

    # ------------------------------------------------------------------
    # reverse-step arithmetic

    def predict_x0(self, x_t, t, eps):
        i = self._check_t(t) - 1
        return (x_t - self.sqrt_one_minus[i] * eps) / self.sqrt_alpha_bar[i]

    def posterior_mean(self, x_t, t, eps):
        """Reverse-step mean from a noise estimate."""
        i = self._check_t(t) - 1
        coef = self.betas[i] / self.sqrt_one_minus[i]
        return (x_t - coef * eps) / math.sqrt(self.alphas[i])

    def model_log_variance(self, v, t):
        """Interpolate log variance between beta_t and the posterior value,
        from a raw head output v in [-1, 1] per pixel."""
        i = self._check_t(t) - 1
        frac = (v + 1.0) / 2.0
        return frac * math.log(self.betas[i]) + (1.0 - frac) * self.posterior_log_var[i]

    def p_sample_step(self, x_t, t, eps, v=None, noise=None):
        """One ancestral step t -> t-1. The final step (t=1) adds no noise;
        every other step requires noise of x_t's shape. v, when given, is
        the variance head output driving a learned step variance."""
        t = self._check_t(t)
        mean = self.posterior_mean(x_t, t, eps)
        if t == 1:
            return mean
        if noise is None:
            raise DiffusionError("noise is required for steps with t > 1")
        if v is None:
            return mean + math.sqrt(self.posterior_var[t - 1]) * noise
        sigma = _exp(0.5 * self.model_log_variance(v, t))
        return mean + sigma * noise

    def ddim_step(self, x_t, t, eps, t_prev: int | None = None):
        """Deterministic step t -> t_prev (default t-1; t_prev=0 lands on
        the clean estimate)."""
        t = self._check_t(t)
        t_prev = t - 1 if t_prev is None else int(t_prev)
        if not 0 <= t_prev < t:
            raise DiffusionError(f"t_prev {t_prev} must lie in [0, {t})")
        ab_prev = 1.0 if t_prev == 0 else self.alpha_bar[t_prev - 1]
        x0 = self.predict_x0(x_t, t, eps)
        return math.sqrt(ab_prev) * x0 + math.sqrt(1.0 - ab_prev) * eps

    # ------------------------------------------------------------------
    # sampling loops

    def init_noise(self, shape, seed: int) -> np.ndarray:
        return nm.philox(seed, 0, nm.BRANCH_INIT).standard_normal(shape)

    def step_noise(self, shape, seed: int, t: int) -> np.ndarray:
        return nm.philox(seed, t, nm.BRANCH_STEP).standard_normal(shape)

    def sample_loop(self, denoise, shape, seed: int, method: str = "ancestral",
                    hook=None, x_init=None) -> np.ndarray:
        """Run the full reverse chain.

        denoise(x, t) -> (eps, v_or_None); hook(t, x_next, eps) observes
        each step. Noise is drawn from streams keyed by (seed, t), so a
        replay with the same seed is bit-identical regardless of hooks.
        """
        if method not in ("ancestral", "ddim"):
            raise DiffusionError(f"unknown sampling method {method!r}")
        x = self.init_noise(shape, seed) if x_init is None else np.asarray(x_init)
        if x.shape != tuple(shape):
            raise DiffusionError("x_init shape mismatch")
        for t in range(self.t_steps, 0, -1):
            eps, v = denoise(x, t)
            if method == "ddim":
                x = self.ddim_step(x, t, eps)
            else:
                noise = self.step_noise(shape, seed, t) if t > 1 else None
                x = self.p_sample_step(x, t, eps, v=v, noise=noise)
            if hook is not None:
                hook(t, x, eps)
        return x

    # ------------------------------------------------------------------
    # closed-form baseline for iid Gaussian data

    def gaussian_oracle_eps(self, x_t, t, mu0: float, var0: float):
        """Optimal noise estimate when the data is iid N(mu0, var0)."""
        i = self._check_t(t) - 1
        ab = self.alpha_bar[i]
        v_t = ab * var0 + 1.0 - ab
        x0_hat = (math.sqrt(ab) * var0 * x_t + (1.0 - ab) * mu0) / v_t
        return (x_t - math.sqrt(ab) * x0_hat) / self.sqrt_one_minus[i]

    def gaussian_reverse_moments(self, t, mu0: float, var0: float):
        """Exact reverse-kernel (coef_x, mean_offset, variance) for iid
        Gaussian data: x_{t-1} | x_t is N(coef_x*x_t + offset, variance)."""
        i = self._check_t(t) - 1
        ab_prev = self.alpha_bar_prev[i]
        v_t = self.alpha_bar[i] * var0 + 1.0 - self.alpha_bar[i]
        v_prev = ab_prev * var0 + 1.0 - ab_prev
        coef_x = math.sqrt(self.alphas[i]) * v_prev / v_t
        offset = self.betas[i] * math.sqrt(ab_prev) * mu0 / v_t
        var = self.betas[i] * v_prev / v_t
        return coef_x, offset, var

    def gaussian_marginal(self, t, mu0: float, var0: float) -> tuple[float, float]:
        """Mean and variance of x_t for iid Gaussian data."""
        i = self._check_t(t) - 1
        ab = self.alpha_bar[i]
        return math.sqrt(ab) * mu0, ab * var0 + 1.0 - ab
