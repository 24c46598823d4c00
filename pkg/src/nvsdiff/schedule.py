"""Variance-preserving cosine diffusion schedule and parameterization conversions.

alpha_t = cos(pi*t / 2T), sigma_t = sin(pi*t / 2T), so alpha^2 + sigma^2 = 1.
All coefficient math is scalar; array arguments (numpy or torch) broadcast through.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

SIGMA_FLOOR = 1e-6  # below this the x <-> eps conversions are singular


class ScheduleError(ValueError):
    """Raised for out-of-range steps or singular conversions."""


@dataclass(frozen=True)
class ScheduleConfig:
    num_steps: int = 1000   # T
    continuous: bool = False  # allow real-valued t in [0, T]

    def __post_init__(self):
        if self.num_steps < 1:
            raise ScheduleError("num_steps must be >= 1")

    def to_dict(self):
        return {"num_steps": self.num_steps, "continuous": self.continuous}

    @classmethod
    def from_dict(cls, d):
        return cls(num_steps=int(d["num_steps"]), continuous=bool(d["continuous"]))


@dataclass(frozen=True)
class NoisyImage:
    """An image after forward noising at step t."""

    values: object  # (..., 3) array, standardized scale plus Gaussian noise
    t: float

    def __post_init__(self):
        vals = self.values
        if hasattr(vals, "detach"):  # torch tensor
            finite = bool(vals.detach().isfinite().all())
        else:
            finite = bool(np.isfinite(np.asarray(vals)).all())
        if not finite:
            raise ScheduleError("noisy image contains non-finite values")


class CosineSchedule:
    """Forward marginals, transitions, posterior, SNR weights, and conversions."""

    def __init__(self, config: ScheduleConfig | None = None, num_steps: int | None = None):
        if config is None:
            config = ScheduleConfig(num_steps=num_steps if num_steps is not None else 1000)
        self.config = config

    @property
    def num_steps(self) -> int:
        return self.config.num_steps

    def _check_step(self, t) -> float:
        t = float(t)
        if not 0.0 <= t <= self.num_steps:
            raise ScheduleError(f"step t={t} outside [0, {self.num_steps}]")
        if not self.config.continuous and not t.is_integer():
            raise ScheduleError(f"step t={t} must be an integer (continuous=False)")
        return t

    def alpha_sigma(self, t) -> tuple[float, float]:
        t = self._check_step(t)
        angle = 0.5 * math.pi * t / self.num_steps
        return math.cos(angle), math.sin(angle)

    def snr(self, t) -> float:
        alpha, sigma = self.alpha_sigma(t)
        if sigma == 0.0:
            return math.inf
        return alpha * alpha / (sigma * sigma)

    def snr_weight(self, t, parameterization: str = "v") -> float:
        """Clamped SNR loss weight for the clean-signal objective.

        parameterization "v": min(SNR + 1, 5). "eps": min(SNR, 5).
        """
        s = self.snr(t)
        if parameterization == "v":
            return min(s + 1.0, 5.0)
        if parameterization == "eps":
            return min(s, 5.0)
        raise ScheduleError(f"unknown parameterization {parameterization!r}")

    def forward_marginal(self, x, t, eps) -> NoisyImage:
        """z_t = alpha_t * x + sigma_t * eps."""
        if getattr(x, "shape", None) != getattr(eps, "shape", None):
            raise ScheduleError("x and eps must have the same shape")
        alpha, sigma = self.alpha_sigma(t)
        return NoisyImage(alpha * x + sigma * eps, float(t))

    def transition_coeffs(self, t, s) -> tuple[float, float]:
        """Coefficients of q(z_t | z_s) for t > s: alpha_{t|s}, sigma_{t|s}."""
        t = self._check_step(t)
        s = self._check_step(s)
        if not t > s:
            raise ScheduleError("transition requires t > s")
        alpha_t, sigma_t = self.alpha_sigma(t)
        alpha_s, sigma_s = self.alpha_sigma(s)
        alpha_ts = alpha_t / alpha_s
        var = sigma_t * sigma_t - alpha_ts * alpha_ts * sigma_s * sigma_s
        return alpha_ts, math.sqrt(max(var, 0.0))

    def posterior_params(self, z_t, x_hat, t, s):
        """Mean and std of q(z_s | z_t, x = x_hat), t > s.

        mu = alpha_{t|s} sigma_s^2 / sigma_t^2 * z_t + alpha_s sigma_{t|s}^2 / sigma_t^2 * x_hat
        std = sigma_{t|s} sigma_s / sigma_t
        """
        t = self._check_step(t)
        s = self._check_step(s)
        if not t > s:
            raise ScheduleError("posterior requires t > s")
        alpha_t, sigma_t = self.alpha_sigma(t)
        alpha_s, sigma_s = self.alpha_sigma(s)
        if sigma_t < SIGMA_FLOOR:
            raise ScheduleError("posterior undefined at sigma_t ~ 0 (t near 0)")
        alpha_ts, sigma_ts = self.transition_coeffs(t, s)
        var_t = sigma_t * sigma_t
        mu = (alpha_ts * sigma_s * sigma_s / var_t) * z_t \
            + (alpha_s * sigma_ts * sigma_ts / var_t) * x_hat
        std = sigma_ts * sigma_s / sigma_t
        return mu, std

    def _nonzero_sigma(self, t) -> tuple[float, float]:
        alpha, sigma = self.alpha_sigma(t)
        if sigma < SIGMA_FLOOR:
            raise ScheduleError("conversion singular at sigma_t ~ 0 (t near 0)")
        return alpha, sigma

    def x_to_eps(self, x_hat, z_t, t):
        alpha, sigma = self._nonzero_sigma(t)
        return (z_t - alpha * x_hat) / sigma

    def x_to_v(self, x_hat, z_t, t):
        alpha, sigma = self._nonzero_sigma(t)
        return alpha * self.x_to_eps(x_hat, z_t, t) - sigma * x_hat

    def param_convert(self, x_hat, z_t, t):
        """Clean-signal prediction to (eps_hat, v_hat) at step t."""
        return self.x_to_eps(x_hat, z_t, t), self.x_to_v(x_hat, z_t, t)

    def eps_to_x(self, eps_hat, z_t, t):
        alpha, sigma = self.alpha_sigma(t)
        if alpha < SIGMA_FLOOR:
            raise ScheduleError("eps_to_x singular at alpha_t ~ 0 (t near T)")
        return (z_t - sigma * eps_hat) / alpha

    def v_to_x(self, v_hat, z_t, t):
        alpha, sigma = self.alpha_sigma(t)
        return alpha * z_t - sigma * v_hat
