"""Differentiable volume rendering of a field along ray bundles.

Per-ray color uses the standard transmittance compositing

    T_u = exp(-sum_{l<u} sigma_l * delta_l)
    C   = sum_u T_u * (1 - exp(-sigma_u * delta_u)) * c_u

with no background term. Also provides the distortion regularizer that
concentrates ray weights into compact intervals.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .cameras import RayBundle


class RenderError(ValueError):
    pass


@dataclass
class RaySamples:
    positions: torch.Tensor  # (N, S, 3)
    deltas: torch.Tensor     # (N, S), spacing between adjacent samples
    ts: torch.Tensor         # (N, S), distance along the ray, strictly increasing


@dataclass
class RenderOutput:
    color: torch.Tensor          # (N, 3)
    weights: torch.Tensor        # (N, S)
    transmittance: torch.Tensor  # (N, S)
    depth: torch.Tensor          # (N,), expected depth sum_u w_u t_u
    ts: torch.Tensor             # (N, S), carried through for the distortion loss
    deltas: torch.Tensor         # (N, S)


def sample_along_ray(rays: RayBundle, num_samples: int, stratified: bool = False,
                     rng: np.random.Generator | None = None,
                     dtype=torch.float32) -> RaySamples:
    """Sample points in [near, far]: bin midpoints, or one uniform draw per bin."""
    if num_samples < 2:
        raise RenderError("num_samples must be >= 2")
    n = len(rays)
    near, far = rays.near, rays.far
    width = (far - near) / num_samples
    if stratified:
        if rng is None:
            rng = np.random.default_rng()
        u = rng.random((n, num_samples))
    else:
        u = np.full((n, num_samples), 0.5)
    ts = near + (np.arange(num_samples) + u) * width  # (N, S)
    ts_t = torch.as_tensor(ts, dtype=dtype)

    diffs = ts_t[:, 1:] - ts_t[:, :-1]
    # last interval padded with the mean spacing of the ray
    deltas = torch.cat([diffs, diffs.mean(dim=1, keepdim=True)], dim=1)

    origins = torch.as_tensor(rays.origins, dtype=dtype)
    dirs = torch.as_tensor(rays.directions, dtype=dtype)
    positions = origins[:, None, :] + ts_t[..., None] * dirs[:, None, :]
    return RaySamples(positions, deltas, ts_t)


def composite(densities: torch.Tensor, colors: torch.Tensor, deltas: torch.Tensor,
              ts: torch.Tensor | None = None) -> RenderOutput:
    """Exact discrete compositing; densities (N, S), colors (N, S, 3)."""
    if (densities < 0).any():
        raise RenderError("densities must be nonnegative")
    tau = densities * deltas  # (N, S)
    # transmittance before sample u: exp(-sum_{l<u} tau_l)
    accum = torch.cumsum(tau, dim=1)
    accum = torch.cat([torch.zeros_like(accum[:, :1]), accum[:, :-1]], dim=1)
    transmittance = torch.exp(-accum)
    alpha = 1.0 - torch.exp(-tau)
    weights = transmittance * alpha
    color = (weights[..., None] * colors).sum(dim=1)
    if ts is None:
        ts = torch.zeros_like(deltas)
    depth = (weights * ts).sum(dim=1)
    return RenderOutput(color, weights, transmittance, depth, ts, deltas)


def render(field, rays: RayBundle, num_samples: int = 48, stratified: bool = False,
           rng: np.random.Generator | None = None, dtype=torch.float32) -> RenderOutput:
    """sample -> query -> color -> composite, differentiable w.r.t. the field."""
    samples = sample_along_ray(rays, num_samples, stratified=stratified, rng=rng,
                               dtype=dtype)
    n, s, _ = samples.positions.shape
    density, feats = field.query(samples.positions.reshape(-1, 3))
    rgb = field.color(feats)
    return composite(density.reshape(n, s), rgb.reshape(n, s, 3), samples.deltas,
                     ts=samples.ts)


def distortion_loss(weights: torch.Tensor, ts: torch.Tensor,
                    deltas: torch.Tensor) -> torch.Tensor:
    """Mean over rays of sum_ij w_i w_j |m_i - m_j| + (1/3) sum_i w_i^2 delta_i.

    ts are treated as the interval midpoints m (exact for midpoint sampling).
    """
    gaps = (ts[:, :, None] - ts[:, None, :]).abs()  # (N, S, S)
    cross = (weights[:, :, None] * weights[:, None, :] * gaps).sum(dim=(1, 2))
    self_term = (weights.square() * deltas).sum(dim=1) / 3.0
    return (cross + self_term).mean()
