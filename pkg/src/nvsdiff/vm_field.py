"""Vector-matrix factored radiance field over the cube [-1, 1]^3.

A feature field with C channels is stored as three plane matrices plus three
axis vectors; the feature at a point is

    f(p) = lin(V_x, p.x) * bil(M_yz, p.y, p.z)
         + lin(V_y, p.y) * bil(M_zx, p.z, p.x)
         + lin(V_z, p.z) * bil(M_xy, p.x, p.y)

(channelwise products, summed over the three branches). Density comes from a
linear head with softplus, color from a shallow MLP with a sigmoid output.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

MAX_DENSE_GRID = 64


class FieldError(ValueError):
    pass


def _grid_coords(x: torch.Tensor, grid: int):
    """Map [-1, 1] to interpolation indices/weights on a grid of `grid` nodes."""
    u = (x.clamp(-1.0, 1.0) + 1.0) * 0.5 * (grid - 1)
    i0 = u.floor().clamp(0, grid - 2).long()
    w = (u - i0.to(u.dtype)).unsqueeze(-1)  # (N, 1) in [0, 1]
    return i0, w


def linear_sample(table: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
    """Linearly interpolate a (G, C) table at positions x in [-1, 1]."""
    i0, w = _grid_coords(x, table.shape[0])
    return table[i0] * (1.0 - w) + table[i0 + 1] * w


def bilinear_sample(table: torch.Tensor, a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Bilinearly interpolate a (G, G, C) table at positions (a, b) in [-1, 1]."""
    i0, wa = _grid_coords(a, table.shape[0])
    j0, wb = _grid_coords(b, table.shape[1])
    t00 = table[i0, j0]
    t01 = table[i0, j0 + 1]
    t10 = table[i0 + 1, j0]
    t11 = table[i0 + 1, j0 + 1]
    return (t00 * (1 - wa) * (1 - wb) + t01 * (1 - wa) * wb
            + t10 * wa * (1 - wb) + t11 * wa * wb)


class FieldHeads(nn.Module):
    """Shared density and color heads applied to queried features."""

    def __init__(self, channels: int, color_hidden: int = 32, density_bias: float = -3.0,
                 dtype=torch.float32):
        super().__init__()
        self.density_head = nn.Linear(channels, 1, dtype=dtype)
        nn.init.constant_(self.density_head.bias, density_bias)
        self.color_head = nn.Sequential(
            nn.Linear(channels, color_hidden, dtype=dtype),
            nn.ReLU(inplace=True),
            nn.Linear(color_hidden, 3, dtype=dtype),
        )

    def density(self, features: torch.Tensor) -> torch.Tensor:
        return F.softplus(self.density_head(features)).squeeze(-1)

    def color(self, features: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.color_head(features))


@dataclass
class VMField:
    """The estimated scene: three matrices, three vectors, and the heads.

    Tensors may be autograd graph nodes (model outputs) or leaf parameters
    (per-scene fitting); the container itself is immutable during querying.
    """

    m_yz: torch.Tensor  # (G, G, C), indexed (y, z)
    m_zx: torch.Tensor  # (G, G, C), indexed (z, x)
    m_xy: torch.Tensor  # (G, G, C), indexed (x, y)
    v_x: torch.Tensor   # (G, C)
    v_y: torch.Tensor   # (G, C)
    v_z: torch.Tensor   # (G, C)
    heads: FieldHeads

    def __post_init__(self):
        g, c = self.v_x.shape
        for m in (self.m_yz, self.m_zx, self.m_xy):
            if m.shape != (g, g, c):
                raise FieldError("all matrices must share (G, G, C)")
        for v in (self.v_y, self.v_z):
            if v.shape != (g, c):
                raise FieldError("all vectors must share (G, C)")

    @property
    def grid_size(self) -> int:
        return self.v_x.shape[0]

    @property
    def channels(self) -> int:
        return self.v_x.shape[1]

    def features(self, points: torch.Tensor) -> torch.Tensor:
        """Pre-head features at (N, 3) points; outside points clamp to the cube."""
        if not torch.isfinite(points).all():
            raise FieldError("query points contain non-finite values")
        x, y, z = points[:, 0], points[:, 1], points[:, 2]
        f = linear_sample(self.v_x, x) * bilinear_sample(self.m_yz, y, z)
        f = f + linear_sample(self.v_y, y) * bilinear_sample(self.m_zx, z, x)
        f = f + linear_sample(self.v_z, z) * bilinear_sample(self.m_xy, x, y)
        return f

    def query(self, points: torch.Tensor):
        """Density (N,) and color features (N, C) at continuous 3D points."""
        feats = self.features(points)
        return self.heads.density(feats), feats

    def color(self, features: torch.Tensor) -> torch.Tensor:
        """RGB in [0, 1] from queried features."""
        return self.heads.color(features)

    def to_dense(self) -> torch.Tensor:
        """Materialize the (G, G, G, C) feature tensor at the grid nodes."""
        g = self.grid_size
        if g > MAX_DENSE_GRID:
            raise FieldError(f"to_dense limited to G <= {MAX_DENSE_GRID}")
        dense = self.v_x[:, None, None, :] * self.m_yz[None, :, :, :]
        dense = dense + self.v_y[None, :, None, :] * self.m_zx.permute(1, 0, 2)[:, None, :, :]
        dense = dense + self.v_z[None, None, :, :] * self.m_xy[:, :, None, :]
        return dense

    def state_dict(self) -> dict:
        return {
            "grid_size": self.grid_size,
            "channels": self.channels,
            "m_yz": self.m_yz.detach().cpu(),
            "m_zx": self.m_zx.detach().cpu(),
            "m_xy": self.m_xy.detach().cpu(),
            "v_x": self.v_x.detach().cpu(),
            "v_y": self.v_y.detach().cpu(),
            "v_z": self.v_z.detach().cpu(),
            "heads": self.heads.state_dict(),
        }


def field_from_state(state: dict) -> VMField:
    c = int(state["channels"])
    color_hidden = state["heads"]["color_head.0.weight"].shape[0]
    heads = FieldHeads(c, color_hidden=color_hidden)
    heads.load_state_dict(state["heads"])
    return VMField(state["m_yz"], state["m_zx"], state["m_xy"],
                   state["v_x"], state["v_y"], state["v_z"], heads)


def save_field(path, field: VMField):
    torch.save(field.state_dict(), path)


def load_field(path) -> VMField:
    return field_from_state(torch.load(path, weights_only=True))


class LearnableField(nn.Module):
    """A VMField with leaf parameters, for direct per-scene optimization."""

    def __init__(self, grid_size: int = 24, channels: int = 16, color_hidden: int = 32,
                 density_bias: float = -3.0, init_scale: float = 0.1,
                 dtype=torch.float32, generator: torch.Generator | None = None):
        super().__init__()
        g, c = grid_size, channels

        def rand(*shape):
            return init_scale * torch.randn(*shape, dtype=dtype, generator=generator)

        self.m_yz = nn.Parameter(rand(g, g, c))
        self.m_zx = nn.Parameter(rand(g, g, c))
        self.m_xy = nn.Parameter(rand(g, g, c))
        self.v_x = nn.Parameter(rand(g, c))
        self.v_y = nn.Parameter(rand(g, c))
        self.v_z = nn.Parameter(rand(g, c))
        self.heads = FieldHeads(c, color_hidden=color_hidden, density_bias=density_bias,
                                dtype=dtype)

    @property
    def field(self) -> VMField:
        return VMField(self.m_yz, self.m_zx, self.m_xy, self.v_x, self.v_y, self.v_z,
                       self.heads)

    def grid_parameters(self):
        return [self.m_yz, self.m_zx, self.m_xy, self.v_x, self.v_y, self.v_z]

    def head_parameters(self):
        return list(self.heads.parameters())
