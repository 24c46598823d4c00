"""Transformer mapping a noisy view plus a posed reference view to a VM field.

The encoder (shared weights, no camera information) turns each image into
feature tokens. The decoder runs joint self-attention over
[output tokens | noisy-feature tokens | reference-feature tokens], applying
adaptive layer norm separately per token group:

  - output tokens and noisy-feature tokens condition on (r_d, f) through two
    distinct embedding networks (the input camera always has identity rotation)
  - reference-feature tokens condition on the flattened relative pose (R, T)

Modulation gates are zero-initialized so every block starts as an identity
residual, and the field projections are zero-initialized so the model starts
from the empty scene.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .cameras import check_rotation
from .vm_field import FieldHeads, VMField


@dataclass(frozen=True)
class CameraConditioning:
    """Scalars and relative pose fed to the decoder's AdaLN branches."""

    r_d: float                # input-camera distance from the origin
    focal: float              # focal normalized by image width
    rotation: np.ndarray      # (3, 3) relative rotation, reference -> input
    translation: np.ndarray   # (3,)

    def __post_init__(self):
        object.__setattr__(self, "rotation", check_rotation(self.rotation))
        object.__setattr__(self, "translation",
                           np.asarray(self.translation, dtype=np.float64))
        if self.r_d <= 0:
            raise ValueError("r_d must be positive")
        if self.focal <= 0:
            raise ValueError("focal must be positive")


@dataclass(frozen=True)
class ModelConfig:
    image_size: tuple[int, int] = (32, 32)
    patch_size: int = 4
    embed_dim: int = 192
    encoder_depth: int = 6
    decoder_depth: int = 8
    encoder_heads: int = 6
    decoder_heads: int = 6
    mlp_ratio: float = 4.0
    grid_size: int = 24        # G
    field_channels: int = 16   # C
    matrix_patch: int = 3      # each matrix token covers a (p_m, p_m) patch
    vector_patch: int = 3      # each vector token covers p_v entries
    color_hidden: int = 32
    density_bias: float = -3.0
    reference_dropout: float = 0.1
    use_encoder: bool = True            # ablation: raw patch embeddings when False
    camera_conditioning: bool = True    # ablation: plain ViT decoder when False
    time_conditioning: bool = False     # optional diffusion-step signal, off by default

    def __post_init__(self):
        h, w = self.image_size
        if h % self.patch_size or w % self.patch_size:
            raise ValueError("image dims must be divisible by patch_size")
        if self.grid_size % self.matrix_patch or self.grid_size % self.vector_patch:
            raise ValueError("grid_size must be divisible by the token patch sizes")
        if self.embed_dim % self.encoder_heads or self.embed_dim % self.decoder_heads:
            raise ValueError("embed_dim must be divisible by the head counts")

    @property
    def tokens_per_image(self) -> int:
        h, w = self.image_size
        return (h // self.patch_size) * (w // self.patch_size)

    @property
    def num_matrix_tokens(self) -> int:
        side = self.grid_size // self.matrix_patch
        return 3 * side * side

    @property
    def num_vector_tokens(self) -> int:
        return 3 * (self.grid_size // self.vector_patch)

    @property
    def num_output_tokens(self) -> int:
        return self.num_matrix_tokens + self.num_vector_tokens

    def to_dict(self) -> dict:
        d = asdict(self)
        d["image_size"] = list(self.image_size)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["image_size"] = tuple(d["image_size"])
        return cls(**d)


def modulate(x: torch.Tensor, shift: torch.Tensor, scale: torch.Tensor) -> torch.Tensor:
    """AdaLN affine: x * (1 + scale) + shift."""
    return x * (1.0 + scale) + shift


def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0):
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=t.dtype) / half)
    args = t[:, None] * freqs[None]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x):
        b, m, d = x.shape
        qkv = self.qkv(x).reshape(b, m, 3, self.heads, d // self.heads)
        q, k, v = qkv.permute(2, 0, 3, 1, 4)  # (B, heads, M, Dh) each
        out = F.scaled_dot_product_attention(q, k, v)
        out = out.transpose(1, 2).reshape(b, m, d)
        return self.proj(out)


class Mlp(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x)))


class EncoderBlock(nn.Module):
    """Standard pre-LN ViT block (also the decoder block when conditioning is off)."""

    def __init__(self, dim: int, heads: int, mlp_ratio: float):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, int(dim * mlp_ratio))

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


class AdaLNBlock(nn.Module):
    """Joint self-attention with per-group (shift, scale, gate) modulation.

    Each conditioning embedding produces 6 chunks: (shift/scale/gate) for the
    attention branch and for the MLP branch. Gate rows start at zero.
    """

    def __init__(self, dim: int, heads: int, mlp_ratio: float, num_groups: int = 3):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim, elementwise_affine=False)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim, elementwise_affine=False)
        self.mlp = Mlp(dim, int(dim * mlp_ratio))
        self.modulation = nn.ModuleList(
            [nn.Linear(dim, 6 * dim) for _ in range(num_groups)])

    def group_params(self, conds):
        """conds: per-group (B, D) embeddings -> per-group tuple of 6 (B, D)."""
        return [self.modulation[g](c).chunk(6, dim=-1) for g, c in enumerate(conds)]

    def forward(self, x, conds, group_sizes):
        """x: (B, M, D) concatenated groups; conds: per-group (B, D)."""
        params = self.group_params(conds)

        def expand(chunk_idx):
            parts = [params[g][chunk_idx][:, None, :].expand(-1, n, -1)
                     for g, n in enumerate(group_sizes)]
            return torch.cat(parts, dim=1)

        shift_a, scale_a, gate_a = expand(0), expand(1), expand(2)
        shift_m, scale_m, gate_m = expand(3), expand(4), expand(5)
        x = x + gate_a * self.attn(modulate(self.norm1(x), shift_a, scale_a))
        return x + gate_m * self.mlp(modulate(self.norm2(x), shift_m, scale_m))


class CondEmbedder(nn.Module):
    def __init__(self, in_dim: int, dim: int):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(in_dim, dim), nn.SiLU(), nn.Linear(dim, dim))

    def forward(self, x):
        return self.net(x)


class NVSTransformer(nn.Module):
    """F_theta: (noisy view, reference view, relative camera pose) -> VMField."""

    TIME_EMBED_DIM = 64
    GROUPS = ("output", "noisy_feature", "reference_feature")

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        c = config
        d = c.embed_dim

        self.patch_embed = nn.Conv2d(3, d, kernel_size=c.patch_size, stride=c.patch_size)
        self.pos_embed = nn.Parameter(torch.zeros(1, c.tokens_per_image, d))
        self.encoder = nn.ModuleList(
            [EncoderBlock(d, c.encoder_heads, c.mlp_ratio) for _ in range(c.encoder_depth)])

        self.output_token = nn.Parameter(torch.zeros(1, 1, d))
        self.output_pos_embed = nn.Parameter(torch.zeros(1, c.num_output_tokens, d))
        self.null_reference = nn.Parameter(torch.zeros(1, 1, d))

        self.embed_output_cam = CondEmbedder(2, d)    # (r_d, f)
        self.embed_noisy_cam = CondEmbedder(2, d)     # (r_d, f), distinct weights
        self.embed_reference_cam = CondEmbedder(12, d)  # flattened (R, T)
        if c.time_conditioning:
            self.embed_time = CondEmbedder(self.TIME_EMBED_DIM, d)

        if c.camera_conditioning:
            self.decoder = nn.ModuleList(
                [AdaLNBlock(d, c.decoder_heads, c.mlp_ratio) for _ in range(c.decoder_depth)])
        else:
            self.decoder = nn.ModuleList(
                [EncoderBlock(d, c.decoder_heads, c.mlp_ratio) for _ in range(c.decoder_depth)])

        self.final_norm = nn.LayerNorm(d)
        self.matrix_proj = nn.Linear(d, c.matrix_patch ** 2 * c.field_channels)
        self.vector_proj = nn.Linear(d, c.vector_patch * c.field_channels)
        self.heads = FieldHeads(c.field_channels, color_hidden=c.color_hidden,
                                density_bias=c.density_bias)

        self._init_weights()

    def _init_weights(self):
        def base_init(m):
            if isinstance(m, nn.Linear):
                nn.init.trunc_normal_(m.weight, std=0.02)
                if m.bias is not None:
                    nn.init.zeros_(m.bias)
        self.apply(base_init)
        nn.init.trunc_normal_(self.patch_embed.weight, std=0.02)
        nn.init.zeros_(self.patch_embed.bias)
        nn.init.trunc_normal_(self.pos_embed, std=0.02)
        nn.init.trunc_normal_(self.output_token, std=0.02)
        nn.init.trunc_normal_(self.output_pos_embed, std=0.02)
        nn.init.trunc_normal_(self.null_reference, std=0.02)
        d = self.config.embed_dim
        for block in self.decoder:
            if isinstance(block, AdaLNBlock):
                for lin in block.modulation:
                    # zero the gate rows (chunks 2 and 5) so blocks start as identity
                    with torch.no_grad():
                        lin.weight[2 * d:3 * d].zero_()
                        lin.weight[5 * d:6 * d].zero_()
                        lin.bias.zero_()
        # zero-init field projections: the model starts from the empty scene
        nn.init.zeros_(self.matrix_proj.weight)
        nn.init.zeros_(self.matrix_proj.bias)
        nn.init.zeros_(self.vector_proj.weight)
        nn.init.zeros_(self.vector_proj.bias)
        # density head bias is set by FieldHeads; re-apply after the blanket init
        nn.init.constant_(self.heads.density_head.bias, self.config.density_bias)

    # encoding ------------------------------------------------------------

    def encode(self, images: torch.Tensor) -> torch.Tensor:
        """(B, 3, H, W) standardized images -> (B, M, D) feature tokens."""
        tokens = self.patch_embed(images).flatten(2).transpose(1, 2)
        tokens = tokens + self.pos_embed
        if self.config.use_encoder:
            for block in self.encoder:
                tokens = block(tokens)
        return tokens

    # conditioning ---------------------------------------------------------

    def _cond_embeddings(self, cond: list[CameraConditioning], drop_mask, t=None):
        dtype = self.pos_embed.dtype
        rd_f = torch.tensor([[c.r_d, c.focal] for c in cond], dtype=dtype)
        ref = torch.tensor(
            [np.concatenate([c.rotation.reshape(-1), c.translation]) for c in cond],
            dtype=dtype)
        if drop_mask is not None and drop_mask.any():
            identity = torch.eye(3, dtype=dtype).reshape(-1)
            null_ref = torch.cat([identity, torch.zeros(3, dtype=dtype)])
            ref[drop_mask] = null_ref
        c_out = self.embed_output_cam(rd_f)
        c_noisy = self.embed_noisy_cam(rd_f)
        c_ref = self.embed_reference_cam(ref)
        if self.config.time_conditioning:
            if t is None:
                raise ValueError("time_conditioning is enabled but no t was given")
            t = torch.as_tensor(t, dtype=dtype).reshape(-1)
            emb = self.embed_time(timestep_embedding(t, self.TIME_EMBED_DIM))
            c_out = c_out + emb
            c_noisy = c_noisy + emb
        return c_out, c_noisy, c_ref

    # decoding -------------------------------------------------------------

    def decode(self, noisy_tokens: torch.Tensor, reference_tokens: torch.Tensor,
               cond: list[CameraConditioning], drop_mask=None, t=None) -> torch.Tensor:
        """Joint self-attention over [output | noisy | reference]; returns the
        output-token slice (B, M_out, D)."""
        b = noisy_tokens.shape[0]
        out_tokens = (self.output_token + self.output_pos_embed).expand(b, -1, -1)
        group_sizes = (out_tokens.shape[1], noisy_tokens.shape[1], reference_tokens.shape[1])
        x = torch.cat([out_tokens, noisy_tokens, reference_tokens], dim=1)
        if self.config.camera_conditioning:
            conds = self._cond_embeddings(cond, drop_mask, t=t)
            for block in self.decoder:
                x = block(x, conds, group_sizes)
        else:
            for block in self.decoder:
                x = block(x)
        return x[:, :group_sizes[0]]

    # field assembly -------------------------------------------------------

    def tokens_to_field(self, output_tokens: torch.Tensor) -> list[VMField]:
        """Project output tokens into matrix patches and vector segments."""
        c = self.config
        b, m, _ = output_tokens.shape
        if m != c.num_output_tokens:
            raise ValueError(f"expected {c.num_output_tokens} output tokens, got {m}")
        g, ch = c.grid_size, c.field_channels
        pm, pv = c.matrix_patch, c.vector_patch
        side, segs = g // pm, g // pv

        x = self.final_norm(output_tokens)
        mats = self.matrix_proj(x[:, :c.num_matrix_tokens])
        mats = mats.reshape(b, 3, side, side, pm, pm, ch)
        mats = mats.permute(0, 1, 2, 4, 3, 5, 6).reshape(b, 3, g, g, ch)
        vecs = self.vector_proj(x[:, c.num_matrix_tokens:])
        vecs = vecs.reshape(b, 3, segs, pv, ch).reshape(b, 3, g, ch)
        return [VMField(mats[i, 0], mats[i, 1], mats[i, 2],
                        vecs[i, 0], vecs[i, 1], vecs[i, 2], self.heads)
                for i in range(b)]

    # full forward -----------------------------------------------------------

    def forward(self, z_t: torch.Tensor, x_ref: torch.Tensor | None,
                cond: list[CameraConditioning], drop_mask: torch.Tensor | None = None,
                t=None) -> list[VMField]:
        """z_t: (B, 3, H, W); x_ref: (B, 3, H, W) or None for all-unconditional."""
        b = z_t.shape[0]
        noisy_tokens = self.encode(z_t)
        m = noisy_tokens.shape[1]
        if drop_mask is None:
            drop_mask = torch.zeros(b, dtype=torch.bool) if x_ref is not None \
                else torch.ones(b, dtype=torch.bool)
        if x_ref is None:
            ref_tokens = self.null_reference.expand(b, m, -1)
        else:
            ref_tokens = self.encode(x_ref)
            if drop_mask.any():
                null = self.null_reference.expand(int(drop_mask.sum()), m, -1)
                ref_tokens = ref_tokens.clone()
                ref_tokens[drop_mask] = null
        out_tokens = self.decode(noisy_tokens, ref_tokens, cond, drop_mask=drop_mask, t=t)
        return self.tokens_to_field(out_tokens)

    def count_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())
