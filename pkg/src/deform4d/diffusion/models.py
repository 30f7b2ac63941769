"""Transformer denoisers operating on per-layer feature tokens.

A flattened feature splits into one latent token plus one coefficient token
per MLP layer; the raw token widths differ, so every position gets its own
input and output projection into a shared inner dimension.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from ..dictionary import FeatureLayout
from ..fields import DTYPE
from .schedule import timestep_embedding


class ModelError(Exception):
    pass


@dataclass
class DenoiserConfig:
    token_dim: int = 256
    depth: int = 8
    n_heads: int = 4
    t_frames: int = 6
    k_frames: int = 2

    def __post_init__(self):
        if self.token_dim % self.n_heads != 0:
            raise ModelError("token_dim must be divisible by n_heads")
        if not 0 < self.k_frames < self.t_frames:
            raise ModelError("need 0 < k_frames < t_frames")

    def to_dict(self):
        return {
            "token_dim": self.token_dim,
            "depth": self.depth,
            "n_heads": self.n_heads,
            "t_frames": self.t_frames,
            "k_frames": self.k_frames,
        }


class TokenNorm:
    """Per-entry normalization statistics computed over a training feature set."""

    STD_FLOOR = 1e-6

    def __init__(self, mean, std):
        self.mean = torch.as_tensor(mean, dtype=DTYPE)
        self.std = torch.as_tensor(std, dtype=DTYPE).clamp_min(self.STD_FLOOR)

    @classmethod
    def from_features(cls, features):
        features = torch.as_tensor(features, dtype=DTYPE)
        if features.ndim != 2 or len(features) < 1:
            raise ModelError("expected a (N, dim) feature matrix")
        std = features.std(dim=0, unbiased=False) if len(features) > 1 else torch.ones(features.shape[1], dtype=DTYPE)
        return cls(features.mean(dim=0), std)

    def normalize(self, x):
        x = torch.as_tensor(x, dtype=DTYPE)
        if x.shape[-1] != self.mean.shape[0]:
            raise ModelError(
                f"feature dim {x.shape[-1]} != norm dim {self.mean.shape[0]}"
            )
        return (x - self.mean) / self.std

    def denormalize(self, x):
        x = torch.as_tensor(x, dtype=DTYPE)
        if x.shape[-1] != self.mean.shape[0]:
            raise ModelError(
                f"feature dim {x.shape[-1]} != norm dim {self.mean.shape[0]}"
            )
        return x * self.std + self.mean


def normalize_features(features, norm: TokenNorm):
    return norm.normalize(features)


def denormalize_features(features, norm: TokenNorm):
    return norm.denormalize(features)


class _SelfAttentionBlock(nn.Module):
    """Pre-LN self-attention followed by a GELU MLP."""

    def __init__(self, dim, n_heads):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = nn.MultiheadAttention(dim, n_heads, batch_first=True)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(
            nn.Linear(dim, dim * 4), nn.GELU(), nn.Linear(dim * 4, dim)
        )

    def forward(self, x):
        h = self.norm1(x)
        x = x + self.attn(h, h, h, need_weights=False)[0]
        return x + self.mlp(self.norm2(x))


def _split_tokens(x, widths):
    tokens = []
    off = 0
    for w in widths:
        tokens.append(x[..., off : off + w])
        off += w
    return tokens


class ShapeDenoiser(nn.Module):
    """Predicts the clean flattened feature from its noised version and t."""

    def __init__(self, layout: FeatureLayout, config: DenoiserConfig):
        super().__init__()
        self.layout = layout
        self.config = config
        widths = layout.token_widths()
        d = config.token_dim
        self.in_proj = nn.ModuleList([nn.Linear(w, d) for w in widths])
        self.out_proj = nn.ModuleList([nn.Linear(d, w) for w in widths])
        self.pos_emb = nn.Parameter(torch.zeros(len(widths), d))
        self.t_proj = nn.Sequential(nn.Linear(d, d), nn.SiLU(), nn.Linear(d, d))
        self.blocks = nn.ModuleList(
            [_SelfAttentionBlock(d, config.n_heads) for _ in range(config.depth)]
        )
        self.final_norm = nn.LayerNorm(d)
        self.double()

    def forward(self, x, t):
        if x.shape[-1] != self.layout.total_dim:
            raise ModelError(
                f"token dim {x.shape[-1]} != layout total {self.layout.total_dim}"
            )
        tokens = _split_tokens(x, self.layout.token_widths())
        t_emb = self.t_proj(timestep_embedding(t, self.config.token_dim))
        if t_emb.dim() == 1:
            t_emb = t_emb[None]
        h = torch.stack(
            [proj(tok) for proj, tok in zip(self.in_proj, tokens)], dim=1
        )  # (B, P, d)
        h = h + self.pos_emb[None] + t_emb[:, None, :]
        for block in self.blocks:
            h = block(h)
        h = self.final_norm(h)
        out = [proj(h[:, p]) for p, proj in enumerate(self.out_proj)]
        return torch.cat(out, dim=-1)


class _MotionBlock(nn.Module):
    """Spatial self-attention, condition cross-attention, temporal self-attention.

    Spatial attention mixes tokens within one frame; temporal attention mixes
    the same token position across frames. When the owner disables temporal
    attention, frames are provably independent of each other.
    """

    def __init__(self, dim, n_heads):
        super().__init__()
        self.norm_s = nn.LayerNorm(dim)
        self.attn_s = nn.MultiheadAttention(dim, n_heads, batch_first=True)
        self.norm_c = nn.LayerNorm(dim)
        self.attn_c = nn.MultiheadAttention(dim, n_heads, batch_first=True)
        self.norm_t = nn.LayerNorm(dim)
        self.attn_t = nn.MultiheadAttention(dim, n_heads, batch_first=True)
        self.norm_m = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(
            nn.Linear(dim, dim * 4), nn.GELU(), nn.Linear(dim * 4, dim)
        )

    def forward(self, h, cond, temporal_enabled=True):
        # h: (B, T, P, d); cond: (B, 1, d)
        b, t, p, d = h.shape
        x = h.reshape(b * t, p, d)
        y = self.norm_s(x)
        x = x + self.attn_s(y, y, y, need_weights=False)[0]
        y = self.norm_c(x)
        kv = cond.repeat_interleave(t, dim=0)
        x = x + self.attn_c(y, kv, kv, need_weights=False)[0]
        h = x.reshape(b, t, p, d)
        if temporal_enabled:
            x = h.permute(0, 2, 1, 3).reshape(b * p, t, d)
            y = self.norm_t(x)
            x = x + self.attn_t(y, y, y, need_weights=False)[0]
            h = x.reshape(b, p, t, d).permute(0, 2, 1, 3)
        return h + self.mlp(self.norm_m(h))


class MotionDenoiser(nn.Module):
    """Window denoiser: (B, t_frames, total_dim) -> same, conditioned on a shape code."""

    def __init__(self, layout: FeatureLayout, cond_dim: int, config: DenoiserConfig):
        super().__init__()
        self.layout = layout
        self.config = config
        self.cond_dim = cond_dim
        self.temporal_enabled = True  # test hook: frame-independence ablation
        widths = layout.token_widths()
        d = config.token_dim
        self.in_proj = nn.ModuleList([nn.Linear(w, d) for w in widths])
        self.out_proj = nn.ModuleList([nn.Linear(d, w) for w in widths])
        self.cond_proj = nn.Linear(cond_dim, d)
        self.pos_emb = nn.Parameter(torch.zeros(len(widths), d))
        self.frame_emb = nn.Parameter(torch.zeros(config.t_frames, d))
        self.t_proj = nn.Sequential(nn.Linear(d, d), nn.SiLU(), nn.Linear(d, d))
        self.blocks = nn.ModuleList(
            [_MotionBlock(d, config.n_heads) for _ in range(config.depth)]
        )
        self.final_norm = nn.LayerNorm(d)
        self.double()

    def forward(self, x, t, cond):
        if x.dim() != 3 or x.shape[1] != self.config.t_frames:
            raise ModelError(
                f"window shape {tuple(x.shape)} != (B, {self.config.t_frames}, dim)"
            )
        if x.shape[-1] != self.layout.total_dim:
            raise ModelError(
                f"token dim {x.shape[-1]} != layout total {self.layout.total_dim}"
            )
        if cond.shape[-1] != self.cond_dim:
            raise ModelError(f"condition dim {cond.shape[-1]} != {self.cond_dim}")
        widths = self.layout.token_widths()
        tokens = _split_tokens(x, widths)  # each (B, T, w)
        h = torch.stack(
            [proj(tok) for proj, tok in zip(self.in_proj, tokens)], dim=2
        )  # (B, T, P, d)
        t_emb = self.t_proj(timestep_embedding(t, self.config.token_dim))
        if t_emb.dim() == 1:
            t_emb = t_emb[None]
        h = h + self.pos_emb[None, None] + self.frame_emb[None, :, None] + t_emb[:, None, None, :]
        if cond.dim() == 1:
            cond = cond[None]
        c = self.cond_proj(cond)[:, None, :]  # (B, 1, d)
        for block in self.blocks:
            h = block(h, c, self.temporal_enabled)
        h = self.final_norm(h)
        out = [proj(h[:, :, p]) for p, proj in enumerate(self.out_proj)]
        return torch.cat(out, dim=-1)
