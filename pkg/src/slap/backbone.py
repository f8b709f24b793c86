"""Fixed-size-latent attention backbone.

A learned latent array cross-attends onto the (variable-length) token
sequence, refines itself with latent self-attention blocks, and the input
tokens then query the latents to produce one output vector per token. Cost
and memory scale with latent_count * sequence_length rather than the square
of the sequence length.
"""

from __future__ import annotations

import numpy as np
import torch
import torch.nn as nn

from slap.config import BackboneConfig
from slap.encoder import SEGMENT_SPATIAL


class MultiHeadAttention(nn.Module):
    def __init__(self, q_dim: int, kv_dim: int, heads: int, dropout: float = 0.0,
                 dtype=torch.float32):
        super().__init__()
        if q_dim % heads != 0:
            raise ValueError(f"q_dim {q_dim} not divisible by heads {heads}")
        self.heads = heads
        self.head_dim = q_dim // heads
        self.scale = self.head_dim ** -0.5
        self.q_proj = nn.Linear(q_dim, q_dim, dtype=dtype)
        self.k_proj = nn.Linear(kv_dim, q_dim, dtype=dtype)
        self.v_proj = nn.Linear(kv_dim, q_dim, dtype=dtype)
        self.out_proj = nn.Linear(q_dim, q_dim, dtype=dtype)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x_q: torch.Tensor, x_kv: torch.Tensor) -> torch.Tensor:
        n, m = x_q.shape[0], x_kv.shape[0]
        q = self.q_proj(x_q).reshape(n, self.heads, self.head_dim).transpose(0, 1)
        k = self.k_proj(x_kv).reshape(m, self.heads, self.head_dim).transpose(0, 1)
        v = self.v_proj(x_kv).reshape(m, self.heads, self.head_dim).transpose(0, 1)
        attn = torch.softmax(q @ k.transpose(1, 2) * self.scale, dim=-1)
        attn = self.dropout(attn)
        out = (attn @ v).transpose(0, 1).reshape(n, -1)
        return self.out_proj(out)


class FeedForward(nn.Module):
    def __init__(self, dim: int, mult: int, dropout: float = 0.0, dtype=torch.float32):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(dim, dim * mult, dtype=dtype),
            nn.GELU(),
            nn.Dropout(dropout),
            nn.Linear(dim * mult, dim, dtype=dtype),
        )

    def forward(self, x):
        return self.net(x)


class _PreNormCross(nn.Module):
    def __init__(self, q_dim, kv_dim, heads, dropout, dtype):
        super().__init__()
        self.norm_q = nn.LayerNorm(q_dim, dtype=dtype)
        self.norm_kv = nn.LayerNorm(kv_dim, dtype=dtype)
        self.attn = MultiHeadAttention(q_dim, kv_dim, heads, dropout, dtype)

    def forward(self, x_q, x_kv):
        return x_q + self.attn(self.norm_q(x_q), self.norm_kv(x_kv))


class _PreNormSelf(nn.Module):
    def __init__(self, dim, heads, ff_mult, dropout, dtype):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim, dtype=dtype)
        self.attn = MultiHeadAttention(dim, dim, heads, dropout, dtype)
        self.norm2 = nn.LayerNorm(dim, dtype=dtype)
        self.ff = FeedForward(dim, ff_mult, dropout, dtype)

    def forward(self, x):
        h = self.norm1(x)
        x = x + self.attn(h, h)
        return x + self.ff(self.norm2(x))


class PerceiverBackbone(nn.Module):
    """Latent cross-attention encoder with token-query decoding."""

    def __init__(self, token_dim: int, cfg: BackboneConfig, dtype=torch.float32):
        super().__init__()
        self.cfg = cfg
        self.latents = nn.Parameter(
            torch.randn(cfg.latent_count, cfg.latent_dim, dtype=dtype) * 0.02)
        self.encode_cross = _PreNormCross(cfg.latent_dim, token_dim, cfg.heads,
                                          cfg.dropout, dtype)
        self.encode_ff = nn.Sequential(
            nn.LayerNorm(cfg.latent_dim, dtype=dtype),
            FeedForward(cfg.latent_dim, cfg.ff_mult, cfg.dropout, dtype),
        )
        self.blocks = nn.ModuleList([
            _PreNormSelf(cfg.latent_dim, cfg.heads, cfg.ff_mult, cfg.dropout, dtype)
            for _ in range(cfg.self_attention_blocks)
        ])
        self.decode_cross = _PreNormCross(token_dim, cfg.latent_dim, cfg.heads,
                                          cfg.dropout, dtype)
        self.decode_ff = nn.Sequential(
            nn.LayerNorm(token_dim, dtype=dtype),
            FeedForward(token_dim, cfg.ff_mult, cfg.dropout, dtype),
        )
        self.out_norm = nn.LayerNorm(token_dim, dtype=dtype)

    def forward(self, sequence: torch.Tensor):
        """-> (per_token_outputs (T, D), pooled_latent (latent_dim,))."""
        if sequence.shape[0] < 1:
            raise ValueError("backbone needs a sequence of length >= 1")
        lat = self.encode_cross(self.latents, sequence)
        lat = lat + self.encode_ff(lat)
        for block in self.blocks:
            lat = block(lat)
        out = self.decode_cross(sequence, lat)
        out = out + self.decode_ff(out)
        return self.out_norm(out), lat.mean(dim=0)


class ScoreHead(nn.Module):
    """Per-spatial-token scalar scores; language/proprio tokens are excluded."""

    def __init__(self, token_dim: int, dtype=torch.float32):
        super().__init__()
        self.proj = nn.Linear(token_dim, 1, dtype=dtype)

    def forward(self, per_token_outputs: torch.Tensor, segments: np.ndarray) -> torch.Tensor:
        spatial = torch.from_numpy(segments == SEGMENT_SPATIAL)
        return self.proj(per_token_outputs[spatial]).squeeze(-1)


def argmax_lowest_index(scores: np.ndarray) -> int:
    """Argmax with ties broken to the lowest index (np.argmax's contract)."""
    return int(np.argmax(scores))


def top_fraction_indices(scores: np.ndarray, fraction: float = 0.05) -> np.ndarray:
    """Indices of the ceil(fraction * n) highest scores, ties to lowest index."""
    n = scores.shape[0]
    k = int(np.ceil(fraction * n))
    order = np.lexsort((np.arange(n), -scores))
    return np.sort(order[:k])
