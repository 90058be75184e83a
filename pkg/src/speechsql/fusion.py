"""Schema linking and the two-stream (speech / schema) transformer encoder."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn

from .errors import ShapeMismatch


@dataclass
class FusionConfig:
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 1024
    d_model: int = 512
    dropout: float = 0.3
    use_positional_encoding: bool = True

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")


def link_scores(z_a: torch.Tensor, z_s: torch.Tensor, mask_s: torch.Tensor | None = None) -> torch.Tensor:
    """Row-wise cosine similarity ``g[..., i, j]``; zero rows score 0."""
    if z_a.shape[-1] != z_s.shape[-1]:
        raise ShapeMismatch(f"widths differ: {z_a.shape[-1]} vs {z_s.shape[-1]}")
    na = z_a.norm(dim=-1, keepdim=True)
    ns = z_s.norm(dim=-1, keepdim=True)
    a = z_a / torch.where(na > 0, na, torch.ones_like(na))
    s = z_s / torch.where(ns > 0, ns, torch.ones_like(ns))
    g = (a @ s.transpose(-1, -2)).clamp(-1.0, 1.0)
    if mask_s is not None:
        g = g * mask_s.unsqueeze(-2).to(g.dtype)
    return g


def apply_linking(z_a: torch.Tensor, z_s: torch.Tensor, g: torch.Tensor) -> torch.Tensor:
    if g.shape[-2] != z_a.shape[-2] or g.shape[-1] != z_s.shape[-2]:
        raise ShapeMismatch(f"scores {tuple(g.shape)} do not fit {tuple(z_a.shape)} x {tuple(z_s.shape)}")
    return z_a + g @ z_s


def sinusoidal_encoding(length: int, d_model: int, dtype=torch.float32) -> torch.Tensor:
    pos = torch.arange(length, dtype=torch.float64)[:, None]
    div = torch.exp(torch.arange(0, d_model, 2, dtype=torch.float64) * (-math.log(10000.0) / d_model))
    pe = torch.zeros(length, d_model, dtype=torch.float64)
    pe[:, 0::2] = torch.sin(pos * div)
    pe[:, 1::2] = torch.cos(pos * div)[:, : d_model // 2]
    return pe.to(dtype)


class MultiHeadAttention(nn.Module):
    """Scaled dot-product attention over ``n_heads`` projections (no biases)."""

    def __init__(self, d_model: int, n_heads: int):
        super().__init__()
        self.h = n_heads
        self.dk = d_model // n_heads
        self.w_q = nn.Linear(d_model, d_model, bias=False)
        self.w_k = nn.Linear(d_model, d_model, bias=False)
        self.w_v = nn.Linear(d_model, d_model, bias=False)
        self.w_o = nn.Linear(d_model, d_model, bias=False)
        self.last_weights: torch.Tensor | None = None

    def forward(self, q, k, v, key_mask: torch.Tensor | None = None):
        b, lq, d = q.shape
        lk = k.shape[1]
        split = lambda x, n: x.view(b, n, self.h, self.dk).transpose(1, 2)  # noqa: E731
        qh, kh, vh = split(self.w_q(q), lq), split(self.w_k(k), lk), split(self.w_v(v), lk)
        scores = qh @ kh.transpose(-1, -2) / math.sqrt(self.dk)
        if key_mask is not None:
            scores = scores.masked_fill(~key_mask[:, None, None, :], float("-inf"))
        weights = torch.softmax(scores, dim=-1)
        self.last_weights = weights
        out = (weights @ vh).transpose(1, 2).reshape(b, lq, d)
        return self.w_o(out)


class StreamLayer(nn.Module):
    """One modality's half of a fusion layer: SA + CA, then FFN, each with residual + LN."""

    def __init__(self, cfg: FusionConfig):
        super().__init__()
        self.self_attn = MultiHeadAttention(cfg.d_model, cfg.n_heads)
        self.cross_attn = MultiHeadAttention(cfg.d_model, cfg.n_heads)
        self.ln1 = nn.LayerNorm(cfg.d_model)
        self.ln2 = nn.LayerNorm(cfg.d_model)
        self.ffn = nn.Sequential(nn.Linear(cfg.d_model, cfg.d_ff), nn.ReLU(), nn.Linear(cfg.d_ff, cfg.d_model))
        self.drop = nn.Dropout(cfg.dropout)

    def forward(self, x, own_mask, other, other_mask):
        y = self.self_attn(x, x, x, own_mask) + self.cross_attn(x, other, other, other_mask)
        y = self.ln1(x + self.drop(y))
        return self.ln2(y + self.drop(self.ffn(y)))


class FusionLayer(nn.Module):
    def __init__(self, cfg: FusionConfig):
        super().__init__()
        self.speech = StreamLayer(cfg)
        self.schema = StreamLayer(cfg)

    def forward(self, z_a, mask_a, z_s, mask_s):
        new_a = self.speech(z_a, mask_a, z_s, mask_s)
        new_s = self.schema(z_s, mask_s, z_a, mask_a)
        return new_a, new_s


class Fusion(nn.Module):
    def __init__(self, cfg: FusionConfig):
        super().__init__()
        self.cfg = cfg
        self.layers = nn.ModuleList(FusionLayer(cfg) for _ in range(cfg.n_layers))

    def forward(self, z_a, mask_a, z_s, mask_s):
        if z_a.shape[-1] != self.cfg.d_model or z_s.shape[-1] != self.cfg.d_model:
            raise ShapeMismatch("fusion inputs must have width d_model")
        if self.cfg.use_positional_encoding:
            z_a = z_a + sinusoidal_encoding(z_a.shape[1], z_a.shape[2], z_a.dtype)[None]
        for layer in self.layers:
            z_a, z_s = layer(z_a, mask_a, z_s, mask_s)
        return z_a, z_s

    def attention_weights(self) -> list[torch.Tensor]:
        out = []
        for layer in self.layers:
            for stream in (layer.speech, layer.schema):
                out += [stream.self_attn.last_weights, stream.cross_attn.last_weights]
        return out


def fuse(z_a, z_s, fusion: Fusion, mask_a=None, mask_s=None):
    """Unbatched convenience wrapper: (l_a, d), (l_s, d) -> fused pair."""
    ma = torch.ones(1, z_a.shape[0], dtype=torch.bool) if mask_a is None else mask_a[None]
    ms = torch.ones(1, z_s.shape[0], dtype=torch.bool) if mask_s is None else mask_s[None]
    a, s = fusion(z_a[None], ma, z_s[None], ms)
    return a[0], s[0]
