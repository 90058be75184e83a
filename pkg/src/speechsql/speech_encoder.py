"""Convolutional speech encoder: log-mel frames -> speech embedding ``Z_a``."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .errors import ShapeMismatch
from .features import N_MELS, SpeechFeatures


@dataclass
class SpeechEncoderConfig:
    n_blocks: int = 6
    channels: int = 128
    kernel: tuple[int, int] = (3, 3)
    time_stride_blocks: tuple[int, ...] = (2, 4, 6)
    # blocks that also halve the mel axis; empty keeps full mel resolution
    mel_stride_blocks: tuple[int, ...] = ()
    d_model: int = 512

    def __post_init__(self):
        if self.n_blocks < 1 or self.d_model < 1:
            raise ValueError("n_blocks and d_model must be >= 1")
        self.kernel = tuple(self.kernel)
        self.time_stride_blocks = tuple(self.time_stride_blocks)
        self.mel_stride_blocks = tuple(self.mel_stride_blocks)

    def out_length(self, n_frames: int) -> int:
        for b in range(1, self.n_blocks + 1):
            if b in self.time_stride_blocks:
                n_frames = math.ceil(n_frames / 2)
        return n_frames


class MaskedBatchNorm2d(nn.Module):
    """BatchNorm over (batch, time, mel) that ignores padded time steps.

    Training uses statistics of the valid positions only, inference uses the
    running averages, so a padded utterance encodes exactly as it would alone.
    """

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.eps = eps
        self.momentum = momentum
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))
        self.register_buffer("running_mean", torch.zeros(channels))
        self.register_buffer("running_var", torch.ones(channels))

    def forward(self, x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        # x: (B, C, T, F); mask: (B, T) true on valid frames
        if self.training:
            m = mask[:, None, :, None].to(x.dtype)
            count = m.sum() * x.shape[-1]
            mean = (x * m).sum(dim=(0, 2, 3)) / count
            var = (((x - mean[None, :, None, None]) ** 2) * m).sum(dim=(0, 2, 3)) / count
            with torch.no_grad():
                unbiased = var * count / max(count.item() - 1, 1)
                self.running_mean.mul_(1 - self.momentum).add_(self.momentum * mean.detach())
                self.running_var.mul_(1 - self.momentum).add_(self.momentum * unbiased.detach())
        else:
            mean, var = self.running_mean, self.running_var
        xhat = (x - mean[None, :, None, None]) / torch.sqrt(var[None, :, None, None] + self.eps)
        return xhat * self.weight[None, :, None, None] + self.bias[None, :, None, None]


class ConvBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int, kernel, stride):
        super().__init__()
        pad = (kernel[0] // 2, kernel[1] // 2)
        # no conv bias: the BN shift that follows makes it redundant
        self.conv = nn.Conv2d(c_in, c_out, kernel, stride=stride, padding=pad, bias=False)
        self.bn = MaskedBatchNorm2d(c_out)
        self.stride = stride

    def forward(self, x, lengths):
        x = self.conv(x)
        if self.stride[0] == 2:
            lengths = (lengths + 1) // 2
        mask = torch.arange(x.shape[2], device=x.device)[None, :] < lengths[:, None]
        x = torch.relu(self.bn(x, mask))
        # zero padded frames so they cannot leak into valid ones through the next kernel
        return x * mask[:, None, :, None].to(x.dtype), lengths


class SpeechEncoder(nn.Module):
    """Stack of Conv -> BN -> ReLU blocks, mel mean-pool, linear map to ``d_model``."""

    def __init__(self, cfg: SpeechEncoderConfig):
        super().__init__()
        self.cfg = cfg
        blocks = []
        for b in range(1, cfg.n_blocks + 1):
            stride = (2 if b in cfg.time_stride_blocks else 1, 2 if b in cfg.mel_stride_blocks else 1)
            blocks.append(ConvBlock(1 if b == 1 else cfg.channels, cfg.channels, cfg.kernel, stride))
        self.blocks = nn.ModuleList(blocks)
        self.proj = nn.Linear(cfg.channels, cfg.d_model)

    def forward(self, feats: torch.Tensor, lengths: torch.Tensor):
        """``feats`` (B, T, 96) padded, ``lengths`` (B,) -> (Z_a (B, T', d), mask (B, T'))."""
        if feats.dim() != 3 or feats.shape[-1] != N_MELS:
            raise ShapeMismatch(f"expected (B, T, {N_MELS}) features, got {tuple(feats.shape)}")
        x = feats.unsqueeze(1)
        lengths = lengths.to(torch.long)
        valid = torch.arange(x.shape[2])[None, :] < lengths[:, None]
        x = x * valid[:, None, :, None].to(x.dtype)
        for block in self.blocks:
            x, lengths = block(x, lengths)
        z = self.proj(x.mean(dim=3).transpose(1, 2))
        mask = torch.arange(z.shape[1])[None, :] < lengths[:, None]
        return z * mask[..., None].to(z.dtype), mask


def collate_features(batch: list[SpeechFeatures], dtype=torch.float32):
    lengths = torch.tensor([f.n_frames for f in batch], dtype=torch.long)
    out = np.zeros((len(batch), int(lengths.max()), N_MELS), dtype=np.float32)
    for i, f in enumerate(batch):
        out[i, : f.n_frames] = f.data
    return torch.from_numpy(out).to(dtype), lengths


def encode_speech(f: SpeechFeatures, cfg: SpeechEncoderConfig, params: SpeechEncoder) -> torch.Tensor:
    """Single-utterance convenience wrapper returning ``Z_a`` of shape (l_out, d_model)."""
    if params.cfg.d_model != cfg.d_model or params.cfg.n_blocks != cfg.n_blocks:
        raise ShapeMismatch("encoder parameters do not match the config")
    dtype = next(params.parameters()).dtype
    x, lengths = collate_features([f], dtype)
    z, _ = params(x, lengths)
    return z[0]
