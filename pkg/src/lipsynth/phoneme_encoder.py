"""Phoneme sequence encoder: index, pad, embed, add durations and positions,
run a masked Transformer, project to the final embedding Y and a pooled vector.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .errors import ConfigError, EmptySequenceError, LengthOverflowError


@dataclass
class PaddedPhonemes:
    """Fixed-length index/duration vectors; entries past valid_len are PAD/0."""

    indices: torch.Tensor  # (T,) long, PAD = 0
    durations: torch.Tensor  # (T,) float, 0 past valid_len
    valid_len: int


def pad_and_index(phonemes, durations, fixed_len, inventory):
    """Map symbols to table indices and zero-pad both vectors to fixed_len."""
    x = len(phonemes)
    if x > fixed_len:
        raise LengthOverflowError(f"sequence length {x} exceeds fixed length {fixed_len}")
    idx = torch.zeros(fixed_len, dtype=torch.long)
    dur = torch.zeros(fixed_len, dtype=torch.get_default_dtype())
    for i, (sym, d) in enumerate(zip(phonemes, durations)):
        idx[i] = inventory.index(sym)
        dur[i] = float(d)
    return PaddedPhonemes(indices=idx, durations=dur, valid_len=x)


def positional_encoding(length, dim, dtype=None):
    """Standard sinusoidal positional encoding, shape (length, dim)."""
    if length < 1 or dim < 1:
        raise ConfigError("length and dim must be >= 1")
    if dim % 2 != 0:
        raise ConfigError("positional encoding dimension must be even")
    pos = np.arange(length)[:, None]
    k = np.arange(dim // 2)[None, :]
    angle = pos / np.power(10000.0, 2.0 * k / dim)
    pe = np.zeros((length, dim))
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle)
    return torch.as_tensor(pe, dtype=dtype or torch.get_default_dtype())


class MaskedBatchNorm(nn.Module):
    """BatchNorm over features, with statistics taken only at valid positions.

    Falls back to running statistics when fewer than two valid positions are
    available in training mode (degenerate variance otherwise).
    """

    def __init__(self, num_features, momentum=0.1, eps=1e-5):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(num_features))
        self.bias = nn.Parameter(torch.zeros(num_features))
        self.register_buffer("running_mean", torch.zeros(num_features))
        self.register_buffer("running_var", torch.ones(num_features))
        self.momentum = momentum
        self.eps = eps

    def forward(self, x, valid_mask):
        # x: (B, T, F); valid_mask: (B, T) bool
        count = int(valid_mask.sum())
        if self.training and count >= 2:
            flat = x[valid_mask]  # (count, F)
            mean = flat.mean(dim=0)
            var = flat.var(dim=0, unbiased=False)
            with torch.no_grad():
                self.running_mean.mul_(1 - self.momentum).add_(self.momentum * mean)
                unbiased = var * count / max(count - 1, 1)
                self.running_var.mul_(1 - self.momentum).add_(self.momentum * unbiased)
        else:
            mean, var = self.running_mean, self.running_var
        x = (x - mean) / torch.sqrt(var + self.eps)
        return x * self.weight + self.bias


@dataclass
class PhonemeEmbedding:
    """All intermediate tensors of the encoding pipeline for one batch item."""

    embedded: torch.Tensor  # (T, D)
    norm_durations: torch.Tensor  # (T,), sums to 1 over valid entries
    positions: torch.Tensor  # (T, D)
    concat: torch.Tensor  # (T, 2D+1)
    transformed: torch.Tensor  # (T, 2D+1)
    final: torch.Tensor  # Y: (T, 2D)
    pooled: torch.Tensor  # (E,)


class PhonemeEncoderConfig:
    def __init__(self, fixed_len=32, feature_dim=64, layers=2, heads=3,
                 pooled_dim=512, table_size=17):
        d_model = 2 * feature_dim + 1
        if d_model % heads != 0:
            raise ConfigError(
                f"transformer width {d_model} not divisible by {heads} heads"
            )
        if feature_dim % 2 != 0:
            raise ConfigError("feature_dim must be even for positional encoding")
        self.fixed_len = fixed_len
        self.feature_dim = feature_dim
        self.layers = layers
        self.heads = heads
        self.pooled_dim = pooled_dim
        self.table_size = table_size

    def to_dict(self):
        return dict(fixed_len=self.fixed_len, feature_dim=self.feature_dim,
                    layers=self.layers, heads=self.heads,
                    pooled_dim=self.pooled_dim, table_size=self.table_size)


class PhonemeEncoder(nn.Module):
    """Transformer encoder over embedded phonemes, durations and positions."""

    def __init__(self, config: PhonemeEncoderConfig):
        super().__init__()
        self.config = config
        T, D = config.fixed_len, config.feature_dim
        d_model = 2 * D + 1
        self.embedding = nn.Embedding(config.table_size, D, padding_idx=0)
        self.register_buffer("pos_enc", positional_encoding(T, D))
        layer = nn.TransformerEncoderLayer(
            d_model=d_model, nhead=config.heads,
            dim_feedforward=4 * d_model, dropout=0.0, batch_first=True,
        )
        self.transformer = nn.TransformerEncoder(layer, num_layers=config.layers, enable_nested_tensor=False)
        self.out_proj = nn.Linear(d_model, 2 * D)
        self.out_norm = MaskedBatchNorm(2 * D)
        self.pool_proj = nn.Linear(2 * D, config.pooled_dim)

    def forward(self, indices, durations, valid_lens):
        """Batched encode. indices: (B, T) long; durations: (B, T); valid_lens: (B,).

        Returns (Y, pooled): (B, T, 2D) and (B, E).
        """
        B, T = indices.shape
        if T != self.config.fixed_len:
            raise ConfigError(f"expected fixed length {self.config.fixed_len}, got {T}")
        valid_lens = torch.as_tensor(valid_lens, dtype=torch.long)
        if (valid_lens < 1).any():
            raise EmptySequenceError("every item needs at least one valid phoneme")
        arange = torch.arange(T)
        valid = arange[None, :] < valid_lens[:, None]  # (B, T)

        emb = self.embedding(indices)  # (B, T, D)
        dur = durations * valid
        total = dur.sum(dim=1, keepdim=True)
        norm_dur = dur / total
        pos = self.pos_enc.to(emb.dtype)[None].expand(B, -1, -1)
        cat = torch.cat([emb, norm_dur[..., None], pos], dim=-1)  # (B, T, 2D+1)
        tm = self.transformer(cat, src_key_padding_mask=~valid)
        y = self.out_norm(self.out_proj(tm), valid)
        # mean over valid positions only, so PAD content cannot leak into pooled
        mask = valid[..., None].to(y.dtype)
        mean_y = (y * mask).sum(dim=1) / mask.sum(dim=1)
        pooled = self.pool_proj(mean_y)
        return y, pooled

    def encode(self, padded: PaddedPhonemes) -> PhonemeEmbedding:
        """Single-item encode returning every intermediate tensor."""
        if padded.valid_len < 1:
            raise EmptySequenceError("empty phoneme sequence")
        T, D = self.config.fixed_len, self.config.feature_dim
        idx = padded.indices[None]
        dur = padded.durations[None]
        valid = torch.arange(T)[None, :] < padded.valid_len

        emb = self.embedding(idx)
        dur = dur * valid
        norm_dur = dur / dur.sum(dim=1, keepdim=True)
        pos = self.pos_enc.to(emb.dtype)[None]
        cat = torch.cat([emb, norm_dur[..., None], pos], dim=-1)
        tm = self.transformer(cat, src_key_padding_mask=~valid)
        y = self.out_norm(self.out_proj(tm), valid)
        mask = valid[..., None].to(y.dtype)
        mean_y = (y * mask).sum(dim=1) / mask.sum(dim=1)
        pooled = self.pool_proj(mean_y)
        return PhonemeEmbedding(
            embedded=emb[0], norm_durations=norm_dur[0], positions=pos[0],
            concat=cat[0], transformed=tm[0], final=y[0], pooled=pooled[0],
        )
