"""Lip-sync discriminator: audio and lower-half video encoders scored by a
(0,1)-mapped cosine similarity, with plain and phoneme-fused BCE sync losses.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .errors import ArgumentError, ConfigError, DegenerateEmbeddingError
from .phoneme_encoder import pad_and_index

SIM_EPS = 1e-7


@dataclass
class SyncBatch:
    """A batch of audio/video windows with match labels."""

    audio_windows: torch.Tensor  # (B, A, W)
    video_windows: torch.Tensor  # (B, 3*W, H/2, W_px) lower-half crops
    phoneme_indices: torch.Tensor  # (B, T) long
    phoneme_durations: torch.Tensor  # (B, T)
    phoneme_valid_lens: torch.Tensor  # (B,) long
    labels: torch.Tensor  # (B,) float in {0, 1}

    def __len__(self):
        return self.labels.shape[0]


def similarity(m, n):
    """Cosine similarity affinely mapped to (0, 1) and clamped away from
    {0, 1} so BCE logs stay finite. Works on (..., E) tensors."""
    m_norm = torch.linalg.vector_norm(m, dim=-1)
    n_norm = torch.linalg.vector_norm(n, dim=-1)
    if (m_norm == 0).any() or (n_norm == 0).any():
        raise DegenerateEmbeddingError("zero-norm embedding in similarity")
    cos = (m * n).sum(dim=-1) / (m_norm * n_norm)
    return torch.clamp((cos + 1.0) / 2.0, SIM_EPS, 1.0 - SIM_EPS)


def _bce(scores, labels):
    return (-(labels * torch.log(scores) + (1.0 - labels) * torch.log(1.0 - scores))).mean()


class AudioEncoder(nn.Module):
    def __init__(self, audio_dim=16, embed_dim=512, width=64):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv1d(audio_dim, width, 3, padding=1),
            nn.BatchNorm1d(width),
            nn.LeakyReLU(0.2),
            nn.Conv1d(width, 2 * width, 3, padding=1),
            nn.BatchNorm1d(2 * width),
            nn.LeakyReLU(0.2),
            nn.Conv1d(2 * width, 2 * width, 3, padding=1),
            nn.BatchNorm1d(2 * width),
            nn.LeakyReLU(0.2),
            nn.AdaptiveAvgPool1d(1),
        )
        self.proj = nn.Linear(2 * width, embed_dim)

    def forward(self, x):
        return self.proj(self.net(x)[..., 0])


class VideoEncoder(nn.Module):
    """Strided conv stack over W stacked lower-half crops, global pooling."""

    def __init__(self, window=5, embed_dim=512, width=32):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(3 * window, width, 3, stride=1, padding=1),
            nn.BatchNorm2d(width),
            nn.LeakyReLU(0.2),
            nn.Conv2d(width, 2 * width, 3, stride=2, padding=1),
            nn.BatchNorm2d(2 * width),
            nn.LeakyReLU(0.2),
            nn.Conv2d(2 * width, 4 * width, 3, stride=2, padding=1),
            nn.BatchNorm2d(4 * width),
            nn.LeakyReLU(0.2),
            nn.Conv2d(4 * width, 4 * width, 3, stride=2, padding=1),
            nn.BatchNorm2d(4 * width),
            nn.LeakyReLU(0.2),
            nn.AdaptiveAvgPool2d(1),
        )
        self.proj = nn.Linear(4 * width, embed_dim)

    def forward(self, x):
        return self.proj(self.net(x)[..., 0, 0])


class SyncDiscriminator(nn.Module):
    def __init__(self, audio_dim=16, window=5, embed_dim=512):
        super().__init__()
        self.window = window
        self.embed_dim = embed_dim
        self.audio_encoder = AudioEncoder(audio_dim, embed_dim)
        self.video_encoder = VideoEncoder(window, embed_dim)

    def embed(self, batch: SyncBatch):
        return self.audio_encoder(batch.audio_windows), self.video_encoder(batch.video_windows)


def sync_loss(batch, model):
    """BCE over (0,1)-mapped cosine similarity of audio and video embeddings."""
    if len(batch) == 0:
        raise ArgumentError("empty sync batch")
    a, v = model.embed(batch)
    return _bce(similarity(a, v), batch.labels)


def fused_sync_loss(batch, model, phoneme_encoder):
    """Same as sync_loss with the pooled phoneme embedding added to audio."""
    if len(batch) == 0:
        raise ArgumentError("empty sync batch")
    a, v = model.embed(batch)
    _, p = phoneme_encoder(
        batch.phoneme_indices, batch.phoneme_durations, batch.phoneme_valid_lens
    )
    if p.shape[-1] != a.shape[-1]:
        raise ConfigError(
            f"phoneme pooled dim {p.shape[-1]} != audio embed dim {a.shape[-1]}"
        )
    return _bce(similarity(a + p, v), batch.labels)


def lower_half_window(frames, start, window):
    """(N, H, W, 3) frames -> (3*window, H/2, W) channel-stacked crop."""
    h = frames.shape[1]
    crop = frames[start:start + window, h // 2:, :, :]  # (W, H/2, W_px, 3)
    crop = np.transpose(crop, (0, 3, 1, 2)).reshape(-1, crop.shape[1], crop.shape[2])
    return crop


def phoneme_window(clip, start, window):
    """Sub-sequence of phonemes overlapping frames [start, start+window),
    durations clipped to the overlap."""
    phonemes, durations = [], []
    pos = 0
    for sym, d in zip(clip.phonemes, clip.durations):
        lo = max(pos, start)
        hi = min(pos + d, start + window)
        if hi > lo:
            phonemes.append(sym)
            durations.append(hi - lo)
        pos += d
    return phonemes, durations


def sample_pairs(clips, p_match, window, rng_seed, batch_size, inventory,
                 fixed_len=32, dtype=None):
    """Draw a SyncBatch. Matched pairs with probability p_match; mismatches
    split between temporal offsets (>= window/2 within the same clip) and
    audio from a different clip. The phoneme window always follows the audio.
    """
    if not 0.0 < p_match < 1.0:
        raise ArgumentError("p_match must be in (0, 1)")
    usable = [c for c in clips if c.n_frames >= window]
    skipped = len(clips) - len(usable)
    if skipped:
        warnings.warn(f"skipped {skipped} clips shorter than {window} frames")
    if not usable:
        raise ArgumentError("no clips long enough for the requested window")
    rng = np.random.default_rng(int(rng_seed))
    dtype = dtype or torch.get_default_dtype()

    audio, video, labels = [], [], []
    ph_idx, ph_dur, ph_len = [], [], []
    for _ in range(batch_size):
        ci = int(rng.integers(0, len(usable)))
        clip = usable[ci]
        v_start = int(rng.integers(0, clip.n_frames - window + 1))
        matched = bool(rng.random() < p_match)
        min_off = (window + 1) // 2
        cands = [s for s in range(clip.n_frames - window + 1)
                 if abs(s - v_start) >= min_off]
        if matched:
            a_clip, a_start = clip, v_start
        elif cands and rng.random() < 0.5:
            # temporal offset within the same clip
            a_clip, a_start = clip, int(cands[rng.integers(0, len(cands))])
        else:
            cj = int(rng.integers(0, len(usable)))
            if len(usable) > 1:
                while cj == ci:
                    cj = int(rng.integers(0, len(usable)))
            a_clip = usable[cj]
            a_start = int(rng.integers(0, a_clip.n_frames - window + 1))

        audio.append(a_clip.audio_features[:, a_start:a_start + window])
        video.append(lower_half_window(clip.frames, v_start, window))
        labels.append(1.0 if matched else 0.0)
        phs, durs = phoneme_window(a_clip, a_start, window)
        padded = pad_and_index(phs, durs, fixed_len, inventory)
        ph_idx.append(padded.indices)
        ph_dur.append(padded.durations.to(dtype))
        ph_len.append(padded.valid_len)

    return SyncBatch(
        audio_windows=torch.as_tensor(np.stack(audio), dtype=dtype),
        video_windows=torch.as_tensor(np.stack(video), dtype=dtype),
        phoneme_indices=torch.stack(ph_idx),
        phoneme_durations=torch.stack(ph_dur),
        phoneme_valid_lens=torch.as_tensor(ph_len, dtype=torch.long),
        labels=torch.as_tensor(labels, dtype=dtype),
    )
