"""Lip synthesis network: masked-target + identity-reference input stack,
audio/phoneme conditioning, U-Net style decoder, and the L1 reconstruction loss.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .errors import ArgumentError, ConfigError


@dataclass
class FrameStack:
    """Generator input for one target frame."""

    masked_frame: np.ndarray  # (H, W, 3), lower half zeroed
    identity_frame: np.ndarray  # (H, W, 3)
    stacked: np.ndarray  # (H, W, 6)
    target: np.ndarray  # (H, W, 3)
    target_index: int
    identity_index: int


def mask_lower_half(frame):
    out = np.array(frame, copy=True)
    out[out.shape[0] // 2:] = 0.0
    return out


def build_input(clip, target_index, rng_seed):
    """Pick a random identity reference and mask the target's lower half.

    With a single-frame clip the identity reference degenerates to the target
    frame itself.
    """
    n = clip.n_frames
    if not 0 <= target_index < n:
        raise ArgumentError(f"target_index {target_index} out of range [0, {n})")
    rng = np.random.default_rng(int(rng_seed))
    if n == 1:
        identity_index = 0
    else:
        others = [i for i in range(n) if i != target_index]
        identity_index = int(others[rng.integers(0, len(others))])
    target = np.asarray(clip.frames[target_index], dtype=np.float64)
    identity = np.asarray(clip.frames[identity_index], dtype=np.float64)
    masked = mask_lower_half(target)
    return FrameStack(
        masked_frame=masked,
        identity_frame=identity,
        stacked=np.concatenate([masked, identity], axis=-1),
        target=target,
        target_index=int(target_index),
        identity_index=identity_index,
    )


def _conv_block(cin, cout, stride=1):
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, stride=stride, padding=1),
        nn.GroupNorm(4, cout),
        nn.LeakyReLU(0.2),
    )


class LipGenerator(nn.Module):
    """Encoder-decoder with skip connections; audio and pooled phoneme
    embeddings are injected at the bottleneck.
    """

    def __init__(self, resolution=48, audio_dim=16, window=5, embed_dim=512,
                 base_channels=24):
        super().__init__()
        if resolution % 8 != 0:
            raise ConfigError("resolution must be divisible by 8")
        self.resolution = resolution
        self.window = window
        c = base_channels
        self.enc0 = _conv_block(6, c)                 # full res
        self.enc1 = _conv_block(c, 2 * c, stride=2)   # /2
        self.enc2 = _conv_block(2 * c, 4 * c, stride=2)  # /4
        self.enc3 = _conv_block(4 * c, 4 * c, stride=2)  # /8

        self.audio_net = nn.Sequential(
            nn.Conv1d(audio_dim, 2 * c, 3, padding=1),
            nn.LeakyReLU(0.2),
            nn.Conv1d(2 * c, 4 * c, 3, padding=1),
            nn.LeakyReLU(0.2),
            nn.AdaptiveAvgPool1d(1),
        )
        self.phoneme_proj = nn.Linear(embed_dim, 4 * c)

        self.fuse = _conv_block(12 * c, 4 * c)
        self.up = nn.Upsample(scale_factor=2, mode="nearest")
        self.dec3 = _conv_block(4 * c + 4 * c, 4 * c)
        self.dec2 = _conv_block(4 * c + 2 * c, 2 * c)
        self.dec1 = _conv_block(2 * c + c, c)
        self.out_conv = nn.Conv2d(c, 3, 3, padding=1)

    def forward(self, stacked, audio_window, phoneme_pooled):
        """stacked: (B, 6, H, W); audio_window: (B, A, W_frames);
        phoneme_pooled: (B, E). Returns (B, 3, H, W) in [0, 1].
        """
        if stacked.shape[-1] != self.resolution:
            raise ConfigError(
                f"expected resolution {self.resolution}, got {stacked.shape[-1]}"
            )
        e0 = self.enc0(stacked)
        e1 = self.enc1(e0)
        e2 = self.enc2(e1)
        e3 = self.enc3(e2)

        a = self.audio_net(audio_window)[..., 0]  # (B, 4c)
        p = self.phoneme_proj(phoneme_pooled)  # (B, 4c)
        hb, wb = e3.shape[-2:]
        cond = torch.cat([a, p], dim=1)[..., None, None].expand(-1, -1, hb, wb)
        h = self.fuse(torch.cat([e3, cond], dim=1))

        h = self.dec3(torch.cat([self.up(h), e2], dim=1))
        h = self.dec2(torch.cat([self.up(h), e1], dim=1))
        h = self.dec1(torch.cat([self.up(h), e0], dim=1))
        return torch.sigmoid(self.out_conv(h))


def reconstruction_loss(pred, real):
    """Mean over the batch of the per-image mean absolute pixel difference."""
    if pred.shape != real.shape:
        raise ArgumentError("prediction and target shapes differ")
    if pred.shape[0] < 1:
        raise ArgumentError("empty batch")
    per_image = torch.abs(real - pred).flatten(1).mean(dim=1)
    return per_image.mean()


def composite(predicted_face, original_frame, face_box):
    """Paste predicted_face into original_frame inside face_box.

    face_box is (top, left, bottom, right) with inclusive bounds.
    """
    top, left, bottom, right = face_box
    h, w = original_frame.shape[:2]
    if bottom < top or right < left:
        # empty box convention: no-op
        return np.array(original_frame, copy=True)
    if not (0 <= top and bottom < h and 0 <= left and right < w):
        raise ArgumentError(f"face_box {face_box} outside frame bounds {h}x{w}")
    out = np.array(original_frame, copy=True)
    patch = np.asarray(predicted_face)[top:bottom + 1, left:right + 1]
    out[top:bottom + 1, left:right + 1] = patch
    return out
