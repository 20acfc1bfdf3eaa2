"""Evaluation suite: phoneme error rate via a trained lip-reading probe,
SSIM, Fréchet feature distance, and sync-net distance/confidence scores.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn

from .errors import ArgumentError
from .phoneme_encoder import pad_and_index
from .sync_disc import lower_half_window, phoneme_window, similarity


# ---------------------------------------------------------------------------
# Phoneme error rate
# ---------------------------------------------------------------------------

def edit_distance(a, b):
    """Levenshtein distance with unit substitution/insertion/deletion costs."""
    la, lb = len(a), len(b)
    prev = list(range(lb + 1))
    for i in range(1, la + 1):
        cur = [i] + [0] * lb
        for j in range(1, lb + 1):
            sub = prev[j - 1] + (a[i - 1] != b[j - 1])
            cur[j] = min(sub, prev[j] + 1, cur[j - 1] + 1)
        prev = cur
    return prev[lb]


def phoneme_error_rate(predicted, reference):
    """Edit distance between phoneme sequences, normalized by reference length."""
    if len(reference) == 0:
        raise ArgumentError("reference phoneme sequence must be non-empty")
    return edit_distance(predicted, reference) / len(reference)


def collapse_sequence(labels):
    """Merge consecutive identical predictions into a sequence."""
    out = []
    for s in labels:
        if not out or s != out[-1]:
            out.append(s)
    return out


# ---------------------------------------------------------------------------
# Lip-reading probe
# ---------------------------------------------------------------------------

class LipReadingProbe(nn.Module):
    """Per-frame phoneme classifier over the lower half of the face."""

    def __init__(self, n_classes, width=24):
        super().__init__()
        self.n_classes = n_classes
        self.net = nn.Sequential(
            nn.Conv2d(3, width, 3, stride=2, padding=1),
            nn.LeakyReLU(0.2),
            nn.Conv2d(width, 2 * width, 3, stride=2, padding=1),
            nn.LeakyReLU(0.2),
            nn.Conv2d(2 * width, 2 * width, 3, stride=2, padding=1),
            nn.LeakyReLU(0.2),
            nn.AdaptiveAvgPool2d(1),
        )
        self.head = nn.Linear(2 * width, n_classes)

    def forward(self, frames):
        # frames: (B, 3, H, W) full frames; the lower half carries the mouth
        lower = frames[..., frames.shape[-2] // 2:, :]
        return self.head(self.net(lower)[..., 0, 0])


def frame_labels(clip, inventory):
    """Per-frame class indices (0-based over inventory.symbols)."""
    labels = []
    for sym, d in zip(clip.phonemes, clip.durations):
        labels.extend([inventory.index(sym) - 1] * d)
    return np.array(labels, dtype=np.int64)


def _clip_frame_tensor(frames, dtype):
    return torch.as_tensor(np.transpose(frames, (0, 3, 1, 2)), dtype=dtype)


def train_lip_probe(clips, inventory, steps=600, batch_size=64, lr=1e-3,
                    seed=0, holdout_fraction=0.2, dtype=None):
    """Train the per-frame classifier on ground-truth clips.

    Returns (probe, held-out frame accuracy).
    """
    dtype = dtype or torch.get_default_dtype()
    n_hold = max(1, int(len(clips) * holdout_fraction))
    train_clips, hold_clips = clips[:-n_hold], clips[-n_hold:]

    def flatten(cs):
        xs = np.concatenate([c.frames for c in cs])
        ys = np.concatenate([frame_labels(c, inventory) for c in cs])
        return xs, ys

    x_tr, y_tr = flatten(train_clips)
    x_ho, y_ho = flatten(hold_clips)

    torch.manual_seed(int(seed))
    probe = LipReadingProbe(n_classes=len(inventory.symbols)).to(dtype)
    opt = torch.optim.Adam(probe.parameters(), lr=lr)
    ce = nn.CrossEntropyLoss()
    rng = np.random.default_rng(int(seed))
    probe.train()
    for _ in range(steps):
        idx = rng.integers(0, len(x_tr), size=batch_size)
        xb = _clip_frame_tensor(x_tr[idx], dtype)
        yb = torch.as_tensor(y_tr[idx])
        opt.zero_grad()
        loss = ce(probe(xb), yb)
        loss.backward()
        opt.step()
    probe.eval()
    return probe, probe_accuracy(probe, x_ho, y_ho, dtype)


def probe_accuracy(probe, frames, labels, dtype=None):
    dtype = dtype or torch.get_default_dtype()
    probe.eval()
    hits = 0
    with torch.no_grad():
        for i in range(0, len(frames), 256):
            xb = _clip_frame_tensor(frames[i:i + 256], dtype)
            pred = probe(xb).argmax(dim=1).numpy()
            hits += int((pred == labels[i:i + 256]).sum())
    return hits / len(frames)


def probe_read_sequence(probe, frames, inventory, dtype=None):
    """Predict per-frame phonemes and collapse runs into a sequence."""
    dtype = dtype or torch.get_default_dtype()
    probe.eval()
    with torch.no_grad():
        logits = probe(_clip_frame_tensor(frames, dtype))
        pred = logits.argmax(dim=1).numpy()
    return collapse_sequence([inventory.symbols[p] for p in pred])


# ---------------------------------------------------------------------------
# Image quality metrics
# ---------------------------------------------------------------------------

_LUMA = np.array([0.299, 0.587, 0.114])


def ssim(image_a, image_b, window=8, stride=4, c1=0.01**2, c2=0.03**2):
    """Windowed SSIM on luma; mean over windows. Inputs in [0, 1]."""
    a = np.asarray(image_a, dtype=np.float64)
    b = np.asarray(image_b, dtype=np.float64)
    if a.shape != b.shape:
        raise ArgumentError("images must have equal shapes")
    if a.ndim == 3:
        a = a @ _LUMA
        b = b @ _LUMA
    h, w = a.shape
    if h < window or w < window:
        raise ArgumentError("image smaller than SSIM window")
    vals = []
    for i in range(0, h - window + 1, stride):
        for j in range(0, w - window + 1, stride):
            pa = a[i:i + window, j:j + window]
            pb = b[i:i + window, j:j + window]
            mu_a, mu_b = pa.mean(), pb.mean()
            va, vb = pa.var(), pb.var()
            cov = ((pa - mu_a) * (pb - mu_b)).mean()
            vals.append(
                ((2 * mu_a * mu_b + c1) * (2 * cov + c2))
                / ((mu_a**2 + mu_b**2 + c1) * (va + vb + c2))
            )
    return float(np.mean(vals))


def frechet_distance(features_a, features_b, eps=1e-6):
    """Fréchet distance between Gaussian fits of two feature sets."""
    from scipy import linalg

    fa = np.asarray(features_a, dtype=np.float64)
    fb = np.asarray(features_b, dtype=np.float64)
    if fa.ndim != 2 or fb.ndim != 2 or fa.shape[0] < 2 or fb.shape[0] < 2:
        raise ArgumentError("each feature set needs at least 2 samples")
    mu_a, mu_b = fa.mean(axis=0), fb.mean(axis=0)
    cov_a = np.cov(fa, rowvar=False) + eps * np.eye(fa.shape[1])
    cov_b = np.cov(fb, rowvar=False) + eps * np.eye(fb.shape[1])
    cov_a = np.atleast_2d(cov_a)
    cov_b = np.atleast_2d(cov_b)
    covmean = linalg.sqrtm(cov_a @ cov_b)
    if np.iscomplexobj(covmean):
        covmean = covmean.real
    d2 = float(np.sum((mu_a - mu_b) ** 2) + np.trace(cov_a + cov_b - 2.0 * covmean))
    return max(d2, 0.0)


# ---------------------------------------------------------------------------
# Sync-net based scores
# ---------------------------------------------------------------------------

def lse_scores(frames, audio_features, clip, sync_model, phoneme_encoder,
               inventory, window=5, k_offsets=3, fixed_len=32, dtype=None,
               use_fusion=True):
    """Sync distance and confidence from the frozen sync discriminator.

    lse_d: mean Euclidean distance between the fused audio+phoneme embedding
    and the video embedding over sliding windows (both L2-normalized).
    lse_c: mean margin between the matched-offset similarity and the best
    similarity among temporal offsets within +-k_offsets.
    """
    dtype = dtype or torch.get_default_dtype()
    n = frames.shape[0]
    if n < window:
        raise ArgumentError("clip shorter than the sync window")
    sync_model.eval()
    phoneme_encoder.eval()
    dists, margins = [], []
    with torch.no_grad():
        starts = list(range(0, n - window + 1))
        v_emb = {}
        for s in starts:
            vw = torch.as_tensor(lower_half_window(frames, s, window), dtype=dtype)[None]
            v_emb[s] = sync_model.video_encoder(vw)[0]

        for s in starts:
            aw = torch.as_tensor(audio_features[:, s:s + window], dtype=dtype)[None]
            a = sync_model.audio_encoder(aw)[0]
            if use_fusion:
                phs, durs = phoneme_window(clip, s, window)
                padded = pad_and_index(phs, durs, fixed_len, inventory)
                _, p = phoneme_encoder(
                    padded.indices[None], padded.durations.to(dtype)[None],
                    torch.as_tensor([padded.valid_len]),
                )
                ref = a + p[0]
            else:
                ref = a
            v = v_emb[s]
            ref_n = ref / torch.linalg.vector_norm(ref)
            v_n = v / torch.linalg.vector_norm(v)
            dists.append(float(torch.linalg.vector_norm(ref_n - v_n)))
            if k_offsets > 0:
                offs = [o for o in range(-k_offsets, k_offsets + 1)
                        if o != 0 and s + o in v_emb]
                matched = float(similarity(ref, v))
                if offs:
                    best = max(float(similarity(ref, v_emb[s + o])) for o in offs)
                    margins.append(matched - best)
                else:
                    margins.append(0.0)
            else:
                margins.append(0.0)
    return float(np.mean(dists)), float(np.mean(margins))


@dataclass
class MetricReport:
    per: float
    ssim: float  # reported as a percentage
    fid: float
    lse_d: float
    lse_c: float
    metadata: dict = field(default_factory=dict)

    def to_dict(self):
        return dict(per=self.per, ssim=self.ssim, fid=self.fid,
                    lse_d=self.lse_d, lse_c=self.lse_c, metadata=self.metadata)
