"""Full-clip synthesis and held-out evaluation producing MetricReports."""

from __future__ import annotations

import numpy as np
import torch

from .corpus import default_inventory
from .errors import ArgumentError
from .flow import hs_flow, to_luma
from .metrics import (
    MetricReport,
    frechet_distance,
    lse_scores,
    phoneme_error_rate,
    probe_read_sequence,
    ssim,
)
from .phoneme_encoder import pad_and_index
from .sync_disc import lower_half_window


def synthesize_clip(clip, generator, phenc, inventory=None, window=5,
                    fixed_len=32, dtype=None):
    """Regenerate every frame of a clip from masked inputs and audio.

    The identity reference for frame i is the frame half a clip away,
    deterministically; the audio window is centred on i and clamped at the
    clip edges. Returns (N, H, W, 3) float array in [0, 1].
    """
    dtype = dtype or torch.get_default_dtype()
    inventory = inventory or default_inventory()
    n = clip.n_frames
    if n < 1:
        raise ArgumentError("empty clip")
    padded = pad_and_index(clip.phonemes, clip.durations, fixed_len, inventory)
    with torch.no_grad():
        _, pooled = phenc(
            padded.indices[None], padded.durations.to(dtype)[None],
            torch.as_tensor([padded.valid_len]),
        )
        stacks, audios = [], []
        for i in range(n):
            identity_idx = (i + n // 2) % n
            if identity_idx == i and n > 1:
                identity_idx = (i + 1) % n
            target = clip.frames[i].astype(np.float64)
            masked = np.array(target, copy=True)
            masked[target.shape[0] // 2:] = 0.0
            stacks.append(np.concatenate([masked, clip.frames[identity_idx]], axis=-1))
            start = min(max(i - window // 2, 0), max(n - window, 0))
            audios.append(clip.audio_features[:, start:start + min(window, n)])
        stacked = torch.as_tensor(
            np.transpose(np.stack(stacks), (0, 3, 1, 2)), dtype=dtype
        )
        audio = torch.as_tensor(np.stack(audios), dtype=dtype)
        pooled_rep = pooled.expand(n, -1)
        out = []
        for i in range(0, n, 32):
            out.append(generator(stacked[i:i + 32], audio[i:i + 32], pooled_rep[i:i + 32]))
        frames = torch.cat(out).numpy()
    return np.clip(np.transpose(frames, (0, 2, 3, 1)), 0.0, 1.0)


def sync_video_features(frames, sync_model, window=5, dtype=None):
    """Video-encoder features over sliding windows; (n_windows, E)."""
    dtype = dtype or torch.get_default_dtype()
    n = frames.shape[0]
    feats = []
    with torch.no_grad():
        for s in range(0, n - window + 1):
            vw = torch.as_tensor(lower_half_window(frames, s, window), dtype=dtype)[None]
            feats.append(sync_model.video_encoder(vw)[0].numpy())
    return np.stack(feats) if feats else np.zeros((0, sync_model.embed_dim))


def heldout_flow_error(pred_frames, real_frames, alpha=1.0, iterations=50):
    """Mean absolute flow difference between a synthesized and real clip."""
    if pred_frames.shape[0] < 2:
        raise ArgumentError("need at least two frames")
    pg = to_luma(torch.as_tensor(pred_frames, dtype=torch.float64))
    rg = to_luma(torch.as_tensor(real_frames, dtype=torch.float64))
    with torch.no_grad():
        pu, pv = hs_flow(pg[1:], pg[:-1], alpha, iterations)
        ru, rv = hs_flow(rg[1:], rg[:-1], alpha, iterations)
    return float((0.5 * (torch.abs(pu - ru) + torch.abs(pv - rv))).mean())


def evaluate_clips(clips, generator, sync_model, phenc, probe, inventory=None,
                   window=5, fixed_len=32, metadata=None, use_fusion=True,
                   flow_alpha=1.0, flow_iterations=50):
    """Evaluate a generator over held-out clips; returns (MetricReport, extras).

    extras carries per-clip values (flow error, reconstruction error) used by
    ablation comparisons but not part of the report schema.
    """
    inventory = inventory or default_inventory()
    ssims, pers, lse_ds, lse_cs = [], [], [], []
    flow_errs, rec_errs = [], []
    feats_real, feats_fake = [], []
    for clip in clips:
        if clip.n_frames < window:
            continue
        pred = synthesize_clip(clip, generator, phenc, inventory, window, fixed_len)
        real = clip.frames.astype(np.float64)
        ssims.extend(ssim(pred[i], real[i]) for i in range(clip.n_frames))
        rec_errs.append(float(np.abs(pred - real).mean()))
        if clip.n_frames >= 2:
            flow_errs.append(heldout_flow_error(pred, real, flow_alpha, flow_iterations))
        predicted_seq = probe_read_sequence(probe, pred, inventory)
        pers.append(phoneme_error_rate(predicted_seq, clip.phonemes))
        d, c = lse_scores(pred, clip.audio_features, clip, sync_model, phenc,
                          inventory, window=window, fixed_len=fixed_len,
                          use_fusion=use_fusion)
        lse_ds.append(d)
        lse_cs.append(c)
        feats_real.append(sync_video_features(real, sync_model, window))
        feats_fake.append(sync_video_features(pred, sync_model, window))
    if not pers:
        raise ArgumentError("no clip long enough to evaluate")
    fid = frechet_distance(np.concatenate(feats_real), np.concatenate(feats_fake))
    report = MetricReport(
        per=float(np.mean(pers)),
        ssim=100.0 * float(np.mean(ssims)),
        fid=fid,
        lse_d=float(np.mean(lse_ds)),
        lse_c=float(np.mean(lse_cs)),
        metadata=metadata or {},
    )
    extras = {"flow_errors": flow_errs, "rec_errors": rec_errs}
    return report, extras
