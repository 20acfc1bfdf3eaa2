
import numpy as np
import pytest
import torch
import torch.nn as nn

from lipsynth.errors import ArgumentError
from lipsynth.metrics import (
    collapse_sequence,
    edit_distance,
    frame_labels,
    frechet_distance,
    lse_scores,
    phoneme_error_rate,
    probe_accuracy,
    probe_read_sequence,
    ssim,
    train_lip_probe,
)


def oracle_edit_distance(a, b):
    """Independent full-table DP oracle."""
    la, lb = len(a), len(b)
    table = np.zeros((la + 1, lb + 1), dtype=int)
    table[:, 0] = np.arange(la + 1)
    table[0, :] = np.arange(lb + 1)
    for i in range(1, la + 1):
        for j in range(1, lb + 1):
            table[i, j] = min(
                table[i - 1, j - 1] + (a[i - 1] != b[j - 1]),
                table[i - 1, j] + 1,
                table[i, j - 1] + 1,
            )
    return int(table[la, lb])


def test_per_examples():
    assert phoneme_error_rate(list("abcd"), list("abcd")) == 0.0
    assert phoneme_error_rate(list("axcd"), list("abcd")) == 0.25
    assert phoneme_error_rate([], ["a"]) == 1.0
    with pytest.raises(ArgumentError):
        phoneme_error_rate(["a"], [])


def test_edit_distance_matches_oracle_sampled():
    rng = np.random.default_rng(0)
    for _ in range(200):
        a = [int(x) for x in rng.integers(0, 4, rng.integers(0, 8))]
        b = [int(x) for x in rng.integers(0, 4, rng.integers(0, 8))]
        assert edit_distance(a, b) == oracle_edit_distance(a, b)


def test_edit_distance_triangle_inequality():
    rng = np.random.default_rng(1)
    pool = [[int(x) for x in rng.integers(0, 3, rng.integers(1, 8))]
            for _ in range(50)]
    d = np.array([[edit_distance(a, b) for b in pool] for a in pool])
    # d[i,k] <= d[i,j] + d[j,k] for all triples
    via = d[:, :, None] + d[None, :, :]  # via[i,j,k] = d[i,j] + d[j,k]
    assert np.all(d[:, None, :] <= via)


def test_collapse():
    assert collapse_sequence(["p1", "p1", "p2", "p2", "p2"]) == ["p1", "p2"]
    assert collapse_sequence([]) == []
    assert collapse_sequence(["a", "b", "a"]) == ["a", "b", "a"]


def test_frame_labels(small_clips, inventory):
    clip = small_clips[0]
    labels = frame_labels(clip, inventory)
    assert len(labels) == clip.n_frames
    assert labels[0] == inventory.index(clip.phonemes[0]) - 1
    collapsed = collapse_sequence([inventory.symbols[i] for i in labels])
    assert collapsed == clip.phonemes


def test_probe_above_chance_after_training(small_clips, inventory):
    probe, acc = train_lip_probe(small_clips, inventory, steps=150, seed=0)
    chance = 1.0 / len(inventory.symbols)
    assert acc > chance
    # on its own training frames it must also beat chance
    train = small_clips[:-2]
    x = np.concatenate([c.frames for c in train])
    y = np.concatenate([frame_labels(c, inventory) for c in train])
    assert probe_accuracy(probe, x, y) > chance


def test_untrained_probe_near_chance(small_clips, inventory):
    _, acc = train_lip_probe(small_clips, inventory, steps=0, seed=0)
    chance = 1.0 / len(inventory.symbols)
    n = sum(c.n_frames for c in small_clips[-2:])
    sigma = np.sqrt(chance * (1 - chance) / n)
    assert abs(acc - chance) <= 4 * sigma + 0.05


def test_probe_read_sequence(small_clips, inventory):
    probe, _ = train_lip_probe(small_clips, inventory, steps=30, seed=0)
    seq = probe_read_sequence(probe, small_clips[0].frames, inventory)
    assert all(s in inventory.symbols for s in seq)


def test_ssim_identity():
    rng = np.random.default_rng(0)
    img = rng.random((48, 48, 3))
    assert abs(ssim(img, img) - 1.0) < 1e-9


def test_ssim_constant_images():
    a = np.zeros((48, 48))
    b = np.ones((48, 48))
    assert ssim(a, b) < 0.01


def test_ssim_symmetry_and_bounds():
    rng = np.random.default_rng(1)
    for _ in range(5):
        a = rng.random((24, 24))
        b = rng.random((24, 24))
        assert ssim(a, b) == ssim(b, a)
        assert -1.0 <= ssim(a, b) <= 1.0


def test_ssim_errors():
    with pytest.raises(ArgumentError):
        ssim(np.zeros((16, 16)), np.zeros((16, 17)))
    with pytest.raises(ArgumentError):
        ssim(np.zeros((4, 4)), np.zeros((4, 4)))


def test_frechet_identity_and_symmetry():
    rng = np.random.default_rng(2)
    fa = rng.standard_normal((200, 8))
    fb = rng.standard_normal((200, 8)) + 1.0
    assert frechet_distance(fa, fa.copy()) < 1e-6
    d_ab = frechet_distance(fa, fb)
    d_ba = frechet_distance(fb, fa)
    assert d_ab >= 0.0
    assert abs(d_ab - d_ba) < 1e-6


def test_frechet_gaussian_oracle():
    rng = np.random.default_rng(3)
    fa = rng.standard_normal((10_000, 1))
    fb = rng.standard_normal((10_000, 1)) + 3.0
    d = frechet_distance(fa, fb)
    assert abs(d - 9.0) / 9.0 < 0.02


def test_frechet_too_few_samples():
    with pytest.raises(ArgumentError):
        frechet_distance(np.zeros((1, 4)), np.zeros((10, 4)))


class IdenticalEmbedSync(nn.Module):
    """Audio and video encoders that emit the same fixed embedding."""

    def __init__(self, dim=8):
        super().__init__()
        e = torch.ones((1, dim), dtype=torch.float64)
        self.audio_encoder = lambda x: e.expand(x.shape[0], -1)
        self.video_encoder = lambda x: e.expand(x.shape[0], -1)


class ZeroPhoneme(nn.Module):
    def forward(self, indices, durations, valid_lens):
        return None, torch.zeros((indices.shape[0], 8), dtype=torch.float64)


def test_lse_identical_embeddings(small_clips, inventory):
    clip = small_clips[0]
    sync = IdenticalEmbedSync()
    lse_d, _ = lse_scores(clip.frames, clip.audio_features, clip, sync,
                          ZeroPhoneme(), inventory, window=5)
    assert lse_d < 1e-9


def test_lse_zero_offsets(small_clips, inventory):
    clip = small_clips[0]
    sync = IdenticalEmbedSync()
    _, lse_c = lse_scores(clip.frames, clip.audio_features, clip, sync,
                          ZeroPhoneme(), inventory, window=5, k_offsets=0)
    assert lse_c == 0.0


def test_lse_short_clip_error(small_clips, inventory):
    clip = small_clips[0]
    with pytest.raises(ArgumentError):
        lse_scores(clip.frames[:3], clip.audio_features[:, :3], clip,
                   IdenticalEmbedSync(), ZeroPhoneme(), inventory, window=5)
