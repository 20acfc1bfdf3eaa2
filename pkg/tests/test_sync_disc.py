import math

import numpy as np
import pytest
import torch
import torch.nn as nn

from lipsynth.errors import ArgumentError, ConfigError, DegenerateEmbeddingError
from lipsynth.phoneme_encoder import PhonemeEncoder, PhonemeEncoderConfig
from lipsynth.sync_disc import (
    SIM_EPS,
    SyncBatch,
    SyncDiscriminator,
    fused_sync_loss,
    lower_half_window,
    phoneme_window,
    sample_pairs,
    similarity,
    sync_loss,
)

LN2 = math.log(2.0)


class StubSync(nn.Module):
    """Sync model returning fixed embeddings, for closed-form loss checks."""

    def __init__(self, a, v):
        super().__init__()
        self.a, self.v = a, v

    def embed(self, batch):
        return self.a, self.v


class StubPhoneme(nn.Module):
    def __init__(self, p):
        super().__init__()
        self.p = p

    def forward(self, indices, durations, valid_lens):
        return None, self.p


def dummy_batch(n=1, dtype=torch.float64):
    return SyncBatch(
        audio_windows=torch.zeros((n, 16, 5), dtype=dtype),
        video_windows=torch.zeros((n, 15, 24, 48), dtype=dtype),
        phoneme_indices=torch.ones((n, 8), dtype=torch.long),
        phoneme_durations=torch.ones((n, 8), dtype=dtype),
        phoneme_valid_lens=torch.ones(n, dtype=torch.long),
        labels=torch.ones(n, dtype=dtype),
    )


def test_similarity_extremes():
    m = torch.tensor([1.0, 2.0, 3.0], dtype=torch.float64)
    assert abs(float(similarity(m, m)) - (1.0 - SIM_EPS)) < 1e-12
    assert abs(float(similarity(m, -m)) - SIM_EPS) < 1e-12
    a = torch.tensor([1.0, 0.0], dtype=torch.float64)
    b = torch.tensor([0.0, 1.0], dtype=torch.float64)
    assert abs(float(similarity(a, b)) - 0.5) < 1e-12


def test_similarity_symmetry_and_scale():
    rng = np.random.default_rng(0)
    for _ in range(20):
        m = torch.as_tensor(rng.standard_normal(8))
        n = torch.as_tensor(rng.standard_normal(8))
        assert float(similarity(m, n)) == float(similarity(n, m))
        c = float(rng.random()) * 10 + 0.1
        assert abs(float(similarity(c * m, n)) - float(similarity(m, n))) < 1e-9


def test_similarity_zero_norm_error():
    with pytest.raises(DegenerateEmbeddingError):
        similarity(torch.zeros(4), torch.ones(4))


def test_sync_loss_perfect_match():
    a = torch.tensor([[1.0, 0.0]], dtype=torch.float64)
    loss = sync_loss(dummy_batch(1), StubSync(a, a.clone()))
    assert 0.0 <= float(loss) < 2e-7


def test_sync_loss_ln2():
    a = torch.tensor([[1.0, 0.0]], dtype=torch.float64)
    v = torch.tensor([[0.0, 1.0]], dtype=torch.float64)
    loss = sync_loss(dummy_batch(1), StubSync(a, v))
    assert abs(float(loss) - LN2) < 1e-6


def test_sync_loss_mean_contract():
    a = torch.tensor([[1.0, 0.0], [1.0, 1.0]], dtype=torch.float64)
    v = torch.tensor([[0.0, 1.0], [1.0, 0.0]], dtype=torch.float64)
    batch = dummy_batch(2)
    l_both = float(sync_loss(batch, StubSync(a, v)))
    l1 = float(sync_loss(dummy_batch(1), StubSync(a[:1], v[:1])))
    l2 = float(sync_loss(dummy_batch(1), StubSync(a[1:], v[1:])))
    assert abs(l_both - (l1 + l2) / 2.0) < 1e-12


def test_sync_loss_empty_batch():
    with pytest.raises(ArgumentError):
        sync_loss(dummy_batch(0), StubSync(torch.zeros((0, 2)), torch.zeros((0, 2))))


def test_fused_reduces_to_plain_with_zero_p():
    rng = np.random.default_rng(1)
    a = torch.as_tensor(rng.standard_normal((4, 8)))
    v = torch.as_tensor(rng.standard_normal((4, 8)))
    batch = dummy_batch(4)
    batch.labels = torch.as_tensor(rng.integers(0, 2, 4), dtype=torch.float64)
    plain = float(sync_loss(batch, StubSync(a, v)))
    fused = float(fused_sync_loss(batch, StubSync(a, v), StubPhoneme(torch.zeros((4, 8), dtype=torch.float64))))
    assert abs(plain - fused) < 1e-9


def test_fused_ln2():
    a = torch.tensor([[1.0, 0.0]], dtype=torch.float64)
    p = torch.tensor([[-1.0, 1.0]], dtype=torch.float64)  # a+p = (0,1)
    v = torch.tensor([[1.0, 0.0]], dtype=torch.float64)
    loss = fused_sync_loss(dummy_batch(1), StubSync(a, v), StubPhoneme(p))
    assert abs(float(loss) - LN2) < 1e-6


def test_fused_dim_mismatch():
    a = torch.ones((1, 4), dtype=torch.float64)
    with pytest.raises(ConfigError):
        fused_sync_loss(dummy_batch(1), StubSync(a, a),
                        StubPhoneme(torch.ones((1, 6), dtype=torch.float64)))


def test_fused_gradient_reaches_phoneme_encoder(float64, small_clips, inventory):
    torch.manual_seed(0)
    sync = SyncDiscriminator(window=5, embed_dim=16)
    phenc = PhonemeEncoder(PhonemeEncoderConfig(
        fixed_len=32, feature_dim=4, layers=1, heads=1, pooled_dim=16,
        table_size=inventory.table_size,
    ))
    batch = sample_pairs(small_clips, 0.5, 5, 0, 4, inventory)
    loss = fused_sync_loss(batch, sync, phenc)
    loss.backward()
    grads = [p.grad.abs().sum() for p in phenc.parameters() if p.grad is not None]
    assert float(sum(grads)) > 0


def test_lower_half_window_shape(small_clips):
    crop = lower_half_window(small_clips[0].frames, 0, 5)
    assert crop.shape == (15, 24, 48)
    # first three channels are frame 0's RGB planes of the lower half
    assert np.array_equal(crop[0], small_clips[0].frames[0, 24:, :, 0])


def test_phoneme_window_clipping(small_clips, inventory):
    clip = small_clips[0]
    phs, durs = phoneme_window(clip, 2, 5)
    assert sum(durs) == 5
    assert all(d > 0 for d in durs)
    # full-clip window returns the alignment itself
    phs_all, durs_all = phoneme_window(clip, 0, clip.n_frames)
    assert phs_all == clip.phonemes
    assert durs_all == clip.durations


def test_sample_pairs_determinism(small_clips, inventory):
    b1 = sample_pairs(small_clips, 0.5, 5, 42, 8, inventory)
    b2 = sample_pairs(small_clips, 0.5, 5, 42, 8, inventory)
    assert torch.equal(b1.audio_windows, b2.audio_windows)
    assert torch.equal(b1.video_windows, b2.video_windows)
    assert torch.equal(b1.labels, b2.labels)


def test_sample_pairs_label_fraction(small_clips, inventory):
    labels = []
    for seed in range(10):
        b = sample_pairs(small_clips, 0.5, 5, seed, 1000, inventory)
        labels.append(b.labels.numpy())
    frac = float(np.concatenate(labels).mean())
    assert 0.48 <= frac <= 0.52


def test_sample_pairs_p_match_bounds(small_clips, inventory):
    with pytest.raises(ArgumentError):
        sample_pairs(small_clips, 1.0, 5, 0, 4, inventory)
    with pytest.raises(ArgumentError):
        sample_pairs(small_clips, 0.0, 5, 0, 4, inventory)


def test_sample_pairs_skips_short_clips(small_clips, inventory):
    # a window longer than every clip leaves nothing usable
    with pytest.raises(ArgumentError):
        sample_pairs(small_clips, 0.5, 10_000, 0, 4, inventory)
    longest = max(c.n_frames for c in small_clips)
    with pytest.warns(UserWarning):
        sample_pairs(small_clips, 0.5, longest, 0, 4, inventory)


def test_sync_loss_trains_on_real_batch(small_clips, inventory):
    torch.manual_seed(0)
    sync = SyncDiscriminator(window=5, embed_dim=32)
    batch = sample_pairs(small_clips, 0.5, 5, 3, 8, inventory, dtype=torch.float32)
    loss = sync_loss(batch, sync)
    assert np.isfinite(float(loss))
    loss.backward()
