"""Stage-1 (sync discriminator) and stage-2 (lip synthesis) training loops,
total-loss assembly, checkpointing and NDJSON loss logging.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np
import torch

from . import checkpoint as ckpt
from .config import RunConfig
from .corpus import default_inventory, read_corpus
from .diffusion_gan import (
    DiffusionState,
    NoiseSchedule,
    VisualDiscriminator,
    adapt_chain_length,
    gan_losses,
)
from .errors import CheckpointError, LipSynthError
from .flow import hs_flow, to_luma
from .generator import LipGenerator, reconstruction_loss
from .phoneme_encoder import PhonemeEncoder, PhonemeEncoderConfig, pad_and_index
from .sync_disc import (
    SyncDiscriminator,
    fused_sync_loss,
    phoneme_window,
    sample_pairs,
    similarity,
    sync_loss,
)


def derive_seed(base, *tags):
    """Stable per-(run, purpose, step) seed so resumed runs replay exactly."""
    h = hashlib.sha256(repr((int(base),) + tags).encode()).digest()
    return int.from_bytes(h[:8], "little") & 0x7FFFFFFFFFFFFFFF


def set_determinism(config):
    if config.deterministic:
        torch.use_deterministic_algorithms(True)
    torch.manual_seed(derive_seed(config.seed, "global"))


class LossLogger:
    """Newline-delimited JSON records {step, loss_name, value}."""

    def __init__(self, path, append=False):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._fh = open(self.path, "a" if append else "w")

    def write(self, step, loss_name, value):
        self._fh.write(json.dumps(
            {"step": int(step), "loss_name": loss_name, "value": float(value)}
        ) + "\n")
        self._fh.flush()

    def close(self):
        self._fh.close()


def read_loss_log(path):
    records = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                records.append(json.loads(line))
    return records


def split_corpus(clips, holdout_fraction):
    n_hold = max(1, int(round(len(clips) * holdout_fraction)))
    if n_hold >= len(clips):
        raise LipSynthError("corpus too small for the requested holdout fraction")
    return clips[:-n_hold], clips[-n_hold:]


def _abort_dump(out_dir, stage, step, values):
    dump = Path(out_dir) / f"{stage}_abort_step{step}.json"
    dump.write_text(json.dumps({"step": step, "losses": values}, indent=1))
    raise LipSynthError(f"non-finite loss at step {step}; diagnostics in {dump}")


def build_phoneme_encoder(config, inventory):
    pc = config.phoneme
    return PhonemeEncoder(PhonemeEncoderConfig(
        fixed_len=pc.fixed_len, feature_dim=pc.feature_dim, layers=pc.layers,
        heads=pc.heads, pooled_dim=pc.pooled_dim, table_size=inventory.table_size,
    ))


def state_hash(module):
    """Order-stable hash of all parameters and buffers, for frozen checks."""
    h = hashlib.sha256()
    for name, tensor in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(np.ascontiguousarray(tensor.detach().numpy()).tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# Stage 1
# ---------------------------------------------------------------------------

def train_stage1(config: RunConfig, resume=None):
    """Train the (optionally phoneme-fused) sync discriminator.

    Returns the path of the final checkpoint, whose metadata marks the
    discriminator as frozen for stage 2.
    """
    config.validate()
    set_determinism(config)
    out_dir = Path(config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    inventory = default_inventory()
    clips = read_corpus(config.corpus.path)
    train_clips, _ = split_corpus(clips, config.corpus.holdout_fraction)

    torch.manual_seed(derive_seed(config.seed, "stage1-init"))
    phenc = build_phoneme_encoder(config, inventory)
    sync = SyncDiscriminator(window=config.sync.window, embed_dim=config.sync.embed_dim)
    params = list(sync.parameters()) + list(phenc.parameters())
    opt = torch.optim.Adam(params, lr=config.sync.lr, betas=config.sync.betas)

    start_step = 0
    if resume is not None:
        entries, meta = ckpt.load_checkpoint(
            resume, expected_entries=["sync_disc", "phoneme_encoder", "optimizer", "step"]
        )
        sync.load_state_dict(entries["sync_disc"])
        phenc.load_state_dict(entries["phoneme_encoder"])
        opt.load_state_dict(entries["optimizer"])
        start_step = entries["step"]

    log = LossLogger(out_dir / "stage1_loss.ndjson", append=resume is not None)
    final_path = out_dir / "sync.ckpt"

    def save(path, step, frozen=False):
        ckpt.save_checkpoint(
            {
                "sync_disc": sync.state_dict(),
                "phoneme_encoder": phenc.state_dict(),
                "optimizer": opt.state_dict(),
                "step": step,
            },
            path,
            metadata={"stage": 1, "frozen": frozen, "config": config.to_dict()},
        )

    if start_step == 0:
        save(out_dir / "sync_step0.ckpt", 0)

    sync.train()
    phenc.train()
    for step in range(start_step, config.sync.steps):
        batch = sample_pairs(
            train_clips, config.sync.p_match, config.sync.window,
            derive_seed(config.seed, "s1-batch", step), config.sync.batch_size,
            inventory, fixed_len=config.phoneme.fixed_len,
        )
        if config.ablation.use_phoneme_fusion:
            loss = fused_sync_loss(batch, sync, phenc)
        else:
            loss = sync_loss(batch, sync)
        if not torch.isfinite(loss):
            _abort_dump(out_dir, "stage1", step, {"sync_loss": float(loss)})
        opt.zero_grad()
        loss.backward()
        opt.step()
        if step % config.sync.log_every == 0:
            log.write(step, "sync_loss", loss.detach().item())
        if (step + 1) % config.sync.checkpoint_every == 0:
            save(out_dir / f"sync_step{step + 1}.ckpt", step + 1)
    log.close()
    save(final_path, config.sync.steps, frozen=True)
    return final_path


def load_sync_checkpoint(path, config, inventory=None):
    """Rebuild frozen sync discriminator and phoneme encoder from a stage-1
    checkpoint; both are set to eval mode with gradients disabled."""
    inventory = inventory or default_inventory()
    if not Path(path).exists():
        raise CheckpointError(f"stage-1 checkpoint not found: {path}")
    entries, meta = ckpt.load_checkpoint(
        path, expected_entries=["sync_disc", "phoneme_encoder"]
    )
    phenc = build_phoneme_encoder(config, inventory)
    sync = SyncDiscriminator(window=config.sync.window, embed_dim=config.sync.embed_dim)
    phenc.load_state_dict(entries["phoneme_encoder"])
    sync.load_state_dict(entries["sync_disc"])
    for module in (phenc, sync):
        module.eval()
        for p in module.parameters():
            p.requires_grad_(False)
    return sync, phenc, meta


def sync_similarity_stats(sync, phenc, clips, config, seed=0, n_batches=20,
                          use_fusion=True):
    """Mean mapped similarity on matched vs mismatched held-out pairs."""
    inventory = default_inventory()
    sync.eval()
    phenc.eval()
    matched, mismatched = [], []
    with torch.no_grad():
        for b in range(n_batches):
            batch = sample_pairs(
                clips, 0.5, config.sync.window, derive_seed(seed, "gap", b),
                max(config.sync.batch_size, 32), inventory,
                fixed_len=config.phoneme.fixed_len,
            )
            a, v = sync.embed(batch)
            if use_fusion:
                _, p = phenc(batch.phoneme_indices, batch.phoneme_durations,
                             batch.phoneme_valid_lens)
                a = a + p
            s = similarity(a, v)
            matched.extend(s[batch.labels > 0.5].tolist())
            mismatched.extend(s[batch.labels < 0.5].tolist())
    return float(np.mean(matched)), float(np.mean(mismatched))


# ---------------------------------------------------------------------------
# Stage 2
# ---------------------------------------------------------------------------

def sample_gen_batch(clips, batch_size, window, rng_seed, inventory, fixed_len,
                     dtype=None):
    """Batch of (masked+identity stacks, audio window, clip phonemes, targets)
    for window-length frame runs."""
    dtype = dtype or torch.get_default_dtype()
    rng = np.random.default_rng(int(rng_seed))
    usable = [c for c in clips if c.n_frames >= window]
    stacked, audio, targets = [], [], []
    ph_idx, ph_dur, ph_len = [], [], []
    win_ph_idx, win_ph_dur, win_ph_len = [], [], []
    for _ in range(batch_size):
        clip = usable[int(rng.integers(0, len(usable)))]
        start = int(rng.integers(0, clip.n_frames - window + 1))
        outside = [i for i in range(clip.n_frames) if not start <= i < start + window]
        pool = outside if outside else list(range(clip.n_frames))
        identity_idx = int(pool[rng.integers(0, len(pool))])
        identity = clip.frames[identity_idx]
        item_stack, item_target = [], []
        for f in range(start, start + window):
            target = clip.frames[f]
            masked = np.array(target, copy=True)
            masked[target.shape[0] // 2:] = 0.0
            item_stack.append(np.concatenate([masked, identity], axis=-1))
            item_target.append(target)
        stacked.append(np.transpose(np.stack(item_stack), (0, 3, 1, 2)))
        targets.append(np.transpose(np.stack(item_target), (0, 3, 1, 2)))
        audio.append(clip.audio_features[:, start:start + window])
        padded = pad_and_index(clip.phonemes, clip.durations, fixed_len, inventory)
        ph_idx.append(padded.indices)
        ph_dur.append(padded.durations.to(dtype))
        ph_len.append(padded.valid_len)
        wp, wd = phoneme_window(clip, start, window)
        wpad = pad_and_index(wp, wd, fixed_len, inventory)
        win_ph_idx.append(wpad.indices)
        win_ph_dur.append(wpad.durations.to(dtype))
        win_ph_len.append(wpad.valid_len)
    return {
        "stacked": torch.as_tensor(np.stack(stacked), dtype=dtype),
        "audio": torch.as_tensor(np.stack(audio), dtype=dtype),
        "targets": torch.as_tensor(np.stack(targets), dtype=dtype),
        "clip_ph": (torch.stack(ph_idx), torch.stack(ph_dur),
                    torch.as_tensor(ph_len, dtype=torch.long)),
        "window_ph": (torch.stack(win_ph_idx), torch.stack(win_ph_dur),
                      torch.as_tensor(win_ph_len, dtype=torch.long)),
    }


def generate_batch(generator, phenc, batch):
    """Run the generator on a sampled batch; returns (B, W, 3, H, Wpx)."""
    b, w = batch["stacked"].shape[:2]
    idx, dur, vlen = batch["clip_ph"]
    _, pooled = phenc(idx, dur, vlen)
    stacked = batch["stacked"].reshape(b * w, *batch["stacked"].shape[2:])
    audio = batch["audio"].repeat_interleave(w, dim=0)
    pooled_rep = pooled.repeat_interleave(w, dim=0)
    fake = generator(stacked, audio, pooled_rep)
    return fake.reshape(b, w, *fake.shape[1:])


def flow_consistency_batch(fake, real, alpha, iterations):
    """Mean flow-consistency loss over a batch of window sequences."""
    b, w = fake.shape[:2]
    fg = to_luma(fake.reshape(b * w, *fake.shape[2:])).reshape(b, w, *fake.shape[-2:])
    rg = to_luma(real.reshape(b * w, *real.shape[2:])).reshape(b, w, *real.shape[-2:])
    pu, pv = hs_flow(fg[:, 1:].reshape(-1, *fg.shape[-2:]),
                     fg[:, :-1].reshape(-1, *fg.shape[-2:]), alpha, iterations)
    with torch.no_grad():
        ru, rv = hs_flow(rg[:, 1:].reshape(-1, *rg.shape[-2:]),
                         rg[:, :-1].reshape(-1, *rg.shape[-2:]), alpha, iterations)
    return (0.5 * (torch.abs(pu - ru) + torch.abs(pv - rv))).mean()


def generated_sync_loss(fake, batch, sync, phenc, use_fusion=True):
    """BCE(y=1) of the frozen sync expert on generated windows."""
    b, w = fake.shape[:2]
    h = fake.shape[-2]
    video = fake[..., h // 2:, :].reshape(b, w * 3, h // 2, fake.shape[-1])
    a = sync.audio_encoder(batch["audio"])
    v = sync.video_encoder(video)
    if use_fusion:
        idx, dur, vlen = batch["window_ph"]
        _, p = phenc(idx, dur, vlen)
        a = a + p
    s = similarity(a, v)
    return (-torch.log(s)).mean()


def train_stage2(config: RunConfig, sync_checkpoint, resume=None):
    """Adversarial stage-2 training of the lip synthesis network."""
    config.validate()
    set_determinism(config)
    out_dir = Path(config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    inventory = default_inventory()
    clips = read_corpus(config.corpus.path)
    train_clips, _ = split_corpus(clips, config.corpus.holdout_fraction)

    sync, phenc, _ = load_sync_checkpoint(sync_checkpoint, config, inventory)

    torch.manual_seed(derive_seed(config.seed, "stage2-init"))
    generator = LipGenerator(
        resolution=config.corpus.resolution, window=config.sync.window,
        embed_dim=config.phoneme.pooled_dim, base_channels=config.gen.base_channels,
    )
    disc = VisualDiscriminator(width=config.gan.disc_width)
    opt_g = torch.optim.Adam(generator.parameters(), lr=config.gen.lr, betas=config.gen.betas)
    opt_d = torch.optim.Adam(disc.parameters(), lr=config.gen.lr, betas=config.gen.betas)
    schedule = NoiseSchedule.linear(
        config.diffusion.t_max_cap, config.diffusion.beta_start, config.diffusion.beta_end
    )
    state = DiffusionState(
        t_max_cap=config.diffusion.t_max_cap, target=config.diffusion.target,
        update_interval=config.diffusion.update_interval,
    )

    start_step = 0
    if resume is not None:
        entries, meta = ckpt.load_checkpoint(resume, expected_entries=[
            "generator", "visual_disc", "opt_g", "opt_d", "diffusion_state", "step",
        ])
        generator.load_state_dict(entries["generator"])
        disc.load_state_dict(entries["visual_disc"])
        opt_g.load_state_dict(entries["opt_g"])
        opt_d.load_state_dict(entries["opt_d"])
        state = DiffusionState.from_dict(entries["diffusion_state"])
        start_step = entries["step"]

    log = LossLogger(out_dir / "stage2_loss.ndjson", append=resume is not None)
    final_path = out_dir / "gen.ckpt"
    w = config.weights
    window = config.sync.window
    use_fusion = config.ablation.use_phoneme_fusion

    def save(path, step):
        ckpt.save_checkpoint(
            {
                "generator": generator.state_dict(),
                "visual_disc": disc.state_dict(),
                "opt_g": opt_g.state_dict(),
                "opt_d": opt_d.state_dict(),
                "diffusion_state": state.to_dict(),
                "step": step,
                "sync_checkpoint": str(sync_checkpoint),
            },
            path,
            metadata={"stage": 2, "config": config.to_dict()},
        )

    if start_step == 0:
        save(out_dir / "gen_step0.ckpt", 0)

    for step in range(start_step, config.gen.steps):
        batch = sample_gen_batch(
            train_clips, config.gen.batch_size, window,
            derive_seed(config.seed, "s2-batch", step), inventory,
            config.phoneme.fixed_len,
        )
        fake = generate_batch(generator, phenc, batch)
        real = batch["targets"]
        b = real.shape[0]
        flat_real = real.reshape(-1, *real.shape[2:])
        flat_fake = fake.reshape(-1, *fake.shape[2:])

        # discriminator update
        _, loss_disc, d_real = gan_losses(
            flat_real, flat_fake.detach(), state, schedule, disc,
            derive_seed(config.seed, "s2-diff-d", step),
            generator_loss=config.gan.generator_loss, diffuse=config.ablation.use_diff,
        )
        opt_d.zero_grad()
        loss_disc.backward()
        opt_d.step()
        if config.ablation.use_diff:
            state = adapt_chain_length(state, d_real)

        # generator update
        loss_gen, _, _ = gan_losses(
            flat_real, flat_fake, state, schedule, disc,
            derive_seed(config.seed, "s2-diff-g", step),
            generator_loss=config.gan.generator_loss, diffuse=config.ablation.use_diff,
        )
        loss_rec = reconstruction_loss(flat_fake, flat_real)
        if config.ablation.use_cons:
            loss_cons = flow_consistency_batch(
                fake, real, config.flow.alpha, config.flow.iterations
            )
        else:
            loss_cons = torch.zeros((), dtype=fake.dtype)
        loss_sync = generated_sync_loss(fake, batch, sync, phenc, use_fusion)
        total = (w.lambda_sync * loss_sync + w.lambda_rec * loss_rec
                 + w.lambda_gen * loss_gen + w.lambda_cons * loss_cons)

        values = {
            "sync_loss": loss_sync.detach().item(), "rec_loss": loss_rec.detach().item(),
            "gen_loss": loss_gen.detach().item(), "cons_loss": loss_cons.detach().item(),
            "disc_loss": loss_disc.detach().item(), "total_loss": total.detach().item(),
        }
        if not all(np.isfinite(v) for v in values.values()):
            _abort_dump(out_dir, "stage2", step, values)

        opt_g.zero_grad()
        total.backward()
        opt_g.step()

        if step % config.gen.log_every == 0:
            for name, value in values.items():
                log.write(step, name, value)
            log.write(step, "t_max", state.t_max)
            log.write(step, "r_d", state.r_d)
        if (step + 1) % config.gen.checkpoint_every == 0:
            save(out_dir / f"gen_step{step + 1}.ckpt", step + 1)
    log.close()
    save(final_path, config.gen.steps)
    return final_path


def load_gen_checkpoint(path, config):
    if not Path(path).exists():
        raise CheckpointError(f"stage-2 checkpoint not found: {path}")
    entries, meta = ckpt.load_checkpoint(path, expected_entries=["generator"])
    generator = LipGenerator(
        resolution=config.corpus.resolution, window=config.sync.window,
        embed_dim=config.phoneme.pooled_dim, base_channels=config.gen.base_channels,
    )
    generator.load_state_dict(entries["generator"])
    generator.eval()
    for p in generator.parameters():
        p.requires_grad_(False)
    return generator, entries, meta
