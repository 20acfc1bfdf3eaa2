"""Run configuration: a documented key schema validated before training."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

from .errors import ConfigError

# Schema: top-level sections and their keys with (type, validator) pairs.
# Any unknown section or key is rejected so typos fail before step 0.


@dataclass
class CorpusConfig:
    path: str = ""
    resolution: int = 48
    holdout_fraction: float = 0.2


@dataclass
class PhonemeConfig:
    fixed_len: int = 32
    feature_dim: int = 64
    layers: int = 2
    heads: int = 3
    pooled_dim: int = 512


@dataclass
class SyncConfig:
    window: int = 5
    embed_dim: int = 512
    p_match: float = 0.5
    steps: int = 2000
    batch_size: int = 16
    lr: float = 1e-4
    betas: tuple = (0.5, 0.999)
    log_every: int = 1
    checkpoint_every: int = 500


@dataclass
class GenConfig:
    steps: int = 5000
    batch_size: int = 16
    lr: float = 1e-4
    betas: tuple = (0.5, 0.999)
    base_channels: int = 24
    log_every: int = 1
    checkpoint_every: int = 1000


@dataclass
class LossWeights:
    lambda_sync: float = 0.03
    lambda_rec: float = 1.0
    lambda_gen: float = 0.07
    lambda_cons: float = 0.1

    def validate(self):
        vals = [self.lambda_sync, self.lambda_rec, self.lambda_gen, self.lambda_cons]
        if any(v < 0 or v != v for v in vals):
            raise ConfigError("loss weights must be finite and non-negative")
        if all(v == 0 for v in vals):
            raise ConfigError("at least one loss weight must be positive")


@dataclass
class FlowConfig:
    alpha: float = 1.0
    iterations: int = 20


@dataclass
class DiffusionConfig:
    t_max_cap: int = 32
    beta_start: float = 1e-4
    beta_end: float = 0.02
    target: float = 0.6
    update_interval: int = 4


@dataclass
class GanConfig:
    generator_loss: str = "nonsaturating"  # or "as_printed"
    disc_width: int = 32


@dataclass
class AblationFlags:
    use_cons: bool = True
    use_diff: bool = True
    use_phoneme_fusion: bool = True


@dataclass
class RunConfig:
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    phoneme: PhonemeConfig = field(default_factory=PhonemeConfig)
    sync: SyncConfig = field(default_factory=SyncConfig)
    gen: GenConfig = field(default_factory=GenConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    flow: FlowConfig = field(default_factory=FlowConfig)
    diffusion: DiffusionConfig = field(default_factory=DiffusionConfig)
    gan: GanConfig = field(default_factory=GanConfig)
    ablation: AblationFlags = field(default_factory=AblationFlags)
    seed: int = 0
    deterministic: bool = True
    out_dir: str = "runs/default"

    def validate(self):
        if not self.corpus.path:
            raise ConfigError("corpus.path must be set")
        if not 0.0 < self.corpus.holdout_fraction < 1.0:
            raise ConfigError("corpus.holdout_fraction must be in (0, 1)")
        if self.corpus.resolution < 32 or self.corpus.resolution % 8 != 0:
            raise ConfigError("corpus.resolution must be >= 32 and divisible by 8")
        if self.phoneme.feature_dim % 2 != 0:
            raise ConfigError("phoneme.feature_dim must be even")
        if (2 * self.phoneme.feature_dim + 1) % self.phoneme.heads != 0:
            raise ConfigError("phoneme transformer width must divide by heads")
        if not 0.0 < self.sync.p_match < 1.0:
            raise ConfigError("sync.p_match must be in (0, 1)")
        for name, c in (("sync", self.sync), ("gen", self.gen)):
            if c.steps < 0 or c.batch_size < 1 or c.lr <= 0:
                raise ConfigError(f"{name}: steps >= 0, batch_size >= 1, lr > 0 required")
        self.weights.validate()
        if self.flow.alpha <= 0 or self.flow.iterations < 1:
            raise ConfigError("flow.alpha > 0 and flow.iterations >= 1 required")
        if self.diffusion.t_max_cap < 1 or self.diffusion.update_interval < 1:
            raise ConfigError("diffusion.t_max_cap and update_interval must be >= 1")
        if not 0 < self.diffusion.beta_start <= self.diffusion.beta_end < 1:
            raise ConfigError("diffusion betas must satisfy 0 < start <= end < 1")
        if self.gan.generator_loss not in ("nonsaturating", "as_printed"):
            raise ConfigError("gan.generator_loss must be nonsaturating or as_printed")
        return self

    def to_dict(self):
        d = asdict(self)
        d["sync"]["betas"] = list(self.sync.betas)
        d["gen"]["betas"] = list(self.gen.betas)
        return d

    def with_ablation(self, name):
        """Apply a named ablation flag; returns a new config."""
        flags = {
            "cons": replace(self.ablation, use_cons=False),
            "diff": replace(self.ablation, use_diff=False),
            "phoneme": replace(self.ablation, use_phoneme_fusion=False),
        }
        if name not in flags:
            raise ConfigError(f"unknown ablation {name!r} (cons|diff|phoneme)")
        return replace(self, ablation=flags[name])


_SECTIONS = {
    "corpus": CorpusConfig,
    "phoneme": PhonemeConfig,
    "sync": SyncConfig,
    "gen": GenConfig,
    "weights": LossWeights,
    "flow": FlowConfig,
    "diffusion": DiffusionConfig,
    "gan": GanConfig,
    "ablation": AblationFlags,
}
_SCALARS = {"seed": int, "deterministic": bool, "out_dir": str}


def config_from_dict(data):
    """Build and validate a RunConfig from a plain dict, rejecting unknown keys."""
    if not isinstance(data, dict):
        raise ConfigError("config root must be a JSON object")
    kwargs = {}
    for key, value in data.items():
        if key in _SECTIONS:
            cls = _SECTIONS[key]
            valid = {f for f in cls.__dataclass_fields__}
            unknown = set(value) - valid
            if unknown:
                raise ConfigError(f"unknown keys in section {key!r}: {sorted(unknown)}")
            if key in ("sync", "gen") and "betas" in value:
                value = dict(value, betas=tuple(value["betas"]))
            kwargs[key] = cls(**value)
        elif key in _SCALARS:
            kwargs[key] = _SCALARS[key](value)
        else:
            raise ConfigError(f"unknown config key {key!r}")
    return RunConfig(**kwargs).validate()


def load_config(path):
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    return config_from_dict(data)


def save_config(config, path):
    Path(path).write_text(json.dumps(config.to_dict(), indent=1, sort_keys=True))
