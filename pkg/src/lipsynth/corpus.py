"""Synthetic audiovisual corpus: procedural face clips with known phoneme alignment.

Each clip is a short video of a procedurally drawn face whose mouth follows
the viseme of the active phoneme, together with per-frame audio features that
are a noisy style-dependent linear image of the same viseme parameters.
Alignment is known by construction, so no forced aligner is needed.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import (
    ArgumentError,
    ConfigError,
    IntegrityError,
    MissingManifestError,
    SchemaVersionError,
    VocabularyError,
)

SCHEMA_VERSION = 1
PAD_SYMBOL = "<pad>"
AUDIO_DIM = 16
DEFAULT_RESOLUTION = 48
DEFAULT_BLEND = 2  # frames of linear interpolation around each phoneme boundary

_MATRIX_MAGIC = b"LSMX"
_DTYPE_CODES = {0: "<f4", 1: "<f8"}
_DTYPE_TO_CODE = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}


@dataclass(frozen=True)
class Viseme:
    """Mouth-shape parameters, each in [0, 1]."""

    opening: float
    width: float
    rounding: float

    def as_array(self):
        return np.array([self.opening, self.width, self.rounding], dtype=np.float64)


# Neutral closed mouth: the PAD viseme.
NEUTRAL_VISEME = Viseme(opening=0.0, width=0.35, rounding=0.5)

# 16 hand-picked mouth shapes, roughly articulatory, pairwise distinct.
_DEFAULT_VISEMES = {
    "AA": Viseme(0.95, 0.60, 0.30),
    "AE": Viseme(0.80, 0.85, 0.15),
    "AO": Viseme(0.85, 0.40, 0.80),
    "EH": Viseme(0.55, 0.70, 0.25),
    "IY": Viseme(0.25, 0.95, 0.10),
    "UW": Viseme(0.45, 0.20, 0.95),
    "OW": Viseme(0.65, 0.30, 0.85),
    "MM": Viseme(0.02, 0.55, 0.45),
    "BB": Viseme(0.05, 0.50, 0.55),
    "FF": Viseme(0.15, 0.65, 0.20),
    "VV": Viseme(0.20, 0.60, 0.35),
    "SS": Viseme(0.18, 0.80, 0.12),
    "TH": Viseme(0.30, 0.75, 0.22),
    "LL": Viseme(0.40, 0.55, 0.40),
    "RR": Viseme(0.35, 0.45, 0.65),
    "WW": Viseme(0.30, 0.25, 0.90),
}


@dataclass(frozen=True)
class PhonemeInventory:
    """Global phoneme table with PAD reserved at index 0."""

    symbols: tuple
    viseme_map: dict

    def __post_init__(self):
        if len(set(self.symbols)) != len(self.symbols):
            raise ConfigError("phoneme symbols must be unique")
        if PAD_SYMBOL in self.symbols:
            raise ConfigError("PAD symbol is reserved and cannot appear in symbols")
        missing = [s for s in self.symbols if s not in self.viseme_map]
        if missing:
            raise ConfigError(f"symbols without viseme entry: {missing}")

    @property
    def table_size(self):
        return len(self.symbols) + 1  # PAD at index 0

    def index(self, symbol):
        if symbol == PAD_SYMBOL:
            return 0
        try:
            return self.symbols.index(symbol) + 1
        except ValueError:
            raise VocabularyError(f"unknown phoneme symbol: {symbol!r}") from None

    def viseme(self, symbol):
        if symbol == PAD_SYMBOL:
            return NEUTRAL_VISEME
        if symbol not in self.viseme_map:
            raise VocabularyError(f"unknown phoneme symbol: {symbol!r}")
        return self.viseme_map[symbol]


def default_inventory():
    return PhonemeInventory(symbols=tuple(_DEFAULT_VISEMES), viseme_map=dict(_DEFAULT_VISEMES))


@dataclass(frozen=True)
class SpeakerStyle:
    """Per-speaker appearance and audio-mapping parameters, derived from a seed."""

    seed: int
    face_color: np.ndarray = field(repr=False, default=None)
    bg_color: np.ndarray = field(repr=False, default=None)
    face_ax: float = 0.0
    face_ay: float = 0.0
    eye_y: float = 0.0
    audio_delta: np.ndarray = field(repr=False, default=None)
    audio_bias: np.ndarray = field(repr=False, default=None)

    @classmethod
    def from_seed(cls, seed: int):
        rng = np.random.default_rng(int(seed))
        face_color = 0.55 + 0.3 * rng.random(3)
        bg_color = 0.1 + 0.25 * rng.random(3)
        face_ax = 0.34 + 0.06 * rng.random()
        face_ay = 0.42 + 0.06 * rng.random()
        eye_y = 0.33 + 0.04 * rng.random()
        audio_delta = rng.standard_normal((AUDIO_DIM, 3)) * 0.2
        audio_bias = rng.standard_normal(AUDIO_DIM) * 0.1
        return cls(
            seed=int(seed),
            face_color=face_color,
            bg_color=bg_color,
            face_ax=float(face_ax),
            face_ay=float(face_ay),
            eye_y=float(eye_y),
            audio_delta=audio_delta,
            audio_bias=audio_bias,
        )

    def __eq__(self, other):
        return isinstance(other, SpeakerStyle) and self.seed == other.seed


def _global_audio_map():
    # Fixed base map shared by all speakers; styles only perturb it, so a
    # sync model trained on some styles can still read unseen ones.
    rng = np.random.default_rng(1234567)
    return rng.standard_normal((AUDIO_DIM, 3))


_AUDIO_BASE = _global_audio_map()


@dataclass
class AlignedClip:
    """One training sample: frames, per-frame audio features, phoneme alignment."""

    frames: np.ndarray  # (N, H, W, 3) float32 in [0, 1]
    audio_features: np.ndarray  # (AUDIO_DIM, N) float64
    phonemes: list
    durations: list
    style: SpeakerStyle

    def __post_init__(self):
        n = self.frames.shape[0]
        if sum(self.durations) != n:
            raise ArgumentError("sum(durations) must equal number of frames")
        if len(self.phonemes) != len(self.durations) or len(self.phonemes) < 1:
            raise ArgumentError("phonemes and durations must have equal length >= 1")
        if self.audio_features.shape[1] != n:
            raise ArgumentError("audio_features must have one column per frame")
        if self.frames.min() < 0.0 or self.frames.max() > 1.0:
            raise ArgumentError("pixel values must lie in [0, 1]")

    @property
    def n_frames(self):
        return self.frames.shape[0]

    def __eq__(self, other):
        return (
            isinstance(other, AlignedClip)
            and np.array_equal(self.frames, other.frames)
            and np.array_equal(self.audio_features, other.audio_features)
            and self.phonemes == other.phonemes
            and self.durations == other.durations
            and self.style == other.style
        )


def sample_phoneme_sequence(rng_seed, length_range, inventory, duration_range=(2, 6)):
    """Draw a random phoneme sequence with integer frame durations.

    Consecutive phonemes are always distinct so that collapsing per-frame
    labels recovers the sequence exactly. Deterministic given the seed.
    """
    lo, hi = length_range
    if not (1 <= lo <= hi):
        raise ArgumentError(f"invalid length_range {length_range}")
    if len(inventory.symbols) == 0:
        raise ConfigError("inventory has no non-PAD symbols")
    dlo, dhi = duration_range
    if not (1 <= dlo <= dhi):
        raise ArgumentError(f"invalid duration_range {duration_range}")
    rng = np.random.default_rng(int(rng_seed))
    x = int(rng.integers(lo, hi + 1))
    phonemes = []
    for _ in range(x):
        while True:
            sym = inventory.symbols[int(rng.integers(0, len(inventory.symbols)))]
            if not phonemes or sym != phonemes[-1] or len(inventory.symbols) == 1:
                break
        phonemes.append(sym)
    durations = [int(rng.integers(dlo, dhi + 1)) for _ in range(x)]
    return phonemes, durations


def _frame_viseme_params(phonemes, durations, inventory, blend=DEFAULT_BLEND):
    """Per-frame (N, 3) mouth parameters with linear blending at boundaries.

    The two frames adjacent to each boundary get 0.75/0.25 mixes of the
    neighbouring segments' parameters; each frame is blended at most once.
    """
    pure = []
    for sym, dur in zip(phonemes, durations):
        if dur <= 0:
            raise ArgumentError("durations must be positive")
        pure.extend([inventory.viseme(sym).as_array()] * dur)
    pure = np.stack(pure)
    if blend <= 0 or len(phonemes) < 2:
        return pure
    out = pure.copy()
    touched = np.zeros(len(pure), dtype=bool)
    boundary = 0
    for k in range(len(phonemes) - 1):
        boundary += durations[k]
        prev_p = inventory.viseme(phonemes[k]).as_array()
        next_p = inventory.viseme(phonemes[k + 1]).as_array()
        for j, w in ((boundary - 1, 0.25), (boundary, 0.75)):
            if 0 <= j < len(pure) and not touched[j]:
                out[j] = (1.0 - w) * prev_p + w * next_p
                touched[j] = True
    return out


def _superellipse(xx, yy, cx, cy, ax, ay, n, res):
    """Soft coverage of a superellipse; smooth in all shape parameters."""
    sx = np.abs((xx - cx) / ax)
    sy = np.abs((yy - cy) / ay)
    s = (sx**n + sy**n) ** (1.0 / n)
    edge = (1.5 / res) / min(ax, ay)
    return np.clip(0.5 + (1.0 - s) / (2.0 * edge), 0.0, 1.0)


def _mouth_geometry(params):
    opening, width, rounding = params
    ax = 0.06 + 0.14 * width
    ay = 0.015 + 0.105 * opening
    n = 1.5 + 2.5 * rounding
    return ax, ay, n


def render_frame(style, mouth_params, resolution):
    """Draw one face frame. Returns (H, W, 3) float64 in [0, 1], unquantized."""
    res = int(resolution)
    ys = (np.arange(res) + 0.5) / res
    xs = (np.arange(res) + 0.5) / res
    yy, xx = np.meshgrid(ys, xs, indexing="ij")

    img = np.empty((res, res, 3))
    for c in range(3):
        img[..., c] = style.bg_color[c] * (0.8 + 0.4 * yy)

    def paint(cov, color):
        for c in range(3):
            img[..., c] = img[..., c] * (1.0 - cov) + color[c] * cov

    face = _superellipse(xx, yy, 0.5, 0.52, style.face_ax, style.face_ay, 2.0, res)
    paint(face, style.face_color)

    eye_color = np.array([0.08, 0.08, 0.12])
    for ex in (0.36, 0.64):
        paint(_superellipse(xx, yy, ex, style.eye_y, 0.05, 0.03, 2.0, res), eye_color)

    m_ax, m_ay, m_n = _mouth_geometry(np.asarray(mouth_params, dtype=np.float64))
    mouth_color = np.array([0.45, 0.08, 0.10])
    paint(_superellipse(xx, yy, 0.5, 0.74, m_ax, m_ay, m_n, res), mouth_color)
    return np.clip(img, 0.0, 1.0)


def audio_features_for(params_per_frame, style, noise_level, rng):
    """Style-mapped viseme parameters plus Gaussian noise; (AUDIO_DIM, N)."""
    amap = _AUDIO_BASE + style.audio_delta
    feats = amap @ params_per_frame.T + style.audio_bias[:, None]
    if noise_level > 0:
        feats = feats + noise_level * rng.standard_normal(feats.shape)
    return feats


def render_clip(
    phonemes,
    durations,
    style,
    resolution=DEFAULT_RESOLUTION,
    noise_level=0.0,
    inventory=None,
    blend=DEFAULT_BLEND,
    rng_seed=0,
):
    """Render an AlignedClip from a phoneme/duration sequence and a style."""
    if resolution < 32:
        raise ArgumentError("resolution must be >= 32")
    if any(d <= 0 for d in durations):
        raise ArgumentError("durations must be positive integers")
    inventory = inventory or default_inventory()
    params = _frame_viseme_params(phonemes, durations, inventory, blend=blend)
    frames = np.stack([render_frame(style, p, resolution) for p in params])
    frames = (np.round(frames * 255.0) / 255.0).astype(np.float32)  # 8-bit grid, PNG-exact
    rng = np.random.default_rng(int(rng_seed))
    feats = audio_features_for(params, style, noise_level, rng)
    return AlignedClip(
        frames=frames,
        audio_features=feats,
        phonemes=list(phonemes),
        durations=[int(d) for d in durations],
        style=style,
    )


def estimate_mouth_params(frame, style, resolution=None):
    """Inverse renderer for tests: recover mouth parameters from a frame.

    Minimizes squared error between the frame's mouth region and re-rendered
    candidates over (opening, width, rounding). Coarse grid then L-BFGS-B.
    """
    from scipy.optimize import minimize

    res = resolution or frame.shape[0]
    r0, r1 = int(0.58 * res), int(0.92 * res)
    c0, c1 = int(0.2 * res), int(0.8 * res)
    target = np.asarray(frame, dtype=np.float64)[r0:r1, c0:c1]

    def cost(p):
        rendered = render_frame(style, np.clip(p, 0.0, 1.0), res)[r0:r1, c0:c1]
        return float(np.sum((rendered - target) ** 2))

    grid = np.linspace(0.05, 0.95, 5)
    best, best_c = None, np.inf
    for o in grid:
        for w in grid:
            for r in (0.2, 0.5, 0.8):
                c = cost((o, w, r))
                if c < best_c:
                    best, best_c = (o, w, r), c
    out = minimize(
        cost, np.array(best), method="L-BFGS-B",
        bounds=[(0.0, 1.0)] * 3,
        options={"ftol": 1e-14, "gtol": 1e-12, "eps": 1e-5},
    )
    return np.clip(out.x, 0.0, 1.0)


def generate_corpus(n_clips, seed, resolution=DEFAULT_RESOLUTION, noise_level=0.05,
                    length_range=(3, 8), duration_range=(2, 6), inventory=None):
    """Generate a list of clips; clip i depends only on (seed, i)."""
    if n_clips < 1:
        raise ArgumentError("n_clips must be >= 1")
    inventory = inventory or default_inventory()
    clips = []
    for i in range(n_clips):
        base = (int(seed) * 1_000_003 + i) & 0x7FFFFFFF
        phonemes, durations = sample_phoneme_sequence(base, length_range, inventory, duration_range)
        style = SpeakerStyle.from_seed(base ^ 0x5A5A5A)
        clips.append(
            render_clip(phonemes, durations, style, resolution=resolution,
                        noise_level=noise_level, inventory=inventory, rng_seed=base ^ 0xA0A0)
        )
    return clips


# ---------------------------------------------------------------------------
# On-disk format
# ---------------------------------------------------------------------------

def write_matrix(path, mat):
    """Little-endian binary matrix: magic, dtype code (u8), rows u32, cols u32."""
    mat = np.asarray(mat)
    dt = np.dtype("<f8") if mat.dtype == np.float64 else np.dtype("<f4")
    code = _DTYPE_TO_CODE[dt]
    with open(path, "wb") as f:
        f.write(_MATRIX_MAGIC)
        f.write(struct.pack("<BII", code, mat.shape[0], mat.shape[1]))
        f.write(np.ascontiguousarray(mat, dtype=dt).tobytes())


def read_matrix(path):
    with open(path, "rb") as f:
        head = f.read(4 + 9)
        if len(head) < 13 or head[:4] != _MATRIX_MAGIC:
            raise IntegrityError(f"bad matrix header in {path}")
        code, rows, cols = struct.unpack("<BII", head[4:])
        if code not in _DTYPE_CODES:
            raise IntegrityError(f"unknown dtype code {code} in {path}")
        dt = np.dtype(_DTYPE_CODES[code])
        data = f.read(rows * cols * dt.itemsize)
        if len(data) != rows * cols * dt.itemsize:
            raise IntegrityError(f"truncated matrix file {path}")
        return np.frombuffer(data, dtype=dt).reshape(rows, cols).copy()


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()


def _clip_checksum(clip_dir):
    files = sorted(p for p in Path(clip_dir).rglob("*") if p.is_file())
    h = hashlib.sha256()
    for p in files:
        h.update(p.relative_to(clip_dir).as_posix().encode())
        h.update(bytes.fromhex(_sha256(p)))
    return h.hexdigest()


def write_clip(clip, clip_dir):
    clip_dir = Path(clip_dir)
    (clip_dir / "frames").mkdir(parents=True, exist_ok=True)
    for i, frame in enumerate(clip.frames):
        img = Image.fromarray(np.round(frame * 255.0).astype(np.uint8))
        img.save(clip_dir / "frames" / f"frame_{i:04d}.png")
    write_matrix(clip_dir / "audio.lsm", clip.audio_features)
    meta = {
        "schema_version": SCHEMA_VERSION,
        "phonemes": clip.phonemes,
        "durations": clip.durations,
        "style_seed": clip.style.seed,
        "n_frames": clip.n_frames,
        "resolution": int(clip.frames.shape[1]),
    }
    (clip_dir / "meta.json").write_text(json.dumps(meta, indent=1))


def read_clip(clip_dir):
    clip_dir = Path(clip_dir)
    meta_path = clip_dir / "meta.json"
    if not meta_path.exists():
        raise IntegrityError(f"missing meta.json in {clip_dir}")
    meta = json.loads(meta_path.read_text())
    if meta.get("schema_version") != SCHEMA_VERSION:
        raise SchemaVersionError(f"unsupported clip schema in {clip_dir}")
    frames = []
    for i in range(meta["n_frames"]):
        p = clip_dir / "frames" / f"frame_{i:04d}.png"
        if not p.exists():
            raise IntegrityError(f"missing frame file {p}")
        frames.append(np.asarray(Image.open(p), dtype=np.float32) / 255.0)
    feats = read_matrix(clip_dir / "audio.lsm")
    return AlignedClip(
        frames=np.stack(frames),
        audio_features=feats,
        phonemes=list(meta["phonemes"]),
        durations=list(meta["durations"]),
        style=SpeakerStyle.from_seed(meta["style_seed"]),
    )


def write_corpus(clips, directory):
    """Serialize clips; returns the manifest dict."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, clip in enumerate(clips):
        name = f"clip_{i:05d}"
        write_clip(clip, directory / name)
        entries.append({"name": name, "n_frames": clip.n_frames,
                        "checksum": _clip_checksum(directory / name)})
    manifest = {"schema_version": SCHEMA_VERSION, "clip_count": len(entries), "clips": entries}
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=1))
    return manifest


def read_corpus(directory, verify=True):
    """Load all clips, validating manifest, schema version and checksums."""
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    if not manifest_path.exists():
        raise MissingManifestError(f"no manifest.json in {directory}")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("schema_version") != SCHEMA_VERSION:
        raise SchemaVersionError(
            f"corpus schema {manifest.get('schema_version')} unsupported (want {SCHEMA_VERSION})"
        )
    entries = manifest.get("clips", [])
    if manifest.get("clip_count") != len(entries):
        raise IntegrityError("manifest clip_count disagrees with clip list")
    clips = []
    for entry in entries:
        clip_dir = directory / entry["name"]
        if not clip_dir.is_dir():
            raise IntegrityError(f"clip directory {entry['name']} listed but missing on disk")
        if verify and _clip_checksum(clip_dir) != entry["checksum"]:
            raise IntegrityError(f"checksum mismatch for {entry['name']}")
        clips.append(read_clip(clip_dir))
    return clips
