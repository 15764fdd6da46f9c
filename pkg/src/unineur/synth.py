"""Synthetic paired image / EEG dataset with a known decodability ceiling.

Each class k has a palette triplet, a stripe frequency and orientation, and
a texture noise level (the only per-sample image variation, besides an
optional stripe phase jitter); its EEG trials carry a sinusoid at frequency f_k on every
channel (random phase per channel) in Gaussian noise at a fixed SNR.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import eeg
from .ppm import read_ppm, write_ppm

PALETTES = [   # (background, stripe, accent)
    ((0.85, 0.15, 0.10), (0.98, 0.85, 0.20), (0.30, 0.05, 0.05)),
    ((0.10, 0.20, 0.75), (0.30, 0.90, 0.95), (0.95, 0.95, 1.00)),
    ((0.10, 0.55, 0.20), (0.92, 0.95, 0.90), (0.05, 0.20, 0.05)),
    ((0.45, 0.10, 0.55), (0.98, 0.55, 0.15), (1.00, 0.90, 0.60)),
    ((0.20, 0.20, 0.20), (0.75, 0.75, 0.75), (0.95, 0.10, 0.10)),
    ((0.95, 0.60, 0.70), (0.30, 0.10, 0.15), (0.60, 0.90, 1.00)),
    ((0.55, 0.35, 0.15), (0.85, 0.95, 0.40), (0.10, 0.10, 0.40)),
    ((0.05, 0.45, 0.50), (0.95, 0.40, 0.40), (1.00, 1.00, 0.80)),
]
ACCENT_WEIGHT = 0.35
CLASS_FREQS = [6.0, 10.0, 18.0, 30.0, 14.0, 24.0, 36.0, 8.0]


@dataclass
class SynthSpec:
    classes: int = 4
    image_size: int = 16
    palettes: list = field(default_factory=list)
    stripe_freqs: list = field(default_factory=list)      # cycles per image
    stripe_angles: list = field(default_factory=list)     # radians
    texture_noise: list = field(default_factory=list)
    phase_jitter: float = 0.0                            # radians, uniform +-
    eeg_channels: int = 8
    sample_rate_hz: float = 256.0
    eeg_freqs: list = field(default_factory=list)
    snr: float = 0.25                                    # signal power / noise power
    train_per_class: int = 200
    test_per_class: int = 50
    presentation_s: float = 1.0
    interval_s: float = 1.5
    window_s: float = 0.5
    offset_s: float = 0.25

    def __post_init__(self):
        K = self.classes
        if not 1 <= K <= len(PALETTES):
            raise ValueError(f"classes must be in [1, {len(PALETTES)}]")
        if not self.palettes:
            self.palettes = [list(map(list, p)) for p in PALETTES[:K]]
        if not self.stripe_freqs:
            self.stripe_freqs = [1.0 + k for k in range(K)]
        if not self.stripe_angles:
            self.stripe_angles = [k * math.pi / K for k in range(K)]
        if not self.texture_noise:
            self.texture_noise = [0.02 + 0.01 * k for k in range(K)]
        if not self.eeg_freqs:
            self.eeg_freqs = CLASS_FREQS[:K]
        fr = self.eeg_freqs
        if len(set(fr)) != len(fr):
            raise ValueError("class EEG frequencies must be distinct")
        if any(not 4.0 <= f <= 40.0 or f >= self.sample_rate_hz / 2 for f in fr):
            raise ValueError("class EEG frequencies must lie in 4-40 Hz and below Nyquist")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SynthSpec":
        return cls(**d)


def render_image(spec: SynthSpec, k: int, rng: np.random.Generator) -> np.ndarray:
    n = spec.image_size
    yy, xx = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    th = spec.stripe_angles[k]
    phase = rng.uniform(-spec.phase_jitter, spec.phase_jitter) if spec.phase_jitter else 0.0
    s = 0.5 + 0.5 * np.sin(2 * math.pi * spec.stripe_freqs[k] * (xx * math.cos(th) + yy * math.sin(th)) / n
                           + phase)
    bg, fg, accent = (np.asarray(c) for c in spec.palettes[k])
    img = bg[None, None, :] * (1 - s[..., None]) + fg[None, None, :] * s[..., None]
    r = np.hypot(yy - (n - 1) / 2, xx - (n - 1) / 2) / (n / 2)
    a = ACCENT_WEIGHT * np.clip(1.0 - r, 0.0, 1.0)[..., None]
    img = img * (1 - a) + accent[None, None, :] * a
    img = img + spec.texture_noise[k] * rng.standard_normal(img.shape)
    return np.clip(img, 0.0, 1.0)


def synth_recording(spec: SynthSpec, labels: np.ndarray, rng: np.random.Generator,
                    subject: str = "synth") -> eeg.RawRecording:
    """Continuous recording with one stimulus event per label."""
    fs = spec.sample_rate_hz
    C = spec.eeg_channels
    gap = int(round(spec.interval_s * fs))
    pres = int(round(spec.presentation_s * fs))
    lead = gap
    n = lead + gap * len(labels) + gap
    noise_sd = 0.0 if math.isinf(spec.snr) else math.sqrt(0.5 / spec.snr)
    data = noise_sd * rng.standard_normal((C, n)) if noise_sd else np.zeros((C, n))
    events = []
    t = np.arange(pres) / fs
    for i, k in enumerate(labels):
        onset = lead + i * gap
        ph = rng.uniform(0, 2 * math.pi, (C, 1))
        data[:, onset:onset + pres] += np.sin(2 * math.pi * spec.eeg_freqs[k] * t[None, :] + ph)
        events.append((onset, str(int(k))))
    return eeg.RawRecording(fs, data, [f"ch{c}" for c in range(C)], events, subject)


def gen_synthetic(spec: SynthSpec, out_dir, seed: int = 0) -> Path:
    """Write images (PPM), raw recordings, preprocessed epochs (UNT1) and manifest.json."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for split, per in (("train", spec.train_per_class), ("test", spec.test_per_class)):
        rng = np.random.default_rng([seed, 0 if split == "train" else 1])
        labels = np.repeat(np.arange(spec.classes), per)
        labels = labels[rng.permutation(len(labels))]
        (out / split / "images").mkdir(parents=True, exist_ok=True)
        for i, k in enumerate(labels):
            write_ppm(out / split / "images" / f"{i:05d}.ppm", render_image(spec, int(k), rng))
        rec = synth_recording(spec, labels, rng, subject=f"synth-{split}")
        eeg.write_recording(rec, out / split / "recording.json")
        epochs = eeg.preprocess(rec, band=(1.0, 80.0), notch_band=(48.0, 52.0),
                                window_s=spec.window_s, center_offset_s=spec.offset_s)
        if epochs.skipped:
            raise RuntimeError(f"{epochs.skipped} synthetic trials fell outside the recording")
        eeg.write_epochs(list(epochs), out / split / "epochs")
        for i, k in enumerate(labels):
            rows.append({"split": split, "index": i, "label": int(k), "prompt": f"style {int(k)}",
                         "image": f"{split}/images/{i:05d}.ppm",
                         "epoch": f"{split}/epochs/epoch_{i:05d}.unt"})
    (out / "spec.json").write_text(json.dumps(spec.to_dict(), indent=1, sort_keys=True))
    (out / "manifest.json").write_text(json.dumps({"seed": seed, "rows": rows}, indent=1))
    return out


@dataclass
class Dataset:
    root: Path
    spec: SynthSpec
    rows: list[dict]
    images: np.ndarray             # N x H x W x 3 in [0, 1]
    epochs: np.ndarray             # N x C x W
    labels: np.ndarray

    def split(self, name: str) -> "Dataset":
        idx = [i for i, r in enumerate(self.rows) if r["split"] == name]
        return Dataset(self.root, self.spec, [self.rows[i] for i in idx], self.images[idx],
                       self.epochs[idx], self.labels[idx])

    @property
    def prompts(self) -> list[str]:
        return [r["prompt"] for r in self.rows]


def load_dataset(root) -> Dataset:
    from . import tensorio
    root = Path(root)
    spec = SynthSpec.from_dict(json.loads((root / "spec.json").read_text()))
    rows = json.loads((root / "manifest.json").read_text())["rows"]
    images = np.stack([read_ppm(root / r["image"]) for r in rows])
    loaded = [tensorio.load(root / r["epoch"]) if r.get("epoch") else None for r in rows]
    # rows without an epoch keep a NaN placeholder; EEG modes refuse them downstream
    shape = next((e.shape for e in loaded if e is not None),
                 (spec.eeg_channels, int(round(spec.window_s * spec.sample_rate_hz))))
    epochs = np.stack([np.full(shape, np.nan) if e is None else e for e in loaded])
    labels = np.array([r["label"] for r in rows])
    return Dataset(root, spec, rows, images, epochs, labels)


def to_latent(images: np.ndarray) -> np.ndarray:
    """Pixel [0, 1] -> latent [-1, 1]; the identity autoencoder up to this affine map."""
    return 2.0 * images - 1.0


def from_latent(z: np.ndarray) -> np.ndarray:
    return np.clip((z + 1.0) / 2.0, 0.0, 1.0)
