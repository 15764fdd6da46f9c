"""EEG preprocessing: zero-phase filtering, epoching, band power, attention index."""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from scipy import signal

from . import tensorio
from .tensor import ContractError

FILTER_ORDER = 4
WELCH_SEGMENT = 256
ATTENTION_EPS = 1e-12
ZSCORE_FLOOR = 1e-8


@dataclass
class RawRecording:
    sample_rate_hz: float
    channels: np.ndarray                       # C x T, channel-major
    channel_labels: list[str] = field(default_factory=list)
    events: list[tuple[int, str]] = field(default_factory=list)
    subject: str = ""

    def __post_init__(self):
        self.channels = np.atleast_2d(np.asarray(self.channels, dtype=np.float64))
        if self.sample_rate_hz <= 0:
            raise ValueError("sample_rate_hz must be positive")
        if not self.channel_labels:
            self.channel_labels = [f"ch{i}" for i in range(self.channels.shape[0])]
        n = self.channels.shape[1]
        for s, _ in self.events:
            if not 0 <= s < n:
                raise ValueError(f"event at sample {s} outside recording of length {n}")


@dataclass
class EegEpoch:
    data: np.ndarray                           # C x W
    sample_rate_hz: float
    label: str | int = ""
    subject: str = ""

    @property
    def n_channels(self) -> int:
        return self.data.shape[0]


@dataclass
class EpochSet:
    """Result of epoch extraction; ``skipped`` counts out-of-bounds events."""
    epochs: list[EegEpoch]
    skipped: int = 0

    def __len__(self) -> int:
        return len(self.epochs)

    def __iter__(self) -> Iterator[EegEpoch]:
        return iter(self.epochs)

    def __getitem__(self, i):
        return self.epochs[i]


def _check_band(fs: float, low: float, high: float) -> None:
    if not 0 < low < high < fs / 2:
        raise ValueError(f"invalid band [{low}, {high}] Hz for sample rate {fs} Hz")


def _zero_phase(rec: RawRecording, low: float, high: float, btype: str) -> RawRecording:
    _check_band(rec.sample_rate_hz, low, high)
    sos = signal.butter(FILTER_ORDER, [low, high], btype=btype, fs=rec.sample_rate_hz, output="sos")
    out = signal.sosfiltfilt(sos, rec.channels, axis=-1)
    return replace(rec, channels=out)


def bandpass(rec: RawRecording, low_hz: float = 1.0, high_hz: float = 80.0) -> RawRecording:
    """Forward-backward 4th-order Butterworth band-pass on every channel."""
    return _zero_phase(rec, low_hz, high_hz, "bandpass")


def notch(rec: RawRecording, low_hz: float = 48.0, high_hz: float = 52.0) -> RawRecording:
    """Forward-backward 4th-order Butterworth band-stop (power-line removal)."""
    return _zero_phase(rec, low_hz, high_hz, "bandstop")


def extract_epochs(rec: RawRecording, window_s: float = 0.5, center_offset_s: float = 0.25,
                   latency_s: float = 0.0) -> EpochSet:
    """Cut one window per event starting ``center_offset_s`` after onset.

    ``latency_s`` is a constant stimulus-timing correction added to every onset.
    Windows that fall outside the recording are skipped and counted.
    """
    fs = rec.sample_rate_hz
    w = int(round(window_s * fs))
    shift = int(round((center_offset_s + latency_s) * fs))
    n = rec.channels.shape[1]
    out, skipped = [], 0
    for onset, label in rec.events:
        start = onset + shift
        if start < 0 or start + w > n:
            skipped += 1
            continue
        out.append(EegEpoch(rec.channels[:, start:start + w].copy(), fs, label, rec.subject))
    return EpochSet(out, skipped)


def preprocess(rec: RawRecording, band=(1.0, 80.0), notch_band=(48.0, 52.0),
               window_s: float = 0.5, center_offset_s: float = 0.25,
               latency_s: float = 0.0) -> EpochSet:
    """Filter the continuous recording, then epoch and z-score."""
    fs = rec.sample_rate_hz
    if band[1] < fs / 2:
        rec = bandpass(rec, *band)
    if notch_band[1] < fs / 2:
        rec = notch(rec, *notch_band)
    eps = extract_epochs(rec, window_s, center_offset_s, latency_s)
    return EpochSet([zscore(e) for e in eps], eps.skipped)


def welch_psd(epoch: EegEpoch) -> tuple[np.ndarray, np.ndarray]:
    w = epoch.data.shape[1]
    if w < 8:
        raise ContractError(f"epoch of {w} samples is too short for a spectral estimate")
    nper = min(w, WELCH_SEGMENT)
    # zero-padding only refines the integration grid
    nfft = max(nper, 1 << int(np.ceil(np.log2(4 * epoch.sample_rate_hz))))
    return signal.welch(epoch.data, fs=epoch.sample_rate_hz, window="hann", nperseg=nper,
                        noverlap=nper // 2, nfft=nfft, axis=-1)


def band_power(epoch: EegEpoch, low_hz: float, high_hz: float) -> float:
    """Channel-mean integral of the Welch PSD over [low_hz, high_hz]."""
    if not 0 <= low_hz < high_hz <= epoch.sample_rate_hz / 2:
        raise ValueError(f"band [{low_hz}, {high_hz}] outside Nyquist")
    f, pxx = welch_psd(epoch)
    inner = (f > low_hz) & (f < high_hz)
    grid = np.concatenate([[low_hz], f[inner], [high_hz]])
    dens = np.stack([np.interp(grid, f, row) for row in pxx])
    return float(np.trapezoid(dens, grid, axis=-1).mean())


def attention_index(epoch: EegEpoch) -> float:
    """Alpha (8-12 Hz) over theta (4-8 Hz) power."""
    return band_power(epoch, 8.0, 12.0) / (band_power(epoch, 4.0, 8.0) + ATTENTION_EPS)


def zscore(epoch: EegEpoch) -> EegEpoch:
    x = epoch.data
    mu = x.mean(axis=1, keepdims=True)
    sd = np.maximum(x.std(axis=1, keepdims=True), ZSCORE_FLOOR)
    return replace(epoch, data=(x - mu) / sd)


# ---------------------------------------------------------------- file formats

def read_recording(manifest_path) -> RawRecording:
    """Load a JSON manifest plus its raw little-endian float32 channel-major data file."""
    manifest_path = Path(manifest_path)
    meta = json.loads(manifest_path.read_text())
    labels = list(meta["channel_labels"])
    raw = np.fromfile(manifest_path.parent / meta["data_file"], dtype="<f4")
    if raw.size % len(labels):
        raise ValueError(f"data file holds {raw.size} values, not divisible by {len(labels)} channels")
    chans = raw.reshape(len(labels), -1).astype(np.float64)
    events = [(int(e["sample"]), str(e["label"])) for e in meta.get("events", [])]
    return RawRecording(float(meta["sample_rate_hz"]), chans, labels, events,
                        str(meta.get("subject", "")))


def write_recording(rec: RawRecording, manifest_path, data_file: str | None = None) -> None:
    manifest_path = Path(manifest_path)
    data_file = data_file or manifest_path.stem + ".f32"
    rec.channels.astype("<f4").tofile(manifest_path.parent / data_file)
    meta = {"sample_rate_hz": rec.sample_rate_hz, "channel_labels": rec.channel_labels,
            "events": [{"sample": s, "label": l} for s, l in rec.events],
            "data_file": data_file, "subject": rec.subject}
    manifest_path.write_text(json.dumps(meta, indent=1))


def write_epochs(epochs: Sequence[EegEpoch], out_dir, prefix: str = "epoch") -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for i, ep in enumerate(epochs):
        name = f"{prefix}_{i:05d}.unt"
        tensorio.save(out_dir / name, ep.data)
        rows.append({"file": name, "label": ep.label, "subject": ep.subject,
                     "sample_rate_hz": ep.sample_rate_hz})
    index = out_dir / "index.json"
    index.write_text(json.dumps({"epochs": rows}, indent=1))
    return index


def read_epochs(index_path) -> list[EegEpoch]:
    index_path = Path(index_path)
    if index_path.is_dir():
        index_path = index_path / "index.json"
    meta = json.loads(index_path.read_text())
    return [EegEpoch(tensorio.load(index_path.parent / r["file"]),
                     float(r.get("sample_rate_hz", 0.0)), r["label"], r.get("subject", ""))
            for r in meta["epochs"]]
