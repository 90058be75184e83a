"""Log-mel front end, length normalisation and deterministic pseudo-speech.

All functions here are pure; feature matrices are ``float32`` with 96 columns.
"""

from __future__ import annotations

import hashlib
import struct
import wave
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import EmptyInput, FeatureFormatError, InputTooShort

N_MELS = 96
FRAME_LEN = 1024
FRAME_HOP = 512
LOG_FLOOR = 1e-10
MAGIC = b"SQLF1"


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int = 16000

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64).ravel()
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")


@dataclass
class SpeechFeatures:
    data: np.ndarray
    frame_hop: int = FRAME_HOP
    frame_len: int = FRAME_LEN

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 2 or self.data.shape[1] != N_MELS:
            raise FeatureFormatError(f"expected (l_a, {N_MELS}) matrix, got {self.data.shape}")

    @property
    def n_frames(self) -> int:
        return self.data.shape[0]

    def __eq__(self, other):
        return isinstance(other, SpeechFeatures) and np.array_equal(self.data, other.data)


@dataclass
class PseudoTTSConfig:
    frames_per_token: int = 4
    seed: int = 0
    amplitude_range: tuple[float, float] = field(default=(-4.0, 4.0))

    def __post_init__(self):
        if self.frames_per_token < 1:
            raise ValueError("frames_per_token must be >= 1")


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(sample_rate: int, n_fft: int = FRAME_LEN, n_mels: int = N_MELS) -> np.ndarray:
    """Triangular HTK-mel filters, shape ``(n_fft // 2 + 1, n_mels)``."""
    edges = mel_to_hz(np.linspace(0.0, hz_to_mel(sample_rate / 2.0), n_mels + 2))
    bins = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    lo, mid, hi = edges[:-2], edges[1:-1], edges[2:]
    rising = (bins[:, None] - lo) / (mid - lo)
    falling = (hi - bins[:, None]) / (hi - mid)
    return np.maximum(0.0, np.minimum(rising, falling))


def mel_center_frequencies(sample_rate: int, n_mels: int = N_MELS) -> np.ndarray:
    return mel_to_hz(np.linspace(0.0, hz_to_mel(sample_rate / 2.0), n_mels + 2))[1:-1]


def frame_signal(samples: np.ndarray, frame_len: int = FRAME_LEN, hop: int = FRAME_HOP) -> np.ndarray:
    n = (len(samples) - frame_len) // hop + 1
    idx = np.arange(frame_len)[None, :] + hop * np.arange(n)[:, None]
    return samples[idx]


def extract_logmel(w: Waveform, mean_center: bool = False) -> SpeechFeatures:
    """Hamming-windowed power spectrum -> 96 mel energies -> ``log(e + 1e-10)``."""
    if len(w.samples) < FRAME_LEN:
        raise InputTooShort(f"need at least {FRAME_LEN} samples, got {len(w.samples)}")
    frames = frame_signal(w.samples) * np.hamming(FRAME_LEN)
    power = np.abs(np.fft.rfft(frames, n=FRAME_LEN, axis=1)) ** 2
    logmel = np.log(power @ mel_filterbank(w.sample_rate) + LOG_FLOOR)
    if mean_center:
        logmel = logmel - logmel.mean(axis=0, keepdims=True)
    return SpeechFeatures(logmel)


def pad_or_resample(f: SpeechFeatures, target_len: int) -> SpeechFeatures:
    """Zero-pad short inputs, pick uniformly spaced rows from long ones."""
    if target_len < 1:
        raise ValueError("target_len must be >= 1")
    n = f.n_frames
    if n == target_len:
        return SpeechFeatures(f.data.copy(), f.frame_hop, f.frame_len)
    if n < target_len:
        out = np.zeros((target_len, N_MELS), dtype=np.float32)
        out[:n] = f.data
        return SpeechFeatures(out, f.frame_hop, f.frame_len)
    if target_len == 1:
        rows = np.array([0])
    else:
        # round half up, not numpy's banker's rounding
        rows = np.floor(np.arange(target_len) * (n - 1) / (target_len - 1) + 0.5).astype(int)
    return SpeechFeatures(f.data[rows].copy(), f.frame_hop, f.frame_len)


def _token_block(token: str, cfg: PseudoTTSConfig) -> np.ndarray:
    digest = hashlib.sha256(f"{cfg.seed}\x00{token}".encode("utf-8")).digest()
    rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
    low, high = cfg.amplitude_range
    return rng.uniform(low, high, size=(cfg.frames_per_token, N_MELS)).astype(np.float32)


def synth_pseudo_speech(tokens: Sequence[str], cfg: PseudoTTSConfig | None = None) -> SpeechFeatures:
    """Stack one fixed random block per token; no blending between tokens."""
    cfg = cfg or PseudoTTSConfig()
    if not tokens:
        raise EmptyInput("cannot synthesise speech for an empty token list")
    return SpeechFeatures(np.concatenate([_token_block(t, cfg) for t in tokens], axis=0))


def write_features(path, f: SpeechFeatures) -> None:
    rows, cols = f.data.shape
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", rows, cols))
        fh.write(np.ascontiguousarray(f.data, dtype="<f4").tobytes())


def read_features(path) -> SpeechFeatures:
    raw = Path(path).read_bytes()
    if raw[:5] != MAGIC:
        raise FeatureFormatError(f"{path}: bad magic {raw[:5]!r}")
    rows, cols = struct.unpack("<II", raw[5:13])
    if cols != N_MELS:
        raise FeatureFormatError(f"{path}: expected {N_MELS} columns, got {cols}")
    body = raw[13:]
    if len(body) != 4 * rows * cols:
        raise FeatureFormatError(f"{path}: truncated payload")
    return SpeechFeatures(np.frombuffer(body, dtype="<f4").reshape(rows, cols).copy())


def read_wav(path) -> Waveform:
    """Read 16-bit mono PCM WAV into [-1, 1] samples."""
    with wave.open(str(path), "rb") as wf:
        if wf.getsampwidth() != 2 or wf.getnchannels() != 1:
            raise FeatureFormatError(f"{path}: only 16-bit mono PCM is supported")
        sr = wf.getframerate()
        pcm = np.frombuffer(wf.readframes(wf.getnframes()), dtype="<i2")
    return Waveform(pcm.astype(np.float64) / 32768.0, sr)


def write_wav(path, w: Waveform) -> None:
    pcm = np.clip(np.round(w.samples * 32767.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(w.sample_rate)
        wf.writeframes(pcm.tobytes())
