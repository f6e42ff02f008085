"""Clip datasets and a synthetic speech-like signal generator."""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .audio import SAMPLE_RATE, AudioClip, load_wav


def list_wavs(directory: str | Path) -> list[Path]:
    return sorted(p for p in Path(directory).iterdir() if p.suffix.lower() == ".wav")


def load_dataset(directory: str | Path) -> list[AudioClip]:
    paths = list_wavs(directory)
    if not paths:
        raise FileNotFoundError(f"no .wav files in {directory}")
    return [load_wav(p) for p in paths]


def synthetic_speech(duration: float, seed: int = 0, sample_rate: int = SAMPLE_RATE) -> AudioClip:
    """Voiced/unvoiced syllables: a gliding harmonic source shaped by three
    moving formants, with noise bursts and a syllabic amplitude envelope."""
    rng = np.random.default_rng(seed)
    n = max(int(round(duration * sample_rate)), 1)
    t = np.arange(n) / sample_rate
    f0 = rng.uniform(100, 220) * (1 + 0.15 * np.sin(2 * np.pi * rng.uniform(1, 4) * t + rng.uniform(0, 6)))
    phase = 2 * np.pi * np.cumsum(f0) / sample_rate
    formants = [rng.uniform(lo, hi) for lo, hi in ((300, 800), (900, 2200), (2300, 3200))]
    drift = [1 + 0.2 * np.sin(2 * np.pi * rng.uniform(0.5, 3) * t + rng.uniform(0, 6)) for _ in formants]
    voiced = np.zeros(n)
    for h in range(1, 40):
        fh = h * f0
        gain = sum(np.exp(-0.5 * ((fh - f * d) / 120.0) ** 2) for f, d in zip(formants, drift))
        gain = gain * (fh < sample_rate / 2) / h ** 0.5
        voiced += gain * np.sin(h * phase)
    noise = rng.standard_normal(n)
    rate = rng.uniform(3, 6)
    env = np.clip(np.sin(np.pi * rate * t + rng.uniform(0, 3)), 0, None) ** 1.5
    mix = np.where(np.sin(np.pi * rate * t / 2 + rng.uniform(0, 6)) > -0.6, 1.0, 0.0)
    x = env * (mix * voiced / (np.abs(voiced).max() + 1e-9) + 0.08 * (1 - mix) * noise)
    x = x / (np.abs(x).max() + 1e-9) * rng.uniform(0.3, 0.6)
    return AudioClip(x.astype(np.float32), sample_rate)
