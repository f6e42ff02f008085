"""Audio I/O, the codec STFT and the multi-resolution spectra used by the
distortion loss."""
from __future__ import annotations

import functools
import math
import wave
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

SAMPLE_RATE = 16000
EPS_LOG = 1e-5
LOSS_SCALES = tuple(range(5, 12))


class AudioFormatError(ValueError):
    pass


@dataclass
class AudioClip:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float32)
        if self.samples.ndim != 1:
            raise AudioFormatError(f"mono audio expected, got shape {self.samples.shape}")
        if not np.isfinite(self.samples).all():
            raise AudioFormatError("audio contains NaN or Inf")

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate

    def tensor(self, dtype=torch.float32) -> torch.Tensor:
        return torch.from_numpy(self.samples).to(dtype)


def load_wav(path: str | Path) -> AudioClip:
    with wave.open(str(path), "rb") as w:
        if w.getnchannels() != 1:
            raise AudioFormatError(f"{path}: unsupported channel count {w.getnchannels()} (mono only)")
        if w.getsampwidth() != 2:
            raise AudioFormatError(f"{path}: unsupported sample width {8 * w.getsampwidth()} bits (PCM16 only)")
        if w.getframerate() != SAMPLE_RATE:
            raise AudioFormatError(f"{path}: unsupported sample rate {w.getframerate()} Hz "
                                   f"(expected {SAMPLE_RATE})")
        pcm = np.frombuffer(w.readframes(w.getnframes()), dtype="<i2")
    return AudioClip(pcm.astype(np.float32) / 32768.0)


def to_pcm16(samples: np.ndarray) -> np.ndarray:
    x = np.clip(np.asarray(samples, dtype=np.float64), -1.0, 1.0)
    return np.clip(np.round(x * 32768.0), -32768, 32767).astype("<i2")


def save_wav(path: str | Path, clip: AudioClip) -> None:
    if clip.sample_rate != SAMPLE_RATE:
        raise AudioFormatError(f"unsupported sample rate {clip.sample_rate}")
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(clip.sample_rate)
        w.writeframes(to_pcm16(clip.samples).tobytes())


# ---------------------------------------------------------------- codec STFT


@dataclass(frozen=True)
class StftConfig:
    """Analysis/synthesis setup. Defaults give 10 ms frames at 16 kHz."""

    n_fft: int = 512
    hop: int = 160
    window: str = "hann"
    center: bool = True

    def __post_init__(self):
        if self.window != "hann":
            raise ValueError(f"unsupported window {self.window!r}")
        if not 0 < self.hop <= self.n_fft:
            raise ValueError(f"hop {self.hop} must be in (0, n_fft={self.n_fft}]")
        env = overlap_envelope(self.n_fft, self.hop)
        # iSTFT divides by the squared-window overlap sum; it must stay away from zero
        if env.min() < 1e-3 * env.max():
            raise ValueError(f"window/hop pair (n_fft={self.n_fft}, hop={self.hop}) does not satisfy "
                             f"the overlap-add condition (min envelope {env.min():.3g})")

    @property
    def bins(self) -> int:
        return self.n_fft // 2 + 1

    def frames(self, n_samples: int) -> int:
        if self.center:
            return 1 + n_samples // self.hop
        return 1 + max(n_samples - self.n_fft, 0) // self.hop


def hann(n: int, dtype=torch.float64) -> torch.Tensor:
    return torch.hann_window(n, periodic=True, dtype=dtype)


def overlap_envelope(n_fft: int, hop: int) -> np.ndarray:
    """Steady-state sum of shifted squared windows over one hop."""
    w2 = hann(n_fft).numpy() ** 2
    env = np.zeros(hop)
    for start in range(0, n_fft, hop):
        seg = w2[start:start + hop]
        env[:len(seg)] += seg
    return env


def stft(x: torch.Tensor, cfg: StftConfig = StftConfig()) -> torch.Tensor:
    """Complex STFT of ``(..., L)`` samples as a real ``(..., 2, F, T)`` tensor."""
    if x.shape[-1] < cfg.n_fft // 2 + 1 and cfg.center:
        # reflection padding needs at least n_fft/2 + 1 samples
        x = torch.nn.functional.pad(x, (0, cfg.n_fft // 2 + 1 - x.shape[-1]))
    lead = x.shape[:-1]
    spec = torch.stft(x.reshape(-1, x.shape[-1]), cfg.n_fft, cfg.hop, window=hann(cfg.n_fft, x.dtype),
                      center=cfg.center, pad_mode="reflect", return_complex=True)
    out = torch.stack([spec.real, spec.imag], dim=1)
    return out.reshape(*lead, 2, cfg.bins, out.shape[-1])


def istft(spec: torch.Tensor, length: int, cfg: StftConfig = StftConfig()) -> torch.Tensor:
    """Inverse of :func:`stft`; ``length`` is the original sample count."""
    lead = spec.shape[:-3]
    flat = spec.reshape(-1, 2, cfg.bins, spec.shape[-1])
    cplx = torch.complex(flat[:, 0], flat[:, 1])
    padded_len = max(length, cfg.n_fft // 2 + 1)
    wav = torch.istft(cplx, cfg.n_fft, cfg.hop, window=hann(cfg.n_fft, flat.dtype), center=cfg.center,
                      length=padded_len)
    return wav[..., :length].reshape(*lead, length)


def to_sequence(spec: torch.Tensor) -> torch.Tensor:
    """``(..., 2, F, T)`` -> ``(..., 2F, T)``: real bins first, then imaginary."""
    return spec.reshape(*spec.shape[:-3], 2 * spec.shape[-2], spec.shape[-1])


def from_sequence(seq: torch.Tensor) -> torch.Tensor:
    return seq.reshape(*seq.shape[:-2], 2, seq.shape[-2] // 2, seq.shape[-1])


# -------------------------------------------------------- loss spectrograms


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


@functools.lru_cache(maxsize=None)
def mel_filterbank(n_fft: int, n_mels: int, sample_rate: int = SAMPLE_RATE, fmin: float = 0.0,
                   fmax: float | None = None) -> np.ndarray:
    """Triangular HTK-mel filters, ``n_mels x (n_fft//2 + 1)``.

    Every filter is at least as wide as one FFT bin on each side, so coarse
    FFTs (n_fft = 32) still give every row a positive sum.
    """
    fmax = sample_rate / 2 if fmax is None else fmax
    bins = n_fft // 2 + 1
    freqs = np.arange(bins) * sample_rate / n_fft
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    df = sample_rate / n_fft
    fb = np.zeros((n_mels, bins))
    for m in range(n_mels):
        lo, mid, hi = edges[m], edges[m + 1], edges[m + 2]
        # outer feet pushed half a bin past fmin/fmax so the end bins are covered
        if m == 0:
            lo -= df / 2
        if m == n_mels - 1:
            hi += df / 2
        left = max(mid - lo, df)
        right = max(hi - mid, df)
        up = (freqs - (mid - left)) / left
        down = ((mid + right) - freqs) / right
        fb[m] = np.clip(np.minimum(up, down), 0.0, None)
    return fb


def n_mels_for(i: int) -> int:
    return min(64, 2 ** (i - 1))


def _check_scale(i: int) -> None:
    if i not in LOSS_SCALES:
        raise ValueError(f"scale index {i} outside {LOSS_SCALES[0]}..{LOSS_SCALES[-1]}")


def power_spec(x: torch.Tensor, i: int) -> tuple[torch.Tensor, bool]:
    """|STFT|^2 with a 2**i Hann window and hop 2**i/4, no centering.

    Returns ``(power, padded)``; clips shorter than one window are zero padded
    to a single frame and ``padded`` is True.
    """
    _check_scale(i)
    win = 2 ** i
    padded = x.shape[-1] < win
    if padded:
        x = torch.nn.functional.pad(x, (0, win - x.shape[-1]))
    lead = x.shape[:-1]
    spec = torch.stft(x.reshape(-1, x.shape[-1]), win, win // 4, window=hann(win, x.dtype), center=False,
                      return_complex=True)
    p = spec.real ** 2 + spec.imag ** 2
    return p.reshape(*lead, *p.shape[-2:]), padded


def log_power_spec(x: torch.Tensor, i: int) -> torch.Tensor:
    """Log-compressed power spectrum at scale ``i`` (``F x T``)."""
    p, _ = power_spec(x, i)
    return torch.log(p + EPS_LOG)


def mel_spec(x: torch.Tensor, i: int) -> torch.Tensor:
    """Log-compressed mel spectrum at scale ``i`` (``n_mels x T``)."""
    p, _ = power_spec(x, i)
    fb = torch.from_numpy(mel_filterbank(2 ** i, n_mels_for(i))).to(p.dtype)
    return torch.log(torch.matmul(fb, p) + EPS_LOG)
