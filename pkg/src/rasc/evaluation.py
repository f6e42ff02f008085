"""Rate-distortion points, curves and the Bjontegaard delta-rate."""
from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .audio import AudioClip, mel_spec
from .codec import decompress, compress
from .container import BitstreamContainer
from .model import SpeechCodec
from .training import distortion

SNR_CAP_DB = 120.0
MEL_SCALE = 10


class EvalError(RuntimeError):
    pass


def snr_db(x: np.ndarray, x_hat: np.ndarray) -> float:
    """``10 log10(|x|^2 / |x - x_hat|^2)`` on the common prefix, capped at 120 dB."""
    n = min(len(x), len(x_hat))
    x = np.asarray(x[:n], np.float64)
    err = float(np.sum((x - np.asarray(x_hat[:n], np.float64)) ** 2))
    sig = float(np.sum(x * x))
    if err == 0.0:
        return SNR_CAP_DB
    if sig == 0.0:
        return -SNR_CAP_DB
    return min(10.0 * math.log10(sig / err), SNR_CAP_DB)


def mel_distance(x: np.ndarray, x_hat: np.ndarray, scale: int = MEL_SCALE) -> float:
    """Mean absolute log-mel difference at a 2**scale window."""
    n = min(len(x), len(x_hat))
    a = torch.as_tensor(np.asarray(x[:n], np.float64))
    b = torch.as_tensor(np.asarray(x_hat[:n], np.float64))
    return float(torch.mean(torch.abs(mel_spec(a, scale) - mel_spec(b, scale))))


@dataclass
class RdPoint:
    kbps: float
    L_t: float
    L_f: float
    snr_db: float
    mel_distance: float
    clip: str = "mean"
    quality: float | None = None  # external score, if supplied

    @property
    def quality_value(self) -> float:
        return self.snr_db if self.quality is None else self.quality

    @staticmethod
    def mean(points: Sequence["RdPoint"]) -> "RdPoint":
        if not points:
            raise EvalError("no points to average")
        q = [p.quality for p in points]
        return RdPoint(
            kbps=float(np.mean([p.kbps for p in points])),
            L_t=float(np.mean([p.L_t for p in points])),
            L_f=float(np.mean([p.L_f for p in points])),
            snr_db=float(np.mean([p.snr_db for p in points])),
            mel_distance=float(np.mean([p.mel_distance for p in points])),
            quality=None if any(v is None for v in q) else float(np.mean(q)),
        )

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class RdCurve:
    label: str
    points: list = field(default_factory=list)

    def __post_init__(self):
        self.points = sorted(self.points, key=lambda p: p.kbps)
        rates = [p.kbps for p in self.points]
        if any(b <= a for a, b in zip(rates, rates[1:])):
            raise EvalError(f"curve {self.label!r}: kbps must be strictly increasing, got {rates}")

    @classmethod
    def from_arrays(cls, label: str, kbps, quality) -> "RdCurve":
        pts = [RdPoint(float(r), 0.0, 0.0, float(q), 0.0) for r, q in zip(kbps, quality)]
        return cls(label, pts)

    @property
    def rates(self) -> np.ndarray:
        return np.array([p.kbps for p in self.points])

    @property
    def qualities(self) -> np.ndarray:
        return np.array([p.quality_value for p in self.points])


def bd_rate(curve_a: RdCurve, curve_b: RdCurve) -> float:
    """Average rate difference of ``a`` relative to ``b`` at equal quality, in percent.

    Fits log-rate as a polynomial in quality (cubic, or lower with fewer
    points) for each curve and integrates over the overlapping quality range.
    Negative means ``a`` needs fewer bits.
    """
    for c in (curve_a, curve_b):
        if len(c.points) < 2:
            raise EvalError(f"curve {c.label!r} needs at least 2 points, has {len(c.points)}")
    qa, qb = curve_a.qualities, curve_b.qualities
    lo, hi = max(qa.min(), qb.min()), min(qa.max(), qb.max())
    if not hi > lo:
        raise EvalError(f"no quality overlap: {curve_a.label} [{qa.min():.3f}, {qa.max():.3f}] vs "
                        f"{curve_b.label} [{qb.min():.3f}, {qb.max():.3f}]")
    avg = []
    for c in (curve_a, curve_b):
        deg = min(3, len(c.points) - 1)
        poly = np.polyint(np.polyfit(c.qualities, np.log(c.rates), deg))
        avg.append((np.polyval(poly, hi) - np.polyval(poly, lo)) / (hi - lo))
    return float((math.exp(avg[0] - avg[1]) - 1.0) * 100.0)


def point_for(x: np.ndarray, x_hat: np.ndarray, payload_bits: int, sample_rate: int,
              clip: str = "clip") -> RdPoint:
    dur = len(x) / sample_rate
    if dur <= 0:
        raise EvalError(f"{clip}: empty clip")
    xt = torch.as_tensor(np.asarray(x, np.float64))
    yt = torch.as_tensor(np.asarray(x_hat, np.float64))
    with torch.no_grad():
        l_t, l_f = distortion(xt, yt)
    return RdPoint(payload_bits / dur / 1000.0, float(l_t), float(l_f), snr_db(x, x_hat),
                   mel_distance(x, x_hat), clip)


def evaluate_clip(name: str, clip: AudioClip, model: SpeechCodec, model_hash: bytes) -> RdPoint:
    cont = compress(clip, model, model_hash)
    blob = cont.serialize()
    out = decompress(BitstreamContainer.parse(blob, model_hash), model, model_hash)
    return point_for(clip.samples, out.samples, cont.payload_bits, clip.sample_rate, name)


@dataclass
class EvalResult:
    label: str
    points: list
    failures: dict  # clip name -> error message

    @property
    def mean(self) -> RdPoint:
        return RdPoint.mean(self.points)


def evaluate(label: str, clips: dict, model: SpeechCodec, model_hash: bytes, workers: int = 1,
             quality: dict | None = None,
             clip_fn: Callable[..., RdPoint] = evaluate_clip) -> EvalResult:
    """Round-trip every clip; failing clips are reported and excluded from the mean."""
    names = sorted(clips)

    def run(name):
        try:
            return name, clip_fn(name, clips[name], model, model_hash), None
        except Exception as exc:  # noqa: BLE001 - any failure flags the clip
            return name, None, f"{type(exc).__name__}: {exc}"

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(run, names))
    else:
        results = [run(n) for n in names]
    points, failures = [], {}
    for name, pt, err in sorted(results, key=lambda r: r[0]):
        if err is not None:
            failures[name] = err
            continue
        if quality is not None:
            pt.quality = quality.get((label, name), quality.get(("", name)))
        points.append(pt)
    return EvalResult(label, points, failures)


def read_quality_csv(path: str | Path) -> dict:
    """Rows of ``model,clip,score`` (header optional); an empty model applies to all."""
    out = {}
    with open(path, newline="") as fh:
        for row in csv.reader(fh):
            if not row or row[0].startswith("#"):
                continue
            if len(row) != 3:
                raise EvalError(f"{path}: expected model,clip,score rows, got {row}")
            try:
                score = float(row[2])
            except ValueError:
                if not out:
                    continue  # header
                raise EvalError(f"{path}: bad score {row[2]!r}") from None
            out[(row[0].strip(), row[1].strip())] = score
    return out
