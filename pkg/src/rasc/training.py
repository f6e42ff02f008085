"""Rate-distortion objective and the optimization loop."""
from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .audio import LOSS_SCALES, AudioClip, log_power_spec, mel_spec
from .container import LAMBDA_GRID
from .model import PRESETS, ModelConfig, SpeechCodec, save_model


class TrainingError(RuntimeError):
    pass


def distortion(x: torch.Tensor, x_hat: torch.Tensor, max_mismatch: int | None = None):
    """Time-domain L1 and multi-resolution spectral loss.

    ``L_t`` is the mean absolute error; ``L_f`` averages, over window sizes
    2**5 .. 2**11, the mean L1 and mean squared differences of log power and
    log mel spectra.  Returns ``(L_t, L_f)`` as tensors.
    """
    n = min(x.shape[-1], x_hat.shape[-1])
    limit = 160 if max_mismatch is None else max_mismatch
    if abs(x.shape[-1] - x_hat.shape[-1]) > limit:
        raise ValueError(f"length mismatch {x.shape[-1]} vs {x_hat.shape[-1]} exceeds {limit} samples")
    x, x_hat = x[..., :n], x_hat[..., :n]
    l_t = torch.mean(torch.abs(x - x_hat))
    l_f = x.new_zeros(())
    for i in LOSS_SCALES:
        for spec in (log_power_spec, mel_spec):
            d = spec(x, i) - spec(x_hat, i)
            l_f = l_f + torch.mean(torch.abs(d)) + torch.mean(d * d)
    return l_t, l_f / len(LOSS_SCALES)


@dataclass
class LossReport:
    total: float
    rate_y_bits: float
    rate_z_bits: float
    latent_elements: int
    L_t: float
    L_f: float
    lam: float
    step: int = 0
    normalization: str = "rates in bits per y element; distortion per audio sample"

    @staticmethod
    def combine(rate_y_bits, rate_z_bits, latent_elements, l_t, l_f, lam):
        return rate_y_bits / latent_elements + rate_z_bits / latent_elements + lam * (l_t + l_f)

    def recompute(self) -> float:
        return self.combine(self.rate_y_bits, self.rate_z_bits, self.latent_elements, self.L_t, self.L_f,
                            self.lam)

    @property
    def distortion(self) -> float:
        return self.L_t + self.L_f

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self))


def rd_loss(x: torch.Tensor, model: SpeechCodec, lam: float, generator: torch.Generator | None = None,
            synthesis_quant: str = "round", step: int = 0) -> tuple[torch.Tensor, LossReport]:
    """Differentiable ``R_y + R_z + lam * D`` for a ``B x L`` batch of samples."""
    out = model(x, generator, synthesis_quant)
    n = out["latent_elements"]
    l_t, l_f = distortion(x, out["x_hat"])
    total = LossReport.combine(out["rate_y"], out["rate_z"], n, l_t, l_f, lam)
    if not torch.isfinite(total):
        raise TrainingError(f"non-finite loss: rate_y={out['rate_y'].item()} rate_z={out['rate_z'].item()} "
                            f"L_t={l_t.item()} L_f={l_f.item()}")
    ry, rz, lt, lf = (float(v.detach()) for v in (out["rate_y"], out["rate_z"], l_t, l_f))
    report = LossReport(LossReport.combine(ry, rz, n, lt, lf, lam), ry, rz, n, lt, lf, lam, step)
    return total, report


@dataclass
class TrainConfig:
    lam: float = 9.0
    lr: float = 3e-4
    steps: int = 2000
    crop_samples: int = 8000
    seed: int = 0
    grad_clip: float = 1.0
    checkpoint_every: int = 500
    log_every: int = 10
    preset: str = "desk"

    @property
    def standard_lambda(self) -> bool:
        return any(abs(self.lam - v) < 1e-9 for v in LAMBDA_GRID)

    @classmethod
    def from_file(cls, path: str | Path) -> "TrainConfig":
        """Read ``key = value`` lines (``#`` comments, optional quotes)."""
        fields = {f.name: f.type for f in dataclasses.fields(cls)}
        values = {}
        for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key = value")
            key, val = (s.strip() for s in line.split("=", 1))
            key = key.replace("-", "_")
            if key == "lambda":
                key = "lam"
            if key not in fields:
                raise ValueError(f"{path}:{lineno}: unknown key {key!r}")
            val = val.strip("\"'")
            kind = fields[key]
            values[key] = int(val) if kind == "int" else float(val) if kind == "float" else val
        cfg = cls(**values)
        env = os.environ.get("RASC_SEED")
        if env is not None:
            cfg.seed = int(env)
        return cfg


def random_crop(clip: AudioClip, length: int, rng: np.random.Generator) -> np.ndarray:
    if len(clip) <= length:
        return clip.samples
    start = int(rng.integers(0, len(clip) - length + 1))
    return clip.samples[start:start + length]


def train(cfg: TrainConfig, clips: Sequence[AudioClip], checkpoint_out: str | Path | None = None,
          model: SpeechCodec | None = None, log_path: str | Path | None = None,
          model_config: ModelConfig | None = None,
          on_step: Callable[[LossReport], None] | None = None) -> tuple[LossReport, SpeechCodec, list]:
    """Adam on the RD loss over random crops; deterministic for a fixed seed.

    Returns the final report, the trained model and the per-step reports.
    """
    if not clips:
        raise TrainingError("empty dataset")
    torch.manual_seed(cfg.seed)
    if model is None:
        model = SpeechCodec(model_config or PRESETS[cfg.preset]())
    model.train()
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    rng = np.random.default_rng(cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed)
    history = []
    log = open(log_path, "w") if log_path else None
    try:
        for step in range(1, cfg.steps + 1):
            clip = clips[int(rng.integers(0, len(clips)))]
            x = torch.from_numpy(random_crop(clip, cfg.crop_samples, rng)).to(model.dtype).unsqueeze(0)
            try:
                loss, report = rd_loss(x, model, cfg.lam, gen, step=step)
            except (TrainingError, FloatingPointError) as exc:
                raise TrainingError(f"step {step}: {exc}") from exc
            opt.zero_grad(set_to_none=True)
            loss.backward()
            if cfg.grad_clip:
                torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
            opt.step()
            history.append(report)
            if on_step:
                on_step(report)
            if log and (step % cfg.log_every == 0 or step == cfg.steps):
                log.write(report.to_json() + "\n")
                log.flush()
            if checkpoint_out and cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
                save_model(model, checkpoint_out)
    finally:
        if log:
            log.close()
    model.eval()
    if checkpoint_out:
        save_model(model, checkpoint_out)
    return history[-1], model, history


def overfit(clip: AudioClip, lam: float, steps: int = 2000, seed: int = 0, lr: float = 3e-4,
            model_config: ModelConfig | None = None) -> tuple[SpeechCodec, list]:
    """Train a fresh model on a single clip (whole clip every step)."""
    cfg = TrainConfig(lam=lam, lr=lr, steps=steps, crop_samples=len(clip), seed=seed,
                      checkpoint_every=0)
    _, model, history = train(cfg, [clip], model_config=model_config)
    return model, history
