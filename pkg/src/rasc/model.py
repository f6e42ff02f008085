"""The complete codec network: STFT front end, analysis/synthesis backbone and
the channel-wise entropy model, plus config presets and checkpoint I/O."""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path

import torch
from torch import nn

from .audio import StftConfig, from_sequence, istft, stft, to_sequence
from .backbone import BackboneConfig, Decoder, Encoder, TimeMix
from .entropy import ChannelwiseEntropyModel, EntropyConfig
from .tensor_core import CheckpointError, checkpoint_digest, dump_checkpoint, load_checkpoint, pad_right


@dataclass
class ModelConfig:
    n_fft: int = 512
    hop: int = 160
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    entropy: EntropyConfig = field(default_factory=EntropyConfig)
    # fixed gain on the spectrum going in (and its inverse coming out)
    spec_scale: float = 1.0

    def __post_init__(self):
        if isinstance(self.backbone, dict):
            self.backbone = BackboneConfig(**self.backbone)
        if isinstance(self.entropy, dict):
            self.entropy = EntropyConfig(**self.entropy)
        bins = self.n_fft // 2 + 1
        if self.backbone.in_channels != 2 * bins:
            raise ValueError(f"backbone in_channels {self.backbone.in_channels} != 2 * {bins} STFT bins")
        if self.backbone.latent_channels != self.entropy.latent_channels:
            raise ValueError("backbone and entropy model disagree on latent channels")

    @property
    def stft(self) -> StftConfig:
        return StftConfig(self.n_fft, self.hop)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)

    def latent_frames(self, frames: int) -> int:
        s = self.backbone.total_stride
        return math.ceil(frames / s)

    def hyper_frames(self, frames: int) -> int:
        return math.ceil(self.latent_frames(frames) / 2)


def desk_config(**overrides) -> ModelConfig:
    """Default desk-scale model (widths 64/128/192, strides 2/2/1, C = 32, 4 slices)."""
    return ModelConfig(**overrides)


def toy_config(latent_channels: int = 8, slices: int = 2) -> ModelConfig:
    """Tiny model for gradient checks: 32-point STFT, two stages, C = 8, s = 2."""
    return ModelConfig(
        n_fft=32, hop=8,
        backbone=BackboneConfig(in_channels=34, widths=[8, 12], strides=[2, 1], n_attn_per_stage=[1, 1],
                                latent_channels=latent_channels, kernel_size=3),
        entropy=EntropyConfig(latent_channels=latent_channels, slices=slices, hyper_channels=4,
                              hyper_width=8, slice_hidden=8, density_filters=[3, 3]),
        spec_scale=1.0,
    )


PRESETS = {"desk": desk_config, "toy": toy_config}


class SpeechCodec(nn.Module):
    def __init__(self, cfg: ModelConfig | None = None):
        super().__init__()
        self.cfg = cfg or desk_config()
        self.encoder = Encoder(self.cfg.backbone)
        self.decoder = Decoder(self.cfg.backbone)
        self.entropy = ChannelwiseEntropyModel(self.cfg.entropy)

    @property
    def dtype(self):
        return next(self.parameters()).dtype

    def set_parallel_wkv(self, flag: bool) -> None:
        for m in self.modules():
            if isinstance(m, TimeMix):
                m.parallel = flag

    def analysis(self, x: torch.Tensor) -> tuple[torch.Tensor, int]:
        """Samples ``B x L`` -> latent ``y`` and the STFT frame count."""
        spec = to_sequence(stft(x, self.cfg.stft)) * self.cfg.spec_scale
        frames = spec.shape[-1]
        return self.encoder(pad_right(spec, self.cfg.backbone.total_stride)), frames

    def synthesis(self, y_bar: torch.Tensor, frames: int, length: int) -> torch.Tensor:
        seq = self.decoder(y_bar, frames) / self.cfg.spec_scale
        return istft(from_sequence(seq), length, self.cfg.stft)

    def forward(self, x: torch.Tensor, generator: torch.Generator | None = None,
                synthesis_quant: str = "round") -> dict:
        y, frames = self.analysis(x)
        y_bar, rate_y, rate_z, diag = self.entropy.forward_train(y, generator, synthesis_quant)
        x_hat = self.synthesis(y_bar, frames, x.shape[-1])
        return {"x_hat": x_hat, "y": y, "y_bar": y_bar, "rate_y": rate_y, "rate_z": rate_z,
                "latent_elements": y.numel(), "diagnostics": diag}


# ------------------------------------------------------------- checkpoints


def save_model(model: SpeechCodec, path: str | Path | None = None) -> bytes:
    blob = dump_checkpoint(model.state_dict(), model.cfg.to_dict())
    if path is not None:
        Path(path).write_bytes(blob)
    return blob


def model_from_bytes(blob: bytes) -> SpeechCodec:
    config, tensors = load_checkpoint(blob)
    model = SpeechCodec(ModelConfig.from_dict(config))
    expected = model.state_dict()
    missing = set(expected) - set(tensors)
    extra = set(tensors) - set(expected)
    if missing or extra:
        raise CheckpointError(f"checkpoint does not match config: missing {sorted(missing)[:3]}, "
                              f"unexpected {sorted(extra)[:3]}")
    for name, t in tensors.items():
        if t.shape != expected[name].shape:
            raise CheckpointError(f"{name}: shape {tuple(t.shape)} != {tuple(expected[name].shape)}")
    dtypes = {t.dtype for t in tensors.values()}
    if dtypes == {torch.float64}:
        model = model.double()
    model.load_state_dict(tensors)
    model.eval()
    return model


def load_model(path: str | Path) -> tuple[SpeechCodec, bytes]:
    """Load a checkpoint file; returns the model and the 8-byte checkpoint digest."""
    blob = Path(path).read_bytes()
    return model_from_bytes(blob), checkpoint_digest(blob)
