"""Turning audio into ``.rasc`` containers and back.

Encoder and decoder share :meth:`ChannelwiseEntropyModel.slice_params` and
``slice_residual``, fed with identical tensors, so Gaussian parameters and
refined latents agree bit for bit on both sides.
"""
from __future__ import annotations

import copy
import functools
import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .audio import AudioClip
from .coder import (DecodeError, RangeDecoder, RangeEncoder, factorized_tables, gaussian_tables,
                    scale_index)
from .container import BitstreamContainer, ContainerError, lambda_index
from .entropy import gaussian_pmf, round_half_away
from .model import SpeechCodec


class CodecError(RuntimeError):
    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"{stage}: {cause}")
        self.stage = stage
        self.cause = cause


@functools.lru_cache(maxsize=1)
def _y_tables():
    return gaussian_tables()


@dataclass
class LatentTrace:
    """Everything that crossed the bitstream, for dual-run comparisons."""

    z_symbols: torch.Tensor
    y_symbols: list = field(default_factory=list)
    mu: list = field(default_factory=list)
    sigma: list = field(default_factory=list)
    scale_idx: list = field(default_factory=list)
    y_bar: torch.Tensor | None = None

    def estimated_bits(self, model: SpeechCodec) -> tuple[float, float]:
        """Model code length (floored pmfs) of the z and y symbols."""
        dens = copy.deepcopy(model.entropy.density).double()
        with torch.no_grad():
            z_bits = float(-torch.log2(dens.pmf(self.z_symbols[0].to(torch.float64))).sum())
        y_bits = 0.0
        for sym, sig in zip(self.y_symbols, self.sigma):
            p = gaussian_pmf(sym.to(torch.float64), 0.0, sig.to(torch.float64))
            y_bits += float(-torch.log2(p).sum())
        return z_bits, y_bits


def _symbols_to_list(t: torch.Tensor) -> list:
    # channel-major, then time
    return t[0].reshape(-1).tolist()


@torch.no_grad()
def encode_latents(model: SpeechCodec, y: torch.Tensor) -> tuple[bytes, list, LatentTrace]:
    ent = model.entropy
    frames = y.shape[-1]
    z = ent.hyper_encode(y)
    z_sym = round_half_away(z)
    ztabs = factorized_tables(ent.density)
    enc = RangeEncoder()
    c_z, t_z = z_sym.shape[1:]
    for c in range(c_z):
        tab = ztabs[c]
        for s in z_sym[0, c].to(torch.int64).tolist():
            enc.encode(s, tab)
    z_stream = enc.finish()
    trace = LatentTrace(z_sym.to(torch.int64))
    feats = ent.hyper_decode(z_sym, frames)
    ytabs = _y_tables()
    prev = []
    streams = []
    for i, y_i in enumerate(ent.split(y)):
        mu, sigma = ent.slice_params(i, feats, prev)
        sym = round_half_away(y_i - mu)
        y_hat = sym + mu
        y_bar = y_hat + ent.slice_residual(i, feats, prev, y_hat)
        idx = scale_index(sigma[0].numpy()).reshape(-1)
        enc = RangeEncoder()
        for s, k in zip(_symbols_to_list(sym.to(torch.int64)), idx.tolist()):
            enc.encode(s, ytabs[k])
        streams.append(enc.finish())
        trace.y_symbols.append(sym.to(torch.int64))
        trace.mu.append(mu)
        trace.sigma.append(sigma)
        trace.scale_idx.append(idx)
        prev.append(y_bar)
    trace.y_bar = torch.cat(prev, dim=1)
    return z_stream, streams, trace


@torch.no_grad()
def decode_latents(model: SpeechCodec, z_stream: bytes, slice_streams: list, frames: int) -> LatentTrace:
    ent = model.entropy
    cfg = model.cfg
    t_y = cfg.latent_frames(frames)
    t_z = cfg.hyper_frames(frames)
    c_z = cfg.entropy.hyper_channels
    if len(slice_streams) != cfg.entropy.slices:
        raise DecodeError(f"{len(slice_streams)} slice streams, model expects {cfg.entropy.slices}")
    ztabs = factorized_tables(ent.density)
    dec = RangeDecoder(z_stream)
    zs = [dec.decode(ztabs[c]) for c in range(c_z) for _ in range(t_z)]
    dec.check_end()
    z_sym = torch.tensor(zs, dtype=torch.int64).reshape(1, c_z, t_z)
    trace = LatentTrace(z_sym)
    feats = ent.hyper_decode(z_sym.to(model.dtype), t_y)
    ytabs = _y_tables()
    cs = cfg.entropy.slice_channels
    prev = []
    for i, data in enumerate(slice_streams):
        mu, sigma = ent.slice_params(i, feats, prev)
        idx = scale_index(sigma[0].numpy()).reshape(-1)
        dec = RangeDecoder(data)
        syms = [dec.decode(ytabs[k]) for k in idx.tolist()]
        dec.check_end()
        sym = torch.tensor(syms, dtype=torch.int64).reshape(1, cs, t_y)
        y_hat = sym.to(mu.dtype) + mu
        y_bar = y_hat + ent.slice_residual(i, feats, prev, y_hat)
        trace.y_symbols.append(sym)
        trace.mu.append(mu)
        trace.sigma.append(sigma)
        trace.scale_idx.append(idx)
        prev.append(y_bar)
    trace.y_bar = torch.cat(prev, dim=1)
    return trace


def compress(clip: AudioClip, model: SpeechCodec, model_hash: bytes, lam: float | None = None,
             return_trace: bool = False):
    """Audio clip -> container (and optionally the encoder-side latent trace)."""
    stage = "analysis"
    try:
        with torch.no_grad():
            x = clip.tensor(model.dtype).unsqueeze(0)
            y, frames = model.analysis(x)
            stage = "entropy coding"
            z_stream, streams, trace = encode_latents(model, y)
    except Exception as exc:
        raise CodecError(stage, exc) from exc
    cont = BitstreamContainer(model_hash, clip.sample_rate, len(clip), frames, lambda_index(lam),
                              model.cfg.n_fft, model.cfg.hop, z_stream, streams)
    return (cont, trace) if return_trace else cont


def decompress(cont: BitstreamContainer, model: SpeechCodec, model_hash: bytes | None = None,
               return_trace: bool = False):
    """Container -> audio clip; never returns partial audio."""
    if model_hash is not None and cont.model_hash != model_hash:
        raise ContainerError(f"model hash mismatch: stream {cont.model_hash.hex()} vs "
                             f"checkpoint {model_hash.hex()}")
    if (cont.n_fft, cont.hop) != (model.cfg.n_fft, model.cfg.hop):
        raise ContainerError(f"stream STFT ({cont.n_fft}, {cont.hop}) does not match model "
                             f"({model.cfg.n_fft}, {model.cfg.hop})")
    with torch.no_grad():
        trace = decode_latents(model, cont.z_stream, cont.slice_streams, cont.n_frames)
        x_hat = model.synthesis(trace.y_bar, cont.n_frames, cont.n_samples)
    samples = np.clip(x_hat[0].to(torch.float32).numpy(), -1.0, 1.0)
    clip = AudioClip(samples, cont.sample_rate)
    return (clip, trace) if return_trace else clip
