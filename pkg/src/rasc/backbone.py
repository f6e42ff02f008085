"""Encoder/decoder backbone: SEANet residual units, RWKV linear attention
and the convolution + RWKV mixture (CRM) block that combines them.

All modules work on ``B x C x T`` tensors and use causal padding, so output
frame ``t`` never depends on input frames after ``t``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F
from torch import nn

from .tensor_core import PadSpec, ShapeError, NonFiniteError, conv1d, conv_transpose1d, pad_right

NEG_INF = -1e30


class CausalConv1d(nn.Module):
    def __init__(self, c_in: int, c_out: int, kernel_size: int, stride: int = 1, dilation: int = 1,
                 zero_init: bool = False):
        super().__init__()
        self.stride = stride
        self.dilation = dilation
        self.weight = nn.Parameter(torch.empty(c_out, c_in, kernel_size))
        self.bias = nn.Parameter(torch.zeros(c_out))
        if zero_init:
            nn.init.zeros_(self.weight)
        else:
            # unit-gain fan-in init keeps activations O(1) through deep stacks
            nn.init.normal_(self.weight, std=1.0 / math.sqrt(c_in * kernel_size))
        # strided convs pad K - stride so that T divisible by stride maps to T / stride
        total = dilation * (kernel_size - 1) if stride == 1 else kernel_size - stride
        self.pad = PadSpec("causal", total)

    def forward(self, x):
        return conv1d(x, self.weight, self.bias, stride=self.stride, dilation=self.dilation, pad=self.pad)


class CausalConvTranspose1d(nn.Module):
    """Upsample by ``stride`` with kernel ``2 * stride``; length ``T -> T * stride``."""

    def __init__(self, c_in: int, c_out: int, stride: int, zero_init: bool = False):
        super().__init__()
        k = 2 * stride
        self.stride = stride
        self.weight = nn.Parameter(torch.empty(c_in, c_out, k))
        self.bias = nn.Parameter(torch.zeros(c_out))
        if zero_init:
            nn.init.zeros_(self.weight)
        else:
            # each output sample sees c_in * k / stride taps
            nn.init.normal_(self.weight, std=1.0 / math.sqrt(c_in * k / stride))
        self.trim = PadSpec("causal", k - stride)

    def forward(self, x):
        return conv_transpose1d(x, self.weight, self.bias, stride=self.stride, trim=self.trim)


class SeanetUnit(nn.Module):
    """``x + conv1x1(ELU(conv_k(ELU(x))))``, length preserving."""

    def __init__(self, channels: int, kernel_size: int = 3, dilation: int = 1, compress: int = 2,
                 zero_init: bool = False):
        super().__init__()
        hidden = max(channels // compress, 1)
        self.conv1 = CausalConv1d(channels, hidden, kernel_size, dilation=dilation)
        self.conv2 = CausalConv1d(hidden, channels, 1, zero_init=zero_init)

    def forward(self, x):
        return x + self.conv2(F.elu(self.conv1(F.elu(x))))


# ------------------------------------------------------------------- RWKV


@dataclass
class WkvState:
    """Running numerator, denominator and shared exponent offset (``B x C`` each)."""

    num: torch.Tensor
    den: torch.Tensor
    shift: torch.Tensor

    @classmethod
    def zeros(cls, batch: int, channels: int, dtype=torch.float32):
        z = torch.zeros(batch, channels, dtype=dtype)
        return cls(z, z.clone(), torch.full((batch, channels), NEG_INF, dtype=dtype))


@dataclass
class RwkvState:
    """Streaming state of one RWKV block: token-shift memories plus WKV accumulators."""

    att_prev: torch.Tensor
    ffn_prev: torch.Tensor
    wkv: WkvState

    @classmethod
    def zeros(cls, batch: int, channels: int, dtype=torch.float32):
        z = torch.zeros(batch, channels, dtype=dtype)
        return cls(z, z.clone(), WkvState.zeros(batch, channels, dtype))


def wkv(k: torch.Tensor, v: torch.Tensor, w: torch.Tensor, u: torch.Tensor,
        state: WkvState | None = None) -> tuple[torch.Tensor, WkvState]:
    """Causal weighted key-value mixing, evaluated as a running-max recurrence.

    ``k, v``: ``B x C x T``.  ``w``: positive decay, ``C`` (static) or
    ``B x C x T`` (per step).  ``u``: bonus for the current token, ``C``.
    Output frame ``t`` is the average of ``v_j`` (``j <= t``) with weights
    ``exp(k_j - sum_{m=j+1}^{t-1} w_m)`` for ``j < t`` and ``exp(u + k_t)``
    for ``j = t``.  Exponents are tracked relative to a running maximum so
    large keys never overflow.
    """
    b, c, t = k.shape
    if state is None:
        state = WkvState.zeros(b, c, k.dtype)
    num, den, p = state.num, state.den, state.shift
    per_step = w.dim() == 3
    outs = []
    for i in range(t):
        kt = k[..., i]
        vt = v[..., i]
        cur = u + kt
        q = torch.maximum(p, cur)
        a = torch.exp(p - q)
        e = torch.exp(cur - q)
        outs.append((a * num + e * vt) / (a * den + e))
        wt = w[..., i] if per_step else w
        decayed = p - wt
        q = torch.maximum(decayed, kt)
        a = torch.exp(decayed - q)
        e = torch.exp(kt - q)
        num = a * num + e * vt
        den = a * den + e
        p = q
    out = torch.stack(outs, dim=-1) if outs else k.new_zeros(b, c, 0)
    if not torch.isfinite(out).all():
        raise NonFiniteError("WKV produced non-finite values")
    return out, WkvState(num, den, p)


def wkv_parallel(k: torch.Tensor, v: torch.Tensor, w: torch.Tensor, u: torch.Tensor) -> torch.Tensor:
    """Same result as :func:`wkv` from a zero state, as one masked softmax.

    Costs ``O(T^2)`` memory but no Python loop over time, which is what
    training on short crops wants.
    """
    t = k.shape[-1]
    idx = torch.arange(t)
    if w.dim() == 3:
        csum = torch.cumsum(w, dim=-1)
        prev = F.pad(csum, (1, 0))[..., :t]                      # S_{t-1}
        decay = prev.unsqueeze(-1) - csum.unsqueeze(-2)          # S_{t-1} - S_j
    else:
        gap = (idx.view(-1, 1) - 1 - idx.view(1, -1)).to(k.dtype)  # t - 1 - j
        decay = w.view(1, -1, 1, 1) * gap
    logits = k.unsqueeze(-2) - decay
    diag = (u.view(1, -1, 1) + k)
    logits = torch.where(idx.view(-1, 1) == idx.view(1, -1), diag.unsqueeze(-2), logits)
    logits = logits.masked_fill(idx.view(1, -1) > idx.view(-1, 1), float("-inf"))
    return torch.einsum("bctj,bcj->bct", torch.softmax(logits, dim=-1), v)


def wkv_closing_state(k: torch.Tensor, v: torch.Tensor, w: torch.Tensor) -> WkvState:
    """State :func:`wkv` would hold after consuming ``k, v`` from a zero state.

    Term ``j`` carries weight ``exp(k_j - sum_{m=j+1}^{T-1} w_m)``; the shift
    is the largest such exponent, so a parallel pass can hand over to the
    recurrence without replaying the sequence.
    """
    b, c, t = k.shape
    if t == 0:
        return WkvState.zeros(b, c, k.dtype)
    if w.dim() == 3:
        csum = torch.cumsum(w, dim=-1)
        decay = csum[..., -1:] - csum                            # S_{T-1} - S_j
    else:
        decay = w.view(1, -1, 1) * torch.arange(t - 1, -1, -1, dtype=k.dtype)
    e = k - decay
    shift = e.amax(dim=-1)
    weights = torch.exp(e - shift.unsqueeze(-1))
    return WkvState((weights * v).sum(-1), weights.sum(-1), shift)


def _token_shift(x: torch.Tensor, prev: torch.Tensor | None) -> tuple[torch.Tensor, torch.Tensor]:
    first = torch.zeros_like(x[..., :1]) if prev is None else prev.unsqueeze(-1)
    shifted = torch.cat([first, x[..., :-1]], dim=-1)
    return shifted, x[..., -1]


def _mix(x, shifted, ratio):
    r = ratio.view(1, -1, 1)
    return x * r + shifted * (1 - r)


def _linear(x, weight):
    return torch.einsum("oc,bct->bot", weight, x)


class ChannelLayerNorm(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))

    def forward(self, x):
        return F.layer_norm(x.transpose(1, 2), (x.shape[1],), self.weight, self.bias, 1e-5).transpose(1, 2)


class TimeMix(nn.Module):
    """RWKV time mixing with static per-channel decay (optionally data dependent)."""

    def __init__(self, channels: int, layer_frac: float = 0.0, data_dependent_decay: bool = False,
                 lora_rank: int = 8):
        super().__init__()
        c = channels
        ramp = torch.arange(c, dtype=torch.float32) / max(c - 1, 1)
        # v4-style init: decay spread from slow to fast across channels
        self.time_decay = nn.Parameter(-5 + 8 * ramp ** (0.7 + 1.3 * (1 - layer_frac)))
        self.time_first = nn.Parameter(torch.full((c,), math.log(0.3)) + 0.5 * ((torch.arange(c) + 1) % 3 - 1))
        self.mix_k = nn.Parameter(ramp ** (1 - layer_frac))
        self.mix_v = nn.Parameter(ramp ** (1 - layer_frac) + 0.3 * layer_frac)
        self.mix_r = nn.Parameter(0.5 * ramp ** (1 - layer_frac))
        scale = 1 / math.sqrt(c)
        self.key = nn.Parameter(torch.randn(c, c) * scale)
        self.value = nn.Parameter(torch.randn(c, c) * scale)
        self.receptance = nn.Parameter(torch.randn(c, c) * scale)
        self.output = nn.Parameter(torch.randn(c, c) * scale)
        self.data_dependent_decay = data_dependent_decay
        # full-sequence calls may use the closed form; streaming always recurs
        self.parallel = True
        if data_dependent_decay:
            self.decay_down = nn.Parameter(torch.randn(lora_rank, c) * scale)
            self.decay_up = nn.Parameter(torch.zeros(c, lora_rank))

    def decay(self, xw: torch.Tensor | None = None) -> torch.Tensor:
        if not self.data_dependent_decay:
            return torch.exp(self.time_decay)
        delta = _linear(torch.tanh(_linear(xw, self.decay_down)), self.decay_up)
        return torch.exp(self.time_decay.view(1, -1, 1) + delta)

    def forward(self, x, state: RwkvState | None = None):
        shifted, last = _token_shift(x, None if state is None else state.att_prev)
        xk = _mix(x, shifted, self.mix_k)
        xv = _mix(x, shifted, self.mix_v)
        xr = _mix(x, shifted, self.mix_r)
        k = _linear(xk, self.key)
        v = _linear(xv, self.value)
        r = _linear(xr, self.receptance)
        w = self.decay(xk) if self.data_dependent_decay else self.decay()
        if state is None and self.parallel:
            mixed = wkv_parallel(k, v, w, self.time_first)
            wstate = wkv_closing_state(k, v, w)
        else:
            mixed, wstate = wkv(k, v, w, self.time_first, None if state is None else state.wkv)
        return _linear(torch.sigmoid(r) * mixed, self.output), last, wstate


class ChannelMix(nn.Module):
    def __init__(self, channels: int, hidden_mult: int = 2, layer_frac: float = 0.0):
        super().__init__()
        c = channels
        h = hidden_mult * c
        ramp = torch.arange(c, dtype=torch.float32) / max(c - 1, 1)
        self.mix_k = nn.Parameter(ramp ** (1 - layer_frac))
        self.mix_r = nn.Parameter(ramp ** (1 - layer_frac))
        self.key = nn.Parameter(torch.randn(h, c) / math.sqrt(c))
        self.value = nn.Parameter(torch.randn(c, h) / math.sqrt(h))
        self.receptance = nn.Parameter(torch.randn(c, c) / math.sqrt(c))

    def forward(self, x, prev: torch.Tensor | None = None):
        shifted, last = _token_shift(x, prev)
        xk = _mix(x, shifted, self.mix_k)
        xr = _mix(x, shifted, self.mix_r)
        k = torch.relu(_linear(xk, self.key)) ** 2
        return torch.sigmoid(_linear(xr, self.receptance)) * _linear(k, self.value), last


class RwkvBlock(nn.Module):
    def __init__(self, channels: int, layer_frac: float = 0.0, data_dependent_decay: bool = False):
        super().__init__()
        self.ln1 = ChannelLayerNorm(channels)
        self.att = TimeMix(channels, layer_frac, data_dependent_decay)
        self.ln2 = ChannelLayerNorm(channels)
        self.ffn = ChannelMix(channels, layer_frac=layer_frac)

    def forward(self, x, state: RwkvState | None = None):
        a, att_last, wstate = self.att(self.ln1(x), state)
        x = x + a
        f, ffn_last = self.ffn(self.ln2(x), None if state is None else state.ffn_prev)
        x = x + f
        return x, RwkvState(att_last, ffn_last, wstate)


# -------------------------------------------------------------------- CRM


@dataclass
class CrmConfig:
    channels: int
    attn_downsample: int = 2
    n_attn_blocks: int = 1
    causal: bool = True
    data_dependent_decay: bool = False

    def __post_init__(self):
        if self.channels % 2:
            raise ValueError(f"CRM channels must be even, got {self.channels}")
        if self.attn_downsample not in (1, 2, 4):
            raise ValueError(f"attn_downsample must be 1, 2 or 4, got {self.attn_downsample}")
        if not self.causal:
            raise ValueError("only causal CRM blocks are supported")


class CrmBlock(nn.Module):
    """Convolution + RWKV mixture block.

    1x1 conv, split channels in half, a SEANet unit on one half and
    downsample -> RWKV blocks -> upsample (with a skip around it) on the
    other, concatenate, 1x1 fuse.  The upsampling conv starts at zero so a
    fresh block behaves like its convolutional half alone.
    """

    def __init__(self, cfg: CrmConfig):
        super().__init__()
        self.cfg = cfg
        c, half, d = cfg.channels, cfg.channels // 2, cfg.attn_downsample
        self.proj = CausalConv1d(c, c, 1)
        self.seanet = SeanetUnit(half)
        if d > 1:
            self.down = CausalConv1d(half, half, 2 * d, stride=d)
            self.up = CausalConvTranspose1d(half, half, d, zero_init=True)
        else:
            self.down = CausalConv1d(half, half, 1)
            self.up = CausalConv1d(half, half, 1, zero_init=True)
        n = cfg.n_attn_blocks
        self.attn = nn.ModuleList(
            RwkvBlock(half, i / max(n - 1, 1), cfg.data_dependent_decay) for i in range(n))
        self.fuse = CausalConv1d(c, c, 1)

    def attention_path(self, x):
        h = self.down(x)
        for blk in self.attn:
            h, _ = blk(h)
        return x + self.up(h)

    def forward(self, x):
        if x.shape[1] != self.cfg.channels:
            raise ShapeError(f"CRM block expects {self.cfg.channels} channels, got {x.shape[1]}")
        t = x.shape[-1]
        x = pad_right(x, self.cfg.attn_downsample)
        h = self.proj(x)
        a, b = torch.chunk(h, 2, dim=1)
        out = self.fuse(torch.cat([self.seanet(a), self.attention_path(b)], dim=1))
        return out[..., :t]


# --------------------------------------------------------------- backbone


@dataclass
class BackboneConfig:
    in_channels: int = 514
    widths: list = field(default_factory=lambda: [64, 128, 192])
    strides: list = field(default_factory=lambda: [2, 2, 1])
    n_attn_per_stage: list = field(default_factory=lambda: [1, 2, 4])
    latent_channels: int = 32
    attn_downsample: int = 2
    kernel_size: int = 7
    data_dependent_decay: bool = False

    def __post_init__(self):
        if not (len(self.widths) == len(self.strides) == len(self.n_attn_per_stage)):
            raise ValueError("widths, strides and n_attn_per_stage must have equal length")
        if any(b < a for a, b in zip(self.n_attn_per_stage, self.n_attn_per_stage[1:])):
            raise ValueError(f"n_attn_per_stage must be nondecreasing, got {self.n_attn_per_stage}")
        if any(s < 1 for s in self.strides):
            raise ValueError(f"strides must be >= 1, got {self.strides}")
        for w in self.widths:
            CrmConfig(w, self.attn_downsample)

    @property
    def total_stride(self) -> int:
        return math.prod(self.strides)

    def crm(self, stage: int) -> CrmConfig:
        return CrmConfig(self.widths[stage], self.attn_downsample, self.n_attn_per_stage[stage],
                         data_dependent_decay=self.data_dependent_decay)


def _resample(c_in, c_out, stride, up=False):
    if stride == 1:
        return CausalConv1d(c_in, c_out, 3)
    if up:
        return CausalConvTranspose1d(c_in, c_out, stride)
    return CausalConv1d(c_in, c_out, 2 * stride, stride=stride)


class Encoder(nn.Module):
    """Analysis transform: ``(2F) x T`` spectrum sequence to ``C x T/prod(strides)`` latent."""

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.cfg = cfg
        w = cfg.widths
        self.conv_in = CausalConv1d(cfg.in_channels, w[0], cfg.kernel_size)
        self.blocks = nn.ModuleList(CrmBlock(cfg.crm(i)) for i in range(len(w)))
        self.downs = nn.ModuleList(
            _resample(w[i], w[min(i + 1, len(w) - 1)], s) for i, s in enumerate(cfg.strides))
        self.conv_out = CausalConv1d(w[-1], cfg.latent_channels, 3)

    def forward(self, x):
        if x.shape[-1] % self.cfg.total_stride:
            raise ShapeError(f"frame count {x.shape[-1]} not divisible by {self.cfg.total_stride}; pad first")
        h = self.conv_in(x)
        for blk, down in zip(self.blocks, self.downs):
            h = down(F.elu(blk(h)))
        return self.conv_out(F.elu(h))


class Decoder(nn.Module):
    """Synthesis transform mirroring :class:`Encoder`."""

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.cfg = cfg
        w = cfg.widths
        n = len(w)
        self.conv_in = CausalConv1d(cfg.latent_channels, w[-1], cfg.kernel_size)
        # stage order is reversed: deepest first
        self.ups = nn.ModuleList(
            _resample(w[min(i + 1, n - 1)], w[i], cfg.strides[i], up=True) for i in reversed(range(n)))
        self.blocks = nn.ModuleList(CrmBlock(cfg.crm(i)) for i in reversed(range(n)))
        self.conv_out = CausalConv1d(w[0], cfg.in_channels, cfg.kernel_size)

    def forward(self, y, frames: int | None = None):
        if y.shape[1] != self.cfg.latent_channels:
            raise ShapeError(f"decoder expects {self.cfg.latent_channels} latent channels, got {y.shape[1]}")
        h = self.conv_in(y)
        for up, blk in zip(self.ups, self.blocks):
            h = blk(up(F.elu(h)))
        out = self.conv_out(F.elu(h))
        return out if frames is None else out[..., :frames]
