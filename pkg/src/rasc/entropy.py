"""Channel-wise entropy model with a hyper-prior and latent residual prediction.

``y`` is split into ``s`` channel slices.  The hyper-prior ``z = h_a(y)`` is
coded with a learned factorized density; ``h_s(round(z))`` yields mean and
scale features.  Slice ``i`` gets Gaussian parameters from those features
and the already refined slices ``ybar_{<i}`` only, so the decoder can
reproduce them; the rounded slice is then refined by a bounded residual.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F
from torch import nn

from .backbone import CausalConv1d, CausalConvTranspose1d, CrmBlock, CrmConfig, RwkvBlock
from .tensor_core import NonFiniteError, ShapeError, pad_right

SIGMA_MIN = 0.11
PMF_FLOOR = 2.0 ** -16
LOG2 = math.log(2.0)
# residual bound: just under 1/2 so a saturated tanh cannot leave the quantization cell
R_MAX = 0.5 - 2.0 ** -24


# ------------------------------------------------------------ quantization


def round_half_away(x: torch.Tensor) -> torch.Tensor:
    return torch.sign(x) * torch.floor(torch.abs(x) + 0.5)


def quantize(v: torch.Tensor, mu: torch.Tensor | float = 0.0, mode: str = "round",
             generator: torch.Generator | None = None) -> torch.Tensor:
    """``round(v - mu) + mu`` (straight-through gradient) or ``v + U(-1/2, 1/2)``."""
    if mode == "round":
        hard = round_half_away(v - mu) + mu
        return v + (hard - v).detach()
    if mode == "noise":
        noise = torch.rand(v.shape, generator=generator, dtype=v.dtype) - 0.5
        return v + noise
    if mode == "symbols":
        return round_half_away(v - mu)
    raise ValueError(f"unknown quantization mode {mode!r}")


# ---------------------------------------------------------------- densities


def std_normal_cdf(x: torch.Tensor) -> torch.Tensor:
    return 0.5 * torch.erfc(-x / math.sqrt(2.0))


def gaussian_likelihood(v: torch.Tensor, mu: torch.Tensor, sigma: torch.Tensor) -> torch.Tensor:
    """Mass of ``N(mu, sigma^2)`` on ``[v - 1/2, v + 1/2]``, unfloored.

    Uses the upper tail on ``|v - mu|`` so large offsets keep precision.
    """
    d = torch.abs(v - mu)
    return std_normal_cdf((0.5 - d) / sigma) - std_normal_cdf((-0.5 - d) / sigma)


def gaussian_pmf(n, mu=0.0, sigma=1.0):
    """Probability of integer symbol ``n`` under ``N(mu, sigma^2)``, floored at 2**-16.

    >>> round(gaussian_pmf(0, 0.0, 1.0), 6)
    0.382925
    """
    scalar = not torch.is_tensor(n)
    n_t = torch.as_tensor(n, dtype=torch.float64)
    mu_t = torch.as_tensor(mu, dtype=torch.float64)
    sigma_t = torch.clamp(torch.as_tensor(sigma, dtype=torch.float64), min=SIGMA_MIN)
    p = torch.clamp(gaussian_likelihood(n_t, mu_t, sigma_t), min=PMF_FLOOR)
    return p.item() if scalar else p


def cdf_difference(lo: torch.Tensor, hi: torch.Tensor) -> torch.Tensor:
    """``sigmoid(hi) - sigmoid(lo)``, evaluated in whichever tail keeps precision."""
    sign = torch.where(lo + hi > 0, -1.0, 1.0).to(lo.dtype)
    return torch.abs(torch.sigmoid(sign * hi) - torch.sigmoid(sign * lo))


class FactorizedDensity(nn.Module):
    """Per-channel monotone CDF network (non-parametric density).

    ``logits_cdf`` is a stack of ``softplus``-positive matrices with
    ``tanh`` gates, so the CDF ``sigmoid(logits)`` is nondecreasing with
    limits 0 and 1.  Biases start at zero, which makes the initial density
    symmetric about 0.
    """

    def __init__(self, channels: int, filters=(3, 3, 3), init_scale: float = 4.0):
        super().__init__()
        self.channels = channels
        dims = (1, *filters, 1)
        scale = init_scale ** (1.0 / (len(filters) + 1))
        self.matrices = nn.ParameterList()
        self.biases = nn.ParameterList()
        self.factors = nn.ParameterList()
        for i in range(len(filters) + 1):
            init = math.log(math.expm1(1.0 / scale / dims[i + 1]))
            self.matrices.append(nn.Parameter(torch.full((channels, dims[i + 1], dims[i]), init)))
            self.biases.append(nn.Parameter(torch.zeros(channels, dims[i + 1], 1)))
            if i < len(filters):
                self.factors.append(nn.Parameter(torch.zeros(channels, dims[i + 1], 1)))

    def logits_cdf(self, x: torch.Tensor) -> torch.Tensor:
        """``x``: ``C x N`` -> ``C x N`` logits of the per-channel CDF."""
        h = x.unsqueeze(1)
        for i, m in enumerate(self.matrices):
            h = torch.matmul(F.softplus(m), h) + self.biases[i]
            if i < len(self.factors):
                h = h + torch.tanh(self.factors[i]) * torch.tanh(h)
        return h.squeeze(1)

    def cdf(self, x: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.logits_cdf(x))

    def likelihood(self, v: torch.Tensor) -> torch.Tensor:
        """Mass on ``[v - 1/2, v + 1/2]`` for ``B x C x T`` values, unfloored."""
        b, c, t = v.shape
        flat = v.permute(1, 0, 2).reshape(c, -1)
        lo = self.logits_cdf(flat - 0.5)
        hi = self.logits_cdf(flat + 0.5)
        # evaluate in the tail where sigmoid differences keep precision
        p = cdf_difference(lo, hi)
        return p.reshape(c, b, t).permute(1, 0, 2)

    def pmf(self, n: torch.Tensor, floor: bool = True) -> torch.Tensor:
        """Pmf of integer symbols, ``C x N`` grid -> ``C x N``; floored at 2**-16 for coding."""
        p = cdf_difference(self.logits_cdf(n - 0.5), self.logits_cdf(n + 0.5))
        return torch.clamp(p, min=PMF_FLOOR) if floor else p

    @torch.no_grad()
    def quantile(self, q: float, lo: float = -1e4, hi: float = 1e4, iters: int = 80) -> torch.Tensor:
        """Per-channel ``x`` with ``CDF(x) = q``, by bisection."""
        target = math.log(q / (1 - q))
        dtype = self.matrices[0].dtype
        a = torch.full((self.channels, 1), lo, dtype=dtype)
        b = torch.full((self.channels, 1), hi, dtype=dtype)
        for _ in range(iters):
            mid = 0.5 * (a + b)
            below = self.logits_cdf(mid) < target
            a = torch.where(below, mid, a)
            b = torch.where(below, b, mid)
        return (0.5 * (a + b)).squeeze(1)

    def medians(self) -> torch.Tensor:
        return self.quantile(0.5)


# --------------------------------------------------------------- networks


@dataclass
class EntropyConfig:
    latent_channels: int = 32
    slices: int = 4
    hyper_channels: int = 16
    hyper_width: int = 64
    slice_hidden: int = 64
    hyper_attn_blocks: int = 1
    attn_downsample: int = 2
    sigma_min: float = SIGMA_MIN
    density_filters: list = field(default_factory=lambda: [3, 3, 3])
    use_lrp: bool = True
    data_dependent_decay: bool = False

    def __post_init__(self):
        if self.latent_channels % self.slices:
            raise ValueError(f"{self.latent_channels} latent channels do not split into {self.slices} slices")

    @property
    def slice_channels(self) -> int:
        return self.latent_channels // self.slices


class HyperAnalysis(nn.Module):
    """``h_a``: ``C x T_y`` -> ``C_z x ceil(T_y / 2)``."""

    def __init__(self, cfg: EntropyConfig):
        super().__init__()
        w = cfg.hyper_width
        self.conv_in = CausalConv1d(cfg.latent_channels, w, 3)
        self.crm = CrmBlock(CrmConfig(w, cfg.attn_downsample, cfg.hyper_attn_blocks,
                                      data_dependent_decay=cfg.data_dependent_decay))
        self.down = CausalConv1d(w, cfg.hyper_channels, 4, stride=2)

    def forward(self, y):
        h = self.conv_in(pad_right(y, 2))
        return self.down(F.elu(self.crm(h)))


class HyperSynthesis(nn.Module):
    """``h_s``: ``C_z x T_z`` -> (``F_mean``, ``F_scale``), each ``C x T_y``."""

    def __init__(self, cfg: EntropyConfig):
        super().__init__()
        w = cfg.hyper_width
        self.conv_in = CausalConv1d(cfg.hyper_channels, w, 3)
        self.crm = CrmBlock(CrmConfig(w, cfg.attn_downsample, cfg.hyper_attn_blocks,
                                      data_dependent_decay=cfg.data_dependent_decay))
        self.up = CausalConvTranspose1d(w, w, 2)
        self.conv_out = CausalConv1d(w, 2 * cfg.latent_channels, 3)

    def forward(self, z_hat, frames: int):
        h = self.crm(self.conv_in(z_hat))
        h = self.conv_out(F.elu(self.up(F.elu(h))))[..., :frames]
        return torch.chunk(h, 2, dim=1)


class ParametersNet(nn.Module):
    """Context ``(F_mean, F_scale, ybar_{<i})`` -> ``(mu_i, sigma_i)``."""

    def __init__(self, in_channels: int, hidden: int, out_channels: int, sigma_min: float,
                 data_dependent_decay: bool = False):
        super().__init__()
        self.sigma_min = sigma_min
        self.conv_in = CausalConv1d(in_channels, hidden, 1)
        self.rwkv = RwkvBlock(hidden, 0.0, data_dependent_decay)
        self.conv1 = CausalConv1d(hidden, hidden, 3)
        self.conv2 = CausalConv1d(hidden, 2 * out_channels, 1)

    def forward(self, ctx):
        h, _ = self.rwkv(self.conv_in(ctx))
        mu, raw = torch.chunk(self.conv2(F.elu(self.conv1(h))), 2, dim=1)
        return mu, F.softplus(raw) + self.sigma_min


class ResidualNet(nn.Module):
    """Latent residual prediction: ``(F_mean, ybar_{<i}, yhat_i)`` -> ``r_i`` with ``|r_i| < 1/2``."""

    def __init__(self, in_channels: int, hidden: int, out_channels: int):
        super().__init__()
        self.conv1 = CausalConv1d(in_channels, hidden, 3)
        self.conv2 = CausalConv1d(hidden, out_channels, 1)

    def forward(self, ctx):
        return R_MAX * torch.tanh(self.conv2(F.elu(self.conv1(ctx))))


@dataclass
class SliceResult:
    mu: torch.Tensor
    sigma: torch.Tensor
    y_hat: torch.Tensor
    residual: torch.Tensor
    y_bar: torch.Tensor


class ChannelwiseEntropyModel(nn.Module):
    def __init__(self, cfg: EntropyConfig):
        super().__init__()
        self.cfg = cfg
        c, cs, s = cfg.latent_channels, cfg.slice_channels, cfg.slices
        self.h_a = HyperAnalysis(cfg)
        self.h_s = HyperSynthesis(cfg)
        self.density = FactorizedDensity(cfg.hyper_channels, tuple(cfg.density_filters))
        self.param_nets = nn.ModuleList(
            ParametersNet(2 * c + i * cs, cfg.slice_hidden, cs, cfg.sigma_min, cfg.data_dependent_decay)
            for i in range(s))
        self.lrp_nets = nn.ModuleList(
            ResidualNet(c + (i + 1) * cs, cfg.slice_hidden, cs) for i in range(s)) if cfg.use_lrp else None

    # -- decodable pieces, shared verbatim by encoder and decoder --

    def hyper_encode(self, y):
        return self.h_a(y)

    def hyper_decode(self, z_hat, frames: int):
        return self.h_s(z_hat, frames)

    def slice_params(self, i: int, feats, y_bar_prev: list) -> tuple[torch.Tensor, torch.Tensor]:
        if len(y_bar_prev) != i:
            raise RuntimeError(f"slice {i} requested with {len(y_bar_prev)} decoded slices (out of order)")
        f_mean, f_scale = feats
        return self.param_nets[i](torch.cat([f_mean, f_scale, *y_bar_prev], dim=1))

    def slice_residual(self, i: int, feats, y_bar_prev: list, y_hat_i):
        if self.lrp_nets is None:
            return torch.zeros_like(y_hat_i)
        return self.lrp_nets[i](torch.cat([feats[0], *y_bar_prev, y_hat_i], dim=1))

    def slice_step(self, i: int, y_i, y_bar_prev: list, feats, quant: str = "round",
                   generator: torch.Generator | None = None) -> SliceResult:
        mu, sigma = self.slice_params(i, feats, y_bar_prev)
        if y_i.shape != mu.shape:
            raise ShapeError(f"slice {i}: latent shape {tuple(y_i.shape)} != parameter shape {tuple(mu.shape)}")
        y_hat = quantize(y_i, mu, quant, generator)
        r = self.slice_residual(i, feats, y_bar_prev, y_hat)
        return SliceResult(mu, sigma, y_hat, r, y_hat + r)

    def split(self, y) -> list:
        return list(torch.split(y, self.cfg.slice_channels, dim=1))

    # -- training --

    def forward_train(self, y, generator: torch.Generator | None = None, synthesis_quant: str = "round"):
        """Rates in bits (differentiable) and the refined latent ``ybar``.

        Rate terms see uniform-noise quantization; the path into the
        synthesis transform uses ``synthesis_quant`` ("round" is
        straight-through rounding, "noise" gives a smooth loss for
        gradient checking).
        """
        frames = y.shape[-1]
        z = self.hyper_encode(y)
        z_noisy = quantize(z, 0.0, "noise", generator)
        rate_z = -torch.log(torch.clamp(self.density.likelihood(z_noisy), min=PMF_FLOOR)).sum() / LOG2
        z_hat = quantize(z, 0.0, synthesis_quant, generator)
        feats = self.hyper_decode(z_hat, frames)
        y_bar_prev = []
        rate_y = y.new_zeros(())
        slice_bits = []
        clamped = 0
        for i, y_i in enumerate(self.split(y)):
            res = self.slice_step(i, y_i, y_bar_prev, feats, synthesis_quant, generator)
            clamped += int((res.sigma <= self.cfg.sigma_min).sum())
            y_noisy = quantize(y_i, 0.0, "noise", generator)
            lik = torch.clamp(gaussian_likelihood(y_noisy, res.mu, res.sigma), min=PMF_FLOOR)
            bits = -torch.log(lik).sum() / LOG2
            if not torch.isfinite(bits):
                raise NonFiniteError(f"non-finite rate in slice {i}")
            slice_bits.append(bits.item())
            rate_y = rate_y + bits
            y_bar_prev.append(res.y_bar)
        if not torch.isfinite(rate_z):
            raise NonFiniteError("non-finite hyper-latent rate")
        diagnostics = {"slice_bits": slice_bits, "sigma_clamped": clamped, "z_shape": tuple(z.shape)}
        return torch.cat(y_bar_prev, dim=1), rate_y, rate_z, diagnostics
