"""Differentiable substrate: the small op set the codec needs, gradient
helpers, a central-difference verifier and the checkpoint format.

Tensors are ``torch.Tensor`` values; reverse-mode gradients come from
autograd.  The wrappers here pin down the shape contracts the rest of the
package relies on (``C x T`` sequences, causal or symmetric padding) and
reject bad shapes with a readable report instead of a deep torch error.
"""
from __future__ import annotations

import hashlib
import io
import json
import struct
from dataclasses import dataclass
from typing import Callable, Iterable, Mapping, Sequence

import torch
import torch.nn.functional as F
from torch import nn

CKPT_MAGIC = b"RASCKPT1"

_PRECISION_TAGS = {torch.float32: 0, torch.float64: 1}
_TAG_DTYPES = {v: k for k, v in _PRECISION_TAGS.items()}
_TAG_FORMATS = {0: "<f4", 1: "<f8"}


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class PadSpec:
    """Padding for a 1-D convolution.

    ``mode="causal"`` puts all padding on the left so output frame ``t`` only
    sees inputs ``<= t``; ``"symmetric"`` splits it, extra sample on the right.
    ``total=None`` means "whatever keeps the length at stride 1", i.e.
    ``dilation * (K - 1)``.
    """

    mode: str = "causal"
    total: int | None = None

    def amounts(self, kernel_size: int, dilation: int = 1) -> tuple[int, int]:
        total = dilation * (kernel_size - 1) if self.total is None else self.total
        if total < 0:
            raise ShapeError(f"negative padding {total}")
        if self.mode == "causal":
            return total, 0
        if self.mode == "symmetric":
            return total // 2, total - total // 2
        if self.mode == "none":
            return 0, 0
        raise ValueError(f"unknown pad mode {self.mode!r}")


NO_PAD = PadSpec("none", 0)


def conv_out_length(t: int, kernel_size: int, stride: int = 1, dilation: int = 1, pad_total: int = 0) -> int:
    return (t + pad_total - dilation * (kernel_size - 1) - 1) // stride + 1


def _check_finite(t: torch.Tensor, what: str) -> torch.Tensor:
    if not torch.isfinite(t).all():
        raise NonFiniteError(f"non-finite values produced by {what}")
    return t


def conv1d(x: torch.Tensor, kernel: torch.Tensor, bias: torch.Tensor | None = None, stride: int = 1,
           dilation: int = 1, pad: PadSpec = NO_PAD) -> torch.Tensor:
    """1-D convolution over ``C_in x T`` (or ``B x C_in x T``) input.

    >>> conv1d(torch.tensor([[1., 2., 3.]]), torch.ones(1, 1, 2)).tolist()
    [[3.0, 5.0]]
    """
    if stride < 1 or dilation < 1:
        raise ShapeError(f"stride and dilation must be >= 1, got stride={stride} dilation={dilation}")
    if kernel.dim() != 3:
        raise ShapeError(f"kernel must be C_out x C_in x K, got shape {tuple(kernel.shape)}")
    unbatched = x.dim() == 2
    if unbatched:
        x = x.unsqueeze(0)
    if x.dim() != 3:
        raise ShapeError(f"input must be C x T or B x C x T, got shape {tuple(x.shape)}")
    if x.shape[1] != kernel.shape[1]:
        raise ShapeError(
            f"input has {x.shape[1]} channels but kernel expects {kernel.shape[1]} "
            f"(input {tuple(x.shape)}, kernel {tuple(kernel.shape)})")
    left, right = pad.amounts(kernel.shape[2], dilation)
    if left or right:
        x = F.pad(x, (left, right))
    if x.shape[-1] < dilation * (kernel.shape[2] - 1) + 1:
        raise ShapeError(f"sequence of length {x.shape[-1]} too short for kernel {kernel.shape[2]} "
                         f"at dilation {dilation}")
    out = F.conv1d(x, kernel, bias, stride=stride, dilation=dilation)
    return out[0] if unbatched else out


def conv_transpose1d(x: torch.Tensor, kernel: torch.Tensor, bias: torch.Tensor | None = None,
                     stride: int = 1, trim: PadSpec = NO_PAD) -> torch.Tensor:
    """Transposed convolution; ``kernel`` is ``C_in x C_out x K``.

    ``trim`` removes samples from the raw ``(T - 1) * stride + K`` output the
    same way ``PadSpec`` adds them, so a causal down-by-s conv with kernel 2s
    and a causal up-by-s transposed conv with ``trim.total = K - s`` restore
    the original length.
    """
    unbatched = x.dim() == 2
    if unbatched:
        x = x.unsqueeze(0)
    if x.shape[1] != kernel.shape[0]:
        raise ShapeError(
            f"input has {x.shape[1]} channels but transposed kernel expects {kernel.shape[0]} "
            f"(input {tuple(x.shape)}, kernel {tuple(kernel.shape)})")
    out = F.conv_transpose1d(x, kernel, bias, stride=stride)
    left, right = trim.amounts(kernel.shape[2])
    # causal trimming drops the tail: output t must not depend on input frames after t
    if trim.mode == "causal":
        left, right = 0, left
    if left or right:
        out = out[..., left:out.shape[-1] - right]
    return out[0] if unbatched else out


def pointwise(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor | None = None) -> torch.Tensor:
    """1x1 convolution with ``weight`` of shape ``C_out x C_in``."""
    return conv1d(x, weight.unsqueeze(-1), bias)


def channel_split(x: torch.Tensor, parts: int = 2) -> tuple[torch.Tensor, ...]:
    c = x.shape[-2]
    if c % parts:
        raise ShapeError(f"cannot split {c} channels into {parts} equal parts")
    return tuple(torch.split(x, c // parts, dim=-2))


def channel_concat(parts: Sequence[torch.Tensor]) -> torch.Tensor:
    lengths = {p.shape[-1] for p in parts}
    if len(lengths) != 1:
        raise ShapeError(f"cannot concatenate sequences of lengths {sorted(lengths)}")
    return torch.cat(list(parts), dim=-2)


def pad_right(x: torch.Tensor, multiple: int) -> torch.Tensor:
    extra = (-x.shape[-1]) % multiple
    return F.pad(x, (0, extra)) if extra else x


# ---------------------------------------------------------------- gradients


def backprop(output: torch.Tensor, parameters: Iterable[torch.Tensor]) -> None:
    """Write d(output)/d(p) into ``p.grad`` for each parameter.

    Parameters the output does not depend on get an exact zero gradient.
    """
    if output.numel() != 1 or output.dim() > 1:
        raise ShapeError(f"backprop needs a scalar output, got shape {tuple(output.shape)}")
    params = list(parameters)
    live = [p for p in params if p.requires_grad]
    grads = torch.autograd.grad(output.reshape(()), live, allow_unused=True) if live else []
    by_id = {id(p): g for p, g in zip(live, grads)}
    for p in params:
        g = by_id.get(id(p))
        p.grad = torch.zeros_like(p) if g is None else g.detach().clone()


# antisymmetric pairs (k, w): derivative ~ sum w * (f(x + k e) - f(x - k e)) / e, which is
# exactly zero when the loss does not move
_STENCILS = {2: ((1, 0.5),), 4: ((1, 2.0 / 3.0), (2, -1.0 / 12.0))}


def finite_difference_check(loss_fn: Callable[[], torch.Tensor], parameters: Sequence[torch.Tensor],
                            epsilon: float = 1e-6, samples_per_param: int = 4,
                            generator: torch.Generator | None = None, order: int = 2) -> float:
    """Max relative error between autograd and central differences.

    ``loss_fn`` is called with no arguments and must be deterministic (it is
    evaluated twice up front and the two values compared bit-for-bit).  Up to
    ``samples_per_param`` coordinates per parameter are probed.  ``order``
    selects the symmetric stencil: 2 is ``(f(x+e) - f(x-e)) / 2e``, 4 the
    five-point rule, whose O(e^4) truncation error allows a larger step and
    so less roundoff when the loss is large compared with a gradient entry.
    """
    if not epsilon > 0:
        raise ValueError(f"epsilon must be positive, got {epsilon}")
    if order not in _STENCILS:
        raise ValueError(f"order must be one of {sorted(_STENCILS)}, got {order}")
    stencil = _STENCILS[order]
    params = list(parameters)
    for p in params:
        if p.dtype != torch.float64:
            raise TypeError("finite differences need float64 parameters")
    first = loss_fn()
    second = loss_fn()
    if first.item() != second.item():
        raise RuntimeError(f"loss_fn is not deterministic: {first.item()!r} != {second.item()!r}")
    backprop(first, params)
    analytic = [p.grad.clone() for p in params]
    gen = generator or torch.Generator().manual_seed(0)
    worst = 0.0
    with torch.no_grad():
        for p, g in zip(params, analytic):
            flat = p.view(-1)
            n = flat.numel()
            if n <= samples_per_param:
                idx = range(n)
            else:
                idx = torch.randperm(n, generator=gen)[:samples_per_param].tolist()
            for i in idx:
                orig = flat[i].item()
                cd = 0.0
                for step, weight in stencil:
                    flat[i] = orig + step * epsilon
                    up = loss_fn().item()
                    flat[i] = orig - step * epsilon
                    cd += weight * (up - loss_fn().item())
                flat[i] = orig
                cd /= epsilon
                a = g.view(-1)[i].item()
                err = abs(a - cd) / max(abs(a), abs(cd), 1e-8)
                worst = max(worst, err)
    return worst


# -------------------------------------------------------------- checkpoints


def config_hash(config: Mapping) -> bytes:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).digest()[:8]


def checkpoint_digest(blob: bytes) -> bytes:
    """First 8 bytes of SHA-256 over the checkpoint file bytes."""
    return hashlib.sha256(blob).digest()[:8]


def dump_checkpoint(state: Mapping[str, torch.Tensor], config: Mapping) -> bytes:
    """Serialize named tensors.

    Layout (little endian): magic, 8-byte config hash, u32 config-JSON length
    and bytes, u32 record count, then per record: u16 name length, name,
    u8 precision tag, u8 rank, rank x u32 dims, raw values.
    """
    buf = io.BytesIO()
    cfg = json.dumps(config, sort_keys=True, separators=(",", ":")).encode()
    buf.write(CKPT_MAGIC)
    buf.write(config_hash(config))
    buf.write(struct.pack("<I", len(cfg)))
    buf.write(cfg)
    buf.write(struct.pack("<I", len(state)))
    for name, t in state.items():
        t = t.detach().cpu().contiguous()
        if t.dtype not in _PRECISION_TAGS:
            raise CheckpointError(f"{name}: unsupported dtype {t.dtype}")
        tag = _PRECISION_TAGS[t.dtype]
        raw = name.encode()
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<BB", tag, t.dim()))
        buf.write(struct.pack(f"<{t.dim()}I", *t.shape))
        buf.write(t.numpy().astype(_TAG_FORMATS[tag], copy=False).tobytes())
    return buf.getvalue()


def load_checkpoint(blob: bytes) -> tuple[dict, dict[str, torch.Tensor]]:
    """Inverse of :func:`dump_checkpoint`; returns ``(config, tensors)``."""
    import numpy as np

    view = memoryview(blob)
    if bytes(view[:8]) != CKPT_MAGIC:
        raise CheckpointError("bad checkpoint magic")
    pos = 8
    try:
        chash = bytes(view[pos:pos + 8])
        pos += 8
        (n,) = struct.unpack_from("<I", view, pos)
        pos += 4
        config = json.loads(bytes(view[pos:pos + n]).decode())
        pos += n
        if config_hash(config) != chash:
            raise CheckpointError("checkpoint config hash mismatch")
        (count,) = struct.unpack_from("<I", view, pos)
        pos += 4
        tensors: dict[str, torch.Tensor] = {}
        for _ in range(count):
            (ln,) = struct.unpack_from("<H", view, pos)
            pos += 2
            name = bytes(view[pos:pos + ln]).decode()
            pos += ln
            tag, rank = struct.unpack_from("<BB", view, pos)
            pos += 2
            dims = struct.unpack_from(f"<{rank}I", view, pos)
            pos += 4 * rank
            if tag not in _TAG_DTYPES:
                raise CheckpointError(f"{name}: unknown precision tag {tag}")
            count_el = 1
            for d in dims:
                count_el *= d
            nbytes = count_el * (4 if tag == 0 else 8)
            if pos + nbytes > len(view):
                raise CheckpointError(f"{name}: truncated tensor data")
            arr = np.frombuffer(view[pos:pos + nbytes], dtype=_TAG_FORMATS[tag]).reshape(dims)
            pos += nbytes
            tensors[name] = torch.from_numpy(arr.copy())
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint: {exc}") from exc
    if pos != len(view):
        raise CheckpointError(f"{len(view) - pos} trailing bytes in checkpoint")
    return config, tensors


def named_parameters(module: nn.Module) -> dict[str, nn.Parameter]:
    return dict(module.named_parameters())
