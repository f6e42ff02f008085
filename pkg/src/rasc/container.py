"""``.rasc`` bitstream container.

Little-endian layout::

    magic "RASC0001" | model hash (8) | u32 sample_rate | u32 n_samples
    | u32 n_frames | u8 lambda index (255 = custom) | u16 n_fft | u16 hop
    | u32 z length | z bytes | u8 slice count | slice count x u32 length
    | slice bytes, concatenated
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field

MAGIC = b"RASC0001"
LAMBDA_GRID = (0.25, 0.8, 2.0, 5.5, 9.0, 18.0)
CUSTOM_LAMBDA = 255

_HEAD = struct.Struct("<8s8sIIIBHH")


class ContainerError(ValueError):
    pass


def lambda_index(lam: float | None) -> int:
    if lam is None:
        return CUSTOM_LAMBDA
    for i, v in enumerate(LAMBDA_GRID):
        if abs(v - lam) < 1e-9:
            return i
    return CUSTOM_LAMBDA


@dataclass
class BitstreamContainer:
    model_hash: bytes
    sample_rate: int
    n_samples: int
    n_frames: int
    lambda_index: int
    n_fft: int
    hop: int
    z_stream: bytes = b""
    slice_streams: list = field(default_factory=list)

    @property
    def header_bytes(self) -> int:
        return _HEAD.size + 4 + 1 + 4 * len(self.slice_streams)

    @property
    def payload_bits(self) -> int:
        return 8 * (len(self.z_stream) + sum(len(s) for s in self.slice_streams))

    def section_bits(self) -> dict:
        out = {"header": 8 * self.header_bytes, "z": 8 * len(self.z_stream)}
        for i, s in enumerate(self.slice_streams):
            out[f"slice{i}"] = 8 * len(s)
        return out

    def serialize(self) -> bytes:
        if len(self.model_hash) != 8:
            raise ContainerError("model hash must be 8 bytes")
        parts = [_HEAD.pack(MAGIC, self.model_hash, self.sample_rate, self.n_samples, self.n_frames,
                            self.lambda_index, self.n_fft, self.hop),
                 struct.pack("<I", len(self.z_stream)), self.z_stream,
                 struct.pack("<B", len(self.slice_streams))]
        parts += [struct.pack("<I", len(s)) for s in self.slice_streams]
        parts += list(self.slice_streams)
        return b"".join(parts)

    @classmethod
    def parse(cls, blob: bytes, expected_hash: bytes | None = None) -> "BitstreamContainer":
        if len(blob) < _HEAD.size or blob[:8] != MAGIC:
            raise ContainerError("not a RASC0001 container (bad magic)")
        try:
            magic, h, sr, ns, nf, li, n_fft, hop = _HEAD.unpack_from(blob, 0)
            pos = _HEAD.size
            (zlen,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            z = blob[pos:pos + zlen]
            if len(z) != zlen:
                raise ContainerError("truncated z stream")
            pos += zlen
            (s,) = struct.unpack_from("<B", blob, pos)
            pos += 1
            lens = struct.unpack_from(f"<{s}I", blob, pos)
            pos += 4 * s
        except struct.error as exc:
            raise ContainerError(f"truncated container header: {exc}") from exc
        slices = []
        for n in lens:
            chunk = blob[pos:pos + n]
            if len(chunk) != n:
                raise ContainerError("truncated slice stream")
            slices.append(chunk)
            pos += n
        if pos != len(blob):
            raise ContainerError(f"{len(blob) - pos} trailing bytes after last slice stream")
        if expected_hash is not None and h != expected_hash:
            raise ContainerError(f"model hash mismatch: stream {h.hex()} vs checkpoint {expected_hash.hex()}")
        return cls(h, sr, ns, nf, li, n_fft, hop, z, slices)
