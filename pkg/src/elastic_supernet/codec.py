"""Bit layout shared by search genomes and router gates.

    [k_max embedding bits]
    per layer l: [n_ratio ratio bits][H_max head bits]
    [L attention-keep bits][L mlp-keep bits]

Decoding is by population count per field, so any permutation of bits inside
a field decodes to the same config.  The canonical encoding of a config sets
the lowest-index bits of each field, mirroring the nested unit order.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .backbone import BackboneSpec, SubmodelConfig
from .errors import DataFormatError


@dataclass(frozen=True)
class BitLayout:
    k_max: int
    L: int
    n_ratio: int
    H_max: int

    @classmethod
    def for_spec(cls, spec: BackboneSpec) -> "BitLayout":
        return cls(spec.k_max, spec.L, spec.n_ratio, spec.H_max)

    @property
    def per_layer(self) -> int:
        return self.n_ratio + self.H_max

    @property
    def length(self) -> int:
        return self.k_max + self.L * self.per_layer + 2 * self.L

    def emb(self) -> slice:
        return slice(0, self.k_max)

    def ratio(self, l: int) -> slice:
        lo = self.k_max + l * self.per_layer
        return slice(lo, lo + self.n_ratio)

    def heads(self, l: int) -> slice:
        lo = self.k_max + l * self.per_layer + self.n_ratio
        return slice(lo, lo + self.H_max)

    def mha(self) -> slice:
        lo = self.k_max + self.L * self.per_layer
        return slice(lo, lo + self.L)

    def mlp(self) -> slice:
        lo = self.k_max + self.L * self.per_layer + self.L
        return slice(lo, lo + self.L)


def decode(bits, spec: BackboneSpec) -> SubmodelConfig:
    bits = np.asarray(bits).astype(bool)
    lay = BitLayout.for_spec(spec)
    if bits.shape != (lay.length,):
        raise DataFormatError(f"bit string of length {bits.size}, expected {lay.length}")
    k = min(max(int(bits[lay.emb()].sum()), spec.k_min), spec.k_max)
    r_lo = int(round(spec.R_min / spec.R_step))
    R = tuple(max(int(bits[lay.ratio(l)].sum()), 1, r_lo) * spec.R_step for l in range(spec.L))
    H = tuple(min(max(int(bits[lay.heads(l)].sum()), spec.H_min), spec.H_max) for l in range(spec.L))
    return SubmodelConfig(R, H, k * spec.d_head, tuple(bits[lay.mlp()]), tuple(bits[lay.mha()]))


def encode(cfg: SubmodelConfig, spec: BackboneSpec) -> np.ndarray:
    """Canonical 0/1 vector of ``cfg``: a prefix of ones in every count field."""
    lay = BitLayout.for_spec(spec)
    out = np.zeros(lay.length, dtype=np.uint8)
    out[: cfg.E // spec.d_head] = 1
    for l in range(spec.L):
        r = lay.ratio(l)
        out[r.start: r.start + int(round(cfg.R[l] / spec.R_step))] = 1
        h = lay.heads(l)
        out[h.start: h.start + cfg.H[l]] = 1
    out[lay.mha()] = cfg.D_mha
    out[lay.mlp()] = cfg.D_mlp
    return out


def to_hex(bits) -> str:
    return np.packbits(np.asarray(bits, dtype=np.uint8)).tobytes().hex()


def from_hex(text: str, length: int) -> np.ndarray:
    try:
        raw = bytes.fromhex(text)
    except ValueError:
        raise DataFormatError(f"genome {text!r} is not hexadecimal") from None
    if len(raw) != (length + 7) // 8:
        raise DataFormatError(f"genome {text!r} holds {8 * len(raw)} bits, expected {length}")
    return np.unpackbits(np.frombuffer(raw, dtype=np.uint8))[:length]
