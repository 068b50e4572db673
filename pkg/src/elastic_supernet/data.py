"""Datasets: seeded Gaussian token blobs and IDX image files.

Samples are token sequences of shape (N, in_dim).  Token 0 is an all-zero
placeholder that the model replaces with its class token.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataFormatError


@dataclass
class Dataset:
    train_x: np.ndarray
    train_y: np.ndarray
    val_x: np.ndarray
    val_y: np.ndarray
    num_classes: int

    @property
    def N(self) -> int:
        return self.train_x.shape[1]

    @property
    def in_dim(self) -> int:
        return self.train_x.shape[2]

    def minibatch(self, rng: np.random.Generator, size: int) -> tuple[np.ndarray, np.ndarray]:
        idx = rng.integers(0, len(self.train_y), size=size)
        return self.train_x[idx], self.train_y[idx]


@dataclass
class BlobSpec:
    classes: int = 4
    samples: int = 2048
    tokens: int = 9
    dim: int = 16
    noise: float = 2.0
    class_shift: float = 0.1
    val_fraction: float = 0.25
    seed: int = 0
    modes: int = 1


def split(x: np.ndarray, y: np.ndarray, val_fraction: float, num_classes: int, seed: int) -> Dataset:
    if not 0.0 < val_fraction < 1.0:
        raise ConfigError(f"val_fraction must be in (0, 1), got {val_fraction}")
    order = np.random.default_rng(seed).permutation(len(y))
    n_val = max(1, int(round(val_fraction * len(y))))
    va, tr = order[:n_val], order[n_val:]
    if len(tr) == 0:
        raise ConfigError("no training samples left after the validation split")
    return Dataset(x[tr], y[tr], x[va], y[va], num_classes)


def generate_blobs(spec: BlobSpec) -> Dataset:
    """Class-balanced token sequences around per-class positional templates.

    Each class is a mixture of ``modes`` clusters, each cluster a template
    vector per token position.  Templates are centred over positions so the
    mean token only carries the weak ``class_shift`` offset: a model has to
    attend across positions, and more modes need more capacity.
    """
    if spec.classes < 2:
        raise ConfigError("blobs need at least 2 classes")
    if spec.samples < spec.classes or spec.tokens < 2 or spec.dim < 1 or spec.modes < 1:
        raise ConfigError(f"degenerate blob spec: {spec}")
    rng = np.random.default_rng(spec.seed)
    n_pos = spec.tokens - 1
    templates = rng.normal(size=(spec.classes, spec.modes, n_pos, spec.dim))
    templates -= templates.mean(axis=2, keepdims=True)
    offsets = rng.normal(scale=spec.class_shift, size=(spec.classes, 1, spec.dim))
    y = rng.permutation(np.arange(spec.samples) % spec.classes)
    mode = rng.integers(0, spec.modes, size=spec.samples)
    body = templates[y, mode] + offsets[y] + spec.noise * rng.normal(size=(spec.samples, n_pos, spec.dim))
    x = np.concatenate([np.zeros((spec.samples, 1, spec.dim)), body], axis=1)
    return split(x, y.astype(np.int64), spec.val_fraction, spec.classes, spec.seed + 1)


# ---------------------------------------------------------------------------
# IDX files

_IDX_TYPES = {0x08: ">u1", 0x09: ">i1", 0x0B: ">i2", 0x0C: ">i4", 0x0D: ">f4", 0x0E: ">f8"}


def read_idx(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise DataFormatError(f"{path}: file too short for an IDX header (offset 0)")
    zero, dtype_code, ndim = raw[0:2], raw[2], raw[3]
    if zero != b"\x00\x00" or dtype_code not in _IDX_TYPES:
        raise DataFormatError(f"{path}: bad IDX magic at offset 0: {raw[:4].hex()}")
    head = 4 + 4 * ndim
    if len(raw) < head:
        raise DataFormatError(f"{path}: truncated dimension list at offset 4")
    dims = struct.unpack(f">{ndim}I", raw[4:head])
    dt = np.dtype(_IDX_TYPES[dtype_code])
    need = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
    if len(raw) - head < need:
        raise DataFormatError(f"{path}: payload truncated at offset {len(raw)}, need {head + need} bytes")
    return np.frombuffer(raw[head: head + need], dtype=dt).reshape(dims)


def patchify(images: np.ndarray, patch: int) -> np.ndarray:
    """(B, S, S) images -> (B, (S/patch)^2 + 1, patch^2) tokens, placeholder first."""
    if images.ndim != 3 or images.shape[1] != images.shape[2] or images.shape[1] % patch:
        raise DataFormatError(f"images of shape {images.shape} cannot be cut into {patch}x{patch} patches")
    b, s, _ = images.shape
    g = s // patch
    p = images.reshape(b, g, patch, g, patch).transpose(0, 1, 3, 2, 4).reshape(b, g * g, patch * patch)
    return np.concatenate([np.zeros((b, 1, patch * patch)), p], axis=1)


def load_idx(image_path, label_path, patch_size: int, val_fraction: float = 0.2, seed: int = 0) -> Dataset:
    images = read_idx(image_path)
    labels = read_idx(label_path)
    if labels.ndim != 1 or len(labels) != len(images):
        raise DataFormatError(f"{label_path}: {labels.shape} labels for {len(images)} images")
    scale = 255.0 if images.dtype == np.uint8 else max(float(np.abs(images).max()), 1.0)
    x = patchify(images.astype(np.float64) / scale, patch_size)
    y = labels.astype(np.int64)
    return split(x, y, val_fraction, int(y.max()) + 1, seed)
