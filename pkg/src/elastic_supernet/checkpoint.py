"""EAVT1 checkpoint format.

A plain-text header followed by little-endian float32 payloads::

    EAVT1
    spec.<field>=<value>          one line per BackboneSpec field
    meta.<key>=<value>            free-form string metadata
    tensor <name> <d0>x<d1>... <offset> <nbytes>
    end
    <payload bytes, tensors in declaration order>

Offsets are relative to the first payload byte.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .backbone import BackboneSpec, ElasticParams, param_shapes
from .errors import DataFormatError

MAGIC = "EAVT1"


def save(path, spec: BackboneSpec, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    lines = [MAGIC]
    for k, v in spec.to_dict().items():
        lines.append(f"spec.{k}={json.dumps(v)}")
    for k, v in (meta or {}).items():
        lines.append(f"meta.{k}={json.dumps(v)}")
    offset = 0
    payload = []
    for name, arr in arrays.items():
        buf = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        dims = "x".join(str(d) for d in arr.shape) or "scalar"
        lines.append(f"tensor {name} {dims} {offset} {len(buf)}")
        payload.append(buf)
        offset += len(buf)
    lines.append("end")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(("\n".join(lines) + "\n").encode("ascii"))
        for buf in payload:
            f.write(buf)


def load(path) -> tuple[BackboneSpec, dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    if not raw.startswith((MAGIC + "\n").encode()):
        raise DataFormatError(f"{path}: bad magic (offset 0), expected {MAGIC}")
    end = raw.find(b"\nend\n")
    if end < 0:
        raise DataFormatError(f"{path}: header terminator not found")
    header = raw[: end].decode("ascii").split("\n")[1:]
    data_start = end + len(b"\nend\n")
    spec_fields, meta, entries = {}, {}, []
    for line in header:
        if line.startswith("spec."):
            k, v = line[5:].split("=", 1)
            spec_fields[k] = json.loads(v)
        elif line.startswith("meta."):
            k, v = line[5:].split("=", 1)
            meta[k] = json.loads(v)
        elif line.startswith("tensor "):
            _, name, dims, off, nbytes = line.split()
            shape = () if dims == "scalar" else tuple(int(d) for d in dims.split("x"))
            entries.append((name, shape, int(off), int(nbytes)))
        else:
            raise DataFormatError(f"{path}: unparseable header line {line!r}")
    spec = BackboneSpec.from_dict(spec_fields)
    arrays = {}
    for name, shape, off, nbytes in entries:
        lo = data_start + off
        if lo + nbytes > len(raw):
            raise DataFormatError(f"{path}: tensor {name} truncated at byte offset {lo}")
        arr = np.frombuffer(raw[lo: lo + nbytes], dtype="<f4").reshape(shape)
        arrays[name] = arr.astype(np.float64)
    return spec, arrays, meta


def save_params(path, params: ElasticParams, extra: dict[str, np.ndarray] | None = None, meta=None) -> None:
    arrays = dict(params.arrays())
    arrays.update(extra or {})
    save(path, params.spec, arrays, meta)


def load_params(path) -> tuple[ElasticParams, dict[str, np.ndarray], dict]:
    """Supernet parameters plus any extra tensors stored alongside them."""
    spec, arrays, meta = load(path)
    names = param_shapes(spec)
    missing = [k for k in names if k not in arrays]
    if missing:
        raise DataFormatError(f"{path}: missing tensors {missing[:3]}")
    params = ElasticParams.from_arrays(spec, arrays)
    extra = {k: v for k, v in arrays.items() if k not in names}
    return params, extra, meta
