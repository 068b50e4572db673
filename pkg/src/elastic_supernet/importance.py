"""Activation-L1 importance scoring and importance-ordered rearrangement."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np

from . import numerics as nx
from .backbone import ElasticParams, SubmodelConfig, build_submodel, forward
from .errors import ConfigError, DataFormatError


@dataclass
class ImportanceReport:
    emb_scores: np.ndarray
    mlp_scores: list
    head_scores: list
    sample_count: int


@dataclass
class PermutationRecord:
    emb: np.ndarray
    mlp: list
    heads: list

    def inverse(self) -> "PermutationRecord":
        inv = lambda p: np.argsort(p, kind="stable")
        return PermutationRecord(inv(self.emb), [inv(p) for p in self.mlp], [inv(p) for p in self.heads])

    def audit_text(self) -> str:
        fmt = lambda p: " ".join(str(int(i)) for i in p)
        lines = [f"embedding {fmt(self.emb)}"]
        lines += [f"mlp.{l} {fmt(p)}" for l, p in enumerate(self.mlp)]
        lines += [f"heads.{l} {fmt(p)}" for l, p in enumerate(self.heads)]
        return "\n".join(lines) + "\n"


def _batches(data, n: int) -> Iterable[np.ndarray]:
    if isinstance(data, np.ndarray):
        data = [data]
    taken = 0
    for batch in data:
        batch = np.asarray(batch)
        if taken + len(batch) > n:
            batch = batch[: n - taken]
        if len(batch):
            yield batch
            taken += len(batch)
        if taken >= n:
            break


def score_importance(params: ElasticParams, data, n: int, batch_size: int = 256) -> ImportanceReport:
    """Sum of per-unit activation L1 norms over ``n`` samples of the full model.

    ``data`` is an array of samples (B, N, in_dim) or an iterable of such batches.
    """
    if n < 1:
        raise DataFormatError("importance scoring needs n >= 1 samples")
    spec = params.spec
    view = build_submodel(params, SubmodelConfig.maximal(spec))
    emb = np.zeros(spec.E_max)
    mlp = [np.zeros(spec.hid_max) for _ in range(spec.L)]
    heads = [np.zeros(spec.H_max) for _ in range(spec.L)]
    count = 0
    if isinstance(data, np.ndarray):
        data = [data[i: i + batch_size] for i in range(0, len(data), batch_size)]
    with nx.no_grad():
        for batch in _batches(data, n):
            rec = {}
            forward(view, batch, record=rec)
            emb += rec["emb"]
            for l in range(spec.L):
                mlp[l] += rec["mlp", l]
                heads[l] += rec["head", l]
            count += len(batch)
    if count == 0:
        raise DataFormatError("importance scoring received an empty sample stream")
    return ImportanceReport(emb, mlp, heads, count)


def _order(scores: np.ndarray) -> np.ndarray:
    # descending score, ties by ascending original index
    return np.argsort(-np.asarray(scores), kind="stable")


def _head_columns(perm: np.ndarray, d_head: int) -> np.ndarray:
    return (perm[:, None] * d_head + np.arange(d_head)[None, :]).reshape(-1)


def permute_params(params: ElasticParams, rec: PermutationRecord) -> ElasticParams:
    """Apply the unit permutations; new unit i is old unit ``perm[i]``."""
    spec = params.spec
    pe = rec.emb
    a = {k: v.copy() for k, v in params.arrays().items()}
    a["embed"] = a["embed"][:, pe]
    a["cls"] = a["cls"][pe]
    a["pos"] = a["pos"][:, pe]
    for name in ("ln_f_g", "ln_f_b"):
        a[name] = a[name][pe]
    a["head"] = a["head"][pe, :]
    for l in range(spec.L):
        p = f"blocks.{l}."
        hc = _head_columns(rec.heads[l], spec.d_head)
        pm = rec.mlp[l]
        for w in ("wq", "wk", "wv"):
            a[p + w] = a[p + w][pe, :][:, hc]
        a[p + "wo"] = a[p + "wo"][hc, :][:, pe]
        for name in ("ln1_g", "ln1_b", "ln2_g", "ln2_b", "b2"):
            a[p + name] = a[p + name][pe]
        a[p + "w1"] = a[p + "w1"][pe, :][:, pm]
        a[p + "b1"] = a[p + "b1"][pm]
        a[p + "w2"] = a[p + "w2"][pm, :][:, pe]
    return ElasticParams.from_arrays(spec, a)


def rearrange(params: ElasticParams, report: ImportanceReport) -> tuple[ElasticParams, PermutationRecord]:
    spec = params.spec
    if (report.emb_scores.shape != (spec.E_max,)
            or len(report.mlp_scores) != spec.L or len(report.head_scores) != spec.L
            or any(s.shape != (spec.hid_max,) for s in report.mlp_scores)
            or any(s.shape != (spec.H_max,) for s in report.head_scores)):
        raise ConfigError("importance report does not match the parameter shapes")
    rec = PermutationRecord(
        emb=_order(report.emb_scores),
        mlp=[_order(s) for s in report.mlp_scores],
        heads=[_order(s) for s in report.head_scores],
    )
    return permute_params(params, rec), rec
