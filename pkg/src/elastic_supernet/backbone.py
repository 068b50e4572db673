"""Nested elastic transformer: weight store, submodel slicing, forward, MACs.

Every elastic axis follows the same convention: lower indices are the more
important units, and a submodel of width ``w`` uses exactly indices ``[0, w)``.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import numerics as nx
from .errors import ConfigError
from .numerics import Tensor


def _is_multiple(x: float, step: float) -> bool:
    q = x / step
    return abs(q - round(q)) < 1e-9


@dataclass(frozen=True)
class BackboneSpec:
    L: int
    E_max: int
    d_head: int
    H_max: int
    R_max: float
    N: int
    num_classes: int
    E_min: int
    H_min: int
    R_min: float
    R_step: float = 0.5
    in_dim: int = 16
    ln_eps: float = 1e-6

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.L < 1 or self.N < 1 or self.num_classes < 1 or self.in_dim < 1:
            raise ConfigError("L, N, num_classes and in_dim must be positive")
        if self.d_head < 1 or self.E_max % self.d_head or self.E_min % self.d_head:
            raise ConfigError(f"E_max={self.E_max} and E_min={self.E_min} must be multiples of d_head={self.d_head}")
        if not 1 <= self.E_min // self.d_head <= self.E_max // self.d_head:
            raise ConfigError(f"need d_head <= E_min <= E_max, got E_min={self.E_min}, E_max={self.E_max}")
        if not 1 <= self.H_min <= self.H_max:
            raise ConfigError(f"need 1 <= H_min <= H_max, got {self.H_min}, {self.H_max}")
        if not (self.R_step > 0 and 0 < self.R_min <= self.R_max):
            raise ConfigError(f"need 0 < R_min <= R_max and R_step > 0, got {self.R_min}, {self.R_max}, {self.R_step}")
        if not (_is_multiple(self.R_max, self.R_step) and _is_multiple(self.R_min, self.R_step)):
            raise ConfigError("R_min and R_max must be multiples of R_step")

    @property
    def k_max(self) -> int:
        return self.E_max // self.d_head

    @property
    def k_min(self) -> int:
        return self.E_min // self.d_head

    @property
    def n_ratio(self) -> int:
        return int(round(self.R_max / self.R_step))

    @property
    def hid_max(self) -> int:
        return int(round(self.R_max * self.E_max))

    @property
    def ratio_choices(self) -> list[float]:
        lo = int(round(self.R_min / self.R_step))
        return [i * self.R_step for i in range(lo, self.n_ratio + 1)]

    @property
    def width_choices(self) -> list[int]:
        return [k * self.d_head for k in range(self.k_min, self.k_max + 1)]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "BackboneSpec":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown backbone fields: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class SubmodelConfig:
    R: tuple
    H: tuple
    E: int
    D_mlp: tuple
    D_mha: tuple

    def __post_init__(self):
        object.__setattr__(self, "R", tuple(float(r) for r in self.R))
        object.__setattr__(self, "H", tuple(int(h) for h in self.H))
        object.__setattr__(self, "E", int(self.E))
        object.__setattr__(self, "D_mlp", tuple(bool(d) for d in self.D_mlp))
        object.__setattr__(self, "D_mha", tuple(bool(d) for d in self.D_mha))

    @classmethod
    def maximal(cls, spec: BackboneSpec) -> "SubmodelConfig":
        L = spec.L
        return cls((spec.R_max,) * L, (spec.H_max,) * L, spec.E_max, (True,) * L, (True,) * L)

    def hidden(self, layer: int) -> int:
        # round() is ties-to-even
        return int(round(self.R[layer] * self.E))

    def validate(self, spec: BackboneSpec) -> None:
        L = spec.L
        for name in ("R", "H", "D_mlp", "D_mha"):
            if len(getattr(self, name)) != L:
                raise ConfigError(f"{name} has {len(getattr(self, name))} entries, expected L={L}")
        if not (spec.E_min <= self.E <= spec.E_max) or self.E % spec.d_head:
            raise ConfigError(f"axis E: {self.E} outside [{spec.E_min}, {spec.E_max}] or not a multiple of {spec.d_head}")
        for l, (r, h) in enumerate(zip(self.R, self.H)):
            if not (spec.R_min - 1e-9 <= r <= spec.R_max + 1e-9) or not _is_multiple(r, spec.R_step):
                raise ConfigError(f"axis R, layer {l}: {r} outside [{spec.R_min}, {spec.R_max}] step {spec.R_step}")
            if not spec.H_min <= h <= spec.H_max:
                raise ConfigError(f"axis H, layer {l}: {h} outside [{spec.H_min}, {spec.H_max}]")

    def summary(self) -> str:
        r = ",".join(f"{x:g}" for x in self.R)
        h = ",".join(str(x) for x in self.H)
        d = "".join(f"{int(a)}{int(b)}" for a, b in zip(self.D_mha, self.D_mlp))
        return f"E={self.E} R=[{r}] H=[{h}] D={d}"


# ---------------------------------------------------------------------------
# parameter store

_BLOCK_KEYS = ("wq", "wk", "wv", "wo", "ln1_g", "ln1_b", "ln2_g", "ln2_b", "w1", "b1", "w2", "b2")


def param_shapes(spec: BackboneSpec) -> dict[str, tuple]:
    E, Hd, hid = spec.E_max, spec.H_max * spec.d_head, spec.hid_max
    shapes = {"embed": (spec.in_dim, E), "cls": (E,), "pos": (spec.N, E)}
    for l in range(spec.L):
        p = f"blocks.{l}."
        shapes.update({
            p + "wq": (E, Hd), p + "wk": (E, Hd), p + "wv": (E, Hd), p + "wo": (Hd, E),
            p + "ln1_g": (E,), p + "ln1_b": (E,), p + "ln2_g": (E,), p + "ln2_b": (E,),
            p + "w1": (E, hid), p + "b1": (hid,), p + "w2": (hid, E), p + "b2": (E,),
        })
    shapes.update({"ln_f_g": (E,), "ln_f_b": (E,), "head": (E, spec.num_classes), "head_bias": (spec.num_classes,)})
    return shapes


class ElasticParams:
    """All supernet weights, keyed by name, in declaration order."""

    def __init__(self, spec: BackboneSpec, tensors: dict[str, Tensor]):
        expected = param_shapes(spec)
        if list(tensors) != list(expected):
            missing = set(expected) - set(tensors)
            raise ConfigError(f"parameter set mismatch; missing {sorted(missing)[:5]}")
        for k, t in tensors.items():
            if t.shape != expected[k]:
                raise ConfigError(f"{k}: shape {t.shape}, expected {expected[k]}")
        self.spec = spec
        self.tensors = tensors

    @classmethod
    def init(cls, spec: BackboneSpec, seed: int = 0, std: float = 0.02) -> "ElasticParams":
        rng = np.random.default_rng(seed)
        tensors = {}
        for name, shape in param_shapes(spec).items():
            leaf = name.rsplit(".", 1)[-1]
            if leaf.endswith("_g"):
                data = np.ones(shape)
            elif leaf.endswith("_b") or leaf in ("b1", "b2", "head_bias"):
                data = np.zeros(shape)
            else:
                data = rng.normal(0.0, std, size=shape)
            tensors[name] = Tensor(data, requires_grad=True, name=name)
        return cls(spec, tensors)

    @classmethod
    def from_arrays(cls, spec: BackboneSpec, arrays: dict[str, np.ndarray]) -> "ElasticParams":
        return cls(spec, {k: Tensor(arrays[k], requires_grad=True, name=k) for k in param_shapes(spec)})

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def block(self, l: int) -> dict[str, Tensor]:
        return {k: self.tensors[f"blocks.{l}.{k}"] for k in _BLOCK_KEYS}

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self.tensors.items()}

    def copy(self) -> "ElasticParams":
        return ElasticParams.from_arrays(self.spec, {k: v.copy() for k, v in self.arrays().items()})

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.zero_grad()

    def parameters(self) -> list[Tensor]:
        return list(self.tensors.values())


# ---------------------------------------------------------------------------
# slicing


@dataclass
class SubmodelView:
    spec: BackboneSpec
    cfg: SubmodelConfig
    embed: Tensor
    cls: Tensor
    pos: Tensor
    blocks: list = field(default_factory=list)
    ln_f_g: Tensor = None
    ln_f_b: Tensor = None
    head: Tensor = None
    head_bias: Tensor = None


def build_submodel(params: ElasticParams, cfg: SubmodelConfig) -> SubmodelView:
    """Top-left slices of every supernet block; gradients flow to the supernet."""
    spec = params.spec
    cfg.validate(spec)
    E, d = cfg.E, spec.d_head
    blocks = []
    for l in range(spec.L):
        b = params.block(l)
        hd, hid = cfg.H[l] * d, cfg.hidden(l)
        blk = {}
        if cfg.D_mha[l]:
            blk.update(wq=b["wq"][:E, :hd], wk=b["wk"][:E, :hd], wv=b["wv"][:E, :hd], wo=b["wo"][:hd, :E],
                       ln1_g=b["ln1_g"][:E], ln1_b=b["ln1_b"][:E])
        if cfg.D_mlp[l]:
            blk.update(w1=b["w1"][:E, :hid], b1=b["b1"][:hid], w2=b["w2"][:hid, :E], b2=b["b2"][:E],
                       ln2_g=b["ln2_g"][:E], ln2_b=b["ln2_b"][:E])
        blocks.append(blk)
    return SubmodelView(
        spec=spec, cfg=cfg,
        embed=params["embed"][:, :E], cls=params["cls"][:E], pos=params["pos"][:, :E],
        blocks=blocks,
        ln_f_g=params["ln_f_g"][:E], ln_f_b=params["ln_f_b"][:E],
        head=params["head"][:E, :], head_bias=params["head_bias"],
    )


# ---------------------------------------------------------------------------
# forward


def _as_input(x, spec: BackboneSpec) -> Tensor:
    x = x if isinstance(x, Tensor) else Tensor(x)
    if x.ndim != 3 or x.shape[1:] != (spec.N, spec.in_dim):
        raise nx.DimensionError(f"input shape {x.shape}, expected (B, {spec.N}, {spec.in_dim})")
    return x


def _token_stem(x: Tensor, embed: Tensor, cls: Tensor, pos: Tensor) -> Tensor:
    n, e = pos.shape
    first = np.zeros((n, 1))
    first[0, 0] = 1.0
    with nx.uncounted():
        h = x @ embed
        cls_row = nx.matmul(Tensor(first), cls.reshape(1, e))
    return h + (pos + cls_row)


def _attention(z: Tensor, wq, wk, wv, wo, n_heads: int, d_head: int, head_mask=None, record=None, layer=0) -> Tensor:
    B, N, _ = z.shape

    def split(t):
        return t.reshape(B, N, n_heads, d_head).permute(0, 2, 1, 3)

    q, k, v = split(z @ wq), split(z @ wk), split(z @ wv)
    scores = (q @ nx.transpose(k)) * (1.0 / math.sqrt(d_head))
    a = nx.softmax_rows(scores) @ v  # B, H, N, d
    if record is not None:
        record["head", layer] = np.abs(a.data).sum(axis=(0, 2, 3))
    if head_mask is not None:
        a = a * head_mask.reshape(1, n_heads, 1, 1)
    merged = a.permute(0, 2, 1, 3).reshape(B, N, n_heads * d_head)
    return merged @ wo


def _classify(h: Tensor, head: Tensor, head_bias: Tensor) -> Tensor:
    with nx.uncounted():
        return h[:, 0, :] @ head + head_bias


def forward(view: SubmodelView, x, record: dict | None = None) -> Tensor:
    """Logits (B x num_classes) of the sliced submodel.

    ``record``, if given, receives per-unit L1 activation sums used for
    importance scoring: final block output per channel, post-GELU hidden
    units per layer and per-head attention outputs per layer.
    """
    spec, cfg = view.spec, view.cfg
    x = _as_input(x, spec)
    h = _token_stem(x, view.embed, view.cls, view.pos)
    eps = spec.ln_eps
    for l, blk in enumerate(view.blocks):
        if cfg.D_mha[l]:
            z = nx.layernorm(h, blk["ln1_g"], blk["ln1_b"], eps)
            h = h + _attention(z, blk["wq"], blk["wk"], blk["wv"], blk["wo"], cfg.H[l], spec.d_head,
                               record=record, layer=l)
        if cfg.D_mlp[l]:
            z = nx.layernorm(h, blk["ln2_g"], blk["ln2_b"], eps)
            act = nx.gelu(z @ blk["w1"] + blk["b1"])
            if record is not None:
                record["mlp", l] = np.abs(act.data).sum(axis=(0, 1))
            h = h + (act @ blk["w2"] + blk["b2"])
    if record is not None:
        record["emb"] = np.abs(h.data).sum(axis=(0, 1))
    h = nx.layernorm(h, view.ln_f_g, view.ln_f_b, eps)
    return _classify(h, view.head, view.head_bias)


@dataclass
class GateMasks:
    """Per-unit multiplicative masks over the full-width supernet.

    emb: (E_max,), hidden[l]: (hid_max,), heads[l]: (H_max,), d_mha[l] and
    d_mlp[l]: shape (1,).  With 0/1 values and prefix-shaped masks the masked
    forward equals the sliced forward of the corresponding config.
    """

    emb: Tensor
    hidden: list
    heads: list
    d_mha: list
    d_mlp: list


def forward_masked(params: ElasticParams, masks: GateMasks, x) -> Tensor:
    spec = params.spec
    x = _as_input(x, spec)
    m = masks.emb
    ln_mask = m.data
    eps = spec.ln_eps
    h = _token_stem(x, params["embed"], params["cls"], params["pos"]) * m
    for l in range(spec.L):
        b = params.block(l)
        z = nx.layernorm(h, b["ln1_g"], b["ln1_b"], eps, mask=ln_mask) * m
        att = _attention(z, b["wq"], b["wk"], b["wv"], b["wo"], spec.H_max, spec.d_head, head_mask=masks.heads[l])
        h = h + att * (m * masks.d_mha[l])
        z = nx.layernorm(h, b["ln2_g"], b["ln2_b"], eps, mask=ln_mask) * m
        act = nx.gelu(z @ b["w1"] + b["b1"]) * masks.hidden[l]
        h = h + (act @ b["w2"] + b["b2"]) * (m * masks.d_mlp[l])
    h = nx.layernorm(h, params["ln_f_g"], params["ln_f_b"], eps, mask=ln_mask) * m
    return _classify(h, params["head"], params["head_bias"])


def config_masks(spec: BackboneSpec, cfg: SubmodelConfig) -> GateMasks:
    """Constant 0/1 masks selecting ``cfg`` inside the full-width supernet."""
    emb = np.zeros(spec.E_max)
    emb[: cfg.E] = 1
    hidden, heads = [], []
    for l in range(spec.L):
        hm = np.zeros(spec.hid_max)
        hm[: cfg.hidden(l)] = 1
        hd = np.zeros(spec.H_max)
        hd[: cfg.H[l]] = 1
        hidden.append(Tensor(hm))
        heads.append(Tensor(hd))
    return GateMasks(
        emb=Tensor(emb), hidden=hidden, heads=heads,
        d_mha=[Tensor([float(v)]) for v in cfg.D_mha],
        d_mlp=[Tensor([float(v)]) for v in cfg.D_mlp],
    )


# ---------------------------------------------------------------------------
# cost model


def macs(cfg: SubmodelConfig, spec: BackboneSpec) -> int:
    """Per-sample MACs of the MHA and MLP blocks (input stem and head excluded)."""
    N, d, E = spec.N, spec.d_head, cfg.E
    total = 0
    for l in range(spec.L):
        if cfg.D_mlp[l]:
            total += 2 * N * E * cfg.hidden(l)
        if cfg.D_mha[l]:
            total += N * d * cfg.H[l] * (4 * E + 2 * N)
    return total


def max_macs(spec: BackboneSpec) -> int:
    return macs(SubmodelConfig.maximal(spec), spec)


def macs_instrumented(view: SubmodelView, x) -> int:
    """Count executed MACs in a forward pass, per sample."""
    x = _as_input(x, view.spec)
    with nx.no_grad(), nx.counting() as counter:
        forward(view, x)
    batch = x.shape[0]
    if counter.macs % batch:
        raise AssertionError("instrumented MACs not divisible by batch size")
    return counter.macs // batch


def design_space_size(spec: BackboneSpec) -> int:
    e_choices = spec.k_max - spec.k_min + 1
    r_choices = len(spec.ratio_choices)
    h_choices = spec.H_max - spec.H_min + 1
    return e_choices * (r_choices * h_choices) ** spec.L * 2 ** (2 * spec.L)
