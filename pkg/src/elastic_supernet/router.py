"""Budget-conditioned router: M_t -> architecture gates.

A two-layer perceptron emits one logit per gate in the codec layout.  Gates
are relaxed with Gumbel-Sigmoid noise and thresholded; the straight-through
value is the hard 0/1 gate and its gradient is the soft gate's.
"""
from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass

import numpy as np

from . import codec
from . import numerics as nx
from .backbone import BackboneSpec, ElasticParams, GateMasks, SubmodelConfig, forward_masked, macs, max_macs
from .data import Dataset
from .errors import ConfigError, NumericalError
from .numerics import Tensor
from .optim import AdamW, OptimizerConfig
from .search import Individual, nearest_pareto

log = logging.getLogger(__name__)

ROUTER_KEYS = ("W_in", "b_in", "W_out", "b_out")


def gate_count(spec: BackboneSpec) -> int:
    return codec.BitLayout.for_spec(spec).length


@dataclass
class RouterParams:
    W_in: Tensor
    b_in: Tensor
    W_out: Tensor
    b_out: Tensor

    @classmethod
    def init(cls, spec: BackboneSpec, hidden: int = 64, seed: int = 0) -> "RouterParams":
        rng = np.random.default_rng(seed)
        G = gate_count(spec)
        return cls(
            W_in=Tensor(rng.normal(scale=1.0, size=(1, hidden)), requires_grad=True),
            b_in=Tensor(rng.normal(scale=0.5, size=hidden), requires_grad=True),
            W_out=Tensor(rng.normal(scale=1.0 / math.sqrt(hidden), size=(hidden, G)), requires_grad=True),
            b_out=Tensor(np.zeros(G), requires_grad=True),
        )

    def parameters(self) -> list[Tensor]:
        return [self.W_in, self.b_in, self.W_out, self.b_out]

    def arrays(self, prefix: str = "router.") -> dict[str, np.ndarray]:
        return {prefix + k: getattr(self, k).data.copy() for k in ROUTER_KEYS}

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray], prefix: str = "router.") -> "RouterParams":
        try:
            return cls(*(Tensor(arrays[prefix + k], requires_grad=True) for k in ROUTER_KEYS))
        except KeyError as e:
            raise ConfigError(f"router tensor {e} missing") from None


@dataclass
class GateVector:
    soft: Tensor
    hard: np.ndarray
    tau: float
    delta: float


def gumbel_pair(rng: np.random.Generator, size: int) -> tuple[np.ndarray, np.ndarray]:
    u = rng.random((2, size))
    u = np.clip(u, 1e-12, 1.0 - 1e-12)
    g = -np.log(-np.log(u))
    return g[0], g[1]


def router_logits(router: RouterParams, M_t: float) -> Tensor:
    x = Tensor(np.array([[M_t]]))
    h = nx.gelu(x @ router.W_in + router.b_in)
    return (h @ router.W_out + router.b_out).reshape(-1)


def relax(logits: Tensor, noise, tau: float, delta: float) -> GateVector:
    """Gumbel-Sigmoid relaxation of ``logits``; ``noise`` is (G1, G2) or None."""
    if tau <= 0:
        raise ConfigError(f"temperature must be positive, got {tau}")
    z = logits
    if noise is not None:
        z = z + Tensor(noise[0] - noise[1])
    soft = nx.sigmoid(z * (1.0 / tau))
    return GateVector(soft, soft.data > delta, tau, delta)


def route(router: RouterParams, M_t: float, noise=None, tau: float = 1.0, delta: float = 0.5) -> GateVector:
    if not 0.0 <= M_t <= 1.0:
        warnings.warn(f"budget M_t={M_t} outside [0, 1]; clamped", RuntimeWarning, stacklevel=2)
        M_t = min(max(M_t, 0.0), 1.0)
    return relax(router_logits(router, M_t), noise, tau, delta)


def straight_through(g: GateVector) -> Tensor:
    return nx.straight_through(g.hard.astype(float), g.soft)


def gates_to_config(g: GateVector | np.ndarray, spec: BackboneSpec) -> SubmodelConfig:
    hard = g.hard if isinstance(g, GateVector) else np.asarray(g)
    return codec.decode(hard, spec)


def encode_gates(cfg: SubmodelConfig, spec: BackboneSpec) -> np.ndarray:
    return codec.encode(cfg, spec).astype(float)


# ---------------------------------------------------------------------------
# differentiable cost


def _field_counts(v: Tensor, spec: BackboneSpec):
    """Per-field sums of a gate tensor, clamped to the decode bounds."""
    lay = codec.BitLayout.for_spec(spec)
    r_lo = max(1, int(round(spec.R_min / spec.R_step)))
    k = nx.clip(v[lay.emb()].sum(), spec.k_min, spec.k_max)
    ratios = [nx.clip(v[lay.ratio(l)].sum(), r_lo, spec.n_ratio) for l in range(spec.L)]
    heads = [nx.clip(v[lay.heads(l)].sum(), spec.H_min, spec.H_max) for l in range(spec.L)]
    return k, ratios, heads


def soft_macs(g: GateVector, spec: BackboneSpec) -> Tensor:
    """The MACs cost model evaluated on soft gates (straight-through depth flags)."""
    lay = codec.BitLayout.for_spec(spec)
    k, ratios, heads = _field_counts(g.soft, spec)
    st = straight_through(g)
    mha, mlp = st[lay.mha()], st[lay.mlp()]
    N, d = spec.N, spec.d_head
    E = k * float(d)
    total = None
    for l in range(spec.L):
        R = ratios[l] * spec.R_step
        mlp_cost = (E * E * R) * (2.0 * N) * mlp[l]
        mha_cost = heads[l] * (E * 4.0 + 2.0 * N) * float(N * d) * mha[l]
        term = mlp_cost + mha_cost
        total = term if total is None else total + term
    return total


def stage2_loss(ce: Tensor, g: GateVector, M_t: float, target: SubmodelConfig, lambda1: float,
                lambda2: float, M0: float, spec: BackboneSpec) -> Tensor:
    """CE + lambda1 (soft_macs / M0 - M_t)^2 + lambda2 ||ST(g) - encode(target)||^2."""
    loss = ce
    if lambda1:
        gap = soft_macs(g, spec) * (1.0 / M0) - M_t
        loss = loss + (gap * gap) * lambda1
    if lambda2:
        diff = straight_through(g) - Tensor(encode_gates(target, spec))
        loss = loss + (diff * diff).sum() * lambda2
    return loss


# ---------------------------------------------------------------------------
# gate masks for the full-width forward


def gate_masks(g: GateVector, spec: BackboneSpec) -> GateMasks:
    """Nested 0/1 masks selecting ``gates_to_config(g)``, differentiable in the gates.

    Each field's straight-through count drives a prefix mask, so the forward
    always runs exactly the decoded submodel while the count's gradient
    reaches every gate of the field.
    """
    lay = codec.BitLayout.for_spec(spec)
    st = straight_through(g)
    k, ratios, heads = _field_counts(st, spec)
    d = spec.d_head
    expand = np.kron(np.eye(spec.k_max), np.ones((1, d)))
    with nx.uncounted():
        emb = (nx.prefix_mask(k, spec.k_max).reshape(1, spec.k_max) @ Tensor(expand)).reshape(-1)
    E = int(round(float(k.data))) * d
    hidden = [nx.prefix_mask(r * (spec.R_step * E), spec.hid_max) for r in ratios]
    head = [nx.prefix_mask(h, spec.H_max) for h in heads]
    mha, mlp = st[lay.mha()], st[lay.mlp()]
    return GateMasks(
        emb=emb, hidden=hidden, heads=head,
        d_mha=[mha[l: l + 1] for l in range(spec.L)],
        d_mlp=[mlp[l: l + 1] for l in range(spec.L)],
    )


# ---------------------------------------------------------------------------
# training


@dataclass
class RouterSettings:
    hidden: int = 64
    tau_start: float = 1.0
    tau_end: float = 0.05
    delta: float = 0.5
    lambda1: float = 20.0
    lambda2: float = 10.0
    phase_a_steps: int = 1000
    phase_b_steps: int = 1000
    backbone_lr: float = 1e-5
    lr_ratio: float = 1000.0
    batch_size: int = 32
    phase_a_noise: bool = False
    phase_b_noise: bool = False

    def __post_init__(self):
        if not (self.tau_start > 0 and self.tau_end > 0):
            raise ConfigError("router temperatures must be positive")
        if not 0.0 < self.delta < 1.0:
            raise ConfigError("router.delta must lie in (0, 1)")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ConfigError("router loss weights must be non-negative")
        if self.phase_a_steps < 0 or self.phase_b_steps < 0 or self.hidden < 1 or self.batch_size < 1:
            raise ConfigError("router step counts must be >= 0, hidden and batch_size >= 1")
        if self.backbone_lr < 0 or self.lr_ratio <= 0:
            raise ConfigError("router learning rates must be positive")


def lambda2_at(step: int, settings: RouterSettings) -> float:
    """Phase-B imitation weight: linear from lambda2 to 0 at the phase midpoint."""
    half = settings.phase_b_steps / 2
    if half <= 0:
        return 0.0
    return settings.lambda2 * max(0.0, 1.0 - step / half)


def tau_at(step: int, settings: RouterSettings) -> float:
    """Phase-B temperature: exponential decay from tau_start to tau_end."""
    T = settings.phase_b_steps
    if T <= 1:
        return settings.tau_end
    return settings.tau_start * (settings.tau_end / settings.tau_start) ** (step / (T - 1))


@dataclass
class Stage2Log:
    rows: list

    def text(self) -> str:
        return "".join(
            f"phase={p} step={s} M_t={m:.4f} loss={l:.6f} soft_macs_norm={sm:.4f} tau={t:.4f} lambda2={l2:.4f}\n"
            for p, s, m, l, sm, t, l2 in self.rows
        )


def _check(value: float, phase: str, step: int, M_t: float) -> None:
    if not math.isfinite(value):
        raise NumericalError(f"non-finite stage-2 loss {value} in phase {phase} at step {step} (M_t={M_t:.4f})")


def stage2_train(params: ElasticParams, router: RouterParams, front: list[Individual], dataset: Dataset,
                 settings: RouterSettings, seed: int = 0, log_every: int = 50):
    """Phase A: router-only imitation of the Pareto front.  Phase B: joint training."""
    spec = params.spec
    rng = np.random.default_rng(seed)
    M0 = float(max_macs(spec))
    G = gate_count(spec)
    router_cfg = OptimizerConfig(lr=settings.backbone_lr * settings.lr_ratio, weight_decay=0.0)
    r_opt = AdamW(router.parameters(), router_cfg, decay=False)
    rows = []

    targets = {}

    def target(M_t):
        best = nearest_pareto(front, M_t)
        return targets.setdefault(best.key, gates_to_config(best.genome, spec))

    for step in range(settings.phase_a_steps):
        M_t = float(rng.random())
        noise = gumbel_pair(rng, G) if settings.phase_a_noise else None
        g = route(router, M_t, noise, settings.tau_start, settings.delta)
        r_opt.zero_grad()
        loss = stage2_loss(Tensor(0.0), g, M_t, target(M_t), 0.0, settings.lambda2, M0, spec)
        value = float(loss.data)
        _check(value, "A", step, M_t)
        loss.backward()
        r_opt.step(router_cfg.lr)
        if step % log_every == 0 or step == settings.phase_a_steps - 1:
            rows.append(("A", step, M_t, value, float(soft_macs(g, spec).data) / M0, settings.tau_start, settings.lambda2))

    b_opt = AdamW(params.parameters(), OptimizerConfig(lr=settings.backbone_lr))
    for step in range(settings.phase_b_steps):
        M_t = float(rng.random())
        tau, lam2 = tau_at(step, settings), lambda2_at(step, settings)
        xb, yb = dataset.minibatch(rng, settings.batch_size)
        noise = gumbel_pair(rng, G) if settings.phase_b_noise else None
        g = route(router, M_t, noise, tau, settings.delta)
        r_opt.zero_grad()
        b_opt.zero_grad()
        logits = forward_masked(params, gate_masks(g, spec), xb)
        ce = nx.cross_entropy(logits, yb)
        loss = stage2_loss(ce, g, M_t, target(M_t), settings.lambda1, lam2, M0, spec)
        value = float(loss.data)
        _check(value, "B", step, M_t)
        loss.backward()
        r_opt.step(router_cfg.lr)
        b_opt.step(settings.backbone_lr)
        if step % log_every == 0 or step == settings.phase_b_steps - 1:
            rows.append(("B", step, M_t, value, float(soft_macs(g, spec).data) / M0, tau, lam2))
    return params, router, Stage2Log(rows)


def routed_config(router: RouterParams, M_t: float, spec: BackboneSpec, delta: float = 0.5,
                  tau: float = 1.0) -> SubmodelConfig:
    """Inference: zero noise, hard gates."""
    with nx.no_grad():
        return gates_to_config(route(router, M_t, None, tau, delta), spec)


def routed_macs(router: RouterParams, M_t: float, spec: BackboneSpec, delta: float = 0.5, tau: float = 1.0) -> int:
    return macs(routed_config(router, M_t, spec, delta, tau), spec)
