"""Curriculum elastic adaptation: widen submodel sampling ranges over training."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from . import numerics as nx
from .backbone import BackboneSpec, ElasticParams, SubmodelConfig, build_submodel, forward
from .data import Dataset
from .errors import ConfigError, NumericalError
from .optim import AdamW, OptimizerConfig, cosine_lr

log = logging.getLogger(__name__)


def _per_step(value, n: int, name: str) -> list:
    if isinstance(value, (int, float)):
        return [value] * n
    value = list(value)
    if len(value) != n:
        raise ConfigError(f"{name} has {len(value)} entries for {n} expansion steps")
    return value


@dataclass
class CurriculumSchedule:
    total_steps: int
    expansion_steps: list
    delta_R: list
    delta_H: list
    delta_E: list
    delta_n: list
    R_max: float
    H_max: int
    E_max: int
    R_floor: float
    H_floor: int
    E_floor: int
    n_final: int

    def __post_init__(self):
        k = len(self.expansion_steps)
        self.expansion_steps = [int(s) for s in self.expansion_steps]
        self.delta_R = [float(v) for v in _per_step(self.delta_R, k, "delta_R")]
        self.delta_H = [int(v) for v in _per_step(self.delta_H, k, "delta_H")]
        self.delta_E = [int(v) for v in _per_step(self.delta_E, k, "delta_E")]
        self.delta_n = [int(v) for v in _per_step(self.delta_n, k, "delta_n")]
        if self.expansion_steps != sorted(set(self.expansion_steps)):
            raise ConfigError("expansion steps must be strictly increasing")
        if self.expansion_steps and not (1 <= self.expansion_steps[0] and self.expansion_steps[-1] <= self.total_steps):
            raise ConfigError(f"expansion steps must lie in 1..{self.total_steps}")
        if min(self.delta_R + self.delta_H + self.delta_E + self.delta_n, default=0) < 0:
            raise ConfigError("curriculum deltas must be non-negative")
        landed = (
            self.R_max - sum(self.delta_R),
            self.H_max - sum(self.delta_H),
            self.E_max - sum(self.delta_E),
            sum(self.delta_n),
        )
        target = (self.R_floor, self.H_floor, self.E_floor, self.n_final)
        if abs(landed[0] - target[0]) > 1e-9 or landed[1:] != target[1:]:
            raise ConfigError(f"curriculum deltas land on (R, H, E, n) = {landed}, expected {target}")

    @classmethod
    def for_spec(cls, spec: BackboneSpec, total_steps: int, expansion_steps, n_final: int,
                 delta_R=None, delta_H=None, delta_E=None, delta_n=None) -> "CurriculumSchedule":
        """Schedule whose floors are the backbone's minima; missing deltas are split front-loaded."""
        k = len(expansion_steps)
        return cls(
            total_steps=total_steps,
            expansion_steps=list(expansion_steps),
            delta_R=delta_R if delta_R is not None else split_evenly(spec.R_max - spec.R_min, k, spec.R_step),
            delta_H=delta_H if delta_H is not None else split_evenly(spec.H_max - spec.H_min, k, 1),
            delta_E=delta_E if delta_E is not None else split_evenly(spec.E_max - spec.E_min, k, spec.d_head),
            delta_n=delta_n if delta_n is not None else split_evenly(n_final, k, 1),
            R_max=spec.R_max, H_max=spec.H_max, E_max=spec.E_max,
            R_floor=spec.R_min, H_floor=spec.H_min, E_floor=spec.E_min, n_final=n_final,
        )


def split_evenly(total: float, parts: int, quantum: float) -> list:
    """Split ``total`` into ``parts`` multiples of ``quantum``, larger ones first."""
    if parts == 0:
        if total:
            raise ConfigError("cannot reach the floor without expansion steps")
        return []
    units = int(round(total / quantum))
    base, extra = divmod(units, parts)
    out = [(base + (1 if i < extra else 0)) * quantum for i in range(parts)]
    return [int(v) if float(quantum).is_integer() else v for v in out]


def vit_base_schedule(total_steps: int = 100, expansion_steps=(10, 15, 20, 25, 30, 35)) -> CurriculumSchedule:
    """The ViT-Base curriculum: R in [0.5, 4], H in [6, 12], E in [384, 768]."""
    return CurriculumSchedule(
        total_steps=total_steps, expansion_steps=list(expansion_steps),
        delta_R=[1, 1, 0.5, 0.5, 0.5, 0], delta_H=1, delta_E=64, delta_n=[1, 1, 0, 0, 0, 0],
        R_max=4.0, H_max=12, E_max=768, R_floor=0.5, H_floor=6, E_floor=384, n_final=2,
    )


@dataclass(frozen=True)
class CurriculumState:
    t: int
    R_min: float
    H_min: int
    E_min: int
    n_max: int

    @classmethod
    def initial(cls, schedule: CurriculumSchedule) -> "CurriculumState":
        return cls(0, schedule.R_max, schedule.H_max, schedule.E_max, 0)


def advance(state: CurriculumState, schedule: CurriculumSchedule) -> CurriculumState:
    if state.t >= schedule.total_steps:
        raise ValueError(f"curriculum already at its last step ({schedule.total_steps})")
    t = state.t + 1
    if t not in schedule.expansion_steps:
        return replace(state, t=t)
    i = schedule.expansion_steps.index(t)
    return CurriculumState(
        t=t,
        R_min=max(state.R_min - schedule.delta_R[i], schedule.R_floor),
        H_min=max(state.H_min - schedule.delta_H[i], schedule.H_floor),
        E_min=max(state.E_min - schedule.delta_E[i], schedule.E_floor),
        n_max=min(state.n_max + schedule.delta_n[i], schedule.n_final),
    )


def sample_config(state: CurriculumState, spec: BackboneSpec, rng: np.random.Generator) -> SubmodelConfig:
    """Draw one submodel from the current sampling ranges.

    Per layer R and H are independent uniform draws from their grids; E is a
    uniform multiple of d_head.  A uniform number s of layers in {0..n_max}
    is skipped entirely (attention and MLP together).
    """
    L = spec.L
    r_lo = int(round(state.R_min / spec.R_step))
    r_hi = int(round(spec.R_max / spec.R_step))
    R = tuple(float(v) * spec.R_step for v in rng.integers(r_lo, r_hi + 1, size=L))
    H = tuple(int(v) for v in rng.integers(state.H_min, spec.H_max + 1, size=L))
    k = int(rng.integers(state.E_min // spec.d_head, spec.k_max + 1))
    s = int(rng.integers(0, min(state.n_max, L) + 1))
    keep = np.ones(L, dtype=bool)
    if s:
        keep[rng.choice(L, size=s, replace=False)] = False
    D = tuple(bool(v) for v in keep)
    return SubmodelConfig(R, H, k * spec.d_head, D, D)


@dataclass
class TrainLog:
    rows: list = field(default_factory=list)

    def add(self, step: int, cfg: SubmodelConfig, loss: float) -> None:
        self.rows.append((step, cfg.summary(), loss))

    def text(self) -> str:
        return "".join(f"step={s} loss={l:.6f} cfg={c}\n" for s, c, l in self.rows)


def train_step(params: ElasticParams, cfg: SubmodelConfig, xb, yb, opt: AdamW, lr: float, step: int) -> float:
    opt.zero_grad()
    loss = nx.cross_entropy(forward(build_submodel(params, cfg), xb), yb)
    value = float(loss.data)
    if not np.isfinite(value):
        raise NumericalError(f"non-finite loss {value} at step {step} for config {cfg.summary()}")
    loss.backward()
    opt.step(lr)
    return value


def stage1_train(params: ElasticParams, schedule: CurriculumSchedule, dataset: Dataset,
                 optimizer_cfg: OptimizerConfig, seed: int = 0, batch_size: int = 64,
                 log_every: int = 50, train_log: TrainLog | None = None,
                 checkpoint_every: int = 0, on_checkpoint=None) -> ElasticParams:
    """One sampled submodel and one optimizer update per step; updates ``params`` in place.

    ``on_checkpoint(step, params)`` is called every ``checkpoint_every`` steps.
    """
    spec = params.spec
    rng = np.random.default_rng(seed)
    opt = AdamW(params.parameters(), optimizer_cfg)
    state = CurriculumState.initial(schedule)
    for step in range(schedule.total_steps):
        state = advance(state, schedule)
        cfg = sample_config(state, spec, rng)
        xb, yb = dataset.minibatch(rng, batch_size)
        loss = train_step(params, cfg, xb, yb, opt, cosine_lr(step, schedule.total_steps, optimizer_cfg), step)
        if train_log is not None and (step % log_every == 0 or step == schedule.total_steps - 1):
            train_log.add(state.t, cfg, loss)
        if step % log_every == 0:
            log.debug("stage1 step %d loss %.4f %s", state.t, loss, cfg.summary())
        if on_checkpoint is not None and checkpoint_every and state.t % checkpoint_every == 0:
            on_checkpoint(state.t, params)
    return params


def train_full(params: ElasticParams, dataset: Dataset, steps: int, optimizer_cfg: OptimizerConfig,
               seed: int = 0, batch_size: int = 64, train_log: TrainLog | None = None,
               log_every: int = 50) -> ElasticParams:
    """Plain training of the maximal model (warm-up and the non-elastic baseline)."""
    rng = np.random.default_rng(seed)
    opt = AdamW(params.parameters(), optimizer_cfg)
    cfg = SubmodelConfig.maximal(params.spec)
    for step in range(steps):
        xb, yb = dataset.minibatch(rng, batch_size)
        loss = train_step(params, cfg, xb, yb, opt, cosine_lr(step, steps, optimizer_cfg), step)
        if train_log is not None and (step % log_every == 0 or step == steps - 1):
            train_log.add(step + 1, cfg, loss)
    return params
