"""NSGA-II over submodel genomes with partitioned, gap-enforcing selection.

Objectives (both minimised): cross-entropy of the decoded submodel on one
fixed evaluation batch, and MACs normalised by the maximal config's MACs.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import codec
from . import numerics as nx
from .backbone import BackboneSpec, ElasticParams, SubmodelConfig, build_submodel, forward, macs, max_macs
from .errors import ConfigError, DataFormatError, SearchError

log = logging.getLogger(__name__)

decode = codec.decode


@dataclass
class SearchSettings:
    population: int = 100
    crossover_p: float = 0.95
    mutation_p: float = 0.3
    generations: int = 300
    partitions: int = 20
    min_gap: float = 0.005
    eval_batch: int = 1024

    def __post_init__(self):
        for name in ("crossover_p", "mutation_p"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"search.{name} must be in [0, 1]")
        if self.partitions < 1 or self.population < 2 or self.generations < 0 or self.eval_batch < 1:
            raise ConfigError("search needs partitions >= 1, population >= 2, generations >= 0, eval_batch >= 1")
        if self.min_gap < 0:
            raise ConfigError("search.min_gap must be non-negative")


@dataclass(eq=False)
class Individual:
    genome: np.ndarray
    loss: float
    macs_norm: float
    macs_abs: int = 0
    front_rank: int = 0
    crowding: float = 0.0

    @property
    def key(self) -> bytes:
        return self.genome.tobytes()

    @property
    def objectives(self) -> tuple:
        return (self.loss, self.macs_norm)


# ---------------------------------------------------------------------------
# NSGA-II primitives


def dominates(a, b) -> bool:
    return all(x <= y for x, y in zip(a, b)) and any(x < y for x, y in zip(a, b))


def fast_nondominated_sort(points) -> list[list[int]]:
    """Fronts as lists of indices into ``points`` (minimisation)."""
    n = len(points)
    dominated = [[] for _ in range(n)]
    counts = [0] * n
    fronts = [[]]
    for p in range(n):
        for q in range(n):
            if p == q:
                continue
            if dominates(points[p], points[q]):
                dominated[p].append(q)
            elif dominates(points[q], points[p]):
                counts[p] += 1
        if counts[p] == 0:
            fronts[0].append(p)
    i = 0
    while fronts[i]:
        nxt = []
        for p in fronts[i]:
            for q in dominated[p]:
                counts[q] -= 1
                if counts[q] == 0:
                    nxt.append(q)
        i += 1
        fronts.append(sorted(nxt))
    return fronts[:-1]


def crowding_distance(points) -> np.ndarray:
    """NSGA-II crowding distance, made independent of input order.

    Neighbours are the nearest distinct values on each objective, so tied
    points share one distance and every point sitting on an extreme value is
    a boundary point.  Without ties this is the textbook definition.
    """
    n = len(points)
    if n <= 2:
        return np.full(n, math.inf)
    pts = np.asarray(points, dtype=float)
    dist = np.zeros(n)
    for col in pts.T:
        u = np.unique(col)
        if len(u) == 1:
            continue
        pos = np.searchsorted(u, col)
        edge = (pos == 0) | (pos == len(u) - 1)
        inner = ~edge
        dist[edge] = math.inf
        dist[inner] += (u[pos[inner] + 1] - u[pos[inner] - 1]) / (u[-1] - u[0])
    return dist


def assign_ranks(pop: list[Individual]) -> list[list[int]]:
    fronts = fast_nondominated_sort([ind.objectives for ind in pop])
    for r, front in enumerate(fronts):
        cd = crowding_distance([pop[i].objectives for i in front])
        for i, c in zip(front, cd):
            pop[i].front_rank = r
            pop[i].crowding = float(c)
    return fronts


def hypervolume(points, ref) -> float:
    """Area dominated by (loss, macs_norm) points up to ``ref`` (minimisation)."""
    pts = sorted((m, l) for l, m in points if l < ref[0] and m < ref[1])
    hv, best_loss = 0.0, ref[0]
    for m, l in pts:
        if l < best_loss:
            hv += (ref[1] - m) * (best_loss - l)
            best_loss = l
    return hv


# ---------------------------------------------------------------------------
# partitioned selection


def _interval(macs_norm: float, partitions: int) -> int:
    return min(max(int(macs_norm * partitions), 0), partitions - 1)


def _quotas(groups: dict[int, list[Individual]], total: int, partitions: int) -> dict[int, int]:
    base, rem = divmod(total, partitions)
    by_loss = sorted(groups, key=lambda i: (min(c.loss for c in groups[i]), i))
    quota = {i: min(base, len(groups[i])) for i in groups}
    for i in by_loss[:rem]:
        quota[i] = min(quota[i] + 1, len(groups[i]))
    # slots nobody claimed (empty or small intervals) go round-robin, lowest loss first
    spare = min(total, sum(len(g) for g in groups.values())) - sum(quota.values())
    while spare > 0:
        for i in by_loss:
            if spare and quota[i] < len(groups[i]):
                quota[i] += 1
                spare -= 1
    return quota


def _select_interval(members: list[Individual], quota: int, min_gap: float) -> list[Individual]:
    selected: list[Individual] = []
    ranks = sorted({m.front_rank for m in members})
    for r in ranks:
        pool = [m for m in members if m.front_rank == r]
        while pool and len(selected) < quota:
            eligible = [c for c in pool if all(abs(c.macs_norm - s.macs_norm) >= min_gap for s in selected)]
            pool = eligible
            if not pool:
                break
            joint = selected + pool
            cd = crowding_distance([j.objectives for j in joint])[len(selected):]
            best = min(range(len(pool)), key=lambda i: (-cd[i], pool[i].loss, pool[i].macs_norm, pool[i].key))
            selected.append(pool.pop(best))
        if len(selected) >= quota:
            break
    if len(selected) < quota:
        # fallback fill: the interval would otherwise stay short
        rest = [m for m in members if m not in selected]
        rest.sort(key=lambda m: (m.front_rank, -m.crowding, m.loss, m.key))
        selected.extend(rest[: quota - len(selected)])
    return selected


def partitioned_select(candidates: list[Individual], settings: SearchSettings, total: int | None = None) -> list[Individual]:
    """Survivors chosen independently inside equal-width macs_norm intervals."""
    if not candidates:
        raise SearchError("partitioned selection on an empty candidate set")
    total = settings.population if total is None else total
    assign_ranks(candidates)
    groups: dict[int, list[Individual]] = {}
    for c in candidates:
        groups.setdefault(_interval(c.macs_norm, settings.partitions), []).append(c)
    quota = _quotas(groups, total, settings.partitions)
    survivors = []
    for i in sorted(groups):
        survivors.extend(_select_interval(groups[i], quota[i], settings.min_gap))
    return survivors


# ---------------------------------------------------------------------------
# evolution


@dataclass
class ParetoArchive:
    population: list
    front: list
    m0: int
    hv_history: list = field(default_factory=list)
    hv_ref: tuple = (0.0, 1.0)
    evaluations: int = 0

    def write_csv(self, path, front_only: bool = False) -> None:
        rows = self.front if front_only else self.population
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["genome_hex", "macs_norm", "macs_absolute", "loss", "front_rank"])
            for ind in sorted(rows, key=lambda i: (i.front_rank, i.macs_norm, i.loss, i.key)):
                w.writerow([codec.to_hex(ind.genome), repr(ind.macs_norm), ind.macs_abs, repr(ind.loss), ind.front_rank])

    @staticmethod
    def read_csv(path, spec: BackboneSpec) -> list[Individual]:
        length = codec.BitLayout.for_spec(spec).length
        out = []
        with open(path, newline="") as f:
            for line, row in enumerate(csv.DictReader(f), start=2):
                try:
                    out.append(Individual(
                        genome=codec.from_hex(row["genome_hex"], length),
                        loss=float(row["loss"]), macs_norm=float(row["macs_norm"]),
                        macs_abs=int(row["macs_absolute"]), front_rank=int(row["front_rank"]),
                    ))
                except (KeyError, TypeError, ValueError) as e:
                    raise DataFormatError(f"{path}: line {line}: {e}") from None
        return out


def nondominated(inds: list[Individual]) -> list[Individual]:
    """Front 0, deduplicated on objective values, sorted by macs_norm."""
    uniq: dict[tuple, Individual] = {}
    for ind in inds:
        cur = uniq.get(ind.objectives)
        if cur is None or ind.key < cur.key:
            uniq[ind.objectives] = ind
    pool = list(uniq.values())
    front0 = fast_nondominated_sort([p.objectives for p in pool])[0] if pool else []
    front = [pool[i] for i in front0]
    for ind in front:
        ind.front_rank = 0
    return sorted(front, key=lambda i: (i.macs_norm, i.loss))


def nearest_pareto(front: list[Individual], budget: float) -> Individual:
    if not front:
        raise SearchError("empty Pareto front")
    return min(front, key=lambda i: (abs(i.macs_norm - budget), i.loss, i.macs_norm))


class FitnessEvaluator:
    """Memoised loss and MACs of decoded genomes on one fixed batch."""

    def __init__(self, params: ElasticParams, x: np.ndarray, y: np.ndarray, chunk: int = 256):
        self.params = params
        self.spec = params.spec
        self.x, self.y = x, y
        self.chunk = chunk
        self.m0 = max_macs(self.spec)
        self.cache: dict[bytes, Individual] = {}

    def loss(self, cfg: SubmodelConfig) -> float:
        view = build_submodel(self.params, cfg)
        total = 0.0
        with nx.no_grad():
            for i in range(0, len(self.y), self.chunk):
                logits = forward(view, self.x[i: i + self.chunk])
                total += float(nx.cross_entropy(logits, self.y[i: i + self.chunk]).data) * len(logits.data)
        return total / len(self.y)

    def __call__(self, genome: np.ndarray) -> Individual:
        genome = np.asarray(genome, dtype=np.uint8)
        key = genome.tobytes()
        hit = self.cache.get(key)
        if hit is None:
            cfg = decode(genome, self.spec)
            loss = self.loss(cfg)
            if not math.isfinite(loss):
                log.warning("non-finite fitness for %s; assigning +inf", cfg.summary())
                loss = math.inf
            m = macs(cfg, self.spec)
            hit = Individual(genome, loss, m / self.m0, m)
            self.cache[key] = hit
        return Individual(hit.genome.copy(), hit.loss, hit.macs_norm, hit.macs_abs)


def _tournament(pop: list[Individual], rng: np.random.Generator) -> Individual:
    a, b = pop[int(rng.integers(len(pop)))], pop[int(rng.integers(len(pop)))]
    return a if (a.front_rank, -a.crowding) <= (b.front_rank, -b.crowding) else b


def _offspring(p1: np.ndarray, p2: np.ndarray, settings: SearchSettings, rng: np.random.Generator):
    c1, c2 = p1.copy(), p2.copy()
    n = len(p1)
    if rng.random() < settings.crossover_p:
        cut = int(rng.integers(1, n))
        c1[cut:], c2[cut:] = p2[cut:], p1[cut:]
    rate = settings.mutation_p / n
    for c in (c1, c2):
        flips = rng.random(n) < rate
        c[flips] ^= 1
    return c1, c2


def evolve(params: ElasticParams, eval_x: np.ndarray, eval_y: np.ndarray, settings: SearchSettings,
           rng: np.random.Generator, on_generation=None) -> ParetoArchive:
    """Run the search from the all-zero and all-one genomes."""
    spec = params.spec
    length = codec.BitLayout.for_spec(spec).length
    fitness = FitnessEvaluator(params, eval_x, eval_y)
    pop = [fitness(np.zeros(length, np.uint8)), fitness(np.ones(length, np.uint8))]
    seen = {p.key for p in pop}
    attempts = 0
    while len(pop) < settings.population and attempts < 50 * settings.population:
        attempts += 1
        i, j = rng.integers(len(pop), size=2)
        for child in _offspring(pop[i].genome, pop[j].genome, settings, rng):
            if child.tobytes() not in seen and len(pop) < settings.population:
                seen.add(child.tobytes())
                pop.append(fitness(child))
    assign_ranks(pop)
    evaluated = list(pop)
    front = nondominated(evaluated)
    finite = [p.loss for p in pop if math.isfinite(p.loss)]
    ref = (max(finite) if finite else 1.0, 1.0)
    history = [hypervolume([f.objectives for f in front], ref)]
    if on_generation:
        on_generation(0, pop, front, history[-1])
    for gen in range(1, settings.generations + 1):
        children = []
        while len(children) < settings.population:
            c1, c2 = _offspring(_tournament(pop, rng).genome, _tournament(pop, rng).genome, settings, rng)
            children.extend([c1, c2])
        offspring = [fitness(c) for c in children[: settings.population]]
        merged: dict[bytes, Individual] = {}
        for ind in pop + offspring:
            merged.setdefault(ind.key, ind)
        pop = partitioned_select(list(merged.values()), settings)
        assign_ranks(pop)
        front = nondominated(front + offspring)
        history.append(hypervolume([f.objectives for f in front], ref))
        if on_generation:
            on_generation(gen, pop, front, history[-1])
    return ParetoArchive(pop, front, fitness.m0, history, ref, len(fitness.cache))
