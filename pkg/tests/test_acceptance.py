"""Acceptance criteria 1-10, each at its stated tolerance.

Every test records one PASS/FAIL line, printed in the terminal summary.
Criteria 7, 9 and 10 run the default toy pipeline (a few minutes each).
"""
import contextlib
import itertools
import math
import time
from collections import Counter

import numpy as np
import pytest
from scipy.stats import chisquare

import conftest
from elastic_supernet import checkpoint
from elastic_supernet import numerics as nx
from elastic_supernet.backbone import (BackboneSpec, SubmodelConfig, build_submodel, forward, macs,
                                       macs_instrumented)
from elastic_supernet.config import RunConfig
from elastic_supernet.curriculum import CurriculumState, advance, sample_config, vit_base_schedule
from elastic_supernet.importance import rearrange, score_importance
from elastic_supernet.numerics import Tensor
from elastic_supernet.pipeline import build_dataset, read_budget_csv, read_csv, run_pipeline, run_search
from elastic_supernet.router import (GateVector, gate_count, gumbel_pair, relax, route,
                                     RouterParams, soft_macs, stage2_loss, straight_through)
from elastic_supernet.search import (Individual, SearchSettings, crowding_distance, fast_nondominated_sort,
                                     partitioned_select)

from conftest import assert_grad_close, fd_grad, random_config, toy_spec
from oracles import dense_forward, randomized_params

VIT = BackboneSpec(L=12, E_max=768, d_head=64, H_max=12, R_max=4.0, N=197, num_classes=10,
                   E_min=384, H_min=6, R_min=0.5)


@contextlib.contextmanager
def criterion(n):
    detail = {}
    try:
        yield detail
    except BaseException:
        conftest.ACCEPTANCE[n] = (False, detail.get("msg", "assertion failed"))
        raise
    conftest.ACCEPTANCE[n] = (True, detail.get("msg", ""))


# -- 1 ------------------------------------------------------------------------------


def test_criterion_01_macs_oracle():
    with criterion(1) as d:
        t0 = time.perf_counter()
        spec = toy_spec()
        p = randomized_params(spec, 0)
        rng = np.random.default_rng(1)
        x = rng.normal(size=(2, spec.N, spec.in_dim))
        bad = 0
        for _ in range(100):
            cfg = random_config(spec, rng)
            bad += macs(cfg, spec) != macs_instrumented(build_submodel(p, cfg), x)
        elapsed = time.perf_counter() - t0
        d["msg"] = f"100 configs, {bad} mismatches, {elapsed:.1f}s"
        assert bad == 0 and elapsed < 30


# -- 2 ------------------------------------------------------------------------------


def test_criterion_02_vit_base_anchor():
    with criterion(2) as d:
        m = macs(SubmodelConfig.maximal(VIT), VIT)
        d["msg"] = f"macs(ViT-Base maximal) = {m:,}"
        assert m == 17_447_454_720


# -- 3 ------------------------------------------------------------------------------


def test_criterion_03_slice_vs_dense():
    with criterion(3) as d:
        t0 = time.perf_counter()
        spec = toy_spec()
        p = randomized_params(spec, 3, std=0.2)
        rng = np.random.default_rng(3)
        worst = 0.0
        for _ in range(50):
            cfg = random_config(spec, rng)
            x = rng.normal(size=(4, spec.N, spec.in_dim))
            got = forward(build_submodel(p, cfg), x).data
            want = dense_forward(p, cfg, x)
            worst = max(worst, float(np.abs(got - want).max() / np.abs(want).max()))
        elapsed = time.perf_counter() - t0
        d["msg"] = f"50 submodels, max relative deviation {worst:.2e}, {elapsed:.1f}s"
        assert worst <= 1e-5 and elapsed < 60


# -- 4 ------------------------------------------------------------------------------


def test_criterion_04_rearrangement_invariance():
    with criterion(4) as d:
        spec = toy_spec()
        p = randomized_params(spec, 4, std=0.2)
        x = np.random.default_rng(4).normal(size=(16, spec.N, spec.in_dim))
        full = SubmodelConfig.maximal(spec)
        before = forward(build_submodel(p, full), x).data
        q, _ = rearrange(p, score_importance(p, x, 16))
        after = forward(build_submodel(q, full), x).data
        rel = float(np.abs(after - before).max() / np.abs(before).max())
        rep = score_importance(q, x, 16)
        seqs = [rep.emb_scores, *rep.mlp_scores, *rep.head_scores]
        rises = sum(int(np.any(np.diff(s) > 1e-9 * s.max())) for s in seqs)
        d["msg"] = f"logit deviation {rel:.2e}, {rises} of {len(seqs)} score sequences increase"
        assert rel <= 1e-4 and rises == 0


# -- 5 ------------------------------------------------------------------------------


def _check(fn, *inputs):
    """Finite differences of scalar fn(*tensors) against backward, for every input."""
    ts = [Tensor(a.copy(), requires_grad=True) for a in inputs]
    fn(*ts).backward()
    arrays = [t.data for t in ts]
    for t in ts:
        num = fd_grad(lambda: float(fn(*[Tensor(a) for a in arrays]).data), t.data)
        assert_grad_close(t.grad, num, rtol=1e-4)


def _op_cases(rng):
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    w = rng.normal(size=(4, 5))
    v = rng.normal(size=4)
    m = (rng.random(4) > 0.3).astype(float)
    y = rng.integers(0, 4, 3)
    away = rng.uniform(0.2, 0.8, size=(3, 4)) * np.sign(rng.normal(size=(3, 4)))
    return {
        "add": (lambda p, q: (p + q * q).sum(), a, b),
        "sub": (lambda p, q: ((p - q) * (p - q)).sum(), a, b),
        "neg": (lambda p: (-p * p).sum(), a),
        "mul_broadcast": (lambda p, q: (p * q).sum(), a, v),
        "scale": (lambda p: nx.scale(p * p, 2.5).sum(), a),
        "matmul": (lambda p, q: ((p @ q) * (p @ q)).sum(), a, w),
        "batched_matmul": (lambda p, q: ((p @ q) * (p @ q)).sum(),
                           rng.normal(size=(2, 3, 4)), rng.normal(size=(2, 4, 2))),
        "gelu": (lambda p: (nx.gelu(p) * Tensor(b)).sum(), a),
        "sigmoid": (lambda p: (nx.sigmoid(p) * Tensor(b)).sum(), a),
        "clip": (lambda p: (nx.clip(p, -0.5, 0.5) * Tensor(b)).sum(), away),
        "getitem": (lambda p: (p[1:, ::2] * p[1:, ::2]).sum(), a),
        "reshape": (lambda p: (p.reshape(2, 6) * Tensor(b.reshape(2, 6))).sum(), a),
        "permute": (lambda p: (p.permute(1, 0) @ Tensor(b)).sum(), a),
        "transpose": (lambda p: (nx.transpose(p) * nx.transpose(p)).sum(), a),
        "sum_axis": (lambda p: (p.sum(axis=0) * p.sum(axis=0)).sum(), a),
        "mean": (lambda p: (p.mean(axis=1, keepdims=True) * p).sum(), a),
        "concat": (lambda p, q: (nx.concat([p, q], axis=1) * nx.concat([q, p], axis=1)).sum(), a, b),
        "layernorm": (lambda p, g, c: (nx.layernorm(p, g, c) * Tensor(b)).sum(), a, v + 1.0, v),
        "layernorm_masked": (lambda p, g, c: (nx.layernorm(p, g, c, mask=m) * Tensor(b * m)).sum(), a, v + 1, v),
        "softmax_rows": (lambda p: (nx.softmax_rows(p) * Tensor(b)).sum(), a),
        "cross_entropy": (lambda p: nx.cross_entropy(p, y), a),
    }


def _backbone_case(rng):
    spec = toy_spec(L=2, N=4, in_dim=5)
    p = randomized_params(spec, 5, std=0.3)
    cfg = SubmodelConfig((1.5, 4.0), (5, 8), 40, (True, True), (True, False))
    x = rng.normal(size=(2, spec.N, spec.in_dim))
    yl = np.array([1, 3])
    names = ["blocks.0.wq", "blocks.0.w1", "blocks.1.ln1_g", "embed", "head"]

    def loss():
        return nx.cross_entropy(forward(build_submodel(p, cfg), x), yl)

    for t in p.tensors.values():
        t.zero_grad()
    loss().backward()
    for k in names:
        num = fd_grad(lambda: float(loss().data), p[k].data)
        assert_grad_close(p[k].grad, num, rtol=1e-4)
    return len(names)


def _router_cases(rng):
    spec = toy_spec()
    G = gate_count(spec)
    M0 = float(macs(SubmodelConfig.maximal(spec), spec))
    # Gumbel-Sigmoid soft path
    noise = gumbel_pair(rng, G)
    w = rng.normal(size=G)
    _check(lambda z: (relax(z, noise, 0.6, 0.5).soft * Tensor(w)).sum(), rng.normal(size=G))
    # soft_macs and both penalty terms; the straight-through value follows the soft value
    s = rng.uniform(0.55, 0.95, size=G)
    target = random_config(spec, rng)

    def gates(t):
        return GateVector(t, t.data.copy(), 1.0, 0.5)

    _check(lambda t: soft_macs(gates(t), spec) * (1.0 / M0), s)
    _check(lambda t: stage2_loss(Tensor(0.0), gates(t), 0.4, target, 5.0, 0.0, M0, spec), s)
    _check(lambda t: stage2_loss(Tensor(0.0), gates(t), 0.4, target, 0.0, 10.0, M0, spec), s)
    # straight-through swap-in oracle through the router parameters
    grads = []
    for use_st in (True, False):
        r = RouterParams.init(spec, 16, 6)
        g = route(r, 0.35, noise, 0.7)
        y = straight_through(g) if use_st else g.soft
        (y * Tensor(w)).sum().backward()
        grads.append([t.grad.copy() for t in r.parameters()])
    worst = max(float(np.abs(a - b).max() / max(np.abs(b).max(), 1e-300)) for a, b in zip(*grads))
    assert worst <= 1e-6
    return worst


def test_criterion_05_gradient_suite():
    with criterion(5) as d:
        rng = np.random.default_rng(5)
        cases = _op_cases(rng)
        failed = []
        for name, (fn, *inputs) in cases.items():
            try:
                _check(fn, *inputs)
            except AssertionError:
                failed.append(name)
        n_backbone = _backbone_case(rng)
        st = _router_cases(rng)
        d["msg"] = (f"{len(cases) - len(failed)}/{len(cases)} ops, {n_backbone} backbone tensors, "
                    f"Gumbel path, soft_macs, both penalties; straight-through deviation {st:.1e}")
        assert not failed, failed


# -- 6 ------------------------------------------------------------------------------


def _brute_ranks(pts):
    left, rank, r = set(range(len(pts))), {}, 0
    dom = lambda a, b: a[0] <= b[0] and a[1] <= b[1] and a != b
    while left:
        layer = {i for i in left if not any(dom(pts[j], pts[i]) for j in left)}
        rank.update((i, r) for i in layer)
        left -= layer
        r += 1
    return rank


def _brute_crowding(pts):
    n = len(pts)
    if n <= 2:
        return [math.inf] * n
    out = [0.0] * n
    for k in range(2):
        vals = [p[k] for p in pts]
        lo, hi = min(vals), max(vals)
        if lo == hi:
            continue
        for i, v in enumerate(vals):
            if v in (lo, hi):
                out[i] = math.inf
            else:
                out[i] += (min(u for u in vals if u > v) - max(u for u in vals if u < v)) / (hi - lo)
    return out


def test_criterion_06_nsga2_correctness():
    with criterion(6) as d:
        rng = np.random.default_rng(6)
        for trial in range(20):
            n = int(rng.integers(1, 65))
            # half the populations are on an integer grid so ties and duplicates occur
            raw = rng.integers(0, 8, size=(n, 2)) if trial % 2 else rng.random((n, 2))
            pts = [tuple(map(float, p)) for p in raw]
            rank = _brute_ranks(pts)
            fronts = fast_nondominated_sort(pts)
            assert sorted(i for f in fronts for i in f) == list(range(n))
            for r, f in enumerate(fronts):
                assert all(rank[i] == r for i in f)
                sub = [pts[i] for i in f]
                assert list(crowding_distance(sub)) == _brute_crowding(sub)
        s = SearchSettings(population=32, partitions=20, min_gap=0.005)
        interval = lambda c: min(int(c.macs_norm * s.partitions), s.partitions - 1)
        for trial in range(20):
            n = int(rng.integers(10, 150))
            m = rng.random(n) ** 2
            cands = [Individual(np.array([i], np.uint32).view(np.uint8), float(l), float(x))
                     for i, (l, x) in enumerate(zip(rng.random(n) + 1 - m, m))]
            chosen = partitioned_select(cands, s)
            assert len(chosen) == min(n, s.population)
            occupied = {interval(c) for c in cands}
            if len(occupied) <= s.population:
                assert {interval(c) for c in chosen} == occupied
            for i in occupied:
                got = [c for c in chosen if interval(c) == i]
                if any(abs(a.macs_norm - b.macs_norm) < s.min_gap for a, b in itertools.combinations(got, 2)):
                    keys = {g.key for g in got}
                    for c in cands:
                        if interval(c) == i and c.key not in keys:
                            assert any(abs(c.macs_norm - g.macs_norm) < s.min_gap for g in got)
        d["msg"] = "20 populations match brute-force ranks and crowding; 20 selections keep coverage and min-gap"


# -- 8 ------------------------------------------------------------------------------


def test_criterion_08_curriculum_schedule():
    with criterion(8) as d:
        sched = vit_base_schedule()
        state = CurriculumState.initial(sched)
        rng = np.random.default_rng(8)
        violations, final_samples = 0, []
        per_state = 100_000 // sched.total_steps
        for _ in range(sched.total_steps):
            state = advance(state, sched)
            for _ in range(per_state):
                cfg = sample_config(state, VIT, rng)
                ok = (all(state.R_min <= r <= VIT.R_max for r in cfg.R) and all(state.H_min <= h for h in cfg.H)
                      and cfg.E >= state.E_min and cfg.D_mlp.count(False) <= state.n_max)
                violations += not ok
                if state.t > sched.expansion_steps[-1]:
                    final_samples.append(cfg)
        floors = (state.R_min, state.H_min, state.E_min)
        ps = []
        for values, support in [
            ([c.E for c in final_samples], VIT.width_choices),
            ([c.R[5] for c in final_samples], VIT.ratio_choices),
            ([c.H[7] for c in final_samples], list(range(6, 13))),
            ([c.D_mlp.count(False) for c in final_samples], [0, 1, 2]),
        ]:
            counts = Counter(values)
            ps.append(chisquare([counts[v] for v in support]).pvalue)
        d["msg"] = (f"floors {floors} after {len(sched.expansion_steps)} expansions, "
                    f"{violations} bound violations in 1e5 samples, min chi-square p {min(ps):.3f}")
        assert floors == (0.5, 6, 384) and len(sched.expansion_steps) == 6
        assert violations == 0 and min(ps) > 0.01


# -- 7, 9, 10: the default toy pipeline ---------------------------------------------


@pytest.fixture(scope="module")
def toy_runs(tmp_path_factory, request):
    mp = pytest.MonkeyPatch()
    mp.delenv("ELASTIC_SUPERNET_PRECISION", raising=False)
    request.addfinalizer(mp.undo)
    runs = []
    for i in range(2):
        out = tmp_path_factory.mktemp(f"toy{i}")
        t0 = time.perf_counter()
        hashes = run_pipeline(RunConfig.from_dict({}), out)
        runs.append((out, hashes, time.perf_counter() - t0))
    return runs


@pytest.mark.slow
def test_criterion_07_search_progress(toy_runs):
    with criterion(7) as d:
        out = toy_runs[0][0]
        cfg = RunConfig.from_dict({})
        with nx.precision("f64"):
            params, _, _ = checkpoint.load_params(out / "stage1.eavt")
            t0 = time.perf_counter()
            archive, _ = run_search(cfg, params, build_dataset(cfg))
            elapsed = time.perf_counter() - t0
        hv = archive.hv_history
        drops = sum(b < a for a, b in zip(hv, hv[1:]))
        span = max(i.macs_norm for i in archive.front) - min(i.macs_norm for i in archive.front)
        assert [float(r["hypervolume"]) for r in read_csv(out / "search_history.csv")] == hv
        d["msg"] = (f"pop 32 x 40 generations in {elapsed:.0f}s, hypervolume {hv[0]:.4f} -> {hv[-1]:.4f} "
                    f"with {drops} decreases, front span {span:.3f}")
        assert drops == 0 and span >= 0.5 and elapsed < 300


@pytest.mark.slow
def test_criterion_09_end_to_end(toy_runs):
    with criterion(9) as d:
        out, _, elapsed = toy_runs[0]
        rows = {round(r["M_t"], 2): r for r in read_budget_csv(out / "budget_eval.csv")}
        grid = [round(0.3 + 0.1 * i, 2) for i in range(7)]
        err = float(np.mean([abs(rows[m]["macs_norm"] - m) for m in grid]))
        acc_hi, acc_lo = rows[0.9]["accuracy"], rows[0.3]["accuracy"]
        base = {r["model"]: float(r["accuracy"]) for r in read_csv(out / "baseline.csv")}["baseline_maximal"]
        d["msg"] = (f"{elapsed:.0f}s; mean |macs_norm - M_t| {err:.3f}; acc@0.9 {acc_hi:.4f} vs acc@0.3 "
                    f"{acc_lo:.4f}; separately trained maximal {base:.4f}")
        assert elapsed < 600
        assert err <= 0.05
        assert acc_hi >= acc_lo
        assert abs(acc_hi - base) <= 0.02


@pytest.mark.slow
def test_criterion_10_determinism(toy_runs):
    with criterion(10) as d:
        (_, a, _), (_, b, _) = toy_runs
        same = sum(a[k] == b.get(k) for k in a)
        d["msg"] = f"{same}/{len(a)} artifact hashes identical across two f64 runs"
        assert a == b
