"""Two-stage orchestration with per-stage checkpoints, resume and a hash manifest.

Stages, in order::

    stage0     full-model warm-up
    rearrange  importance scoring and unit reordering
    stage1     curriculum elastic adaptation
    baseline   separately trained maximal model (reference only)
    search     NSGA-II over the adapted supernet
    router     router warm-up, then joint router/backbone training
    eval       budget grid through the trained router

Every stage reloads its inputs from the checkpoints written by earlier
stages, so a resumed run computes exactly what an uninterrupted one does.
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
import time
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import checkpoint, codec
from . import numerics as nx
from .backbone import ElasticParams, SubmodelConfig, max_macs
from .config import RunConfig
from .curriculum import TrainLog, stage1_train, train_full
from .data import BlobSpec, Dataset, generate_blobs, load_idx
from .errors import ConfigError, DataFormatError, NumericalError, SearchError
from .evaluate import evaluate_split, mean_token_baseline
from .importance import rearrange, score_importance
from .router import RouterParams, routed_config, stage2_train
from .search import ParetoArchive, evolve

log = logging.getLogger(__name__)

STAGES = ("stage0", "rearrange", "stage1", "baseline", "search", "router", "eval")

BUDGET_HEADER = ["M_t", "realized_macs", "macs_norm", "accuracy", "genome_hex"]
BASELINE_HEADER = ["model", "macs", "accuracy", "loss"]
HISTORY_HEADER = ["generation", "hypervolume", "front_size", "best_loss"]


def stage_seed(seed: int, stage: str) -> int:
    """Independent, reproducible seed per stage."""
    return int(np.random.SeedSequence([seed, zlib.crc32(stage.encode())]).generate_state(1)[0])


def build_dataset(cfg: RunConfig) -> Dataset:
    d = dict(cfg.raw["dataset"])
    kind = d.pop("kind")
    if kind == "blobs":
        return generate_blobs(BlobSpec(**d))
    return load_idx(d["images"], d["labels"], d["patch_size"], d["val_fraction"], d["seed"])


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(header)
        w.writerows(rows)


def read_csv(path) -> list[dict]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def read_budget_csv(path) -> list[dict]:
    rows = read_csv(path)
    return [
        {"M_t": float(r["M_t"]), "realized_macs": int(r["realized_macs"]), "macs_norm": float(r["macs_norm"]),
         "accuracy": float(r["accuracy"]), "genome_hex": r["genome_hex"]}
        for r in rows
    ]


def budget_rows(params: ElasticParams, router: RouterParams, dataset: Dataset, budgets, delta: float) -> list[list]:
    spec = params.spec
    m0 = max_macs(spec)
    rows = []
    for M_t in budgets:
        cfg = routed_config(router, M_t, spec, delta)
        met = evaluate_split(params, cfg, dataset, "val")
        rows.append([repr(float(M_t)), met.macs, repr(met.macs / m0), repr(met.accuracy),
                     codec.to_hex(codec.encode(cfg, spec))])
    return rows


def run_search(cfg: RunConfig, params: ElasticParams, data: Dataset) -> tuple[ParetoArchive, list[list]]:
    """NSGA-II on a fixed batch drawn from the training split."""
    settings = cfg.search()
    rng = np.random.default_rng(stage_seed(cfg.seed, "search"))
    n = len(data.train_y)
    pick = rng.choice(n, size=min(settings.eval_batch, n), replace=False)
    history = []

    def on_gen(gen, pop, front, hv):
        history.append([gen, repr(hv), len(front), repr(min(p.loss for p in pop))])
        if gen % 10 == 0:
            log.info("search generation %d: hypervolume %.6f, front size %d", gen, hv, len(front))

    archive = evolve(params, data.train_x[pick], data.train_y[pick], settings, rng, on_gen)
    return archive, history


def run_router(cfg: RunConfig, params: ElasticParams, front, data: Dataset):
    rs = cfg.router()
    router = RouterParams.init(params.spec, rs.hidden, stage_seed(cfg.seed, "router-init"))
    return stage2_train(params, router, front, data, rs, stage_seed(cfg.seed, "router"))


@dataclass
class Artifacts:
    root: Path

    def __getattr__(self, name):
        names = {
            "config": "config.yaml", "state": "stages.json", "manifest": "manifest.txt",
            "dataset": "dataset.txt",
            "stage0": "stage0.eavt", "stage0_log": "stage0_log.txt",
            "rearranged": "rearranged.eavt", "permutation": "permutation.txt",
            "stage1": "stage1.eavt", "stage1_log": "stage1_log.txt",
            "baseline": "baseline.eavt", "baseline_log": "baseline_log.txt", "baseline_csv": "baseline.csv",
            "archive": "archive.csv", "front0": "front0.csv", "history": "search_history.csv",
            "stage2": "stage2.eavt", "stage2_log": "stage2_log.txt",
            "budgets": "budget_eval.csv",
        }
        if name not in names:
            raise AttributeError(name)
        return self.root / names[name]


STAGE_OUTPUTS = {
    "stage0": ("stage0", "stage0_log"),
    "rearrange": ("rearranged", "permutation"),
    "stage1": ("stage1", "stage1_log"),
    "baseline": ("baseline", "baseline_log"),
    "search": ("archive", "front0", "history"),
    "router": ("stage2", "stage2_log"),
    "eval": ("budgets", "baseline_csv"),
}


class Pipeline:
    def __init__(self, cfg: RunConfig, out_dir=None, resume: bool = False):
        self.cfg = cfg
        self.art = Artifacts(Path(out_dir or cfg.output_dir))
        self.resume = resume
        self.done: list[str] = []

    # -- bookkeeping ------------------------------------------------------
    def _prepare(self) -> None:
        root = self.art.root
        root.mkdir(parents=True, exist_ok=True)
        text = self.cfg.dump()
        if self.resume and self.art.config.exists():
            if self.art.config.read_text() != text:
                raise ConfigError(f"config differs from the one stored in {root}; refusing to resume")
            if self.art.state.exists():
                self.done = json.loads(self.art.state.read_text())["completed"]
        else:
            self.done = []
        self.art.config.write_text(text)

    def _complete(self, stage: str) -> None:
        self.done.append(stage)
        self.art.state.write_text(json.dumps({"completed": self.done}) + "\n")

    def _skip(self, stage: str) -> bool:
        return stage in self.done and all(getattr(self.art, k).exists() for k in STAGE_OUTPUTS[stage])

    def write_manifest(self) -> dict[str, str]:
        files = sorted(p for p in self.art.root.iterdir()
                       if p.is_file() and p.name not in ("manifest.txt", "stages.json"))
        hashes = {p.name: sha256_file(p) for p in files}
        self.art.manifest.write_text("".join(f"{h}  {n}\n" for n, h in hashes.items()))
        return hashes

    # -- run --------------------------------------------------------------
    def run(self, stop_after: str | None = None) -> dict[str, str]:
        env = os.environ.get("ELASTIC_SUPERNET_PRECISION")
        with nx.precision(env or self.cfg.precision):
            self._prepare()
            data = build_dataset(self.cfg)
            self.data = data
            self.spec = self.cfg.backbone_spec(data.N, data.in_dim, data.num_classes)
            self.art.dataset.write_text(
                f"train={data.train_x.shape} val={data.val_x.shape} classes={data.num_classes}\n"
                f"mean_token_softmax_regression_val_accuracy={mean_token_baseline(data)!r}\n"
            )
            for stage in STAGES:
                if self._skip(stage):
                    log.info("stage %s: already complete, skipping", stage)
                else:
                    t0 = time.perf_counter()
                    try:
                        getattr(self, "_" + stage)()
                    except (ConfigError, DataFormatError, NumericalError, SearchError) as e:
                        log.error("stage %s failed: %s", stage, e)
                        raise type(e)(f"stage {stage}: {e} (earlier stages are checkpointed in "
                                      f"{self.art.root}; rerun with --resume)") from e
                    self._complete(stage)
                    log.info("stage %s: %.1fs", stage, time.perf_counter() - t0)
                if stage == stop_after:
                    break
            return self.write_manifest()

    def _load(self, key):
        params, extra, _ = checkpoint.load_params(getattr(self.art, key))
        return params, extra

    def _stage0(self):
        c = self.cfg
        params = ElasticParams.init(self.spec, stage_seed(c.seed, "init"))
        tl = TrainLog()
        train_full(params, self.data, c.raw["stage0"]["steps"], c.optimizer(), stage_seed(c.seed, "stage0"),
                   c.raw["stage0"]["batch_size"], tl)
        checkpoint.save_params(self.art.stage0, params, meta={"stage": "stage0"})
        self.art.stage0_log.write_text(tl.text())

    def _rearrange(self):
        params, _ = self._load("stage0")
        n = min(self.cfg.raw["importance"]["samples"], len(self.data.train_y))
        report = score_importance(params, self.data.train_x[:n], n)
        params, rec = rearrange(params, report)
        checkpoint.save_params(self.art.rearranged, params, meta={"stage": "rearrange"})
        self.art.permutation.write_text(rec.audit_text())

    def _stage1(self):
        c = self.cfg
        params, _ = self._load("rearranged")
        tl = TrainLog()
        stage1_train(params, c.schedule(self.spec), self.data, c.optimizer(), stage_seed(c.seed, "stage1"),
                     c.raw["curriculum"]["batch_size"], train_log=tl)
        checkpoint.save_params(self.art.stage1, params, meta={"stage": "stage1"})
        self.art.stage1_log.write_text(tl.text())

    def _baseline(self):
        c = self.cfg
        params = ElasticParams.init(self.spec, stage_seed(c.seed, "init"))
        tl = TrainLog()
        train_full(params, self.data, c.baseline_steps, c.optimizer(), stage_seed(c.seed, "baseline"),
                   c.raw["stage0"]["batch_size"], tl)
        checkpoint.save_params(self.art.baseline, params, meta={"stage": "baseline"})
        self.art.baseline_log.write_text(tl.text())

    def _search(self):
        params, _ = self._load("stage1")
        archive, history = run_search(self.cfg, params, self.data)
        archive.write_csv(self.art.archive)
        archive.write_csv(self.art.front0, front_only=True)
        write_csv(self.art.history, HISTORY_HEADER, history)

    def _router(self):
        params, _ = self._load("stage1")
        front = ParetoArchive.read_csv(self.art.front0, self.spec)
        params, router, lg = run_router(self.cfg, params, front, self.data)
        checkpoint.save_params(self.art.stage2, params, extra=router.arrays(), meta={"stage": "router"})
        self.art.stage2_log.write_text(lg.text())

    def _eval(self):
        c = self.cfg
        params, extra = self._load("stage2")
        router = RouterParams.from_arrays(extra)
        rows = budget_rows(params, router, self.data, c.budgets, c.router().delta)
        write_csv(self.art.budgets, BUDGET_HEADER, rows)
        full = SubmodelConfig.maximal(self.spec)
        brows = []
        for name, key in (("baseline_maximal", "baseline"), ("stage1_maximal", "stage1"), ("stage2_maximal", "stage2")):
            p, _ = self._load(key)
            m = evaluate_split(p, full, self.data, "val")
            brows.append([name, m.macs, repr(m.accuracy), repr(m.loss)])
        write_csv(self.art.baseline_csv, BASELINE_HEADER, brows)


def run_pipeline(cfg: RunConfig, out_dir=None, resume: bool = False, stop_after: str | None = None) -> dict[str, str]:
    return Pipeline(cfg, out_dir, resume).run(stop_after)
