"""Run configuration: one YAML document, validated on load."""
from __future__ import annotations

import copy
from dataclasses import dataclass, field

import yaml

from .backbone import BackboneSpec
from .curriculum import CurriculumSchedule
from .errors import ConfigError
from .optim import OptimizerConfig
from .router import RouterSettings
from .search import SearchSettings

DEFAULTS = {
    "seed": 0,
    "precision": "f64",
    "output_dir": "runs/toy",
    "dataset": {
        "kind": "blobs",
        "classes": 4,
        "samples": 4096,
        "tokens": 9,
        "dim": 16,
        "noise": 3.0,
        "class_shift": 0.1,
        "val_fraction": 0.25,
        "seed": 0,
        "modes": 1,
    },
    "backbone": {
        "L": 4, "E_max": 64, "d_head": 8, "H_max": 8, "R_max": 4.0,
        "E_min": 32, "H_min": 4, "R_min": 0.5, "R_step": 0.5,
    },
    "optimizer": {"lr": 1e-3, "min_lr": 1e-5, "warmup_steps": 50, "weight_decay": 0.05, "beta1": 0.9, "beta2": 0.999},
    "stage0": {"steps": 300, "batch_size": 32},
    "importance": {"samples": 1024},
    "curriculum": {
        "steps": 1500,
        "expansion_steps": [100, 250, 400, 550, 700, 850],
        "n_final": 2,
        "batch_size": 32,
        "delta_R": None, "delta_H": None, "delta_E": None, "delta_n": None,
    },
    "baseline": {"steps": None},
    "search": {
        "population": 32, "crossover_p": 0.95, "mutation_p": 0.3, "generations": 40,
        "partitions": 20, "min_gap": 0.005, "eval_batch": 256,
    },
    "router": {
        "hidden": 64, "tau_start": 1.0, "tau_end": 0.05, "delta": 0.5, "lambda1": 20.0, "lambda2": 10.0,
        "phase_a_steps": 1000, "phase_b_steps": 1000, "backbone_lr": 1e-5, "lr_ratio": 1000.0, "batch_size": 32,
        "phase_a_noise": False, "phase_b_noise": False,
    },
    "eval": {"budgets": [0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9]},
}

_DATASET_KEYS = {
    "blobs": {"kind", "classes", "samples", "tokens", "dim", "noise", "class_shift", "val_fraction", "seed", "modes"},
    "idx": {"kind", "images", "labels", "patch_size", "val_fraction", "seed"},
}


def _merge(base: dict, override: dict, where: str) -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        if k not in base:
            raise ConfigError(f"unknown config key {where + '.' if where else ''}{k}")
        if isinstance(base.get(k), dict) and k != "dataset":
            if not isinstance(v, dict):
                raise ConfigError(f"config section {k} must be a mapping")
            out[k] = _merge(base[k], v, k)
        elif k == "dataset" and not where:
            if not isinstance(v, dict):
                raise ConfigError("config section dataset must be a mapping")
            kind = v.get("kind", "blobs")
            if kind not in _DATASET_KEYS:
                raise ConfigError(f"dataset.kind must be one of {sorted(_DATASET_KEYS)}, got {kind!r}")
            unknown = set(v) - _DATASET_KEYS[kind]
            if unknown:
                raise ConfigError(f"unknown dataset keys for kind {kind}: {sorted(unknown)}")
            out[k] = dict(base[k]) if kind == "blobs" else {"val_fraction": 0.2, "seed": 0}
            out[k].update(v)
        else:
            out[k] = v
    return out


def _int(section: dict, key: str, where: str, minimum: int | None = None) -> int:
    v = section[key]
    if isinstance(v, bool) or not isinstance(v, int):
        raise ConfigError(f"{where}.{key} must be an integer, got {v!r}")
    if minimum is not None and v < minimum:
        raise ConfigError(f"{where}.{key} must be >= {minimum}, got {v}")
    return v


def _num(section: dict, key: str, where: str) -> float:
    v = section[key]
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ConfigError(f"{where}.{key} must be a number, got {v!r}")
    return float(v)


@dataclass
class RunConfig:
    raw: dict = field(default_factory=lambda: copy.deepcopy(DEFAULTS))

    # -- construction -----------------------------------------------------
    @classmethod
    def from_dict(cls, d: dict | None) -> "RunConfig":
        if d is None:
            d = {}
        if not isinstance(d, dict):
            raise ConfigError("config document must be a mapping")
        cfg = cls(_merge(DEFAULTS, d, ""))
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            with open(path) as f:
                doc = yaml.safe_load(f)
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from None
        except yaml.YAMLError as e:
            raise ConfigError(f"config {path} is not valid YAML: {e}") from None
        return cls.from_dict(doc)

    def dump(self) -> str:
        return yaml.safe_dump(self.raw, sort_keys=False)

    # -- typed views ------------------------------------------------------
    @property
    def seed(self) -> int:
        return self.raw["seed"]

    @property
    def precision(self) -> str:
        return self.raw["precision"]

    @property
    def output_dir(self) -> str:
        return self.raw["output_dir"]

    def backbone_spec(self, N: int, in_dim: int, num_classes: int) -> BackboneSpec:
        return BackboneSpec(N=N, in_dim=in_dim, num_classes=num_classes, **self.raw["backbone"])

    def dataset_shape(self) -> tuple[int, int, int] | None:
        """(N, in_dim, classes) when known without reading data files."""
        d = self.raw["dataset"]
        if d["kind"] == "blobs":
            return d["tokens"], d["dim"], d["classes"]
        return None

    def optimizer(self) -> OptimizerConfig:
        return OptimizerConfig(**self.raw["optimizer"])

    def schedule(self, spec: BackboneSpec) -> CurriculumSchedule:
        c = self.raw["curriculum"]
        return CurriculumSchedule.for_spec(
            spec, c["steps"], c["expansion_steps"], c["n_final"],
            delta_R=c["delta_R"], delta_H=c["delta_H"], delta_E=c["delta_E"], delta_n=c["delta_n"],
        )

    def search(self) -> SearchSettings:
        return SearchSettings(**self.raw["search"])

    def router(self) -> RouterSettings:
        return RouterSettings(**self.raw["router"])

    @property
    def baseline_steps(self) -> int:
        b = self.raw["baseline"]["steps"]
        return self.raw["stage0"]["steps"] + self.raw["curriculum"]["steps"] if b is None else b

    @property
    def budgets(self) -> list[float]:
        return [float(b) for b in self.raw["eval"]["budgets"]]

    # -- validation -------------------------------------------------------
    def validate(self) -> None:
        r = self.raw
        _int(r, "seed", "", 0)
        if r["precision"] not in ("f32", "f64"):
            raise ConfigError(f"precision must be f32 or f64, got {r['precision']!r}")
        if not isinstance(r["output_dir"], str) or not r["output_dir"]:
            raise ConfigError("output_dir must be a non-empty string")

        d = r["dataset"]
        if d["kind"] == "blobs":
            _int(d, "classes", "dataset", 2)
            _int(d, "samples", "dataset", 1)
            _int(d, "tokens", "dataset", 2)
            _int(d, "dim", "dataset", 1)
            if _num(d, "noise", "dataset") < 0:
                raise ConfigError("dataset.noise must be non-negative")
            _num(d, "class_shift", "dataset")
            _int(d, "modes", "dataset", 1)
            if d["samples"] < d["classes"]:
                raise ConfigError("dataset.samples must be at least dataset.classes")
        else:
            for k in ("images", "labels"):
                if not isinstance(d.get(k), str):
                    raise ConfigError(f"dataset.{k} must be a file path")
            if "patch_size" not in d:
                raise ConfigError("dataset.patch_size is required for idx datasets")
            _int(d, "patch_size", "dataset", 1)
        if not 0.0 < _num(d, "val_fraction", "dataset") < 1.0:
            raise ConfigError("dataset.val_fraction must lie in (0, 1)")

        b = r["backbone"]
        for k in ("L", "E_max", "d_head", "H_max", "E_min", "H_min"):
            _int(b, k, "backbone", 1)
        for k in ("R_max", "R_min", "R_step"):
            _num(b, k, "backbone")
        shape = self.dataset_shape() or (2, 1, 2)
        spec = self.backbone_spec(*shape)  # raises ConfigError on inconsistent widths

        o = r["optimizer"]
        for k in ("lr", "min_lr", "weight_decay"):
            if _num(o, k, "optimizer") < 0:
                raise ConfigError(f"optimizer.{k} must be non-negative")
        _int(o, "warmup_steps", "optimizer", 0)
        for k in ("beta1", "beta2"):
            if not 0.0 <= _num(o, k, "optimizer") < 1.0:
                raise ConfigError(f"optimizer.{k} must lie in [0, 1)")

        _int(r["stage0"], "steps", "stage0", 0)
        _int(r["stage0"], "batch_size", "stage0", 1)
        _int(r["importance"], "samples", "importance", 1)

        c = r["curriculum"]
        _int(c, "steps", "curriculum", 1)
        _int(c, "batch_size", "curriculum", 1)
        _int(c, "n_final", "curriculum", 0)
        if c["n_final"] > spec.L:
            raise ConfigError(f"curriculum.n_final={c['n_final']} exceeds backbone.L={spec.L}")
        if not isinstance(c["expansion_steps"], list) or not all(isinstance(s, int) for s in c["expansion_steps"]):
            raise ConfigError("curriculum.expansion_steps must be a list of integers")
        self.schedule(spec)

        if r["baseline"]["steps"] is not None:
            _int(r["baseline"], "steps", "baseline", 0)
        s = r["search"]
        for k in ("population", "generations", "partitions", "eval_batch"):
            _int(s, k, "search")
        self.search()
        rt = r["router"]
        for k in ("hidden", "phase_a_steps", "phase_b_steps", "batch_size"):
            _int(rt, k, "router")
        for k in ("phase_a_noise", "phase_b_noise"):
            if not isinstance(rt[k], bool):
                raise ConfigError(f"router.{k} must be true or false, got {rt[k]!r}")
        self.router()

        budgets = r["eval"]["budgets"]
        if not isinstance(budgets, list) or not budgets:
            raise ConfigError("eval.budgets must be a non-empty list")
        for v in budgets:
            if isinstance(v, bool) or not isinstance(v, (int, float)) or not 0.0 <= v <= 1.0:
                raise ConfigError(f"eval.budgets entries must lie in [0, 1], got {v!r}")


def default_config_text() -> str:
    return RunConfig().dump()
