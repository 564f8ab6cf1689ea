"""Run configuration: strict JSON schema, shipped presets and the config hash."""
from __future__ import annotations

import copy
import hashlib
import json
import math
import os
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .dsm import DsmTask
from .dynamics import RelaxationConfig
from .substrate import spec_from_dict


class ConfigError(ValueError):
    pass


def _from_dict(cls, d, where):
    if not isinstance(d, dict):
        raise ConfigError(f"{where} must be an object")
    names = {f.name for f in fields(cls)}
    extra = set(d) - names
    if extra:
        raise ConfigError(f"unknown keys in {where}: {sorted(extra)}")
    try:
        return cls(**d)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


@dataclass(frozen=True)
class Grid:
    """Log-spaced grid ``start .. stop`` with ``num`` points."""

    start: float
    stop: float
    num: int

    def __post_init__(self):
        if not (0 < self.start <= self.stop) or self.num < 1:
            raise ValueError(f"invalid grid {self}")

    def values(self):
        return np.logspace(math.log10(self.start), math.log10(self.stop), self.num)


@dataclass(frozen=True)
class DynamicsSection:
    """Relaxation settings; ``beta_phys=None`` means deterministic."""

    step_size: float | None = None
    step_scale: float = 0.1
    max_steps: int = 300
    tol: float = 0.0
    beta_phys: float | None = None
    tau: float = 0.0

    def relaxation(self, seed=0):
        return RelaxationConfig(
            step_size=self.step_size,
            max_steps=self.max_steps,
            beta_phys=math.inf if self.beta_phys is None else self.beta_phys,
            tol=self.tol,
            tau=self.tau,
            seed=seed,
            step_scale=self.step_scale,
        )


@dataclass(frozen=True)
class TaskSection:
    data_dim: int
    data_cov_seed: int = 0
    sigma_range: tuple = (0.1, 1.0)
    batch: int = 16

    def task(self, rng_seed):
        return DsmTask(self.data_dim, self.data_cov_seed, tuple(self.sigma_range), self.batch, rng_seed)


@dataclass(frozen=True)
class E1Section:
    beta: float = 0.01
    consistency_beta: float = 1e-3


@dataclass(frozen=True)
class E2Section:
    betas: Grid = Grid(1e-3, 1e-1, 12)


@dataclass(frozen=True)
class E3Section:
    betas: Grid = Grid(1e-2, 0.5, 12)
    beta_phys: float = 1e7
    tau: float = 20.0
    max_steps: int = 500
    step_scale: float = 0.1
    n_rep: int = 64
    noise_seed: int = 1

    def relaxation(self, seed):
        return RelaxationConfig(max_steps=self.max_steps, beta_phys=self.beta_phys, tau=self.tau,
                                seed=seed, step_scale=self.step_scale)


@dataclass(frozen=True)
class TrainSection:
    steps: int = 200
    lr: float = 1e-2
    beta: float = 0.01
    eval_batch: int = 128
    eval_every: int = 10
    data_seed: int = 1000


@dataclass(frozen=True)
class RunConfig:
    name: str
    substrate: dict
    task: TaskSection
    dynamics: DynamicsSection = DynamicsSection()
    exact: DynamicsSection = DynamicsSection(step_scale=1.0, max_steps=200_000, tol=1e-12)
    seeds: tuple = tuple(range(10))
    e1: E1Section = E1Section()
    e2: E2Section = E2Section()
    e3: E3Section = E3Section()
    train: TrainSection = TrainSection()
    _spec_cache: dict = field(default_factory=dict, repr=False, compare=False)

    def spec(self):
        """Substrate built from ``substrate`` (memoized)."""
        if "spec" not in self._spec_cache:
            self._spec_cache["spec"] = spec_from_dict(self.substrate)
        return self._spec_cache["spec"][0]

    def coupling_rescale(self):
        self.spec()
        return self._spec_cache["spec"][1]

    def to_dict(self):
        d = asdict(self)
        d.pop("_spec_cache")
        d["seeds"] = list(self.seeds)
        return _jsonable(d)

    def config_hash(self):
        return hashlib.sha256(canonical_json(self.to_dict()).encode()).hexdigest()[:12]

    def with_seeds(self, seeds):
        d = self.to_dict()
        d["seeds"] = list(seeds)
        return config_from_dict(d)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def canonical_json(d):
    return json.dumps(d, sort_keys=True, separators=(",", ":"))


_SECTIONS = {
    "task": TaskSection,
    "dynamics": DynamicsSection,
    "exact": DynamicsSection,
    "e1": E1Section,
    "e2": E2Section,
    "e3": E3Section,
    "train": TrainSection,
}


def config_from_dict(d):
    d = copy.deepcopy(d)
    allowed = {"name", "substrate", "seeds"} | set(_SECTIONS)
    extra = set(d) - allowed
    if extra:
        raise ConfigError(f"unknown top-level keys: {sorted(extra)}")
    for key in ("name", "substrate", "task"):
        if key not in d:
            raise ConfigError(f"missing required key '{key}'")
    kwargs = {"name": d["name"], "substrate": d["substrate"]}
    for key, cls in _SECTIONS.items():
        if key not in d:
            continue
        sec = dict(d[key])
        if "betas" in sec and isinstance(sec["betas"], dict):
            sec["betas"] = _from_dict(Grid, sec["betas"], f"{key}.betas")
        if "sigma_range" in sec:
            sec["sigma_range"] = tuple(sec["sigma_range"])
        kwargs[key] = _from_dict(cls, sec, key)
    if "seeds" in d:
        kwargs["seeds"] = tuple(int(s) for s in d["seeds"])
    cfg = RunConfig(**kwargs)
    try:
        cfg.spec()
    except ValueError as exc:
        raise ConfigError(f"substrate: {exc}") from exc
    return cfg


def load_config(path):
    with open(path) as fh:
        return config_from_dict(json.load(fh))


def apply_seed_override(cfg, env=None):
    """Shift the seed list to start at ``$THERMOPROP_SEED`` when it is set."""
    env = os.environ if env is None else env
    raw = env.get("THERMOPROP_SEED")
    if raw is None or raw == "":
        return cfg
    base = int(raw)
    return cfg.with_seeds(range(base, base + len(cfg.seeds)))


def _all_pairs(n_modules, rank, gain, seed0):
    return [
        {"m": m, "mp": mp, "k": rank, "seed": seed0 + 10 * m + mp, "gain": gain}
        for m in range(n_modules) for mp in range(m + 1, n_modules)
    ]


def _reference_substrate():
    # four modules of 16; input = 16 data coords + log(sigma)
    return {
        "partition": {"input_dim": 17, "hidden_dim": 31, "output_dim": 16, "module_sizes": [16, 16, 16, 16]},
        "base": {"a": 1.0, "b0": 0.0, "kappa": 0.0},
        "couplings": _all_pairs(4, 16, 16.0, 0),
        "lambda_floor": 0.1,
        "auto_rescale": True,
    }


def _preset_dicts():
    ref = {
        "substrate": _reference_substrate(),
        "task": {"data_dim": 16, "data_cov_seed": 0, "sigma_range": [0.1, 1.0], "batch": 16},
        "seeds": list(range(10)),
    }
    exact = {"step_size": None, "step_scale": 1.0, "max_steps": 200_000, "tol": 1e-12,
             "beta_phys": None, "tau": 0.0}
    return {
        "paper-e1": dict(ref, name="paper-e1"),
        "paper-exact": dict(ref, name="paper-exact", dynamics=dict(exact)),
        "desk-small": {
            "name": "desk-small",
            "substrate": {
                "partition": {"input_dim": 5, "hidden_dim": 7, "output_dim": 4, "module_sizes": [4, 4, 4, 4]},
                "base": {"a": 1.0, "b0": 0.0, "kappa": 0.0},
                "couplings": _all_pairs(4, 4, 16.0, 20),
                "lambda_floor": 0.1,
                "auto_rescale": True,
            },
            "task": {"data_dim": 4, "data_cov_seed": 0, "sigma_range": [0.1, 1.0], "batch": 16},
            "exact": dict(exact, tol=1e-10),
            "seeds": list(range(10)),
        },
        "desk-tiny": {
            "name": "desk-tiny",
            "substrate": {
                "partition": {"input_dim": 3, "hidden_dim": 3, "output_dim": 2, "module_sizes": [3, 3, 2]},
                "base": {"a": 1.0, "b0": 0.0, "kappa": 0.0},
                "couplings": _all_pairs(3, 2, 0.5, 10),
                "lambda_floor": 0.1,
            },
            "task": {"data_dim": 2, "data_cov_seed": 0, "sigma_range": [0.3, 1.0], "batch": 8},
            "seeds": [0],
        },
    }


PRESET_NAMES = ("paper-e1", "paper-exact", "desk-small", "desk-tiny")


def preset(name):
    dicts = _preset_dicts()
    if name not in dicts:
        raise ConfigError(f"unknown preset '{name}'; choose from {', '.join(PRESET_NAMES)}")
    return config_from_dict(dicts[name])
