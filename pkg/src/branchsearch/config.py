"""Run configuration: one INI file describing space, schedule, search, data.

Sections and keys are validated strictly: an unknown section or key is an
error, as is a referenced input file that does not exist. Values all have
defaults, so a minimal config can be a few lines.
"""

from __future__ import annotations

import configparser
import os
from dataclasses import dataclass, field

from .bohb import (GOOD_QUANTILE, RANDOM_FRACTION, SearchSpace)
from .losses import AdvMode
from .network import TrainSchedule
from .synthdata import DomainPair, ShiftSpec, load_pair, make_pair
from .trainer import DEFAULT_FEATURE_DIM


class ConfigError(ValueError):
    """Invalid configuration file content."""


@dataclass(frozen=True)
class SearchSettings:
    eta: int = 3
    min_budget: int = 2000
    max_budget: int = 6000
    rounds: int = 24
    parallelism: int = 8
    random_fraction: float = RANDOM_FRACTION
    good_quantile: float = GOOD_QUANTILE
    seed: int = 1
    divergence_eps: float = 0.02
    snapshot_every: int = 0
    mode: AdvMode = AdvMode.DANN
    dann_form: str = "log"
    feature_dim: int = DEFAULT_FEATURE_DIM

    def __post_init__(self):
        if self.min_budget > self.max_budget:
            raise ConfigError(
                f"min_budget {self.min_budget} exceeds max_budget {self.max_budget}")
        if self.min_budget < 1:
            raise ConfigError("min_budget must be >= 1")
        if self.eta < 2:
            raise ConfigError("eta must be >= 2")
        if self.rounds < 1 or self.parallelism < 1:
            raise ConfigError("rounds and parallelism must be >= 1")
        if self.dann_form not in ("log", "reciprocal"):
            raise ConfigError(f"dann_form must be log or reciprocal, got {self.dann_form}")


@dataclass(frozen=True)
class DataSpec:
    kind: str = "synthetic"
    k: int = 3
    n_source: int = 600
    n_target: int = 600
    dims: int = 16
    seed: int = 7
    shift: ShiftSpec = field(default_factory=ShiftSpec)
    pair_prefix: str = ""

    def corpus_id(self) -> str:
        if self.kind == "csv":
            return os.path.basename(self.pair_prefix)
        s = self.shift
        return (f"k{self.k}d{self.dims}s{self.seed}"
                f"-rot{s.rotation_deg:g}-tr{s.translation:g}-sk{s.prior_skew:g}")

    def build_pair(self) -> DomainPair:
        if self.kind == "csv":
            return load_pair(self.pair_prefix)
        return make_pair(self.shift, self.k, self.n_source, self.n_target,
                         self.dims, self.seed)


@dataclass(frozen=True)
class RunConfig:
    space: SearchSpace = field(default_factory=SearchSpace)
    schedule: TrainSchedule = field(default_factory=TrainSchedule)
    search: SearchSettings = field(default_factory=SearchSettings)
    data: DataSpec = field(default_factory=DataSpec)
    regressor_path: str = ""
    ems_features: tuple = ()
    output_dir: str = "runs/out"


def _intlist(text):
    return tuple(int(v.strip()) for v in text.split(",") if v.strip())


def _strlist(text):
    return tuple(v.strip() for v in text.split(",") if v.strip())


_SCHEMA = {
    "space": {
        "lambda_low": float, "lambda_high": float, "dropout_max": float,
        "n_fc_choices": _intlist, "fc_h_choices": _intlist, "fc_b_choices": _intlist,
    },
    "schedule": {
        "mu0": float, "alpha": float, "beta": float, "gamma": float,
        "momentum": float, "weight_decay": float, "batch_size": int,
        "head_lr_multiplier": float, "head_weight_decay": float,
    },
    "search": {
        "eta": int, "min_budget": int, "max_budget": int, "rounds": int,
        "parallelism": int, "random_fraction": float, "good_quantile": float,
        "seed": int, "divergence_eps": float, "snapshot_every": int,
        "mode": str, "dann_form": str, "feature_dim": int,
    },
    "data": {
        "kind": str, "k": int, "n_source": int, "n_target": int, "dims": int,
        "seed": int, "rotation_deg": float, "translation": float,
        "prior_skew": float, "cluster_std": float, "ring_wobble": float,
        "pair_prefix": str,
    },
    "ems": {"regressor_path": str, "features": _strlist},
    "output": {"dir": str},
}

_SPACE_KEYMAP = {"lambda_low": "lam_low", "lambda_high": "lam_high"}


def _section(cp, name):
    """Parsed key-value dict for one section, rejecting unknown keys."""
    if not cp.has_section(name):
        return {}
    known = _SCHEMA[name]
    out = {}
    for key, raw in cp.items(name):
        if key not in known:
            raise ConfigError(f"unknown key [{name}] {key}")
        try:
            out[key] = known[key](raw)
        except ValueError as e:
            raise ConfigError(f"bad value for [{name}] {key}: {raw!r}") from e
    return out


def load_config(path) -> RunConfig:
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    try:
        with open(path) as f:
            cp.read_file(f)
    except configparser.Error as e:
        raise ConfigError(f"cannot parse {path}: {e}") from e
    for section in cp.sections():
        if section not in _SCHEMA:
            raise ConfigError(f"unknown section [{section}]")

    try:
        space_kw = {_SPACE_KEYMAP.get(k, k): v for k, v in _section(cp, "space").items()}
        space = SearchSpace(**space_kw)
        schedule = TrainSchedule(**_section(cp, "schedule"))

        search_kw = _section(cp, "search")
        if "mode" in search_kw:
            try:
                search_kw["mode"] = AdvMode(search_kw["mode"].lower())
            except ValueError:
                raise ConfigError(f"mode must be dann or alda, got {search_kw['mode']!r}")
        search = SearchSettings(**search_kw)

        data_kw = _section(cp, "data")
        shift_kw = {k: data_kw.pop(k) for k in
                    ("rotation_deg", "translation", "prior_skew", "cluster_std",
                     "ring_wobble")
                    if k in data_kw}
        data = DataSpec(shift=ShiftSpec(**shift_kw), **data_kw)
    except ConfigError:
        raise
    except ValueError as e:
        raise ConfigError(str(e)) from e

    if data.kind not in ("synthetic", "csv"):
        raise ConfigError(f"data kind must be synthetic or csv, got {data.kind!r}")
    if data.kind == "csv":
        if not data.pair_prefix:
            raise ConfigError("data kind csv requires pair_prefix")
        for suffix in ("_source.csv", "_target.csv", "_target_labels.csv", "_meta.json"):
            p = data.pair_prefix + suffix
            if not os.path.exists(p):
                raise ConfigError(f"referenced data file not found: {p}")

    ems_kw = _section(cp, "ems")
    out_kw = _section(cp, "output")
    return RunConfig(
        space=space, schedule=schedule, search=search, data=data,
        regressor_path=ems_kw.get("regressor_path", ""),
        ems_features=ems_kw.get("features", ()),
        output_dir=out_kw.get("dir", "runs/out"),
    )
