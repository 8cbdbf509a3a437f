"""Experiment configuration: a YAML key-value tree with dotted-key overrides.

Every key is optional; see ``DEFAULTS`` for the full tree and README.md for
a description of each entry.
"""

from __future__ import annotations

import copy
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import numpy as np
import yaml

from .analysis import DEFAULT_TIE_THRESHOLD
from .errors import ConfigError, LayerLabError
from .model import ModelConfig
from .prior import TaskPrior

INTERVENTIONS = ("skip", "swap", "repeat", "early-exit", "probe", "cosine")
FORMATS = ("csv", "json", "svg")
PROBE_KINDS = ("linear", "knn", "decoder")

DEFAULTS: dict[str, Any] = {
    "seed": 0,
    "output_dir": "layerlab-out",
    "formats": list(FORMATS),
    "tie_threshold": DEFAULT_TIE_THRESHOLD,
    "workers": 1,
    "model": {
        "checkpoint": None,
        "save_checkpoint": "model.llab",
        "config": {
            "variant": "row",
            "layers": 6,
            "model_dim": 64,
            "heads": 4,
            "ff_dim": 64,
            "embed_stage_layers": 1,
            "max_features": 8,
            "seed": None,  # None: derived from the global seed
        },
        "training": {
            "steps": 3000,
            "batch_tasks": 8,
            "learning_rate": 1e-3,
            "prior": {
                "feature_count_range": [2, 8],
                "sample_count_range": [40, 120],
                "teacher": "linear",
                "noise_std": 0.1,
                "seed": 0,
            },
        },
    },
    "datasets": {
        "synthetic": {
            "count": 5,
            "prior": {
                "feature_count_range": [2, 8],
                "sample_count_range": [150, 200],
                "teacher": "linear",
                "noise_std": 0.1,
                "seed": 1,
            },
        },
        "csv": [],
        "max_rows": 512,
    },
    "episode": {"support_fraction": 0.35, "probe_fraction": 0.35},
    "interventions": list(INTERVENTIONS),
    "grid": {
        "repeat_k": 2,
        "probe_kinds": list(PROBE_KINDS),
        "linear_reg": 1e-4,
        "knn_k": 5,
        "decoder_steps": 100,
        "decoder_learning_rate": 1e-2,
    },
}


def cell_seed(global_seed: int, *key) -> np.random.SeedSequence:
    """Deterministic child seed for a named unit of work (order of execution is irrelevant)."""
    words = [int(global_seed) & 0xFFFFFFFF]
    for part in key:
        words.append(zlib.crc32(part.encode()) if isinstance(part, str) else int(part) & 0xFFFFFFFF)
    return np.random.SeedSequence(words)


def cell_rng(global_seed: int, *key) -> np.random.Generator:
    return np.random.default_rng(cell_seed(global_seed, *key))


def _merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        where = f"{path}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base[key], dict) and key not in ("config",):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {where!r} must be a mapping")
            out[key] = _merge(base[key], value, where + ".")
        elif isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {where!r} must be a mapping")
            out[key] = {**base[key], **value}
        else:
            out[key] = copy.deepcopy(value)
    return out


def set_dotted(tree: dict, dotted: str, raw_value: str) -> None:
    """Apply ``a.b.c=value`` (value parsed as YAML) to a nested dict."""
    keys = dotted.split(".")
    node = tree
    for k in keys[:-1]:
        node = node.setdefault(k, {})
        if not isinstance(node, dict):
            raise ConfigError(f"cannot set {dotted!r}: {k!r} is not a mapping")
    try:
        node[keys[-1]] = yaml.safe_load(raw_value)
    except yaml.YAMLError as exc:
        raise ConfigError(f"bad override value for {dotted!r}: {exc}") from exc


def _prior(d: dict, where: str) -> TaskPrior:
    try:
        return TaskPrior(
            feature_count_range=tuple(d["feature_count_range"]),
            sample_count_range=tuple(d["sample_count_range"]),
            teacher=d["teacher"],
            noise_std=float(d["noise_std"]),
            seed=int(d["seed"]),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: invalid prior ({exc})") from exc


@dataclass
class ExperimentConfig:
    tree: dict
    source: str | None = None

    @classmethod
    def from_tree(cls, tree: dict | None, source: str | None = None) -> "ExperimentConfig":
        merged = _merge(DEFAULTS, tree or {})
        cfg = cls(merged, source)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path: str | Path | None, overrides: dict | None = None) -> "ExperimentConfig":
        tree: dict = {}
        if path is not None:
            try:
                tree = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
            except OSError as exc:
                raise ConfigError(f"cannot read config {path}: {exc}") from exc
            except yaml.YAMLError as exc:
                raise ConfigError(f"config {path} is not valid YAML: {exc}") from exc
            if not isinstance(tree, dict):
                raise ConfigError(f"config {path} must be a mapping at the top level")
        for dotted, value in (overrides or {}).items():
            set_dotted(tree, dotted, value)
        return cls.from_tree(tree, None if path is None else str(path))

    # typed views

    @property
    def seed(self) -> int:
        return int(self.tree["seed"])

    @property
    def output_dir(self) -> Path:
        return Path(self.tree["output_dir"])

    @property
    def formats(self) -> list[str]:
        return list(self.tree["formats"])

    @property
    def tie_threshold(self) -> float:
        return float(self.tree["tie_threshold"])

    @property
    def interventions(self) -> list[str]:
        return list(self.tree["interventions"])

    @property
    def workers(self) -> int:
        return int(self.tree["workers"])

    @property
    def model_config(self) -> ModelConfig:
        d = dict(self.tree["model"]["config"])
        if d.get("seed") is None:
            d["seed"] = int(cell_seed(self.seed, "model-init").generate_state(1)[0])
        return ModelConfig.from_dict(d)

    @property
    def training(self) -> dict:
        return self.tree["model"]["training"]

    @property
    def training_prior(self) -> TaskPrior:
        return _prior(self.training["prior"], "model.training.prior")

    @property
    def synthetic_prior(self) -> TaskPrior:
        return _prior(self.tree["datasets"]["synthetic"]["prior"], "datasets.synthetic.prior")

    @property
    def grid(self) -> dict:
        return self.tree["grid"]

    def validate(self) -> None:
        t = self.tree
        try:
            int(t["seed"])
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"seed must be an integer, got {t['seed']!r}") from exc
        bad = [f for f in t["formats"] if f not in FORMATS]
        if bad:
            raise ConfigError(f"unknown output formats {bad}; choose from {list(FORMATS)}")
        if not isinstance(t["interventions"], list) or not t["interventions"]:
            raise ConfigError("at least one intervention is required")
        bad = [i for i in t["interventions"] if i not in INTERVENTIONS]
        if bad:
            raise ConfigError(f"unknown interventions {bad}; choose from {list(INTERVENTIONS)}")
        if not float(t["tie_threshold"]) >= 0:
            raise ConfigError("tie_threshold must be >= 0")
        if int(t["workers"]) < 1:
            raise ConfigError("workers must be >= 1")
        ds = t["datasets"]
        n_synth = int(ds["synthetic"]["count"])
        if n_synth < 0:
            raise ConfigError("datasets.synthetic.count must be >= 0")
        if not isinstance(ds["csv"], list):
            raise ConfigError("datasets.csv must be a list")
        for i, entry in enumerate(ds["csv"]):
            if not isinstance(entry, dict) or "path" not in entry or "target" not in entry:
                raise ConfigError(f"datasets.csv[{i}] needs 'path' and 'target'")
            extra = set(entry) - {"path", "target", "schema", "name"}
            if extra:
                raise ConfigError(f"datasets.csv[{i}]: unknown keys {sorted(extra)}")
        if n_synth == 0 and not ds["csv"]:
            raise ConfigError("at least one dataset source (synthetic or csv) is required")
        ep = t["episode"]
        fs, fp = float(ep["support_fraction"]), float(ep["probe_fraction"])
        if not (0 < fs < 1 and 0 < fp < 1 and fs + fp < 1):
            raise ConfigError("episode fractions must lie in (0, 1) and sum to < 1")
        g = t["grid"]
        if int(g["repeat_k"]) < 2:
            raise ConfigError("grid.repeat_k must be >= 2 (k=1 is the unmodified model)")
        bad = [k for k in g["probe_kinds"] if k not in PROBE_KINDS]
        if bad or not g["probe_kinds"]:
            raise ConfigError(f"grid.probe_kinds must be a nonempty subset of {list(PROBE_KINDS)}")
        tr = t["model"]["training"]
        if int(tr["steps"]) < 0 or int(tr["batch_tasks"]) < 1 or float(tr["learning_rate"]) < 0:
            raise ConfigError("model.training needs steps >= 0, batch_tasks >= 1, learning_rate >= 0")
        try:
            self.model_config
            self.training_prior
            if n_synth:
                self.synthetic_prior
        except LayerLabError as exc:
            raise ConfigError(str(exc)) from exc
        except TypeError as exc:
            raise ConfigError(f"invalid model config: {exc}") from exc
