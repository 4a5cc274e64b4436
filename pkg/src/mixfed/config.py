"""Experiment configuration: ``key = value`` text files with ``#`` comments.

Keys (defaults in parentheses)::

    algorithm           pfedafm | pfedafm_e2e | standalone | fedavg | lg_fedavg  (pfedafm)
    N                   number of clients (10)
    C                   participation fraction in (0, 1] (1.0)
    T                   communication rounds (30)
    E                   local epochs, applied to each training phase (1)
    batch_size          (64)
    eta_omega           learning rate of the local model; also used for the
                        shared extractor (0.01)
    eta_alpha           learning rate of the mix vector (0.1)
    zoo                 heterogeneous | homogeneous (heterogeneous); client k
                        gets variant k % 5 when heterogeneous
    zoo_variant         variant used by every client when zoo = homogeneous (0)
    d                   representation width (32)
    dataset             synthetic | csv | idx (synthetic)
    data_path           csv file, or idx image file
    labels_path         idx label file
    num_classes         (10)
    input_dim           (64)
    per_class           synthetic samples per class (200)
    spread              synthetic cluster noise (see DEFAULT_SPREAD)
    partition           pathological | dirichlet (pathological)
    classes_per_client  labels per client for the pathological scheme (2)
    gamma               Dirichlet concentration (0.5)
    seed                master seed (0)
    repeats             independent repeats; repeat r uses a seed hashed from (seed, r) (1)
    target_accuracy     mean accuracy used for rounds-to-target (0.9)
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

ALGORITHMS = ("pfedafm", "pfedafm_e2e", "standalone", "fedavg", "lg_fedavg")
SWEEPABLE = ("classes_per_client", "gamma", "eta_alpha", "batch_size", "E")
DEFAULT_SPREAD = 2.5


class ConfigError(ValueError):
    """Carries every problem found in a config, not just the first."""

    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("invalid configuration:\n  " + "\n  ".join(self.problems))


@dataclass
class ExperimentConfig:
    algorithm: str = "pfedafm"
    N: int = 10
    C: float = 1.0
    T: int = 30
    E: int = 1
    batch_size: int = 64
    eta_omega: float = 0.01
    eta_alpha: float = 0.1
    zoo: str = "heterogeneous"
    zoo_variant: int = 0
    d: int = 32
    dataset: str = "synthetic"
    data_path: str = ""
    labels_path: str = ""
    num_classes: int = 10
    input_dim: int = 64
    per_class: int = 200
    spread: float = DEFAULT_SPREAD
    partition: str = "pathological"
    classes_per_client: int = 2
    gamma: float = 0.5
    seed: int = 0
    repeats: int = 1
    target_accuracy: float = 0.9

    @property
    def eta_theta(self) -> float:
        return self.eta_omega

    @property
    def num_selected(self) -> int:
        return int(np.floor(self.C * self.N + 0.5))

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    def validate(self) -> "ExperimentConfig":
        problems = validation_problems(self)
        if problems:
            raise ConfigError(problems)
        return self

    def to_text(self) -> str:
        return "".join(f"{f.name} = {getattr(self, f.name)}\n" for f in fields(self))


def validation_problems(cfg: ExperimentConfig) -> list[str]:
    p: list[str] = []
    if cfg.algorithm not in ALGORITHMS:
        p.append(f"algorithm must be one of {', '.join(ALGORITHMS)}, got {cfg.algorithm!r}")
    if cfg.N < 1:
        p.append("N (number of clients) must be >= 1")
    if not 0 < cfg.C <= 1:
        p.append("participation fraction must be in (0,1]")
    elif cfg.N >= 1 and cfg.num_selected < 1:
        p.append(f"C * N rounds to zero selected clients (C={cfg.C}, N={cfg.N})")
    if cfg.T < 0:
        p.append("T (rounds) must be >= 0")
    if cfg.E < 1:
        p.append("E (local epochs) must be >= 1")
    if cfg.batch_size < 1:
        p.append("batch_size must be >= 1")
    for name in ("eta_omega", "eta_alpha"):
        v = getattr(cfg, name)
        if not np.isfinite(v) or v < 0:
            p.append(f"{name} must be a finite non-negative number")
    if cfg.zoo not in ("heterogeneous", "homogeneous"):
        p.append(f"zoo must be 'heterogeneous' or 'homogeneous', got {cfg.zoo!r}")
    if not 0 <= cfg.zoo_variant < 5:
        p.append("zoo_variant must be in [0, 5)")
    if cfg.algorithm == "fedavg" and cfg.zoo == "heterogeneous" and cfg.N > 1:
        p.append("fedavg needs a model-homogeneous federation (set zoo = homogeneous)")
    if cfg.d < 2:
        p.append("d (representation width) must be >= 2")
    if cfg.dataset not in ("synthetic", "csv", "idx"):
        p.append(f"dataset must be synthetic, csv or idx, got {cfg.dataset!r}")
    elif cfg.dataset == "csv" and not cfg.data_path:
        p.append("dataset = csv needs data_path")
    elif cfg.dataset == "idx" and not (cfg.data_path and cfg.labels_path):
        p.append("dataset = idx needs data_path and labels_path")
    if cfg.dataset != "synthetic":
        for name in ("data_path", "labels_path"):
            path = getattr(cfg, name)
            if path and not Path(path).is_file():
                p.append(f"{name} {path!r} does not exist")
    if cfg.num_classes < 2:
        p.append("num_classes must be >= 2")
    if cfg.input_dim < 1:
        p.append("input_dim must be >= 1")
    if cfg.dataset == "synthetic":
        if cfg.per_class < 10:
            p.append("per_class must be >= 10")
        if not np.isfinite(cfg.spread) or cfg.spread < 0:
            p.append("spread must be a finite non-negative number")
    if cfg.partition not in ("pathological", "dirichlet"):
        p.append(f"partition must be pathological or dirichlet, got {cfg.partition!r}")
    if not 1 <= cfg.classes_per_client <= max(cfg.num_classes, 1):
        p.append(f"classes_per_client must be in [1, num_classes={cfg.num_classes}]")
    if not np.isfinite(cfg.gamma) or cfg.gamma <= 0:
        p.append("gamma must be a finite positive number")
    if cfg.seed < 0:
        p.append("seed must be >= 0")
    if cfg.repeats < 1:
        p.append("repeats must be >= 1")
    if not 0 < cfg.target_accuracy <= 1:
        p.append("target_accuracy must be in (0,1]")
    return p


_TYPES = {f.name: f.type for f in fields(ExperimentConfig)}


def _coerce(key: str, raw: str):
    kind = _TYPES[key]
    if kind == "int":
        return int(raw)
    if kind == "float":
        return float(raw)
    return raw


def parse_config_text(text: str, source: str = "<config>") -> ExperimentConfig:
    values: dict = {}
    problems: list[str] = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            problems.append(f"{source}:{lineno}: expected 'key = value', got {line!r}")
            continue
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in _TYPES:
            problems.append(f"{source}:{lineno}: unknown key {key!r}")
            continue
        if key in values:
            problems.append(f"{source}:{lineno}: duplicate key {key!r}")
            continue
        try:
            values[key] = _coerce(key, raw)
        except ValueError:
            problems.append(f"{source}:{lineno}: {key} expects {_TYPES[key]}, got {raw!r}")
    cfg = ExperimentConfig(**values)
    problems.extend(validation_problems(cfg))
    if problems:
        raise ConfigError(problems)
    return cfg


def parse_config(path) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError([f"cannot read config {path}: {exc.strerror}"]) from None
    return parse_config_text(text, str(path))


def coerce_value(key: str, raw: str):
    """Parse a command-line value for ``key`` with the config's field type."""
    if key not in _TYPES:
        raise ConfigError([f"unknown key {key!r}"])
    try:
        return _coerce(key, raw)
    except ValueError:
        raise ConfigError([f"{key} expects {_TYPES[key]}, got {raw!r}"]) from None
