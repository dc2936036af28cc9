"""Experiment configuration: INI files, ``--set`` overrides and ``HETFCL_`` environment variables.

Precedence, lowest first: built-in defaults, config file, ``--set key=value``,
environment. Keys are addressed as ``section.key``; the ``experiment`` section
may be omitted (``seed=7`` equals ``experiment.seed=7``). Environment variables
use ``HETFCL_<SECTION>__<KEY>`` with dots in the section written as ``_``:
``HETFCL_SEED``, ``HETFCL_SCHEDULE__ROUNDS``, ``HETFCL_STRATEGY_EWC__LAM``.
"""
from __future__ import annotations

import configparser
import dataclasses
import io
import os
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

from .generator.backends import BACKEND_KINDS
from .losses import ENSEMBLE_MODES
from .models import ARCHS, HEAD_KINDS

STRATEGIES = ("ours", "fedavg", "fed_ewc", "fedlwf_2t", "kd_ft", "kd_ewc", "kd_lwf")
HOMOGENEOUS = ("fedavg", "fed_ewc", "fedlwf_2t")
ENV_PREFIX = "HETFCL_"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RoundSchedule:
    rounds: int = 5             # Q, communication rounds per task
    local_rounds: int = 1       # Q_l
    local_steps: int | None = 50  # SGD steps per local round; none = one pass over the hybrid set
    proto_rounds: int = 5       # Q_p
    proto_steps: int = 40       # optimizer steps per client per prototype round
    proto_lr: float = 0.1
    proto_batch: int = 64
    server_epochs: int = 2      # Q_ks
    feedback_epochs: int = 1    # Q_sk
    lr: float = 0.01
    batch_size: int = 128

    def __post_init__(self):
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, (int, float)) and not isinstance(v, bool) and v < 0:
                raise ConfigError(f"schedule.{f.name} must be >= 0, got {v}")
        if not self.lr > 0 or not self.proto_lr > 0:
            raise ConfigError("learning rates must be positive")
        if self.batch_size < 1 or self.proto_batch < 1:
            raise ConfigError("batch sizes must be >= 1")
        if self.local_steps == 0:
            raise ConfigError("schedule.local_steps must be positive or none")


@dataclass(frozen=True)
class SyntheticSizes:
    """Set-level sample budgets, split evenly over the classes of each set."""

    client_cur: int = 200
    client_pre: int = 100
    server_cur: int = 500
    server_pre: int = 500

    def __post_init__(self):
        for f in dataclasses.fields(self):
            if getattr(self, f.name) < 0:
                raise ConfigError(f"synthetic.{f.name} must be >= 0")


@dataclass(frozen=True)
class EWCParams:
    lam: float = 100.0
    fisher_samples: int = 1000

    def __post_init__(self):
        if self.lam < 0 or self.fisher_samples < 1:
            raise ConfigError("strategy.ewc needs lam >= 0 and fisher_samples >= 1")


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: str = "mnist"
    data_root: str = "data"
    num_tasks: int = 2
    num_clients: int = 5
    gamma: float = 0.5
    seed: int = 0
    shuffle_classes: bool = False
    archs: tuple[str, ...] = ("L", "M", "M", "S", "S")
    server_arch: str = "server"
    head: str = "cosine"
    server_train_extractor: bool = True
    backend: str = "mock"
    backend_path: str = ""
    guidance: float = 3.0
    mock_dim: int = 32
    strategy: str = "ours"
    temperature: float = 2.0
    ensemble: str = "prob_mean"
    use_replay: bool = True
    use_syn_cur: bool = True
    reuse_server_syn: bool = False
    eval_every_round: bool = False
    eval_clients: bool = True
    save_checkpoints: bool = True
    workers: int = 1
    out: str = "runs"
    schedule: RoundSchedule = field(default_factory=RoundSchedule)
    synthetic: SyntheticSizes = field(default_factory=SyntheticSizes)
    ewc: EWCParams = field(default_factory=EWCParams)

    def __post_init__(self):
        if self.num_tasks < 1:
            raise ConfigError("num_tasks must be >= 1")
        if self.num_clients < 1:
            raise ConfigError("num_clients must be >= 1")
        if not self.gamma > 0:
            raise ConfigError("gamma must be positive")
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"unknown strategy {self.strategy!r}; expected one of {STRATEGIES}")
        if self.backend not in BACKEND_KINDS:
            raise ConfigError(f"unknown backend {self.backend!r}; expected one of {BACKEND_KINDS}")
        if self.backend == "toy_ddpm" and not self.backend_path:
            raise ConfigError("backend=toy_ddpm needs backend_path (see the train-fixture command)")
        if self.guidance < 0:
            raise ConfigError("guidance must be >= 0")
        if self.ensemble not in ENSEMBLE_MODES:
            raise ConfigError(f"unknown ensemble mode {self.ensemble!r}")
        if not self.temperature > 0:
            raise ConfigError("temperature must be positive")
        if self.head not in HEAD_KINDS:
            raise ConfigError(f"unknown head kind {self.head!r}; expected one of {HEAD_KINDS}")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        bad = [a for a in self.archs + (self.server_arch,) if a not in ARCHS]
        if bad:
            raise ConfigError(f"unknown architecture tags {bad}; expected {ARCHS}")
        if len(self.archs) != self.num_clients:
            raise ConfigError(f"archs lists {len(self.archs)} models for {self.num_clients} clients")

    @property
    def homogeneous(self) -> bool:
        return self.strategy in HOMOGENEOUS

    def client_archs(self) -> tuple[str, ...]:
        """Homogeneous baselines run every client (and the averaged global model) as S-type."""
        return ("S",) * self.num_clients if self.homogeneous else self.archs

    def global_arch(self) -> str:
        return "S" if self.homogeneous else self.server_arch

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)


# ---------------------------------------------------------------------------
# flat key space

_NESTED = {"schedule": "schedule", "synthetic": "synthetic", "strategy.ewc": "ewc"}


def _sections() -> dict[str, type]:
    return {"experiment": ExperimentConfig, "schedule": RoundSchedule, "synthetic": SyntheticSizes,
            "strategy.ewc": EWCParams}


def _fields(cls) -> dict[str, object]:
    hints = typing.get_type_hints(cls)
    return {f.name: hints[f.name] for f in dataclasses.fields(cls) if f.name not in _NESTED.values()}


def _parse_bool(s: str) -> bool:
    low = s.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _convert(raw: str, typ) -> object:
    raw = raw.strip()
    origin = typing.get_origin(typ)
    args = typing.get_args(typ)
    if origin in (typing.Union, types.UnionType) and type(None) in args:
        if raw.lower() in ("", "none"):
            return None
        return _convert(raw, next(a for a in args if a is not type(None)))
    if origin is tuple:
        return tuple(p.strip() for p in raw.split(",") if p.strip())
    if typ is bool:
        return _parse_bool(raw)
    if typ is int:
        return int(raw)
    if typ is float:
        return float(raw)
    return raw


def _format(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(v)
    return repr(v) if isinstance(v, float) else str(v)


def split_key(key: str) -> tuple[str, str]:
    key = key.strip()
    if "." not in key:
        return "experiment", key
    section, name = key.rsplit(".", 1)
    return section, name


def _values(cfg: ExperimentConfig) -> dict[str, dict[str, object]]:
    out = {}
    for section, cls in _sections().items():
        obj = cfg if section == "experiment" else getattr(cfg, _NESTED[section])
        out[section] = {name: getattr(obj, name) for name in _fields(cls)}
    return out


def apply_overrides(cfg: ExperimentConfig, overrides: Mapping[str, str], origin: str = "override") -> ExperimentConfig:
    """Return ``cfg`` with string-valued ``section.key`` overrides applied."""
    sections = _sections()
    grouped: dict[str, dict[str, object]] = {}
    for key, raw in overrides.items():
        section, name = split_key(key)
        if section not in sections:
            raise ConfigError(f"{origin}: unknown section [{section}]")
        types = _fields(sections[section])
        if name not in types:
            raise ConfigError(f"{origin}: unknown key {name!r} in [{section}]")
        try:
            grouped.setdefault(section, {})[name] = _convert(str(raw), types[name])
        except ValueError as e:
            raise ConfigError(f"{origin}: bad value for {section}.{name}: {e}") from None
    try:
        nested = {}
        for section, attr in _NESTED.items():
            if section in grouped:
                nested[attr] = dataclasses.replace(getattr(cfg, attr), **grouped[section])
        return dataclasses.replace(cfg, **grouped.get("experiment", {}), **nested)
    except TypeError as e:
        raise ConfigError(str(e)) from None


def parse_ini(text: str, origin: str = "<string>") -> dict[str, str]:
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    try:
        cp.read_string(text, source=origin)
    except configparser.Error as e:
        raise ConfigError(f"{origin}: {e}") from None
    flat = {}
    for section in cp.sections():
        for key, value in cp.items(section):
            flat[key if section == "experiment" else f"{section}.{key}"] = value
    return flat


def env_overrides(environ: Mapping[str, str] | None = None) -> dict[str, str]:
    environ = os.environ if environ is None else environ
    names = {s.replace(".", "_").upper(): s for s in _sections()}
    out = {}
    for var, value in sorted(environ.items()):
        if not var.startswith(ENV_PREFIX):
            continue
        rest = var[len(ENV_PREFIX):]
        if "__" in rest:
            sec, key = rest.split("__", 1)
            if sec not in names:
                raise ConfigError(f"environment variable {var}: unknown section")
            out[f"{names[sec]}.{key.lower()}"] = value
        else:
            out[rest.lower()] = value
    return out


def load_config(path: str | Path | None = None, overrides: Mapping[str, str] | None = None,
                environ: Mapping[str, str] | None = None) -> ExperimentConfig:
    cfg = ExperimentConfig()
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        cfg = apply_overrides(cfg, parse_ini(p.read_text(), str(p)), str(p))
    if overrides:
        cfg = apply_overrides(cfg, overrides, "--set")
    env = env_overrides(environ)
    if env:
        cfg = apply_overrides(cfg, env, "environment")
    return cfg


def parse_set(items: list[str] | None) -> dict[str, str]:
    out = {}
    for item in items or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v
    return out


def to_ini(cfg: ExperimentConfig) -> str:
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    for section, values in _values(cfg).items():
        cp[section] = {k: _format(v) for k, v in values.items()}
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()
