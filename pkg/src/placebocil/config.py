"""Experiment configuration: JSON file -> validated dataclass.

Override precedence is CLI flag > ``PLACEBOCIL_*`` environment variable >
file > defaults.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .data import ConfigError, SyntheticSpec
from .nn import KD_KINDS

KD_MODES = ("placebo", "new_data", "old_data_oracle", "none")
SELECTIONS = ("scored", "random", "confidence")
POLICIES = ("online", "fixed")
AUDIT_LEVELS = ("iteration", "phase")
ENV_PREFIX = "PLACEBOCIL_"

# per-component seed offsets from the top-level seed
SEED_OFFSETS = {
    "task": 0,
    "model": 1,
    "stream": 2,
    "batches": 3,
    "budget": 4,
    "policy": 5,
    "local_env": 6,
    "exemplars": 7,
    "placebo_random": 8,
    "oracle": 9,
}


class ConfigValidationError(ConfigError):
    def __init__(self, errors: list[str]):
        self.errors = list(errors)
        super().__init__("invalid config:\n  " + "\n  ".join(self.errors))


@dataclass
class DataFiles:
    train_csv: str | None = None
    test_csv: str | None = None
    stream_csv: str | None = None

    @property
    def used(self) -> bool:
        return any((self.train_csv, self.test_csv, self.stream_csv))


@dataclass
class AblationSpec:
    kd_modes: list[str] = field(default_factory=lambda: list(KD_MODES))
    selections: list[str] = field(default_factory=lambda: list(SELECTIONS))
    policies: list[str] = field(default_factory=lambda: list(POLICIES))
    u_caps: list[int] = field(default_factory=list)
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2])


@dataclass
class ExperimentConfig:
    seed: int = 0
    class_counts: list[int] = field(default_factory=lambda: [2, 4, 6, 8, 10])
    task: SyntheticSpec = field(default_factory=SyntheticSpec)
    data: DataFiles = field(default_factory=DataFiles)

    hidden: list[int] = field(default_factory=lambda: [64, 32])
    learning_rate: float = 0.05
    momentum: float = 0.9
    lr_schedule: list[list[float]] = field(default_factory=list)
    epochs: int = 12  # M2
    policy_epochs: int = 3  # M1

    batch_new: int = 64
    batch_exemplar: int = 32
    batch_placebo: int = 32

    kd_mode: str = "placebo"
    kd_kind: str = "logit_kl"
    lam: float = 1.0
    temperature: float = 2.0

    exemplars_per_class: int = 5
    exemplar_strategy: str = "herding"

    u_cap: int = 1000
    p_cap: int = 200
    k: int | None = None
    selection: str = "scored"
    maximize_score: bool = False
    score_with_live_model: bool = False

    policy: str = "online"
    fixed_beta: float = 1.0
    fixed_gamma: float = 1.0
    betas: list[float] = field(default_factory=lambda: [0.0, 0.5, 1.0, 1.5, 2.0])
    gammas: list[float] = field(default_factory=lambda: [0.0, 0.5, 1.0, 1.5, 2.0])
    xi: float = 0.3
    floor: float = 0.05
    normalize_reward: bool = True
    policy_iters: int = 8  # T
    lookahead: int = 1  # n
    local_per_class: int | None = None

    audit: str = "iteration"
    placebo_log: bool = False
    ablation: AblationSpec = field(default_factory=AblationSpec)

    def component_seed(self, name: str) -> int:
        return self.seed + SEED_OFFSETS[name]

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    def validate(self, check_files: bool = True) -> list[str]:
        errs: list[str] = []
        cc = self.class_counts
        if not cc or any(not isinstance(c, int) for c in cc):
            errs.append("class_counts: must be a nonempty list of integers")
        elif cc[0] < 1 or any(b <= a for a, b in zip(cc, cc[1:])):
            errs.append("class_counts: must start at >= 1 and be strictly increasing")
        if not self.data.used:
            errs += [f"task.{e}" for e in self.task.validate()]
            if cc and self.task.num_classes != cc[-1]:
                errs.append(
                    f"task.num_classes: {self.task.num_classes} does not match "
                    f"class_counts[-1] = {cc[-1]}"
                )
        elif check_files:
            for name in ("train_csv", "test_csv", "stream_csv"):
                path = getattr(self.data, name)
                if path is None:
                    errs.append(f"data.{name}: required when any data file is given")
                elif not Path(path).is_file():
                    errs.append(f"data.{name}: file not found: {path}")
        if not self.hidden or any(h < 1 for h in self.hidden):
            errs.append("hidden: needs at least one positive layer width")
        if not self.learning_rate > 0:
            errs.append("learning_rate: must be positive")
        if not 0 <= self.momentum < 1:
            errs.append("momentum: must lie in [0, 1)")
        if self.epochs < 1:
            errs.append("epochs: must be positive")
        if self.policy_epochs < 1:
            errs.append("policy_epochs: must be positive")
        elif self.policy_epochs > self.epochs:
            errs.append("policy_epochs: must not exceed epochs (M1 <= M2)")
        marks = [m[0] for m in self.lr_schedule] if self.lr_schedule else []
        if any(len(m) != 2 for m in self.lr_schedule):
            errs.append("lr_schedule: entries must be [epoch, factor]")
        elif any(b <= a for a, b in zip(marks, marks[1:])) or (marks and marks[-1] >= self.epochs):
            errs.append("lr_schedule: epochs must increase strictly and stay below epochs")
        for name in ("batch_new", "batch_exemplar", "batch_placebo"):
            if getattr(self, name) < 1:
                errs.append(f"{name}: must be at least 1")
        if self.kd_mode not in KD_MODES:
            errs.append(f"kd_mode: must be one of {list(KD_MODES)}")
        if self.kd_kind not in KD_KINDS:
            errs.append(f"kd_kind: must be one of {list(KD_KINDS)}")
        if self.lam < 0:
            errs.append("lam: must be nonnegative")
        if not self.temperature > 0:
            errs.append("temperature: must be positive")
        if self.exemplars_per_class < 2:
            errs.append("exemplars_per_class: must be at least 2 (one is held out for rewards)")
        if self.exemplar_strategy not in ("herding", "random"):
            errs.append("exemplar_strategy: must be herding or random")
        if self.u_cap < 0:
            errs.append("u_cap: must be nonnegative")
        if self.p_cap < 0:
            errs.append("p_cap: must be nonnegative")
        if self.u_cap > 0 and self.p_cap > self.u_cap:
            errs.append("p_cap: cannot exceed u_cap")
        if self.u_cap > 0 and self.p_cap < 1:
            errs.append("p_cap: must be positive when u_cap is")
        if self.k is not None and self.k < 1:
            errs.append("k: must be at least 1")
        if self.selection not in SELECTIONS:
            errs.append(f"selection: must be one of {list(SELECTIONS)}")
        if self.policy not in POLICIES:
            errs.append(f"policy: must be one of {list(POLICIES)}")
        if self.fixed_beta < 0 or self.fixed_gamma < 0:
            errs.append("fixed_beta/fixed_gamma: must be nonnegative")
        if not self.betas or not self.gammas:
            errs.append("betas/gammas: grid must be nonempty")
        elif min(self.betas) < 0 or min(self.gammas) < 0:
            errs.append("betas/gammas: values must be nonnegative")
        elif len(set(self.betas)) != len(self.betas) or len(set(self.gammas)) != len(self.gammas):
            errs.append("betas/gammas: duplicate grid values")
        if not self.xi > 0:
            errs.append("xi: must be positive")
        if not 0 <= self.floor < 1:
            errs.append("floor: must lie in [0, 1)")
        if self.policy_iters < 0:
            errs.append("policy_iters: must be nonnegative")
        if self.lookahead < 0:
            errs.append("lookahead: must be nonnegative")
        if self.local_per_class is not None and self.local_per_class < 1:
            errs.append("local_per_class: must be at least 1")
        elif self.local_per_class is not None and self.local_per_class >= self.exemplars_per_class:
            errs.append("local_per_class: must be below exemplars_per_class")
        if self.audit not in AUDIT_LEVELS:
            errs.append(f"audit: must be one of {list(AUDIT_LEVELS)}")
        a = self.ablation
        for name, allowed in (("kd_modes", KD_MODES), ("selections", SELECTIONS), ("policies", POLICIES)):
            bad = [v for v in getattr(a, name) if v not in allowed]
            if bad:
                errs.append(f"ablation.{name}: unknown values {bad}")
        if any(u < 0 for u in a.u_caps):
            errs.append("ablation.u_caps: must be nonnegative")
        if not a.seeds:
            errs.append("ablation.seeds: must be nonempty")
        return errs

    def check(self, check_files: bool = True) -> "ExperimentConfig":
        errs = self.validate(check_files)
        if errs:
            raise ConfigValidationError(errs)
        return self


_NESTED = {"task": SyntheticSpec, "data": DataFiles, "ablation": AblationSpec}


def _build(cls, raw: dict, prefix: str, errors: list[str]):
    if not isinstance(raw, dict):
        errors.append(f"{prefix.rstrip('.') or 'config'}: must be an object")
        return cls()
    names = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in raw.items():
        if key not in names:
            errors.append(f"{prefix}{key}: unknown field")
            continue
        if key in _NESTED and cls is ExperimentConfig:
            kwargs[key] = _build(_NESTED[key], value, f"{key}.", errors)
        else:
            kwargs[key] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        errors.append(f"{prefix.rstrip('.') or 'config'}: {exc}")
        return cls()


def _typecheck(cfg: ExperimentConfig) -> list[str]:
    errs = []

    def want(obj, prefix):
        for f in dataclasses.fields(obj):
            v = getattr(obj, f.name)
            default = f.default if f.default is not dataclasses.MISSING else f.default_factory()
            if dataclasses.is_dataclass(v):
                if f.name in _NESTED:
                    want(v, f"{prefix}{f.name}.")
                continue
            if v is None or default is None:
                continue
            if isinstance(default, bool):
                ok = isinstance(v, bool)
            elif isinstance(default, int):
                ok = isinstance(v, int) and not isinstance(v, bool)
            elif isinstance(default, float):
                ok = isinstance(v, (int, float)) and not isinstance(v, bool)
            elif isinstance(default, str):
                ok = isinstance(v, str)
            elif isinstance(default, list):
                ok = isinstance(v, list)
            else:
                ok = True
            if not ok:
                errs.append(f"{prefix}{f.name}: expected {type(default).__name__}, got {v!r}")

    want(cfg, "")
    return errs


def config_from_dict(raw: dict) -> ExperimentConfig:
    errors: list[str] = []
    cfg = _build(ExperimentConfig, raw, "", errors)
    errors += _typecheck(cfg)
    if errors:
        raise ConfigValidationError(errors)
    for name in ("learning_rate", "momentum", "lam", "temperature", "xi", "floor", "fixed_beta", "fixed_gamma"):
        setattr(cfg, name, float(getattr(cfg, name)))
    return cfg


def load_config(path: str | Path | None, env: dict[str, str] | None = None) -> ExperimentConfig:
    """Read a JSON config (or defaults when ``path`` is None) and apply
    ``PLACEBOCIL_*`` environment overrides for top-level scalar fields."""
    raw: dict = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigValidationError([f"config: file not found: {p}"])
        try:
            raw = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigValidationError([f"config: not valid JSON ({exc})"]) from exc
        base = p.parent
        data = raw.get("data")
        if isinstance(data, dict):
            for key, val in data.items():
                if isinstance(val, str) and not Path(val).is_absolute():
                    data[key] = str(base / val)
    raw = apply_env(raw, os.environ if env is None else env)
    return config_from_dict(raw)


def apply_env(raw: dict, env) -> dict:
    out = dict(raw)
    scalars = {
        f.name: f
        for f in dataclasses.fields(ExperimentConfig)
        if f.name not in _NESTED and f.name not in ("class_counts", "hidden", "lr_schedule", "betas", "gammas")
    }
    for key, value in env.items():
        if not key.startswith(ENV_PREFIX):
            continue
        name = key[len(ENV_PREFIX):].lower()
        if name not in scalars:
            continue
        out[name] = _parse_scalar(value)
    return out


def _parse_scalar(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text
