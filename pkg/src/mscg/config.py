"""Experiment configuration: nested dataclasses read from and written to TOML.

Unknown keys are rejected. Single keys can be overridden with dotted paths,
e.g. ``optimize.gamma=0.5``.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import tomli
import tomli_w


class ConfigError(ValueError):
    pass


@dataclass
class CrystalConfig:
    R0: float = 0.4
    eps_rod: float = 11.4
    eps_bg: float = 1.0
    order: int = 2
    h: float = 0.1
    pml_sigma: float = 20.0
    face_order: int = 10


@dataclass
class KlConfig:
    n_coeffs: int = 11
    sigma: float = 0.02
    Lc: float = 1.0 / 16.0
    half_width: float = float(np.sqrt(3.0))


@dataclass
class ConvergenceConfig:
    n: list = field(default_factory=lambda: [8, 16, 32, 64, 128])
    q: list = field(default_factory=lambda: [1, 2, 4, 8])
    p: list = field(default_factory=lambda: [1, 2])
    k: float = 6.0
    angle: float = float(np.pi / 4)
    face_cap: int = 10
    diagonal: str = "\\"


@dataclass
class SimulateConfig:
    layout: str = "line_defect"  # line_defect | bend | empty
    n: int = 9
    frequencies: list = field(default_factory=lambda: [0.38, 0.46])
    polarization: str = "TM"
    export_fields: bool = False
    crystal: CrystalConfig = field(default_factory=CrystalConfig)


@dataclass
class RbTrainConfig:
    family: str = "kl"  # theta | kl
    n: int = 9
    n_train: int = 100
    theta_box: list = field(default_factory=lambda: [-0.127, 0.047])
    frequencies: list = field(default_factory=lambda: [0.375, 0.38, 0.385])
    N_max: int = 300
    deim_tol: float = 1e-6
    n_validation: int = 50
    validation_N: list = field(default_factory=lambda: [10, 20, 40, 80, 160, 240])
    file: str = "rb_rod.bin"
    crystal: CrystalConfig = field(default_factory=CrystalConfig)
    kl: KlConfig = field(default_factory=KlConfig)


@dataclass
class UqConfig:
    model: str = "bend"  # bend | synthetic
    rb_file: str = "rb_rod.bin"
    N: int = 240
    frequency: float = 0.38
    theta: float = 0.0
    M0: int = 10
    M1: int = 200
    a: float = 1.96
    zero_surrogate: bool = False
    n: int = 9
    crystal: CrystalConfig = field(default_factory=CrystalConfig)
    kl: KlConfig = field(default_factory=KlConfig)


@dataclass
class OptimizeConfig:
    model: str = "bend"  # bend | lattice3
    objective: str = "deterministic"  # deterministic | frequency | geometry
    frequency: float = 0.38
    interval: list = field(default_factory=lambda: [0.375, 0.385])
    n_quad: int = 5
    gamma: float = 1.0
    box: list = field(default_factory=lambda: [-0.127, 0.047])
    n_starts: int = 8
    maxiter: int = 50
    n_draws: int = 16
    rb_file: str = "rb_rod.bin"
    N: int = 240
    M0: int = 10
    M1: int = 200
    warm_start: str = ""
    n: int = 9
    crystal: CrystalConfig = field(default_factory=CrystalConfig)
    kl: KlConfig = field(default_factory=KlConfig)


@dataclass
class ExperimentConfig:
    seed: int = 0
    workers: int = 0  # 0: available cores
    out: str = "out"
    convergence: ConvergenceConfig = field(default_factory=ConvergenceConfig)
    simulate: SimulateConfig = field(default_factory=SimulateConfig)
    rb_train: RbTrainConfig = field(default_factory=RbTrainConfig)
    uq: UqConfig = field(default_factory=UqConfig)
    optimize: OptimizeConfig = field(default_factory=OptimizeConfig)


def _build(cls, data: dict, path: str = ""):
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'} must be a table")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(fields)
    if unknown:
        raise ConfigError(f"unknown keys in {path or 'config'}: {sorted(unknown)}")
    kw = {}
    for name, value in data.items():
        default = getattr(cls(), name)
        where = f"{path}.{name}" if path else name
        if dataclasses.is_dataclass(default):
            kw[name] = _build(type(default), value, where)
        else:
            kw[name] = _coerce(default, value, where)
    return cls(**kw)


def _coerce(default: Any, value: Any, where: str):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where} must be a boolean")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where} must be an integer")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where} must be a number")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{where} must be a string")
        return value
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(f"{where} must be an array")
        return list(value)
    return value


def from_dict(data: dict) -> ExperimentConfig:
    return _build(ExperimentConfig, data)


def to_dict(cfg) -> dict:
    return dataclasses.asdict(cfg)


def loads(text: str) -> ExperimentConfig:
    try:
        return from_dict(tomli.loads(text))
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(str(exc)) from exc


def dumps(cfg: ExperimentConfig) -> str:
    return tomli_w.dumps(to_dict(cfg))


def load(path) -> ExperimentConfig:
    return loads(Path(path).read_text())


def save(cfg: ExperimentConfig, path) -> None:
    Path(path).write_text(dumps(cfg))


def _parse_value(text: str):
    try:
        return tomli.loads(f"v = {text}")["v"]
    except tomli.TOMLDecodeError:
        return text


def apply_overrides(cfg: ExperimentConfig, overrides) -> ExperimentConfig:
    """Apply ``a.b.c=value`` strings (values parsed as TOML, else taken as strings)."""
    data = to_dict(cfg)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, text = item.split("=", 1)
        parts = key.strip().split(".")
        node = data
        for p in parts[:-1]:
            if p not in node or not isinstance(node[p], dict):
                raise ConfigError(f"unknown config section {key!r}")
            node = node[p]
        if parts[-1] not in node:
            raise ConfigError(f"unknown config key {key!r}")
        node[parts[-1]] = _parse_value(text.strip())
    return from_dict(data)
