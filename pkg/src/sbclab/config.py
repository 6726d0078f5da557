"""Experiment configuration: flat ``key = value`` files plus flag overrides."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

from sbclab.map_core import Interval, MapParams
from sbclab.schedule import IntervalSchedule


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    alpha: float = 0.5
    schedule: str = "fixed"
    interval: str = "0.5:0.6"
    intervals: str = ""
    separation: float | None = None
    trajectories: int = 200
    length: int = 1_000_000
    sampling: str = "inverse_cdf"
    burn_in: int = 1000
    seed: int = 7
    ulam_bins: int = 16384
    grid: str = "geometric"
    gamma: float | None = None
    eps: float = 0.1
    out: str = "run"
    gaps: str = "1:64"
    fit_min_gap: int = 4
    probes: int = 100
    residual_tol: float = 1e-3
    ratio_tol: float = 0.02
    c1: float = 1.0
    c_const: float = 1.0

    def __post_init__(self):
        MapParams(self.alpha)
        if self.trajectories < 1 or self.length < 1:
            raise ConfigError("trajectories and length must be at least 1")
        if self.sampling not in ("inverse_cdf", "burn_in"):
            raise ConfigError(f"unknown sampling mode {self.sampling!r}")
        if self.grid not in ("geometric", "uniform"):
            raise ConfigError(f"unknown grid {self.grid!r}")
        if self.eps <= 0:
            raise ConfigError("eps must be positive")
        if self.gamma is not None and not 0.0 <= self.gamma < 1.0:
            raise ConfigError("gamma must lie in [0, 1)")

    @property
    def params(self) -> MapParams:
        return MapParams(self.alpha)

    @property
    def envelope_gamma(self) -> float:
        return self.alpha if self.gamma is None else self.gamma

    def make_schedule(self) -> IntervalSchedule:
        try:
            if self.schedule == "fixed":
                return IntervalSchedule.fixed(Interval.parse(self.interval), self.separation)
            if self.schedule == "listed":
                parts = [s for s in self.intervals.split(",") if s.strip()]
                return IntervalSchedule.listed([Interval.parse(s.strip()) for s in parts], self.separation)
            if self.schedule == "kim":
                return IntervalSchedule.kim(self.alpha)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        raise ConfigError(f"unknown schedule {self.schedule!r}")

    def gap_list(self) -> list[int]:
        out = []
        for part in self.gaps.split(","):
            part = part.strip()
            if ":" in part:
                a, b = (int(v) for v in part.split(":"))
                out.extend(range(a, b + 1))
            elif part:
                out.append(int(part))
        if not out or min(out) < 1:
            raise ConfigError("gaps must be positive integers")
        return sorted(set(out))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def replace(self, **kw) -> "ExperimentConfig":
        return dataclasses.replace(self, **kw)


def _field_types():
    hints = {"float": float, "int": int, "str": str, "float | None": float}
    return {f.name: hints[f.type] for f in fields(ExperimentConfig)}


FIELD_TYPES = _field_types()


def coerce(key: str, raw):
    if key not in FIELD_TYPES:
        raise ConfigError(f"unknown config key {key!r}")
    if key in ("gamma", "separation") and (raw is None or str(raw).strip().lower() in ("none", "")):
        return None
    kind = FIELD_TYPES[key]
    try:
        if kind is int:
            value = float(raw)
            if not value.is_integer():
                raise ValueError
            return int(value)
        return kind(raw)
    except (TypeError, ValueError):
        raise ConfigError(f"bad value for {key}: {raw!r}") from None


def read_config_file(path) -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    values = {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        values[key] = coerce(key, value)
    return values


def load_config(path=None, **overrides) -> ExperimentConfig:
    values = read_config_file(path) if path else {}
    for key, value in overrides.items():
        if value is not None:
            values[key] = coerce(key, value)
    try:
        return ExperimentConfig(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def write_config_file(cfg: ExperimentConfig, path) -> Path:
    path = Path(path)
    lines = [f"{k} = {'none' if v is None else v}" for k, v in cfg.to_dict().items()]
    path.write_text("\n".join(lines) + "\n")
    return path
