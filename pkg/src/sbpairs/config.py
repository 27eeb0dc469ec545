"""Flat key = value configuration (TOML syntax, no tables).

Every tunable default of the package lives in :class:`Settings`.  A config
file may set any subset of its fields; unknown keys are rejected so typos do
not pass silently.  Command-line overrides are applied on top.
"""

from __future__ import annotations

import sys
from dataclasses import asdict, dataclass, fields, replace
from decimal import Decimal
from pathlib import Path
from typing import Any, Mapping

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Settings:
    # engine
    p_max: int = 16
    a_trans: Decimal = Decimal(1_500_000)
    threshold: float = -0.002
    restarts_per_event: int = 16
    max_runs_per_event: int = 32
    seed: int = 1
    m_c: float = 1.0
    penalty_scale: float = 1.5
    m_p: float | None = None
    session_open: str = "09:00"
    session_close: str = "15:00"
    no_open_minutes: int = 15
    unwind_minutes: int = 5
    kill_switch: bool = False
    clamp_lots: bool = False
    log_level: str = "actions"
    # solver
    n_steps: int = 50
    dt: float = 0.65
    a0: float | None = None
    c0: float | None = None
    a0_scale: float = 4.24
    c0_gain: float = 3.3
    machine_size: int = 256
    # positions and backcast
    commission_rate: Decimal = Decimal("0.0005")
    close_margin: Decimal = Decimal(0)
    fill_model: str = "always"
    lapse_probability: float = 0.0
    trading_days: int = 245
    capital: Decimal | None = None
    # similarity
    dtw_days: int = 5
    sample_seconds: int = 60

    def __post_init__(self) -> None:
        if self.p_max < 1:
            raise ConfigError("p_max must be >= 1")
        if not self.a_trans > 0:
            raise ConfigError("a_trans must be positive")
        if self.restarts_per_event < 1 or self.max_runs_per_event < 1:
            raise ConfigError("restarts_per_event and max_runs_per_event must be >= 1")
        if self.fill_model not in ("always", "lapse"):
            raise ConfigError("fill_model must be 'always' or 'lapse'")
        if not 0.0 <= self.lapse_probability <= 1.0:
            raise ConfigError("lapse_probability must lie in [0, 1]")
        if not Decimal(0) <= self.commission_rate < 1:
            raise ConfigError("commission_rate must lie in [0, 1)")
        if self.log_level not in ("off", "actions", "all"):
            raise ConfigError("log_level must be off, actions or all")
        if self.capital is not None and not self.capital > 0:
            raise ConfigError("capital must be positive")
        if self.trading_days < 1:
            raise ConfigError("trading_days must be >= 1")

    @property
    def capital_base(self) -> Decimal:
        """Explicit capital, else A_trans x P_max."""
        return self.capital if self.capital is not None else self.a_trans * self.p_max

    def to_dict(self) -> dict[str, Any]:
        out = {}
        for k, v in asdict(self).items():
            out[k] = str(v) if isinstance(v, Decimal) else v
        return out


_FIELDS = {f.name: f for f in fields(Settings)}
_DECIMALS = {"a_trans", "commission_rate", "close_margin", "capital"}
_OPTIONAL = {"m_p", "a0", "c0", "capital"}


def _coerce(key: str, value: Any) -> Any:
    if key not in _FIELDS:
        raise ConfigError(f"unknown config key {key!r}")
    if value is None or (key in _OPTIONAL and value in ("auto", "none", "")):
        if key not in _OPTIONAL:
            raise ConfigError(f"{key} cannot be empty")
        return None
    default = _FIELDS[key].default
    try:
        if key in _DECIMALS:
            if isinstance(value, float):
                value = repr(value)
            return Decimal(str(value))
        if isinstance(default, bool):
            if isinstance(value, str):
                if value.lower() not in ("true", "false", "1", "0", "yes", "no"):
                    raise ValueError(value)
                return value.lower() in ("true", "1", "yes")
            return bool(value)
        if isinstance(default, int):
            if isinstance(value, float) and not value.is_integer():
                raise ValueError(value)
            return int(value)
        if isinstance(default, float) or key in _OPTIONAL:
            return float(value)
        return str(value)
    except (ValueError, ArithmeticError) as exc:
        raise ConfigError(f"bad value for {key}: {value!r}") from exc


def settings_from(values: Mapping[str, Any], base: Settings | None = None) -> Settings:
    coerced = {k: _coerce(k, v) for k, v in values.items()}
    return replace(base or Settings(), **coerced)


def load_settings(path: str | Path | None = None, overrides: Mapping[str, Any] | None = None) -> Settings:
    """Defaults, then the file (if any), then ``overrides``."""
    s = Settings()
    if path is not None:
        try:
            with open(path, "rb") as fh:
                data = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        nested = [k for k, v in data.items() if isinstance(v, dict)]
        if nested:
            raise ConfigError(f"{path}: tables are not allowed ({', '.join(nested)})")
        s = settings_from(data, s)
    if overrides:
        s = settings_from({k: v for k, v in overrides.items() if v is not None}, s)
    return s


def parse_clock(text: str) -> int:
    """``HH:MM`` or ``HH:MM:SS`` to seconds after midnight."""
    parts = text.split(":")
    if len(parts) not in (2, 3) or not all(p.isdigit() for p in parts):
        raise ConfigError(f"bad time of day {text!r}")
    h, m, *rest = (int(p) for p in parts)
    sec = rest[0] if rest else 0
    if not (0 <= h < 24 and 0 <= m < 60 and 0 <= sec < 60):
        raise ConfigError(f"bad time of day {text!r}")
    return h * 3600 + m * 60 + sec
