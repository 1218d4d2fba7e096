"""
Configuration Management for the EV charging pipeline

Layering, lowest to highest priority: dataclass defaults, TOML file,
EVCHARGE_* environment variables (a .env file is honoured), command-line flags.
"""

import dataclasses
import os
import tomllib
from dataclasses import dataclass, field
from datetime import date
from pathlib import Path
from typing import Any, Callable, Optional, get_args

from dotenv import load_dotenv

from ev_charging.data_ingest import DayFilter
from ev_charging.errors import ConfigError
from ev_charging.mdp_solver import ActionMode, MdpConfig, TerminalPrice
from ev_charging.policy_sim import LookupMode

ENV_PREFIX = "EVCHARGE_"
LOG_LEVELS = ("DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL")
OPTIMAL_POLICIES = ("optimal", "optimal_v2g")
RULE_POLICIES = ("naive", "night", "low_price", "v2g_unbounded", "v2g_bounded")
KNOWN_POLICIES = OPTIMAL_POLICIES + RULE_POLICIES


def _floats(raw: Any) -> list[float]:
    if isinstance(raw, str):
        return [float(item) for item in raw.split(",") if item.strip()]
    if isinstance(raw, (int, float)):
        return [float(raw)]
    return [float(item) for item in raw]


def _names(raw: Any) -> list[str]:
    if isinstance(raw, str):
        return [item.strip() for item in raw.split(",") if item.strip()]
    return [str(item) for item in raw]


def _flag(raw: Any) -> bool:
    if isinstance(raw, str):
        return raw.strip().lower() in ("1", "true", "yes", "on")
    return bool(raw)


def _optional(convert: Callable[[Any], Any]) -> Callable[[Any], Any]:
    def parse(raw: Any) -> Any:
        if raw is None or (isinstance(raw, str) and raw.strip().lower() in ("", "none")):
            return None
        return convert(raw)

    return parse


def _date(raw: Any) -> date:
    return raw if isinstance(raw, date) else date.fromisoformat(str(raw))


def _upper(raw: Any) -> str:
    return str(raw).upper()


@dataclass
class RunConfig:
    """Settings of one pipeline run."""

    # Files
    trip_log: Optional[Path] = None
    prices: Optional[Path] = None
    model: Optional[Path] = None
    out_dir: Path = Path("out")

    # Vehicle and market
    u_max: float = 4.0
    u_min: Optional[float] = None
    e_max: float = 24.0
    e_min: float = 0.0
    kappa: float = 24.0
    eta_c: float = 0.9
    eta_d: float = 0.9
    speed: float = 40.0
    drive_efficiency: float = 0.2
    beta: float = 1.0
    terminal_price: TerminalPrice = "mean"

    # Solver
    mode: ActionMode = "charge"
    phis: list[float] = field(default_factory=lambda: [10.0])
    horizon_minutes: int = 2880
    grid_levels: int = 360
    roll_every_minutes: int = 60
    fixed_horizon: bool = False
    long_csv: bool = False

    # Fitting
    split_date: Optional[date] = None
    day_filter: DayFilter = "weekday"
    init_knots: int = 8
    max_knots: int = 22
    periodic: bool = False
    lr_alpha: float = 0.05
    max_states: int = 4
    n_starts: int = 20

    # Simulation
    policies: list[str] = field(default_factory=lambda: ["optimal", "naive", "night", "low_price"])
    scenarios: int = 0
    lookup: LookupMode = "nearest"
    initial_soc: float = 1.0
    days: int = 183
    trips_per_day: float = 4.1

    # System
    seed: int = 0
    threads: int = 1
    log_level: str = "INFO"

    @classmethod
    def field_names(cls) -> tuple[str, ...]:
        return tuple(f.name for f in dataclasses.fields(cls))

    @classmethod
    def from_sources(
        cls,
        config_file: Optional[Path] = None,
        overrides: Optional[dict[str, Any]] = None,
        *,
        use_env: bool = True,
    ) -> "RunConfig":
        """Merge defaults, TOML file, environment and explicit overrides."""
        values: dict[str, Any] = {}
        if config_file is not None:
            values.update(read_toml(config_file))
        if use_env:
            values.update(cls.env_values())
        values.update({k: v for k, v in (overrides or {}).items() if v is not None})
        return cls.from_mapping(values)

    @classmethod
    def from_mapping(cls, values: dict[str, Any]) -> "RunConfig":
        unknown = set(values) - set(cls.field_names())
        if unknown:
            raise ConfigError(f"unknown configuration keys: {sorted(unknown)}")
        parsed = {}
        for key, raw in values.items():
            try:
                parsed[key] = _PARSERS[key](raw)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"invalid value for {key}: {raw!r} ({exc})") from exc
        return cls(**parsed)

    @classmethod
    def env_values(cls) -> dict[str, str]:
        """EVCHARGE_<FIELD> variables from the environment and a .env file."""
        load_dotenv()
        values = {}
        for name in cls.field_names():
            raw = os.getenv(f"{ENV_PREFIX}{name.upper()}")
            if raw is not None:
                values[name] = raw
        return values

    def mdp_config(self, phi: Optional[float] = None, mode: Optional[ActionMode] = None) -> MdpConfig:
        mode = mode or self.mode
        u_min = self.u_min if self.u_min is not None else (-self.u_max if mode == "v2g" else 0.0)
        return MdpConfig(
            u_max=self.u_max,
            u_min=u_min,
            e_max=self.e_max,
            e_min=self.e_min,
            phi=self.phis[0] if phi is None else phi,
            eta_c=self.eta_c,
            eta_d=self.eta_d,
            v=(self.speed,),
            mu=(self.drive_efficiency,),
            kappa=self.kappa,
            beta=self.beta,
            horizon_minutes=self.horizon_minutes,
            terminal_price=self.terminal_price,
        )

    def validate(self) -> None:
        """Validate configuration settings."""
        if self.log_level not in LOG_LEVELS:
            raise ConfigError(f"Invalid log level: {self.log_level}")
        if self.mode not in get_args(ActionMode):
            raise ConfigError(f"Invalid mode: {self.mode}. Needs to be one of {get_args(ActionMode)}")
        if self.day_filter not in get_args(DayFilter):
            raise ConfigError(f"Invalid day filter: {self.day_filter}")
        if self.lookup not in get_args(LookupMode):
            raise ConfigError(f"Invalid lookup: {self.lookup}")
        if not self.phis:
            raise ConfigError("the phi list must not be empty")
        if self.grid_levels < 2:
            raise ConfigError("grid_levels must be at least 2")
        if self.roll_every_minutes < 1:
            raise ConfigError("roll_every_minutes must be positive")
        if self.threads < 1:
            raise ConfigError("threads must be positive")
        if self.scenarios < 0 or self.days < 1 or self.n_starts < 1:
            raise ConfigError("scenarios must be non-negative; days and n_starts positive")
        if not 0 <= self.initial_soc <= 1:
            raise ConfigError("initial_soc must lie in [0, 1]")
        if unknown := set(self.policies) - set(KNOWN_POLICIES):
            raise ConfigError(f"unknown policies {sorted(unknown)}; choose from {KNOWN_POLICIES}")
        for phi in self.phis:
            self.mdp_config(phi).validate()
        if self.mode == "v2g" or any("v2g" in name for name in self.policies):
            v2g = self.mdp_config(mode="v2g")
            v2g.validate()
            if v2g.u_min >= 0:
                raise ConfigError("v2g operation needs u_min < 0")

    def to_dict(self) -> dict[str, Any]:
        """Convert configuration to dictionary."""
        data = dataclasses.asdict(self)
        for key, value in data.items():
            if isinstance(value, (Path, date)):
                data[key] = str(value)
        return data

    def __repr__(self) -> str:
        return (
            f"RunConfig("
            f"mode={self.mode}, "
            f"phis={self.phis}, "
            f"horizon={self.horizon_minutes}, "
            f"levels={self.grid_levels}, "
            f"seed={self.seed})"
        )


_PARSERS: dict[str, Callable[[Any], Any]] = {
    "trip_log": _optional(Path),
    "prices": _optional(Path),
    "model": _optional(Path),
    "out_dir": Path,
    "u_max": float,
    "u_min": _optional(float),
    "e_max": float,
    "e_min": float,
    "kappa": float,
    "eta_c": float,
    "eta_d": float,
    "speed": float,
    "drive_efficiency": float,
    "beta": float,
    "terminal_price": str,
    "mode": str,
    "phis": _floats,
    "horizon_minutes": int,
    "grid_levels": int,
    "roll_every_minutes": int,
    "fixed_horizon": _flag,
    "long_csv": _flag,
    "split_date": _optional(_date),
    "day_filter": str,
    "init_knots": int,
    "max_knots": int,
    "periodic": _flag,
    "lr_alpha": float,
    "max_states": int,
    "n_starts": int,
    "policies": _names,
    "scenarios": int,
    "lookup": str,
    "initial_soc": float,
    "days": int,
    "trips_per_day": float,
    "seed": int,
    "threads": int,
    "log_level": _upper,
}


def read_toml(path: Path) -> dict[str, Any]:
    """Read a TOML config file; tables are flattened into one namespace."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        with path.open("rb") as handle:
            raw = tomllib.load(handle)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid TOML: {exc}") from exc
    values: dict[str, Any] = {}
    for key, value in raw.items():
        if isinstance(value, dict):
            values.update(value)
        else:
            values[key] = value
    return values
