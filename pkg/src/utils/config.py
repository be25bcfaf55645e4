"""
Experiment configuration: INI documents validated into pydantic models.

Each CLI command reads its own section ([analyze], [simulate], [compare],
[converge], [audit]); [output] dir and seed are shared. The only environment
variable honoured is CRN_OUTPUT_DIR.
"""

import configparser
import logging
import os
from pathlib import Path
from typing import List, Optional

from dotenv import load_dotenv
from pydantic import BaseModel, ValidationError, field_validator, model_validator

load_dotenv()

logger = logging.getLogger(__name__)

OUTPUT_ENV_VAR = "CRN_OUTPUT_DIR"
DEFAULT_OUTPUT_DIR = "output"
COMMANDS = ("analyze", "simulate", "compare", "converge", "audit")


class ConfigError(ValueError):
    """Unreadable or invalid configuration document."""


# ============================================================
# Per-command settings
# ============================================================


def _positive(value: float, name: str) -> float:
    if not value > 0:
        raise ValueError(f"{name} must be positive, got {value}")
    return value


def _volume(value: float) -> float:
    if not value >= 1:
        raise ValueError(f"volume V must be at least 1, got {value}")
    return value


class AnalyzeSettings(BaseModel):
    network: Optional[Path] = None
    tol: float = 1e-9

    @field_validator("tol")
    @classmethod
    def _tol(cls, v: float) -> float:
        return _positive(v, "tol")


class SimulateSettings(BaseModel):
    """
    Settings for `simulate`. `model` is one of rre, cme, liouville, fpe:<variant>,
    hybrid:fp_rr, hybrid:cm_rr or hybrid:merged.
    """

    network: Optional[Path] = None
    model: str = "rre"
    V: float = 30.0
    t_end: float = 3.0
    outputs: int = 31
    tol: float = 1e-8
    dt: float = 1e-2
    tail: float = 1e-12
    cells: int = 400
    window: Optional[float] = None
    c0: Optional[List[float]] = None
    J: int = 1
    N: int = 20
    theta1: float = 0.25
    theta2: float = 0.75

    @field_validator("tol", "dt", "tail", "t_end")
    @classmethod
    def _positive_fields(cls, v: float, info) -> float:
        return _positive(v, info.field_name)

    @field_validator("V")
    @classmethod
    def _v(cls, v: float) -> float:
        return _volume(v)

    @field_validator("outputs", "cells")
    @classmethod
    def _counts(cls, v: int, info) -> int:
        if v < 2:
            raise ValueError(f"{info.field_name} must be at least 2")
        return v

    @model_validator(mode="after")
    def _thetas(self) -> "SimulateSettings":
        if not 0.0 < self.theta1 < self.theta2 < 1.0:
            raise ValueError(f"need 0 < theta1 < theta2 < 1, got {self.theta1}, {self.theta2}")
        if self.window is not None and not self.window > 0:
            raise ValueError("window must be positive")
        return self


class CompareSettings(BaseModel):
    network: Optional[Path] = None
    a_rate: float = 1.0
    b_rate: float = 1.0
    V: float = 30.0
    c0: float = 2.0
    t_end: float = 3.0
    outputs: int = 31
    cells: int = 1000
    window: Optional[float] = None

    @field_validator("a_rate", "b_rate", "c0", "t_end")
    @classmethod
    def _positive_fields(cls, v: float, info) -> float:
        return _positive(v, info.field_name)

    @field_validator("V")
    @classmethod
    def _v(cls, v: float) -> float:
        return _volume(v)


class ConvergeSettings(BaseModel):
    network: Optional[Path] = None
    V_list: List[float] = [25.0, 50.0, 100.0, 200.0]
    c0: Optional[List[float]] = None
    t_eval: float = 1.0
    tail: float = 1e-12
    bound_V_list: List[float] = [50.0, 100.0, 200.0, 400.0]

    @field_validator("t_eval", "tail")
    @classmethod
    def _positive_fields(cls, v: float, info) -> float:
        return _positive(v, info.field_name)

    @field_validator("V_list", "bound_V_list")
    @classmethod
    def _v_list(cls, values: List[float], info) -> List[float]:
        if not values:
            raise ValueError(f"{info.field_name} must not be empty")
        for v in values:
            _volume(v)
        if any(b <= a for a, b in zip(values, values[1:])):
            raise ValueError(f"{info.field_name} must be strictly increasing")
        return values


class AuditSettings(BaseModel):
    network: Optional[Path] = None
    V: float = 30.0
    c0: Optional[List[float]] = None
    t_end: float = 3.0
    outputs: int = 61
    tail: float = 1e-12
    atoms: int = 5

    @field_validator("t_end", "tail")
    @classmethod
    def _positive_fields(cls, v: float, info) -> float:
        return _positive(v, info.field_name)

    @field_validator("V")
    @classmethod
    def _v(cls, v: float) -> float:
        return _volume(v)

    @field_validator("outputs", "atoms")
    @classmethod
    def _counts(cls, v: int, info) -> int:
        if v < 1:
            raise ValueError(f"{info.field_name} must be at least 1")
        return v


SETTINGS_MODELS = {
    "analyze": AnalyzeSettings,
    "simulate": SimulateSettings,
    "compare": CompareSettings,
    "converge": ConvergeSettings,
    "audit": AuditSettings,
}

# Commands that need a network, from their section or from --network
NETWORK_COMMANDS = ("analyze", "simulate", "converge", "audit")


class ExperimentConfig(BaseModel):
    """Whole configuration document; command sections are optional."""

    source: Optional[Path] = None
    output_dir: Optional[Path] = None
    seed: int = 0
    analyze: Optional[AnalyzeSettings] = None
    simulate: Optional[SimulateSettings] = None
    compare: Optional[CompareSettings] = None
    converge: Optional[ConvergeSettings] = None
    audit: Optional[AuditSettings] = None


# ============================================================
# Loading
# ============================================================


def _parse_value(raw: str):
    """Comma-separated numbers become lists; single numbers stay scalars."""
    text = raw.strip()
    if "," in text:
        return [float(x) for x in text.split(",") if x.strip()]
    return text


_LIST_FIELDS = {
    "simulate": {"c0"},
    "converge": {"V_list", "bound_V_list", "c0"},
    "audit": {"c0"},
}


def _section_values(parser: configparser.ConfigParser, name: str, base: Path) -> dict:
    values = {}
    for key, raw in parser.items(name):
        value = _parse_value(raw)
        if key in _LIST_FIELDS.get(name, ()) and not isinstance(value, list):
            value = [float(value)] if value else []
        if key == "network":
            path = Path(value)
            value = path if path.is_absolute() else base / path
        values[key] = value
    return values


def parse_config(text: str, base_dir: Path = Path(".")) -> ExperimentConfig:
    """
    Parse an INI document into an ExperimentConfig.

    Args:
        text: INI text
        base_dir: Folder against which relative network paths resolve

    Returns:
        ExperimentConfig

    Raises:
        ConfigError: syntax error or failed validation
    """
    # keys are case-sensitive (V, V_list)
    parser = configparser.ConfigParser(interpolation=None, delimiters=("=",))
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from exc

    data: dict = {}
    unknown = [s for s in parser.sections() if s not in COMMANDS + ("output", "run")]
    if unknown:
        raise ConfigError(f"unknown config sections: {', '.join(unknown)}")
    if parser.has_option("output", "dir"):
        data["output_dir"] = parser.get("output", "dir")
    if parser.has_option("run", "seed"):
        data["seed"] = parser.get("run", "seed")
    try:
        for command in COMMANDS:
            if parser.has_section(command):
                data[command] = _section_values(parser, command, base_dir)
    except ValueError as exc:
        raise ConfigError(f"malformed value: {exc}") from exc
    try:
        return ExperimentConfig(**data)
    except ValidationError as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path) -> ExperimentConfig:
    """Read and validate the INI file at `path`."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    config = parse_config(text, base_dir=path.parent)
    logger.info("Loaded config %s (sections: %s)", path, [c for c in COMMANDS if getattr(config, c) is not None])
    return config.model_copy(update={"source": path})


def resolve_output_dir(config: ExperimentConfig, cli_out: Optional[str] = None) -> Path:
    """--out flag, then CRN_OUTPUT_DIR, then [output] dir, then ./output."""
    if cli_out:
        return Path(cli_out)
    env = os.getenv(OUTPUT_ENV_VAR)
    if env:
        return Path(env)
    if config.output_dir is not None:
        return config.output_dir
    return Path(DEFAULT_OUTPUT_DIR)
