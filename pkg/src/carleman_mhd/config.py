"""Plain-text experiment configuration: [section] headers, key = value lines.

Unknown sections or keys are errors so typos never silently change an
experiment; every report embeds the canonical dump for provenance.
"""

from __future__ import annotations

import configparser
import io
import os
from dataclasses import dataclass, field as dc_field, fields as dc_fields

from .errors import ConfigError
from .carleman_verify import ESTIMATE_IDS
from .mhd_systems import RECIPES


@dataclass
class GridSection:
    n: int = 16
    nt: int = 32
    T: float = 1.0
    t0: float = 0.5


@dataclass
class WeightsSection:
    lambdas: tuple = (1.0, 2.0, 3.0)
    s_values: tuple = (2.0, 4.0, 8.0, 16.0)
    beta_margin: float = 0.1
    eps: float = 0.19


@dataclass
class ScenarioSection:
    recipe: str = "default"
    seeds: tuple = (0, 1, 2)


@dataclass
class VerifySection:
    estimates: tuple = ("all",)
    spread_threshold: float = 3.0


@dataclass
class ReconstructionSection:
    mode: str = "global"
    weighting: str = "carleman"
    w_s: float = 0.25
    w_lambda: float = 1.0
    rho_gamma: float = -1.0          # negative means automatic
    rho_reg: float = 0.0
    noise_sigma: float = 0.0
    seed: int = 0
    derivative_mode: str = "clean"
    eps: float = 0.13
    tol: float = 2e-3
    max_iter: int = 3000


@dataclass
class StabilitySection:
    sigmas: tuple = (1e-4, 3.16e-4, 1e-3, 3.16e-3, 1e-2)
    seeds: tuple = (0, 1, 2)
    mode: str = "global"
    max_iter: int = 1200


@dataclass
class OutputSection:
    directory: str = ""


@dataclass
class RuntimeSection:
    threads: int = 1


@dataclass
class ExperimentConfig:
    grid: GridSection = dc_field(default_factory=GridSection)
    weights: WeightsSection = dc_field(default_factory=WeightsSection)
    scenario: ScenarioSection = dc_field(default_factory=ScenarioSection)
    verify: VerifySection = dc_field(default_factory=VerifySection)
    reconstruction: ReconstructionSection = dc_field(default_factory=ReconstructionSection)
    stability: StabilitySection = dc_field(default_factory=StabilitySection)
    output: OutputSection = dc_field(default_factory=OutputSection)
    runtime: RuntimeSection = dc_field(default_factory=RuntimeSection)

    def canonical_dump(self) -> str:
        lines = []
        for sec_field in dc_fields(self):
            sec = getattr(self, sec_field.name)
            lines.append(f"[{sec_field.name}]")
            for f in dc_fields(sec):
                v = getattr(sec, f.name)
                if isinstance(v, tuple):
                    out = ", ".join(_fmt(x) for x in v)
                else:
                    out = _fmt(v)
                lines.append(f"{f.name} = {out}")
            lines.append("")
        return "\n".join(lines)

    def estimate_ids(self) -> tuple:
        est = self.verify.estimates
        if est == ("all",):
            return ESTIMATE_IDS
        return est


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


_SECTIONS = {f.name: f.default_factory for f in dc_fields(ExperimentConfig)}


def _convert(name: str, raw: str, default):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            return raw.lower() in ("1", "true", "yes", "on")
        if isinstance(default, int) and not isinstance(default, bool):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            items = [x.strip() for x in raw.split(",") if x.strip()]
            if not items:
                raise ConfigError(f"list option '{name}' must be nonempty")
            if default and isinstance(default[0], str) or not default:
                return tuple(items)
            if isinstance(default[0], int):
                return tuple(int(x) for x in items)
            return tuple(float(x) for x in items)
        return raw
    except ValueError as exc:
        raise ConfigError(f"cannot parse option '{name} = {raw}': {exc}") from exc


def parse_config(source: str | os.PathLike | None = None) -> ExperimentConfig:
    """Parse a config file (by path) or literal config text; None gives the
    defaults.  Unknown sections/keys and empty lists are rejected."""
    cfg = ExperimentConfig()
    if source is None:
        _validate(cfg)
        return cfg
    text = None
    if isinstance(source, (str, os.PathLike)) and os.path.exists(str(source)):
        with open(source) as fh:
            text = fh.read()
    elif isinstance(source, str):
        text = source
    else:
        raise ConfigError(f"config source {source!r} is not readable")
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from exc
    for section in parser.sections():
        if section not in _SECTIONS:
            raise ConfigError(f"unknown config section '[{section}]'")
        target = getattr(cfg, section)
        known = {f.name: f for f in dc_fields(target)}
        for key, raw in parser.items(section):
            if key not in known:
                raise ConfigError(f"unknown key '{key}' in section '[{section}]'")
            default = getattr(target, key)
            setattr(target, key, _convert(f"{section}.{key}", raw, default))
    _validate(cfg)
    return cfg


def _validate(cfg: ExperimentConfig) -> None:
    if not cfg.weights.s_values:
        raise ConfigError("weights.s_values must be nonempty")
    if not cfg.weights.lambdas:
        raise ConfigError("weights.lambdas must be nonempty")
    if cfg.scenario.recipe not in RECIPES:
        raise ConfigError(
            f"unknown scenario recipe '{cfg.scenario.recipe}'; known: {sorted(RECIPES)}"
        )
    ids = cfg.verify.estimates
    if ids != ("all",):
        unknown = [e for e in ids if e not in ESTIMATE_IDS]
        if unknown:
            raise ConfigError(f"unknown estimate ids {unknown}")
    if cfg.reconstruction.mode not in ("global", "local"):
        raise ConfigError("reconstruction.mode must be 'global' or 'local'")
    if cfg.stability.mode not in ("global", "local"):
        raise ConfigError("stability.mode must be 'global' or 'local'")
    if cfg.reconstruction.derivative_mode not in ("clean", "fd"):
        raise ConfigError("reconstruction.derivative_mode must be 'clean' or 'fd'")
    if cfg.runtime.threads < 1:
        raise ConfigError("runtime.threads must be at least 1")
