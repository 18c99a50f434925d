"""Experiment configuration: a flat TOML file checked against a per-experiment schema."""

import difflib
import math
import re
from dataclasses import dataclass, field

import tomli

from ..kernel_core import ModelParams

DEFAULT_SEED = 24301
SECTIONS = ("model", "solver", "options", "tolerances")
TOP_LEVEL = ("experiment", "seed", "out")


class ConfigError(ValueError):
    """The configuration text does not parse or does not match the schema."""


def _line_of(text, section, key):
    """1-based line of ``key = ...`` inside ``[section]`` (top level when ``section`` is None)."""
    current = None
    for n, line in enumerate(text.splitlines(), 1):
        head = re.match(r"\s*\[([^\]]+)\]", line)
        if head:
            current = head.group(1).strip()
            continue
        if current == section and re.match(rf"\s*{re.escape(key)}\s*=", line):
            return n
    if section is not None:
        for n, line in enumerate(text.splitlines(), 1):
            if re.match(rf"\s*\[{re.escape(section)}\]", line):
                return n
    return None


def _fail(text, source, section, key, message):
    line = _line_of(text, section, key) if key is not None else None
    where = f"{source}:{line}" if line else source
    raise ConfigError(f"{where}: {message}")


def _suggest(key, allowed):
    close = difflib.get_close_matches(key, list(allowed), n=1, cutoff=0.5)
    return f"; did you mean {close[0]!r}?" if close else f"; valid keys: {', '.join(sorted(allowed))}"


def _coerce(value, default, text, source, section, key):
    """Values take the type of their default; ints are accepted where floats are expected."""
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    elif isinstance(default, str):
        ok = isinstance(value, str)
    elif isinstance(default, list):
        ok = isinstance(value, list)
    else:
        ok = True
    if not ok:
        _fail(text, source, section, key, f"{key} must be {type(default).__name__}, got {value!r}")
    return value


@dataclass(frozen=True)
class ExperimentConfig:
    experiment: str
    seed: int = DEFAULT_SEED
    out: str | None = None
    model: dict = field(default_factory=dict)
    solver: dict = field(default_factory=dict)
    options: dict = field(default_factory=dict)
    tolerances: dict = field(default_factory=dict)

    @property
    def params(self) -> ModelParams:
        m = self.model
        return ModelParams(m["beta"], m["sigma"], m["dim"], m["horizon"])

    def echo(self) -> dict:
        return {
            "experiment": self.experiment,
            "seed": self.seed,
            "out": self.out,
            "model": dict(self.model),
            "solver": dict(self.solver),
            "options": dict(self.options),
            "tolerances": dict(self.tolerances),
        }

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return ExperimentConfig(self.experiment, seed, self.out, self.model, self.solver, self.options, self.tolerances)


def validate_config(text: str, source: str = "<config>") -> ExperimentConfig:
    """Parse and validate; every error names the offending line and key."""
    from .experiments import REGISTRY

    try:
        raw = tomli.loads(text)
    except tomli.TOMLDecodeError as err:
        raise ConfigError(f"{source}: {err}") from None
    for key, value in raw.items():
        if key not in TOP_LEVEL and key not in SECTIONS:
            section_like = isinstance(value, dict)
            allowed = SECTIONS if section_like else TOP_LEVEL
            _fail(text, source, None, key, f"unknown {'section' if section_like else 'key'} {key!r}{_suggest(key, allowed)}")
    exp = raw.get("experiment")
    if exp is None:
        raise ConfigError(f"{source}: missing required key 'experiment' (one of {', '.join(REGISTRY)})")
    if exp not in REGISTRY:
        _fail(text, source, None, "experiment", f"unknown experiment {exp!r}{_suggest(exp, REGISTRY)}")
    schema = REGISTRY[exp].schema
    seed = raw.get("seed", DEFAULT_SEED)
    if not isinstance(seed, int) or isinstance(seed, bool) or not 0 <= seed < 2**64:
        _fail(text, source, None, "seed", f"seed must be an integer in [0, 2^64), got {seed!r}")
    out = raw.get("out")
    if out is not None and not isinstance(out, str):
        _fail(text, source, None, "out", "out must be a path string")
    resolved = {}
    for section in SECTIONS:
        given = raw.get(section, {})
        if not isinstance(given, dict):
            _fail(text, source, None, section, f"{section} must be a table")
        defaults = schema.get(section, {})
        merged = dict(defaults)
        for key, value in given.items():
            if key not in defaults:
                _fail(text, source, section, key, f"unknown key {key!r} in [{section}]{_suggest(key, defaults)}")
            merged[key] = _coerce(value, defaults[key], text, source, section, key)
        resolved[section] = merged
    cfg = ExperimentConfig(exp, seed, out, **resolved)
    sigma = cfg.model.get("sigma")
    if sigma is not None and not sigma > 0:
        _fail(text, source, "model", "sigma",
              f"sigma = {sigma} violates the standing assumption sigma > 0 (the diffusion must be nondegenerate)")
    if "beta" in cfg.model:
        try:
            cfg.params
        except ValueError as err:
            bad = next((k for k in ("sigma", "beta", "dim", "horizon") if k in str(err)), None)
            _fail(text, source, "model", bad, str(err))
    omega = cfg.model.get("omega")
    if omega is not None and omega not in (1, -1):
        _fail(text, source, "model", "omega", "omega must be +1 (Coulombic) or -1 (gravitational)")
    dt = cfg.solver.get("dt")
    if dt is not None and not dt > 0:
        _fail(text, source, "solver", "dt", f"dt must be > 0, got {dt}")
    for key, value in cfg.tolerances.items():
        if not (isinstance(value, (int, float)) and math.isfinite(value) and value >= 0):
            _fail(text, source, "tolerances", key, f"tolerance {key} must be finite and >= 0, got {value!r}")
    return cfg


def default_config(experiment: str) -> ExperimentConfig:
    return validate_config(f'experiment = "{experiment}"\n')
