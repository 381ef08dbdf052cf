"""INI run configuration.

One section per module; keys mirror the dataclass fields they fill::

    [scenario]
    name = sampling
    seed = 0
    height = 64

    [experiment]
    methods = fine+mr-inr+sst, fine
    n_target_slices = 10

    [stage1]
    epochs = 25
    lambda_inr = 1.0

``scenario.name`` and ``experiment.methods`` are required.  Every other key
falls back to its dataclass default.  Unknown sections or keys are errors.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, fields, replace
from pathlib import Path

from .inr import InrConfig
from .losses import LossWeights
from .mri import ScenarioConfig, make_shift_scenario
from .pipeline import ExperimentConfig, Method, Stage1Config, Stage2Config, method_grid
from .recon import ReconConfig

__all__ = ["ConfigError", "RunConfig", "parse_config", "load_config", "REQUIRED_KEYS"]

REQUIRED_KEYS = (("scenario", "name"), ("experiment", "methods"))
SCENARIO_KEYS = {"seed": int, "height": int, "width": int, "n_coils": int, "noise_sd": float, "accel": float, "acs_frac": float}
WEIGHT_KEYS = {"lambda_inr": "inr", "lambda_self": "self_", "lambda_reg": "reg"}
NESTED = ("recon", "inr", "stage1", "stage2", "weights")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    scenario: ScenarioConfig
    methods: tuple[Method, ...]
    experiment: ExperimentConfig


def _coerce(section: str, key: str, raw: str, kind: type):
    try:
        if kind is bool:
            value = raw.strip().lower()
            if value not in configparser.ConfigParser.BOOLEAN_STATES:
                raise ValueError(raw)
            return configparser.ConfigParser.BOOLEAN_STATES[value]
        return kind(raw.strip())
    except ValueError:
        raise ConfigError(f"[{section}] {key}: cannot read {raw!r} as {kind.__name__}") from None


def _fill(cls, section: str, items: dict[str, str], base=None, extra=()):
    base = base if base is not None else cls()
    known = {f.name: type(getattr(base, f.name)) for f in fields(cls) if f.name not in NESTED}
    updates = {}
    for key, raw in items.items():
        if key in extra:
            continue
        if key not in known:
            raise ConfigError(f"[{section}] unknown key {key!r}")
        updates[key] = _coerce(section, key, raw, known[key])
    try:
        return replace(base, **updates)
    except ValueError as exc:
        raise ConfigError(f"[{section}] {exc}") from None


def _weights(section: str, items: dict[str, str], base: LossWeights) -> LossWeights:
    updates = {WEIGHT_KEYS[k]: _coerce(section, k, v, float) for k, v in items.items() if k in WEIGHT_KEYS}
    try:
        return replace(base, **updates)
    except ValueError as exc:
        raise ConfigError(f"[{section}] {exc}") from None


def _methods(raw: str) -> tuple[Method, ...]:
    names = [m.strip() for m in raw.split(",") if m.strip()]
    if names == ["all"]:
        return tuple(method_grid())
    if not names:
        raise ConfigError("[experiment] methods is empty")
    try:
        return tuple(Method.parse(n) for n in names)
    except ValueError as exc:
        raise ConfigError(f"[experiment] {exc}") from None


def parse_config(text: str, overrides: dict[str, str] | None = None) -> RunConfig:
    """Build a :class:`RunConfig` from INI text plus ``section.key`` overrides."""
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    for dotted, value in (overrides or {}).items():
        section, _, key = dotted.partition(".")
        if not key:
            raise ConfigError(f"override {dotted!r} must look like section.key")
        if not parser.has_section(section):
            parser.add_section(section)
        parser.set(section, key, value)
    allowed = {"scenario", "experiment", "recon", "inr", "stage1", "stage2"}
    for section in parser.sections():
        if section not in allowed:
            raise ConfigError(f"unknown section [{section}]")
    for section, key in REQUIRED_KEYS:
        if not parser.has_option(section, key):
            raise ConfigError(f"missing required key {section}.{key}")
    sec = {name: dict(parser.items(name)) if parser.has_section(name) else {} for name in allowed}

    scen = sec["scenario"]
    name = scen.pop("name").strip()
    for key in scen:
        if key not in SCENARIO_KEYS:
            raise ConfigError(f"[scenario] unknown key {key!r}")
    overrides_ = {k: _coerce("scenario", k, v, SCENARIO_KEYS[k]) for k, v in scen.items()}
    seed = overrides_.pop("seed", 0)
    try:
        scenario = make_shift_scenario(name, seed, **overrides_)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"[scenario] {exc}") from None

    methods = _methods(sec["experiment"].pop("methods"))
    s1 = _fill(Stage1Config, "stage1", sec["stage1"], extra=WEIGHT_KEYS)
    s1 = replace(s1, weights=_weights("stage1", sec["stage1"], s1.weights))
    s2 = _fill(Stage2Config, "stage2", sec["stage2"], extra=WEIGHT_KEYS)
    s2 = replace(s2, weights=_weights("stage2", sec["stage2"], s2.weights))
    experiment = _fill(ExperimentConfig, "experiment", sec["experiment"])
    experiment = replace(
        experiment,
        scenario=name,
        recon=_fill(ReconConfig, "recon", sec["recon"]),
        inr=_fill(InrConfig, "inr", sec["inr"]),
        stage1=s1,
        stage2=s2,
    )
    return RunConfig(scenario, methods, experiment)


def load_config(path, overrides: dict[str, str] | None = None) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config(text, overrides)
