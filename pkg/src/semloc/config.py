"""INI experiment configs.

Every section maps onto one dataclass; keys are field names.  A key ending in
``_deg`` sets the like-named radian field, e.g. ``theta_range_deg = 2``.
Values are parsed according to the type of the field's default.
"""
from __future__ import annotations

import configparser
import dataclasses
import math
import re
from dataclasses import dataclass, replace
from pathlib import Path

from .bayes_filter import FilterConfig
from .simulator import NoiseConfig, ScenarioConfig, ScenarioError, SensorConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DeterministicWeights:
    """Per-axis weights ``(lat, lon, theta)`` of each source in the deterministic baseline."""

    dynamics: tuple[float, float, float] = (1.0, 1.0, 1.0)
    gps: tuple[float, float, float] = (0.25, 0.25, 0.0)
    lane: tuple[float, float, float] = (4.0, 0.0, 4.0)
    sign: tuple[float, float, float] = (0.0, 4.0, 0.0)

    def __post_init__(self):
        for name in ("dynamics", "gps", "lane", "sign"):
            w = getattr(self, name)
            if len(w) != 3 or min(w) < 0:
                raise ConfigError(f"{name} weights must be three non-negative numbers")


@dataclass(frozen=True)
class SuiteConfig:
    name: str = "suite"
    seeds: tuple[int, ...] = tuple(range(20))
    methods: tuple[str, ...] = ("dynamics", "gps", "full")
    stride: int = 5
    burn_in: int = 10
    scenario: ScenarioConfig = ScenarioConfig()
    noise: NoiseConfig = NoiseConfig()
    sensor: SensorConfig = SensorConfig()
    filter: FilterConfig = FilterConfig()
    deterministic: DeterministicWeights = DeterministicWeights()
    snapshot_step: int = 20

    def __post_init__(self):
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if self.stride < 1 or self.burn_in < 0:
            raise ConfigError("stride must be >= 1 and burn_in >= 0")


def parse_seeds(text: str) -> tuple[int, ...]:
    """``"0-3, 7"`` -> ``(0, 1, 2, 3, 7)``."""
    out = []
    for part in filter(None, text.replace(" ", "").split(",")):
        m = re.fullmatch(r"(\d+)-(\d+)", part)
        try:
            out.extend(range(int(m[1]), int(m[2]) + 1) if m else [int(part)])
        except ValueError:
            raise ConfigError(f"bad seed list {text!r}") from None
    return tuple(out)


def _parse_value(raw: str, current, key: str):
    raw = raw.strip()
    try:
        if isinstance(current, bool):
            return {"true": True, "yes": True, "1": True, "false": False, "no": False, "0": False}[raw.lower()]
        if isinstance(current, int) or (current is None and raw.lstrip("-").isdigit()):
            return int(raw)
        if isinstance(current, float):
            return float(raw)
        if isinstance(current, str):
            return raw
        if isinstance(current, tuple):
            parts = [p.strip() for p in raw.split(",") if p.strip()]
            if current and isinstance(current[0], str):
                return tuple(parts)
            if current and isinstance(current[0], int) and not isinstance(current[0], bool):
                return tuple(int(p) for p in parts)
            return tuple(float(p) for p in parts)
        if current is None:
            return None if raw.lower() in ("none", "") else int(raw)
    except (KeyError, ValueError) as e:
        raise ConfigError(f"bad value {raw!r} for {key}: {e}") from None
    raise ConfigError(f"cannot parse key {key}")


def apply_section(obj, items: dict[str, str], section: str):
    """Return ``obj`` with the fields named in ``items`` replaced."""
    names = {f.name for f in dataclasses.fields(obj)}
    updates = {}
    for key, raw in items.items():
        deg = key.endswith("_deg")
        name = key[: -len("_deg")] if deg else key
        if name not in names:
            raise ConfigError(f"unknown key [{section}] {key}")
        val = _parse_value(raw, getattr(obj, name), f"[{section}] {key}")
        if deg:
            val = tuple(math.radians(v) for v in val) if isinstance(val, tuple) else math.radians(val)
        updates[name] = val
    try:
        return replace(obj, **updates)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"[{section}]: {e}") from None


def load_suite(path) -> SuiteConfig:
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    cp.read(path)
    return suite_from_parser(cp)


def loads_suite(text: str) -> SuiteConfig:
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    cp.read_string(text)
    return suite_from_parser(cp)


def suite_from_parser(cp: configparser.ConfigParser) -> SuiteConfig:
    known = {"suite", "scenario", "noise", "sensor", "filter", "grid", "deterministic"}
    extra = set(cp.sections()) - known
    if extra:
        raise ConfigError(f"unknown sections: {sorted(extra)}")
    suite = SuiteConfig()
    if cp.has_section("suite"):
        items = dict(cp.items("suite"))
        if "seeds" in items:
            suite = replace(suite, seeds=parse_seeds(items.pop("seeds")))
        suite = apply_section(suite, items, "suite")
    sub = {}
    noise = suite.noise
    if cp.has_section("noise") and cp.get("noise", "preset", fallback="default") == "noiseless":
        noise = NoiseConfig.noiseless()
    for sec, cur in (
        ("scenario", suite.scenario),
        ("noise", noise),
        ("sensor", suite.sensor),
        ("deterministic", suite.deterministic),
    ):
        if cp.has_section(sec):
            items = {k: v for k, v in cp.items(sec) if k != "preset"}
            cur = apply_section(cur, items, sec)
        sub[sec] = cur
    fcfg = suite.filter
    if cp.has_section("filter"):
        fcfg = apply_section(fcfg, dict(cp.items("filter")), "filter")
    if cp.has_section("grid"):
        fcfg = replace(fcfg, grid=apply_section(fcfg.grid, dict(cp.items("grid")), "grid"))
    suite = replace(suite, filter=fcfg, **sub)
    try:
        suite.scenario.validate()
        suite.noise.validate()
    except ScenarioError as e:
        raise ConfigError(str(e)) from None
    return suite


def scenario_from_file(path) -> tuple[ScenarioConfig, NoiseConfig, SensorConfig, tuple[int, ...]]:
    """Scenario, noise and sensor blocks (plus seeds) from a suite-style file."""
    s = load_suite(path)
    return s.scenario, s.noise, s.sensor, s.seeds
