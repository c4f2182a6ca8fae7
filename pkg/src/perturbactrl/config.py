"""Scenario configuration: a sectioned ``key = value`` text format.

Example::

    # lines starting with '#' are comments
    [scenario]
    id = transport_TgeL
    lab = transport
    seed = 0

    [problem]
    L = 1.0
    N = [100, 200]        # lists in brackets are sweep axes
    T = [0.5L, 1.2L]      # a trailing L (or T*) multiplies by the length (or GCC time)
    kernel = zero

    [tolerances]
    final_residual = 1e-3

Values are numbers, bracketed lists (nested for matrices) or bare strings.
Every problem is reported at once, each with its line number.
"""

from __future__ import annotations

import ast
import itertools
import re
from dataclasses import dataclass, field
from pathlib import Path

LABS = ("transport", "wave", "heat", "lti")

_NUM = r"[-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?"
_SCALED = re.compile(rf"^({_NUM})\s*\*?\s*(L|T\*)$")


@dataclass(frozen=True)
class Scaled:
    """A number written with a unit suffix, e.g. 1.2L or 1.5T*."""

    value: float
    unit: str

    def resolve(self, units: dict) -> float:
        return self.value * units[self.unit]

    def __str__(self):
        return f"{self.value:g}{self.unit}"


# key -> (kind, required, default); kinds: int, float, str, list, matrix, pair
_COMMON = {"scenario": {"id": ("str", True, None), "lab": ("str", True, None), "seed": ("int", False, 0)}}
SCHEMA = {
    "transport": {
        "problem": {"L": ("float", False, 1.0), "N": ("int", True, None), "T": ("float", True, None),
                    "kernel": ("str", False, "zero"), "penalty": ("float", False, 1e-10),
                    "obs_modes": ("int", False, 4)},
        "tolerances": {"final_residual": ("float", False, 1e-3),
                       "min_observability": ("float", False, 0.0)},
    },
    "wave": {
        "problem": {"n": ("int", False, 2), "N": ("int", False, 100), "ell": ("float", False, 1.0),
                    "omega": ("pair", False, (0.3, 0.7)), "T": ("float", True, None),
                    "coupling": ("str", False, "unit"), "route": ("str", False, "cascade"),
                    "n_time": ("int", False, 40), "n_space": ("int", False, 12),
                    "steps_per_knot": ("int", False, 320)},
        "tolerances": {"final_residual": ("float", False, 1e-3),
                       "reduction_residual": ("float", False, 1e-11)},
    },
    "heat": {
        "problem": {"D": ("matrix", True, None), "A": ("matrix", False, None), "B": ("matrix", False, None),
                    "N": ("int", False, 100), "ell": ("float", False, 1.0),
                    "omega": ("pair", False, (0.3, 0.7)), "T": ("float", True, None),
                    "n_modes": ("int", False, 16), "oracle": ("str", False, "yes")},
        "tolerances": {"final_relative": ("float", False, 1e-2), "moment_residual": ("float", False, 1e-6)},
    },
    "lti": {
        "problem": {"system": ("str", True, None), "T": ("float", False, 1.0),
                    "n_quad": ("int", False, 200)},
        "tolerances": {"rank": ("float", False, 1e-8), "expect": ("str", False, "any")},
    },
}
SWEEP_KEYS = {"transport": ("N", "T"), "wave": ("T", "N"), "heat": ("T", "N"), "lti": ("T",)}


class ConfigError(ValueError):
    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("\n".join(self.errors))


@dataclass
class ScenarioConfig:
    id: str
    lab: str
    seed: int
    problem: dict
    tolerances: dict
    sweep: dict = field(default_factory=dict)
    base_dir: Path = Path(".")

    def points(self) -> list[dict]:
        """Cartesian product of the sweep axes in declaration order."""
        keys = list(self.sweep)
        if not keys:
            return [dict()]
        return [dict(zip(keys, combo)) for combo in itertools.product(*(self.sweep[k] for k in keys))]


def _parse_scalar(text: str):
    text = text.strip()
    m = _SCALED.match(text)
    if m:
        return Scaled(float(m.group(1)), m.group(2))
    try:
        return ast.literal_eval(text)
    except (ValueError, SyntaxError):
        return text


def parse_value(text: str):
    text = text.strip()
    if text.startswith("["):
        if not text.endswith("]"):
            raise ValueError("unterminated list")
        inner = text[1:-1].strip()
        if "[" in inner:
            value = ast.literal_eval(text)
            return value
        if not inner:
            return []
        return [_parse_scalar(tok) for tok in inner.split(",")]
    return _parse_scalar(text)


def _check(kind, value, key):
    """Return (converted value, error message or None)."""
    if kind == "int":
        if isinstance(value, bool) or not isinstance(value, int):
            return None, f"{key} must be an integer"
        return value, None
    if kind == "float":
        if isinstance(value, Scaled):
            return value, None
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            return None, f"{key} must be a number"
        return float(value), None
    if kind == "str":
        return str(value), None
    if kind == "pair":
        if not (isinstance(value, list) and len(value) == 2 and all(isinstance(v, (int, float)) for v in value)):
            return None, f"{key} must be a two-number list"
        return (float(value[0]), float(value[1])), None
    if kind == "matrix":
        if not (isinstance(value, (list, tuple)) and value and all(isinstance(r, (list, tuple)) for r in value)):
            return None, f"{key} must be a nested list matrix"
        widths = {len(r) for r in value}
        if len(widths) != 1 or not all(isinstance(v, (int, float)) for r in value for v in r):
            return None, f"{key} rows must be numeric and of equal length"
        return [list(map(float, r)) for r in value], None
    raise AssertionError(kind)


_POSITIVE = {"N", "T", "L", "ell", "n", "n_modes", "n_time", "n_space", "steps_per_knot", "n_quad",
             "obs_modes", "penalty"}


def parse_config_text(text: str, base_dir: Path = Path(".")) -> ScenarioConfig:
    errors = []
    raw: dict[str, dict[str, tuple[object, int]]] = {}
    section = None
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if stripped.startswith("[") and stripped.endswith("]") and "=" not in stripped:
            section = stripped[1:-1].strip()
            if section not in ("scenario", "problem", "tolerances"):
                errors.append(f"line {lineno}: unknown section [{section}]")
            raw.setdefault(section, {})
            continue
        if "=" not in stripped:
            errors.append(f"line {lineno}: expected 'key = value'")
            continue
        if section is None:
            errors.append(f"line {lineno}: key outside any section")
            continue
        key, value = (p.strip() for p in stripped.split("=", 1))
        try:
            parsed = parse_value(value)
        except (ValueError, SyntaxError) as exc:
            errors.append(f"line {lineno}: malformed value for {key}: {exc}")
            continue
        if key in raw[section]:
            errors.append(f"line {lineno}: duplicate key {key}")
        raw[section][key] = (parsed, lineno)

    scen = raw.get("scenario", {})
    lab = scen.get("lab", (None, 0))[0]
    if lab is None:
        errors.append("line 0: missing required key lab in [scenario]")
        raise ConfigError(errors)
    if lab not in LABS:
        errors.append(f"line {scen['lab'][1]}: unknown lab {lab!r} (expected one of {', '.join(LABS)})")
        raise ConfigError(errors)

    schema = dict(_COMMON, **SCHEMA[lab])
    values: dict[str, dict] = {}
    sweep = {}
    for sec, keys in schema.items():
        values[sec] = {}
        given = raw.get(sec, {})
        for key, (val, lineno) in given.items():
            if key not in keys:
                errors.append(f"line {lineno}: unknown key {key} in [{sec}]")
        for key, (kind, required, default) in keys.items():
            if key not in given:
                if required:
                    errors.append(f"line 0: missing required key {key} in [{sec}]")
                values[sec][key] = default
                continue
            val, lineno = given[key]
            is_sweep = sec == "problem" and key in SWEEP_KEYS[lab] and isinstance(val, list)
            items = val if is_sweep else [val]
            if is_sweep and not items:
                errors.append(f"line {lineno}: sweep axis {key} is empty")
                continue
            conv = []
            for item in items:
                c, err = _check(kind, item, key)
                if err:
                    errors.append(f"line {lineno}: {err}")
                    break
                if key in _POSITIVE and not isinstance(c, Scaled) and isinstance(c, (int, float)) and c <= 0:
                    errors.append(f"line {lineno}: {key} must be positive")
                    break
                if isinstance(c, Scaled) and c.value <= 0 and key in _POSITIVE:
                    errors.append(f"line {lineno}: {key} must be positive")
                    break
                if sec == "tolerances" and isinstance(c, float) and c < 0:
                    errors.append(f"line {lineno}: tolerance {key} must be nonnegative")
                    break
                conv.append(c)
            else:
                if is_sweep:
                    sweep[key] = conv
                    values[sec][key] = None
                else:
                    values[sec][key] = conv[0]
    if errors:
        raise ConfigError(errors)
    cfg = ScenarioConfig(values["scenario"]["id"], lab, values["scenario"]["seed"], values["problem"],
                         values["tolerances"], sweep, base_dir)
    _check_files(cfg, raw, errors)
    if errors:
        raise ConfigError(errors)
    return cfg


def _check_files(cfg: ScenarioConfig, raw, errors) -> None:
    for key in ("kernel", "coupling", "system"):
        val = cfg.problem.get(key)
        if isinstance(val, str) and (val.startswith("file:") or cfg.lab == "lti"):
            path = resolve_path(cfg, val)
            if not path.exists():
                lineno = raw["problem"][key][1]
                errors.append(f"line {lineno}: referenced file {path} does not exist")


def resolve_path(cfg: ScenarioConfig, value: str) -> Path:
    value = value[5:] if value.startswith("file:") else value
    p = Path(value)
    return p if p.is_absolute() else cfg.base_dir / p


def parse_config(path) -> ScenarioConfig:
    path = Path(path)
    return parse_config_text(path.read_text(), path.parent)
