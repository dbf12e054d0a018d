"""Experiment configuration: an INI-style text format.

Example::

    [experiment]
    scenario = track
    seeds = 1..20
    output_dir = out/track

    [scenario]
    speed = 60

    [filter.rbpf]
    type = rbpf
    particles = 50
    rho_w = 0.05
    process_prior = laplace(sigma=1e6)

    [filter.imm]
    type = imm
    sigmas = 1, 50
    transition = 0.9 0.1; 0.1 0.9

Unknown sections or keys, duplicate keys and out-of-range values are
errors that name the offending line.
"""
from __future__ import annotations

import configparser
import re
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Any, Callable

import numpy as np

from . import distributions as dist

SCENARIOS = ("sv", "ar2", "track", "custom-lds")
FILTER_TYPES = ("rbpf", "kf", "imm", "bootstrap_pf")


class ConfigError(ValueError):
    """Base class for configuration problems."""

    def __init__(self, message: str, line: int | None = None, path: str | None = None):
        where = ""
        if path is not None:
            where = f"{path}:"
        if line is not None:
            where += f"{line}:"
        super().__init__(f"{where} {message}".strip() if where else message)
        self.line = line


class ConfigIOError(ConfigError):
    pass


class ConfigSyntaxError(ConfigError):
    pass


class ConfigValueError(ConfigError):
    pass


# Value parsers --------------------------------------------------------------

def parse_seeds(text: str) -> tuple[int, ...]:
    """``"1..20"``, ``"3"`` or ``"1, 4, 9"``; ranges are inclusive."""
    out: list[int] = []
    for part in (p.strip() for p in text.split(",")):
        if not part:
            continue
        m = re.fullmatch(r"(-?\d+)\s*\.\.\s*(-?\d+)", part)
        if m:
            a, b = int(m.group(1)), int(m.group(2))
            if b < a:
                raise ValueError(f"empty seed range {part!r}")
            out.extend(range(a, b + 1))
        else:
            out.append(int(part))
    if not out:
        raise ValueError("no seeds given")
    return tuple(out)


def format_seeds(seeds: tuple[int, ...]) -> str:
    if len(seeds) > 1 and seeds == tuple(range(seeds[0], seeds[-1] + 1)):
        return f"{seeds[0]}..{seeds[-1]}"
    return ", ".join(str(s) for s in seeds)


def parse_floats(text: str) -> tuple[float, ...]:
    vals = tuple(float(v) for v in re.split(r"[,\s]+", text.strip()) if v)
    if not vals:
        raise ValueError("expected at least one number")
    return vals


def parse_matrix(text: str) -> tuple[tuple[float, ...], ...]:
    """Rows separated by ``;``, entries by spaces or commas."""
    rows = tuple(parse_floats(r) for r in text.split(";") if r.strip())
    if not rows or len({len(r) for r in rows}) != 1:
        raise ValueError(f"ragged or empty matrix {text!r}")
    return rows


def format_number(x: float) -> str:
    return repr(float(x))


def format_floats(vals) -> str:
    return ", ".join(format_number(v) for v in vals)


def format_matrix(rows) -> str:
    return "; ".join(" ".join(format_number(v) for v in r) for r in rows)


@dataclass(frozen=True)
class PriorSpec:
    """Textual noise family, e.g. ``student_t(sigma=1e4, nu=5)``.

    ``sigma`` scales the identity; ``mu`` and ``beta`` broadcast over the
    noise dimension.
    """

    family: str
    params: tuple = ()

    KEYS = {
        "gaussian": ({"sigma"}, {"mu"}),
        "student_t": ({"sigma", "nu"}, {"mu"}),
        "pearson_vii": ({"sigma", "nu", "delta"}, {"mu"}),
        "slash": ({"sigma", "nu"}, {"mu"}),
        "variance_gamma": ({"sigma", "nu"}, {"mu"}),
        "laplace": ({"sigma"}, {"mu"}),
        "gh_skew_t": ({"sigma", "nu", "beta"}, {"mu"}),
        "gh_variance_gamma": ({"sigma", "nu", "beta"}, {"mu"}),
    }

    @classmethod
    def parse(cls, text: str) -> "PriorSpec":
        m = re.fullmatch(r"\s*([a-z_]+)\s*\((.*)\)\s*", text)
        if not m:
            raise ValueError(f"expected family(key=value, ...), got {text!r}")
        family, body = m.group(1), m.group(2)
        if family not in cls.KEYS:
            raise ValueError(f"unknown noise family {family!r}; choose from {sorted(cls.KEYS)}")
        params: dict[str, float] = {}
        for item in (s.strip() for s in body.split(",")):
            if not item:
                continue
            key, sep, val = item.partition("=")
            key = key.strip()
            if not sep:
                raise ValueError(f"expected key=value in {item!r}")
            if key in params:
                raise ValueError(f"duplicate prior parameter {key!r}")
            params[key] = float(val)
        required, optional = cls.KEYS[family]
        missing = required - params.keys()
        extra = params.keys() - required - optional
        if missing:
            raise ValueError(f"{family} needs {sorted(missing)}")
        if extra:
            raise ValueError(f"{family} does not take {sorted(extra)}")
        spec = cls(family, tuple(sorted(params.items())))
        spec.build(1)
        return spec

    def format(self) -> str:
        return f"{self.family}(" + ", ".join(f"{k}={format_number(v)}" for k, v in self.params) + ")"

    def build(self, dim: int) -> dist.HgmNoiseSpec:
        p = dict(self.params)
        mu = np.full(dim, p.get("mu", 0.0))
        Sigma = np.eye(dim) * p["sigma"]
        if self.family == "laplace":
            return dist.laplace(mu, Sigma)
        beta = np.full(dim, p["beta"]) if "beta" in p else None
        return dist.HgmNoiseSpec(dist.Family(self.family), mu, Sigma, nu=p.get("nu"),
                                 delta=p.get("delta"), beta=beta)


# Schema ----------------------------------------------------------------------

@dataclass(frozen=True)
class Field:
    parse: Callable[[str], Any]
    fmt: Callable[[Any], str]
    check: Callable[[Any], str | None] | None = None


def _range(lo=None, hi=None, lo_open=False, hi_open=False):
    def check(v):
        vals = v if isinstance(v, tuple) else (v,)
        for x in vals:
            if isinstance(x, tuple):
                problem = check(x)
                if problem:
                    return problem
                continue
            if (lo is not None and (x < lo or (lo_open and x == lo))) or (
                    hi is not None and (x > hi or (hi_open and x == hi))):
                left = "(" if lo_open else "["
                right = ")" if hi_open else "]"
                return f"value {x!r} outside {left}{lo if lo is not None else '-inf'}, " \
                       f"{hi if hi is not None else 'inf'}{right}"
        return None
    return check


def _choice(*options):
    def check(v):
        return None if v in options else f"must be one of {options}"
    return check


def _int(text: str) -> int:
    return int(text.strip())


def _str(text: str) -> str:
    return text.strip()


F = format_number
FLOAT = lambda check=None: Field(float, F, check)  # noqa: E731
INT = lambda check=None: Field(_int, str, check)  # noqa: E731
FLOATS = lambda check=None: Field(parse_floats, format_floats, check)  # noqa: E731
MATRIX = Field(parse_matrix, format_matrix)
PRIOR = Field(PriorSpec.parse, PriorSpec.format)
CHOICE = lambda *o: Field(_str, str, _choice(*o))  # noqa: E731

EXPERIMENT_FIELDS = {
    "scenario": CHOICE(*SCENARIOS),
    "seeds": Field(parse_seeds, format_seeds),
    "steps": INT(_range(0)),
    "horizon": INT(_range(0)),
    "output_dir": Field(_str, str),
}

SCENARIO_FIELDS = {
    "track": {
        "speed": FLOAT(_range(0)),
        "heading": FLOAT(),
        "turn_rate": FLOAT(),
        "durations": Field(lambda t: tuple(int(v) for v in parse_floats(t)),
                           lambda v: ", ".join(str(x) for x in v), _range(1)),
        "T": FLOAT(_range(0, lo_open=True)),
        "meas_noise": CHOICE("gaussian", "contaminated"),
        "meas_sigma": FLOAT(_range(0, lo_open=True)),
    },
    "ar2": {
        "coeffs": FLOATS(),
        "process_var": FLOAT(_range(0, lo_open=True)),
        "meas_noise": CHOICE("sporadic", "persistent", "gaussian"),
        "meas_var": FLOAT(_range(0, lo_open=True)),
        "outlier_var": FLOAT(_range(0, lo_open=True)),
        "outlier_prob": FLOAT(_range(0, 1)),
        "x0_var": FLOAT(_range(0, lo_open=True)),
    },
    "sv": {
        "gamma0": FLOAT(),
        "gamma1": FLOAT(_range(-1, 1, True, True)),
        "sigma_n2": FLOAT(_range(0)),
    },
    "custom-lds": {
        "A": MATRIX,
        "B": MATRIX,
        "C": MATRIX,
        "process_noise": PRIOR,
        "measurement_noise": PRIOR,
        "x0_mean": FLOATS(),
        "x0_cov": MATRIX,
    },
}

SCENARIO_REQUIRED = {"custom-lds": ("A", "B", "C", "process_noise", "measurement_noise")}

FILTER_FIELDS = {
    "rbpf": {
        "particles": INT(_range(1)),
        "rho_w": FLOAT(_range(0, 1, True, True)),
        "rho_e": FLOAT(_range(0, 1, True, True)),
        "process_prior": PRIOR,
        "measurement_prior": PRIOR,
        "ess_threshold": FLOAT(_range(0, 1, lo_open=True)),
        "resample": CHOICE("always", "ess"),
    },
    "kf": {
        "Q": FLOAT(_range(0)),
        "R": FLOAT(_range(0, lo_open=True)),
        "mu_w": FLOAT(),
        "mu_e": FLOAT(),
    },
    "imm": {
        "sigmas": FLOATS(_range(0)),
        "transition": Field(parse_matrix, format_matrix, _range(0, 1)),
        "initial": FLOATS(_range(0, 1)),
        "R": FLOAT(_range(0, lo_open=True)),
    },
    "bootstrap_pf": {
        "particles": INT(_range(1)),
        "Q": FLOAT(_range(0)),
        "R": FLOAT(_range(0, lo_open=True)),
    },
}

FILTER_REQUIRED = {"imm": ("sigmas",), "kf": ("Q",)}


@dataclass(frozen=True)
class FilterConfig:
    name: str
    type: str
    params: tuple = ()

    def get(self, key, default=None):
        return dict(self.params).get(key, default)


@dataclass(frozen=True)
class ExperimentConfig:
    scenario: str
    filters: tuple
    seeds: tuple = (1,)
    steps: int | None = None
    horizon: int = 0
    output_dir: str = "out"
    scenario_params: tuple = ()

    def param(self, key, default=None):
        return dict(self.scenario_params).get(key, default)

    def filter_names(self) -> list[str]:
        return [f.name for f in self.filters]

    def select(self, names) -> "ExperimentConfig":
        names = list(names)
        known = set(self.filter_names())
        unknown = [n for n in names if n not in known]
        if unknown:
            raise ConfigValueError(f"unknown filter(s) {unknown}; configured: {sorted(known)}")
        return replace(self, filters=tuple(f for f in self.filters if f.name in names))

    def to_text(self) -> str:
        lines = ["[experiment]", f"scenario = {self.scenario}", f"seeds = {format_seeds(self.seeds)}"]
        if self.steps is not None:
            lines.append(f"steps = {self.steps}")
        lines += [f"horizon = {self.horizon}", f"output_dir = {self.output_dir}", ""]
        if self.scenario_params:
            lines.append("[scenario]")
            fields = SCENARIO_FIELDS[self.scenario]
            for k, v in self.scenario_params:
                lines.append(f"{k} = {fields[k].fmt(v)}")
            lines.append("")
        for f in self.filters:
            lines += [f"[filter.{f.name}]", f"type = {f.type}"]
            fields = FILTER_FIELDS[f.type]
            for k, v in f.params:
                lines.append(f"{k} = {fields[k].fmt(v)}")
            lines.append("")
        return "\n".join(lines)


# Parsing ---------------------------------------------------------------------

def _line_index(text: str) -> dict[tuple[str, str], int]:
    """Map ``(section, key)`` to 1-based line numbers."""
    index: dict[tuple[str, str], int] = {}
    section = None
    for no, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line[0] in "#;":
            continue
        m = re.fullmatch(r"\[([^\]]+)\]", line)
        if m:
            section = m.group(1).strip()
            index.setdefault((section, ""), no)
            continue
        m = re.match(r"([^=:]+?)\s*[=:]", line)
        if m and section is not None:
            index.setdefault((section, m.group(1).strip()), no)
    return index


def parse_config_text(text: str, path: str | None = None) -> ExperimentConfig:
    parser = configparser.ConfigParser(
        strict=True, interpolation=None, inline_comment_prefixes=("#",), empty_lines_in_values=False)
    parser.optionxform = str
    try:
        parser.read_string(text, source=path or "<config>")
    except configparser.DuplicateOptionError as exc:
        raise ConfigSyntaxError(f"duplicate key {exc.option!r} in section [{exc.section}]",
                                exc.lineno, path) from exc
    except configparser.DuplicateSectionError as exc:
        raise ConfigSyntaxError(f"duplicate section [{exc.section}]", exc.lineno, path) from exc
    except configparser.MissingSectionHeaderError as exc:
        raise ConfigSyntaxError("key outside of any section", exc.lineno, path) from exc
    except configparser.ParsingError as exc:
        line = exc.errors[0][0] if exc.errors else None
        raise ConfigSyntaxError("cannot parse line", line, path) from exc

    lines = _line_index(text)

    def err(msg, section, key=""):
        return ConfigValueError(msg, lines.get((section, key)), path)

    def read_fields(section: str, schema: dict, skip=()) -> tuple:
        out = []
        for key, raw in parser.items(section):
            if key in skip:
                continue
            if key not in schema:
                raise err(f"unknown key {key!r} in [{section}]; allowed: {sorted(schema)}", section, key)
            fld = schema[key]
            try:
                val = fld.parse(raw)
            except (ValueError, TypeError) as exc:
                raise err(f"invalid value for {key!r}: {exc}", section, key) from exc
            if fld.check is not None:
                problem = fld.check(val)
                if problem:
                    raise err(f"{key}: {problem}", section, key)
            out.append((key, val))
        return tuple(sorted(out))

    for section in parser.sections():
        if section not in ("experiment", "scenario") and not section.startswith("filter."):
            raise err(f"unknown section [{section}]", section)
    if not parser.has_section("experiment"):
        raise ConfigValueError("missing [experiment] section", None, path)

    exp = dict(read_fields("experiment", EXPERIMENT_FIELDS))
    if "scenario" not in exp:
        raise err("[experiment] needs a scenario", "experiment")
    scenario = exp["scenario"]

    scen_params = read_fields("scenario", SCENARIO_FIELDS[scenario]) if parser.has_section("scenario") else ()
    missing = [k for k in SCENARIO_REQUIRED.get(scenario, ()) if k not in dict(scen_params)]
    if missing:
        raise err(f"scenario {scenario} needs {missing}", "scenario")

    filters = []
    for section in parser.sections():
        if not section.startswith("filter."):
            continue
        name = section[len("filter."):]
        if not re.fullmatch(r"[A-Za-z0-9_\-]+", name):
            raise err(f"invalid filter name {name!r}", section)
        ftype = parser.get(section, "type", fallback=None)
        if ftype is None:
            raise err(f"[{section}] needs a type", section)
        ftype = ftype.strip()
        if ftype not in FILTER_TYPES:
            raise err(f"unknown filter type {ftype!r}; choose from {FILTER_TYPES}", section, "type")
        params = read_fields(section, FILTER_FIELDS[ftype], skip=("type",))
        missing = [k for k in FILTER_REQUIRED.get(ftype, ()) if k not in dict(params)]
        if missing:
            raise err(f"{ftype} filter needs {missing}", section)
        _check_filter(ftype, dict(params), lambda m: err(m, section))
        filters.append(FilterConfig(name, ftype, params))
    if not filters:
        raise ConfigValueError("at least one [filter.NAME] section is required", None, path)

    return ExperimentConfig(
        scenario=scenario, filters=tuple(filters), seeds=exp.get("seeds", (1,)),
        steps=exp.get("steps"), horizon=exp.get("horizon", 0),
        output_dir=exp.get("output_dir", "out"), scenario_params=scen_params)


def _check_filter(ftype: str, p: dict, err) -> None:
    if ftype == "imm":
        M = len(p["sigmas"])
        if M < 2:
            raise err("imm needs at least two sigmas")
        trans = np.array(p.get("transition", ()), dtype=float)
        if "transition" in p and (trans.shape != (M, M) or np.any(np.abs(trans.sum(1) - 1) > 1e-12)):
            raise err(f"transition must be a row-stochastic {M}x{M} matrix")
        if "initial" in p and (len(p["initial"]) != M or abs(sum(p["initial"]) - 1) > 1e-12):
            raise err(f"initial must be {M} probabilities summing to 1")


def parse_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigIOError(f"cannot read config: {exc}", None, str(path)) from exc
    return parse_config_text(text, str(path))
