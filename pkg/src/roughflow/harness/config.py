"""Flat ``key = value`` experiment configuration."""
from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, fields
from pathlib import Path
from typing import get_type_hints

from ..fields import SUITE
from ..foliated import LEAF_FIELDS, TRANSVERSALS
from ..rough_lift import MAX_LEVEL

OUT_ENV = "ROUGHFLOW_OUT"


class ConfigError(ValueError):
    """Malformed, out-of-range or unknown configuration entry."""


@dataclass(frozen=True)
class ExperimentConfig:
    """Every experiment is a pure function of this record.

    Tuples are written comma-separated in the text form, booleans as
    ``true``/``false``.
    """

    seed: int = 42
    d: int = 1
    p: int = 1
    T: float = 1.0
    alpha: float = 0.4
    M: int = 14
    m: int = 8
    m_lo: int = 6
    m_hi: int = 11
    subdiv: int = 8
    epsilons: tuple = (0.4, 0.2, 0.1)
    delta: float = 0.5
    n_seeds: int = 400
    fields: str = "exponential"
    xi: tuple = (1.0,)
    leaf_field: str = "suspended"
    transversal: str = "circle"
    rotation: float = 0.6180339887498949
    depth: int = 24
    perm: tuple = (1, 2, 0)
    grid: int = 4
    y0: float = 0.25
    h_file: str = ""
    h_slope: tuple = (1.0,)
    jacobians: bool = False
    out: str = "roughflow_out"

    def __post_init__(self):
        problems = []

        def need(ok, msg):
            if not ok:
                problems.append(msg)

        need(self.seed >= 0, "seed must be >= 0")
        need(1 <= self.d <= 8, "d must lie in [1, 8]")
        need(1 <= self.p <= 8, "p must lie in [1, 8]")
        need(self.T > 0, "T must be positive")
        need(1 / 3 < self.alpha < 1 / 2, "alpha must lie in (1/3, 1/2)")
        need(0 <= self.M <= MAX_LEVEL, f"M must lie in [0, {MAX_LEVEL}]")
        need(0 <= self.m <= self.M, "m must lie in [0, M]")
        need(0 <= self.m_lo <= self.m_hi, "need 0 <= m_lo <= m_hi")
        need(self.m_hi + 1 <= self.M, "need m_hi + 1 <= M")
        need(1 <= self.subdiv <= 4096, "subdiv must lie in [1, 4096]")
        need(len(self.epsilons) >= 1 and all(e > 0 for e in self.epsilons), "epsilons must be positive")
        need(all(a > b for a, b in zip(self.epsilons, self.epsilons[1:])), "epsilons must be decreasing")
        need(self.delta > 0, "delta must be positive")
        need(1 <= self.n_seeds <= 100_000, "n_seeds must lie in [1, 100000]")
        need(self.fields in SUITE, f"fields must be one of {sorted(SUITE)}")
        need(self.leaf_field in LEAF_FIELDS, f"leaf_field must be one of {sorted(LEAF_FIELDS)}")
        need(self.transversal in TRANSVERSALS, f"transversal must be one of {sorted(TRANSVERSALS)}")
        need(0 <= self.rotation < 1, "rotation must lie in [0, 1)")
        need(1 <= self.depth <= 62, "depth must lie in [1, 62]")
        need(sorted(self.perm) == list(range(len(self.perm))), "perm must be a permutation of 0..n-1")
        need(1 <= self.grid <= 64, "grid must lie in [1, 64]")
        need(0 <= self.y0 < 1, "y0 must lie in [0, 1)")
        need(len(self.xi) >= 1, "xi needs at least one coordinate")
        if problems:
            raise ConfigError("; ".join(problems))

    def with_overrides(self, **kw) -> "ExperimentConfig":
        return dataclasses.replace(self, **{k: v for k, v in kw.items() if v is not None})

    def to_dict(self) -> dict:
        return {f.name: (list(v) if isinstance(v, tuple) else v)
                for f in fields(self) for v in [getattr(self, f.name)]}

    def output_dir(self, cli_out: str | None = None) -> Path:
        """``--out`` beats ``$ROUGHFLOW_OUT`` beats the ``out`` key."""
        if cli_out:
            return Path(cli_out)
        env = os.environ.get(OUT_ENV)
        return Path(env) if env else Path(self.out)


def _types() -> dict:
    return get_type_hints(ExperimentConfig)


def _tuple_kind(name: str):
    default = getattr(ExperimentConfig, name)
    return int if default and isinstance(default[0], int) else float


def coerce(name: str, raw: str):
    types = _types()
    if name not in types:
        raise ConfigError(f"unknown key {name!r}; known keys: {', '.join(sorted(types))}")
    kind = types[name]
    raw = raw.strip()
    try:
        if kind is bool:
            low = raw.lower()
            if low not in ("true", "false"):
                raise ValueError(raw)
            return low == "true"
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        if kind is tuple:
            conv = _tuple_kind(name)
            return tuple(conv(x) for x in raw.split(",") if x.strip())
        return raw
    except ValueError:
        raise ConfigError(f"cannot parse {name} = {raw!r} as {getattr(kind, '__name__', kind)}") from None


def parse_config(text: str) -> ExperimentConfig:
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        values[key] = coerce(key, raw)
    return ExperimentConfig(**values)


def load_config(path) -> ExperimentConfig:
    return parse_config(Path(path).read_text(encoding="utf-8"))


def schema_text() -> str:
    """Human-readable key listing printed on usage errors."""
    lines = ["config keys (key = value, '#' starts a comment):"]
    for f in fields(ExperimentConfig):
        default = f.default
        if isinstance(default, tuple):
            default = ",".join(str(x) for x in default)
        kind = _types()[f.name]
        lines.append(f"  {f.name:<12} {kind.__name__:<6} default {default}")
    return "\n".join(lines)
