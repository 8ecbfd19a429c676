"""Construction of geometric rough paths from piecewise-linear data.

Brownian drivers are sampled once at the finest dyadic level ``M`` with a
Philox counter-based generator (``numpy.random.Philox(key=seed)``); coarser
levels are dyadic interpolations of that same sample, so ``W(m)`` for
different ``m`` always approximate one fixed path.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .tensor_algebra import (
    ATOMIC,
    DEFAULT_ALPHA,
    LINEAR,
    GridRoughPath,
    RoughPathError,
    validate_alpha,
)

MAX_LEVEL = 24


@dataclass(frozen=True, eq=False)
class PiecewisePath:
    """Knots ``(times[k], values[k])`` of a piecewise-linear path started at 0."""

    times: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float)
        values = np.asarray(self.values, dtype=float)
        if values.ndim == 1:
            values = values[:, None]
        if times.ndim != 1 or times.size < 2 or values.shape[0] != times.size:
            raise RoughPathError("need at least two knots with one value row per time")
        if np.any(np.diff(times) <= 0):
            raise RoughPathError("times must be strictly increasing")
        if np.any(values[0] != 0):
            raise RoughPathError("a piecewise path must start at 0")
        times.setflags(write=False)
        values.setflags(write=False)
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "values", values)

    @classmethod
    def from_samples(cls, times, values) -> "PiecewisePath":
        """Build a path from arbitrary samples, re-anchoring the first value to 0."""
        values = np.asarray(values, dtype=float)
        if values.ndim == 1:
            values = values[:, None]
        return cls(times, values - values[0])

    @property
    def dim(self) -> int:
        return self.values.shape[1]

    @property
    def T(self) -> float:
        return float(self.times[-1] - self.times[0])

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        return np.stack([np.interp(t, self.times, self.values[:, k]) for k in range(self.dim)], axis=-1)

    def reversed(self) -> "PiecewisePath":
        """Time reversal ``t -> w_{T-t} - w_T`` on ``[t_0, t_N]``."""
        t0, t1 = self.times[0], self.times[-1]
        return PiecewisePath((t0 + t1 - self.times)[::-1], (self.values - self.values[-1])[::-1])


@dataclass(frozen=True, eq=False)
class CameronMartinPath:
    """A piecewise-linear Cameron-Martin path with its exact squared norm."""

    path: PiecewisePath
    hnorm_sq: float = float("nan")

    def __post_init__(self):
        dv = np.diff(self.path.values, axis=0)
        dt = np.diff(self.path.times)
        object.__setattr__(self, "hnorm_sq", float(np.sum(np.sum(dv * dv, axis=1) / dt)))

    @classmethod
    def from_knots(cls, times, values) -> "CameronMartinPath":
        return cls(PiecewisePath(times, values))

    @property
    def rate(self) -> float:
        """Freidlin-Wentzell action ``|h|^2 / 2``."""
        return 0.5 * self.hnorm_sq

    def derivative(self) -> np.ndarray:
        """Slopes per segment, shape ``(N, d)``."""
        return np.diff(self.path.values, axis=0) / np.diff(self.path.times)[:, None]


def lift_piecewise_linear(w: PiecewisePath, alpha: float = DEFAULT_ALPHA) -> GridRoughPath:
    """Exact level-2 lift of a piecewise-linear path (one linear cell per segment)."""
    alpha = validate_alpha(alpha)
    dv = np.diff(w.values, axis=0)
    return GridRoughPath(
        times=w.times,
        level1=dv,
        level2=0.5 * np.einsum("ni,nj->nij", dv, dv),
        cell_kind=(LINEAR,) * dv.shape[0],
        alpha=alpha,
        geometric=True,
    )


def dyadic_times(t0: float, T: float, m: int) -> np.ndarray:
    n = 2 ** m
    return t0 + T * (np.arange(n + 1) / n)


def _dyadic_index(samples: PiecewisePath, m: int) -> np.ndarray:
    knots = dyadic_times(samples.times[0], samples.T, m)
    idx = np.searchsorted(samples.times, knots)
    idx = np.clip(idx, 0, samples.times.size - 1)
    lo = np.clip(idx - 1, 0, None)
    pick = np.where(
        np.abs(samples.times[idx] - knots) <= np.abs(samples.times[lo] - knots), idx, lo
    )
    tol = 1e-12 * max(samples.T, 1.0)
    if np.any(np.abs(samples.times[pick] - knots) > tol):
        raise RoughPathError(f"sample grid does not contain the level-{m} dyadic points")
    return pick


def dyadic_approx(samples: PiecewisePath, m: int) -> PiecewisePath:
    """Piecewise-linear interpolation of ``samples`` at the level-``m`` dyadic knots."""
    if m < 0:
        raise RoughPathError(f"dyadic level must be nonnegative, got {m}")
    pick = _dyadic_index(samples, m)
    return PiecewisePath(samples.times[pick], samples.values[pick])


def sample_brownian(d: int, T: float, M: int, seed: int) -> PiecewisePath:
    """Brownian motion in R^d sampled at ``j T / 2^M``, deterministic in ``seed``."""
    if d < 1:
        raise RoughPathError(f"d must be >= 1, got {d}")
    if not 0 <= M <= MAX_LEVEL:
        raise RoughPathError(f"M must lie in [0, {MAX_LEVEL}], got {M}")
    if T <= 0:
        raise RoughPathError(f"T must be positive, got {T}")
    n = 2 ** M
    rng = np.random.Generator(np.random.Philox(key=int(seed)))
    steps = rng.standard_normal((n, d)) * np.sqrt(T / n)
    values = np.zeros((n + 1, d))
    np.cumsum(steps, axis=0, out=values[1:])
    return PiecewisePath(dyadic_times(0.0, T, M), values)


def brownian_rough_path(
    w: PiecewisePath, m: int, alpha: float = DEFAULT_ALPHA, atomic: bool = False
) -> GridRoughPath:
    """Level-``m`` dyadic Wong-Zakai lift ``W(m) = L(w(m))``.

    With ``atomic=True`` the cells refuse interior queries, so the path is only
    seen at its own resolution.
    """
    path = lift_piecewise_linear(dyadic_approx(w, m), alpha)
    if atomic:
        path = path.replace(cell_kind=(ATOMIC,) * path.n_cells)
    return path


def cameron_martin_lift(h: CameronMartinPath, alpha: float = DEFAULT_ALPHA) -> GridRoughPath:
    return lift_piecewise_linear(h.path, alpha)


def straight_path(delta, T: float = 1.0) -> PiecewisePath:
    delta = np.atleast_1d(np.asarray(delta, dtype=float))
    return PiecewisePath([0.0, T], np.stack([np.zeros_like(delta), delta]))


def sample_function(fn, T: float, n: int, t0: float = 0.0) -> PiecewisePath:
    """Sample ``fn`` on ``n`` equal cells and anchor at 0."""
    times = t0 + T * np.arange(n + 1) / n
    values = np.array([np.atleast_1d(fn(t)) for t in times], dtype=float)
    return PiecewisePath.from_samples(times, values)


def write_path_csv(path: PiecewisePath, dest) -> None:
    dest = Path(dest)
    with dest.open("w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["t"] + [f"w{k + 1}" for k in range(path.dim)])
        for t, row in zip(path.times, path.values):
            wr.writerow([f"{t:.17g}"] + [f"{v:.17g}" for v in row])


def read_path_csv(src, anchor: bool = False) -> PiecewisePath:
    with Path(src).open(newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][0].strip() != "t":
        raise RoughPathError("path CSV must start with a header 't,w1,...,wd'")
    header = [h.strip() for h in rows[0]]
    expected = ["t"] + [f"w{k + 1}" for k in range(len(header) - 1)]
    if header != expected or len(header) < 2:
        raise RoughPathError(f"bad path CSV header {header}")
    data = np.array([[float(x) for x in r] for r in rows[1:] if r], dtype=float)
    if anchor:
        return PiecewisePath.from_samples(data[:, 0], data[:, 1:])
    return PiecewisePath(data[:, 0], data[:, 1:])
