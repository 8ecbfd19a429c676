"""Truncated level-2 tensor algebra over R^d.

A rough path is stored on a finite time grid as one :class:`Increment` per
cell.  Increments between arbitrary times are rebuilt with Chen's identity,
using the closed-form straight-segment rule inside ``linear`` cells and
refusing interior queries inside ``atomic`` cells.

Hölder norms and distances are maxima over pairs of grid points, so they are
lower bounds of the continuum suprema.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

CHEN_TOL = 1e-10
SHUFFLE_TOL = 1e-10
DEFAULT_ALPHA = 0.4

LINEAR = "linear"
ATOMIC = "atomic"


class RoughPathError(ValueError):
    """Invalid rough-path construction or query."""


def validate_alpha(alpha: float) -> float:
    alpha = float(alpha)
    if not 1.0 / 3.0 < alpha < 0.5:
        raise RoughPathError(f"alpha must lie in (1/3, 1/2), got {alpha}")
    return alpha


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Increment:
    """Level-1 and level-2 increment of a rough path over an interval of length ``dt``."""

    level1: np.ndarray
    level2: np.ndarray
    dt: float = 0.0

    def __post_init__(self):
        l1 = np.atleast_1d(np.asarray(self.level1, dtype=float))
        l2 = np.asarray(self.level2, dtype=float)
        d = l1.shape[0]
        if l1.ndim != 1:
            raise RoughPathError("level1 must be a vector")
        if l2.shape != (d, d):
            l2 = l2.reshape(d, d) if l2.size == d * d else None
            if l2 is None:
                raise RoughPathError(f"level2 must be {d}x{d}")
        if self.dt < 0:
            raise RoughPathError(f"dt must be nonnegative, got {self.dt}")
        object.__setattr__(self, "level1", _frozen(l1))
        object.__setattr__(self, "level2", _frozen(l2))
        object.__setattr__(self, "dt", float(self.dt))

    @property
    def dim(self) -> int:
        return self.level1.shape[0]

    @classmethod
    def zero(cls, d: int) -> "Increment":
        return cls(np.zeros(d), np.zeros((d, d)), 0.0)

    @classmethod
    def segment(cls, delta, dt: float) -> "Increment":
        """Increment of a straight segment with displacement ``delta``."""
        delta = np.atleast_1d(np.asarray(delta, dtype=float))
        return cls(delta, 0.5 * np.outer(delta, delta), dt)

    def allclose(self, other: "Increment", tol: float = CHEN_TOL) -> bool:
        return (
            self.dim == other.dim
            and np.allclose(self.level1, other.level1, rtol=tol, atol=tol)
            and np.allclose(self.level2, other.level2, rtol=tol, atol=tol)
            and abs(self.dt - other.dt) <= tol * (1 + abs(self.dt))
        )

    def __repr__(self):
        return f"Increment(level1={self.level1.tolist()}, level2={self.level2.tolist()}, dt={self.dt!r})"


def chen_combine(a: Increment, b: Increment) -> Increment:
    """Concatenate the increment over ``[s, u]`` with the one over ``[u, t]``."""
    if a.dim != b.dim:
        raise RoughPathError(f"dimension mismatch: {a.dim} vs {b.dim}")
    return Increment(
        a.level1 + b.level1,
        a.level2 + b.level2 + np.outer(a.level1, b.level1),
        a.dt + b.dt,
    )


def check_shuffle(inc: Increment, tol: float = SHUFFLE_TOL) -> float:
    """Return the largest shuffle residual ``|x_j x_k - X_jk - X_kj|``.

    ``tol`` is accepted for interface symmetry with :func:`is_geometric`; the
    residual itself is returned unthresholded.
    """
    l1, l2 = inc.level1, inc.level2
    res = np.outer(l1, l1) - l2 - l2.T
    return float(np.max(np.abs(res))) if res.size else 0.0


def is_geometric(inc: Increment, tol: float = SHUFFLE_TOL) -> bool:
    scale = 1.0 + float(np.max(np.abs(np.outer(inc.level1, inc.level1)), initial=0.0))
    return check_shuffle(inc) <= tol * scale


def chen_residual(a: Increment, b: Increment, c: Increment) -> float:
    """Relative Chen defect of ``c`` against ``chen_combine(a, b)``."""
    ab = chen_combine(a, b)
    r1 = np.max(np.abs(ab.level1 - c.level1))
    r2 = np.max(np.abs(ab.level2 - c.level2))
    s1 = max(np.max(np.abs(a.level1)) + np.max(np.abs(b.level1)), np.max(np.abs(c.level1)))
    s2 = max(
        np.max(np.abs(a.level2)) + np.max(np.abs(b.level2))
        + np.max(np.abs(a.level1)) * np.max(np.abs(b.level1)),
        np.max(np.abs(c.level2)),
    )
    rel1 = r1 / s1 if s1 > 0 else r1
    rel2 = r2 / s2 if s2 > 0 else r2
    return float(max(rel1, rel2))


@dataclass(frozen=True)
class HolderReport:
    norm1: float
    norm2: float
    alpha: float


@dataclass(frozen=True, eq=False)
class GridRoughPath:
    """A rough path given by its cell increments on ``times[0] < ... < times[N]``.

    ``level1`` has shape ``(N, d)`` and ``level2`` shape ``(N, d, d)``.
    ``cell_kind`` holds ``"linear"`` or ``"atomic"`` per cell; linear cells must
    carry the straight-segment level-2 value ``level1 (x) level1 / 2``.
    """

    times: np.ndarray
    level1: np.ndarray
    level2: np.ndarray
    cell_kind: tuple = ()
    alpha: float = DEFAULT_ALPHA
    geometric: bool = True

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float)
        l1 = np.asarray(self.level1, dtype=float)
        if times.ndim != 1 or times.size < 1:
            raise RoughPathError("times must be a non-empty vector")
        n = times.size - 1
        if l1.ndim == 1:
            l1 = l1.reshape(n, -1)
        if l1.shape[0] != n:
            raise RoughPathError(f"expected {n} cells, got {l1.shape[0]}")
        d = l1.shape[1]
        l2 = np.asarray(self.level2, dtype=float).reshape(n, d, d)
        if n and np.any(np.diff(times) <= 0):
            raise RoughPathError("times must be strictly increasing")
        kinds = tuple(self.cell_kind) if len(self.cell_kind) else (LINEAR,) * n
        if len(kinds) != n or any(k not in (LINEAR, ATOMIC) for k in kinds):
            raise RoughPathError("cell_kind must hold one of 'linear'/'atomic' per cell")
        lin = np.array([k == LINEAR for k in kinds], dtype=bool)
        if lin.any():
            expect = 0.5 * np.einsum("ni,nj->nij", l1[lin], l1[lin])
            scale = 1.0 + np.abs(expect).max()
            if np.abs(expect - l2[lin]).max() > CHEN_TOL * scale:
                raise RoughPathError("linear cells must carry level2 = level1 (x) level1 / 2")
        object.__setattr__(self, "times", _frozen(times))
        object.__setattr__(self, "level1", _frozen(l1))
        object.__setattr__(self, "level2", _frozen(l2))
        object.__setattr__(self, "cell_kind", kinds)
        object.__setattr__(self, "alpha", validate_alpha(self.alpha))
        object.__setattr__(self, "geometric", bool(self.geometric))

    @property
    def dim(self) -> int:
        return self.level1.shape[1]

    @property
    def n_cells(self) -> int:
        return self.times.size - 1

    @property
    def t0(self) -> float:
        return float(self.times[0])

    @property
    def t1(self) -> float:
        return float(self.times[-1])

    def cell(self, i: int) -> Increment:
        return Increment(self.level1[i], self.level2[i], self.times[i + 1] - self.times[i])

    def cells(self) -> Iterator[Increment]:
        for i in range(self.n_cells):
            yield self.cell(i)

    def replace(self, **kw) -> "GridRoughPath":
        args = dict(
            times=self.times, level1=self.level1, level2=self.level2,
            cell_kind=self.cell_kind, alpha=self.alpha, geometric=self.geometric,
        )
        args.update(kw)
        return GridRoughPath(**args)

    def position(self, t: float) -> tuple[int, bool]:
        """Return ``(cell index, is_knot)`` locating time ``t``."""
        if t < self.times[0] or t > self.times[-1]:
            raise RoughPathError(f"time {t} outside [{self.t0}, {self.t1}]")
        j = int(np.searchsorted(self.times, t, side="left"))
        if j < self.times.size and self.times[j] == t:
            return j, True
        return j - 1, False

    def queryable(self, t: float) -> bool:
        try:
            i, knot = self.position(t)
        except RoughPathError:
            return False
        return knot or self.cell_kind[i] == LINEAR

    def level1_path(self) -> np.ndarray:
        """Values ``x_{t_0, t_k}`` of the level-1 path at every knot."""
        out = np.zeros((self.times.size, self.dim))
        np.cumsum(self.level1, axis=0, out=out[1:])
        return out


def _segment_arrays(delta: np.ndarray, frac: float) -> tuple[np.ndarray, np.ndarray]:
    l1 = frac * delta
    return l1, 0.5 * np.outer(l1, l1)


def _accumulate(l1: np.ndarray, l2: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Chen-combine a run of cells in order, vectorised."""
    if l1.shape[0] == 0:
        d = l1.shape[1]
        return np.zeros(d), np.zeros((d, d))
    before = np.cumsum(l1, axis=0) - l1
    total2 = l2.sum(axis=0) + np.einsum("ni,nj->ij", before, l1)
    return l1.sum(axis=0), total2


def query_increment(path: GridRoughPath, s: float, t: float) -> Increment:
    """Increment of ``path`` over ``[s, t]`` reconstructed through Chen's identity."""
    if s > t:
        raise RoughPathError(f"need s <= t, got s={s}, t={t}")
    d = path.dim
    if s == t:
        path.position(s)
        return Increment.zero(d)
    i, s_knot = path.position(s)
    j, t_knot = path.position(t)
    for k, knot, when in ((i, s_knot, s), (j, t_knot, t)):
        if not knot and path.cell_kind[k] == ATOMIC:
            raise RoughPathError(f"time {when} is interior to atomic cell {k}")
    times = path.times
    if not s_knot and not t_knot and i == j:
        frac = (t - s) / (times[i + 1] - times[i])
        l1, l2 = _segment_arrays(path.level1[i], frac)
        return Increment(l1, l2, t - s)
    parts1, parts2 = [], []
    first_full = i
    if not s_knot:
        frac = (times[i + 1] - s) / (times[i + 1] - times[i])
        a1, a2 = _segment_arrays(path.level1[i], frac)
        parts1.append(a1[None])
        parts2.append(a2[None])
        first_full = i + 1
    last_full = j  # exclusive
    parts1.append(path.level1[first_full:last_full])
    parts2.append(path.level2[first_full:last_full])
    if not t_knot:
        frac = (t - times[j]) / (times[j + 1] - times[j])
        b1, b2 = _segment_arrays(path.level1[j], frac)
        parts1.append(b1[None])
        parts2.append(b2[None])
    l1, l2 = _accumulate(np.concatenate(parts1), np.concatenate(parts2))
    return Increment(l1, l2, t - s)


def refine(path: GridRoughPath, times: Sequence[float]) -> GridRoughPath:
    """Insert extra knots into ``path``; only linear cells may be split."""
    extra = np.asarray(times, dtype=float)
    grid = np.union1d(path.times, extra[(extra >= path.t0) & (extra <= path.t1)])
    if grid.size == path.times.size:
        return path
    l1 = np.empty((grid.size - 1, path.dim))
    l2 = np.empty((grid.size - 1, path.dim, path.dim))
    kinds = []
    for k in range(grid.size - 1):
        inc = query_increment(path, grid[k], grid[k + 1])
        l1[k], l2[k] = inc.level1, inc.level2
        i, _ = path.position(grid[k])
        kinds.append(path.cell_kind[i])
    return path.replace(times=grid, level1=l1, level2=l2, cell_kind=tuple(kinds))


def restrict(path: GridRoughPath, a: float, b: float) -> GridRoughPath:
    """The rough path on the subinterval ``[a, b]``; endpoints become knots."""
    if not path.t0 <= a < b <= path.t1:
        raise RoughPathError(f"[{a}, {b}] not a proper subinterval of [{path.t0}, {path.t1}]")
    p = refine(path, [a, b])
    lo = int(np.searchsorted(p.times, a))
    hi = int(np.searchsorted(p.times, b))
    return p.replace(
        times=p.times[lo:hi + 1], level1=p.level1[lo:hi], level2=p.level2[lo:hi],
        cell_kind=p.cell_kind[lo:hi],
    )


def pair_rows(path: GridRoughPath) -> Iterator[tuple[int, np.ndarray, np.ndarray]]:
    """Yield ``(i, X1[i, i+1:], X2[i, i+1:])`` for every grid row ``i``.

    Each row is built by accumulating cells left to right from ``t_i``, so
    rounding is relative to the local increments rather than to a global prefix.
    """
    for i in range(path.n_cells):
        c1 = path.level1[i:]
        c2 = path.level2[i:]
        x1 = np.cumsum(c1, axis=0)
        before = x1 - c1
        x2 = np.cumsum(c2 + np.einsum("ni,nj->nij", before, c1), axis=0)
        yield i, x1, x2


def pair_increments(path: GridRoughPath) -> tuple[np.ndarray, np.ndarray]:
    """Dense ``(N+1, N+1, d)`` and ``(N+1, N+1, d, d)`` tables of grid-pair increments.

    Only the upper triangle ``i <= j`` is filled.  Intended for small grids.
    """
    n, d = path.times.size, path.dim
    x1 = np.zeros((n, n, d))
    x2 = np.zeros((n, n, d, d))
    for i, r1, r2 in pair_rows(path):
        x1[i, i + 1:] = r1
        x2[i, i + 1:] = r2
    return x1, x2


def _holder_of_rows(times, rows, alpha) -> tuple[float, float]:
    n1 = n2 = 0.0
    for i, r1, r2 in rows:
        span = times[i + 1:] - times[i]
        a1 = np.sqrt(np.einsum("ni,ni->n", r1, r1))
        a2 = np.sqrt(np.einsum("nij,nij->n", r2, r2))
        n1 = max(n1, float(np.max(a1 / span ** alpha)))
        n2 = max(n2, float(np.max(a2 / span ** (2 * alpha))))
    return n1, n2


def holder_norms(path: GridRoughPath, alpha: float | None = None) -> HolderReport:
    """Grid-pair Hölder norms ``(|w1|_alpha, |w2|_{2 alpha})``; Euclidean/Frobenius norms."""
    alpha = path.alpha if alpha is None else validate_alpha(alpha)
    if path.n_cells < 1:
        raise RoughPathError("need at least one cell")
    n1, n2 = _holder_of_rows(path.times, pair_rows(path), alpha)
    return HolderReport(n1, n2, alpha)


def common_grid(a: GridRoughPath, b: GridRoughPath) -> np.ndarray:
    """Union of both grids, restricted to times that both paths can be queried at."""
    grid = np.union1d(a.times, b.times)
    keep = [t for t in grid if a.queryable(t) and b.queryable(t)]
    return np.asarray(keep)


def rp_distance(a: GridRoughPath, b: GridRoughPath) -> float:
    """Inhomogeneous rough-path distance ``max_i |a^i - b^i|_{i alpha}`` over common grid pairs.

    The grids are merged where both paths allow it (linear cells can be split);
    otherwise the comparison runs on the common knots only.
    """
    if a.dim != b.dim:
        raise RoughPathError(f"dimension mismatch: {a.dim} vs {b.dim}")
    if a.alpha != b.alpha:
        raise RoughPathError(f"alpha mismatch: {a.alpha} vs {b.alpha}")
    grid = common_grid(a, b)
    if grid.size < 2:
        raise RoughPathError("paths share fewer than two grid points")

    def _on(p):
        lo, hi = grid[0], grid[-1]
        q = p if (p.t0 == lo and p.t1 == hi) else restrict(p, lo, hi)
        q = refine(q, grid)
        keep = np.isin(q.times, grid)
        if keep.all():
            return q
        # collapse cells down to the common knots
        idx = np.flatnonzero(keep)
        l1 = np.empty((idx.size - 1, q.dim))
        l2 = np.empty((idx.size - 1, q.dim, q.dim))
        for k in range(idx.size - 1):
            l1[k], l2[k] = _accumulate(q.level1[idx[k]:idx[k + 1]], q.level2[idx[k]:idx[k + 1]])
        return GridRoughPath(grid, l1, l2, (ATOMIC,) * (idx.size - 1), q.alpha, q.geometric)

    pa, pb = _on(a), _on(b)

    def rows():
        for (i, a1, a2), (_, b1, b2) in zip(pair_rows(pa), pair_rows(pb)):
            yield i, a1 - b1, a2 - b2

    n1, n2 = _holder_of_rows(grid, rows(), a.alpha)
    return max(n1, n2)


def time_reverse(path: GridRoughPath, T: float | None = None) -> GridRoughPath:
    """Time reversal about ``T``: level 1 negated, level 2 transposed, cells in reverse order.

    The path must live on ``[0, T]`` for the reflection to map the domain onto
    itself; other domains are reflected to ``[T - t_N, T - t_0]``.
    """
    T = path.t1 if T is None else float(T)
    return path.replace(
        times=(T - path.times)[::-1],
        level1=-path.level1[::-1],
        level2=np.swapaxes(path.level2[::-1], 1, 2),
        cell_kind=path.cell_kind[::-1],
    )


def dilate(path: GridRoughPath, eps: float) -> GridRoughPath:
    return path.replace(level1=eps * path.level1, level2=eps * eps * path.level2)


def time_shift(path: GridRoughPath, t0: float) -> GridRoughPath:
    return path.replace(times=path.times + t0)


def max_chen_residual(path: GridRoughPath) -> float:
    """Worst relative Chen defect over all grid triples ``i <= j <= k``.

    Scales include the variation of the cells between ``i`` and ``k``, for the
    same reason as in ``max_shuffle_residual``.
    """
    x1, x2 = pair_increments(path)
    n = path.times.size
    var = np.concatenate([[0.0], np.cumsum(np.abs(path.level1).max(axis=1))]) if path.n_cells else np.zeros(1)
    worst = 0.0
    for j in range(n):
        span = var[j:][None] - var[:j + 1][:, None]
        a1, a2 = x1[:j + 1, j], x2[:j + 1, j]  # (i, j) for i <= j
        b1, b2 = x1[j, j:], x2[j, j:]  # (j, k) for k >= j
        c1, c2 = x1[:j + 1, j:], x2[:j + 1, j:]
        comb1 = a1[:, None] + b1[None]
        comb2 = a2[:, None] + b2[None] + np.einsum("ai,bj->abij", a1, b1)
        r1 = np.abs(comb1 - c1).max(axis=-1)
        r2 = np.abs(comb2 - c2).max(axis=(-2, -1))
        m1 = np.abs(a1).max(-1)[:, None] + np.abs(b1).max(-1)[None]
        s1 = np.maximum(np.maximum(m1, np.abs(c1).max(-1)), span)
        s2 = np.maximum(
            np.abs(a2).max((-2, -1))[:, None] + np.abs(b2).max((-2, -1))[None]
            + np.abs(a1).max(-1)[:, None] * np.abs(b1).max(-1)[None],
            np.maximum(np.abs(c2).max((-2, -1)), span ** 2),
        )
        with np.errstate(invalid="ignore", divide="ignore"):
            rel = np.maximum(
                np.where(s1 > 0, r1 / s1, r1), np.where(s2 > 0, r2 / s2, r2)
            )
        worst = max(worst, float(rel.max()))
    return worst


def max_shuffle_residual(path: GridRoughPath) -> float:
    """Worst shuffle defect over grid pairs.

    The defect is relative to the squared variation ``(sum |cell level1|)^2`` of
    the cells combined into the pair, which bounds every term of the sum (absolute
    where that vanishes).  A pair whose increment cancels out keeps the rounding
    of its larger intermediate terms, so ``|x (x) x|`` alone is too small a scale.
    """
    worst = 0.0
    cell = np.abs(path.level1).max(axis=1) if path.n_cells else np.zeros(0)
    for i, r1, r2 in pair_rows(path):
        sym = np.einsum("ni,nj->nij", r1, r1)
        res = np.abs(sym - r2 - np.swapaxes(r2, 1, 2)).max(axis=(1, 2))
        scale = np.maximum(np.abs(sym).max(axis=(1, 2)), np.cumsum(cell[i:]) ** 2)
        rel = np.where(scale > 0, res / np.where(scale > 0, scale, 1.0), res)
        worst = max(worst, float(rel.max()))
    return worst
