"""Leafwise RDEs on suspension (mapping-torus) foliated spaces.

The space is ``(R^p x Z) / Z`` where ``n`` acts by ``(y, z) -> (y - n e_1, F^n(z))``.
A point is stored in the fundamental domain ``0 <= y_1 < 1`` together with its
transversal coordinate and a winding counter that records how many deck
transformations the trajectory has applied.

Solving uses two overlapping charts of the fibre, ``(-1/4, 3/4)`` and
``(1/4, 5/4)``.  Inside a chart the transversal coordinate is frozen and the
fibre coordinate follows an ordinary RDE on R^p.  Chart exits and integer
crossings are located by root-finding inside linear steps; leaving the upper
chart through ``5/4`` (or the lower one through ``-1/4``) applies the deck
transformation ``y -> y -/+ e_1``, ``z -> F^{+/-1}(z)``.
"""
from __future__ import annotations

import math
from abc import ABC, abstractmethod
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np
import sympy as sp
from scipy.optimize import brentq

from .rde_solver import (
    ExplosionError,
    SingularJacobianError,
    SolveConfig,
    SolverError,
    VectorFieldFamily,
    _pack,
    _unpack,
    augmented_increment,
    compile_tensors,
    davie_increment,
    reversed_driver,
    step_schedule,
)
from .tensor_algebra import GridRoughPath

CHARTS = ((-0.25, 0.75), (0.25, 1.25))
EVENT_TOL = 1e-12


class LeafViolation(SolverError):
    """A trajectory left its leaf or applied an invalid transition."""


# --------------------------------------------------------------------- transversals


class Transversal(ABC):
    """Compact metric space with a homeomorphism ``F``; points are hashable and exact."""

    kind: str = ""

    @abstractmethod
    def distance(self, a, b) -> float: ...

    @abstractmethod
    def F(self, z): ...

    @abstractmethod
    def F_inv(self, z): ...

    @abstractmethod
    def coord(self, z) -> float:
        """A continuous real-valued embedding used by vector fields."""

    @abstractmethod
    def label(self, z) -> str: ...

    @abstractmethod
    def sample(self, rng: np.random.Generator): ...

    @abstractmethod
    def describe(self) -> dict: ...

    def orbit(self, z, n: int):
        step = self.F if n >= 0 else self.F_inv
        for _ in range(abs(n)):
            z = step(z)
        return z


@dataclass(frozen=True)
class Circle(Transversal):
    """Unit-circumference circle with rotation by ``rotation``.

    Points are integers ``k`` standing for the angle ``k / 2^bits``; the rotation
    is rounded to that lattice so ``F`` and ``F_inv`` are exact inverses.
    """

    rotation: float = (math.sqrt(5.0) - 1.0) / 2.0
    bits: int = 48
    kind = "circle"

    @property
    def modulus(self) -> int:
        return 1 << self.bits

    @property
    def shift(self) -> int:
        return round(self.rotation * self.modulus) % self.modulus

    @property
    def exact_rotation(self) -> float:
        return self.shift / self.modulus

    def point(self, angle: float) -> int:
        return round(angle * self.modulus) % self.modulus

    def distance(self, a, b) -> float:
        k = abs(a - b) % self.modulus
        return min(k, self.modulus - k) / self.modulus

    def F(self, z):
        return (z + self.shift) % self.modulus

    def F_inv(self, z):
        return (z - self.shift) % self.modulus

    def coord(self, z) -> float:
        return z / self.modulus

    def label(self, z) -> str:
        return f"{z / self.modulus:.17g}"

    def sample(self, rng):
        return int(rng.integers(0, self.modulus))

    def describe(self) -> dict:
        return {"kind": self.kind, "rotation": self.exact_rotation, "bits": self.bits}


@dataclass(frozen=True)
class CantorSet(Transversal):
    """Binary sequences of length ``depth`` under the odometer (add one with carry).

    Bit ``k`` of the integer is the ``k``-th symbol; the metric is
    ``2^-(length of the common prefix)``.
    """

    depth: int = 24
    kind = "cantor"

    @property
    def size(self) -> int:
        return 1 << self.depth

    def distance(self, a, b) -> float:
        x = a ^ b
        if x == 0:
            return 0.0
        prefix = (x & -x).bit_length() - 1
        return 2.0 ** -prefix

    def F(self, z):
        return (z + 1) % self.size

    def F_inv(self, z):
        return (z - 1) % self.size

    def coord(self, z) -> float:
        # middle-thirds embedding, continuous for the prefix metric
        return sum(2.0 * ((z >> k) & 1) * 3.0 ** -(k + 1) for k in range(self.depth))

    def label(self, z) -> str:
        return "".join(str((z >> k) & 1) for k in range(self.depth))

    def sample(self, rng):
        return int(rng.integers(0, self.size))

    def describe(self) -> dict:
        return {"kind": self.kind, "depth": self.depth}


@dataclass(frozen=True)
class FiniteSet(Transversal):
    """Labels ``0..n-1`` with the discrete metric and ``F`` a permutation."""

    perm: tuple = (1, 2, 0)
    kind = "finite"

    def __post_init__(self):
        if sorted(self.perm) != list(range(len(self.perm))):
            raise ValueError(f"{self.perm} is not a permutation")

    def distance(self, a, b) -> float:
        return 0.0 if a == b else 1.0

    def F(self, z):
        return self.perm[z]

    def F_inv(self, z):
        return self.perm.index(z)

    def coord(self, z) -> float:
        return float(z)

    def label(self, z) -> str:
        return str(z)

    def sample(self, rng):
        return int(rng.integers(0, len(self.perm)))

    def describe(self) -> dict:
        return {"kind": self.kind, "perm": list(self.perm)}


TRANSVERSALS = {"circle": Circle, "cantor": CantorSet, "finite": FiniteSet}


# --------------------------------------------------------------------- space and points


@dataclass(frozen=True, eq=False)
class LeafPoint:
    y: np.ndarray
    z: object
    winding: int = 0

    def __post_init__(self):
        y = np.atleast_1d(np.asarray(self.y, dtype=float)).copy()
        y.setflags(write=False)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "winding", int(self.winding))

    def __repr__(self):
        return f"LeafPoint(y={self.y.tolist()}, z={self.z!r}, winding={self.winding})"


@dataclass(frozen=True, eq=False)
class ChartState:
    """Solver-internal position: chart coordinate, frozen transversal, chart index."""

    ytil: np.ndarray
    zc: object
    wind: int
    chart: int


@dataclass(frozen=True)
class SuspensionSpace:
    transversal: Transversal
    p: int = 1

    def normalize(self, ytil, zc, wind: int) -> LeafPoint:
        ytil = np.asarray(ytil, dtype=float)
        k = math.floor(ytil[0])
        y = ytil.copy()
        y[0] -= k
        if y[0] >= 1.0:  # ytil[0] - k can round up to 1
            y[0] -= 1.0
            k += 1
        return LeafPoint(y, self.transversal.orbit(zc, k), wind + k)

    def normalize_many(self, ytil: np.ndarray, zc: list, wind: np.ndarray):
        """Vectorised :meth:`normalize`; returns ``(y, z, winding)``."""
        y = np.array(ytil, dtype=float)
        k = np.floor(y[:, 0])
        y[:, 0] -= k
        wrap = y[:, 0] >= 1.0
        y[wrap, 0] -= 1.0
        k = k.astype(np.int64) + wrap
        cache = {}
        z = []
        for zi, ki in zip(zc, k.tolist()):
            key = (zi, ki)
            if key not in cache:
                cache[key] = self.transversal.orbit(zi, ki)
            z.append(cache[key])
        return y, z, np.asarray(wind, dtype=np.int64) + k

    def chart_state(self, m: LeafPoint) -> ChartState:
        """Open a chart at ``m``; coordinates outside both charts are deck-shifted first."""
        y = np.array(m.y, dtype=float)
        if y.shape != (self.p,):
            raise ValueError(f"leaf point has fibre dimension {y.size}, expected {self.p}")
        z, w = m.z, m.winding
        while y[0] >= CHARTS[1][1]:
            y[0] -= 1.0
            z, w = self.transversal.F(z), w + 1
        while y[0] <= CHARTS[0][0]:
            y[0] += 1.0
            z, w = self.transversal.F_inv(z), w - 1
        chart = 0 if y[0] < 0.5 else 1
        return ChartState(y, z, w, chart)

    def distance(self, a: LeafPoint, b: LeafPoint) -> float:
        """Quotient distance over the representatives ``(y_b - n e_1, F^n z_b)``, ``|n| <= 1``."""
        best = math.inf
        for n in (-1, 0, 1):
            shift = np.zeros(self.p)
            shift[0] = n
            dy = float(np.max(np.abs(a.y - (b.y - shift))))
            dz = self.transversal.distance(a.z, self.transversal.orbit(b.z, n))
            best = min(best, max(dy, dz))
        return best

    def match(self, a: LeafPoint, b: LeafPoint) -> tuple[float, bool]:
        """Fibre distance to the closest representative of ``b`` and whether its transversal equals ``a.z`` exactly."""
        best = (math.inf, False)
        for n in (-1, 0, 1):
            shift = np.zeros(self.p)
            shift[0] = n
            dy = float(np.max(np.abs(a.y - (b.y - shift))))
            if dy < best[0]:
                best = (dy, self.transversal.orbit(b.z, n) == a.z)
        return best

    def describe(self) -> dict:
        return {"kind": "suspension", "p": self.p, "transversal": self.transversal.describe()}


# --------------------------------------------------------------------- leafwise fields


class _Bound:
    """Field family with the transversal parameters bound; quacks like VectorFieldFamily."""

    __slots__ = ("p", "d", "values", "grads", "hessians", "thirds", "k_max")

    def __init__(self, fam: "LeafwiseVectorFieldFamily", params, sign):
        self.p, self.d, self.k_max = fam.p, fam.d, fam.k_max

        def bind(fn):
            if fn is None:
                return None
            if sign is None:
                return lambda x: fn(x, *params)

            def signed(x):
                out = fn(x, *params)
                return out * sign.reshape((-1,) + (1,) * (out.ndim - 1))

            return signed

        fns = fam._fns
        self.values = bind(fns[0])
        self.grads = bind(fns[1])
        self.hessians = bind(fns[2])
        self.thirds = bind(fns[3])


@dataclass(frozen=True, eq=False)
class LeafwiseVectorFieldFamily:
    """Fields ``V_i(y, z)``, ``i = 0..d`` (drift first), smooth in the fibre coordinate.

    The transversal enters through ``channels(z)``: a tuple of reals bound to the
    channel symbols of the expressions.  Well-definedness on the quotient
    requires ``V_i(y + e_1, F^{-1}(z)) = V_i(y, z)``; see :meth:`check_periodicity`.
    """

    space: SuspensionSpace
    exprs: tuple
    ysyms: tuple
    csyms: tuple
    channels: Callable
    name: str = ""
    drift_sign: float = 1.0
    _fns: list = field(default_factory=list, repr=False)

    def __post_init__(self):
        if not self._fns:
            rows = [[sp.sympify(c) for c in f] for f in self.exprs]
            self._fns.extend(compile_tensors(rows, list(self.ysyms), list(self.csyms)))

    @property
    def p(self) -> int:
        return len(self.ysyms)

    @property
    def d(self) -> int:
        return len(self.exprs) - 1

    @property
    def k_max(self) -> int:
        return 3

    def _sign(self):
        if self.drift_sign == 1.0:
            return None
        s = np.ones(self.d + 1)
        s[0] = self.drift_sign
        return s

    def channel_values(self, z) -> tuple:
        return tuple(float(c) for c in self.channels(z))

    def eval(self, i: int, y, z) -> np.ndarray:
        return self.freeze(z).values(np.asarray(y, dtype=float))[i]

    def freeze(self, z) -> VectorFieldFamily:
        """The R^p family ``y -> V_i(y, z)`` at a fixed transversal point."""
        b = _Bound(self, self.channel_values(z), self._sign())
        return VectorFieldFamily(
            p=self.p, d=self.d, values=b.values, grads=b.grads, hessians=b.hessians,
            thirds=b.thirds, name=f"{self.name}@{self.space.transversal.label(z)}",
        )

    def _bind_batch(self, U: np.ndarray) -> _Bound:
        return _Bound(self, [U[:, k] for k in range(U.shape[1])], self._sign())

    def with_drift_negated(self) -> "LeafwiseVectorFieldFamily":
        return LeafwiseVectorFieldFamily(
            self.space, self.exprs, self.ysyms, self.csyms, self.channels,
            self.name + "~", -self.drift_sign, self._fns,
        )

    def check_periodicity(self, rng: np.random.Generator | None = None, n_probes: int = 16) -> float:
        """Largest ``|V(y + e_1, F^{-1} z) - V(y, z)|`` over random probes."""
        rng = np.random.default_rng(0) if rng is None else rng
        T = self.space.transversal
        worst = 0.0
        e1 = np.zeros(self.p)
        e1[0] = 1.0
        for _ in range(n_probes):
            y = rng.uniform(-0.25, 1.25, self.p)
            z = T.sample(rng)
            a = self.freeze(z).values(y[None])
            b = self.freeze(T.F_inv(z)).values((y + e1)[None])
            worst = max(worst, float(np.max(np.abs(a - b))))
        return worst


def _smoothstep7(u):
    return 35 * u ** 4 - 84 * u ** 5 + 70 * u ** 6 - 20 * u ** 7


def bump(y):
    """C^3 partition-of-unity bump supported on ``|y| < 1`` with ``sum_n bump(y - n) = 1``."""
    return sp.Piecewise(
        (_smoothstep7(1 + y), (y >= -1) & (y <= 0)),
        (_smoothstep7(1 - y), (y > 0) & (y <= 1)),
        (0, True),
    )


SHIFTS = tuple(range(-4, 6))


def _suspended_channels(space: SuspensionSpace, h: Callable[[float], float]):
    T = space.transversal

    def channels(z):
        return tuple(h(T.coord(T.orbit(z, n))) for n in SHIFTS)

    return channels


def _ysyms(p):
    return tuple(sp.symbols(f"y1:{p + 1}"))


def unit_field(space: SuspensionSpace) -> LeafwiseVectorFieldFamily:
    """``V_1 = d/dy_1``, no drift: the translation flow along leaves."""
    ys = _ysyms(space.p)
    e1 = [1] + [0] * (space.p - 1)
    return LeafwiseVectorFieldFamily(space, ([0] * space.p, e1), ys, (), lambda z: (), "unit")


def drift_field(space: SuspensionSpace, c: float = 0.5) -> LeafwiseVectorFieldFamily:
    """``V_0 = c d/dy_1`` and ``V_1 = 0``."""
    ys = _ysyms(space.p)
    v0 = [sp.Float(c)] + [0] * (space.p - 1)
    return LeafwiseVectorFieldFamily(space, (v0, [0] * space.p), ys, (), lambda z: (), "drift")


def transversal_field(space: SuspensionSpace, amp: float = 0.5) -> LeafwiseVectorFieldFamily:
    """``V_1 = (1 + amp cos(2 pi coord(z))) d/dy_1``; only quotient-compatible when ``F`` fixes ``coord``."""
    ys = _ysyms(space.p)
    u = sp.Symbol("u0")
    T = space.transversal
    v1 = [1 + sp.Float(amp) * sp.cos(2 * sp.pi * u)] + [0] * (space.p - 1)
    return LeafwiseVectorFieldFamily(
        space, ([0] * space.p, v1), ys, (u,), lambda z: (T.coord(z),), "transversal",
    )


def _default_profile(c: float) -> float:
    return 1.0 + 0.5 * math.cos(2 * math.pi * c)


def suspended_exprs(p: int, amp: float = 0.3, drift: float = 0.0, d: int = 1):
    """Symbolic rows ``(V_0, ..., V_d)`` of :func:`suspended_field` with channel symbols ``u0..``."""
    ys = _ysyms(p)
    us = sp.symbols(f"u0:{len(SHIFTS)}")
    mix = sum(bump(ys[0] - n) * u for n, u in zip(SHIFTS, us))
    g1 = sp.Float(amp) * sp.sin(2 * sp.pi * ys[0]) + mix
    rows = [[sp.Float(drift) * mix] + [0] * (p - 1)]
    rows += [[g1 / i] + [0] * (p - 1) for i in range(1, d + 1)]
    return tuple(rows), ys, tuple(us)


def smoothstep_derivative(u, r: int):
    """``r``-th derivative of ``35u^4 - 84u^5 + 70u^6 - 20u^7`` in factored form."""
    if r == 0:
        return u ** 4 * (35 + u * (-84 + u * (70 - 20 * u)))
    uv = u * (1 - u)
    if r == 1:
        return 140 * uv ** 3
    if r == 2:
        return 420 * uv ** 2 * (1 - 2 * u)
    return 840 * uv * (1 - 5 * u + 5 * u * u)


def _suspended_tensors(p: int, amp: float, drift: float, d: int = 1) -> list:
    """Closed-form tensors of the orbit-mixed field.

    On ``[k, k + 1)`` with ``s = y_1 - k`` the mix is ``S(1 - s) c_k + S(s) c_{k+1}``.
    """
    two_pi = 2 * math.pi
    lo = SHIFTS[0]

    def scalar_derivs(y, prm, r):
        # (n_shifts,) for a single transversal point, (n_shifts, B) for a batch
        C = np.stack(prm) if np.ndim(prm[0]) else np.array(prm, dtype=float)
        k = np.floor(y)
        s = y - k
        idx = k.astype(np.int64) - lo
        if idx.min() < 0 or idx.max() + 1 >= C.shape[0]:
            raise SolverError("fibre coordinate outside the orbit window of the field")
        if C.ndim == 1:
            ck, ck1 = C[idx], C[idx + 1]
        else:
            cols = np.arange(y.shape[0])
            ck, ck1 = C[idx, cols], C[idx + 1, cols]
        mix = (-1) ** r * smoothstep_derivative(1 - s, r) * ck + smoothstep_derivative(s, r) * ck1
        trig = two_pi ** r * np.sin(two_pi * y + r * math.pi / 2)
        return drift * mix, amp * trig + mix

    def make(r):
        def fn(x, *prm):
            x = np.asarray(x, dtype=float)
            g0, g1 = scalar_derivs(x[..., 0], prm, r)
            out = np.zeros((d + 1,) + x.shape + (p,) * r)
            head = (slice(None),) * (x.ndim - 1)
            idx = head + (0,) * (r + 1)
            out[(0,) + idx] = g0
            for i in range(1, d + 1):
                out[(i,) + idx] = g1 / i
            return out

        return fn

    return [make(r) for r in range(4)]


def suspended_field(space: SuspensionSpace, h: Callable[[float], float] | None = None,
                    amp: float = 0.3, drift: float = 0.0, d: int = 1) -> LeafwiseVectorFieldFamily:
    """Quotient-compatible family built from a transversal profile ``h``.

    ``V_i = (amp sin(2 pi y_1) + sum_n bump(y_1 - n) h(F^n z)) / i d/dy_1`` for
    ``i = 1..d`` and ``V_0 = drift * sum_n bump(y_1 - n) h(F^n z) d/dy_1``.  Summing the bump
    along the orbit makes the deck relation hold for any ``F``.  Evaluation
    is closed form; :func:`suspended_exprs` gives the same field symbolically.
    """
    h = _default_profile if h is None else h
    exprs, ys, us = suspended_exprs(space.p, amp, drift, d)
    return LeafwiseVectorFieldFamily(
        space, exprs, ys, us, _suspended_channels(space, h), "suspended",
        _fns=_suspended_tensors(space.p, float(amp), float(drift), d),
    )


def shear_field(space: SuspensionSpace, amp: float = 0.5) -> LeafwiseVectorFieldFamily:
    """Circle transversal only: ``V_1 = (1 + amp cos(2 pi (theta + rho y_1))) d/dy_1``."""
    T = space.transversal
    if not isinstance(T, Circle):
        raise ValueError("shear_field needs a Circle transversal")
    ys = _ysyms(space.p)
    u = sp.Symbol("u0")
    rho = sp.Float(T.exact_rotation, 17)
    v1 = [1 + sp.Float(amp) * sp.cos(2 * sp.pi * (u + rho * ys[0]))] + [0] * (space.p - 1)
    return LeafwiseVectorFieldFamily(
        space, ([0] * space.p, v1), ys, (u,), lambda z: (T.coord(z),), "shear",
    )


def sine_field(space: SuspensionSpace, amp: float = 0.5) -> LeafwiseVectorFieldFamily:
    """``V_1 = sin(2 pi y_1) (1 + amp cos(2 pi coord(z))) d/dy_1``.

    Integers are equilibria of the fibre dynamics, so trajectories never change
    chart through a deck transition and the transversal factor needs no symmetry.
    """
    ys = _ysyms(space.p)
    u = sp.Symbol("u0")
    T = space.transversal
    v1 = [sp.sin(2 * sp.pi * ys[0]) * (1 + sp.Float(amp) * sp.cos(2 * sp.pi * u))] + [0] * (space.p - 1)
    return LeafwiseVectorFieldFamily(
        space, ([0] * space.p, v1), ys, (u,), lambda z: (T.coord(z),), "sine",
    )


LEAF_FIELDS = {
    "unit": unit_field,
    "drift": drift_field,
    "suspended": suspended_field,
    "shear": shear_field,
    "transversal": transversal_field,
    "sine": sine_field,
}


def leaf_field_by_name(name: str, space: SuspensionSpace, **kw) -> LeafwiseVectorFieldFamily:
    try:
        factory = LEAF_FIELDS[name]
    except KeyError:
        raise ValueError(f"unknown leafwise field {name!r}; choose from {sorted(LEAF_FIELDS)}") from None
    return factory(space, **kw)


def freeze(V: LeafwiseVectorFieldFamily, z) -> VectorFieldFamily:
    return V.freeze(z)


# --------------------------------------------------------------------- trajectories


@dataclass(frozen=True, eq=False)
class FoliatedTrajectory:
    """Samples at every step knot plus every located event.

    ``y``/``z``/``winding`` are the normalised leaf coordinates; ``ytil``,
    ``zc``, ``wind`` and ``chart`` are the chart coordinates the solver used.
    """

    space: SuspensionSpace
    times: np.ndarray
    y: np.ndarray
    z: list
    winding: np.ndarray
    ytil: np.ndarray
    zc: list
    wind: np.ndarray
    chart: np.ndarray
    subdiv: int = 1
    converged: bool = True
    J1: Optional[np.ndarray] = None
    Jinv: Optional[np.ndarray] = None
    J2: Optional[np.ndarray] = None

    def __len__(self):
        return self.times.size

    def point(self, k: int) -> LeafPoint:
        return LeafPoint(self.y[k], self.z[k], int(self.winding[k]))

    @property
    def endpoint(self) -> LeafPoint:
        return self.point(-1)

    @property
    def final_state(self) -> ChartState:
        return ChartState(self.ytil[-1].copy(), self.zc[-1], int(self.wind[-1]), int(self.chart[-1]))

    def index_at(self, t: float) -> int:
        hits = np.flatnonzero(np.abs(self.times - t) <= 1e-12 * (1 + abs(t)))
        if hits.size == 0:
            raise KeyError(f"time {t} is not sampled")
        return int(hits[-1])

    def at(self, t: float) -> LeafPoint:
        return self.point(self.index_at(t))


@dataclass(frozen=True)
class LeafReport:
    ok: bool
    transitions: list
    violation: Optional[tuple] = None


def leaf_check(traj: FoliatedTrajectory, raise_on_violation: bool = False) -> LeafReport:
    """Verify the transversal is constant between transitions and each transition is ``F^{+/-1}``.

    Returns the winding history as ``(time, +/-1)`` pairs.
    """
    T = traj.space.transversal
    history = []
    for k in range(1, len(traj)):
        dw = int(traj.winding[k] - traj.winding[k - 1])
        z0, z1 = traj.z[k - 1], traj.z[k]
        if dw == 0:
            ok, why = z1 == z0, "transversal changed without a transition"
        elif dw == 1:
            ok, why = z1 == T.F(z0), "transition +1 did not apply F"
        elif dw == -1:
            ok, why = z1 == T.F_inv(z0), "transition -1 did not apply F^-1"
        else:
            ok, why = False, f"winding jumped by {dw} between samples"
        if not ok:
            bad = (k, float(traj.times[k]), why)
            if raise_on_violation:
                raise LeafViolation(f"sample {k} at t={bad[1]:.17g}: {why}")
            return LeafReport(False, history, bad)
        if dw:
            history.append((float(traj.times[k]), dw))
    return LeafReport(True, history)


# --------------------------------------------------------------------- engine


class _Point:
    __slots__ = ("zc", "wind", "chart", "transitions", "events")

    def __init__(self, cs: ChartState):
        self.zc, self.wind, self.chart = cs.zc, cs.wind, cs.chart
        self.transitions = 0
        self.events = []


def _levels(chart: int) -> tuple[float, float, float]:
    lo, hi = CHARTS[chart]
    return lo, float(chart), hi


def _settle(state: np.ndarray, pt: _Point, T: Transversal, max_transitions: int) -> bool:
    """Move ``state`` into the interior of a chart; returns True if ``zc`` changed."""
    changed = False
    while True:
        lo, hi = CHARTS[pt.chart]
        y = state[0]
        if lo < y < hi:
            return changed
        if pt.chart == 0 and y >= hi:
            pt.chart = 1
        elif pt.chart == 1 and y <= lo:
            pt.chart = 0
        elif pt.chart == 1:
            state[0] -= 1.0
            pt.zc, pt.wind, pt.chart = T.F(pt.zc), pt.wind + 1, 0
            changed = True
        else:
            state[0] += 1.0
            pt.zc, pt.wind, pt.chart = T.F_inv(pt.zc), pt.wind - 1, 1
            changed = True
        if changed:
            pt.transitions += 1
            if pt.transitions > max_transitions:
                raise SolverError(f"more than {max_transitions} chart transitions")


def _crossed(y0: float, y1: float, chart: int) -> Optional[float]:
    hits = [L for L in _levels(chart) if (y0 - L) * (y1 - L) < 0 or (y1 == L != y0)]
    if not hits:
        return None
    return min(hits, key=lambda L: abs(L - y0))


class _Engine:
    def __init__(self, V: LeafwiseVectorFieldFamily, order: int, cfg: SolveConfig, max_transitions: int):
        self.V, self.order, self.cfg = V, order, cfg
        self.T = V.space.transversal
        self.max_transitions = max_transitions

    def incr(self, fam, Z, l1, l2, dt):
        if self.order == 0:
            return davie_increment(fam, Z, l1, l2, dt)
        return augmented_increment(fam, Z, l1, l2, dt, self.order)

    def split(self, state, pt, u_row, l1, l2, dt, t_left, s):
        """Advance one linear step for a single point, stopping at every level crossing."""
        remaining = 1.0
        while True:
            fam = self.V._bind_batch(u_row)

            def advance(theta, base=state, f=remaining, fam=fam):
                g = theta * f
                return base + self.incr(fam, base[None], g * l1, g * g * l2, g * dt)[0]

            new = advance(1.0)
            L = _crossed(state[0], new[0], pt.chart)
            if L is None:
                state = new
                break
            y0 = state[0]
            if new[0] == L:
                theta = 1.0
            else:
                theta = brentq(lambda th: advance(th)[0] - L, 0.0, 1.0, xtol=1e-15, rtol=4 * np.finfo(float).eps)
            hit = advance(theta)
            if abs(hit[0] - L) > EVENT_TOL:
                raise SolverError(f"event location failed: |y - {L}| = {abs(hit[0] - L):.3g}")
            # land just past the level in the direction of travel
            hit[0] = L if y0 < L else np.nextafter(L, -np.inf)
            elapsed = 1.0 - remaining * (1.0 - theta)
            remaining *= 1.0 - theta
            state = hit
            if _settle(state, pt, self.T, self.max_transitions):
                u_row = np.array([self.V.channel_values(pt.zc)])
            pt.events.append((s, t_left + elapsed * dt, state.copy(), pt.zc, pt.wind, pt.chart))
            if remaining <= 1e-15:
                break
        return state, u_row

    def run(self, starts: Sequence[ChartState], sched, l1=None, l2=None):
        V = self.V
        B = len(starts)
        pts = [_Point(cs) for cs in starts]
        p = V.p
        ys = np.array([cs.ytil for cs in starts], dtype=float)
        if self.order == 0:
            Z = ys
        else:
            eye = np.broadcast_to(np.eye(p), (B, p, p))
            Z = _pack(ys, eye, eye, np.zeros((B, p, p, p)) if self.order == 2 else None)
        U = np.array([V.channel_values(pt.zc) for pt in pts], dtype=float).reshape(B, -1)
        fam = V._bind_batch(U)
        S = sched.n_steps
        l1 = sched.l1 if l1 is None else l1
        l2 = sched.l2 if l2 is None else l2
        rec = np.empty((S + 1, B, Z.shape[1]))
        zrec = [[None] * B for _ in range(S + 1)]
        wrec = np.empty((S + 1, B), dtype=np.int64)
        crec = np.empty((S + 1, B), dtype=np.int64)

        charts = np.array([pt.chart for pt in pts], dtype=np.int64)
        winds = np.array([pt.wind for pt in pts], dtype=np.int64)
        zs = [pt.zc for pt in pts]

        def sync(b):
            charts[b], winds[b], zs[b] = pts[b].chart, pts[b].wind, pts[b].zc

        def record(s):
            rec[s] = Z
            zrec[s] = zs[:]
            wrec[s] = winds
            crec[s] = charts

        for b, pt in enumerate(pts):
            if _settle(Z[b], pt, self.T, self.max_transitions):
                U[b] = V.channel_values(pt.zc)
            sync(b)
        fam = V._bind_batch(U)
        record(0)
        radius = self.cfg.explosion_radius
        for s in range(S):
            a1, a2, dt = l1[s], l2[s], sched.dt[s]
            Znew = Z + self.incr(fam, Z, a1, a2, dt)
            dirty = False
            if sched.linear[s]:
                y0, y1 = Z[:, 0], Znew[:, 0]
                lo = np.where(charts == 0, CHARTS[0][0], CHARTS[1][0])
                hit = np.zeros(B, dtype=bool)
                for L in (lo, charts.astype(float), lo + 1.0):
                    hit |= ((y0 - L) * (y1 - L) < 0) | ((y1 == L) & (y0 != L))
                for b in np.flatnonzero(hit):
                    r1 = a1 if a1.ndim == 1 else a1[b]
                    r2 = a2 if a2.ndim == 2 else a2[b]
                    Znew[b], u_row = self.split(
                        Z[b].copy(), pts[b], U[b:b + 1], r1, r2, dt, sched.times[s], s
                    )
                    sync(b)
                    if not np.array_equal(u_row[0], U[b]):
                        U[b] = u_row[0]
                        dirty = True
            Z = Znew
            lo = np.where(charts == 0, CHARTS[0][0], CHARTS[1][0])
            for b in np.flatnonzero(~((lo < Z[:, 0]) & (Z[:, 0] < lo + 1.0))):
                if _settle(Z[b], pts[b], self.T, self.max_transitions):
                    U[b] = V.channel_values(pts[b].zc)
                    dirty = True
                sync(b)
            if not np.abs(Z[:, :p]).max() <= radius + 1.0:
                raise ExplosionError(float(sched.times[s + 1]), radius)
            if dirty:
                fam = V._bind_batch(U)
            record(s + 1)
        return rec, zrec, wrec, crec, pts

    def trajectories(self, starts, sched, subdiv, converged, l1=None, l2=None):
        rec, zrec, wrec, crec, pts = self.run(starts, sched, l1, l2)
        space = self.V.space
        p = self.V.p
        out = []
        for b, pt in enumerate(pts):
            # events of step s sit between knots s and s + 1
            by_step = {}
            for ev in pt.events:
                by_step.setdefault(ev[0], []).append(ev[1:])
            if by_step:
                rows = []
                for s in range(sched.n_steps + 1):
                    rows.append((sched.times[s], rec[s, b], zrec[s][b], wrec[s, b], crec[s, b]))
                    rows.extend(by_step.get(s, ()))
                times = np.array([r[0] for r in rows])
                states = np.array([r[1] for r in rows])
                zc = [r[2] for r in rows]
                wind = np.array([r[3] for r in rows], dtype=np.int64)
                chart = np.array([r[4] for r in rows], dtype=np.int64)
            else:
                times, states = sched.times.copy(), rec[:, b].copy()
                zc = [zr[b] for zr in zrec]
                wind, chart = wrec[:, b].copy(), crec[:, b].copy()
            y, z, winding = space.normalize_many(states[:, :p], zc, wind)
            jac = {}
            if self.order:
                _, J1, Jinv, J2 = _unpack(states, p, self.order)
                jac = dict(J1=J1, Jinv=Jinv, J2=J2)
            out.append(FoliatedTrajectory(
                space=space, times=times, y=y, z=z, winding=winding,
                ytil=states[:, :p], zc=zc, wind=wind, chart=chart,
                subdiv=subdiv, converged=converged, **jac,
            ))
        return out


def _as_chart_state(space: SuspensionSpace, m) -> ChartState:
    if isinstance(m, ChartState):
        return ChartState(np.array(m.ytil, dtype=float), m.zc, m.wind, m.chart)
    return space.chart_state(m)


def _solve_many(starts, path: GridRoughPath, V: LeafwiseVectorFieldFamily, cfg: SolveConfig,
                interval, subdiv, order, max_transitions):
    if path.dim != V.d:
        raise SolverError(f"driver dimension {path.dim} != field family dimension {V.d}")
    if abs(cfg.alpha - path.alpha) > 1e-15:
        raise SolverError(f"config alpha {cfg.alpha} != path alpha {path.alpha}")
    interval = (path.t0, path.t1) if interval is None else (float(interval[0]), float(interval[1]))
    space = V.space
    cs = [_as_chart_state(space, m) for m in starts]
    eng = _Engine(V, order, cfg, max_transitions)
    if subdiv is not None or not cfg.refine:
        n = cfg.base_subdiv if subdiv is None else subdiv
        return eng.trajectories(cs, step_schedule(path, interval, n), n, True)
    n_lin = sum(k == "linear" for k in path.cell_kind)
    n = cfg.base_subdiv
    prev = eng.trajectories(cs, step_schedule(path, interval, n), n, n_lin == 0)
    if n_lin == 0:
        return prev
    while True:
        n2 = 2 * n
        if n2 > cfg.max_subdiv or n_lin * n2 > cfg.max_steps:
            return prev
        cur = eng.trajectories(cs, step_schedule(path, interval, n2), n2, False)
        gap = max(space.distance(a.endpoint, b.endpoint) for a, b in zip(prev, cur))
        n, prev = n2, cur
        if gap < cfg.step_tol:
            return [replace(t, converged=True) for t in cur]


def solve_rde_foliated(m0, path: GridRoughPath, V: LeafwiseVectorFieldFamily, cfg: SolveConfig = SolveConfig(),
                       interval=None, subdiv: int | None = None, max_transitions: int = 100_000) -> FoliatedTrajectory:
    """Solve the leafwise RDE from ``m0`` (a LeafPoint or a ChartState) by chart continuation."""
    return _solve_many([m0], path, V, cfg, interval, subdiv, 0, max_transitions)[0]


def solve_rde_foliated_batch(points, path, V, cfg: SolveConfig = SolveConfig(), interval=None,
                             subdiv: int | None = None, max_transitions: int = 100_000) -> list[FoliatedTrajectory]:
    return _solve_many(list(points), path, V, cfg, interval, subdiv, 0, max_transitions)


def inverse_flow_foliated(points, path: GridRoughPath, V: LeafwiseVectorFieldFamily,
                          cfg: SolveConfig = SolveConfig(), S: float | None = None,
                          subdiv: int | None = None) -> list[LeafPoint]:
    """Invert ``m -> Phi(m)_S`` by solving along the reversed driver with the drift negated."""
    S = path.t1 if S is None else float(S)
    points = list(points)
    if S == path.t0:
        return [LeafPoint(m.y, m.z, m.winding) for m in points]
    rev = reversed_driver(path, S)
    trajs = _solve_many(points, rev, V.with_drift_negated(), cfg, None, subdiv, 0, 100_000)
    return [t.endpoint for t in trajs]


# --------------------------------------------------------------------- flows on grids


@dataclass(frozen=True, eq=False)
class FlowSample:
    time: float
    sources: list
    images: list
    inverses: list
    roundtrip_error: float
    transversal_exact: bool
    min_source_gap: float
    min_image_gap: float
    J1: Optional[np.ndarray] = None
    Jinv: Optional[np.ndarray] = None
    J2: Optional[np.ndarray] = None


def _min_gap(space, pts) -> float:
    best = math.inf
    for i in range(len(pts)):
        for j in range(i + 1, len(pts)):
            best = min(best, space.distance(pts[i], pts[j]))
    return best


def leaf_grid(space: SuspensionSpace, ys: Sequence[float], zs: Sequence) -> list[LeafPoint]:
    return [LeafPoint([y] + [0.0] * (space.p - 1), z) for z in zs for y in ys]


def flow_grid(points, path: GridRoughPath, V: LeafwiseVectorFieldFamily, cfg: SolveConfig = SolveConfig(),
              times: Sequence[float] | None = None, subdiv: int | None = None) -> list[FlowSample]:
    """Images of ``points`` under the flow at each of ``times`` with round-trip diagnostics."""
    space = V.space
    points = list(points)
    times = [path.t1] if times is None else [float(t) for t in times]
    t_end = max(times)
    trajs = (_solve_many(points, path, V, cfg, (path.t0, t_end), subdiv, 0, 100_000)
             if t_end > path.t0 else None)
    out = []
    for t in times:
        if t == path.t0:
            images = [LeafPoint(m.y, m.z, m.winding) for m in points]
        else:
            images = [tr.at(t) for tr in trajs]
        inverses = inverse_flow_foliated(images, path, V, cfg, S=t, subdiv=subdiv)
        errs = [space.match(src, inv) for src, inv in zip(points, inverses)]
        out.append(FlowSample(
            time=t, sources=points, images=images, inverses=inverses,
            roundtrip_error=max(e for e, _ in errs),
            transversal_exact=all(ok for _, ok in errs),
            min_source_gap=_min_gap(space, points), min_image_gap=_min_gap(space, images),
        ))
    return out


def flow_jacobian_grid(points, path: GridRoughPath, V: LeafwiseVectorFieldFamily,
                       cfg: SolveConfig = SolveConfig(), order: int = 1,
                       subdiv: int | None = None) -> FlowSample:
    """Flow at ``path.t1`` with leafwise Jacobians ``J1``, ``J1^{-1}`` (and ``J2``) per point.

    Deck transformations are translations, so Jacobians carry over unchanged
    across chart transitions.
    """
    if order not in (1, 2):
        raise ValueError("order must be 1 or 2")
    space = V.space
    points = list(points)
    trajs = _solve_many(points, path, V, cfg, None, subdiv, order, 100_000)
    J1 = np.array([t.J1[-1] for t in trajs])
    dets = np.linalg.det(J1)
    if np.any(np.abs(dets) < 1.0 / cfg.cond_tol):
        k = int(np.argmin(np.abs(dets)))
        raise SingularJacobianError(path.t1, float(1.0 / max(abs(dets[k]), 1e-300)))
    images = [t.endpoint for t in trajs]
    inverses = inverse_flow_foliated(images, path, V, cfg, subdiv=subdiv)
    errs = [space.match(src, inv) for src, inv in zip(points, inverses)]
    return FlowSample(
        time=path.t1, sources=points, images=images, inverses=inverses,
        roundtrip_error=max(e for e, _ in errs), transversal_exact=all(ok for _, ok in errs),
        min_source_gap=_min_gap(space, points), min_image_gap=_min_gap(space, images),
        J1=J1, Jinv=np.array([t.Jinv[-1] for t in trajs]),
        J2=None if order == 1 else np.array([t.J2[-1] for t in trajs]),
    )
