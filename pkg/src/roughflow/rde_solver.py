"""Step-2 (Davie) solver for ``dx = sum_i V_i(x) dw^i + V_0(x) dt`` on R^p.

One step over an increment ``(X1, X2, dt)`` is::

    x + sum_i V_i(x) X1^i + sum_{j,k} (grad V_k . V_j)(x) X2^{jk} + V_0(x) dt

Steps are composed over the path grid, with linear cells subdivided into
``n`` equal pieces.  All kernels are vectorised over a leading batch axis of
initial points (and optionally of drivers sharing one time grid).
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np
import sympy as sp
from sympy.printing.numpy import NumPyPrinter

from .tensor_algebra import (
    LINEAR,
    DEFAULT_ALPHA,
    GridRoughPath,
    RoughPathError,
    query_increment,
    restrict,
    time_reverse,
    validate_alpha,
)

ArrayFn = Callable[[np.ndarray], np.ndarray]


class SolverError(RuntimeError):
    """Numerical failure of a solve."""


class ExplosionError(SolverError):
    def __init__(self, time: float, radius: float):
        super().__init__(f"solution left the ball of radius {radius:g} at t={time:.17g}")
        self.time = time
        self.radius = radius


class SingularJacobianError(SolverError):
    def __init__(self, time: float, cond: float):
        super().__init__(f"flow Jacobian condition number {cond:.3g} at t={time:.17g}")
        self.time = time
        self.cond = cond


def _compile(exprs: sp.Array, syms: Sequence[sp.Symbol], params: Sequence[sp.Symbol] = ()) -> ArrayFn:
    """Vectorised evaluator ``x[..., p], *params -> array[lead, ..., *rest]``.

    The first axis of ``exprs`` stays first; batch axes of ``x`` are inserted
    after it.  ``params`` are extra scalar (or batch-shaped) arguments.
    Straight-line numpy code is generated with common subexpressions hoisted,
    and only nonzero entries are written.
    """
    shape = tuple(exprs.shape)
    entries = [(idx, exprs[idx]) for idx in np.ndindex(*shape)]
    nonzero = [(idx, e) for idx, e in entries if e != 0]
    subs, reduced = sp.cse([e for _, e in nonzero], optimizations="basic")
    printer = NumPyPrinter({"fully_qualified_modules": True})
    lines = ["def _f(x, *prm):", "    batch = x.shape[:-1]"]
    for k, sym in enumerate(syms):
        lines.append(f"    {sym} = x[..., {k}]")
    for k, sym in enumerate(params):
        lines.append(f"    {sym} = prm[{k}]")
    lines.append(f"    out = numpy.zeros(({shape[0]},) + batch + {shape[1:]!r})")
    for name, e in subs:
        lines.append(f"    {name} = {printer.doprint(e)}")
    for (idx, _), e in zip(nonzero, reduced):
        key = ", ".join([str(idx[0]), "..."] + [str(i) for i in idx[1:]])
        lines.append(f"    out[{key}] = {printer.doprint(e)}")
    lines.append("    return out")
    scope = {"numpy": np}
    exec(compile("\n".join(lines), f"<field {exprs!s:.40}>", "exec"), scope)
    fn = scope["_f"]

    def evaluate(x: np.ndarray, *prm) -> np.ndarray:
        return fn(np.asarray(x, dtype=float), *prm)

    return evaluate


@dataclass(frozen=True, eq=False)
class VectorFieldFamily:
    """Driving fields ``V_0 (drift), V_1..V_d`` on R^p with derivative oracles.

    Each oracle maps ``x`` of shape ``(..., p)`` to an array with the field
    index first: ``values -> (d+1, ..., p)``, ``grads -> (d+1, ..., p, p)`` with
    ``grads[i][..., a, b] = d V_i^a / d x^b``, ``hessians -> (d+1, ..., p, p, p)``
    and ``thirds -> (d+1, ..., p, p, p, p)``.
    """

    p: int
    d: int
    values: ArrayFn
    grads: ArrayFn
    hessians: Optional[ArrayFn] = None
    thirds: Optional[ArrayFn] = None
    name: str = ""
    drift_sign: float = 1.0
    _meta: dict = field(default_factory=dict, repr=False)

    @property
    def k_max(self) -> int:
        if self.thirds is not None:
            return 3
        return 2 if self.hessians is not None else 1

    def eval(self, i: int, x) -> np.ndarray:
        return self.values(x)[i]

    def grad(self, i: int, x) -> np.ndarray:
        return self.grads(x)[i]

    def hess(self, i: int, x) -> np.ndarray:
        if self.hessians is None:
            raise SolverError(f"field family {self.name!r} has no second derivatives")
        return self.hessians(x)[i]

    def with_drift_negated(self) -> "VectorFieldFamily":
        """The family ``[V_1, ..., V_d; -V_0]`` used by inverse flows."""
        sign = np.ones(self.d + 1)
        sign[0] = -1.0

        def flip(fn):
            if fn is None:
                return None
            return lambda x: _signed(fn(x), sign)

        return replace(
            self,
            values=flip(self.values), grads=flip(self.grads),
            hessians=flip(self.hessians), thirds=flip(self.thirds),
            name=self.name + "~", drift_sign=-self.drift_sign,
        )

    @classmethod
    def from_sympy(cls, fields, symbols, name: str = "", order: int = 3) -> "VectorFieldFamily":
        """Compile ``fields[i][a]`` (``i = 0..d``, drift first) and its derivatives."""
        syms = list(symbols)
        rows = [[sp.sympify(c) for c in f] for f in fields]
        fns = compile_tensors(rows, syms, order=order)
        return cls(
            p=len(syms), d=len(rows) - 1, values=fns[0], grads=fns[1], hessians=fns[2],
            thirds=fns[3], name=name, _meta={"exprs": rows, "symbols": syms},
        )

    def check_derivatives(self, rng: np.random.Generator | None = None, n_probes: int = 8,
                          scale: float = 1.0, h: float = 1e-5, rtol: float = 1e-5) -> float:
        """Largest relative mismatch between oracles and centred differences."""
        rng = np.random.default_rng(0) if rng is None else rng
        x = scale * rng.standard_normal((n_probes, self.p))
        pairs = [(self.values, self.grads), (self.grads, self.hessians), (self.hessians, self.thirds)]
        worst = 0.0
        for f, df in pairs:
            if df is None:
                break
            exact = df(x)
            for b in range(self.p):
                e = np.zeros(self.p)
                e[b] = h
                fd = (f(x + e) - f(x - e)) / (2 * h)
                got = exact[..., b]
                err = np.abs(fd - got).max() / (1.0 + np.abs(got).max())
                worst = max(worst, float(err))
        if worst > rtol:
            raise ValueError(f"derivative oracle mismatch {worst:.3g} in family {self.name!r}")
        return worst


def compile_tensors(rows, syms, params=(), order: int = 3) -> list:
    """Evaluators for the field array ``rows[i][a]`` and its first ``order`` derivatives.

    Derivative axes are appended after the component axis.
    """
    p = len(syms)
    if any(len(r) != p for r in rows):
        raise ValueError("every field needs p components")
    base = sp.Array(rows)
    tensors = [base]
    for _ in range(order):
        tensors.append(sp.derive_by_array(tensors[-1], syms))
    fixed = [base]
    for k, t in enumerate(tensors[1:], start=1):
        arr = np.array(t.tolist(), dtype=object)
        # derive_by_array prepends each new axis: (x_k .. x_1, field, comp) -> (field, comp, x_1 .. x_k)
        arr = np.moveaxis(arr, [k, k + 1], [0, 1])
        arr = arr.transpose([0, 1] + list(range(arr.ndim - 1, 1, -1)))
        fixed.append(sp.Array(arr.tolist()))
    fns = [_compile(t, syms, params) for t in fixed]
    return fns + [None] * (4 - len(fns))


def _signed(arr: np.ndarray, sign: np.ndarray) -> np.ndarray:
    return arr * sign.reshape((-1,) + (1,) * (arr.ndim - 1))


@dataclass(frozen=True)
class SolveConfig:
    """Solver controls.

    ``refine`` doubles the per-cell subdivision from ``base_subdiv`` until the
    endpoint moves by less than ``step_tol`` or the step budget is exhausted.
    """

    alpha: float = DEFAULT_ALPHA
    base_subdiv: int = 8
    refine: bool = True
    step_tol: float = 1e-9
    max_subdiv: int = 1 << 15
    max_steps: int = 1 << 17
    explosion_radius: float = 1e8
    jac_tol: float = 1e-8
    cond_tol: float = 1e12

    def __post_init__(self):
        validate_alpha(self.alpha)
        if self.base_subdiv < 1:
            raise ValueError("base_subdiv must be >= 1")
        if self.step_tol <= 0:
            raise ValueError("step_tol must be positive")
        if self.explosion_radius <= 0:
            raise ValueError("explosion_radius must be positive")


@dataclass(frozen=True, eq=False)
class Trajectory:
    """Solved states on the step grid.

    ``states`` has shape ``(S+1, p)`` for a single start or ``(S+1, B, p)`` for a
    batch.  Jacobian arrays carry the same leading axes.
    """

    times: np.ndarray
    states: np.ndarray
    subdiv: int
    converged: bool = True
    J1: Optional[np.ndarray] = None
    Jinv: Optional[np.ndarray] = None
    J2: Optional[np.ndarray] = None
    driver: Optional[GridRoughPath] = field(default=None, repr=False)

    @property
    def endpoint(self) -> np.ndarray:
        return self.states[-1]

    def at(self, t: float) -> np.ndarray:
        k = int(np.searchsorted(self.times, t))
        if k >= self.times.size or not np.isclose(self.times[k], t, rtol=0, atol=1e-12 * (1 + abs(t))):
            raise KeyError(f"time {t} is not on the trajectory grid")
        return self.states[k]


@dataclass(frozen=True, eq=False)
class StepSchedule:
    """Per-step increments ``l1 (S, d)``, ``l2 (S, d, d)``, ``dt (S,)`` and knot times ``(S+1,)``."""

    times: np.ndarray
    l1: np.ndarray
    l2: np.ndarray
    dt: np.ndarray
    linear: np.ndarray

    @property
    def n_steps(self) -> int:
        return self.dt.size


def step_schedule(path: GridRoughPath, interval: tuple[float, float] | None = None,
                  subdiv: int = 1) -> StepSchedule:
    """Subdivide every linear cell of ``path`` on ``interval`` into ``subdiv`` equal steps.

    Atomic cells are stepped over whole.  Step increments depend only on the
    cell data, so schedules on nested intervals agree exactly on their overlap.
    """
    a, b = (path.t0, path.t1) if interval is None else (float(interval[0]), float(interval[1]))
    if a == b:
        path.position(a)
        d = path.dim
        return StepSchedule(np.array([a]), np.zeros((0, d)), np.zeros((0, d, d)), np.zeros(0),
                            np.zeros(0, bool))
    sub = path if (a == path.t0 and b == path.t1) else restrict(path, a, b)
    lin = np.array([k == LINEAR for k in sub.cell_kind], dtype=bool)
    counts = np.where(lin, subdiv, 1)
    idx = np.repeat(np.arange(sub.n_cells), counts)
    start = np.cumsum(counts) - counts
    k = np.arange(idx.size) - start[idx]
    n = counts[idx]
    t_left = sub.times[:-1][idx]
    width = np.diff(sub.times)[idx]
    times = np.empty(idx.size + 1)
    times[:-1] = t_left + k * (width / n)
    times[-1] = sub.times[-1]
    l1 = sub.level1[idx] * (1.0 / n)[:, None]
    l2 = np.where(
        lin[idx][:, None, None],
        0.5 * np.einsum("ni,nj->nij", l1, l1),
        sub.level2[idx],
    )
    return StepSchedule(times, l1, l2, np.diff(times), lin[idx])


def space_time(l1, l2, dt) -> tuple[np.ndarray, np.ndarray]:
    """Increments of the driver ``(t, w)`` with the drift as component 0.

    The cross integrals of time against ``w`` are those of a straight segment,
    ``dt l1 / 2`` in both orders, and ``dt^2 / 2`` on the diagonal.
    """
    l1 = np.asarray(l1, dtype=float)
    l2 = np.asarray(l2, dtype=float)
    dt = np.asarray(dt, dtype=float)
    batch = np.broadcast_shapes(l1.shape[:-1], dt.shape)
    d = l1.shape[-1]
    l1 = np.broadcast_to(l1, batch + (d,))
    dt = np.broadcast_to(dt, batch)
    l1e = np.empty(batch + (d + 1,))
    l1e[..., 0] = dt
    l1e[..., 1:] = l1
    l2e = np.empty(batch + (d + 1, d + 1))
    l2e[..., 0, 0] = 0.5 * dt * dt
    cross = 0.5 * dt[..., None] * l1
    l2e[..., 0, 1:] = cross
    l2e[..., 1:, 0] = cross
    l2e[..., 1:, 1:] = l2
    return l1e, l2e


def davie_increment(V: VectorFieldFamily, x: np.ndarray, l1, l2, dt) -> np.ndarray:
    """Displacement of one step-2 step; ``x`` is ``(B, p)``, ``l1``/``l2`` may carry a batch axis."""
    vals = V.values(x)
    grads = V.grads(x)
    B, p = x.shape
    n = V.d + 1
    l1e, l2e = space_time(l1, l2, dt)
    if l1e.ndim == 1:
        first = (l1e @ vals.reshape(n, -1)).reshape(B, p)
        # W_k = sum_j l2[j, k] V_j
        W = (l2e.T @ vals.reshape(n, -1)).reshape(n, B, p, 1)
    else:
        first = np.einsum("ibp,bi->bp", vals, l1e)
        W = np.einsum("bjk,jbq->kbq", l2e, vals)[..., None]
    return first + np.matmul(grads, W).sum(axis=0)[..., 0]


def davie_step(x, inc, V: VectorFieldFamily) -> np.ndarray:
    """Apply one step-2 update to ``x`` (shape ``(p,)`` or ``(B, p)``) over ``inc``."""
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    xb = x[None] if single else x
    new = xb + davie_increment(V, xb, inc.level1, inc.level2, inc.dt)
    if not np.all(np.isfinite(new)):
        raise ExplosionError(float("nan"), float("inf"))
    return new[0] if single else new


def _pack(x, J1, Jinv, J2=None):
    parts = [x, J1.reshape(x.shape[0], -1), Jinv.reshape(x.shape[0], -1)]
    if J2 is not None:
        parts.append(J2.reshape(x.shape[0], -1))
    return np.concatenate(parts, axis=1)


def _unpack(z, p, order):
    B = z.shape[0]
    x = z[:, :p]
    J1 = z[:, p:p + p * p].reshape(B, p, p)
    Jinv = z[:, p + p * p:p + 2 * p * p].reshape(B, p, p)
    J2 = z[:, p + 2 * p * p:].reshape(B, p, p, p) if order == 2 else None
    return x, J1, Jinv, J2


def _bilinear(H, J):
    """``H[J, J]``: ``(B, p, e, f) x (B, e, m) x (B, f, n) -> (B, p, m, n)``."""
    return np.einsum("bpef,bem,bfn->bpmn", H, J, J)


def augmented_increment(V: VectorFieldFamily, z: np.ndarray, l1, l2, dt, order: int) -> np.ndarray:
    """Step-2 displacement of the state augmented with ``J1``, ``J1^{-1}`` (and ``J2``).

    The augmented fields are ``(V_i, grad V_i J1, -J1^{-1} grad V_i, grad V_i J2 +
    hess V_i [J1, J1])`` and the second-order term uses their exact directional
    derivatives, which needs one derivative more than the fields themselves.
    The drift enters as driver component 0 through ``space_time``.
    ``J1^{-1}`` is advanced by the exact inverse of the one-step map of ``J1``,
    so ``J1 J1^{-1} = Id`` holds to round-off on every step.
    """
    p = V.p
    x, J1, Jinv, J2 = _unpack(z, p, order)
    B = x.shape[0]
    l1e, l2e = space_time(l1, l2, dt)
    l1e = np.broadcast_to(l1e, (B,) + l1e.shape[-1:])
    l2e = np.broadcast_to(l2e, (B,) + l2e.shape[-2:])
    a = V.values(x)
    A = V.grads(x)
    H = V.hessians(x)

    Aw = np.einsum("ibpq,bi->bpq", A, l1e)
    dx = np.einsum("ibp,bi->bp", a, l1e)
    dx += np.einsum("bjk,kbpq,jbq->bp", l2e, A, a)
    W1 = np.einsum("bjk,kbpqr,jbq->bpr", l2e, H, a)
    AkAj = np.einsum("bjk,kbpe,jbeq->bpq", l2e, A, A)
    # one-step derivative map; its exact inverse agrees with the step-2
    # expansion of the inverse equation on geometric increments
    M = np.eye(p) + Aw + W1 + AkAj
    try:
        Minv = np.linalg.inv(M)
    except np.linalg.LinAlgError:
        raise SingularJacobianError(float("nan"), float("inf")) from None
    dJ1 = (M - np.eye(p)) @ J1
    dJi = Jinv @ Minv - Jinv
    parts = [xx + dd for xx, dd in ((x, dx), (J1, dJ1), (Jinv, dJi))]
    if order == 2:
        Hw = np.einsum("ibpqr,bi->bpqr", H, l1e)
        dJ2 = np.einsum("bpe,bemn->bpmn", Aw, J2) + _bilinear(Hw, J1)
        T = V.thirds(x)
        dJ2 += np.einsum("bpe,bemn->bpmn", W1 + AkAj, J2)
        AH = np.einsum("bjk,kbpe,jbefg->bpfg", l2e, A, H)
        Ta = np.einsum("bjk,kbpgef,jbg->bpef", l2e, T, a)
        dJ2 += _bilinear(AH + Ta, J1)
        AJ = np.einsum("jbpe,beq->jbpq", A, J1)
        dJ2 += np.einsum("bjk,kbpef,jbem,bfn->bpmn", l2e, H, AJ, J1)
        dJ2 += np.einsum("bjk,kbpef,bem,jbfn->bpmn", l2e, H, J1, AJ)
        parts.append(J2 + dJ2)
    return _pack(*parts) - z


def _run(step: Callable, z0: np.ndarray, sched: StepSchedule, radius: float, p: int,
         l1=None, l2=None) -> np.ndarray:
    l1 = sched.l1 if l1 is None else l1
    l2 = sched.l2 if l2 is None else l2
    out = np.empty((sched.n_steps + 1,) + z0.shape)
    out[0] = z = z0
    for s in range(sched.n_steps):
        z = z + step(z, l1[s], l2[s], sched.dt[s])
        # NaN fails the comparison as well
        if not np.abs(z[:, :p]).max() <= radius:
            raise ExplosionError(float(sched.times[s + 1]), radius)
        out[s + 1] = z
    return out


def _endpoint_gap(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.max(np.abs(a - b)))


def _subdiv_ladder(path_cells_linear: int, n_cells: int, cfg: SolveConfig):
    n = cfg.base_subdiv
    yield n
    if not cfg.refine or path_cells_linear == 0:
        return
    while True:
        n *= 2
        steps = path_cells_linear * n + (n_cells - path_cells_linear)
        if n > cfg.max_subdiv or steps > cfg.max_steps:
            return
        yield n


def _solve(step_factory, z0, path, cfg, interval, p, subdiv, batch_l1=None):
    a, b = interval
    n_lin = sum(k == LINEAR for k in path.cell_kind)
    ladder = [subdiv] if subdiv is not None else _subdiv_ladder(n_lin, path.n_cells, cfg)
    prev = None
    converged = not cfg.refine or subdiv is not None
    for n in ladder:
        sched = step_schedule(path, (a, b), n)
        l1, l2 = (None, None) if batch_l1 is None else batch_l1(sched, n)
        states = _run(step_factory, z0, sched, cfg.explosion_radius, p, l1, l2)
        if prev is not None and _endpoint_gap(states[-1], prev[1][-1]) < cfg.step_tol:
            converged = True
            return sched, states, n, converged
        prev = (sched, states, n)
        if subdiv is not None or n_lin == 0:
            converged = True
            break
    return sched, states, n, converged


def _prepare(xi, path: GridRoughPath, V: VectorFieldFamily, cfg: SolveConfig, interval):
    if path.dim != V.d:
        raise SolverError(f"driver dimension {path.dim} != field family dimension {V.d}")
    if abs(cfg.alpha - path.alpha) > 1e-15:
        raise SolverError(f"config alpha {cfg.alpha} != path alpha {path.alpha}")
    x = np.asarray(xi, dtype=float)
    single = x.ndim == 1
    xb = np.atleast_2d(x)
    if xb.shape[-1] != V.p:
        raise SolverError(f"initial point has dimension {xb.shape[-1]}, expected {V.p}")
    interval = (path.t0, path.t1) if interval is None else (float(interval[0]), float(interval[1]))
    if not path.t0 <= interval[0] <= interval[1] <= path.t1:
        raise SolverError(f"interval {interval} outside driver domain [{path.t0}, {path.t1}]")
    return xb, single, interval


def solve_rde(xi, path: GridRoughPath, V: VectorFieldFamily, cfg: SolveConfig = SolveConfig(),
              interval: tuple[float, float] | None = None, subdiv: int | None = None) -> Trajectory:
    """Solve from ``xi`` (shape ``(p,)`` or ``(B, p)``) along ``path`` on ``interval``.

    ``subdiv`` pins the per-cell subdivision and disables refinement.
    """
    xb, single, interval = _prepare(xi, path, V, cfg, interval)

    def step(z, l1, l2, dt):
        return davie_increment(V, z, l1, l2, dt)

    sched, states, n, ok = _solve(step, xb, path, cfg, interval, V.p, subdiv)
    if single:
        states = states[:, 0]
    return Trajectory(sched.times, states, n, ok, driver=path)


def solve_batch_drivers(xi, paths: Sequence[GridRoughPath], V: VectorFieldFamily,
                        cfg: SolveConfig = SolveConfig(), subdiv: int | None = None) -> Trajectory:
    """Solve one start point per driver; all drivers must share one grid and cell kinds.

    ``states`` has shape ``(S+1, len(paths), p)``.
    """
    ref = paths[0]
    for q in paths[1:]:
        if q.times.shape != ref.times.shape or np.any(q.times != ref.times) or q.cell_kind != ref.cell_kind:
            raise SolverError("batched drivers must share the time grid and cell kinds")
    x = np.asarray(xi, dtype=float)
    xb = np.broadcast_to(x, (len(paths), V.p)).copy() if x.ndim == 1 else x
    _prepare(xb, ref, V, cfg, None)

    def batch_l1(sched, n):
        ls = [step_schedule(q, None, n) for q in paths]
        return np.stack([s.l1 for s in ls], axis=1), np.stack([s.l2 for s in ls], axis=1)

    def step(z, l1, l2, dt):
        return davie_increment(V, z, l1, l2, dt)

    sched, states, n, ok = _solve(step, xb, ref, cfg, (ref.t0, ref.t1), V.p, subdiv, batch_l1)
    return Trajectory(sched.times, states, n, ok)


def solve_with_jacobians(xi, path: GridRoughPath, V: VectorFieldFamily, cfg: SolveConfig = SolveConfig(),
                         order: int = 1, interval=None, subdiv: int | None = None) -> Trajectory:
    """Solve together with ``J1 = d x_t / d xi``, its inverse, and for ``order=2`` the Hessian ``J2``."""
    if order not in (1, 2):
        raise ValueError("order must be 1 or 2")
    if V.k_max < order + 1:
        raise SolverError(f"order-{order} Jacobians need derivatives up to order {order + 1}")
    xb, single, interval = _prepare(xi, path, V, cfg, interval)
    B, p = xb.shape
    eye = np.broadcast_to(np.eye(p), (B, p, p))
    z0 = _pack(xb, eye, eye, np.zeros((B, p, p, p)) if order == 2 else None)

    def step(z, l1, l2, dt):
        return augmented_increment(V, z, l1, l2, dt, order)

    sched, states, n, ok = _solve(step, z0, path, cfg, interval, p, subdiv)
    S = states.shape[0]
    xs, J1, Jinv, J2 = _unpack(states.reshape(S * B, -1), p, order)
    J1 = J1.reshape(S, B, p, p)
    conds = np.linalg.cond(J1)
    if np.any(~np.isfinite(conds)) or np.any(conds > cfg.cond_tol):
        k = int(np.argmax(~np.isfinite(conds) | (conds > cfg.cond_tol)) // B)
        raise SingularJacobianError(float(sched.times[k]), float(np.max(conds[k])))
    out = dict(
        states=xs.reshape(S, B, p), J1=J1, Jinv=Jinv.reshape(S, B, p, p),
        J2=None if J2 is None else J2.reshape(S, B, p, p, p),
    )
    if single:
        out = {k: (None if v is None else v[:, 0]) for k, v in out.items()}
    return Trajectory(sched.times, subdiv=n, converged=ok, driver=path, **out)


def reversed_driver(path: GridRoughPath, S: float) -> GridRoughPath:
    """Time reversal of ``path`` restricted to ``[t_0, S]``, living again on ``[t_0, S]``."""
    sub = path if S == path.t1 else restrict(path, path.t0, S)
    return time_reverse(sub, path.t0 + S)


def inverse_flow_point(eta, path: GridRoughPath, V: VectorFieldFamily, cfg: SolveConfig = SolveConfig(),
                       S: float | None = None, subdiv: int | None = None) -> np.ndarray:
    """Invert ``xi -> x_S`` by solving along the reversed driver with the drift sign flipped."""
    S = path.t1 if S is None else float(S)
    eta = np.asarray(eta, dtype=float)
    if S == path.t0:
        return eta.copy()
    rev = reversed_driver(path, S)
    return solve_rde(eta, rev, V.with_drift_negated(), cfg, subdiv=subdiv).endpoint


FIRST_LEVEL = 3


@dataclass(frozen=True)
class TestFunction:
    """Scalar ``f`` on R^p with gradient and Hessian, used to probe remainders."""

    __test__ = False

    f: Callable
    grad: Callable
    hess: Callable

    @classmethod
    def from_sympy(cls, expr, symbols) -> "TestFunction":
        syms = list(symbols)
        g = sp.Array([sp.diff(expr, s) for s in syms])
        h = sp.Array([[sp.diff(expr, s, t) for t in syms] for s in syms])
        f_fn = _compile(sp.Array([expr]), syms)
        g_fn = _compile(g, syms)
        h_fn = _compile(h, syms)

        def f(x):
            return f_fn(x)[0]

        def grad(x):
            return np.moveaxis(g_fn(x), 0, -1)

        def hess(x):
            return np.moveaxis(h_fn(x), 0, -2)

        return cls(f, grad, hess)


def davie_remainders(states_at, path: GridRoughPath, V: VectorFieldFamily, f: TestFunction,
                     s: float, t: float) -> float:
    xs, xt = states_at(s), states_at(t)
    inc = query_increment(path, s, t)
    x = xs[None]
    vals = V.values(x)[:, 0]
    grads = V.grads(x)[:, 0]
    gf = f.grad(x)[0]
    hf = f.hess(x)[0]
    v1f = vals[1:] @ gf
    # V_j V_k f = hess f (V_j, V_k) + grad f . (grad V_k V_j)
    vvf = np.einsum("jp,pq,kq->jk", vals[1:], hf, vals[1:])
    vvf += np.einsum("p,kpq,jq->jk", gf, grads[1:], vals[1:])
    pred = v1f @ inc.level1 + np.sum(vvf * inc.level2) + (vals[0] @ gf) * inc.dt
    return float(f.f(xt[None])[0] - f.f(x)[0] - pred)


def check_davie_remainder(traj: Trajectory, path: GridRoughPath, V: VectorFieldFamily, f: TestFunction,
                          alpha: float | None = None, levels: Sequence[int] | None = None,
                          floor: float = 1e-13) -> float:
    """Fitted exponent of ``max |R_{s,t}|`` against ``t - s`` over a dyadic ladder.

    For each level ``k`` the windows ``[a + jL, a + (j+1)L]`` with ``L = (b-a)/2^k``
    are probed; remainders below ``floor`` (round-off) are discarded.  The
    default ladder starts at ``FIRST_LEVEL`` so that every maximum runs over at
    least eight windows and the estimate is read at small ``t - s``.  Returns
    ``inf`` when every remainder vanishes.  ``alpha`` is only validated; the
    caller compares the slope against ``3 alpha``.
    """
    if alpha is not None:
        validate_alpha(alpha)
    if traj.states.ndim != 2:
        raise SolverError("remainder check needs a single (unbatched) trajectory")
    a, b = float(traj.times[0]), float(traj.times[-1])
    if levels is None:
        n = path.n_cells
        top = int(np.floor(np.log2(n))) if n >= 2 else 1
        levels = range(FIRST_LEVEL, max(top, FIRST_LEVEL + 2) + 1)

    def states_at(t):
        k = int(np.searchsorted(traj.times, t - 1e-12 * (1 + abs(t))))
        if k >= traj.times.size or abs(traj.times[k] - t) > 1e-9 * (1 + abs(t)):
            raise SolverError(f"time {t} is not on the trajectory grid")
        return traj.states[k]

    lengths, worst = [], []
    for k in levels:
        L = (b - a) / 2 ** k
        r = 0.0
        for j in range(2 ** k):
            s = a + j * L
            t = b if j == 2 ** k - 1 else a + (j + 1) * L
            r = max(r, abs(davie_remainders(states_at, path, V, f, s, t)))
        lengths.append(L)
        worst.append(r)
    lengths = np.asarray(lengths)
    worst = np.asarray(worst)
    keep = worst > floor
    if not keep.any():
        return float("inf")
    if keep.sum() < 3:
        raise SolverError("fewer than three ladder levels carry a measurable remainder")
    slope, _ = np.polyfit(np.log(lengths[keep]), np.log(worst[keep]), 1)
    return float(slope)
