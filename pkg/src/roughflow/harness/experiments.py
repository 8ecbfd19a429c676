"""Experiment drivers: Wong-Zakai convergence, skeleton solves and small-noise concentration."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.integrate import solve_ivp

from .. import foliated as fol
from ..fields import by_name
from ..rde_solver import (
    SolveConfig,
    SolverError,
    VectorFieldFamily,
    inverse_flow_point,
    solve_batch_drivers,
    solve_rde,
)
from ..rough_lift import (
    CameronMartinPath,
    PiecewisePath,
    brownian_rough_path,
    cameron_martin_lift,
    dyadic_approx,
    lift_piecewise_linear,
    read_path_csv,
    sample_brownian,
)
from ..tensor_algebra import dilate, rp_distance
from .config import ExperimentConfig

# ------------------------------------------------------------------ building blocks


def field_family(cfg: ExperimentConfig) -> VectorFieldFamily:
    if cfg.fields in ("zero", "drift"):
        return by_name(cfg.fields, p=cfg.p, d=cfg.d)
    if cfg.fields == "additive":
        return by_name(cfg.fields, d=cfg.d)
    return by_name(cfg.fields)


def start_point(cfg: ExperimentConfig, p: int) -> np.ndarray:
    xi = np.asarray(cfg.xi, dtype=float)
    if xi.size == 1:
        return np.full(p, xi[0])
    if xi.size != p:
        raise SolverError(f"xi has {xi.size} coordinates, the field family lives on R^{p}")
    return xi


def start_grid(cfg: ExperimentConfig, p: int) -> np.ndarray:
    """``grid`` points per axis around ``xi`` with spacing 1/2 (first two axes only)."""
    xi = start_point(cfg, p)
    offs = 0.5 * (np.arange(cfg.grid) - (cfg.grid - 1) / 2)
    axes = [offs] * min(p, 2) + [np.zeros(1)] * max(p - 2, 0)
    mesh = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, p)
    return xi + mesh


def transversal(cfg: ExperimentConfig) -> fol.Transversal:
    if cfg.transversal == "circle":
        return fol.Circle(rotation=cfg.rotation)
    if cfg.transversal == "cantor":
        return fol.CantorSet(depth=cfg.depth)
    return fol.FiniteSet(perm=tuple(cfg.perm))


def leaf_space(cfg: ExperimentConfig) -> fol.SuspensionSpace:
    return fol.SuspensionSpace(transversal(cfg), p=cfg.p)


def leaf_family(cfg: ExperimentConfig, space: fol.SuspensionSpace, d: int = 1) -> fol.LeafwiseVectorFieldFamily:
    if cfg.leaf_field == "suspended":
        return fol.suspended_field(space, d=d)
    if d != 1:
        raise SolverError(f"leaf field {cfg.leaf_field!r} has one driver, the experiment needs {d}")
    return fol.leaf_field_by_name(cfg.leaf_field, space)


def transversal_grid(T: fol.Transversal, n: int) -> list:
    """``n`` deterministic, well-spread transversal points."""
    if isinstance(T, fol.Circle):
        return [T.point(k / n) for k in range(n)]
    if isinstance(T, fol.CantorSet):
        # bit-reversed counter: consecutive labels differ in the first symbols
        return [sum(((k >> b) & 1) << b for b in range(T.depth)) for k in range(n)]
    return [k % len(T.perm) for k in range(n)]


def leaf_points(cfg: ExperimentConfig, space: fol.SuspensionSpace) -> list:
    ys = (np.arange(cfg.grid) + 0.5) / cfg.grid
    return fol.leaf_grid(space, ys, transversal_grid(space.transversal, cfg.grid))


def derived_seeds(seed: int, n: int) -> list[int]:
    """Independent child seeds for Monte-Carlo sweeps."""
    return [int(np.random.SeedSequence([seed, k]).generate_state(1, dtype=np.uint64)[0]) for k in range(n)]


def solve_config(cfg: ExperimentConfig, **kw) -> SolveConfig:
    return SolveConfig(alpha=cfg.alpha, **kw)


def load_h(cfg: ExperimentConfig, d: int) -> CameronMartinPath:
    """``h`` from ``h_file`` or the straight line ``t h_slope``."""
    if cfg.h_file:
        return CameronMartinPath(read_path_csv(cfg.h_file, anchor=True))
    slope = np.asarray(cfg.h_slope, dtype=float)
    if slope.size == 1:
        slope = np.full(d, slope[0])
    return CameronMartinPath(PiecewisePath([0.0, cfg.T], np.stack([np.zeros(d), slope * cfg.T])))


def _match(coarse: np.ndarray, fine: np.ndarray) -> np.ndarray:
    idx = np.searchsorted(fine, coarse)
    idx = np.clip(idx, 0, fine.size - 1)
    lo = np.clip(idx - 1, 0, None)
    idx = np.where(np.abs(fine[lo] - coarse) < np.abs(fine[idx] - coarse), lo, idx)
    if np.any(np.abs(fine[idx] - coarse) > 1e-12 * (1 + abs(fine[-1]))):
        raise SolverError("time grids are not nested")
    return idx


def _knot_rows(traj: fol.FoliatedTrajectory, knots: np.ndarray) -> np.ndarray:
    """Index of the knot sample (the last sample at each knot time)."""
    idx = np.searchsorted(traj.times, knots, side="right") - 1
    if np.any(np.abs(traj.times[idx] - knots) > 1e-12 * (1 + abs(knots[-1]))):
        raise SolverError("knot missing from foliated trajectory")
    return idx


# ------------------------------------------------------------------ Wong-Zakai


@dataclass(frozen=True)
class ConvergenceRow:
    m: int
    d_alpha: float
    sol_sup_dist: float
    driver_sup_dist: float
    foliated_sup_dist: float
    roundtrip: float
    error: Optional[str] = None


@dataclass(frozen=True)
class ConvergenceTable:
    seed: int
    field: str
    leaf_field: str
    rows: list = field(default_factory=list)

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.rows], dtype=float)

    def strictly_decreasing(self, name: str = "sol_sup_dist") -> bool:
        col = self.column(name)
        return bool(np.all(np.isfinite(col)) and np.all(np.diff(col) < 0))

    def to_dict(self) -> dict:
        return {
            "seed": self.seed, "field": self.field, "leaf_field": self.leaf_field,
            "rows": [r.__dict__ for r in self.rows],
        }


# (field, driver dimension, start point); the last three are degenerate members
# with constant noise coefficients or no noise at all
WZ_SUITE = (
    ("exponential", 1, (1.0,)),
    ("rotation", 1, (1.0, 0.5)),
    ("damped", 1, (0.3, -0.2)),
    ("sincos", 2, (0.3, -0.2)),
    ("additive", 1, (0.0,)),
    ("additive", 2, (0.0, 0.0)),
    ("drift", 1, (0.0,)),
)


def suite_configs(seed: int = 42, **kw):
    """One :class:`ExperimentConfig` per entry of :data:`WZ_SUITE`."""
    for name, d, xi in WZ_SUITE:
        yield ExperimentConfig(seed=seed, fields=name, d=d, p=len(xi), xi=xi, **kw)


CSV_COLUMNS = ("m", "d_alpha", "sol_sup_dist", "driver_sup_dist", "foliated_sup_dist", "roundtrip")


def wong_zakai_experiment(cfg: ExperimentConfig, foliated: bool = True) -> ConvergenceTable:
    """Distances between solutions driven by consecutive dyadic levels ``W(m)``, ``W(m+1)``.

    Every level is solved with ``cfg.subdiv`` steps per cell, so the level-``m``
    step grid is contained in the level-``m+1`` grid and distances are sup-norms
    over the coarse grid, which includes the level-``m+1`` knots when ``subdiv >= 2``.
    """
    V = field_family(cfg)
    d = V.d
    w = sample_brownian(d, cfg.T, cfg.M, cfg.seed)
    X = start_grid(cfg, V.p)
    scfg = solve_config(cfg)
    levels = range(cfg.m_lo, cfg.m_hi + 2)
    paths = {m: brownian_rough_path(w, m, cfg.alpha) for m in levels}
    sols, errs = {}, {}
    for m in levels:
        try:
            sols[m] = solve_rde(X, paths[m], V, scfg, subdiv=cfg.subdiv)
        except SolverError as exc:
            errs[m] = f"{type(exc).__name__}: {exc}"
    fsols = {}
    if foliated:
        space = leaf_space(cfg)
        LV = leaf_family(cfg, space, d)
        pts = leaf_points(cfg, space)
        for m in levels:
            try:
                fsols[m] = fol.solve_rde_foliated_batch(pts, paths[m], LV, scfg, subdiv=cfg.subdiv)
            except SolverError as exc:
                errs.setdefault(m, f"{type(exc).__name__}: {exc}")
    rows = []
    for m in range(cfg.m_lo, cfg.m_hi + 1):
        dist = rp_distance(paths[m], paths[m + 1])
        err = errs.get(m) or errs.get(m + 1)
        if err:
            rows.append(ConvergenceRow(m, dist, math.nan, math.nan, math.nan, math.nan, err))
            continue
        a, b = sols[m], sols[m + 1]
        idx = _match(a.times, b.times)
        sol = float(np.max(np.abs(a.states - b.states[idx])))
        wa, wb = dyadic_approx(w, m), dyadic_approx(w, m + 1)
        drv = float(np.max(np.abs(wa(a.times) - wb(a.times))))
        back = inverse_flow_point(a.endpoint, paths[m], V, scfg, subdiv=cfg.subdiv)
        rt = float(np.max(np.abs(back - X)))
        fd = math.nan
        if foliated:
            fd = 0.0
            for ta, tb in zip(fsols[m], fsols[m + 1]):
                ia, ib = _knot_rows(ta, a.times), _knot_rows(tb, a.times)
                for i, j in zip(ia, ib):
                    fd = max(fd, space.distance(ta.point(i), tb.point(j)))
        rows.append(ConvergenceRow(m, dist, sol, drv, fd, rt))
    return ConvergenceTable(cfg.seed, V.name, cfg.leaf_field if foliated else "", rows)


# ------------------------------------------------------------------ skeletons


def ode_oracle(V: VectorFieldFamily, h: CameronMartinPath, xi, t_eval: np.ndarray) -> np.ndarray:
    """Independent high-order ODE solve of ``dx = V_0 dt + sum_i V_i(x) h'^i dt`` at ``t_eval``."""
    knots = h.path.times
    slopes = h.derivative()
    x = np.asarray(xi, dtype=float)
    out = np.empty((t_eval.size, V.p))
    for k in range(knots.size - 1):
        a, b = knots[k], knots[k + 1]
        coef = np.concatenate([[1.0], slopes[k]])

        def rhs(_t, y, coef=coef):
            return np.tensordot(coef, V.values(y[None])[:, 0], axes=1)

        sel = (t_eval >= a) & (t_eval <= b)
        ts = np.union1d(t_eval[sel], [b])
        sol = solve_ivp(rhs, (a, b), x, method="DOP853", rtol=1e-13, atol=1e-13, t_eval=ts)
        if not sol.success:
            raise SolverError(f"ODE oracle failed: {sol.message}")
        ys = sol.y.T
        if sel.any():
            out[sel] = ys[np.searchsorted(ts, t_eval[sel])]
        x = ys[-1]
    return out


def support_skeleton_demo(cfg: ExperimentConfig, h: CameronMartinPath | None = None,
                          n_brownian: int = 32) -> dict:
    """Skeleton solve vs ODE oracle, Brownian approach to the skeleton, foliated skeleton winding."""
    V = field_family(cfg)
    h = load_h(cfg, V.d) if h is None else h
    if h.path.dim != V.d:
        raise SolverError(f"h has dimension {h.path.dim}, the field family has {V.d} drivers")
    xi = start_point(cfg, V.p)
    scfg = solve_config(cfg)
    traj = solve_rde(xi, cameron_martin_lift(h, cfg.alpha), V, scfg)
    ref = ode_oracle(V, h, xi, traj.times)
    ode_dist = float(np.max(np.abs(traj.states - ref)))

    seeds = derived_seeds(cfg.seed, n_brownian)
    paths = [brownian_rough_path(sample_brownian(V.d, h.path.T, cfg.m, s), cfg.m, cfg.alpha) for s in seeds]
    bt = solve_batch_drivers(xi, paths, V, scfg, subdiv=cfg.subdiv)
    skel = ode_oracle(V, h, xi, bt.times + h.path.times[0])
    dists = np.max(np.abs(bt.states - skel[:, None, :]), axis=(0, 2))
    best = int(np.argmin(dists))

    space = leaf_space(cfg)
    unit = fol.unit_field(space)
    h1 = CameronMartinPath(PiecewisePath(h.path.times, h.path.values[:, :1]))
    m0 = fol.LeafPoint([cfg.y0] + [0.0] * (cfg.p - 1), transversal_grid(space.transversal, 1)[0])
    ftraj = fol.solve_rde_foliated(m0, cameron_martin_lift(h1, cfg.alpha), unit, scfg)
    expected = math.floor(cfg.y0 + h1.path.values[-1, 0])
    return {
        "schema_version": "1.0",
        "field": V.name,
        "hnorm_sq": h.hnorm_sq,
        "xi": xi,
        "skeleton_endpoint": traj.endpoint,
        "ode_endpoint": ref[-1],
        "ode_sup_dist": ode_dist,
        "subdiv": traj.subdiv,
        "converged": traj.converged,
        "brownian_level": cfg.m,
        "brownian_seeds": len(seeds),
        "min_brownian_dist": float(dists[best]),
        "closest_seed_index": best,
        "foliated_winding": int(ftraj.endpoint.winding),
        "foliated_expected_winding": expected,
        "foliated_leaf_ok": fol.leaf_check(ftraj).ok,
    }


# ------------------------------------------------------------------ small noise


def ldp_experiment(cfg: ExperimentConfig, h: CameronMartinPath | None = None) -> dict:
    """Rate ``|h|^2 / 2`` and the fraction ``q(eps)`` of seeds whose ``eps``-scaled solve strays by more than ``delta``.

    Drivers are shared across the ``eps`` ladder (common random numbers) and
    the reference is the drift-only flow on the same step grid.
    """
    V = field_family(cfg)
    h = load_h(cfg, V.d) if h is None else h
    xi = start_point(cfg, V.p)
    scfg = solve_config(cfg)
    seeds = derived_seeds(cfg.seed, cfg.n_seeds)
    base = [brownian_rough_path(sample_brownian(V.d, cfg.T, cfg.m, s), cfg.m, cfg.alpha) for s in seeds]
    zero = lift_piecewise_linear(PiecewisePath(base[0].times, np.zeros((base[0].times.size, V.d))), cfg.alpha)
    ref = solve_rde(xi, zero, V, scfg, subdiv=cfg.subdiv).states
    qs = []
    for eps in cfg.epsilons:
        tr = solve_batch_drivers(xi, [dilate(P, eps) for P in base], V, scfg, subdiv=cfg.subdiv)
        sup = np.max(np.abs(tr.states - ref[:, None, :]), axis=(0, 2))
        qs.append(float(np.mean(sup > cfg.delta)))
    slack = 2.0 / math.sqrt(cfg.n_seeds)
    monotone = all(b <= a + slack for a, b in zip(qs, qs[1:]))
    return {
        "schema_version": "1.0",
        "field": V.name,
        "seed": cfg.seed,
        "rate": h.rate,
        "hnorm_sq": h.hnorm_sq,
        "epsilons": list(cfg.epsilons),
        "delta": cfg.delta,
        "n_seeds": cfg.n_seeds,
        "q": qs,
        "slack": slack,
        "nonincreasing": monotone,
        "note": "small-noise concentration, not an estimate of the rate constant",
    }


# ------------------------------------------------------------------ foliated


def foliated_demo(cfg: ExperimentConfig):
    """One foliated solve from ``(y0, first grid transversal point)`` with the level-``m`` Brownian driver."""
    space = leaf_space(cfg)
    LV = leaf_family(cfg, space, cfg.d)
    w = sample_brownian(LV.d, cfg.T, cfg.m, cfg.seed)
    path = brownian_rough_path(w, cfg.m, cfg.alpha)
    m0 = fol.LeafPoint([cfg.y0] + [0.0] * (cfg.p - 1), transversal_grid(space.transversal, 1)[0])
    traj = fol.solve_rde_foliated(m0, path, LV, solve_config(cfg), subdiv=cfg.subdiv)
    report = fol.leaf_check(traj)
    return traj, path, report


def flow_experiment(cfg: ExperimentConfig, n_times: int = 3):
    space = leaf_space(cfg)
    LV = leaf_family(cfg, space, cfg.d)
    w = sample_brownian(LV.d, cfg.T, cfg.m, cfg.seed)
    path = brownian_rough_path(w, cfg.m, cfg.alpha)
    times = [path.times[round(k * path.n_cells / (n_times - 1))] for k in range(n_times)]
    samples = fol.flow_grid(leaf_points(cfg, space), path, LV, solve_config(cfg), times, subdiv=cfg.subdiv)
    return samples, path, space
