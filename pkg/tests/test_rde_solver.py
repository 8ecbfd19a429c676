import numpy as np
import pytest
import sympy as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from roughflow import fields
from roughflow.rde_solver import (
    ExplosionError,
    SingularJacobianError,
    SolveConfig,
    SolverError,
    TestFunction,
    VectorFieldFamily,
    check_davie_remainder,
    davie_step,
    inverse_flow_point,
    solve_batch_drivers,
    solve_rde,
    solve_with_jacobians,
    step_schedule,
)
from roughflow.rough_lift import (
    PiecewisePath,
    brownian_rough_path,
    dyadic_approx,
    lift_piecewise_linear,
    sample_brownian,
    sample_function,
    straight_path,
)
from roughflow.tensor_algebra import Increment, query_increment

CFG = SolveConfig()
X1, X2 = sp.symbols("x1:3")
F1 = TestFunction.from_sympy(sp.sin(X1) + X1 ** 2 / 2, [X1])
F2 = TestFunction.from_sympy(sp.sin(X1) + X2 ** 2 / 2, [X1, X2])


def brownian(d, m=8, seed=42):
    w = sample_brownian(d, 1.0, 14, seed)
    return dyadic_approx(w, m), brownian_rough_path(w, m)


def rotate(xi, angle):
    c, s = np.cos(angle), np.sin(angle)
    return np.stack([c * xi[0] - s * xi[1], s * xi[0] + c * xi[1]], axis=-1)


# ---------------------------------------------------------------- closed forms


@pytest.fixture(scope="module")
def closed_form_errors():
    out = {}
    w, path = brownian(1)
    tr = solve_rde([1.5], path, fields.exponential(), CFG)
    out["exponential"] = np.abs(tr.states[:, 0] - 1.5 * np.exp(w(tr.times)[:, 0])).max()
    tr = solve_rde([1.0, 0.5], path, fields.rotation(), CFG)
    out["rotation"] = np.abs(tr.states - rotate([1.0, 0.5], w(tr.times)[:, 0])).max()
    w2, path2 = brownian(2)
    tr = solve_rde([0.2, -1.0], path2, fields.additive(2), CFG)
    out["additive"] = np.abs(tr.states - ([0.2, -1.0] + w2(tr.times))).max()
    tr = solve_rde([1.0, 2.0], path, fields.drift(0.5, p=2), CFG)
    out["drift"] = np.abs(tr.states - ([1.0, 2.0] + 0.5 * tr.times[:, None])).max()
    return out


@pytest.mark.parametrize("name", ["exponential", "rotation", "additive", "drift"])
def test_closed_form_flows(closed_form_errors, name):
    assert closed_form_errors[name] <= 1e-6


def test_zero_field_is_constant():
    _, path = brownian(2)
    tr = solve_rde([0.3, 0.4], path, fields.zero(2, 2), CFG)
    assert np.all(tr.states == [0.3, 0.4])


def test_exponential_on_straight_driver():
    path = lift_piecewise_linear(straight_path([0.7]))
    tr = solve_rde([2.0], path, fields.exponential(), CFG)
    assert tr.converged
    assert abs(tr.endpoint[0] - 2.0 * np.exp(0.7)) <= 1e-9


def test_single_davie_step():
    V = fields.exponential()
    inc = Increment(np.array([0.1]), np.array([[0.005]]), 0.01)
    np.testing.assert_allclose(davie_step([2.0], inc, V), [2.0 * (1 + 0.1 + 0.005)], rtol=1e-15)


# ---------------------------------------------------------------- Jacobians


@pytest.mark.parametrize("factory", [fields.sincos, fields.damped, fields.rotation])
def test_jacobians_match_finite_differences(factory):
    V = factory()
    _, path = brownian(V.d)
    xi = np.array([0.3, -0.2])
    tr = solve_with_jacobians(xi, path, V, CFG, order=2, subdiv=64)
    h = 1e-5
    fd = np.empty((2, 2))
    fd2 = np.empty((2, 2, 2))
    for j in range(2):
        e = np.zeros(2)
        e[j] = h
        plus = solve_with_jacobians(xi + e, path, V, CFG, subdiv=64)
        minus = solve_with_jacobians(xi - e, path, V, CFG, subdiv=64)
        fd[:, j] = (plus.endpoint - minus.endpoint) / (2 * h)
        fd2[:, :, j] = (plus.J1[-1] - minus.J1[-1]) / (2 * h)
    J1, J2 = tr.J1[-1], tr.J2[-1]
    assert np.abs(fd - J1).max() <= 1e-4 * np.abs(J1).max()
    assert np.abs(fd2 - J2).max() <= 1e-4 * max(np.abs(J2).max(), 1.0)
    assert np.abs(tr.J1 @ tr.Jinv - np.eye(2)).max() <= 1e-8


def test_jacobian_closed_forms():
    w, path = brownian(1)
    tr = solve_with_jacobians([1.5], path, fields.exponential(), CFG, order=2, subdiv=64)
    np.testing.assert_allclose(tr.J1[:, 0, 0], np.exp(w(tr.times)[:, 0]), rtol=1e-6)
    np.testing.assert_allclose(tr.Jinv[:, 0, 0], np.exp(-w(tr.times)[:, 0]), rtol=1e-6)
    assert np.abs(tr.J2).max() <= 1e-9
    tr = solve_with_jacobians([1.0, 0.5], path, fields.rotation(), CFG, subdiv=64)
    R = np.stack([rotate(e, w(tr.times)[:, 0]) for e in np.eye(2)], axis=-1)
    np.testing.assert_allclose(tr.J1, R, atol=1e-6)


def test_jacobian_needs_derivatives():
    x = sp.Symbol("x1")
    V = VectorFieldFamily.from_sympy([[0], [x]], [x], order=1)
    _, path = brownian(1, m=3)
    with pytest.raises(SolverError):
        solve_with_jacobians([1.0], path, V, CFG)
    with pytest.raises(ValueError):
        solve_with_jacobians([1.0], path, fields.exponential(), CFG, order=3)


def test_singular_jacobian_is_reported():
    # V = (sin x1, 0): at x1 = pi/2 one step of dw = sqrt(2) has derivative 1 - dw^2 / 2 = 0
    V = VectorFieldFamily.from_sympy([[0, 0], [sp.sin(X1), 0]], [X1, X2])
    path = lift_piecewise_linear(straight_path([np.sqrt(2.0)]))
    with pytest.raises(SingularJacobianError):
        solve_with_jacobians([np.pi / 2, 0.0], path, V, CFG, subdiv=1)


# ---------------------------------------------------------------- remainders


@pytest.fixture(scope="module")
def level10():
    return {d: brownian(d, m=10)[1] for d in (1, 2)}


@pytest.mark.parametrize("factory,xi,f", [
    (fields.exponential, [1.0], F1),
    (fields.damped, [0.3, -0.2], F2),
    (fields.rotation, [1.0, 0.5], F2),
    (fields.sincos, [0.3, -0.2], F2),
])
def test_remainder_slope_brownian(level10, factory, xi, f):
    V = factory()
    path = level10[V.d]
    tr = solve_rde(xi, path, V, CFG, subdiv=4)
    assert check_davie_remainder(tr, path, V, f, alpha=0.4) >= 3 * 0.4 - 0.15


@pytest.mark.parametrize("factory,xi,f", [
    (fields.exponential, [1.0], F1),
    (fields.rotation, [1.0, 0.5], F2),
])
def test_remainder_slope_smooth(factory, xi, f):
    V = factory()
    path = lift_piecewise_linear(sample_function(lambda t: [np.sin(3 * t) + t * t], 1.0, 1024))
    tr = solve_rde(xi, path, V, CFG, subdiv=4)
    assert check_davie_remainder(tr, path, V, f) >= 2.85


def test_remainder_vanishes_for_additive_fields():
    _, path = brownian(2, m=6)
    V = fields.additive(2)
    tr = solve_rde([0.0, 0.0], path, V, CFG, subdiv=1)
    quad = TestFunction.from_sympy(X1 ** 2 + X1 * X2, [X1, X2])
    assert check_davie_remainder(tr, path, V, quad) == np.inf


# ---------------------------------------------------------------- flow property and inverse


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2 ** 20), st.integers(1, 63), st.integers(1, 8))
def test_flow_composition_exact(seed, k, subdiv):
    V = fields.sincos()
    w = sample_brownian(2, 1.0, 6, seed)
    path = brownian_rough_path(w, 6)
    s = path.times[k]
    xi = np.array([0.4, -0.7])
    direct = solve_rde(xi, path, V, CFG, subdiv=subdiv)
    first = solve_rde(xi, path, V, CFG, interval=(0.0, s), subdiv=subdiv)
    second = solve_rde(first.endpoint, path, V, CFG, interval=(s, 1.0), subdiv=subdiv)
    assert np.array_equal(np.concatenate([first.states, second.states[1:]]), direct.states)


def test_schedules_nest():
    _, path = brownian(2, m=5)
    whole = step_schedule(path, None, 4)
    part = step_schedule(path, (path.times[7], path.times[20]), 4)
    np.testing.assert_array_equal(part.l1, whole.l1[28:80])
    np.testing.assert_array_equal(part.l2, whole.l2[28:80])


def test_inverse_flow_round_trip():
    V = fields.sincos()
    _, path = brownian(2, m=6)
    g = np.linspace(-1.0, 1.0, 5)
    grid = np.stack(np.meshgrid(g, g), axis=-1).reshape(-1, 2)
    fwd = solve_rde(grid, path, V, CFG, subdiv=256).endpoint
    back = inverse_flow_point(fwd, path, V, CFG, subdiv=256)
    assert np.abs(back - grid).max() <= 1e-6


def test_inverse_flow_at_intermediate_time():
    V = fields.damped()
    _, path = brownian(1, m=6)
    S = path.times[40]
    xi = np.array([[0.5, 0.5], [-1.0, 2.0]])
    fwd = solve_rde(xi, path, V, CFG, interval=(0.0, S), subdiv=256).endpoint
    np.testing.assert_allclose(inverse_flow_point(fwd, path, V, CFG, S=S, subdiv=256), xi, atol=1e-6)
    np.testing.assert_array_equal(inverse_flow_point(xi, path, V, CFG, S=0.0), xi)


def test_batch_drivers_match_single_solves():
    V = fields.sincos()
    paths = [brownian(2, m=5, seed=s)[1] for s in range(3)]
    batch = solve_batch_drivers([0.1, 0.2], paths, V, CFG, subdiv=4)
    for b, path in enumerate(paths):
        single = solve_rde([0.1, 0.2], path, V, CFG, subdiv=4)
        np.testing.assert_allclose(batch.states[:, b], single.states, rtol=0, atol=1e-14)


def test_driver_continuity():
    # solutions along nearby drivers stay close
    V = fields.sincos()
    w = sample_brownian(2, 1.0, 10, 3)
    base = solve_rde([0.0, 0.0], brownian_rough_path(w, 8), V, CFG, subdiv=8).endpoint
    gaps = []
    for eps in (1e-2, 1e-3, 1e-4):
        bumped = PiecewisePath(w.times, w.values + eps * np.sin(np.pi * w.times)[:, None])
        end = solve_rde([0.0, 0.0], brownian_rough_path(bumped, 8), V, CFG, subdiv=8).endpoint
        gaps.append(np.abs(end - base).max())
    assert gaps[0] > gaps[1] > gaps[2]
    assert gaps[2] <= 1e-3


@pytest.mark.parametrize("name,xi", [
    ("exponential", [1.0]), ("rotation", [1.0, 0.5]), ("damped", [0.3, -0.2]), ("sincos", [0.3, -0.2]),
])
def test_continuity_modulus_is_linear(name, xi):
    # perturb start point and driver by delta; halving delta should halve the gap, within 20%
    V = fields.by_name(name)
    cfg = SolveConfig(refine=False)
    w = sample_brownian(V.d, 1.0, 10, 3)
    X = np.array(xi)
    base = solve_rde(X, brownian_rough_path(w, 8), V, cfg, subdiv=8).states
    gaps = []
    for delta in (1e-2, 5e-3, 2.5e-3):
        bumped = PiecewisePath(w.times, w.values + delta * np.sin(np.pi * w.times)[:, None])
        states = solve_rde(X + delta, brownian_rough_path(bumped, 8), V, cfg, subdiv=8).states
        gaps.append(np.abs(states - base).max())
    for big, small in zip(gaps, gaps[1:]):
        assert small <= 0.5 * big * 1.2


@pytest.mark.parametrize("name,xi", [("exponential", [1.0]), ("sincos", [0.3, -0.2])])
def test_richardson_differences_shrink(name, xi):
    V = fields.by_name(name)
    path = lift_piecewise_linear(sample_function(lambda t: [np.sin(3 * t) + t * t] * V.d, 1.0, 32))
    cfg = SolveConfig(refine=False)
    ends = {n: solve_rde(xi, path, V, cfg, subdiv=n).endpoint for n in (4, 8, 16, 32, 64)}
    diffs = [np.abs(ends[n] - ends[2 * n]).max() for n in (4, 8, 16, 32)]
    assert all(b < a for a, b in zip(diffs, diffs[1:]))


# ---------------------------------------------------------------- failures


def test_explosion():
    path = lift_piecewise_linear(straight_path([25.0]))
    with pytest.raises(ExplosionError):
        solve_rde([1.0], path, fields.exponential(), CFG)


def test_argument_checks():
    _, path = brownian(1, m=3)
    with pytest.raises(SolverError):
        solve_rde([1.0], path, fields.additive(2), CFG)
    with pytest.raises(SolverError):
        solve_rde([1.0, 2.0], path, fields.exponential(), CFG)
    with pytest.raises(SolverError):
        solve_rde([1.0], path, fields.exponential(), CFG, interval=(0.0, 2.0))
    with pytest.raises(SolverError):
        solve_rde([1.0], path, fields.exponential(), SolveConfig(alpha=0.45))
    with pytest.raises(ValueError):
        SolveConfig(base_subdiv=0)


def test_query_agrees_with_schedule():
    _, path = brownian(2, m=4)
    sched = step_schedule(path, None, 2)
    inc = query_increment(path, sched.times[3], sched.times[4])
    np.testing.assert_allclose(sched.l1[3], inc.level1, atol=1e-15)
    np.testing.assert_allclose(sched.l2[3], inc.level2, atol=1e-15)


def test_field_derivatives_are_consistent():
    for name in ["exponential", "rotation", "sincos", "damped"]:
        assert fields.by_name(name).check_derivatives(np.random.default_rng(0)) <= 1e-6
    with pytest.raises(ValueError):
        fields.by_name("nope")
