import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from roughflow.rough_lift import (
    MAX_LEVEL,
    CameronMartinPath,
    PiecewisePath,
    brownian_rough_path,
    cameron_martin_lift,
    dyadic_approx,
    lift_piecewise_linear,
    read_path_csv,
    sample_brownian,
    sample_function,
    straight_path,
    write_path_csv,
)
from roughflow.tensor_algebra import (
    ATOMIC,
    RoughPathError,
    check_shuffle,
    max_chen_residual,
    max_shuffle_residual,
    query_increment,
    rp_distance,
    time_reverse,
)


def midpoint_level2(w: PiecewisePath, s, t, n=10_000):
    """Composite midpoint rule for the level-2 integral, with the path knots added to the grid."""
    u = np.linspace(s, t, n + 1)
    u = np.union1d(u, w.times[(w.times > s) & (w.times < t)])
    x = w(u)
    dx = np.diff(x, axis=0)
    mid = w(0.5 * (u[:-1] + u[1:])) - x[0]
    return x[-1] - x[0], np.einsum("ni,nj->ij", mid, dx)


# ---------------------------------------------------------------- lifts


def test_single_segment_area():
    delta = np.array([0.3, -1.1, 2.0])
    p = lift_piecewise_linear(straight_path(delta))
    np.testing.assert_array_equal(p.level2[0], 0.5 * np.outer(delta, delta))
    assert p.cell_kind == ("linear",)
    assert p.geometric


def test_l_path_area():
    w = PiecewisePath([0.0, 1.0, 2.0], [[0.0, 0.0], [1.0, 0.0], [1.0, 1.0]])
    inc = query_increment(lift_piecewise_linear(w), 0.0, 2.0)
    np.testing.assert_allclose(inc.level2, [[0.5, 1.0], [0.0, 0.5]], atol=1e-15)


@pytest.mark.parametrize("coeffs", [
    [(1.0, 0.0, 0.0), (0.0, 1.0, 0.0)],
    [(0.5, -2.0, 1.0), (0.0, 3.0, -1.5)],
    [(2.0, 1.0, -3.0), (-1.0, 0.0, 4.0)],
])
def test_lift_matches_midpoint_quadrature(coeffs):
    # polynomial path in R^2 sampled on 17 knots, then treated as piecewise linear
    def fn(t):
        return [a * t + b * t * t + c * t ** 3 for a, b, c in coeffs]

    w = sample_function(fn, 1.0, 17)
    p = lift_piecewise_linear(w)
    for s, t in [(0.0, 1.0), (0.13, 0.71), (0.5, 0.5 + 1 / 17)]:
        l1, l2 = midpoint_level2(w, s, t)
        inc = query_increment(p, s, t)
        np.testing.assert_allclose(inc.level1, l1, atol=1e-12)
        np.testing.assert_allclose(inc.level2, l2, atol=1e-8)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 4), st.integers(1, 40))
def test_lifts_are_geometric(seed, d, n):
    rng = np.random.default_rng(seed)
    times = np.concatenate([[0.0], np.cumsum(rng.uniform(0.01, 1.0, n))])
    w = PiecewisePath.from_samples(times, rng.standard_normal((n + 1, d)))
    p = lift_piecewise_linear(w)
    assert max_shuffle_residual(p) <= 1e-12
    assert max_chen_residual(p) <= 1e-12
    T = times[-1]
    a, b = time_reverse(p, T), lift_piecewise_linear(w.reversed())
    np.testing.assert_allclose(a.times, b.times, atol=1e-12 * T)
    np.testing.assert_allclose(a.level1, b.level1, atol=1e-12)
    np.testing.assert_allclose(a.level2, b.level2, atol=1e-12)


def test_nonincreasing_times_rejected():
    with pytest.raises(RoughPathError):
        PiecewisePath([0.0, 1.0, 1.0], [[0.0], [1.0], [2.0]])
    with pytest.raises(RoughPathError):
        PiecewisePath([0.0, 1.0], [[1.0], [2.0]])


# ---------------------------------------------------------------- dyadic approximation


def test_dyadic_approx_examples():
    w = sample_brownian(2, 1.0, 5, 9)
    same = dyadic_approx(w, 5)
    np.testing.assert_array_equal(same.times, w.times)
    np.testing.assert_array_equal(same.values, w.values)
    lin = sample_function(lambda t: t, 1.0, 64)
    for m in range(7):
        a = dyadic_approx(lin, m)
        np.testing.assert_allclose(a(np.linspace(0, 1, 101))[:, 0], np.linspace(0, 1, 101), atol=1e-15)


@pytest.mark.parametrize("m", range(0, 8))
def test_dyadic_consistency(m):
    w = sample_brownian(3, 2.0, 10, 4)
    direct = dyadic_approx(w, m)
    nested = dyadic_approx(dyadic_approx(w, m + 1), m)
    np.testing.assert_array_equal(direct.times, nested.times)
    np.testing.assert_array_equal(direct.values, nested.values)
    fine = dyadic_approx(w, m + 1)
    np.testing.assert_array_equal(fine(direct.times), direct.values)


def test_dyadic_needs_fine_enough_samples():
    w = sample_brownian(1, 1.0, 3, 0)
    with pytest.raises(RoughPathError):
        dyadic_approx(w, 4)
    with pytest.raises(RoughPathError):
        dyadic_approx(w, -1)


# ---------------------------------------------------------------- Brownian sampling


def test_brownian_is_deterministic():
    a = sample_brownian(2, 1.0, 8, 123)
    b = sample_brownian(2, 1.0, 8, 123)
    assert a.values.tobytes() == b.values.tobytes()
    assert a.values[0].tolist() == [0.0, 0.0]
    c = sample_brownian(2, 1.0, 8, 124)
    assert not np.array_equal(a.values, c.values)


def test_brownian_argument_guards():
    for bad in [dict(d=0, T=1.0, M=3), dict(d=1, T=1.0, M=MAX_LEVEL + 1), dict(d=1, T=0.0, M=3),
                dict(d=1, T=1.0, M=-1)]:
        with pytest.raises(RoughPathError):
            sample_brownian(seed=0, **bad)


@pytest.fixture(scope="module")
def brownian_ensemble():
    d, T = 2, 1.5
    ends, cells = [], []
    for seed in range(10_000):
        w = sample_brownian(d, T, 3, seed)
        ends.append(w.values[-1])
        cells.append(np.diff(w.values, axis=0))
    return d, T, np.array(ends), np.array(cells)


def test_brownian_terminal_variance(brownian_ensemble):
    d, T, ends, _ = brownian_ensemble
    total = np.sum(np.mean(ends ** 2, axis=0))
    assert abs(total / (d * T) - 1) <= 0.05


def test_brownian_disjoint_increments_uncorrelated(brownian_ensemble):
    _, _, _, cells = brownian_ensemble
    flat = cells.reshape(cells.shape[0], -1)
    corr = np.corrcoef(flat, rowvar=False)
    off = corr - np.diag(np.diag(corr))
    assert np.abs(off).max() < 0.05


def test_brownian_level_zero():
    w = sample_brownian(2, 1.0, 6, 2)
    p = brownian_rough_path(w, 0)
    assert p.n_cells == 1
    np.testing.assert_allclose(p.level2[0], 0.5 * np.outer(w.values[-1], w.values[-1]), rtol=1e-15)


def test_brownian_atomic_option():
    w = sample_brownian(1, 1.0, 6, 2)
    p = brownian_rough_path(w, 3, atomic=True)
    assert set(p.cell_kind) == {ATOMIC}
    with pytest.raises(RoughPathError):
        query_increment(p, 0.01, 0.5)


def test_levy_area_refinement_is_nontrivial():
    w = sample_brownian(2, 1.0, 14, 42)
    areas = []
    for m in (6, 7):
        l2 = query_increment(brownian_rough_path(w, m), 0.0, 1.0).level2
        areas.append(0.5 * (l2 - l2.T))
    assert np.abs(areas[0] - areas[1]).max() > 0


# d_alpha(W(m), W(m+1)), seed 42, M = 14, d = 1, alpha = 0.4, m = 6..12
CAUCHY_TREND = [
    1.1869128647357423, 1.8885953905197428, 1.1307863857187788, 1.4914193937811056,
    1.292406713475428, 1.5974234758700327, 1.3119614942908895,
]


@pytest.fixture(scope="module")
def cauchy_distances():
    w = sample_brownian(1, 1.0, 14, 42)
    paths = {m: brownian_rough_path(w, m) for m in range(6, 14)}
    return [rp_distance(paths[m], paths[m + 1]) for m in range(6, 13)]


def test_cauchy_trend_regression(cauchy_distances):
    np.testing.assert_allclose(cauchy_distances, CAUCHY_TREND, rtol=1e-10)


@pytest.mark.xfail(strict=True, reason=(
    "at alpha = 0.4 the finest-scale term of d_alpha scales like 2^(-m/10) sqrt(m), "
    "flat over m = 6..12, so the seed-42 sequence is not monotone"
))
def test_cauchy_trend_decreasing(cauchy_distances):
    assert np.all(np.diff(cauchy_distances) < 0)


# ---------------------------------------------------------------- Cameron-Martin paths


def test_cameron_martin_examples():
    zero = CameronMartinPath.from_knots([0.0, 1.0], [[0.0], [0.0]])
    assert zero.hnorm_sq == 0.0
    assert np.all(cameron_martin_lift(zero).level2 == 0)
    lin = CameronMartinPath.from_knots([0.0, 1.0], [[0.0], [1.0]])
    assert lin.hnorm_sq == 1.0
    assert lin.rate == 0.5
    kink = CameronMartinPath.from_knots([0.0, 0.5, 1.0], [[0.0], [1.0], [1.0]])
    assert kink.hnorm_sq == 2.0
    np.testing.assert_array_equal(kink.derivative()[:, 0], [2.0, 0.0])


def test_cameron_martin_lift_is_plain_lift():
    h = CameronMartinPath(sample_function(lambda t: [np.sin(t), t], 1.0, 9))
    a, b = cameron_martin_lift(h), lift_piecewise_linear(h.path)
    np.testing.assert_array_equal(a.level2, b.level2)
    assert check_shuffle(query_increment(a, 0.0, 1.0)) <= 1e-15


# ---------------------------------------------------------------- CSV


def test_path_csv_round_trip(tmp_path):
    w = sample_brownian(3, 1.0, 6, 5)
    dest = tmp_path / "w.csv"
    write_path_csv(w, dest)
    assert dest.read_text().splitlines()[0] == "t,w1,w2,w3"
    back = read_path_csv(dest)
    assert back.values.tobytes() == w.values.tobytes()
    assert back.times.tobytes() == w.times.tobytes()


def test_path_csv_bad_header(tmp_path):
    dest = tmp_path / "bad.csv"
    dest.write_text("time,x\n0,0\n1,1\n")
    with pytest.raises(RoughPathError):
        read_path_csv(dest)


def test_path_csv_anchor(tmp_path):
    dest = tmp_path / "h.csv"
    dest.write_text("t,w1\n0,2\n1,3\n")
    with pytest.raises(RoughPathError):
        read_path_csv(dest)
    assert read_path_csv(dest, anchor=True).values[:, 0].tolist() == [0.0, 1.0]
