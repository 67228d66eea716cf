import numpy as np
import pytest

from gravistab.radial_numerics import (FOUR_PI, MonotoneMap, RadialGrid, RadialProfile, cumulative_integral,
                                       integrate_radial, make_grid, monotone_invert, poisson_residual,
                                       potential_energy, solve_radial_poisson, velocity_moment)


def uniform_ball(n=2048, r_max=1.0):
    g = make_grid(1.0, n, r_max=r_max)
    return RadialProfile(g, np.where(g.nodes <= 1.0, 1.0, 0.0), "zero")


def test_grid_invariants():
    with pytest.raises(ValueError):
        RadialGrid(np.linspace(0.1, 1.0, 32))
    with pytest.raises(ValueError):
        RadialGrid(np.linspace(0.0, 1.0, 8))
    with pytest.raises(ValueError):
        RadialGrid(np.array([0.0] + [0.5] * 20))
    g = make_grid(2.0, 2048)
    assert len(g) == 2048 and g.nodes[0] == 0.0 and g.r_max == pytest.approx(2.0)
    h = np.diff(g.nodes)
    # outer 10% of the support is refined four times
    assert h[-1] == pytest.approx(h[0] / 4.0, rel=1e-2)


def test_integrate_unit_ball_volume():
    g = make_grid(1.0, 64)
    assert integrate_radial(RadialProfile(g, np.ones(64))) == pytest.approx(FOUR_PI / 3.0, rel=1e-13)
    assert integrate_radial(RadialProfile(g, np.zeros(64))) == 0.0


def test_integrate_gaussian():
    g = RadialGrid(np.linspace(0.0, 8.0, 2048))
    p = RadialProfile(g, np.exp(-g.nodes ** 2))
    assert integrate_radial(p) == pytest.approx(np.pi ** 1.5, rel=1e-8)


def test_integrate_rejects_non_finite():
    g = make_grid(1.0, 32)
    v = np.ones(32)
    v[3] = np.nan
    with pytest.raises(ValueError, match="non-finite"):
        integrate_radial(RadialProfile(g, v))


def test_integrate_linear_and_polynomial_exact():
    g = RadialGrid(np.linspace(0.0, 1.0, 17))
    a = RadialProfile(g, g.nodes)
    b = RadialProfile(g, 1.0 - g.nodes)
    both = RadialProfile(g, 2.0 * g.nodes + 3.0 * (1.0 - g.nodes))
    assert integrate_radial(both) == pytest.approx(2.0 * integrate_radial(a) + 3.0 * integrate_radial(b), rel=1e-14)
    # weight r^3 times p = r: 4 pi int r^6 = 4 pi / 7
    assert integrate_radial(a, lambda r: r ** 3) == pytest.approx(FOUR_PI / 7.0, rel=1e-12)


def test_uniform_ball_poisson():
    phi, dphi, M = solve_radial_poisson(uniform_ball())
    assert M == pytest.approx(FOUR_PI / 3.0, abs=1e-12)
    assert phi(0.0) == pytest.approx(-0.5, abs=1e-10)
    r = np.linspace(0.0, 1.0, 101)
    assert np.max(np.abs(dphi(r) - r / 3.0)) < 1e-10
    r_out = np.array([1.5, 3.0, 10.0])
    assert np.allclose(dphi(r_out), 1.0 / (3.0 * r_out ** 2), rtol=1e-10)
    assert np.allclose(phi(r_out), -1.0 / (3.0 * r_out), rtol=1e-10)
    assert potential_energy(dphi) == pytest.approx(FOUR_PI / 15.0, abs=1e-10)


def test_poisson_zero_density():
    g = make_grid(1.0, 64)
    phi, dphi, M = solve_radial_poisson(RadialProfile(g, np.zeros(64)))
    assert M == 0.0 and np.all(phi.values == 0.0) and np.all(dphi.values == 0.0)


def test_poisson_negative_density():
    g = make_grid(1.0, 64)
    v = np.ones(64)
    v[10] = -1.0
    with pytest.raises(ValueError, match="negative density"):
        solve_radial_poisson(RadialProfile(g, v))


def test_poisson_thin_shell():
    g = RadialGrid(np.linspace(0.0, 2.0, 4001))
    a, d = 1.0, 0.01
    rho = np.where(np.abs(g.nodes - a) < d / 2, 1.0, 0.0)
    phi, dphi, M = solve_radial_poisson(RadialProfile(g, rho))
    assert np.max(np.abs(dphi(np.linspace(0.0, 0.98, 50)))) == 0.0
    r = np.linspace(1.02, 2.0, 50)
    assert np.allclose(dphi(r), M / (FOUR_PI * r ** 2), rtol=1e-10)


def test_poisson_properties_on_smooth_density():
    g = make_grid(1.0, 2048)
    rho = RadialProfile(g, (1.0 - g.nodes ** 2) ** 2)
    phi, dphi, M = solve_radial_poisson(rho)
    assert np.all(dphi.values >= 0)
    assert np.all(np.diff(phi.values) >= 0) and np.all(phi.values <= 0)
    assert phi.values[-1] * g.r_max == pytest.approx(-M / FOUR_PI, rel=1e-12)
    res = poisson_residual(phi, rho)
    assert np.max(np.abs(res[10:-10])) < 1e-6


def test_cumulative_integral():
    x = np.linspace(0.0, 2.0, 41)
    c = cumulative_integral(x, lambda s: 3.0 * s ** 2)
    assert np.allclose(c, x ** 3, atol=1e-13)


def test_monotone_invert_examples():
    ident = MonotoneMap(np.array([0.0, 1.0]), np.array([0.0, 1.0]))
    assert monotone_invert(ident, 0.3) == pytest.approx(0.3)
    const = MonotoneMap(np.array([0.0, 1.0, 2.0]), np.array([5.0, 5.0, 5.0]))
    assert monotone_invert(const, 5.0) == 0.0
    x = np.linspace(0.0, 3.0, 3001)
    sq = MonotoneMap(x, x ** 2)
    assert monotone_invert(sq, 4.0) == pytest.approx(2.0, abs=1e-12)


def test_monotone_invert_flat_spot_and_clamp():
    m = MonotoneMap(np.array([0.0, 1.0, 2.0, 3.0]), np.array([0.0, 1.0, 1.0, 2.0]))
    assert monotone_invert(m, 1.0) == 1.0
    val, flag = monotone_invert(m, 5.0, return_flag=True)
    assert val == 3.0 and flag
    with pytest.warns(RuntimeWarning):
        assert monotone_invert(m, -1.0) == 0.0
    dec = MonotoneMap(np.array([0.0, 1.0]), np.array([1.0, 0.0]), "decreasing")
    assert monotone_invert(dec, 0.25) == pytest.approx(0.75)


def test_monotone_map_validation():
    with pytest.raises(ValueError):
        MonotoneMap(np.array([0.0, 1.0]), np.array([1.0, 0.0]), "increasing")
    with pytest.raises(ValueError):
        MonotoneMap(np.array([1.0, 0.0]), np.array([0.0, 1.0]))


def test_velocity_moment_ball():
    E0 = -1.0
    for u in (0.1, 0.7, 2.0):
        val = velocity_moment(lambda E: np.where(E < E0, 1.0, 0.0), E0 - u, E0, 0)
        assert val == pytest.approx(FOUR_PI / 3.0 * (2.0 * u) ** 1.5, rel=1e-12)
        # second moment of the ball: 4 pi (2u)^(5/2) / 5
        val2 = velocity_moment(lambda E: np.where(E < E0, 1.0, 0.0), E0 - u, E0, 2)
        assert val2 == pytest.approx(FOUR_PI / 5.0 * (2.0 * u) ** 2.5, rel=1e-12)


def test_velocity_moment_edges():
    king = lambda E: np.where(E < 0.0, np.expm1(np.clip(-E, 0, None)), 0.0)
    assert velocity_moment(king, 0.5, 0.0, 0) == 0.0
    vals = [velocity_moment(king, -u, 0.0, 0) for u in (1e-2, 1e-4, 1e-6)]
    assert vals[0] > vals[1] > vals[2] > 0 and vals[2] < 1e-12
    with pytest.raises(ValueError):
        velocity_moment(king, -1.0, 0.0, -1)


def test_profile_extrapolation():
    g = make_grid(1.0, 64)
    p = RadialProfile(g, np.ones(64), "inverse_r", 2.0)
    assert p(2.0) == pytest.approx(0.25)
    assert p.derivative(2.0) == pytest.approx(-0.25)
    z = RadialProfile(g, np.ones(64), "zero")
    assert z(2.0) == 0.0
    with pytest.raises(ValueError):
        RadialProfile(g, np.ones(63))
    with pytest.raises(ValueError):
        RadialProfile(g, np.ones(64), "linear")
