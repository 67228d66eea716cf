import numpy as np
import pytest

from gravistab.functionals import (AnalyticF, GriddedF, PhaseGrid, default_phase_grid, energy_report,
                                   grid_model, model_energy, shell_potential_means)
from gravistab.radial_numerics import (FOUR_PI, RadialGrid, RadialProfile, make_grid, monotone_invert,
                                       solve_radial_poisson)
from gravistab.rearrangement import (EnergyVolumeMap, cell_energies, energy_volume, level_profile,
                                     monotonicity_chain, rearrange_by_energy, rearrangement_energy_lemma_check,
                                     reduced_functional)

BALL_VOLUME = np.pi ** 3 / (18.0 * np.sqrt(3.0))


@pytest.fixture(scope="module")
def ball_phi():
    g = make_grid(1.0, 2048)
    phi, _, _ = solve_radial_poisson(RadialProfile(g, np.ones(len(g)), "zero"))
    return phi


def decreasing_l1(a: GriddedF, b: GriddedF) -> float:
    """L1 distance between the decreasing rearrangements of two cell functions."""
    def steps(f):
        v, vol = f.values.ravel(), f.grid.volumes.ravel()
        order = np.argsort(-v, kind="stable")
        return np.cumsum(vol[order]), v[order]
    ca, va = steps(a)
    cb, vb = steps(b)
    V = np.union1d(np.concatenate([[0.0], ca]), np.concatenate([[0.0], cb]))
    mid = 0.5 * (V[1:] + V[:-1])
    fa = np.where(mid < ca[-1], va[np.clip(np.searchsorted(ca, mid), 0, va.size - 1)], 0.0)
    fb = np.where(mid < cb[-1], vb[np.clip(np.searchsorted(cb, mid), 0, vb.size - 1)], 0.0)
    return float(np.sum(np.abs(fa - fb) * np.diff(V)))


def test_energy_volume_uniform_ball(ball_phi):
    assert energy_volume(ball_phi, -1.0 / 3.0) == pytest.approx(BALL_VOLUME, abs=1e-6)
    assert energy_volume(ball_phi, -0.6) == 0.0
    assert energy_volume(ball_phi, -0.5) == 0.0
    with pytest.raises(ValueError, match="infinite volume"):
        energy_volume(ball_phi, 0.0)


def test_energy_volume_scaling(ball_phi):
    # phi(x / lam) has lam^3 times the energy volume; a phi has a^(3/2) times it at a E
    lam, a = 2.0, 0.5
    stretched = RadialProfile(RadialGrid(lam * ball_phi.grid.nodes), ball_phi.values,
                              ball_phi.extrapolation, ball_phi.decay)
    E = np.array([-0.45, -0.4, -1.0 / 3.0, -0.2])
    assert np.allclose(energy_volume(stretched, E), lam ** 3 * energy_volume(ball_phi, E), rtol=1e-8)
    deep = ball_phi.with_values(a * ball_phi.values)
    assert np.allclose(energy_volume(deep, a * E), a ** 1.5 * energy_volume(ball_phi, E), rtol=1e-8)


def test_energy_volume_map_inverse(king):
    evm = EnergyVolumeMap.build(king.phi, king.E0)
    assert np.all(np.diff(evm.table.values) > 0) and evm.table.values[0] == 0.0
    E = np.linspace(king.phi_c + 0.05, king.E0 - 0.05, 9)
    back = np.array([monotone_invert(evm.table, v) for v in energy_volume(king.phi, E)])
    assert np.max(np.abs(back - E)) < 1e-8


def test_level_profile_indicator(king):
    E1 = king.E0 - 0.4
    prof = level_profile(AnalyticF(king), 64)
    assert prof.vol(0.0) == prof.support_volume
    g = default_phase_grid(king, 32, 32, 4)
    E = cell_energies(g, shell_potential_means(g.r_edges, grid_model(king, g).rho_cells()))
    ind = GriddedF(g, np.repeat((E < E1)[:, :, None].astype(float), 4, axis=2))
    p = level_profile(ind, None)
    V = float(np.sum(ind.values * g.volumes))
    assert p.vol(0.5) == pytest.approx(V) and p.vol(1.0) == pytest.approx(V) and p.vol(1.01) == 0.0
    assert p.support_volume == pytest.approx(V)


def test_level_profile_polytrope(poly1):
    prof = level_profile(AnalyticF(poly1), 256)
    assert np.all(np.diff(prof.volumes) > 0)  # levels descend, volumes grow
    assert prof.mass == pytest.approx(poly1.M, rel=1e-12)
    # the top level set is a single point and the cumulative mass ends near M
    assert prof.volumes[0] == 0.0
    assert prof.cum_mass[-1] == pytest.approx(poly1.M, rel=1e-5)
    support = energy_volume(poly1.phi, poly1.E0 * (1 - 1e-12))
    assert prof.support_volume == pytest.approx(support, rel=1e-9)


def test_level_profile_gridded_matches_analytic(king):
    g = default_phase_grid(king)
    pa = level_profile(AnalyticF(king), 64)
    pg = level_profile(grid_model(king, g), 64)
    assert pg.mass == pytest.approx(pa.mass, rel=1e-3)
    # the layer-cake mass function is insensitive to cell averaging
    V = np.linspace(1.0, 50.0, 12)
    assert np.allclose(pg.mass_below_volume(V), pa.mass_below_volume(V), rtol=3e-3)


@pytest.mark.parametrize("name", ["king", "poly1"])
def test_rearrangement_fixed_point(name, request):
    m = request.getfixturevalue(name)
    g = default_phase_grid(m)
    f0 = grid_model(m, g)
    fh = rearrange_by_energy(f0, m.phi)
    assert np.sum(np.abs(fh.values - f0.values) * g.volumes) / f0.mass < 2e-3


def test_rearrangement_preserves_levels(king, rng):
    g = default_phase_grid(king, 24, 24, 4)
    f = GriddedF(g, rng.uniform(0.0, 1.0, g.shape))
    means = shell_potential_means(g.r_edges, grid_model(king, g).rho_cells())
    fh = rearrange_by_energy(f, means)
    assert fh.mass == pytest.approx(f.mass, rel=1e-12)
    # Casimirs agree up to the mixing of one boundary cell per level
    for C in (lambda t: t ** 2, lambda t: np.sqrt(t)):
        a = np.sum(C(f.values) * g.volumes)
        b = np.sum(C(fh.values) * g.volumes)
        assert b == pytest.approx(a, rel=0.05)
    # output is a non-increasing function of the cell energy
    E = cell_energies(g, means)
    order = np.argsort(E.ravel(), kind="stable")
    vals = fh.values[:, :, 0].ravel()[order]
    assert np.all(np.diff(vals) <= 1e-12 * vals.max())


def test_rearrangement_of_indicator(king, rng):
    g = default_phase_grid(king, 24, 24, 4)
    mask = rng.uniform(size=g.shape) < 0.3
    f = GriddedF(g, mask.astype(float))
    means = shell_potential_means(g.r_edges, grid_model(king, g).rho_cells())
    fh = rearrange_by_energy(f, means)
    V = float(np.sum(mask * g.volumes))
    E = cell_energies(g, means)
    vals = fh.values[:, :, 0]
    # full cells below E_V, empty above, at most one partially filled cell
    assert np.sum((vals > 1e-12) & (vals < 1 - 1e-12)) <= 1
    full = vals > 1 - 1e-12
    if np.any(full) and np.any(~full):
        assert E[full].max() <= E[~full].min()
    assert float(np.sum(fh.values * g.volumes)) == pytest.approx(V, rel=1e-12)


def test_energy_lemma(king, rng):
    g = default_phase_grid(king, 24, 24, 4)
    f0 = grid_model(king, g)
    means = shell_potential_means(g.r_edges, f0.rho_cells())
    lhs, rhs = rearrangement_energy_lemma_check(rearrange_by_energy(f0, means), means)
    assert lhs == pytest.approx(rhs, rel=1e-12)
    zero = GriddedF(g, np.zeros(g.shape))
    assert rearrangement_energy_lemma_check(zero, means) == (0.0, 0.0)
    # a high-energy shell indicator rearranges to low energies
    E = cell_energies(g, means)
    shell = (E > np.quantile(E, 0.6)) & (E < np.quantile(E, 0.7))
    f = GriddedF(g, np.repeat(shell[:, :, None], 4, axis=2).astype(float))
    lhs, rhs = rearrangement_energy_lemma_check(f, means)
    assert lhs < rhs - 1e-3 * abs(rhs)
    for _ in range(10):
        f = GriddedF(g, rng.uniform(0.0, 1.0, g.shape))
        lhs, rhs = rearrangement_energy_lemma_check(f, means)
        assert lhs <= rhs + 1e-12 * abs(rhs)


def test_reduced_functional_self_consistent(king, poly1):
    for m in (king, poly1):
        levels = level_profile(AnalyticF(m), 512)
        J, parts = reduced_functional(levels, m.phi, m.dphi, return_parts=True)
        H0 = model_energy(m).H
        assert parts["mismatch"] < 1e-6 * abs(H0)
        assert J == pytest.approx(H0, rel=1e-4)


def test_reduced_functional_local_minimum(king):
    levels = level_profile(AnalyticF(king), 512)
    J0 = reduced_functional(levels, king.phi, king.dphi)
    r = king.grid.nodes
    bump = np.exp(-((r - 0.5 * king.R) / (0.2 * king.R)) ** 2)
    for eps in (-0.02, -0.01, 0.01, 0.02):
        trial = king.phi.with_values(king.phi.values + eps * bump)
        assert reduced_functional(levels, trial) - J0 >= -1e-6 * abs(J0)


def test_chain_fixed_point(king):
    g = default_phase_grid(king, 32, 32, 4)
    f0 = grid_model(king, g)
    H, J, Hh = monotonicity_chain(f0)
    assert J <= H + 1e-6 * abs(H) and Hh <= J + 1e-6 * abs(H)
    assert H - Hh < 5e-3 * abs(H)


def test_chain_strict_for_swapped_cells(king):
    g = default_phase_grid(king, 32, 32, 4)
    f0 = grid_model(king, g)
    means = shell_potential_means(g.r_edges, f0.rho_cells())
    E = cell_energies(g, means)
    vals = f0.values.copy()
    # depleted core and a dense high-energy band: far from monotone in E
    low = E <= np.quantile(E[f0.values[:, :, 0] > 0], 0.05)
    vals[low] *= 0.3
    band = (E > king.E0 - 0.1) & (E < king.E0)
    vals[band] += 0.5 * vals.max()
    f = GriddedF(g, vals)
    H, J, Hh = monotonicity_chain(f)
    assert H > J > Hh
    assert H - Hh > 1e-3 * abs(H)


@pytest.mark.parametrize("gamma", [0.8, 1.3])
def test_chain_scaled(king, gamma):
    g = default_phase_grid(king, 32, 32, 4)
    f = GriddedF(g, gamma * grid_model(king, g).values)
    H, J, Hh = monotonicity_chain(f)
    assert J <= H + 1e-6 * abs(H) and Hh <= J + 1e-6 * abs(H)


def test_chain_random(king, rng):
    g = default_phase_grid(king, 24, 24, 4)
    f0 = grid_model(king, g)
    for _ in range(5):
        f = GriddedF(g, f0.values * (1.0 + 0.4 * rng.uniform(-1.0, 1.0, g.shape)))
        H, J, Hh = monotonicity_chain(f)
        assert J <= H + 1e-6 * abs(H) and Hh <= J + 1e-6 * abs(H)


def test_symmetric_rearrangement_contractive(king, rng):
    g = default_phase_grid(king, 24, 24, 4)
    f0 = grid_model(king, g)
    for _ in range(5):
        f = GriddedF(g, f0.values * rng.uniform(0.5, 1.5, g.shape))
        direct = float(np.sum(np.abs(f.values - f0.values) * g.volumes))
        assert decreasing_l1(f, f0) <= direct * (1 + 1e-12)
