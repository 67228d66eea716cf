"""Level profiles, rearrangement by microscopic energy, the reduced functional J
and the Hamiltonian monotonicity chain.

The symmetric rearrangement f* is never materialized: everything goes through
the level profile s -> |{f >= s}| together with the mass carried above each level.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Union

import numpy as np
from numpy.polynomial.legendre import leggauss
from scipy.interpolate import PchipInterpolator

from .equilibria import EquilibriumModel, ParticleEnsemble
from .functionals import (AnalyticF, GriddedF, PhaseGrid, bin_ensemble, default_phase_grid,
                          energy_report, grid_model, shell_potential_energy, shell_potential_means,
                          _ensemble_grid)
from .radial_numerics import (FOUR_PI, MonotoneMap, RadialGrid, RadialProfile, integrate_radial,
                              make_grid, potential_energy, solve_radial_poisson, velocity_moment)

_T_X, _T_W = leggauss(8)


def _panel_nodes(n_panels=24):
    edges = np.linspace(0.0, 1.0, n_panels + 1)
    a, b = edges[:-1, None], edges[1:, None]
    t = (a + 0.5 * (b - a) * (_T_X + 1.0)).ravel()
    w = (0.5 * (b - a) * _T_W).ravel()
    return t, w


_T_NODES, _T_WTS = _panel_nodes()


def _radius_at_energy(phi: RadialProfile, E: np.ndarray) -> np.ndarray:
    """Radius where the increasing potential reaches E (E above phi(0))."""
    r = phi.grid.nodes
    v = phi.values
    out = np.empty_like(E)
    inside = E <= v[-1]
    # interpolate node values, then polish with Newton on the smooth interpolant
    guess = np.interp(E[inside], v, r)
    for _ in range(6):
        d = phi.derivative(guess)
        step = np.where(d > 0, (phi(guess) - E[inside]) / np.where(d > 0, d, 1.0), 0.0)
        guess = np.clip(guess - step, 0.0, r[-1])
    out[inside] = guess
    Eo = E[~inside]
    if phi.extrapolation == "inverse_r" and phi.decay == 1.0:
        out[~inside] = v[-1] * r[-1] / Eo
    else:
        out[~inside] = np.inf
    return out


def energy_volume(phi: RadialProfile, E):
    """mu_phi(E) = |{(x, v): |v|^2/2 + phi(x) < E}| for a radial increasing potential."""
    E_arr = np.atleast_1d(np.asarray(E, dtype=float))
    if np.any(E_arr >= 0):
        raise ValueError("unbound energy shell has infinite volume")
    out = np.zeros_like(E_arr)
    live = E_arr > phi.values[0]
    if np.any(live):
        Ev = E_arr[live]
        rE = _radius_at_energy(phi, Ev)
        if np.any(~np.isfinite(rE)):
            raise ValueError("energy shell extends beyond the potential profile")
        # r = rE (1 - t^2) turns the (E - phi)^(3/2) edge into a smooth t^3
        r = rE[:, None] * (1.0 - _T_NODES[None, :] ** 2)
        jac = 2.0 * rE[:, None] * _T_NODES[None, :]
        gap = np.clip(Ev[:, None] - phi(r), 0.0, None)
        integrand = r ** 2 * (2.0 * gap) ** 1.5 * jac
        out[live] = (FOUR_PI / 3.0) * FOUR_PI * np.sum(integrand * _T_WTS, axis=1)
    return out if np.ndim(E) else float(out[0])


@dataclass(frozen=True)
class EnergyVolumeMap:
    """Tabulated E -> mu_phi(E) on [min phi, E_max]."""

    phi: RadialProfile
    table: MonotoneMap

    @classmethod
    def build(cls, phi: RadialProfile, E_max: float, n: int = 16000) -> "EnergyVolumeMap":
        lo = phi.values[0]
        # cluster nodes toward the bottom where mu grows like (E - phi_c)^3;
        # 16000 nodes keep the piecewise-linear inverse within 1e-8 in E
        t = np.linspace(0.0, 1.0, n)
        E = lo + (E_max - lo) * t ** 1.5
        return cls(phi, MonotoneMap(E, energy_volume(phi, E), "increasing"))

    def __call__(self, E):
        return self.table(E)


@dataclass(frozen=True)
class LevelProfile:
    """Levels s_k (descending), |{f >= s_k}| and int_{f >= s_k} f, plus totals."""

    levels: np.ndarray
    volumes: np.ndarray
    cum_mass: np.ndarray
    mass: float
    support_volume: float

    @property
    def max_value(self):
        return float(self.levels[0]) if self.levels.size else 0.0

    @property
    def volume_map(self) -> MonotoneMap:
        """s -> |{f >= s}|, decreasing."""
        return MonotoneMap(self.levels[::-1], self.volumes[::-1], "decreasing")

    def vol(self, s):
        s = np.asarray(s, dtype=float)
        if self.levels.size == 0:
            return np.zeros_like(s)
        # right-continuous step through the sampled levels
        k = np.searchsorted(-self.levels, -s, side="right") - 1
        v = np.where(k >= 0, self.volumes[np.clip(k, 0, None)], 0.0)
        return np.where(s <= 0, self.support_volume, v)

    def mass_below_volume(self, V):
        """Lambda(V): mass carried by the largest values of f on a set of volume V."""
        Vp = np.concatenate([[0.0], self.volumes, [self.support_volume]])
        Mp = np.concatenate([[0.0], self.cum_mass, [self.mass]])
        return np.interp(V, Vp, Mp)

    def value_at_volume(self, V):
        """Decreasing rearrangement lambda(V), shape-preserving through the sampled levels."""
        V = np.asarray(V, dtype=float)
        Vp = np.concatenate([[0.0], self.volumes, [self.support_volume]])
        sp = np.concatenate([[self.max_value], self.levels, [0.0]])
        keep = np.concatenate([[True], np.diff(Vp) > 0])
        interp = PchipInterpolator(Vp[keep], sp[keep], extrapolate=False)
        out = interp(np.clip(V, 0.0, self.support_volume))
        return np.where(V >= self.support_volume, 0.0, out)

    def to_csv(self) -> str:
        lines = ["s,volume"]
        lines += [f"{s:.17g},{v:.17g}" for s, v in zip(self.levels, self.volumes)]
        return "\n".join(lines) + "\n"


def _profile_from_cells(values: np.ndarray, volumes: np.ndarray, n_levels: Optional[int]) -> LevelProfile:
    v = values.ravel()
    vol = volumes.ravel()
    pos = v > 0
    v, vol = v[pos], vol[pos]
    if v.size == 0:
        z = np.zeros(0)
        return LevelProfile(z, z, z, 0.0, 0.0)
    order = np.argsort(-v, kind="stable")
    vs, vols = v[order], vol[order]
    cv = np.cumsum(vols)
    cm = np.cumsum(vs * vols)
    if n_levels is None:
        # every distinct value is a level
        last = np.concatenate([vs[1:] != vs[:-1], [True]])
        levels, volumes, cum = vs[last], cv[last], cm[last]
    else:
        top = vs[0]
        levels = np.geomspace(top, top * 1e-6, n_levels)
        k = np.searchsorted(-vs, -levels, side="right")
        volumes = np.where(k > 0, cv[np.clip(k - 1, 0, None)], 0.0)
        cum = np.where(k > 0, cm[np.clip(k - 1, 0, None)], 0.0)
    return LevelProfile(levels, volumes, cum, float(cm[-1]), float(cv[-1]))


def _depth_at_value(model: EquilibriumModel, s: np.ndarray) -> np.ndarray:
    """Depth y with F(E0 - y) = s, by bisection on the increasing law."""
    lo = np.zeros_like(s)
    hi = np.full_like(s, model.u_c)
    for _ in range(80):
        mid = 0.5 * (lo + hi)
        below = model.law.F_depth(mid) < s
        lo = np.where(below, mid, lo)
        hi = np.where(below, hi, mid)
    return 0.5 * (lo + hi)


def _model_profile(af: AnalyticF, n_levels: int) -> LevelProfile:
    tm = af.transform
    m = tm.model
    top = float(m.F(m.phi_c))
    levels = np.geomspace(top, top * 1e-6, n_levels)
    E_s = m.E0 - _depth_at_value(m, levels)
    E_s[0] = m.phi_c
    vols = energy_volume(m.phi, E_s)
    # int_{E < E_s} F dmu = F(E_s) mu(E_s) + int_{phi_c}^{E_s} |F'| mu dE
    x, w = leggauss(48)
    a, b = m.phi_c, E_s[:, None]
    Eq = a + 0.5 * (b - a) * (x + 1.0)
    wq = 0.5 * (b - a) * w
    Eq_flat = Eq.ravel()
    mu_q = energy_volume(m.phi, Eq_flat).reshape(Eq.shape)
    cum = levels * vols + np.sum(-m.Fprime(Eq) * mu_q * wq, axis=1)
    scale_v = tm.lam ** 3 * tm.mu ** -3
    support = energy_volume(m.phi, np.array([m.E0 * (1.0 - 1e-15)]))[0]
    return LevelProfile(tm.gamma * levels, scale_v * vols, tm.gamma * scale_v * cum,
                        float(tm.mass), float(scale_v * support))


def level_profile(f, n_levels: Optional[int] = 512, grid: Optional[PhaseGrid] = None) -> LevelProfile:
    """Level profile at `n_levels` geometric thresholds in [1e-6 max f, max f].

    n_levels=None keeps every distinct cell value (gridded inputs only).
    """
    if isinstance(f, AnalyticF):
        return _model_profile(f, n_levels or 512)
    if isinstance(f, ParticleEnsemble):
        f = bin_ensemble(f, grid if grid is not None else _ensemble_grid(f))
    return _profile_from_cells(f.values, f.grid.volumes, n_levels)


def _as_gridded(f, grid: Optional[PhaseGrid], model_hint: Optional[EquilibriumModel] = None) -> GriddedF:
    if isinstance(f, GriddedF):
        return f
    if isinstance(f, AnalyticF):
        return grid_model(f.model, grid if grid is not None else default_phase_grid(f.model))
    if grid is None:
        grid = default_phase_grid(model_hint) if model_hint is not None else _ensemble_grid(f)
    return bin_ensemble(f, grid)


def _shell_means_of_profile(phi: RadialProfile, edges: np.ndarray) -> np.ndarray:
    x, w = leggauss(6)
    a, b = edges[:-1, None], edges[1:, None]
    r = a + 0.5 * (b - a) * (x + 1.0)
    wr = 0.5 * (b - a) * w * r ** 2
    return np.sum(phi(r) * wr, axis=1) / np.sum(wr, axis=1)


def cell_energies(grid: PhaseGrid, phi_shell_means: np.ndarray) -> np.ndarray:
    """Cell means of |v|^2/2 + phi on the (r, w) cells."""
    return phi_shell_means[:, None] + 0.5 * grid.mean_w2[None, :]


def _rearrange_cells(profile: LevelProfile, grid: PhaseGrid, energies: np.ndarray) -> np.ndarray:
    """Fill (r, w) cells in order of increasing energy with the largest values first."""
    vol_rw = grid.shell_volumes[:, None] * grid.speed_volumes[None, :] * 2.0
    order = np.argsort(energies.ravel(), kind="stable")
    vols = vol_rw.ravel()[order]
    cv = np.cumsum(vols)
    lam = profile.mass_below_volume(np.concatenate([[0.0], cv]))
    vals_sorted = np.diff(lam) / vols
    out = np.empty(vols.size)
    out[order] = vals_sorted
    out = np.clip(out.reshape(energies.shape), 0.0, None)
    return np.repeat(out[:, :, None], grid.n_c, axis=2)


def rearrange_by_energy(f, phi: Union[RadialProfile, np.ndarray], grid: Optional[PhaseGrid] = None,
                        n_levels: Optional[int] = None) -> GriddedF:
    """f^{*phi}: the non-increasing function of |v|^2/2 + phi equimeasurable with f.

    `phi` is a potential profile or, for exact bookkeeping, precomputed shell means
    of the potential on the grid's radial cells.  By default every distinct cell
    value of f is used as a level, which keeps mass and level sets exact.
    """
    fb = _as_gridded(f, grid)
    g = fb.grid
    means = phi if isinstance(phi, np.ndarray) else _shell_means_of_profile(phi, g.r_edges)
    profile = _profile_from_cells(fb.values, g.volumes, n_levels)
    vals = _rearrange_cells(profile, g, cell_energies(g, means))
    return GriddedF(g, vals, fb.center)


def rearrangement_energy_lemma_check(f, phi: Union[RadialProfile, np.ndarray],
                                     grid: Optional[PhaseGrid] = None):
    """(int f^{*phi} E_phi, int f E_phi) on a common cell grid."""
    fb = _as_gridded(f, grid)
    g = fb.grid
    means = phi if isinstance(phi, np.ndarray) else _shell_means_of_profile(phi, g.r_edges)
    E = cell_energies(g, means)[:, :, None]
    fs = rearrange_by_energy(fb, means)
    lhs = float(np.sum(E * fs.values * g.volumes))
    rhs = float(np.sum(E * fb.values * g.volumes))
    return lhs, rhs


def _support_energy(profile: LevelProfile, evm_phi: RadialProfile) -> float:
    """Energy whose ball has the support volume of the level profile."""
    lo, hi = evm_phi.values[0], -1e-12
    target = profile.support_volume
    for _ in range(100):
        mid = 0.5 * (lo + hi)
        if energy_volume(evm_phi, mid) < target:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def isotropic_rearrangement(profile: LevelProfile, phi: RadialProfile, n_E: int = 800):
    """f^{*phi} as a function G of energy, and the energy E_top where it vanishes."""
    E_top = _support_energy(profile, phi)
    lo = phi.values[0]
    t = np.linspace(0.0, 1.0, n_E)
    E = lo + (E_top - lo) * (1.0 - (1.0 - t) ** 2)
    Gv = profile.value_at_volume(energy_volume(phi, E))
    Gv[-1] = 0.0
    Gi = PchipInterpolator(E, Gv, extrapolate=False)

    def G(x):
        x = np.asarray(x, dtype=float)
        return np.where((x > lo) & (x < E_top), np.nan_to_num(Gi(np.clip(x, lo, E_top))), np.where(x <= lo, Gv[0], 0.0))
    return G, E_top


def reduced_functional(f_levels: LevelProfile, phi: RadialProfile, dphi: Optional[RadialProfile] = None,
                       n_nodes: int = 2048, return_parts: bool = False):
    """J(phi) = H(f^{*phi}) + (1/2) ||grad phi - grad phi_{f^{*phi}}||^2 by radial quadrature."""
    G, E_top = isotropic_rearrangement(f_levels, phi)
    # radial grid covering both the potential grid and the support of f^{*phi}
    r_top = _radius_at_energy_scalar(phi, E_top)
    r_end = max(phi.grid.r_max, r_top)
    grid = make_grid(r_top, n_nodes, r_max=r_end) if r_top >= phi.grid.r_max else phi.grid
    r = grid.nodes
    phi_r = phi(r)
    rho_star = velocity_moment(G, phi_r, E_top, 0)
    kin = 0.5 * velocity_moment(G, phi_r, E_top, 2)
    rho_p = RadialProfile(grid, np.clip(rho_star, 0.0, None), "zero")
    _, dphi_star, M_star = solve_radial_poisson(rho_p)
    H_cin = integrate_radial(RadialProfile(grid, kin, "zero"))
    H_pot = potential_energy(dphi_star)
    field = dphi(r) if dphi is not None else phi.derivative(r)
    diff = RadialProfile(grid, field - dphi_star.values, "inverse_r", 2.0)
    mismatch = potential_energy(diff)
    J = H_cin - H_pot + mismatch
    if return_parts:
        return J, {"H_cin": H_cin, "H_pot": H_pot, "mismatch": mismatch, "mass": M_star}
    return J


def _radius_at_energy_scalar(phi: RadialProfile, E: float) -> float:
    return float(_radius_at_energy(phi, np.array([E]))[0])


def monotonicity_chain(f, grid: Optional[PhaseGrid] = None, model_hint: Optional[EquilibriumModel] = None):
    """(H(f), J_{f*}(phi_f), H(f_hat)) with f_hat = f^{*phi_f}, on a common cell grid.

    Shell densities have closed-form potentials, so H(f) - J equals
    int E_{phi_f} (f - f_hat) exactly and J - H(f_hat) is a squared norm.
    """
    fb = _as_gridded(f, grid, model_hint)
    g = fb.grid
    rho_f = fb.rho_cells()
    means = shell_potential_means(g.r_edges, rho_f)
    fhat = rearrange_by_energy(fb, means)
    H_f = energy_report(fb, norms=None).H
    H_hat = energy_report(fhat, norms=None).H
    mismatch = shell_potential_energy(g.r_edges, rho_f - fhat.rho_cells())
    return H_f, H_hat + mismatch, H_hat
