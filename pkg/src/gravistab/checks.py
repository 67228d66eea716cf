"""Pass/fail suites over the stability functionals, shared by the CLI and the tests.

Every suite returns {"check", "items": [{form, value, tolerance, verdict}], "verdict"}
where each value is a dimensionless number compared against its tolerance.
"""
from __future__ import annotations

from typing import Optional

import numpy as np

from . import linearized as lin
from .equilibria import EquilibriumModel, make_rng
from .functionals import (AnalyticF, GriddedF, PhaseGrid, default_phase_grid, grid_model,
                          interpolation_check, interpolation_sharp_ratio, transform_gridded)
from .radial_numerics import RadialProfile, make_grid, solve_radial_poisson
from .rearrangement import (energy_volume, monotonicity_chain, rearrange_by_energy,
                            rearrangement_energy_lemma_check)

CHECKS = ("inequalities", "antonov", "coercivity", "rearrangement", "kernel")
UNIFORM_BALL_VOLUME = np.pi ** 3 / (18.0 * np.sqrt(3.0))


def item(form: str, value: float, tolerance: float, passed: bool, **extra) -> dict:
    out = {"form": form, "value": float(value), "tolerance": float(tolerance),
           "verdict": "pass" if passed else "fail"}
    out.update(extra)
    return out


def suite(check: str, items: list, **extra) -> dict:
    ok = all(it["verdict"] == "pass" for it in items)
    out = {"check": check, "items": items, "verdict": "pass" if ok else "fail"}
    out.update(extra)
    return out


# ---------------------------------------------------------------------------
# interpolation inequality

def random_box_distribution(rng, r_scale: float = 1.0, w_scale: float = 1.0) -> GriddedF:
    """Piecewise-constant f on a random (r, w, c) box grid with some empty cells."""
    nr, nw, nc = rng.integers(1, 7), rng.integers(1, 6), int(rng.choice([1, 2, 4]))
    r_edges = np.concatenate([[0.0], np.sort(rng.uniform(0.05, 1.0, nr)) * r_scale])
    w_edges = np.concatenate([[0.0], np.sort(rng.uniform(0.05, 1.0, nw)) * w_scale])
    r_edges = np.unique(r_edges)
    w_edges = np.unique(w_edges)
    g = PhaseGrid(r_edges, w_edges, nc)
    vals = rng.uniform(0.0, 1.0, g.shape) * (rng.uniform(size=g.shape) > 0.3)
    if not np.any(vals > 0):
        vals.flat[0] = 1.0
    return GriddedF(g, vals * rng.uniform(0.1, 10.0))


def check_inequalities(model: Optional[EquilibriumModel] = None, samples: int = 100, seed: int = 0,
                       ps=(1.5, 2.0, 3.0, np.inf)) -> dict:
    rng = make_rng(seed)
    r_scale = model.R if model is not None else 1.0
    w_scale = np.sqrt(2.0 * abs(model.phi_c)) if model is not None else 1.0
    boxes = [random_box_distribution(rng, r_scale, w_scale) for _ in range(samples)]
    transforms = [(rng.uniform(0.3, 3.0), rng.uniform(0.3, 3.0), rng.uniform(0.3, 3.0), tuple(rng.normal(size=3)))
                  for _ in range(samples)]
    items = []
    for p in ps:
        c_star = interpolation_sharp_ratio(p)
        ratios, drift, pot = [], 0.0, []
        for f, (gam, lam, mu, x0) in zip(boxes, transforms):
            out = interpolation_check(f, p)
            ratio = out["rhs_factor"] / out["lhs_rho"]
            ratios.append(ratio)
            outT = interpolation_check(transform_gridded(f, gam, lam, mu, x0), p)
            drift = max(drift, abs(outT["rhs_factor"] / outT["lhs_rho"] / ratio - 1.0))
            if np.isfinite(out["pot_rhs_factor"]):
                pot.append(out["pot_rhs_factor"] / out["pot_lhs"])
        ratios = np.array(ratios)
        label = "inf" if np.isinf(p) else f"{p:g}"
        items.append(item(f"density bound p={label}: min(rhs/lhs) / sharp ratio", ratios.min() / c_star, 1e-9,
                          bool(np.all(np.isfinite(ratios)) and ratios.min() >= c_star * (1.0 - 1e-9)),
                          sharp_ratio=c_star, samples=int(ratios.size)))
        items.append(item(f"density bound p={label}: symmetry invariance", drift, 1e-6, drift <= 1e-6))
        if pot:
            pot = np.array(pot)
            items.append(item(f"potential bound p={label}: min(rhs/lhs)", pot.min(), 0.0,
                              bool(np.all(np.isfinite(pot)) and pot.min() > 0)))
        if model is not None:
            out = interpolation_check(AnalyticF(model), p)
            r = out["rhs_factor"] / out["lhs_rho"]
            items.append(item(f"density bound p={label}: model f0 rhs/lhs over sharp ratio", r / c_star, 1e-6,
                              r >= c_star * (1.0 - 1e-6)))
    return suite("inequalities", items)


# ---------------------------------------------------------------------------
# linearized operators

def _smooth_radial(rng, r, R, k_max=4):
    coef = rng.normal(size=k_max) / (1.0 + np.arange(k_max))
    return sum(c * np.cos(k * np.pi * r / R) for k, c in enumerate(coef))


def random_odd_field(grid: lin.SupportGrid, rng):
    """(h, q) with h = (x.v) q, q smooth and even in v."""
    m = grid.model
    R, W, C = grid.mesh()
    E = grid.E[:, :, None]
    depth = (m.E0 - E) / (m.E0 - m.phi_c)
    eta = _smooth_radial(rng, R, m.R)
    chi = 1.0 + rng.normal() * depth + rng.normal() * depth ** 2
    ang = 1.0 + rng.uniform(-0.9, 0.9) * C ** 2
    q = eta * chi * ang
    h = R * W * C * q
    return (lin.PerturbationField(grid, h, "odd"), lin.PerturbationField(grid, q, "even"))


def random_field(grid: lin.SupportGrid, rng, ell: int = 0):
    """|F'(E)| times a smooth random function of (r, w, c)."""
    m = grid.model
    R, W, C = grid.mesh()
    depth = (m.E0 - grid.E[:, :, None]) / (m.E0 - m.phi_c)
    vals = np.abs(grid.Fp)[:, :, None] * _smooth_radial(rng, R, m.R) \
        * (1.0 + rng.normal() * depth) * (1.0 + rng.normal() * C + rng.normal() * C ** 2) * (1.0 + W ** 2)
    if ell == 1:
        vals = vals * R / m.R
    return lin.PerturbationField(grid, vals, lin.detect_parity(vals), ell)


def check_antonov(model: EquilibriumModel, samples: int = 50, seed: int = 0, grid=None) -> dict:
    rng = make_rng(seed)
    G = lin.SupportGrid(model) if grid is None else grid
    worst_gap, worst_rhs = np.inf, np.inf
    for _ in range(samples):
        h, q = random_odd_field(G, rng)
        res = lin.antonov_check(h, model, q)
        scale = max(abs(res["lhs"]), 1e-300)
        worst_gap = min(worst_gap, (res["lhs"] - res["rhs"]) / scale)
        worst_rhs = min(worst_rhs, res["rhs"] / scale)
    radii = np.linspace(0.05, 0.95, 10) * model.R
    lhs, rhs = lin.antonov_moment_identity(model, radii)
    moment = float(np.max(np.abs(lhs - rhs) / np.abs(rhs)))
    items = [
        item("min (lhs - rhs) / lhs over odd fields", worst_gap, 1e-6, worst_gap >= -1e-6, samples=samples),
        item("min rhs / lhs over odd fields", worst_rhs, 1e-6, worst_rhs >= -1e-6, samples=samples),
        item("velocity moment identity, max relative error at 10 radii", moment, 1e-6, moment <= 1e-6),
    ]
    return suite("antonov", items)


def kernel_values(model: EquilibriumModel, grid=None) -> dict:
    G = lin.SupportGrid(model) if grid is None else grid
    t = lin.translation_mode(G)
    kin = G.integrate(t.values ** 2 / np.abs(G.Fp)[:, :, None])
    Mt = lin.apply_M(t)
    ref = np.sqrt(G.integrate((t.values / G.Fp[:, :, None]) ** 2))
    sp = lin.SpatialPerturbation(model.dphi, 1)
    d2j, parts = lin.reduced_hessian(sp, model, return_parts=True)
    res = lin.schrodinger_residual(model, sp).values
    V = lin.effective_potential(model)
    vscale = np.max(np.abs(V.values * model.dphi.values))
    return {
        "free energy of the translation mode / its kinetic part": abs(lin.free_energy(t)) / kin,
        "|M of the translation mode| / |h / F'|": np.sqrt(G.integrate(Mt.values ** 2)) / ref,
        "reduced Hessian at phi' (l=1) / gradient energy": abs(d2j) / parts["gradient"],
        "Schroedinger residual of phi' (l=1), sup / sup |V phi'|": np.max(np.abs(res)) / vscale,
    }


def check_kernel(model: EquilibriumModel, grid=None) -> dict:
    vals = kernel_values(model, grid)
    return suite("kernel", [item(k, v, 1e-4, v <= 1e-4) for k, v in vals.items()])


def random_radial_perturbation(model: EquilibriumModel, rng) -> lin.SpatialPerturbation:
    r = model.grid.nodes
    u = _smooth_radial(rng, r, model.grid.r_max, 6)
    u = u + rng.normal() * np.exp(-(r / (0.3 * model.R)) ** 2)
    return lin.SpatialPerturbation(RadialProfile(model.grid, u, "zero"), 0)


def check_coercivity(model: EquilibriumModel, samples: int = 50, radial_samples: int = 20, seed: int = 0,
                     grid=None) -> dict:
    rng = make_rng(seed)
    G = lin.SupportGrid(model) if grid is None else grid
    worst = np.inf
    for k in range(samples):
        h = random_field(G, rng, ell=k % 2)
        hz = lin.project_to_constraints(h)
        scale = G.integrate(hz.values ** 2 / np.abs(G.Fp)[:, :, None])
        worst = min(worst, lin.constrained_coercivity_probe(h, model) / scale)
    worst_d2 = np.inf
    for _ in range(radial_samples):
        val, parts = lin.reduced_hessian(random_radial_perturbation(model, rng), model, return_parts=True)
        worst_d2 = min(worst_d2, val / parts["gradient"])
    items = [
        item("min <M h, h> / int h^2/|F'| over constrained fields", worst, 1e-6, worst >= -1e-6,
             samples=samples, empirical_lower_bound=float(worst)),
        item("min reduced Hessian / gradient energy over radial fields", worst_d2, 0.0, worst_d2 > 0,
             samples=radial_samples),
    ]
    return suite("coercivity", items)


# ---------------------------------------------------------------------------
# rearrangement

def uniform_ball_volume_error() -> float:
    g = make_grid(1.0, 2048)
    phi, _, _ = solve_radial_poisson(RadialProfile(g, np.ones(len(g)), "zero"))
    return abs(float(energy_volume(phi, -1.0 / 3.0)) - UNIFORM_BALL_VOLUME)


def check_rearrangement(model: EquilibriumModel, samples: int = 50, chain_samples: int = 20, seed: int = 0,
                        fixed_point_tol: float = 2e-3) -> dict:
    rng = make_rng(seed)
    pg = default_phase_grid(model)
    f0 = grid_model(model, pg)
    fh = rearrange_by_energy(f0, model.phi)
    fixed = float(np.sum(np.abs(fh.values - f0.values) * pg.volumes) / f0.mass)
    small = default_phase_grid(model, 24, 24, 4)
    worst_lemma = -np.inf
    for _ in range(samples):
        vals = rng.uniform(0.0, 1.0, small.shape) * (rng.uniform(size=small.shape) > 0.2)
        lhs, rhs = rearrangement_energy_lemma_check(GriddedF(small, vals), model.phi)
        worst_lemma = max(worst_lemma, (lhs - rhs) / max(abs(rhs), 1e-300))
    worst_chain = -np.inf
    for _ in range(chain_samples):
        amp = rng.uniform(0.05, 0.5)
        f = GriddedF(pg, f0.values * (1.0 + amp * rng.uniform(-1.0, 1.0, pg.shape)))
        H, J, Hh = monotonicity_chain(f)
        worst_chain = max(worst_chain, (J - H) / abs(H), (Hh - J) / abs(H))
    ball = uniform_ball_volume_error()
    items = [
        item("relative L1 distance between rearranged f0 and f0", fixed, fixed_point_tol, fixed <= fixed_point_tol),
        item("max (lhs - rhs) / |rhs| of the energy lemma", worst_lemma, 1e-12, worst_lemma <= 1e-12, samples=samples),
        item("max violation of H(f) >= J >= H(f_hat), relative to |H|", worst_chain, 1e-6, worst_chain <= 1e-6,
             samples=chain_samples),
        item("uniform ball energy volume at -1/3, absolute error", ball, 1e-6, ball <= 1e-6),
    ]
    return suite("rearrangement", items)


def run_check(name: str, model: EquilibriumModel, samples: Optional[int] = None, seed: int = 0) -> dict:
    if name == "inequalities":
        return check_inequalities(model, samples or 100, seed)
    if name == "antonov":
        return check_antonov(model, samples or 50, seed)
    if name == "coercivity":
        return check_coercivity(model, samples or 50, 20, seed)
    if name == "rearrangement":
        return check_rearrangement(model, samples or 50, 20, seed)
    if name == "kernel":
        return check_kernel(model)
    raise ValueError(f"unknown check {name!r}")
