"""Linearized dynamics around an isotropic steady state: brackets, free energy,
Antonov bound, the constrained quadratic form, the effective potential and
Schroedinger-type operator, the energy projection P and the reduced Hessian.

Perturbations live on a support-adapted tensor grid (r, s, c): r in (0, R)
on Gauss panels in t with r = R (2t - t^2),
speed w = s W(r) with W(r) = sqrt(2 (E0 - phi(r))) the escape speed to E0, and
c the cosine between x and v.  Every node therefore lies inside supp F'.
Fields carry an angular factor Y_0 = 1 or Y_1 = sqrt(3) x_1/|x|, normalized so
that the angular mean of Y^2 is one.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from numpy.polynomial.legendre import leggauss
from scipy import optimize
from scipy.integrate import solve_ivp
from scipy.interpolate import RegularGridInterpolator

from .equilibria import EquilibriumModel
from .radial_numerics import (FOUR_PI, RadialProfile, fd_matrix, integrate_radial,
                              velocity_moment)
from .rearrangement import _radius_at_energy


def panel_quadrature(edges: np.ndarray, order: int = 4):
    """Composite Gauss nodes/weights and the cumulative integration matrix.

    C @ g gives int_0^{x_i} g at every node, exact for piecewise polynomials of
    degree < order on each panel.
    """
    xi, wi = leggauss(order)
    V = np.vander(xi, order, increasing=True)
    coef = np.linalg.inv(V)  # row k: coefficients of L_j for xi^k
    powers = np.arange(order)
    prim = (xi[:, None] ** (powers + 1) - (-1.0) ** (powers + 1)) / (powers + 1)  # int_{-1}^{xi_i} xi^k
    S = prim @ coef  # S[i, j] = int_{-1}^{xi_i} L_j
    n_p = edges.size - 1
    n = n_p * order
    nodes = np.empty(n)
    wts = np.empty(n)
    C = np.zeros((n, n))
    for p in range(n_p):
        a, b = edges[p], edges[p + 1]
        h = 0.5 * (b - a)
        sl = slice(p * order, (p + 1) * order)
        nodes[sl] = a + h * (xi + 1.0)
        wts[sl] = h * wi
        C[sl, :p * order] = wts[:p * order][None, :]
        C[sl, sl] = h * S
    return nodes, wts, C


@dataclass(frozen=True)
class SupportGrid:
    """Tensor grid on the support of f0 with quadrature and differentiation data."""

    model: EquilibriumModel
    n_panels: int = 64
    n_s: int = 24
    n_c: int = 16
    r: np.ndarray = field(init=False, repr=False)
    wr: np.ndarray = field(init=False, repr=False)
    cum: np.ndarray = field(init=False, repr=False)
    s: np.ndarray = field(init=False, repr=False)
    ws: np.ndarray = field(init=False, repr=False)
    c: np.ndarray = field(init=False, repr=False)
    wc: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        m = self.model
        # r = R (2t - t^2): W(r) ~ sqrt(R - r) becomes smooth in t and nodes cluster at the edge
        t, wt, Ct = panel_quadrature(np.linspace(0.0, 1.0, self.n_panels + 1))
        r = m.R * (2.0 * t - t ** 2)
        drdt = 2.0 * m.R * (1.0 - t)
        wr = wt * drdt
        C = Ct * drdt[None, :]
        xs, ws = leggauss(self.n_s)
        xc, wc = leggauss(self.n_c)
        vals = dict(r=r, wr=wr, cum=C, s=0.5 * (xs + 1.0), ws=0.5 * ws, c=xc, wc=wc)
        for k, v in vals.items():
            object.__setattr__(self, k, v)
        W = m.escape_speed(r)
        dphi = m.dphi(r)
        object.__setattr__(self, "W", W)
        object.__setattr__(self, "dphi", dphi)
        w = self.s[None, :] * W[:, None]
        E = m.phi(r)[:, None] + 0.5 * w ** 2
        object.__setattr__(self, "w", w)
        object.__setattr__(self, "E", E)
        object.__setattr__(self, "Fp", m.Fprime(E))
        # dx dv = 4 pi r^2 dr * 2 pi W^3 s^2 ds * dc
        vol = (FOUR_PI * r ** 2 * wr)[:, None, None] * (2.0 * np.pi * W[:, None, None] ** 3) \
            * (self.s ** 2 * self.ws)[None, :, None] * wc[None, None, :]
        object.__setattr__(self, "vol", vol)
        object.__setattr__(self, "Dr", fd_matrix(t, 1).toarray() / drdt[:, None])
        object.__setattr__(self, "Ds", fd_matrix(self.s, 1).toarray())
        object.__setattr__(self, "Dc", fd_matrix(self.c, 1).toarray())

    @property
    def shape(self):
        return (self.r.size, self.s.size, self.c.size)

    def mesh(self):
        """(r, w, c) arrays broadcast to the grid shape."""
        R = np.broadcast_to(self.r[:, None, None], self.shape)
        Wv = np.broadcast_to(self.w[:, :, None], self.shape)
        Cv = np.broadcast_to(self.c[None, None, :], self.shape)
        return R, Wv, Cv

    def integrate(self, values) -> float:
        return float(np.sum(values * self.vol))


@dataclass(frozen=True)
class PerturbationField:
    grid: SupportGrid
    values: np.ndarray
    parity: str = "none"
    ell: int = 0
    support_flag: bool = True

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.shape != self.grid.shape:
            raise ValueError("field values must match the support grid")
        if self.ell not in (0, 1):
            raise ValueError("only angular index 0 or 1 is supported")
        if self.parity not in ("even", "odd", "none"):
            raise ValueError("parity must be even, odd or none")
        flip = v[:, :, ::-1]
        scale = max(np.max(np.abs(v)), 1e-300)
        if self.parity == "even" and np.max(np.abs(flip - v)) > 1e-12 * scale:
            raise ValueError("declared even parity does not match values")
        if self.parity == "odd" and np.max(np.abs(flip + v)) > 1e-12 * scale:
            raise ValueError("declared odd parity does not match values")
        object.__setattr__(self, "values", v)

    def with_values(self, values, parity=None):
        return PerturbationField(self.grid, values, self.parity if parity is None else parity,
                                 self.ell, self.support_flag)


def detect_parity(values, tol=1e-12) -> str:
    flip = values[:, :, ::-1]
    scale = max(np.max(np.abs(values)), 1e-300)
    if np.max(np.abs(flip - values)) <= tol * scale:
        return "even"
    if np.max(np.abs(flip + values)) <= tol * scale:
        return "odd"
    return "none"


def field_from_function(grid: SupportGrid, fn: Callable, ell: int = 0, parity: Optional[str] = None) -> PerturbationField:
    """Sample fn(r, w, c) on the grid (radial part for ell = 1)."""
    R, Wv, Cv = grid.mesh()
    vals = np.array(np.broadcast_to(fn(R, Wv, Cv), grid.shape), dtype=float)
    return PerturbationField(grid, vals, parity or detect_parity(vals), ell, True)


_FLIP = {"even": "odd", "odd": "even", "none": "none"}


def bracket_with_E(g: PerturbationField, model: Optional[EquilibriumModel] = None) -> PerturbationField:
    """{g, E} = v . grad_x g - phi'(r) x/r . grad_v g for radial g(r, w, c).

    On (r, s, c) with w = s W(r):
    {g, E} = s W c g_r + (phi' c / W)(s^2 - 1) g_s + (1 - c^2)(s W / r - phi'/(s W)) g_c.
    """
    if g.ell != 0:
        raise ValueError("bracket is implemented for spherically symmetric fields")
    G = g.grid
    v = g.values
    g_r = np.einsum("ij,jkl->ikl", G.Dr, v)
    g_s = np.einsum("ij,kjl->kil", G.Ds, v)
    g_c = np.einsum("ij,klj->kli", G.Dc, v)
    r = G.r[:, None, None]
    W = G.W[:, None, None]
    dp = G.dphi[:, None, None]
    s = G.s[None, :, None]
    c = G.c[None, None, :]
    out = s * W * c * g_r + (dp * c / W) * (s ** 2 - 1.0) * g_s \
        + (1.0 - c ** 2) * (s * W / r - dp / (s * W)) * g_c
    par = _FLIP[g.parity]
    if par == "even":
        out = 0.5 * (out + out[:, :, ::-1])
    elif par == "odd":
        out = 0.5 * (out - out[:, :, ::-1])
    return PerturbationField(G, out, par, 0, g.support_flag)


def dynamically_accessible(g: PerturbationField, model: Optional[EquilibriumModel] = None) -> PerturbationField:
    """h = {g, f0} = F'(E) {g, E}."""
    if not g.support_flag:
        raise ValueError("inaccessible support")
    b = bracket_with_E(g)
    return b.with_values(g.grid.Fp[:, :, None] * b.values)


def radial_density(h: PerturbationField) -> np.ndarray:
    """Radial part of rho_h at the r nodes: 2 pi W^3 int int h s^2 ds dc."""
    G = h.grid
    return 2.0 * np.pi * G.W ** 3 * np.einsum("ijk,j,k->i", h.values, G.s ** 2 * G.ws, G.wc)


def radial_potential(h: PerturbationField, rho: Optional[np.ndarray] = None) -> np.ndarray:
    """Radial part of phi_h from the angular-index Green's function."""
    G = h.grid
    rho = radial_density(h) if rho is None else rho
    l = h.ell
    r = G.r
    inner = G.cum @ (r ** (l + 2) * rho)
    full = np.sum(G.wr * r ** (1 - l) * rho)
    outer = full - G.cum @ (r ** (1 - l) * rho)
    return -(r ** (-l - 1) * inner + r ** l * outer) / (2 * l + 1)


def field_energy(h: PerturbationField) -> float:
    """int |grad phi_h|^2 = -int phi_h rho_h."""
    G = h.grid
    rho = radial_density(h)
    phi = radial_potential(h, rho)
    return float(-FOUR_PI * np.sum(G.wr * G.r ** 2 * phi * rho))


def free_energy(h: PerturbationField, model: Optional[EquilibriumModel] = None) -> float:
    """F(h) = -int h^2 / F'(E) - int |grad phi_h|^2."""
    if not h.support_flag:
        raise ValueError("field is not supported in supp F'")
    G = h.grid
    kin = G.integrate(h.values ** 2 / np.abs(G.Fp)[:, :, None])
    return kin - field_energy(h)


def apply_M(h: PerturbationField, model: Optional[EquilibriumModel] = None) -> PerturbationField:
    """M h = (-h / F'(E) + phi_h) restricted to the support."""
    G = h.grid
    phi = radial_potential(h)
    vals = -h.values / G.Fp[:, :, None] + phi[:, None, None]
    return h.with_values(vals, "none" if h.parity == "odd" else h.parity)


def inner(a: PerturbationField, b: PerturbationField) -> float:
    """L^2(dx dv) pairing; fields of different angular index are orthogonal."""
    if a.ell != b.ell:
        return 0.0
    return a.grid.integrate(a.values * b.values)


def translation_mode(grid: SupportGrid) -> PerturbationField:
    """d f0 / d x_1 = F'(E) phi'(r) x_1/r, stored as radial part times Y_1."""
    vals = grid.Fp * (grid.dphi[:, None] / np.sqrt(3.0))
    return PerturbationField(grid, np.repeat(vals[:, :, None], grid.n_c, axis=2), "even", 1, True)


def constraint_values(h: PerturbationField) -> np.ndarray:
    """(int h E, int x_1 h, int x_2 h, int x_3 h)."""
    G = h.grid
    out = np.zeros(4)
    if h.ell == 0:
        out[0] = G.integrate(h.values * G.E[:, :, None])
    else:
        out[1] = G.integrate(h.values * G.r[:, None, None] / np.sqrt(3.0))
    return out


def project_to_constraints(h: PerturbationField) -> PerturbationField:
    """Remove the components along |F'| E and |F'| x_i in the 1/|F'| inner product."""
    G = h.grid
    aF = np.abs(G.Fp)[:, :, None]
    rep_E = aF * G.E[:, :, None]
    rep_x = aF * G.r[:, None, None] / np.sqrt(3.0)
    gram = np.diag([G.integrate(aF * G.E[:, :, None] ** 2),
                    G.integrate(aF * G.r[:, None, None] ** 2 / 3.0),
                    G.integrate(aF * G.r[:, None, None] ** 2 / 3.0),
                    G.integrate(aF * G.r[:, None, None] ** 2 / 3.0)])
    if np.linalg.cond(gram) > 1e12:
        raise ValueError("constraint collinearity")
    coef = np.linalg.solve(gram, constraint_values(h))
    vals = h.values - (coef[0] * rep_E if h.ell == 0 else coef[1] * rep_x)
    return h.with_values(vals, detect_parity(vals))


def constrained_coercivity_probe(h: PerturbationField, model: Optional[EquilibriumModel] = None) -> float:
    """<M h_Z, h_Z> for the projection h_Z of h onto the constraint space."""
    hz = project_to_constraints(h)
    return inner(apply_M(hz), hz)


def antonov_moment_identity(model: EquilibriumModel, radii) -> tuple:
    """(-int (x.v / |x|)^2 F'(E) dv, rho(r)) at the given radii."""
    radii = np.asarray(radii, dtype=float)
    phi = model.phi(radii)
    lhs = -velocity_moment(model.Fprime, phi, model.E0, 2) / 3.0
    return lhs, model.rho(radii)


def antonov_check(h_odd: PerturbationField, model: Optional[EquilibriumModel] = None,
                  q: Optional[PerturbationField] = None) -> dict:
    """Free energy of {h, f0} against -int F' [(x.v)^2 {q, E}^2 + (phi'/r) h^2] for h = (x.v) q."""
    if h_odd.parity != "odd" or h_odd.ell != 0:
        raise ValueError("parity")
    G = h_odd.grid
    R, Wv, Cv = G.mesh()
    xv = R * Wv * Cv
    if q is None:
        q = h_odd.with_values(h_odd.values / xv, "even")
    lhs = free_energy(dynamically_accessible(h_odd))
    bq = bracket_with_E(q).values
    aF = np.abs(G.Fp)[:, :, None]
    rhs = G.integrate(aF * (xv ** 2 * bq ** 2 + (G.dphi / G.r)[:, None, None] * h_odd.values ** 2))
    return {"lhs": float(lhs), "rhs": float(rhs)}


# ---------------------------------------------------------------------------
# spatial operators

@dataclass(frozen=True)
class SpatialPerturbation:
    u: RadialProfile
    ell: int = 0

    def __post_init__(self):
        if self.ell < 0:
            raise ValueError("ell must be nonnegative")
        if self.ell >= 1 and abs(self.u.values[0]) > 1e-12 * max(np.max(np.abs(self.u.values)), 1e-300):
            raise ValueError("ell >= 1 perturbations must vanish at r = 0")


def effective_potential(model: EquilibriumModel) -> RadialProfile:
    """V(r) = -int F'(E) dv, equal to d rho / du at depth u = E0 - phi."""
    u = np.clip(model.E0 - model.phi.values, 0.0, None)
    V = np.where(model.grid.nodes < model.R, model.law.density_slope(u), 0.0)
    return RadialProfile(model.grid, V, "zero")


def effective_potential_quadrature(model: EquilibriumModel, r) -> np.ndarray:
    """V(r) by direct velocity quadrature of -F' (needs n >= 1/2 for polytropes)."""
    return velocity_moment(lambda E: -model.Fprime(E), model.phi(r), model.E0, 0)


_FD_CACHE: dict = {}


def _fd(nodes: np.ndarray, deriv: int):
    key = (nodes.size, deriv, nodes.tobytes())
    hit = _FD_CACHE.get(key)
    if hit is None:
        if len(_FD_CACHE) > 32:
            _FD_CACHE.clear()
        hit = _FD_CACHE[key] = fd_matrix(nodes, deriv)
    return hit


def schrodinger_residual(model: EquilibriumModel, sp: SpatialPerturbation) -> RadialProfile:
    """u'' + (2/r) u' - l(l+1) u / r^2 + V u on the model grid (zero at r = 0).

    Derivatives use ghost nodes past r_max filled from the profile's own
    extrapolation, so the outermost stencils stay centred.
    """
    r = sp.u.grid.nodes
    n = r.size
    h = r[-1] - r[-2]
    r_ext = np.concatenate([r, r[-1] + h * np.arange(1, 4)])
    u_ext = np.concatenate([sp.u.values, sp.u(r_ext[n:])])
    d1 = (_fd(r_ext, 1) @ u_ext)[:n]
    d2 = (_fd(r_ext, 2) @ u_ext)[:n]
    u = sp.u.values
    V = effective_potential(model)(r)
    res = np.zeros_like(u)
    l = sp.ell
    rr = r[1:]
    res[1:] = d2[1:] + 2.0 * d1[1:] / rr - l * (l + 1) * u[1:] / rr ** 2 + V[1:] * u[1:]
    return RadialProfile(sp.u.grid, res, "zero")


def gradient_energy(sp: SpatialPerturbation) -> float:
    """int |grad h|^2 for h = u(r) Y_l, including the exterior tail."""
    r = sp.u.grid.nodes
    du = _fd(r, 1) @ sp.u.values
    l = sp.ell
    with np.errstate(divide="ignore", invalid="ignore"):
        ang = np.where(r > 0, l * (l + 1) * sp.u.values ** 2 / np.where(r > 0, r, 1.0) ** 2, 0.0)
    if l == 1:
        # u ~ a r near the origin, so u/r is finite
        ang[0] = 2.0 * du[0] ** 2
    dens = RadialProfile(sp.u.grid, du ** 2 + ang, "zero")
    total = integrate_radial(dens)
    if sp.u.extrapolation == "inverse_r":
        p, R, uR = sp.u.decay, r[-1], sp.u.values[-1]
        total += FOUR_PI * (p ** 2 + l * (l + 1)) * uR ** 2 * R / (2.0 * p - 1.0)
    return float(total)


_E_X, _E_W = leggauss(16)
_T_X, _T_W = leggauss(8)


def _energy_nodes(model: EquilibriumModel, n_panels: int = 32):
    """Gauss nodes in E on [phi_c, E0], denser toward E0."""
    t_edges = np.linspace(0.0, 1.0, n_panels + 1)
    a, b = t_edges[:-1, None], t_edges[1:, None]
    t = (a + 0.5 * (b - a) * (_E_X + 1.0)).ravel()
    wt = (0.5 * (b - a) * _E_W).ravel()
    span = model.E0 - model.phi_c
    # E = phi_c + span (1 - (1 - t)^2): smooth at the top where |F'| may blow up
    E = model.phi_c + span * (1.0 - (1.0 - t) ** 2)
    wE = span * 2.0 * (1.0 - t) * wt
    return E, wE


def _orbit_radial_nodes(model: EquilibriumModel, E: np.ndarray, n_panels: int = 16):
    """Radial nodes r in (0, r_E) with weights for int_0^{r_E} g(r) dr, r = r_E (1 - t^2)."""
    rE = _radius_at_energy(model.phi, E)
    t_edges = np.linspace(0.0, 1.0, n_panels + 1)
    a, b = t_edges[:-1, None], t_edges[1:, None]
    t = (a + 0.5 * (b - a) * (_T_X + 1.0)).ravel()
    wt = (0.5 * (b - a) * _T_W).ravel()
    r = rE[:, None] * (1.0 - t[None, :] ** 2)
    wr = 2.0 * rE[:, None] * t[None, :] * wt[None, :]
    return r, wr


def _state_density(model: EquilibriumModel, E: np.ndarray):
    """Radial nodes and the phase-space weight 16 pi^2 r^2 sqrt(2 (E - phi)) dr."""
    r, wr = _orbit_radial_nodes(model, E)
    gap = np.clip(E[:, None] - model.phi(r), 0.0, None)
    k = 16.0 * np.pi ** 2 * r ** 2 * np.sqrt(2.0 * gap) * wr
    return r, k


@dataclass(frozen=True)
class EnergyFunction:
    """A tabulated function of the microscopic energy."""

    E: np.ndarray
    values: np.ndarray

    def __call__(self, E):
        return np.interp(E, self.E, self.values)


def projection_P(h: SpatialPerturbation, model: EquilibriumModel, E_nodes=None) -> EnergyFunction:
    """(P h)(E) = int (E - phi)_+^(1/2) h dy / int (E - phi)_+^(1/2) dy."""
    if h.ell != 0:
        raise ValueError("projection acts on radial perturbations")
    E = _energy_nodes(model)[0] if E_nodes is None else np.asarray(E_nodes, dtype=float)
    r, k = _state_density(model, E)
    return EnergyFunction(E, np.sum(k * h.u(r), axis=1) / np.sum(k, axis=1))


def projection_orthogonality(h: SpatialPerturbation, model: EquilibriumModel, test: Callable) -> tuple:
    """(int int |F'| (h - P h) u(E), int int |F'| |h u(E)|) for a test function u of E."""
    E, wE = _energy_nodes(model)
    r, k = _state_density(model, E)
    hv = h.u(r)
    Ph = np.sum(k * hv, axis=1) / np.sum(k, axis=1)
    aF = np.abs(model.Fprime(E))
    resid = np.sum(wE * aF * test(E) * np.sum(k * (hv - Ph[:, None]), axis=1))
    scale = np.sum(wE * aF * np.abs(test(E)) * np.sum(k * np.abs(hv), axis=1))
    return float(resid), float(scale)


def reduced_hessian(h: SpatialPerturbation, model: EquilibriumModel, return_parts: bool = False):
    """int |grad h|^2 - int int |F'(E)| (h - P h)^2; P drops out for ell >= 1."""
    grad = gradient_energy(h)
    if h.ell >= 1:
        V = effective_potential(model)
        pot = integrate_radial(V, lambda s: h.u(s) ** 2)
    else:
        E, wE = _energy_nodes(model)
        r, k = _state_density(model, E)
        hv = h.u(r)
        Ph = np.sum(k * hv, axis=1) / np.sum(k, axis=1)
        aF = np.abs(model.Fprime(E))
        pot = float(np.sum(wE * aF * np.sum(k * (hv - Ph[:, None]) ** 2, axis=1)))
    val = grad - pot
    if return_parts:
        return val, {"gradient": grad, "potential": pot}
    return val


# ---------------------------------------------------------------------------
# linearized evolution on steady orbits

def dynamical_time(model: EquilibriumModel) -> float:
    """Circular-orbit period at the support edge, 2 pi sqrt(4 pi R^3 / M)."""
    return float(2.0 * np.pi * np.sqrt(FOUR_PI * model.R ** 3 / model.M))


@dataclass
class OrbitMarkers:
    """Markers on a lattice of steady orbits in (E, L, orbital phase)."""

    E: np.ndarray          # per orbit
    L: np.ndarray
    period: np.ndarray
    r_table: np.ndarray    # (orbits, n_tab) over one radial period
    vr_table: np.ndarray
    weight: np.ndarray     # per marker phase volume
    phase0: np.ndarray     # per marker initial phase in [0, 1)
    orbit: np.ndarray      # per marker orbit index
    Fp: np.ndarray         # per marker F'(E)

    def state(self, t: float):
        """(r, v_r, L) of every marker at time t."""
        ph = np.mod(self.phase0 + t / self.period[self.orbit], 1.0)
        n_tab = self.r_table.shape[1]
        x = ph * n_tab
        i0 = np.floor(x).astype(int) % n_tab
        i1 = (i0 + 1) % n_tab
        f = x - np.floor(x)
        r = (1 - f) * self.r_table[self.orbit, i0] + f * self.r_table[self.orbit, i1]
        vr = (1 - f) * self.vr_table[self.orbit, i0] + f * self.vr_table[self.orbit, i1]
        return r, vr, self.L[self.orbit]


def _circular_L(model: EquilibriumModel, E: float):
    rE = float(_radius_at_energy(model.phi, np.array([E]))[0])
    res = optimize.minimize_scalar(lambda r: -2.0 * r ** 2 * (E - model.phi(r)), bounds=(1e-9 * rE, rE),
                                   method="bounded", options={"xatol": 1e-12 * rE})
    return float(np.sqrt(max(-res.fun, 0.0))), float(res.x), rE


def build_orbit_markers(model: EquilibriumModel, n_E: int = 25, n_L: int = 20, per_orbit: int = 100,
                        n_tab: int = 2048) -> OrbitMarkers:
    xE, wE = leggauss(n_E)
    xL, wL = leggauss(n_L)
    span = model.E0 - model.phi_c
    tE = 0.5 * (xE + 1.0)
    E_nodes = model.phi_c + span * tE
    wE = 0.5 * span * wE
    eta = 0.5 * (xL + 1.0)
    wL = 0.5 * wL

    def accel(r):
        return -model.dphi(r)

    Es, Ls, Ts, rt, vt, wts = [], [], [], [], [], []
    for E, we in zip(E_nodes, wE):
        Lc, rc, rE = _circular_L(model, E)
        for et, wl in zip(eta, wL):
            L = et * Lc
            g = lambda r: 2.0 * (E - model.phi(r)) - L ** 2 / r ** 2
            peri = optimize.brentq(g, 1e-12 * rE, rc, xtol=1e-14 * rE) if g(1e-12 * rE) < 0 else 0.0
            apo = optimize.brentq(g, rc, rE, xtol=1e-14 * rE)

            def rhs(t, y):
                return [y[1], accel(y[0]) + L ** 2 / y[0] ** 3]

            def turn(t, y):
                return y[1]
            turn.terminal = True
            turn.direction = -1
            r0 = peri * (1.0 + 1e-12) + 1e-300
            sol = solve_ivp(rhs, (0.0, 1e4 * dynamical_time(model)), [r0, 0.0], method="DOP853",
                            rtol=1e-10, atol=1e-12 * rE, events=turn, dense_output=True,
                            first_step=1e-6 * dynamical_time(model))
            half = sol.t_events[0][0]
            T = 2.0 * half
            tau = np.arange(n_tab) * T / n_tab
            first = tau <= half
            y1 = sol.sol(tau[first])
            y2 = sol.sol(T - tau[~first])
            Es.append(E)
            Ls.append(L)
            Ts.append(T)
            rt.append(np.concatenate([y1[0], y2[0]]))
            vt.append(np.concatenate([y1[1], -y2[1]]))
            # dx dv = 8 pi^2 L dL dE dtau
            wts.append(8.0 * np.pi ** 2 * L * Lc * wl * we * T / per_orbit)
    n_orb = len(Es)
    orbit = np.repeat(np.arange(n_orb), per_orbit)
    phase0 = np.tile((np.arange(per_orbit) + 0.5) / per_orbit, n_orb)
    weight = np.repeat(np.array(wts), per_orbit)
    E_arr = np.array(Es)
    return OrbitMarkers(E_arr, np.array(Ls), np.array(Ts), np.array(rt), np.array(vt), weight,
                        phase0, orbit, model.Fprime(E_arr)[orbit])


def _marker_field(r: np.ndarray, q: np.ndarray):
    """phi_h'(r_i) from the charge strictly inside each marker, and int |grad phi_h|^2."""
    order = np.argsort(r, kind="stable")
    rs, qs = r[order], q[order]
    inside = np.concatenate([[0.0], np.cumsum(qs)[:-1]])
    field_sorted = inside / (FOUR_PI * rs ** 2)
    out = np.empty_like(r)
    out[order] = field_sorted
    # pairwise shell energy without self terms: sum_{i != j} q_i q_j / (4 pi max(r_i, r_j))
    energy = 2.0 * np.sum(qs * inside / (FOUR_PI * rs))
    return out, energy


@dataclass
class LinearizedRun:
    times: np.ndarray
    free_energy: np.ndarray
    h: np.ndarray
    markers: OrbitMarkers


def marker_free_energy(markers: OrbitMarkers, h: np.ndarray, t: float) -> float:
    r, _, _ = markers.state(t)
    _, grad2 = _marker_field(r, markers.weight * h)
    return float(np.sum(markers.weight * h ** 2 / np.abs(markers.Fp)) - grad2)


def evolve_linearized(h0, model: EquilibriumModel, dt: float, T: float, markers: Optional[OrbitMarkers] = None,
                      cadence: int = 1) -> LinearizedRun:
    """Advance dh/dt + {h, E} = F'(E) v . grad phi_h on markers riding the steady orbits.

    Transport is exact along tabulated orbits; the source term is integrated with
    classical RK4.  h0 is a PerturbationField (interpolated) or a callable h0(r, w, c).
    """
    mk = build_orbit_markers(model) if markers is None else markers
    min_period = float(np.min(mk.period))
    if dt > min_period / 8.0:
        raise ValueError(f"time step too large for the orbit lattice; use dt <= {min_period / 16.0:.6g}")
    r, vr, L = mk.state(0.0)
    w = np.sqrt(vr ** 2 + (L / r) ** 2)
    c = np.clip(vr / w, -1.0, 1.0)
    if isinstance(h0, PerturbationField):
        G = h0.grid
        interp = RegularGridInterpolator((G.r, G.s, G.c), h0.values, method="linear", bounds_error=False, fill_value=None)
        s = np.clip(w / np.maximum(model.escape_speed(r), 1e-300), G.s[0], G.s[-1])
        h = interp(np.stack([np.clip(r, G.r[0], G.r[-1]), s, c], axis=1))
    else:
        h = np.asarray(h0(r, w, c), dtype=float) * np.ones_like(r)

    def rhs(t, hv):
        rr, vv, _ = mk.state(t)
        fld, _ = _marker_field(rr, mk.weight * hv)
        return mk.Fp * vv * fld

    n_steps = int(round(T / dt))
    times = [0.0]
    Fs = [marker_free_energy(mk, h, 0.0)]
    t = 0.0
    for k in range(1, n_steps + 1):
        k1 = rhs(t, h)
        k2 = rhs(t + 0.5 * dt, h + 0.5 * dt * k1)
        k3 = rhs(t + 0.5 * dt, h + 0.5 * dt * k2)
        k4 = rhs(t + dt, h + dt * k3)
        h = h + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        t = k * dt
        if not np.all(np.isfinite(h)):
            raise FloatingPointError("non-finite linearized state")
        if k % cadence == 0 or k == n_steps:
            times.append(t)
            Fs.append(marker_free_energy(mk, h, t))
    return LinearizedRun(np.array(times), np.array(Fs), h, mk)
