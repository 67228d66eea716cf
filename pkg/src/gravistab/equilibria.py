"""Self-consistent isotropic steady states F(E): polytropes, King, tabulated laws.

Every law is written in terms of the depth y = E0 - E >= 0, so the cutoff E0
is an output of the build rather than an input.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Union
import warnings

import numpy as np
from scipy import optimize, special
from scipy.integrate import solve_ivp

from .radial_numerics import (FOUR_PI, MonotoneMap, RadialGrid, RadialProfile,
                              cumulative_integral, make_grid, solve_radial_poisson,
                              velocity_moment)

SQRT2 = np.sqrt(2.0)


def polytrope_density_constant(n: float, C_F: float = 1.0) -> float:
    """c_n with rho = c_n (E0 - phi)_+^(n + 3/2) for F = C_F (E0 - E)_+^n."""
    if n <= -1:
        raise ValueError("divergent density constant for n <= -1")
    log_c = 1.5 * np.log(2.0) + 1.5 * np.log(np.pi) + special.gammaln(n + 1.0) - special.gammaln(n + 2.5)
    return float(C_F * np.exp(log_c))


@dataclass(frozen=True)
class Polytrope:
    n: float
    C_F: float = 1.0

    def __post_init__(self):
        if not (-0.5 < self.n <= 3.5):
            raise ValueError("polytropic index must lie in (-1/2, 7/2]")
        if self.C_F <= 0:
            raise ValueError("C_F must be positive")

    @property
    def name(self):
        return "polytrope"

    def F_depth(self, y):
        y = np.asarray(y, dtype=float)
        yp = np.clip(y, 0.0, None)
        return np.where(y > 0, self.C_F * yp ** self.n, 0.0)

    def dF_depth(self, y):
        """dF/dy = -F'(E)."""
        y = np.asarray(y, dtype=float)
        yp = np.where(y > 0, y, 1.0)
        return np.where(y > 0, self.C_F * self.n * yp ** (self.n - 1.0), 0.0)

    def density(self, u):
        u = np.clip(np.asarray(u, dtype=float), 0.0, None)
        return polytrope_density_constant(self.n, self.C_F) * u ** (self.n + 1.5)

    def density_slope(self, u):
        """d rho / du, which is the effective potential -int F'(E) dv."""
        u = np.clip(np.asarray(u, dtype=float), 0.0, None)
        return polytrope_density_constant(self.n, self.C_F) * (self.n + 1.5) * u ** (self.n + 0.5)

    def params(self):
        return {"kind": "polytrope", "n": self.n, "C_F": self.C_F}


# King: rho(u) = 4 pi sqrt2 sum_k Gamma(3/2) u^(k+3/2) / Gamma(k+5/2), k >= 1
_KING_TERMS = np.arange(1, 120)
_KING_LOGC = special.gammaln(1.5) - special.gammaln(_KING_TERMS + 2.5)


@dataclass(frozen=True)
class King:
    @property
    def name(self):
        return "king"

    def F_depth(self, y):
        y = np.asarray(y, dtype=float)
        return np.where(y > 0, np.expm1(np.clip(y, 0.0, 700.0)), 0.0)

    def dF_depth(self, y):
        y = np.asarray(y, dtype=float)
        return np.where(y > 0, np.exp(np.clip(y, 0.0, 700.0)), 0.0)

    def density(self, u):
        u = np.clip(np.asarray(u, dtype=float), 0.0, None)
        small = u < 8.0
        out = np.empty_like(u)
        us = np.where(small, u, 0.0)[..., None]
        with np.errstate(divide="ignore"):
            logs = np.where(us > 0, np.log(np.where(us > 0, us, 1.0)), -np.inf)
        terms = np.exp(_KING_LOGC + (_KING_TERMS + 1.5) * logs)
        out[small] = np.sum(terms, axis=-1)[small]
        ub = u[~small]
        out[~small] = (np.exp(ub) * special.gamma(1.5) * special.gammainc(1.5, ub)
                       - (2.0 / 3.0) * ub ** 1.5)
        return FOUR_PI * SQRT2 * out

    def density_slope(self, u):
        u = np.clip(np.asarray(u, dtype=float), 0.0, None)
        small = u < 8.0
        out = np.empty_like(u)
        us = np.where(small, u, 0.0)[..., None]
        with np.errstate(divide="ignore"):
            logs = np.where(us > 0, np.log(np.where(us > 0, us, 1.0)), -np.inf)
        terms = (_KING_TERMS + 1.5) * np.exp(_KING_LOGC + (_KING_TERMS + 0.5) * logs)
        out[small] = np.sum(terms, axis=-1)[small]
        ub = u[~small]
        out[~small] = np.exp(ub) * special.gamma(1.5) * special.gammainc(1.5, ub)
        return FOUR_PI * SQRT2 * out

    def params(self):
        return {"kind": "king"}


@dataclass(frozen=True)
class TabulatedF:
    """F given as a table over the depth y = E0 - E; must vanish at y = 0 and increase."""

    table: MonotoneMap
    _rho_u: np.ndarray = field(init=False, repr=False, compare=False)
    _rho: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        y, F = self.table.breakpoints, self.table.values
        if y[0] != 0.0 or F[0] != 0.0:
            raise ValueError("tabulated law must start at (0, 0)")
        # flatten ties so F stays non-decreasing in the depth
        F = np.maximum.accumulate(F)
        object.__setattr__(self, "table", MonotoneMap(y, F, "increasing"))
        u = np.linspace(0.0, y[-1], 801)
        rho = velocity_moment(lambda E: self.F_depth(-E), -u, 0.0, 0)
        object.__setattr__(self, "_rho_u", u)
        object.__setattr__(self, "_rho", rho)
        if np.any(np.diff(F) == 0.0):
            warnings.warn("tabulated F has flat pieces; F' < 0 fails there", RuntimeWarning)

    @property
    def name(self):
        return "tabulated"

    def F_depth(self, y):
        y = np.asarray(y, dtype=float)
        top = self.table.breakpoints[-1]
        return np.where(y > 0, self.table(np.clip(y, 0.0, top)), 0.0)

    def dF_depth(self, y):
        y = np.asarray(y, dtype=float)
        x, v = self.table.breakpoints, self.table.values
        slopes = np.diff(v) / np.diff(x)
        k = np.clip(np.searchsorted(x, y, side="right") - 1, 0, slopes.size - 1)
        return np.where(y > 0, slopes[k], 0.0)

    def density(self, u):
        return np.interp(u, self._rho_u, self._rho, left=0.0)

    def density_slope(self, u):
        return np.interp(u, self._rho_u, np.gradient(self._rho, self._rho_u), left=0.0)

    def params(self):
        return {"kind": "tabulated", "depth": self.table.breakpoints.tolist(),
                "F": self.table.values.tolist()}


AnsatzLaw = Union[Polytrope, King, TabulatedF]


class NonCompactSupport(RuntimeError):
    """Shooting never reached u = 0; carries the partial profile (r, u, du/dr)."""

    def __init__(self, message, r, u, du):
        super().__init__(message)
        self.r, self.u, self.du = r, u, du


@dataclass(frozen=True)
class EquilibriumModel:
    law: AnsatzLaw
    E0: float
    phi: RadialProfile
    rho: RadialProfile
    dphi: RadialProfile
    M: float
    R: float
    phi_c: float
    u_c: float

    @property
    def grid(self) -> RadialGrid:
        return self.phi.grid

    def F(self, E):
        return self.law.F_depth(self.E0 - np.asarray(E, dtype=float))

    def Fprime(self, E):
        return -self.law.dF_depth(self.E0 - np.asarray(E, dtype=float))

    def f(self, r, w):
        """f0 at radius r and speed w."""
        return self.F(0.5 * np.asarray(w) ** 2 + self.phi(r))

    def potential(self, r):
        """phi at any r >= 0, with the exterior -M/(4 pi r) tail."""
        return self.phi(r)

    def escape_speed(self, r):
        """Largest speed inside the support at radius r."""
        return np.sqrt(2.0 * np.clip(self.E0 - self.phi(r), 0.0, None))


def eval_F(model: EquilibriumModel, E):
    return model.F(E)


def eval_Fprime(model: EquilibriumModel, E):
    return model.Fprime(E)


def _shoot(law, u_c, r_stop, rtol=1e-11, atol=1e-12):
    rho_c = float(law.density(u_c))
    r0 = min(1e-4, 1e-3 / np.sqrt(max(rho_c, 1e-300)))
    y0 = [u_c - rho_c * r0 ** 2 / 6.0, -rho_c * r0 / 3.0]

    def rhs(r, y):
        return [y[1], -law.density(max(y[0], 0.0)) - 2.0 * y[1] / r]

    def edge(r, y):
        return y[0]
    edge.terminal = True
    edge.direction = -1
    sol = solve_ivp(rhs, (r0, r_stop), y0, method="RK45", rtol=rtol, atol=atol,
                    events=edge, dense_output=True)
    return sol, r0, rho_c


def build_equilibrium(law: AnsatzLaw, u_c: float, grid: Optional[RadialGrid] = None,
                      n_nodes: int = 2048, r_stop: Optional[float] = None) -> EquilibriumModel:
    """Shoot (1/r^2)(r^2 u')' = -rho(u) from u(0) = u_c, u'(0) = 0 out to the first zero of u."""
    if u_c <= 0:
        raise ValueError("central depth u_c must be positive")
    rho_c = float(law.density(u_c))
    scale = 1.0 / np.sqrt(rho_c / u_c)
    if r_stop is None:
        r_stop = grid.r_max if grid is not None else 200.0 * scale
    sol, r0, rho_c = _shoot(law, u_c, r_stop)
    if sol.status != 1 or len(sol.t_events[0]) == 0:
        raise NonCompactSupport("non-compact support", sol.t, sol.y[0], sol.y[1])
    # refine the edge by bisection on the dense output
    t_hit = sol.t_events[0][0]
    lo = sol.t[-2] if sol.t.size > 1 else r0
    hi = t_hit
    step = 1e-9 * (t_hit - lo) + 1e-15
    while sol.sol(hi)[0] > 0:
        hi += step
        step *= 2.0
    R = optimize.bisect(lambda rr: sol.sol(rr)[0], lo, hi, xtol=1e-13, maxiter=200)
    if grid is None:
        grid = make_grid(R, n_nodes)
    elif grid.r_max < R:
        raise NonCompactSupport("non-compact support", sol.t, sol.y[0], sol.y[1])
    r = grid.nodes
    # re-integrate onto the grid nodes for accurate node values
    inside = (r > r0) & (r < R)
    u = np.zeros_like(r)
    du = np.zeros_like(r)
    small = r <= r0
    u[small] = u_c - rho_c * r[small] ** 2 / 6.0
    du[small] = -rho_c * r[small] / 3.0
    if np.any(inside):
        sol2 = solve_ivp(lambda rr, y: [y[1], -law.density(max(y[0], 0.0)) - 2.0 * y[1] / rr],
                         (r0, R), [u_c - rho_c * r0 ** 2 / 6.0, -rho_c * r0 / 3.0],
                         method="RK45", rtol=1e-11, atol=1e-12, t_eval=r[inside])
        u[inside] = sol2.y[0]
        du[inside] = sol2.y[1]
    u_R, du_R = sol.sol(R)
    # mass from the exterior field: phi'(R) = M / (4 pi R^2)
    M = FOUR_PI * R ** 2 * (-du_R)
    E0 = -M / (FOUR_PI * R)
    out = r >= R
    u[out] = 0.0
    du[out] = -M / (FOUR_PI * r[out] ** 2)
    u = np.clip(u, 0.0, None)
    phi_vals = E0 - u
    phi_vals[out] = -M / (FOUR_PI * r[out])
    rho_vals = law.density(u)
    rho_vals[out] = 0.0
    phi = RadialProfile(grid, phi_vals, "inverse_r", 1.0)
    dphi = RadialProfile(grid, -du, "inverse_r", 2.0)
    rho = RadialProfile(grid, rho_vals, "zero")
    return EquilibriumModel(law, float(E0), phi, rho, dphi, float(M), float(R), float(phi_vals[0]), float(u_c))


def self_consistency_residual(model: EquilibriumModel):
    """Relative residuals of the equilibrium equations on the model grid.

    Returns (moment, poisson, moment_outer): the density against the velocity
    integral of F (bulk and outer 1% of the support), and the field against a
    fresh Poisson solve of the density.
    """
    r = model.grid.nodes
    inside = r < model.R
    moment = velocity_moment(model.F, model.phi.values, model.E0, 0)
    rel = np.abs(moment - model.rho.values) / model.rho.values[0]
    outer = inside & (r >= 0.99 * model.R)
    bulk = inside & ~outer
    _, dphi_new, M_new = solve_radial_poisson(model.rho)
    scale = np.max(np.abs(model.dphi.values))
    pois = np.max(np.abs(dphi_new.values - model.dphi.values)) / scale
    pois = max(pois, abs(M_new - model.M) / model.M)
    return float(np.max(rel[bulk])), float(pois), float(np.max(rel[outer], initial=0.0))


def lane_emden_scaled(n: float, u_c: float = 1.0, C_F: float = 1.0, xi_max: float = 10.0):
    """Dimensionless Lane-Emden profile theta(xi) built through the shooting solver.

    theta = u/u_c and xi = r sqrt(c_n u_c^(n + 1/2)).  For n >= 7/2 the support is
    infinite and the partial profile carried by NonCompactSupport is used.
    """
    law = Polytrope(n, C_F)
    c_n = polytrope_density_constant(n, C_F)
    a = 1.0 / np.sqrt(c_n * u_c ** (n + 0.5))
    sol, r0, rho_c = _shoot(law, u_c, 1.2 * xi_max * a)
    r_end = sol.t[-1]
    xi = np.linspace(0.0, min(xi_max, r_end / a), 2001)
    r = xi * a
    u = np.where(r > r0, sol.sol(np.maximum(r, r0))[0], u_c - rho_c * r ** 2 / 6.0)
    theta = u / u_c
    keep = xi <= xi_max
    return xi[keep], theta[keep]


@dataclass
class ParticleEnsemble:
    positions: np.ndarray
    velocities: np.ndarray
    weights: np.ndarray
    time: float = 0.0

    def __post_init__(self):
        self.positions = np.ascontiguousarray(self.positions, dtype=float)
        self.velocities = np.ascontiguousarray(self.velocities, dtype=float)
        self.weights = np.ascontiguousarray(self.weights, dtype=float)
        n = self.weights.size
        if self.positions.shape != (n, 3) or self.velocities.shape != (n, 3):
            raise ValueError("positions and velocities must be N x 3")
        if np.any(self.weights <= 0):
            raise ValueError("weights must be positive")

    @property
    def N(self):
        return self.weights.size

    @property
    def mass(self):
        return float(np.sum(self.weights))

    def copy(self):
        return ParticleEnsemble(self.positions.copy(), self.velocities.copy(), self.weights.copy(), self.time)


def make_rng(seed: int) -> np.random.Generator:
    """Counter-based generator so streams do not depend on scheduling."""
    return np.random.Generator(np.random.Philox(int(seed)))


def _isotropic(rng, n):
    z = rng.uniform(-1.0, 1.0, n)
    ph = rng.uniform(0.0, 2.0 * np.pi, n)
    s = np.sqrt(1.0 - z ** 2)
    return np.stack([s * np.cos(ph), s * np.sin(ph), z], axis=1)


def sample_particles(model: EquilibriumModel, N: int, seed: int) -> ParticleEnsemble:
    """Equal-weight samples of f0: radius from the mass profile, speed by rejection."""
    if N < 1:
        raise ValueError("N must be at least 1")
    rng = make_rng(seed)
    r = model.grid.nodes
    cum = cumulative_integral(r, lambda s: FOUR_PI * s ** 2 * model.rho(s))
    cum = cum / cum[-1]
    keep = np.concatenate([[True], np.diff(cum) > 0])
    radii = np.interp(rng.uniform(0.0, 1.0, N), cum[keep], r[keep])
    # speed: density w^2 F(w^2/2 + phi) on [0, w_esc]; bound the envelope on a fine grid
    phi_r = model.phi(radii)
    w_esc = np.sqrt(2.0 * np.clip(model.E0 - phi_r, 0.0, None))
    t_grid = np.linspace(0.0, 1.0, 257)
    env = np.max(t_grid ** 2 * model.F(model.E0 - (model.E0 - phi_r[:, None]) * (1.0 - t_grid ** 2)), axis=1)
    env = 1.05 * env + 1e-300
    t = np.empty(N)
    todo = np.arange(N)
    while todo.size:
        tt = rng.uniform(0.0, 1.0, todo.size)
        acc = rng.uniform(0.0, 1.0, todo.size) * env[todo]
        val = tt ** 2 * model.F(phi_r[todo] + 0.5 * (tt * w_esc[todo]) ** 2)
        ok = acc < val
        t[todo[ok]] = tt[ok]
        todo = todo[~ok]
    speeds = t * w_esc
    pos = radii[:, None] * _isotropic(rng, N)
    vel = speeds[:, None] * _isotropic(rng, N)
    w = np.full(N, model.M / N)
    w[-1] = model.M - np.sum(w[:-1])
    return ParticleEnsemble(pos, vel, w, 0.0)


@dataclass(frozen=True)
class TransformedModel:
    """g(x, v) = gamma f0((x - x0)/lam, mu v), with scaling laws for its functionals."""

    model: EquilibriumModel
    gamma: float = 1.0
    lam: float = 1.0
    mu: float = 1.0
    x0: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if min(self.gamma, self.lam, self.mu) <= 0:
            raise ValueError("gamma, lambda, mu must be positive")
        object.__setattr__(self, "x0", tuple(float(c) for c in self.x0))

    def compose(self, gamma=1.0, lam=1.0, mu=1.0, x0=(0.0, 0.0, 0.0)) -> "TransformedModel":
        """Apply a further transform on top of this one."""
        shift = np.asarray(x0, dtype=float) + lam * np.asarray(self.x0)
        return TransformedModel(self.model, self.gamma * gamma, self.lam * lam, self.mu * mu, tuple(shift))

    def f(self, x, v):
        x = np.asarray(x, dtype=float)
        v = np.asarray(v, dtype=float)
        r = np.linalg.norm((x - np.asarray(self.x0)) / self.lam, axis=-1)
        w = np.linalg.norm(self.mu * v, axis=-1)
        return self.gamma * self.model.f(r, w)

    @property
    def mass(self):
        return self.gamma * self.lam ** 3 * self.mu ** -3 * self.model.M

    def rho(self, r):
        """Density as a function of the distance to x0."""
        return self.gamma * self.mu ** -3 * self.model.rho(np.asarray(r) / self.lam)

    def density_profile(self) -> RadialProfile:
        grid = RadialGrid(self.model.grid.nodes * self.lam)
        return RadialProfile(grid, self.gamma * self.mu ** -3 * self.model.rho.values, "zero")


def symmetry_transform(model: EquilibriumModel, gamma: float, lam: float, mu: float, x0=(0.0, 0.0, 0.0)):
    return TransformedModel(model, gamma, lam, mu, tuple(x0))
