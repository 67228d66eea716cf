"""Radial grids, quadrature, monotone inversion and the radial Poisson solver.

Unit convention: the potential solves Laplacian(phi) = rho, so that
phi = -(1/(4 pi |x|)) * rho and phi'(r) = r^-2 int_0^r s^2 rho(s) ds.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional
import warnings

import numpy as np
from numpy.polynomial.legendre import leggauss
from scipy import sparse
from scipy.interpolate import PchipInterpolator

FOUR_PI = 4.0 * np.pi

_GL4_X, _GL4_W = leggauss(4)


@dataclass(frozen=True)
class RadialGrid:
    """Strictly increasing radii starting at r = 0."""

    nodes: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.nodes, dtype=float)
        if r.ndim != 1 or r.size < 16:
            raise ValueError("radial grid needs at least 16 nodes")
        if r[0] != 0.0:
            raise ValueError("radial grid must start at r = 0")
        if np.any(np.diff(r) <= 0):
            raise ValueError("radial grid nodes must be strictly increasing")
        r.setflags(write=False)
        object.__setattr__(self, "nodes", r)

    @property
    def r_max(self) -> float:
        return float(self.nodes[-1])

    def __len__(self):
        return self.nodes.size


def make_grid(r_support: float, n: int = 2048, r_max: Optional[float] = None,
              refine: float = 4.0, outer_fraction: float = 0.1) -> RadialGrid:
    """Uniform grid with `refine`-times denser spacing in the outer part of the support.

    Nodes past r_support (if r_max > r_support) use the coarse spacing again.
    """
    if r_max is None:
        r_max = r_support
    if r_max < r_support:
        raise ValueError("r_max must not be below the support radius")
    r_in = (1.0 - outer_fraction) * r_support
    lengths = np.array([r_in, refine * outer_fraction * r_support, r_max - r_support])
    counts = np.maximum(np.round((n - 1) * lengths / lengths.sum()).astype(int), 0)
    counts[1] = max(counts[1], 1)
    counts[0] = (n - 1) - counts[1] - counts[2]
    pieces = [np.linspace(0.0, r_in, counts[0] + 1)]
    pieces.append(np.linspace(r_in, r_support, counts[1] + 1)[1:])
    if counts[2] > 0:
        pieces.append(np.linspace(r_support, r_max, counts[2] + 1)[1:])
    return RadialGrid(np.concatenate(pieces))


EXTRAPOLATIONS = ("zero", "inverse_r")


@dataclass(frozen=True)
class RadialProfile:
    """Node values on a RadialGrid, shape-preserving cubic in between.

    For r > r_max the profile is either zero or value(r_max) * (r_max / r)**decay.
    """

    grid: RadialGrid
    values: np.ndarray
    extrapolation: str = "zero"
    decay: float = 1.0
    _interp: PchipInterpolator = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        v = np.array(self.values, dtype=float)
        if v.shape != self.grid.nodes.shape:
            raise ValueError("profile values must match grid length")
        if self.extrapolation not in EXTRAPOLATIONS:
            raise ValueError(f"unknown extrapolation {self.extrapolation!r}")
        if not np.all(np.isfinite(v)):
            raise ValueError("non-finite profile")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "_interp", PchipInterpolator(self.grid.nodes, v, extrapolate=False))

    @property
    def r(self) -> np.ndarray:
        return self.grid.nodes

    def __call__(self, r):
        r = np.asarray(r, dtype=float)
        out = np.empty(r.shape)
        inside = r <= self.grid.r_max
        out[inside] = self._interp(np.clip(r[inside], 0.0, None))
        rr = r[~inside]
        if self.extrapolation == "zero":
            out[~inside] = 0.0
        else:
            out[~inside] = self.values[-1] * (self.grid.r_max / rr) ** self.decay
        return out if out.ndim else float(out)

    def derivative(self, r):
        """Derivative of the interpolant (of the extrapolated tail beyond r_max)."""
        r = np.asarray(r, dtype=float)
        out = np.empty(r.shape)
        inside = r <= self.grid.r_max
        out[inside] = self._interp.derivative()(np.clip(r[inside], 0.0, None))
        rr = r[~inside]
        if self.extrapolation == "zero":
            out[~inside] = 0.0
        else:
            out[~inside] = -self.decay * self.values[-1] * self.grid.r_max ** self.decay / rr ** (self.decay + 1)
        return out if out.ndim else float(out)

    def with_values(self, values, extrapolation=None, decay=None) -> "RadialProfile":
        return RadialProfile(self.grid, values,
                             self.extrapolation if extrapolation is None else extrapolation,
                             self.decay if decay is None else decay)


def cell_gauss_points(nodes: np.ndarray, order: int = 4):
    """Gauss-Legendre points and weights on every cell of `nodes`; shapes (cells, order)."""
    if order == 4:
        x, w = _GL4_X, _GL4_W
    else:
        x, w = leggauss(order)
    a, b = nodes[:-1, None], nodes[1:, None]
    half = 0.5 * (b - a)
    return a + half * (x + 1.0), half * w


def _check_finite(p: RadialProfile):
    if not np.all(np.isfinite(p.values)):
        raise ValueError("non-finite profile")


def integrate_radial(p: RadialProfile, weight: Optional[Callable] = None) -> float:
    """4 pi int_0^{r_max} r^2 weight(r) p(r) dr by composite 4-point Gauss-Legendre."""
    _check_finite(p)
    pts, wts = cell_gauss_points(p.grid.nodes)
    vals = p(pts) * pts ** 2
    if weight is not None:
        vals = vals * weight(pts)
    return float(FOUR_PI * np.sum(vals * wts))


def cumulative_integral(nodes: np.ndarray, fn: Callable, order: int = 4) -> np.ndarray:
    """int_0^{r_k} fn(s) ds at every node, by per-cell Gauss-Legendre."""
    pts, wts = cell_gauss_points(nodes, order)
    cell = np.sum(fn(pts) * wts, axis=1)
    return np.concatenate([[0.0], np.cumsum(cell)])


def solve_radial_poisson(rho: RadialProfile):
    """Potential, field and mass of a radial density supported on the grid.

    phi(r) = -(1/r) int_0^r s^2 rho ds - int_r^{r_max} s rho ds, which equals
    -M/(4 pi r) outside the grid and phi(r_max) - int_r^{r_max} phi' inside.
    """
    _check_finite(rho)
    if np.any(rho.values < 0):
        raise ValueError("negative density")
    r = rho.grid.nodes
    inner = cumulative_integral(r, lambda s: s ** 2 * rho(s))
    outer_cum = cumulative_integral(r, lambda s: s * rho(s))
    outer = outer_cum[-1] - outer_cum
    dphi = np.zeros_like(r)
    dphi[1:] = inner[1:] / r[1:] ** 2
    phi = np.empty_like(r)
    phi[0] = -outer[0]
    phi[1:] = -inner[1:] / r[1:] - outer[1:]
    M = FOUR_PI * inner[-1]
    phi_p = RadialProfile(rho.grid, phi, "inverse_r", 1.0)
    dphi_p = RadialProfile(rho.grid, dphi, "inverse_r", 2.0)
    return phi_p, dphi_p, float(M)


def potential_energy(dphi: RadialProfile) -> float:
    """(1/2) int |grad phi|^2 dx, including the exterior tail of an inverse-square field."""
    interior = 0.5 * integrate_radial(dphi, lambda s: dphi(s))
    tail = 0.0
    if dphi.extrapolation == "inverse_r":
        p = dphi.decay
        R = dphi.grid.r_max
        if 2.0 * p - 2.0 <= 1.0:
            raise ValueError("field tail decays too slowly for finite energy")
        tail = 0.5 * FOUR_PI * dphi.values[-1] ** 2 * R ** 3 / (2.0 * p - 3.0)
    return float(interior + tail)


def fd_weights(x0: float, x: np.ndarray, m: int) -> np.ndarray:
    """Finite-difference weights for derivatives 0..m at x0 from nodes x (Fornberg)."""
    n = x.size
    c = np.zeros((n, m + 1))
    c1, c4 = 1.0, x[0] - x0
    c[0, 0] = 1.0
    for i in range(1, n):
        mn = min(i, m)
        c2, c5, c4 = 1.0, c4, x[i] - x0
        for j in range(i):
            c3 = x[i] - x[j]
            c2 *= c3
            if j == i - 1:
                for k in range(mn, 0, -1):
                    c[i, k] = c1 * (k * c[i - 1, k - 1] - c5 * c[i - 1, k]) / c2
                c[i, 0] = -c1 * c5 * c[i - 1, 0] / c2
            for k in range(mn, 0, -1):
                c[j, k] = (c4 * c[j, k] - k * c[j, k - 1]) / c3
            c[j, 0] = c4 * c[j, 0] / c3
        c1 = c2
    return c


def fd_matrix(x: np.ndarray, deriv: int = 1, width: int = 5):
    """Sparse differentiation matrix with `width`-point stencils (4th order for width 5).

    Stencils are centered where possible and one-sided near the ends.
    """
    x = np.asarray(x, dtype=float)
    n = x.size
    half = width // 2
    rows, cols, vals = [], [], []
    for i in range(n):
        lo = min(max(i - half, 0), n - width)
        idx = np.arange(lo, lo + width)
        rows.append(np.full(width, i))
        cols.append(idx)
        vals.append(fd_weights(x[i], x[idx], deriv)[:, deriv])
    return sparse.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n))


def poisson_residual(phi: RadialProfile, rho: RadialProfile) -> np.ndarray:
    """(1/r^2)(r^2 phi')' - rho at interior nodes, by 4th-order finite differences."""
    r = phi.grid.nodes
    d1 = fd_matrix(r, 1) @ phi.values
    d2 = fd_matrix(r, 2) @ phi.values
    res = d2[1:-1] + 2.0 * d1[1:-1] / r[1:-1] - rho.values[1:-1]
    return res


@dataclass(frozen=True)
class MonotoneMap:
    """Piecewise-linear monotone map with a right-continuous generalized inverse."""

    breakpoints: np.ndarray
    values: np.ndarray
    direction: str = "increasing"

    def __post_init__(self):
        x = np.array(self.breakpoints, dtype=float)
        y = np.array(self.values, dtype=float)
        if x.shape != y.shape or x.ndim != 1 or x.size < 1:
            raise ValueError("breakpoints and values must be 1-d of equal length")
        if np.any(np.diff(x) < 0):
            raise ValueError("breakpoints must be increasing")
        dy = np.diff(y)
        if self.direction == "increasing":
            ok = np.all(dy >= 0)
        elif self.direction == "decreasing":
            ok = np.all(dy <= 0)
        else:
            raise ValueError(f"unknown direction {self.direction!r}")
        if not ok:
            raise ValueError("values are not monotone in the declared direction")
        object.__setattr__(self, "breakpoints", x)
        object.__setattr__(self, "values", y)

    def __call__(self, x):
        return np.interp(x, self.breakpoints, self.values)


def monotone_invert(m: MonotoneMap, y, return_flag: bool = False):
    """Generalized inverse: the smallest abscissa where the map reaches y.

    Values outside the range are clamped to the nearest endpoint and flagged.
    """
    x, v = m.breakpoints, m.values
    y_arr = np.atleast_1d(np.asarray(y, dtype=float))
    if m.direction == "increasing":
        lo, hi = v[0], v[-1]
        k = np.searchsorted(v, y_arr, side="left")
    else:
        lo, hi = v[-1], v[0]
        k = np.searchsorted(-v, -y_arr, side="left")
    out_of_range = (y_arr < lo) | (y_arr > hi)
    k = np.clip(k, 0, x.size - 1)
    out = np.empty_like(y_arr)
    first = k == 0
    out[first] = x[0]
    j = k[~first]
    y0, y1 = v[j - 1], v[j]
    t = (y_arr[~first] - y0) / (y1 - y0)
    out[~first] = x[j - 1] + np.clip(t, 0.0, 1.0) * (x[j] - x[j - 1])
    high = (y_arr > hi) if m.direction == "increasing" else (y_arr < lo)
    out[high] = x[-1]
    if np.any(out_of_range) and not return_flag:
        warnings.warn("monotone_invert: value outside range, clamped", RuntimeWarning)
    res = out if np.ndim(y) else float(out[0])
    if return_flag:
        return res, (out_of_range if np.ndim(y) else bool(out_of_range[0]))
    return res


_THETA_X, _THETA_W = leggauss(48)
_THETA = 0.25 * np.pi * (_THETA_X + 1.0)
_THETA_WT = 0.25 * np.pi * _THETA_W


def velocity_moment(F: Callable, phi_at_r, E0: float, k: int = 0):
    """int F(|v|^2/2 + phi) |v|^k dv for isotropic F vanishing above E0.

    Uses E = E0 - u cos^2(theta) with u = E0 - phi, which removes the
    square-root behaviour at both ends of the energy range.
    """
    if k < 0:
        raise ValueError("unsupported moment order k < 0")
    phi = np.asarray(phi_at_r, dtype=float)
    u = np.clip(E0 - phi, 0.0, None)
    uu = u[..., None]
    s, c = np.sin(_THETA), np.cos(_THETA)
    E = E0 - uu * c ** 2
    a = 0.5 * (k + 1)
    integrand = F(E) * (uu * s ** 2) ** a * 2.0 * uu * s * c
    val = FOUR_PI * 2.0 ** a * np.sum(integrand * _THETA_WT, axis=-1)
    val = np.where(u > 0, val, 0.0)
    return val if val.ndim else float(val)
