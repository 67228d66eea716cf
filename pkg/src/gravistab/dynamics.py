"""Particle evolution of the self-gravitating collisionless system.

Mean-field solvers: an exact shell solver for spherical data (one sort plus
prefix sums), softened direct summation, and a quadrupole-order shell
expansion about the centre of mass for weakly non-spherical data.  Time stepping is
kick-drift-kick leapfrog; diagnostics track the energy, binned norms of the
phase-space density and the shift-corrected distance to a reference model.
"""
from __future__ import annotations

import csv
import struct
import warnings
from dataclasses import dataclass, field
from typing import List, Optional

import numba
import numpy as np

from .equilibria import EquilibriumModel, ParticleEnsemble, make_rng, sample_particles
from .functionals import (PhaseGrid, bin_ensemble, default_phase_grid, ensemble_potential_energy,
                          estimate_shift, grid_model, model_energy, weighted_shift_distance)
from .radial_numerics import FOUR_PI

# prefer OpenMP or the built-in work queue over an outdated TBB
numba.config.THREADING_LAYER_PRIORITY = ["omp", "workqueue", "tbb"]

DIRECT_BUDGET = 20000


def dynamical_time(model: EquilibriumModel) -> float:
    """Circular-orbit period at the support edge, 2 pi sqrt(4 pi R^3 / M)."""
    return float(2.0 * np.pi * np.sqrt(FOUR_PI * model.R ** 3 / model.M))


# ---------------------------------------------------------------------------
# solvers

def field_radial(e: ParticleEnsemble) -> np.ndarray:
    """Shell-theorem accelerations -m(<r_i) x_i / (4 pi r_i^3).

    m(<r) counts the weight strictly inside r_i plus half the weight of other
    particles at exactly the same radius.
    """
    x = e.positions
    r = np.sqrt(np.einsum("ij,ij->i", x, x))
    order = np.argsort(r, kind="stable")
    rs, ws = r[order], e.weights[order]
    csum = np.concatenate([[0.0], np.cumsum(ws)])
    if np.all(np.diff(rs) > 0):
        enclosed = csum[:-1]
    else:
        first = np.searchsorted(rs, rs, side="left")
        last = np.searchsorted(rs, rs, side="right")
        enclosed = csum[first] + 0.5 * (csum[last] - csum[first] - ws)
    m_in = np.empty_like(r)
    m_in[order] = enclosed
    with np.errstate(divide="ignore", invalid="ignore"):
        coef = np.where(r > 0, -m_in / (FOUR_PI * r ** 3), 0.0)
    return coef[:, None] * x


@numba.njit(parallel=True, fastmath=False, cache=True)
def _direct_kernel(x, w, eps2):
    n = x.shape[0]
    acc = np.zeros((n, 3))
    for i in numba.prange(n):
        ax = 0.0
        ay = 0.0
        az = 0.0
        for j in range(n):
            if j == i:
                continue
            dx = x[i, 0] - x[j, 0]
            dy = x[i, 1] - x[j, 1]
            dz = x[i, 2] - x[j, 2]
            d2 = dx * dx + dy * dy + dz * dz + eps2
            f = w[j] / (d2 * np.sqrt(d2))
            ax -= f * dx
            ay -= f * dy
            az -= f * dz
        acc[i, 0] = ax / (4.0 * np.pi)
        acc[i, 1] = ay / (4.0 * np.pi)
        acc[i, 2] = az / (4.0 * np.pi)
    return acc


@numba.njit(parallel=True, cache=True)
def _direct_energy_rows(x, w, eps2):
    n = x.shape[0]
    rows = np.zeros(n)
    for i in numba.prange(n):
        s = 0.0
        for j in range(i + 1, n):
            dx = x[i, 0] - x[j, 0]
            dy = x[i, 1] - x[j, 1]
            dz = x[i, 2] - x[j, 2]
            s += w[j] / np.sqrt(dx * dx + dy * dy + dz * dz + eps2)
        rows[i] = w[i] * s / (4.0 * np.pi)
    return rows


def default_softening(model: EquilibriumModel, N: int) -> float:
    return float(model.R * N ** (-1.0 / 3.0) / 10.0)


def field_direct(e: ParticleEnsemble, eps: float) -> np.ndarray:
    """Softened pair sum -sum_j w_j (x_i - x_j) / (4 pi (|x_i - x_j|^2 + eps^2)^(3/2))."""
    if eps <= 0:
        raise ValueError("softening must be positive")
    if e.N > DIRECT_BUDGET:
        raise ValueError(f"N = {e.N} exceeds the direct-summation budget ({DIRECT_BUDGET}); use field_radial")
    return _direct_kernel(e.positions, e.weights, float(eps) ** 2)


class RadialSolver:
    name = "radial"
    spherical = True

    def accelerations(self, e: ParticleEnsemble) -> np.ndarray:
        return field_radial(e)

    def potential_energy(self, e: ParticleEnsemble) -> float:
        return ensemble_potential_energy(e)


class DirectSolver:
    name = "direct"
    spherical = False

    def __init__(self, eps: float):
        if eps <= 0:
            raise ValueError("softening must be positive")
        self.eps = float(eps)

    def accelerations(self, e: ParticleEnsemble) -> np.ndarray:
        return field_direct(e, self.eps)

    def potential_energy(self, e: ParticleEnsemble) -> float:
        """sum_{i<j} w_i w_j / (4 pi sqrt(|x_i - x_j|^2 + eps^2)), summed in fixed order."""
        return float(np.sum(_direct_energy_rows(e.positions, e.weights, self.eps ** 2)))


_C0 = 1.0 / np.sqrt(FOUR_PI)
_C1 = np.sqrt(3.0 / FOUR_PI)
_C2 = np.sqrt(15.0 / FOUR_PI)
_C2z = np.sqrt(5.0 / (4.0 * FOUR_PI))
_C2d = np.sqrt(15.0 / (4.0 * FOUR_PI))
_NHARM = (1, 4, 9)


@numba.njit(cache=True)
def _harmonics(y0, y1, y2, nh, R, G):
    """Real orthonormal regular solid harmonics r^l Y_lm and their gradients, l <= 2."""
    R[0] = _C0
    for m in range(nh):
        G[m, 0] = 0.0
        G[m, 1] = 0.0
        G[m, 2] = 0.0
    if nh > 1:
        R[1] = _C1 * y0
        R[2] = _C1 * y1
        R[3] = _C1 * y2
        G[1, 0] = _C1
        G[2, 1] = _C1
        G[3, 2] = _C1
    if nh > 4:
        R[4] = _C2 * y0 * y1
        R[5] = _C2 * y1 * y2
        R[6] = _C2 * y0 * y2
        R[7] = _C2z * (2.0 * y2 * y2 - y0 * y0 - y1 * y1)
        R[8] = _C2d * (y0 * y0 - y1 * y1)
        G[4, 0] = _C2 * y1
        G[4, 1] = _C2 * y0
        G[5, 1] = _C2 * y2
        G[5, 2] = _C2 * y1
        G[6, 0] = _C2 * y2
        G[6, 2] = _C2 * y0
        G[7, 0] = -2.0 * _C2z * y0
        G[7, 1] = -2.0 * _C2z * y1
        G[7, 2] = 4.0 * _C2z * y2
        G[8, 0] = 2.0 * _C2d * y0
        G[8, 1] = -2.0 * _C2d * y1


@numba.njit(cache=True)
def _multipole_kernel(y, w, order, nh, want_force):
    n = y.shape[0]
    deg = np.array([0, 1, 1, 1, 2, 2, 2, 2, 2])
    R = np.zeros(9)
    G = np.zeros((9, 3))
    Rall = np.zeros((n, nh))
    Iall = np.zeros((n, nh))
    for i in range(n):
        _harmonics(y[i, 0], y[i, 1], y[i, 2], nh, R, G)
        r = np.sqrt(y[i, 0] ** 2 + y[i, 1] ** 2 + y[i, 2] ** 2)
        for m in range(nh):
            Rall[i, m] = R[m]
            Iall[i, m] = R[m] / r ** (2 * deg[m] + 1) if r > 0 else 0.0
    # interior moments A (prefix, exclusive) and exterior moments B (suffix, exclusive)
    A = np.zeros((n, nh))
    B = np.zeros((n, nh))
    run = np.zeros(nh)
    for k in range(n):
        i = order[k]
        for m in range(nh):
            A[i, m] = run[m]
            run[m] += w[i] * Rall[i, m]
    run[:] = 0.0
    for k in range(n - 1, -1, -1):
        i = order[k]
        for m in range(nh):
            B[i, m] = run[m]
            run[m] += w[i] * Iall[i, m]
    energy = 0.0
    for i in range(n):
        for m in range(nh):
            energy += w[i] * Iall[i, m] * A[i, m] / (2 * deg[m] + 1)
    acc = np.zeros((n, 3))
    if want_force:
        for i in range(n):
            r = np.sqrt(y[i, 0] ** 2 + y[i, 1] ** 2 + y[i, 2] ** 2)
            _harmonics(y[i, 0], y[i, 1], y[i, 2], nh, R, G)
            for m in range(nh):
                p = 2 * deg[m] + 1
                k = 1.0 / p
                for d in range(3):
                    gI = 0.0
                    if r > 0:
                        gI = G[m, d] / r ** p - p * R[m] * y[i, d] / r ** (p + 2)
                    acc[i, d] += k * (A[i, m] * gI + B[i, m] * G[m, d])
    return acc, energy


class MultipoleSolver:
    """Shell expansion of the pair potential about the centre of mass, truncated at l <= lmax.

    Each particle sees the Green's-function expansion of every other particle,
    split into interior and exterior moments by one radius sort.  The energy
    depends only on positions relative to the centre of mass, so its exact
    gradient conserves total momentum; l = 0 alone is the shell-theorem solver
    about the centroid.
    """

    name = "multipole"
    spherical = False

    def __init__(self, lmax: int = 2):
        if lmax not in (0, 1, 2):
            raise ValueError("lmax must be 0, 1 or 2")
        self.lmax = lmax

    def _run(self, e: ParticleEnsemble, want_force: bool):
        c = np.sum(e.weights[:, None] * e.positions, axis=0) / e.mass
        y = np.ascontiguousarray(e.positions - c)
        order = np.argsort(np.einsum("ij,ij->i", y, y), kind="stable")
        return _multipole_kernel(y, e.weights, order, _NHARM[self.lmax], want_force)

    def accelerations(self, e: ParticleEnsemble) -> np.ndarray:
        a, _ = self._run(e, True)
        # gradient of the centroid-relative energy: the net self-force is removed
        a -= np.sum(e.weights[:, None] * a, axis=0) / e.mass
        return a

    def potential_energy(self, e: ParticleEnsemble) -> float:
        """Sum over pairs (inner i, outer j) of w_i w_j sum_lm R_lm(x_i) I_lm(x_j) / (2l + 1)."""
        return float(self._run(e, False)[1])


class ExternalFieldSolver:
    """Test particles in the frozen field of a built model."""

    name = "external"
    spherical = True

    def __init__(self, model: EquilibriumModel):
        self.model = model

    def _phi(self, r):
        m = self.model
        return np.where(r <= m.R, m.phi(np.minimum(r, m.R)), -m.M / (FOUR_PI * np.maximum(r, 1e-300)))

    def accelerations(self, e: ParticleEnsemble) -> np.ndarray:
        m = self.model
        x = e.positions
        r = np.sqrt(np.einsum("ij,ij->i", x, x))
        g = np.where(r <= m.R, m.dphi(np.minimum(r, m.R)), m.M / (FOUR_PI * np.maximum(r, 1e-300) ** 2))
        with np.errstate(divide="ignore", invalid="ignore"):
            coef = np.where(r > 0, -g / r, 0.0)
        return coef[:, None] * x

    def potential_energy(self, e: ParticleEnsemble) -> float:
        r = np.linalg.norm(e.positions, axis=1)
        return float(-np.sum(e.weights * self._phi(r)))


def make_solver(name: str, model: Optional[EquilibriumModel] = None, N: Optional[int] = None,
                eps: Optional[float] = None):
    if name == "radial":
        return RadialSolver()
    if name == "direct":
        if eps is None:
            if model is None or N is None:
                raise ValueError("direct solver needs eps or a model and N")
            eps = default_softening(model, N)
        return DirectSolver(eps)
    if name == "multipole":
        return MultipoleSolver()
    if name == "external":
        return ExternalFieldSolver(model)
    raise ValueError(f"unknown solver {name!r}")


# ---------------------------------------------------------------------------
# time stepping and diagnostics

def step_leapfrog(e: ParticleEnsemble, solver, dt: float, acc: Optional[np.ndarray] = None):
    """One kick-drift-kick step in place; returns (ensemble, accelerations at the new time)."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    a = solver.accelerations(e) if acc is None else acc
    e.velocities += 0.5 * dt * a
    e.positions += dt * e.velocities
    a = solver.accelerations(e)
    e.velocities += 0.5 * dt * a
    e.time += dt
    return e, a


@dataclass
class DiagnosticsRecord:
    t: float
    H: float
    H_cin: float
    H_pot: float
    mass: float
    l1: float
    l2: float
    linf: float
    shift: tuple = (0.0, 0.0, 0.0)
    dist: float = float("nan")

    FIELDS = ("t", "H", "Hcin", "Hpot", "mass", "l1", "l2", "linf", "z1", "z2", "z3", "dist")

    def row(self):
        return [self.t, self.H, self.H_cin, self.H_pot, self.mass, self.l1, self.l2, self.linf,
                self.shift[0], self.shift[1], self.shift[2], self.dist]


BLOWUP_ENERGY_TOL = 0.5


class EvolutionBlowup(RuntimeError):
    def __init__(self, message, records):
        super().__init__(message)
        self.records = records


def bin_counts(e: ParticleEnsemble, grid: PhaseGrid, center=(0.0, 0.0, 0.0)) -> np.ndarray:
    """Particle counts per phase cell (weights ignored)."""
    ones = ParticleEnsemble(e.positions, e.velocities, np.ones(e.N), e.time)
    return bin_ensemble(ones, grid, center).values * grid.volumes


def level_profile_drift(e0: ParticleEnsemble, e1: ParticleEnsemble, grid: PhaseGrid,
                        centers=((0.0, 0.0, 0.0), (0.0, 0.0, 0.0))) -> dict:
    """Change of the binned L^2 norm squared against its Poisson counting noise.

    For equal weights w, ||f||_2^2 = sum_c w^2 n_c^2 / vol_c with Var(n^2) = 4n^3 + 6n^2 + n.
    """
    w = float(np.mean(e0.weights))
    vol = grid.volumes
    out = []
    for e, c in zip((e0, e1), centers):
        n = bin_counts(e, grid, c)
        S = float(np.sum(w ** 2 * n ** 2 / vol))
        var = float(np.sum((w ** 2 / vol) ** 2 * (4 * n ** 3 + 6 * n ** 2 + n)))
        out.append((S, var))
    diff = out[1][0] - out[0][0]
    sigma = np.sqrt(out[0][1] + out[1][1])
    return {"l2sq_initial": out[0][0], "l2sq_final": out[1][0], "sigma": float(sigma),
            "zscore": float(abs(diff) / sigma) if sigma > 0 else 0.0}


def diagnostics(e: ParticleEnsemble, solver, grid: PhaseGrid, model: Optional[EquilibriumModel] = None,
                f0_cells=None, pin_shift: bool = False) -> DiagnosticsRecord:
    Hc = 0.5 * float(np.sum(e.weights * np.einsum("ij,ij->i", e.velocities, e.velocities)))
    Hp = solver.potential_energy(e)
    if pin_shift or e.N < 100:
        z = np.zeros(3)
    else:
        z = estimate_shift(e)
    fb = bin_ensemble(e, grid, tuple(z))
    vol = grid.volumes
    l1 = float(np.sum(fb.values * vol)) + fb.outside_mass
    l2 = float(np.sqrt(np.sum(fb.values ** 2 * vol)))
    linf = float(np.max(fb.values))
    dist = float("nan")
    if model is not None and e.N >= 100:
        dist = weighted_shift_distance(e, model, z, grid, f0_cells)
    return DiagnosticsRecord(float(e.time), Hc - Hp, Hc, Hp, e.mass, l1, l2, linf, tuple(float(v) for v in z), dist)


def phase_grid_for(model: EquilibriumModel, N: int) -> PhaseGrid:
    """Default cell grid, coarsened so that cells hold a useful number of particles."""
    n = int(np.clip(round((N / 40.0) ** (1.0 / 3.0)), 4, 64))
    return default_phase_grid(model, n, n, int(np.clip(n // 2, 2, 32)))


def evolve(e: ParticleEnsemble, solver, dt: float, T: float, cadence: int = 10,
           model: Optional[EquilibriumModel] = None, grid: Optional[PhaseGrid] = None,
           pin_shift: Optional[bool] = None, snapshots: Optional[list] = None,
           blowup_tol: float = BLOWUP_ENERGY_TOL) -> List[DiagnosticsRecord]:
    """Advance e in place for round(T/dt) leapfrog steps, recording diagnostics every `cadence` steps.

    Raises EvolutionBlowup on a non-finite state or when the relative energy
    error at a diagnostic step exceeds blowup_tol (a sign of dt far too large).
    """
    if dt <= 0 or T < 0:
        raise ValueError("dt must be positive and T nonnegative")
    if cadence < 1:
        raise ValueError("cadence must be a positive integer")
    if grid is None:
        if model is not None:
            grid = phase_grid_for(model, e.N)
        else:
            r = np.linalg.norm(e.positions, axis=1)
            w = np.linalg.norm(e.velocities, axis=1)
            grid = PhaseGrid(np.linspace(0.0, 1.5 * r.max(), 33), np.linspace(0.0, 1.5 * w.max(), 33), 16)
    pin = getattr(solver, "spherical", False) if pin_shift is None else pin_shift
    f0_cells = grid_model(model, grid) if model is not None else None
    records = [diagnostics(e, solver, grid, model, f0_cells, pin)]
    n_steps = int(round(T / dt))
    acc = None
    t0 = e.time
    for k in range(1, n_steps + 1):
        _, acc = step_leapfrog(e, solver, dt, acc)
        e.time = t0 + k * dt
        if not (np.all(np.isfinite(e.positions)) and np.all(np.isfinite(e.velocities))):
            raise EvolutionBlowup(f"non-finite state at t = {e.time:.6g}", records)
        if k % cadence == 0 or k == n_steps:
            rec = diagnostics(e, solver, grid, model, f0_cells, pin)
            if not np.isfinite(rec.H):
                raise EvolutionBlowup(f"non-finite energy at t = {e.time:.6g}", records)
            drift = abs(rec.H - records[0].H) / max(abs(records[0].H), 1e-300)
            if drift > blowup_tol:
                records.append(rec)
                raise EvolutionBlowup(f"relative energy error {drift:.3g} at t = {e.time:.6g}", records)
            records.append(rec)
            if snapshots is not None:
                snapshots.append(e.copy())
    return records


# ---------------------------------------------------------------------------
# stability experiment

STABILITY_KINDS = ("scale", "boost", "reversal", "kick2")


@dataclass
class StabilityResult:
    kind: str
    amplitude: float
    times: np.ndarray
    distances: np.ndarray
    shifts: np.ndarray
    records: List[DiagnosticsRecord]
    verdict: str
    factor: float
    hypotheses: dict = field(default_factory=dict)
    boost: np.ndarray = field(default_factory=lambda: np.zeros(3))
    final: Optional[ParticleEnsemble] = None

    @property
    def ratio(self) -> float:
        return float(np.max(self.distances) / self.distances[0])


def recenter(e: ParticleEnsemble) -> ParticleEnsemble:
    """Remove the mass-weighted mean position and velocity."""
    w = e.weights[:, None] / e.mass
    e.positions -= np.sum(w * e.positions, axis=0)
    e.velocities -= np.sum(w * e.velocities, axis=0)
    return e


def perturb(e: ParticleEnsemble, model: EquilibriumModel, kind: str, amplitude: float) -> np.ndarray:
    """Apply a perturbation in place; returns the bulk velocity added (zero unless boost)."""
    eta = float(amplitude)
    v_scale = float(np.sqrt(2.0 * abs(model.phi_c)))
    boost = np.zeros(3)
    if kind == "scale":
        e.positions *= 1.0 + eta
    elif kind == "boost":
        boost = np.array([eta * v_scale, 0.0, 0.0])
        e.velocities += boost
    elif kind == "reversal":
        r = np.linalg.norm(e.positions, axis=1)
        outer = r > np.quantile(r, 1.0 - eta) if eta > 0 else np.zeros(e.N, bool)
        e.velocities[outer] *= -1.0
    elif kind == "kick2":
        x = e.positions
        e.velocities += eta * v_scale / model.R * np.stack([x[:, 0], -x[:, 1], np.zeros(e.N)], axis=1)
    else:
        raise ValueError(f"unknown perturbation kind {kind!r}")
    return boost


def stability_experiment(model: EquilibriumModel, kind: str, amplitude: float, N: int, T: float, seed: int,
                         solver=None, dt: Optional[float] = None, cadence: int = 20, factor: float = 5.0,
                         grid: Optional[PhaseGrid] = None) -> StabilityResult:
    """Perturb a sampled equilibrium and track the shift-corrected weighted distance to f0.

    T and dt are in units of the dynamical time when given as plain numbers of
    periods; dt defaults to t_dyn / 200.  Spherical perturbations on the shell
    solver keep the shift pinned at zero.
    """
    if kind not in STABILITY_KINDS:
        raise ValueError(f"unknown perturbation kind {kind!r}")
    td = dynamical_time(model)
    dt = td / 200.0 if dt is None else dt
    if solver is None:
        solver = RadialSolver() if kind in ("scale", "reversal") else MultipoleSolver()
    e = recenter(sample_particles(model, N, seed))
    e0 = e.copy()
    boost = perturb(e, model, kind, amplitude)
    grid = phase_grid_for(model, N) if grid is None else grid
    # hypothesis proxies: L1 distance, energy excess and sup of the binned density
    f0c = grid_model(model, grid)
    fin = bin_ensemble(e, grid)
    fref = bin_ensemble(e0, grid)
    H_in = 0.5 * float(np.sum(e.weights * np.einsum("ij,ij->i", e.velocities, e.velocities))) - solver.potential_energy(e)
    H_0 = 0.5 * float(np.sum(e0.weights * np.einsum("ij,ij->i", e0.velocities, e0.velocities))) - solver.potential_energy(e0)
    hyp = {
        "l1_to_unperturbed": float(np.sum(np.abs(fin.values - fref.values) * grid.volumes) + fin.outside_mass),
        "energy_excess": float(H_in - H_0),
        "sup_ratio": float(np.max(fin.values) / max(np.max(f0c.values), 1e-300)),
        "model_energy": model_energy(model).H,
    }
    if hyp["energy_excess"] > abs(amplitude) or hyp["sup_ratio"] > 10.0:
        warnings.warn("perturbation outside the small-data regime; running in exploration mode")
    records = evolve(e, solver, dt, T, cadence, model, grid)
    times = np.array([r.t for r in records])
    dists = np.array([r.dist for r in records])
    shifts = np.array([r.shift for r in records])
    verdict = "bounded" if np.max(dists) <= factor * dists[0] else "unbounded"
    return StabilityResult(kind, float(amplitude), times, dists, shifts, records, verdict, factor, hyp, boost, e)


def center_of_mass_track(e: ParticleEnsemble, solver, dt: float, T: float, cadence: int = 10):
    """Full mass-weighted centre of mass at each cadence step (evolves e in place)."""
    out_t, out_z = [e.time], [np.sum(e.weights[:, None] * e.positions, axis=0) / e.mass]
    acc = None
    n_steps = int(round(T / dt))
    t0 = e.time
    for k in range(1, n_steps + 1):
        _, acc = step_leapfrog(e, solver, dt, acc)
        e.time = t0 + k * dt
        if k % cadence == 0 or k == n_steps:
            out_t.append(e.time)
            out_z.append(np.sum(e.weights[:, None] * e.positions, axis=0) / e.mass)
    return np.array(out_t), np.array(out_z)


# ---------------------------------------------------------------------------
# snapshots

_HEADER = struct.Struct("<qdd")


def write_snapshot(path, e: ParticleEnsemble) -> None:
    """Binary snapshot: int64 N, float64 t, float64 M, then x (N x 3), v (N x 3), w (N), little-endian."""
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(e.N, float(e.time), e.mass))
        for arr in (e.positions, e.velocities, e.weights):
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def read_snapshot(path) -> ParticleEnsemble:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _HEADER.size:
        raise ValueError("truncated snapshot")
    N, t, M = _HEADER.unpack_from(raw, 0)
    need = _HEADER.size + 8 * 7 * N
    if N < 0 or len(raw) != need:
        raise ValueError("snapshot size does not match its header")
    data = np.frombuffer(raw, dtype="<f8", offset=_HEADER.size)
    x = data[:3 * N].reshape(N, 3).copy()
    v = data[3 * N:6 * N].reshape(N, 3).copy()
    w = data[6 * N:].copy()
    return ParticleEnsemble(x, v, w, t)


def write_snapshot_csv(path, e: ParticleEnsemble) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["x1", "x2", "x3", "v1", "v2", "v3", "w"])
        for row in np.hstack([e.positions, e.velocities, e.weights[:, None]]):
            wr.writerow([repr(float(v)) for v in row])


def write_diagnostics_csv(path, records: List[DiagnosticsRecord]) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(DiagnosticsRecord.FIELDS)
        for rec in records:
            wr.writerow([repr(float(v)) for v in rec.row()])


def sample_recentered(model: EquilibriumModel, N: int, seed: int) -> ParticleEnsemble:
    return recenter(sample_particles(model, N, seed))


__all__ = [
    "dynamical_time", "field_radial", "field_direct", "RadialSolver", "DirectSolver", "MultipoleSolver", "ExternalFieldSolver",
    "make_solver", "step_leapfrog", "evolve", "DiagnosticsRecord", "EvolutionBlowup", "level_profile_drift",
    "stability_experiment", "StabilityResult", "perturb", "recenter", "center_of_mass_track",
    "write_snapshot", "read_snapshot", "write_snapshot_csv", "write_diagnostics_csv", "phase_grid_for",
    "default_softening", "make_rng", "sample_recentered",
]
