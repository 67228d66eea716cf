import warnings

import numpy as np
import pytest

from gravistab.dynamics import (DIRECT_BUDGET, DirectSolver, EvolutionBlowup, ExternalFieldSolver, MultipoleSolver,
                                RadialSolver, center_of_mass_track, dynamical_time, evolve, field_direct,
                                field_radial, level_profile_drift, make_solver, perturb, phase_grid_for,
                                read_snapshot, recenter, sample_recentered, stability_experiment, step_leapfrog,
                                write_diagnostics_csv, write_snapshot, write_snapshot_csv)
from gravistab.equilibria import ParticleEnsemble, sample_particles
from gravistab.radial_numerics import FOUR_PI


def ensemble(x, v, w):
    return ParticleEnsemble(np.array(x, dtype=float), np.array(v, dtype=float), np.array(w, dtype=float))


def test_dynamical_time(king):
    assert dynamical_time(king) == pytest.approx(2 * np.pi * np.sqrt(FOUR_PI * king.R ** 3 / king.M))
    assert dynamical_time(king) == pytest.approx(24.259, abs=1e-3)


def test_field_radial_two_shells():
    e = ensemble([[1.0, 0, 0], [0, 2.0, 0]], np.zeros((2, 3)), [3.0, 5.0])
    a = field_radial(e)
    assert np.all(a[0] == 0.0)
    assert a[1] == pytest.approx([0.0, -3.0 / (FOUR_PI * 4.0), 0.0])
    # equal radii: each sees half of the other
    e = ensemble([[1.0, 0, 0], [0, 1.0, 0]], np.zeros((2, 3)), [2.0, 2.0])
    a = field_radial(e)
    assert a[0] == pytest.approx([-1.0 / FOUR_PI, 0, 0])
    # a particle at the origin feels nothing
    e = ensemble([[0, 0, 0], [1.0, 0, 0]], np.zeros((2, 3)), [1.0, 1.0])
    assert np.all(field_radial(e)[0] == 0.0)


def test_field_radial_all_mass_inside(rng):
    x = rng.normal(size=(200, 3)) * 0.1
    e = ensemble(np.vstack([x, [[5.0, 0, 0]]]), np.zeros((201, 3)), np.ones(201))
    assert np.linalg.norm(field_radial(e)[-1]) == pytest.approx(200.0 / (FOUR_PI * 25.0))


def test_field_radial_matches_model(king):
    e = sample_particles(king, 50000, 1)
    r = np.linalg.norm(e.positions, axis=1)
    g = np.linalg.norm(field_radial(e), axis=1)
    mid = (r > 0.2 * king.R) & (r < king.R)
    # enclosed-mass noise is at most a few times sqrt(N) particles
    assert np.max(np.abs(g[mid] - king.dphi(r[mid])) / king.dphi(r[mid])) < 0.05


def test_field_direct_two_body():
    d, w = 10.0, 2.0
    e = ensemble([[0, 0, 0], [d, 0, 0]], np.zeros((2, 3)), [w, w])
    a = field_direct(e, 1e-6)
    assert a[0, 0] == pytest.approx(w / (FOUR_PI * d ** 2), rel=1e-10)
    assert a[1, 0] == pytest.approx(-a[0, 0], rel=1e-14)
    with pytest.raises(ValueError):
        field_direct(e, 0.0)
    big = ParticleEnsemble(np.zeros((DIRECT_BUDGET + 1, 3)), np.zeros((DIRECT_BUDGET + 1, 3)), np.ones(DIRECT_BUDGET + 1))
    with pytest.raises(ValueError, match="field_radial"):
        field_direct(big, 0.1)


def test_field_direct_action_reaction(king):
    e = sample_particles(king, 2000, 4)
    a = field_direct(e, 0.01)
    total = np.sum(e.weights[:, None] * a, axis=0)
    scale = np.sum(e.weights * np.linalg.norm(a, axis=1))
    assert np.max(np.abs(total)) < 1e-12 * scale


def test_field_direct_vs_radial(king):
    e = sample_particles(king, 5000, 6)
    r = np.linalg.norm(e.positions, axis=1)
    a_d = np.einsum("ij,ij->i", field_direct(e, 0.02 * king.R), e.positions) / r
    a_r = np.einsum("ij,ij->i", field_radial(e), e.positions) / r
    mid = (r > 0.3 * king.R) & (r < king.R)
    # the direct field carries N^(-1/2) graininess on top of the smooth part
    rel = np.abs(a_d - a_r)[mid] / np.abs(a_r[mid])
    assert np.median(rel) < 0.05


def test_multipole_momentum(king):
    e = sample_particles(king, 5000, 2)
    a = MultipoleSolver().accelerations(e)
    total = np.sum(e.weights[:, None] * a, axis=0)
    assert np.max(np.abs(total)) < 1e-12 * np.sum(e.weights * np.linalg.norm(a, axis=1))
    # monopole part agrees with the shell field
    r = np.linalg.norm(e.positions, axis=1)
    ar = np.einsum("ij,ij->i", a, e.positions) / r
    a0 = np.einsum("ij,ij->i", field_radial(e), e.positions) / r
    mid = (r > 0.3 * king.R) & (r < king.R)
    assert np.median(np.abs(ar - a0)[mid] / np.abs(a0[mid])) < 0.05


def test_make_solver(king):
    assert isinstance(make_solver("radial"), RadialSolver)
    assert isinstance(make_solver("multipole"), MultipoleSolver)
    d = make_solver("direct", king, 1000)
    assert d.eps == pytest.approx(king.R * 1000 ** (-1 / 3) / 10)
    assert isinstance(make_solver("external", king), ExternalFieldSolver)
    with pytest.raises(ValueError):
        make_solver("tree")
    with pytest.raises(ValueError):
        make_solver("direct")
    with pytest.raises(ValueError):
        DirectSolver(-1.0)


def circular_particle(model, rc):
    vc = np.sqrt(rc * model.dphi(rc))
    P = 2 * np.pi * rc / vc
    return ensemble([[rc, 0, 0]], [[0, vc, 0]], [1.0]), P


def test_circular_orbit(king):
    rc = 0.5 * king.R
    e, P = circular_particle(king, rc)
    solver = ExternalFieldSolver(king)
    n_per = 4000
    dt = P / n_per
    acc = None
    worst = 0.0
    for k in range(100):
        for _ in range(n_per):
            _, acc = step_leapfrog(e, solver, dt, acc)
        worst = max(worst, abs(np.linalg.norm(e.positions[0]) - rc) / rc)
    assert worst < 1e-6


def test_second_order_energy(king):
    """Energy error of test particles in a smooth fixed field falls as dt^2."""
    base = sample_particles(king, 1000, 8)
    solver = ExternalFieldSolver(king)
    T = dynamical_time(king)
    errs = []
    # t_dyn / 200 already resolves the innermost orbits
    for nper in (200, 400, 800):
        e = base.copy()
        rec = evolve(e, solver, T / nper, T, cadence=nper // 20, pin_shift=True)
        errs.append(max(abs(r.H - rec[0].H) for r in rec))
    orders = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
    assert np.all((orders > 1.8) & (orders < 2.2))


def test_leapfrog_time_reversible(king):
    e = sample_particles(king, 300, 9)
    start = e.copy()
    solver = ExternalFieldSolver(king)
    for _ in range(50):
        step_leapfrog(e, solver, 0.05)
    e.velocities *= -1
    for _ in range(50):
        step_leapfrog(e, solver, 0.05)
    assert np.max(np.abs(e.positions - start.positions)) < 1e-10
    with pytest.raises(ValueError):
        step_leapfrog(e, solver, 0.0)


def test_direct_momentum_and_galilean(king):
    N = 400
    e = recenter(sample_particles(king, N, 10))
    solver = DirectSolver(0.05 * king.R)
    v0 = np.array([0.05, -0.02, 0.01])
    boosted = e.copy()
    boosted.velocities += v0
    dt, n = dynamical_time(king) / 200, 100
    p0 = np.sum(e.weights[:, None] * e.velocities, axis=0)
    evolve(e, solver, dt, n * dt, cadence=50, pin_shift=True)
    evolve(boosted, solver, dt, n * dt, cadence=50, pin_shift=True)
    p1 = np.sum(e.weights[:, None] * e.velocities, axis=0)
    assert np.max(np.abs(p1 - p0)) < 1e-12 * king.M
    shift = v0 * n * dt
    assert np.max(np.abs(boosted.positions - shift - e.positions)) < 1e-8 * king.R
    assert np.max(np.abs(boosted.velocities - v0 - e.velocities)) < 1e-8


def test_mass_conserved(king):
    e = sample_particles(king, 2000, 3)
    recs = evolve(e, RadialSolver(), dynamical_time(king) / 200, dynamical_time(king) / 10, cadence=5, model=king)
    assert all(r.mass == recs[0].mass for r in recs)
    assert all(r.H == pytest.approx(r.H_cin - r.H_pot, abs=1e-15) for r in recs)


def test_blowup_detection(king):
    e = sample_particles(king, 500, 3)
    with pytest.raises(EvolutionBlowup) as info:
        evolve(e, RadialSolver(), 20.0, 200.0, cadence=1)
    assert len(info.value.records) >= 2
    with pytest.raises(ValueError):
        evolve(e, RadialSolver(), -1.0, 1.0)
    with pytest.raises(ValueError):
        evolve(e, RadialSolver(), 1.0, 1.0, cadence=0)


def test_level_profile_drift_same_ensemble(king):
    e = sample_particles(king, 5000, 3)
    out = level_profile_drift(e, e.copy(), phase_grid_for(king, 5000))
    assert out["zscore"] == 0.0 and out["sigma"] > 0


def test_perturbations(king):
    e = sample_recentered(king, 1000, 1)
    assert np.allclose(np.sum(e.positions, axis=0), 0.0, atol=1e-12)
    for kind in ("scale", "boost", "reversal", "kick2"):
        p = e.copy()
        boost = perturb(p, king, kind, 0.0)
        assert np.array_equal(p.positions, e.positions) and np.array_equal(p.velocities, e.velocities)
        assert np.all(boost == 0)
    p = e.copy()
    b = perturb(p, king, "boost", 0.01)
    assert np.allclose(p.velocities - e.velocities, b)
    with pytest.raises(ValueError):
        perturb(e.copy(), king, "twist", 0.1)


def test_stability_unperturbed_baseline(king):
    res = stability_experiment(king, "scale", 0.0, 5000, 2 * dynamical_time(king), 7, cadence=100)
    assert res.verdict == "bounded"
    assert np.all(res.shifts == 0.0)
    assert res.ratio < 1.5
    with pytest.raises(ValueError):
        stability_experiment(king, "twist", 0.1, 1000, 1.0, 1)


def test_boost_center_of_mass(king):
    e = sample_recentered(king, 500, 5)
    v0 = perturb(e, king, "boost", 0.01)
    dt = dynamical_time(king) / 200
    t, z = center_of_mass_track(e, DirectSolver(0.05 * king.R), dt, 100 * dt, cadence=25)
    assert np.max(np.abs(z - t[:, None] * v0[None, :])) < 1e-6


def test_scale_warns_exploration(king):
    with warnings.catch_warnings(record=True) as w:
        warnings.simplefilter("always")
        stability_experiment(king, "scale", 0.05, 2000, dynamical_time(king) / 20, 3, cadence=5)
    assert any("exploration" in str(x.message) for x in w)


def test_snapshot_round_trip(king, tmp_path):
    e = sample_particles(king, 100, 3)
    e.time = 1.25
    p = tmp_path / "snap.bin"
    write_snapshot(p, e)
    back = read_snapshot(p)
    assert back.time == 1.25 and back.N == 100
    assert np.array_equal(back.positions, e.positions) and np.array_equal(back.weights, e.weights)
    assert p.stat().st_size == 24 + 8 * 7 * 100
    p.write_bytes(p.read_bytes()[:-8])
    with pytest.raises(ValueError):
        read_snapshot(p)
    write_snapshot_csv(tmp_path / "snap.csv", e)
    rows = (tmp_path / "snap.csv").read_text().splitlines()
    assert rows[0] == "x1,x2,x3,v1,v2,v3,w" and len(rows) == 101
    assert float(rows[1].split(",")[0]) == e.positions[0, 0]


def test_evolution_deterministic(king, tmp_path):
    outs = []
    for k in range(2):
        e = sample_particles(king, 3000, 21)
        recs = evolve(e, MultipoleSolver(), 0.2, 2.0, cadence=5, model=king)
        path = tmp_path / f"d{k}.csv"
        write_diagnostics_csv(path, recs)
        outs.append((path.read_bytes(), e.positions.tobytes()))
    assert outs[0] == outs[1]
