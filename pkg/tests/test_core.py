import numpy as np
import pytest

from plim.atlas import Atlas, Sheet
from plim.core import (ConservedQuantity, DriverOptions, FineSystem,
                       ProjectionMap, coarse_integrate, coarse_rhs,
                       conserved_rate_check, detect_singularity,
                       fine_integrate, lift_trajectory, perturb_singular,
                       resolve_singularity, write_run_csv,
                       write_transfers_csv)
from plim.errors import (IntegrationDivergedError, MissingSheetError,
                         UnresolvableSingularityError)
from plim.systems import (exact_oscillator_sheet, hamiltonian_energy,
                          hamiltonian_system, lorenz_system,
                          oscillator_projection, oscillator_system)


def test_lorenz_constant_at_fixed_point():
    sys = lorenz_system()
    traj = fine_integrate(sys, [8.0, 8.0, 24.0], 1e-3, 0.5)
    assert np.allclose(traj.states, traj.states[0], atol=1e-12)


def test_oscillator_returns_after_full_period():
    sys = oscillator_system()
    traj = fine_integrate(sys, [1.0, 0.0], 1e-3, 2 * np.pi)
    assert np.allclose(traj.states[-1], [1.0, 0.0], atol=1e-6)
    assert traj.t[-1] == pytest.approx(2 * np.pi)


def test_trajectory_length_and_first_entry():
    sys = oscillator_system()
    traj = fine_integrate(sys, [0.3, 0.4], 0.1, 1.0)
    assert traj.t.size == int(np.ceil(1.0 / 0.1)) + 1
    assert np.array_equal(traj.states[0], [0.3, 0.4])
    traj = fine_integrate(sys, [0.3, 0.4], 0.3, 1.0)
    assert traj.t.size == int(np.ceil(1.0 / 0.3)) + 1
    assert traj.t[-1] == pytest.approx(1.0)


def test_hamiltonian_energy_value_and_conservation():
    """E at the H1 preset, recomputed from its definition, and drift along
    a short integration at integrator order."""
    f0 = np.array([-0.875, -0.875, 0.5, 0.5])
    x1, x2, x3, x4 = f0
    expected = 0.5 * (x2 ** 2 + x4 ** 2) + 0.5 * (x1 ** 2 + x3 ** 2) \
        + 0.5 * x1 ** 2 * x3 ** 2
    assert expected == pytest.approx(1.111328125, abs=1e-12)
    assert hamiltonian_energy(f0) == pytest.approx(expected)

    sys = hamiltonian_system()
    traj = fine_integrate(sys, f0, 1e-3, 5.0)
    energies = np.array([hamiltonian_energy(f) for f in traj.states])
    assert np.max(np.abs(energies - expected)) / expected < 1e-10


def test_hamiltonian_energy_rate_vanishes_symbolically():
    import sympy as sp
    x1, x2, x3, x4 = sp.symbols("x1 x2 x3 x4")
    E = sp.Rational(1, 2) * (x2 ** 2 + x4 ** 2) \
        + sp.Rational(1, 2) * (x1 ** 2 + x3 ** 2) \
        + sp.Rational(1, 2) * x1 ** 2 * x3 ** 2
    rates = {x1: x2, x2: -x1 * (1 + x3 ** 2),
             x3: x4, x4: -x3 * (1 + x1 ** 2)}
    dE = sum(sp.diff(E, v) * r for v, r in rates.items())
    assert sp.simplify(dE) == 0


def test_integration_diverged_carries_last_state():
    sys = FineSystem(1, lambda f: f ** 2, "blowup")
    with pytest.raises(IntegrationDivergedError) as err:
        fine_integrate(sys, [1.0], 0.1, 100.0)
    assert np.all(np.isfinite(err.value.last_state))


def test_rk4_is_fourth_order():
    sys = oscillator_system()
    errs = []
    for dt in (2e-3, 1e-3):
        traj = fine_integrate(sys, [1.0, 0.0], dt, 1.0)
        exact = np.array([np.cos(1.0), np.sin(1.0)])
        errs.append(np.linalg.norm(traj.states[-1] - exact))
    ratio = errs[0] / errs[1]
    assert 12.0 < ratio < 20.0


# -- projections ---------------------------------------------------------------

def test_projection_select_roundtrip():
    proj = ProjectionMap(3, retained=[0, 2])
    f = np.array([1.0, 2.0, 3.0])
    assert np.array_equal(proj.apply(f), [1.0, 3.0])
    assert np.array_equal(proj.eliminated_values(f), [2.0])
    assert np.array_equal(proj.embed([1.0, 3.0], [2.0]), f)


def test_projection_average_rows_must_sum_to_one():
    with pytest.raises(ValueError):
        ProjectionMap(4, weights=[[0.5, 0.5, 0.5, 0.0]])
    proj = ProjectionMap(4, weights=[[0.25, 0.25, 0.25, 0.25]])
    assert proj.apply(np.array([1.0, 2.0, 3.0, 4.0])) == pytest.approx(2.5)


def test_projection_validation():
    with pytest.raises(ValueError):
        ProjectionMap(3, retained=[0, 0])
    with pytest.raises(ValueError):
        ProjectionMap(3, retained=[0, 5])
    with pytest.raises(ValueError):
        ProjectionMap(3, retained=[0, 1, 2])  # no reduction


# -- coarse rate ----------------------------------------------------------------

def const_sheet_atlas(domain, block_size, mesh, values):
    atl = Atlas(domain, block_size, mesh)
    out = []
    for bid, block in atl.blocks.items():
        for v in np.atleast_1d(values):
            nodal = np.full((1, *block.mesh), float(v))
            out.append(atl.add_sheet(Sheet(-1, block, 1, nodal,
                                           block.bounds[:, 0].copy(),
                                           np.array([float(v)]))))
    return atl, out


def test_coarse_rhs_lorenz_fixed_point():
    sys = lorenz_system()
    proj = ProjectionMap(3, retained=[0, 2])
    atl, sheets = const_sheet_atlas([[6.0, 10.0], [22.0, 26.0]], [4.0, 4.0],
                                    (6, 6), [8.0])
    rate = coarse_rhs(sys, proj, sheets[0], np.array([8.0, 24.0]))
    assert np.allclose(rate, [0.0, 0.0], atol=1e-12)


def test_coarse_rhs_oscillator_circle_sheet():
    sys = oscillator_system()
    proj = oscillator_projection()
    block_atl = Atlas([[-1.0, 1.0]], [2.0], (2001,))
    block = block_atl.blocks[(0,)]
    sheet = exact_oscillator_sheet(0.0, 1.0, block)
    rate = coarse_rhs(sys, proj, sheet, np.array([0.0]))
    assert rate[0] == pytest.approx(-1.0, abs=1e-9)


def test_coarse_rhs_hamiltonian_structure():
    sys = hamiltonian_system()
    proj = ProjectionMap(4, retained=[0, 1])
    atl = Atlas([[-1.0, 1.0], [-1.0, 1.0]], [2.0, 2.0], (4, 4))
    block = atl.blocks[(0, 0)]
    nodal = np.stack([np.full(block.mesh, 0.7), np.full(block.mesh, -0.3)])
    sheet = Sheet(-1, block, 2, nodal, np.zeros(2), np.array([0.7, -0.3]))
    rate = coarse_rhs(sys, proj, sheet, np.array([0.0, 0.55]))
    assert rate[0] == pytest.approx(0.55)   # x1dot = x2
    assert rate[1] == pytest.approx(0.0)    # x2dot = -x1(1+G1^2) = 0 at x1=0


# -- singular states -------------------------------------------------------------

def test_singularity_detected_on_zero_projected_rate():
    """At (2, 2, 1.5): projected rate (sigma(y-x), xy-bz) = (0, 0) while the
    full field is (0, 45, 0)."""
    sys = lorenz_system()
    proj = ProjectionMap(3, retained=[0, 2])
    f = np.array([2.0, 2.0, 1.5])
    assert np.allclose(sys.rhs(f), [0.0, 45.0, 0.0])
    assert detect_singularity(sys, proj, f)


def test_fixed_point_is_not_singular():
    sys = lorenz_system()
    proj = ProjectionMap(3, retained=[0, 2])
    assert not detect_singularity(sys, proj, np.array([8.0, 8.0, 24.0]))


def test_nonsingular_generic_point():
    sys = lorenz_system()
    proj = ProjectionMap(3, retained=[0, 2])
    assert not detect_singularity(sys, proj, np.array([0.0, 2.0, 0.0]))


def test_perturbation_arithmetic():
    sys = lorenz_system()
    out = perturb_singular(sys, np.array([2.0, 2.0, 1.5]), eps=1e-4)
    assert np.allclose(out, [2.0, 2.0045, 1.5], atol=1e-12)


def test_perturbation_eps_zero_is_identity():
    sys = lorenz_system()
    f = np.array([2.0, 2.0, 1.5])
    assert np.array_equal(perturb_singular(sys, f, eps=0.0), f)


def test_perturbation_at_fixed_point_rejected():
    sys = lorenz_system()
    with pytest.raises(ValueError):
        perturb_singular(sys, np.array([0.0, 0.0, 0.0]))


def test_resolved_state_is_not_singular():
    sys = lorenz_system()
    proj = ProjectionMap(3, retained=[0, 2])
    f = resolve_singularity(sys, proj, np.array([2.0, 2.0, 1.5]))
    assert not detect_singularity(sys, proj, f)


def test_unresolvable_singularity_raises():
    # projected rate identically zero along the field direction
    def rhs(f):
        return np.array([0.0, 1.0])

    sys = FineSystem(2, rhs, "degenerate")
    proj = ProjectionMap(2, retained=[0])
    with pytest.raises(UnresolvableSingularityError):
        resolve_singularity(sys, proj, np.array([0.0, 0.0]), max_retries=3)


# -- coarse evolution --------------------------------------------------------------

def exact_family_atlas(r0_values, lo=-1.5, hi=1.5, n=2001):
    atl = Atlas([[lo, hi]], [hi - lo], (n,), system="oscillator")
    block = atl.blocks[(0,)]
    for r0 in r0_values:
        atl.add_sheet(exact_oscillator_sheet(0.0, r0, block))
        atl.add_sheet(exact_oscillator_sheet(0.0, -r0, block))
    return atl


def test_oscillator_run_stays_in_radius():
    sys = oscillator_system()
    proj = oscillator_projection()
    r0 = np.sqrt(0.2 ** 2 + 1.0 ** 2)
    atl = exact_family_atlas([r0])
    run = coarse_integrate(sys, proj, atl, np.array([0.2, 1.0]), 1e-3,
                           2 * np.pi)
    assert run.status == "completed"
    assert np.all(np.abs(run.coarse[:, 0]) <= r0 + 1e-9)
    assert len(run.transfers) >= 2  # two turning points per period


def test_run_reconstruction_consistency():
    sys = oscillator_system()
    proj = oscillator_projection()
    atl = exact_family_atlas([np.sqrt(1.04)])
    run = coarse_integrate(sys, proj, atl, np.array([0.2, 1.0]), 1e-3, 3.0)
    gamma = lift_trajectory(run, atl)
    recon = np.array([proj.apply(f) for f in gamma])
    assert np.max(np.abs(recon - run.coarse)) <= 1e-12


def test_partial_run_out_of_domain():
    sys = oscillator_system()
    proj = oscillator_projection()
    atl = Atlas([[0.0, 1.5]], [1.5], (301,), system="oscillator")
    block = atl.blocks[(0,)]
    atl.add_sheet(exact_oscillator_sheet(0.2, 1.0, block))
    run = coarse_integrate(sys, proj, atl, np.array([0.2, 1.0]), 1e-3, 10.0)
    assert run.status == "out-of-domain"
    assert run.t[-1] < 10.0
    assert run.t.size >= 2


def test_lift_constant_sheet_constant_run():
    sys = FineSystem(2, lambda f: np.array([0.0, 0.0]), "still")
    proj = ProjectionMap(2, retained=[0])
    atl = Atlas([[0.0, 1.0]], [1.0], (4,))
    block = atl.blocks[(0,)]
    k = 3.3
    atl.add_sheet(Sheet(-1, block, 1, np.full((1, 4), k), np.array([0.0]),
                        np.array([k])))
    run = coarse_integrate(sys, proj, atl, np.array([0.5, k]), 0.1, 1.0)
    gamma = lift_trajectory(run, atl)
    assert np.allclose(gamma[:, 0], 0.5)
    assert np.allclose(gamma[:, 1], k)


def test_lift_missing_sheet_raises():
    sys = oscillator_system()
    proj = oscillator_projection()
    atl = exact_family_atlas([1.0])
    run = coarse_integrate(sys, proj, atl, np.array([0.0, 1.0]), 1e-2, 0.1)
    run.sheet_ids[:] = 999
    with pytest.raises(MissingSheetError):
        lift_trajectory(run, atl)


def test_lifted_y_matches_circle():
    sys = oscillator_system()
    proj = oscillator_projection()
    atl = exact_family_atlas([1.0], n=20001)
    run = coarse_integrate(sys, proj, atl, np.array([0.0, 1.0]), 1e-3, 1.0)
    gamma = lift_trajectory(run, atl)
    expect = np.sqrt(np.clip(1.0 - run.coarse[:, 0] ** 2, 0.0, None))
    assert np.max(np.abs(gamma[:, 1] - expect)) <= 1e-6


def test_conserved_rate_lifted_vs_naive():
    sys = oscillator_system()
    proj = oscillator_projection()
    atl = exact_family_atlas([np.sqrt(1.04)], n=20001)
    run = coarse_integrate(sys, proj, atl, np.array([0.2, 1.0]), 1e-3,
                           2 * np.pi)
    energy = ConservedQuantity("energy", lambda f: 0.5 * (f[0] ** 2 + f[1] ** 2))
    lifted_rate, naive_rate = conserved_rate_check(energy, run, atl, sys)
    assert np.max(np.abs(lifted_rate)) <= 1e-2   # interpolation noise only
    assert np.max(np.abs(naive_rate)) > 0.1     # x^2/2 swings along the circle


def test_singularity_event_recorded():
    """Start where the projected rate vanishes: the driver must perturb and
    log a singularity transfer rather than stall."""
    sys = lorenz_system()
    proj = ProjectionMap(3, retained=[0, 2])
    atl = Atlas([[0.0, 4.0], [0.0, 4.0]], [4.0, 4.0], (6, 6))
    block = atl.blocks[(0, 0)]
    for v in np.linspace(1.0, 3.0, 9):
        atl.add_sheet(Sheet(-1, block, 1, np.full((1, 6, 6), v),
                            block.bounds[:, 0].copy(), np.array([v])))
    f0 = np.array([2.0, 2.0, 1.5])  # projected rate (0, 0), field (0, 45, 0)
    run = coarse_integrate(sys, proj, atl, f0, 1e-3, 0.05)
    assert any(ev.reason == "singularity" for ev in run.transfers)


def test_run_csv_exports(tmp_path):
    sys = oscillator_system()
    proj = oscillator_projection()
    atl = exact_family_atlas([1.0])
    run = coarse_integrate(sys, proj, atl, np.array([0.0, 1.0]), 1e-2, 1.0)
    p1 = tmp_path / "run.csv"
    p2 = tmp_path / "events.csv"
    write_run_csv(run, p1, atl=atl, lifted=True)
    write_transfers_csv(run, p2)
    rows = p1.read_text().strip().splitlines()
    assert rows[0] == "t,c_1,sheet_id,f_1,f_2"
    assert len(rows) == run.t.size + 1
    parsed = np.array([[float(v) for v in r.split(",")]
                       for r in rows[1:]])
    assert np.allclose(parsed[:, 0], run.t)
    assert rows[0].count(",") == parsed.shape[1] - 1
    erows = p2.read_text().strip().splitlines()
    assert erows[0] == "t,from_sheet,to_sheet,reason"
