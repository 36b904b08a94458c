import numpy as np
import pytest

from plim.atlas import Block, sheet_eval
from plim.gsolve import LsfemProblem, eval_residual
from plim.systems import (PRESETS, default_atlas_spec, enumerate_anchors,
                          exact_oscillator_sheet, get_bundle,
                          hamiltonian_geq, hamiltonian_system, lorenz_geq,
                          lorenz_fixed_points, lorenz_system, new_atlas,
                          oscillator_geq)


def test_lorenz_rhs_regression_anchor():
    sys = lorenz_system()
    rate = sys.rhs(np.array([0.0, 2.0, 8.0]))
    assert np.allclose(rate, [20.0, -2.0, -64.0 / 3.0])


def test_lorenz_fixed_points_formula():
    pts = lorenz_fixed_points()
    assert np.allclose(pts[1], [8.0, 8.0, 24.0])
    assert np.allclose(pts[2], [-8.0, -8.0, 24.0])
    sys = lorenz_system()
    for p in pts:
        assert np.max(np.abs(sys.rhs(p))) <= 1e-12


def test_hamiltonian_residual_substitutions():
    geq = hamiltonian_geq()
    r = eval_residual(geq, [0.0, 1.0], [0.0, 0.0],
                      [[0.0, 0.0], [0.0, 0.0]])
    assert np.allclose(r, [0.0, 0.0])
    r = eval_residual(geq, [1.0, 0.0], [1.0, 0.0],
                      [[0.0, 0.0], [0.0, 0.0]])
    assert r[1] == pytest.approx(2.0)  # G1 (1 + x1^2) = 1 * 2


def test_oscillator_lower_branch_solves():
    geq = oscillator_geq()
    r0 = 1.3
    for x in np.linspace(-1.2, 1.2, 7):
        G = -np.sqrt(r0 ** 2 - x ** 2)
        r = eval_residual(geq, [x], [G], [[x / np.sqrt(r0 ** 2 - x ** 2)]])
        assert abs(r[0]) <= 1e-12


def test_lorenz_constant_sheet_residual_locus():
    """G = 8 with zero gradient satisfies the equation exactly where
    x (z - r) + 8 = 0, in particular at the fixed point (8, 24)."""
    geq = lorenz_geq()
    assert eval_residual(geq, [8.0, 24.0], [8.0], [[0.0, 0.0]])[0] == 0.0
    for x in (1.0, 2.0, 4.0, -8.0):
        z = 25.0 - 8.0 / x
        r = eval_residual(geq, [x, z], [8.0], [[0.0, 0.0]])
        assert abs(r[0]) <= 1e-12
    assert eval_residual(geq, [2.0, 26.0], [8.0], [[0.0, 0.0]])[0] != 0.0


def test_exact_sheet_upper_branch_values():
    block = Block((0,), [[-1.0, 1.0]], (11,))  # nodes every 0.2
    s = exact_oscillator_sheet(0.0, 1.0, block)
    assert sheet_eval(s, [0.6])[0] == pytest.approx(0.8)
    s = exact_oscillator_sheet(0.0, -1.0, block)
    assert sheet_eval(s, [0.6])[0] == pytest.approx(-0.8)


def test_exact_sheet_radius_five_masking():
    block = Block((0,), [[-6.0, 6.0]], (13,))  # nodes every 1.0
    s = exact_oscillator_sheet(3.0, 4.0, block)
    xs = block.axes[0]
    i5 = int(np.argmin(np.abs(xs - 5.0)))
    assert s.nodal[0, i5] == 0.0
    assert s.prune_mask[np.abs(xs) > 5.0].all()
    assert not s.prune_mask[np.abs(xs) <= 5.0].any()


def test_exact_sheet_origin_rejected():
    block = Block((0,), [[-1.0, 1.0]], (5,))
    with pytest.raises(ValueError):
        exact_oscillator_sheet(0.0, 0.0, block)


def test_exact_sheet_zero_y_branch_follows_flow():
    block = Block((0,), [[-2.0, 2.0]], (9,))
    s = exact_oscillator_sheet(1.5, 0.0, block)
    # trajectory out of (1.5, 0) enters y > 0, so the upper branch carries it
    assert sheet_eval(s, [0.0])[0] == pytest.approx(1.5)


def test_default_atlas_spec_lorenz_counts():
    spec = default_atlas_spec("lorenz")
    assert spec.domain == [[-24.0, 24.0], [0.0, 48.0]]
    assert spec.block_size == [4.0, 4.0]
    assert spec.mesh == (6, 6)
    atl = new_atlas(spec)
    assert len(atl.blocks) == 12 * 12
    anchors = enumerate_anchors(atl, spec)
    per_block = len(anchors) / len(atl.blocks)
    assert per_block == 4 * (48 + 1)  # four corners, N + 1 data values each


def test_default_atlas_spec_hamiltonian():
    spec = default_atlas_spec("hamiltonian4")
    assert spec.domain == [[-2.0, 2.0], [-2.0, 2.0]]
    assert spec.anchors["lo"] == -1.0 and spec.anchors["hi"] == 1.0
    atl = new_atlas(spec)
    anchors = enumerate_anchors(atl, spec)
    # two sweeps through the base value, shared point counted once
    n_sweep = len(np.arange(-1.0, 1.0 + 1e-12, 0.25))
    assert len(anchors) == len(atl.blocks) * (2 * n_sweep - 1)
    for _, _, data in anchors[:20]:
        assert data.size == 2


def test_default_atlas_spec_oscillator_complex():
    spec = default_atlas_spec("oscillator")
    assert spec.complex_mode
    assert spec.domain == [[-3.0, 3.0]]


def test_presets_exist_and_route():
    assert set(PRESETS) == {"L1", "L2", "L3", "L4", "H1", "H2",
                            "C-Ex1", "C-Ex2"}
    name, f0 = PRESETS["L1"]
    assert name == "lorenz"
    assert np.allclose(f0, [0.0, 2.0, 8.0])
    assert np.allclose(PRESETS["H2"][1], [1.125, 1.125, 0.5, 0.5])
    assert np.allclose(PRESETS["C-Ex1"][1], [-0.3, -1.8])


def test_bundles_are_consistent():
    for name in ("lorenz", "hamiltonian4", "oscillator"):
        b = get_bundle(name)
        assert b.system.dim_fine == b.proj.dim_fine
        assert len(b.var_names) == b.system.dim_fine
        assert b.geq.n_components == b.proj.n_eliminated or \
            b.proj.kind == "average"


def test_hamiltonian_diagonal_sheet_is_exact():
    """The diagonal x3 = x1, x4 = x2 is invariant for the coupled pair, so
    the linear pair sheet (G1, G2) = (x1, x2) zeroes the residual; bilinear
    elements reproduce it exactly and the assembled objective is ~ 0."""
    sysf = hamiltonian_system()
    f0 = np.array([0.4, -0.3, 0.4, -0.3])
    rate = sysf.rhs(f0)
    assert rate[0] == pytest.approx(rate[2])
    assert rate[1] == pytest.approx(rate[3])

    geq = hamiltonian_geq()
    block = Block((0, 0), [[-1.0, 1.0], [-1.0, 1.0]], (5, 5))
    pts = block.node_points()
    nodal = np.stack([pts[:, 0].reshape(block.mesh),
                      pts[:, 1].reshape(block.mesh)])
    prob = LsfemProblem(block, geq, [-1.0, -1.0], [-1.0, -1.0], n_gauss=2)
    dofs = prob.dofs_from_nodal(nodal.reshape(2, -1))
    assert prob.objective(dofs) <= 1e-24
