"""The three ODE test systems: dynamics, projections, lift-map residuals,
default atlas layouts, and named initial-condition presets.

lorenz: 3-dof dissipative flow, coarse (x, z), y eliminated.
hamiltonian4: two coupled nonlinear oscillators, coarse (x1, x2),
    (x3, x4) eliminated as a pair of lift components.
oscillator: linear spring-mass, coarse x, y eliminated; the lift family
    is known in closed form (circles), which drives the complex-mode and
    pruning machinery.
"""

from dataclasses import dataclass, field

import numpy as np

from .atlas import Atlas, Sheet
from .core import ConservedQuantity, FineSystem, ProjectionMap
from .errors import SolverFailedError
from .gsolve import GEquation, LsfemProblem, SolveSettings, solve_sheet


# -- lorenz ------------------------------------------------------------------

def lorenz_system(sigma=10.0, b=8.0 / 3.0, r=25.0):
    def rhs(f):
        x, y, z = f
        return np.array([sigma * (y - x), r * x - y - x * z, x * y - b * z])

    return FineSystem(3, rhs, "lorenz", {"sigma": sigma, "b": b, "r": r})


def lorenz_projection():
    return ProjectionMap(3, retained=[0, 2])


def lorenz_fixed_points(sigma=10.0, b=8.0 / 3.0, r=25.0):
    s = np.sqrt(b * (r - 1.0))
    return [np.zeros(3), np.array([s, s, r - 1.0]),
            np.array([-s, -s, r - 1.0])]


class LorenzGEq(GEquation):
    n_components = 1
    name = "lorenz"

    def __init__(self, sigma=10.0, b=8.0 / 3.0, r=25.0):
        self.sigma, self.b, self.r = sigma, b, r

    def residual(self, c, g, grads):
        x, z = c[:, 0], c[:, 1]
        G = g[:, 0]
        Gx, Gz = grads[:, 0, 0], grads[:, 0, 1]
        res = (self.sigma * (G - x) * Gx + (x * G - self.b * z) * Gz
               + G + x * (z - self.r))
        return res[:, None]


def lorenz_geq(sigma=10.0, b=8.0 / 3.0, r=25.0):
    return LorenzGEq(sigma, b, r)


# -- 4-dof hamiltonian oscillators --------------------------------------------

def hamiltonian_system():
    def rhs(f):
        x1, x2, x3, x4 = f
        return np.array([x2, -x1 * (1.0 + x3 * x3),
                         x4, -x3 * (1.0 + x1 * x1)])

    return FineSystem(4, rhs, "hamiltonian4")


def hamiltonian_projection():
    return ProjectionMap(4, retained=[0, 1])


def hamiltonian_energy(f):
    x1, x2, x3, x4 = f
    return 0.5 * (x2 * x2 + x4 * x4) + 0.5 * (x1 * x1 + x3 * x3) \
        + 0.5 * x1 * x1 * x3 * x3


class HamiltonianGEq(GEquation):
    n_components = 2
    name = "hamiltonian4"

    def residual(self, c, g, grads):
        x1, x2 = c[:, 0], c[:, 1]
        G1, G2 = g[:, 0], g[:, 1]
        adv = -x1 * (1.0 + G1 * G1)      # coarse x2-rate on the lift
        r1 = x2 * grads[:, 0, 0] + adv * grads[:, 0, 1] - G2
        r2 = x2 * grads[:, 1, 0] + adv * grads[:, 1, 1] + G1 * (1.0 + x1 * x1)
        return np.stack([r1, r2], axis=1)


def hamiltonian_geq():
    return HamiltonianGEq()


# -- linear oscillator ---------------------------------------------------------

def oscillator_system():
    def rhs(f):
        x, y = f
        return np.array([-y, x])

    return FineSystem(2, rhs, "oscillator")


def oscillator_projection():
    return ProjectionMap(2, retained=[0])


def oscillator_energy(f):
    x, y = f
    return 0.5 * (x * x + y * y)


class OscillatorGEq(GEquation):
    n_components = 1
    name = "oscillator"

    def residual(self, c, g, grads):
        res = g[:, 0] * grads[:, 0, 0] + c[:, 0]
        return res[:, None]


def oscillator_geq():
    return OscillatorGEq()


def exact_oscillator_sheet(x0, y0, block, sheet_id=-1):
    """Closed-form circle branch through (x0, y0) sampled on a block mesh.

    The branch sign follows y0; for y0 = 0 the trajectory immediately
    enters the half plane matching the flow out of (x0, 0), so the sign
    of x0 decides. Nodes beyond the circle radius are masked."""
    r2 = x0 * x0 + y0 * y0
    if r2 == 0.0:
        raise ValueError("the origin is a fixed point: no circle through it")
    branch = np.sign(y0) if y0 != 0.0 else np.sign(x0)
    xs = block.axes[0]
    vals = branch * np.sqrt(np.clip(r2 - xs * xs, 0.0, None))
    mask = xs * xs > r2 * (1.0 + 1e-14)
    anchor_x = float(np.clip(x0, block.bounds[0, 0], block.bounds[0, 1]))
    anchor_val = branch * np.sqrt(max(r2 - anchor_x * anchor_x, 0.0))
    return Sheet(sheet_id, block, 1, vals[None, :], np.array([anchor_x]),
                 np.array([anchor_val]), prune_mask=mask)


# -- presets and default atlas parameters --------------------------------------

PRESETS = {
    "L1": ("lorenz", np.array([0.0, 2.0, 8.0])),
    "L2": ("lorenz", np.array([-10.0, 5.0, 23.0])),
    "L3": ("lorenz", np.array([1.0, -5.0, 12.0])),
    "L4": ("lorenz", np.array([10.0, 5.0, 13.0])),
    "H1": ("hamiltonian4", np.array([-0.875, -0.875, 0.5, 0.5])),
    "H2": ("hamiltonian4", np.array([1.125, 1.125, 0.5, 0.5])),
    "C-Ex1": ("oscillator", np.array([-0.3, -1.8])),
    "C-Ex2": ("oscillator", np.array([0.2, 1.0])),
}


@dataclass
class AtlasSpec:
    """Generation parameters for one system's atlas."""

    system: str
    domain: list
    block_size: list
    mesh: tuple
    complex_mode: bool = False
    anchors: dict = field(default_factory=dict)


def default_atlas_spec(system):
    if system == "lorenz":
        return AtlasSpec("lorenz", [[-24.0, 24.0], [0.0, 48.0]], [4.0, 4.0],
                         (6, 6),
                         anchors={"y0": -24.0, "dy": 1.0, "n": 48})
    if system == "hamiltonian4":
        return AtlasSpec("hamiltonian4", [[-2.0, 2.0], [-2.0, 2.0]],
                         [1.0, 1.0], (6, 6),
                         anchors={"lo": -1.0, "hi": 1.0, "spacing": 0.25,
                                  "base": 0.0})
    if system == "oscillator":
        return AtlasSpec("oscillator", [[-3.0, 3.0]], [1.5], (7,),
                         complex_mode=True,
                         anchors={"lo": -2.5, "hi": 2.5, "spacing": 0.5})
    raise KeyError(f"unknown system '{system}'")


@dataclass
class SystemBundle:
    name: str
    system: FineSystem
    proj: ProjectionMap
    geq: GEquation
    atlas_spec: AtlasSpec
    var_names: tuple
    conserved: list = field(default_factory=list)


def get_bundle(name):
    if name == "lorenz":
        return SystemBundle("lorenz", lorenz_system(), lorenz_projection(),
                            lorenz_geq(), default_atlas_spec("lorenz"),
                            ("x", "y", "z"))
    if name == "hamiltonian4":
        energy = ConservedQuantity("energy", hamiltonian_energy, "zero")
        return SystemBundle("hamiltonian4", hamiltonian_system(),
                            hamiltonian_projection(), hamiltonian_geq(),
                            default_atlas_spec("hamiltonian4"),
                            ("x1", "x2", "x3", "x4"), [energy])
    if name == "oscillator":
        energy = ConservedQuantity("energy", oscillator_energy, "zero")
        return SystemBundle("oscillator", oscillator_system(),
                            oscillator_projection(), oscillator_geq(),
                            default_atlas_spec("oscillator"),
                            ("x", "y"), [energy])
    raise KeyError(f"unknown system '{name}'")


def new_atlas(spec):
    return Atlas(spec.domain, spec.block_size, spec.mesh, system=spec.system,
                 params={"anchors": spec.anchors,
                         "complex_mode": spec.complex_mode})


def _block_corners(block):
    d = block.ndim
    import itertools
    for bits in itertools.product((0, 1), repeat=d):
        yield np.array([block.bounds[k, bit] for k, bit in enumerate(bits)])


def enumerate_anchor_chains(atl, spec):
    """Anchor lattice grouped into warm-startable chains.

    Each chain holds (block, anchor point, anchor data) entries sharing a
    block corner, ordered along the data ladder, so consecutive solves can
    seed each other. lorenz: at every block corner, eliminated values
    y0 + k*dy, k = 0..n. hamiltonian4: at one block corner, two axis
    sweeps of the (x3, x4) pair through a base value. oscillator: ladders
    of y data at both interval ends."""
    chains = []
    a = spec.anchors
    if spec.system in ("lorenz", "oscillator"):
        ladder = a["dy"] * np.arange(a["n"] + 1) if "y0" in a else None
        windows = a.get("windows")  # per-block ladder origin overrides
        for block in atl.blocks.values():
            if ladder is not None:
                y0 = a["y0"]
                if windows is not None:
                    y0 = windows.get(block.id, windows.get("default", y0))
                values = y0 + ladder
            else:
                values = np.arange(a["lo"], a["hi"] + 1e-12, a["spacing"])
            for corner in _block_corners(block):
                chains.append([(block, corner.copy(), np.array([v]))
                               for v in values])
    elif spec.system == "hamiltonian4":
        sweep = np.arange(a["lo"], a["hi"] + 1e-12, a["spacing"])
        base = a.get("base", 0.0)
        for block in atl.blocks.values():
            corner = block.bounds[:, 0].copy()  # single corner per block
            chains.append([(block, corner.copy(), np.array([s, base]))
                           for s in sweep])
            chains.append([(block, corner.copy(), np.array([base, s]))
                           for s in sweep if s != base])
    else:
        raise KeyError(f"no anchor rule for system '{spec.system}'")
    return chains


def enumerate_anchors(atl, spec):
    """Flat (block, anchor point, anchor data) list for atlas generation."""
    return [entry for chain in enumerate_anchor_chains(atl, spec)
            for entry in chain]


def precompute_atlas(bundle, spec=None, solve=None, block_filter=None,
                     failure_budget=None, progress=None, warm_start=True):
    """Solve the full anchor lattice into a fresh atlas.

    block_filter keeps only listed block ids (for reduced neighborhoods);
    failure_budget aborts once too many solves end above threshold. With
    warm_start, each solve after the first of a ladder starts from the
    previous sheet shifted by the anchor increment instead of the constant
    field (the ladder members are nearby manifolds). Returns
    (atlas, report)."""
    spec = spec or bundle.atlas_spec
    solve = solve or SolveSettings(
        geq=bundle.geq, mode="complex" if spec.complex_mode else "real")
    atl = new_atlas(spec)
    chains = enumerate_anchor_chains(atl, spec)
    if block_filter is not None:
        keep = set(block_filter)
        chains = [ch for ch in chains if ch[0][0].id in keep]
    total = sum(len(ch) for ch in chains)
    objectives = []
    n_failed = 0
    done = 0
    from dataclasses import replace as _rep
    from .gsolve import solve_sheet_from
    for chain in chains:
        prev_nodal = None
        prev_data = None
        for block, c, data in chain:
            prob = LsfemProblem(block, solve.geq, c, data, mode=solve.mode,
                                n_gauss=solve.n_gauss,
                                w_anchor=solve.w_anchor,
                                consistency_weight=solve.consistency_weight)
            per = _rep(solve, anneal=_rep(solve.anneal,
                                          seed=solve.anneal.seed + done))
            x0 = None
            if warm_start and prev_nodal is not None:
                shifted = prev_nodal + (data - prev_data)[:, None]
                x0 = prob.dofs_from_nodal(shifted)
            try:
                sheet = solve_sheet_from(prob, per, x0)
                atl.add_sheet(sheet)
                objectives.append(sheet.objective_value)
                prev_nodal = np.real(sheet.nodal).reshape(
                    sheet.n_components, -1)
                prev_data = np.real(sheet.anchor_data)
            except SolverFailedError as err:
                n_failed += 1
                if err.sheet is not None:
                    err.sheet.degenerate = True
                    atl.add_sheet(err.sheet)  # kept for diagnostics only
                    prev_nodal = np.real(err.sheet.nodal).reshape(
                        err.sheet.n_components, -1)
                    prev_data = np.real(err.sheet.anchor_data)
                if failure_budget is not None and n_failed > failure_budget:
                    raise
            done += 1
            if progress is not None:
                progress(done, total)
    report = {"n_anchors": total, "n_solved": len(objectives),
              "n_failed": n_failed,
              "objective_max": max(objectives) if objectives else 0.0,
              "objective_mean": (float(np.mean(objectives))
                                 if objectives else 0.0)}
    return atl, report


def lorenz_anchor_windows(atl, coarse_points, eliminated_values, n, dy,
                          margin=2.0):
    """Per-block ladder origins centered on the trajectory's local data.

    Blocks the path visits take a window around the eliminated values seen
    there; unvisited blocks fall back to the slaved estimate y ~ x at the
    block center (the attractor wings run close to the diagonal)."""
    span = n * dy
    windows = {}
    seen = {}
    for c, y in zip(coarse_points, eliminated_values):
        try:
            bid = atl.block_of(c).id
        except Exception:
            continue
        lo, hi = seen.get(bid, (np.inf, -np.inf))
        seen[bid] = (min(lo, y), max(hi, y))
    for bid, block in atl.blocks.items():
        if bid in seen:
            lo, hi = seen[bid]
            mid = 0.5 * (lo + hi)
        else:
            mid = 0.5 * (block.bounds[0, 0] + block.bounds[0, 1])
        windows[bid] = float(mid - span / 2.0)
    return windows


def visited_blocks(atl, coarse_points, ring=0):
    """Block ids touched by a coarse path, expanded by `ring` lattice shells."""
    base = set()
    for c in coarse_points:
        try:
            base.add(atl.block_of(c).id)
        except Exception:
            continue
    if ring <= 0:
        return base
    out = set()
    import itertools
    for idx in base:
        for off in itertools.product(range(-ring, ring + 1),
                                     repeat=len(idx)):
            cand = tuple(np.array(idx) + np.array(off))
            if cand in atl.blocks:
                out.add(cand)
    return out
