"""Fine systems, projections, and the closed coarse evolution driver.

A fine autonomous system is reduced by a linear projection onto coarse
variables. Sheets (module `atlas`) supply the coarse-to-fine lift; the
closed coarse rate is the projected fine rate evaluated on the lift. The
driver advances that rate with the same RK4 scheme used for the fine
system, re-selecting sheets whenever the trajectory crosses a block edge
or a pruned region, and escaping singular states (projected rate zero
while the fine rate is not) by small perturbations along the fine field.
"""

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import atlas as atlas_mod
from .errors import (MissingSheetError, NoCandidateSheetError,
                     OutOfDomainError, UnresolvableSingularityError)
from .numerics import rk4_step, rk4_trajectory


@dataclass(frozen=True)
class FineSystem:
    """Autonomous fine dynamical system f' = H(f)."""

    dim_fine: int
    rhs: Callable[[np.ndarray], np.ndarray]
    name: str = ""
    params: dict = field(default_factory=dict)


class ProjectionMap:
    """Linear fine-to-coarse map.

    kind "select": the coarse variables are a subset of fine coordinates
    (`retained`); `eliminated` is the complement. kind "average": the
    coarse variables are weighted averages with a constant weight matrix
    whose rows sum to one, and the lift carries the full fine state.
    """

    def __init__(self, dim_fine, retained=None, weights=None):
        self.dim_fine = int(dim_fine)
        if (retained is None) == (weights is None):
            raise ValueError("give exactly one of retained or weights")
        if retained is not None:
            self.kind = "select"
            idx = np.asarray(retained, dtype=int)
            if len(set(idx.tolist())) != idx.size:
                raise ValueError("retained indices must be distinct")
            if idx.min() < 0 or idx.max() >= self.dim_fine:
                raise ValueError("retained index out of range")
            self.retained = idx
            self.eliminated = np.array(
                [i for i in range(self.dim_fine) if i not in set(idx.tolist())],
                dtype=int)
            self.dim_coarse = idx.size
            self.weights = None
        else:
            self.kind = "average"
            w = np.asarray(weights, dtype=float)
            if w.ndim != 2 or w.shape[1] != self.dim_fine:
                raise ValueError("weights must be (dim_coarse, dim_fine)")
            rowsums = w.sum(axis=1)
            if not np.allclose(rowsums, 1.0, atol=1e-10):
                raise ValueError("average weight rows must sum to 1")
            self.weights = w
            self.retained = None
            self.eliminated = np.arange(self.dim_fine)
            self.dim_coarse = w.shape[0]
        if not 0 < self.dim_coarse < self.dim_fine:
            raise ValueError("need 0 < dim_coarse < dim_fine")

    @property
    def n_eliminated(self):
        return self.eliminated.size

    def apply(self, f):
        f = np.asarray(f, dtype=float)
        if self.kind == "select":
            return f[self.retained]
        return self.weights @ f

    def rate(self, fine_rate):
        """The projected rate; the projection is linear so this is apply."""
        fine_rate = np.asarray(fine_rate)
        if self.kind == "select":
            return fine_rate[self.retained]
        return self.weights @ fine_rate

    def eliminated_values(self, f):
        f = np.asarray(f, dtype=float)
        if self.kind == "select":
            return f[self.eliminated]
        return f

    def embed(self, c, g):
        """Fine state from coarse point c and eliminated values g."""
        g = np.asarray(g, dtype=float)
        if self.kind == "select":
            out = np.empty(self.dim_fine)
            out[self.retained] = np.asarray(c, dtype=float)
            out[self.eliminated] = g
            return out
        if g.size != self.dim_fine:
            raise ValueError("average-kind lift must supply the full state")
        return g.copy()

    def descriptor(self):
        if self.kind == "select":
            return {"kind": "select", "dim_fine": self.dim_fine,
                    "retained": self.retained.tolist()}
        return {"kind": "average", "dim_fine": self.dim_fine,
                "weights": self.weights.tolist()}

    @staticmethod
    def from_descriptor(d):
        if d["kind"] == "select":
            return ProjectionMap(d["dim_fine"], retained=d["retained"])
        return ProjectionMap(d["dim_fine"], weights=np.asarray(d["weights"]))


@dataclass(frozen=True)
class ConservedQuantity:
    name: str
    value_fn: Callable[[np.ndarray], float]
    expected_rate: str = "zero"  # zero | increasing | decreasing | free


@dataclass
class EvolutionState:
    coarse: np.ndarray
    sheet_id: int
    t: float
    lift: np.ndarray


@dataclass
class Trajectory:
    t: np.ndarray
    states: np.ndarray  # (n, dim)


@dataclass
class TransferEvent:
    t: float
    from_sheet: int
    to_sheet: int
    reason: str  # block-edge | prune-edge | singularity


@dataclass
class CoarseRun:
    t: np.ndarray
    coarse: np.ndarray          # (n, dim_coarse)
    sheet_ids: np.ndarray       # (n,)
    transfers: list
    status: str                 # completed | out-of-domain | no-sheet
    system_name: str
    proj: ProjectionMap
    diagnostics: dict = field(default_factory=dict)

    @property
    def segments(self):
        """(start_index, sheet_id) pairs, one per constant-sheet stretch."""
        out = []
        for i, sid in enumerate(self.sheet_ids):
            if not out or out[-1][1] != sid:
                out.append((i, int(sid)))
        return out


def fine_integrate(sys, f0, dt, t_end):
    """Fixed-step RK4 trajectory of the fine system from f0 over [0, t_end]."""
    f0 = np.asarray(f0, dtype=float)
    if f0.size != sys.dim_fine:
        raise ValueError("initial state dimension mismatch")
    t, Y = rk4_trajectory(sys.rhs, f0, dt, t_end)
    return Trajectory(t, Y)


def detect_singularity(sys, proj, f, tol=1e-8):
    """True iff the projected rate vanishes while the fine rate does not."""
    h = sys.rhs(np.asarray(f, dtype=float))
    hn = np.linalg.norm(h)
    if hn <= tol:
        return False
    return np.linalg.norm(proj.rate(h)) <= tol * hn


def perturb_singular(sys, f, eps=1e-4):
    """One perturbation step f + eps*H(f) out of a singular state.

    The fine field must not vanish at f (a fixed point has no escape
    direction); the caller re-tests singularity after each step.
    """
    f = np.asarray(f, dtype=float)
    h = sys.rhs(f)
    if np.linalg.norm(h) == 0.0:
        raise ValueError("fine vector field vanishes: nothing to perturb along")
    return f + eps * h


def resolve_singularity(sys, proj, f, tol=1e-8, eps=1e-4, max_retries=5):
    """Perturb along the fine field until the projected rate is nonzero."""
    f = np.asarray(f, dtype=float)
    for _ in range(max_retries + 1):
        if not detect_singularity(sys, proj, f, tol):
            return f
        f = perturb_singular(sys, f, eps)
    raise UnresolvableSingularityError(
        "fine field appears tangent to the singular set; "
        f"{max_retries} perturbations did not escape")


def coarse_rhs(sys, proj, sheet, c):
    """Closed coarse rate: projected fine rate evaluated on the lift."""
    g = atlas_mod.sheet_eval(sheet, c)
    f = proj.embed(c, g)
    return proj.rate(sys.rhs(f))


def _sheet_rate_factory(sys, proj, sheet):
    """Coarse rhs with extrapolating sheet evaluation (integration stages
    may poke just past a block or prune edge before the crossing is refined)."""

    def rate(c):
        g = atlas_mod.sheet_eval(sheet, c, strict=False)
        return proj.rate(sys.rhs(proj.embed(c, g)))

    return rate


@dataclass
class DriverOptions:
    dt_micro: Optional[float] = None     # None: one ordinary step dt
    supplement: bool = False             # solve supplemental sheets on demand
    supplement_threshold: float = 0.5
    solve_settings: object = None        # gsolve.SolveSettings when supplementing
    tie_tol: float = 1e-9
    sing_tol: float = 1e-8
    sing_eps: float = 1e-4
    sing_max_retries: int = 5
    bisect_rtol: float = 1e-8            # crossing refinement, fraction of a step
    transfer_retries: int = 5000         # extra micro steps while no sheet fits
    max_transfers: int = 100000


def coarse_integrate(sys, proj, atl, f0, dt, t_end, options=None):
    """Evolve the closed coarse theory from the fine initial condition f0.

    The initial sheet is selected against f0 (or solved on demand in
    supplement mode). Block-edge and prune-edge crossings are located by
    bisection on the step and handled by an interblock transfer seeded from
    the fine generator at the lifted state; singular states are perturbed
    first. Samples land on the uniform grid k*dt (final point t_end); the
    run ends early with a status if the trajectory exits the atlas domain
    or no candidate sheet is available.
    """
    opt = options or DriverOptions()
    dt_micro = opt.dt_micro if opt.dt_micro is not None else dt
    f0 = np.asarray(f0, dtype=float)
    c0 = proj.apply(f0)
    block0 = atl.block_of(c0)  # out-of-domain start is a precondition failure

    hint0 = sys.rhs(f0)
    if opt.supplement:
        sheet = atlas_mod.ensure_sheet(
            atl, block0, f0, proj, opt.solve_settings,
            threshold=opt.supplement_threshold, sys=sys, vfield_hint=hint0,
            tie_tol=opt.tie_tol)
        dist0 = float(np.linalg.norm(
            atlas_mod.sheet_eval(sheet, c0) - proj.eliminated_values(f0)))
    else:
        sheet, dist0 = atlas_mod.select_sheet(
            atl, block0, f0, proj, sys=sys, vfield_hint=hint0,
            tie_tol=opt.tie_tol)

    n = int(np.ceil(t_end / dt - 1e-12)) if t_end > 0 else 0
    grid = np.array([k * dt for k in range(n)] + [t_end]) if n > 0 else np.array([0.0])
    m = proj.dim_coarse
    coarse = np.full((grid.size, m), np.nan)
    sheet_ids = np.full(grid.size, -1, dtype=int)
    coarse[0] = c0
    sheet_ids[0] = sheet.id

    transfers = []
    status = "completed"
    n_steps = 0
    t = 0.0
    c = c0.copy()
    block = block0
    k = 1
    consecutive_sing = 0

    while k < grid.size:
        rate_fn = _sheet_rate_factory(sys, proj, sheet)

        # singularity guard at the current lifted state
        g_here = atlas_mod.sheet_eval(sheet, c, strict=False)
        f_here = proj.embed(c, g_here)
        if detect_singularity(sys, proj, f_here, opt.sing_tol):
            if consecutive_sing > opt.sing_max_retries:
                status = "no-sheet"
                break
            consecutive_sing += 1
            try:
                f_fix = resolve_singularity(sys, proj, f_here, opt.sing_tol,
                                            opt.sing_eps, opt.sing_max_retries)
            except UnresolvableSingularityError:
                status = "no-sheet"
                break
            old_id = sheet.id
            try:
                c, block, sheet = _reselect(atl, sys, proj, f_fix, opt)
            except OutOfDomainError:
                status = "out-of-domain"
                break
            except NoCandidateSheetError:
                status = "no-sheet"
                break
            transfers.append(TransferEvent(t, old_id, sheet.id, "singularity"))
            continue
        consecutive_sing = 0

        h = grid[k] - t
        c_try = rk4_step(rate_fn, c, h)
        n_steps += 1
        if not np.all(np.isfinite(c_try)):
            status = "out-of-domain"
            break
        kind = _crossing_kind(sheet, c_try)
        if kind is None:
            t = grid[k]
            c = c_try
            coarse[k] = c
            sheet_ids[k] = sheet.id
            k += 1
            continue

        # refine the crossing time by bisection on the step fraction
        s_lo, s_hi = 0.0, 1.0
        while s_hi - s_lo > opt.bisect_rtol:
            s_mid = 0.5 * (s_lo + s_hi)
            c_mid = rk4_step(rate_fn, c, s_mid * h)
            if _crossing_kind(sheet, c_mid) is None:
                s_lo = s_mid
            else:
                s_hi = s_mid
        t_cross = t + s_lo * h
        c_cross = rk4_step(rate_fn, c, s_lo * h) if s_lo > 0 else c.copy()
        kind = _crossing_kind(sheet, rk4_step(rate_fn, c, s_hi * h)) or kind

        if len(transfers) >= opt.max_transfers:
            status = "no-sheet"
            break

        # lift at the crossing, fix singular states, take one fine micro step
        g_cross = atlas_mod.sheet_eval(sheet, c_cross, strict=False)
        f_cross = proj.embed(c_cross, g_cross)
        reason = kind
        if detect_singularity(sys, proj, f_cross, opt.sing_tol):
            try:
                f_cross = resolve_singularity(sys, proj, f_cross, opt.sing_tol,
                                              opt.sing_eps, opt.sing_max_retries)
            except UnresolvableSingularityError:
                status = "no-sheet"
                break
            reason = "singularity"

        # walk the fine flow in micro steps until a sheet serves the
        # delivered state, sampling any grid times passed on the way
        f_run = f_cross
        t_run = t_cross
        t_micro_end = t_cross + dt_micro
        pending = []
        old_id = sheet.id
        selected = None
        for attempt in range(opt.transfer_retries + 1):
            while k < grid.size and grid[k] <= t_micro_end + 1e-15:
                f_run = rk4_step(sys.rhs, f_run, grid[k] - t_run)
                t_run = grid[k]
                coarse[k] = proj.apply(f_run)
                pending.append(k)  # sheet id patched after selection
                k += 1
            f_run = rk4_step(sys.rhs, f_run, t_micro_end - t_run)
            t_run = t_micro_end
            try:
                selected = _reselect(atl, sys, proj, f_run, opt)
                break
            except OutOfDomainError:
                status = "out-of-domain"
                break
            except NoCandidateSheetError:
                if t_micro_end > t_end + dt_micro:
                    break  # ran out of horizon while bridging on the fine flow
                t_micro_end += dt_micro
        if selected is None:
            if status == "completed":
                status = "no-sheet"
            break
        c, block, sheet = selected
        for idx in pending:
            sheet_ids[idx] = sheet.id
        transfers.append(TransferEvent(t_cross, old_id, sheet.id, reason))
        t = t_micro_end

    valid = sheet_ids >= 0
    run = CoarseRun(grid[valid], coarse[valid], sheet_ids[valid], transfers,
                    status, sys.name, proj,
                    {"n_steps": n_steps, "n_transfers": len(transfers),
                     "initial_distance": dist0})
    return run


def _reselect(atl, sys, proj, f, opt):
    """Select (or solve) a sheet for a fresh fine state; returns (c, block, sheet)."""
    c = proj.apply(f)
    block = atl.block_of(c)
    hint = sys.rhs(f)
    if opt.supplement:
        sheet = atlas_mod.ensure_sheet(
            atl, block, f, proj, opt.solve_settings,
            threshold=opt.supplement_threshold, sys=sys, vfield_hint=hint,
            tie_tol=opt.tie_tol)
    else:
        sheet, _ = atlas_mod.select_sheet(atl, block, f, proj, sys=sys,
                                          vfield_hint=hint, tie_tol=opt.tie_tol)
    return c, block, sheet


def _crossing_kind(sheet, c):
    """None while c stays on the sheet; otherwise which boundary was crossed."""
    if not sheet.block.contains(c):
        return "block-edge"
    if not atlas_mod.selectable_at(sheet, c):
        return "prune-edge"
    return None


def lift_trajectory(run, atl):
    """Reconstruct the fine trajectory through each sample's sheet."""
    proj = run.proj
    out = np.empty((run.t.size, proj.dim_fine))
    for i in range(run.t.size):
        sid = int(run.sheet_ids[i])
        if sid not in atl.sheets:
            raise MissingSheetError(f"run references unknown sheet id {sid}")
        sheet = atl.sheets[sid]
        g = atlas_mod.sheet_eval(sheet, run.coarse[i], strict=False)
        out[i] = proj.embed(run.coarse[i], g)
    return out


def conserved_rate_check(q, run, atl, sys):
    """Rates of a conserved quantity along a run, two ways.

    lifted: finite difference of S evaluated on the lifted trajectory.
    naive: finite difference of S on the retained coordinates alone, the
    eliminated ones zero-filled, exposing spurious non-conservation.
    """
    gamma = lift_trajectory(run, atl)
    lifted_vals = np.array([q.value_fn(f) for f in gamma])
    zero = np.zeros(run.proj.n_eliminated)
    naive_vals = np.array(
        [q.value_fn(run.proj.embed(c, zero)) for c in run.coarse])
    lifted_rate = np.gradient(lifted_vals, run.t)
    naive_rate = np.gradient(naive_vals, run.t)
    return lifted_rate, naive_rate


def write_run_csv(run, path, atl=None, lifted=False):
    """Trajectory CSV: t, coarse variables, active sheet id, optional lift."""
    cols = ["t"] + [f"c_{j+1}" for j in range(run.coarse.shape[1])] + ["sheet_id"]
    gamma = None
    if lifted:
        if atl is None:
            raise ValueError("lifted export needs the atlas")
        gamma = lift_trajectory(run, atl)
        cols += [f"f_{j+1}" for j in range(gamma.shape[1])]
    with open(path, "w") as fh:
        fh.write(",".join(cols) + "\n")
        for i in range(run.t.size):
            row = [repr(float(run.t[i]))] + [repr(float(v)) for v in run.coarse[i]]
            row.append(str(int(run.sheet_ids[i])))
            if gamma is not None:
                row += [repr(float(v)) for v in gamma[i]]
            fh.write(",".join(row) + "\n")


def write_transfers_csv(run, path):
    """Transfer-event CSV: t, from_sheet, to_sheet, reason."""
    with open(path, "w") as fh:
        fh.write("t,from_sheet,to_sheet,reason\n")
        for ev in run.transfers:
            fh.write(f"{float(ev.t)!r},{ev.from_sheet},{ev.to_sheet},{ev.reason}\n")
