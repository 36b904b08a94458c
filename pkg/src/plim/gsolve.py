"""Least-squares finite-element objective for the lift-map equation on a
block, with a point anchor, solved by simulated annealing.

The residual of the quasilinear system is squared at Gauss points of each
element and summed with quadrature weights; the imposed anchor datum is
handled by eliminating the degree of freedom when the anchor sits on a
mesh node, by a quadratic penalty (followed by an exact projection)
otherwise. Complex mode doubles the dof vector into real and imaginary
parts and feeds complex values to the residual; pruning masks nodes whose
imaginary part stays significant.
"""

import itertools
from dataclasses import dataclass, field, replace

import numpy as np

from .anneal import AnnealConfig, minimize
from .atlas import Sheet
from .errors import SolverFailedError


class GEquation:
    """Residual of the lift-map PDE specialized to one system.

    Subclasses set n_components and implement `residual` for batched
    points: c (npts, ndim), g (npts, n_components), grads
    (npts, n_components, ndim) -> (npts, n_components). `consistency`
    may return extra residual rows tying the projected lift back to the
    coarse point (used when the projection is an average and the lift
    carries the whole fine state)."""

    n_components = 1
    name = ""

    def residual(self, c, g, grads):
        raise NotImplementedError

    def consistency(self, c, g):
        return None


def eval_residual(geq, c, g_vals, g_grads):
    """Pointwise residual vector at a single coarse point."""
    c = np.atleast_2d(np.asarray(c, dtype=float))
    g = np.atleast_2d(np.asarray(g_vals))
    grads = np.asarray(g_grads).reshape(1, geq.n_components, c.shape[1])
    return geq.residual(c, g, grads)[0]


def _default_gauss(ndim):
    # first-order residuals of (multi)linear interpolants: midpoint rule in
    # 1-d recovers the chord structure of the equation exactly; 2x2 per
    # bilinear element otherwise
    return 1 if ndim == 1 else 2


class LsfemProblem:
    """Quadrature tables and dof layout for one sheet solve."""

    def __init__(self, block, geq, anchor_coarse, anchor_data, mode="real",
                 n_gauss=None, w_anchor=None, consistency_weight=1.0):
        if mode not in ("real", "complex"):
            raise ValueError("mode must be 'real' or 'complex'")
        self.block = block
        self.geq = geq
        self.mode = mode
        self.anchor_coarse = np.atleast_1d(
            np.asarray(anchor_coarse, dtype=float))
        self.anchor_data = np.atleast_1d(np.asarray(anchor_data, dtype=float))
        if self.anchor_data.size != geq.n_components:
            raise ValueError("anchor data must have one value per component")
        if not block.contains(self.anchor_coarse):
            raise ValueError("anchor must lie inside the block")
        self.n_gauss = n_gauss if n_gauss is not None else _default_gauss(
            block.ndim)
        self.consistency_weight = float(consistency_weight)
        self._build_quadrature()
        self._build_anchor(w_anchor)
        self._nodal_buf = np.zeros(
            (geq.n_components, block.n_nodes),
            dtype=complex if mode == "complex" else float)

    # -- assembly tables ---------------------------------------------------

    def _build_quadrature(self):
        block = self.block
        d = block.ndim
        gp, gw = np.polynomial.legendre.leggauss(self.n_gauss)
        n_nodes = block.n_nodes
        mesh = block.mesh
        strides = np.array(
            [int(np.prod(mesh[k + 1:])) for k in range(d)], dtype=int)
        pts, wts, n_rows, d_rows = [], [], [], []
        elem_ranges = [range(n - 1) for n in mesh]
        for e in itertools.product(*elem_ranges):
            corners = []
            for corner in itertools.product((0, 1), repeat=d):
                flat = sum((e[k] + corner[k]) * strides[k] for k in range(d))
                corners.append((corner, flat))
            for q in itertools.product(range(self.n_gauss), repeat=d):
                xi = np.array([(gp[q[k]] + 1.0) / 2.0 for k in range(d)])
                x = np.array([block.axes[k][e[k]] + xi[k] * block.h[k]
                              for k in range(d)])
                w = np.prod([gw[q[k]] * block.h[k] / 2.0 for k in range(d)])
                row_n = np.zeros(n_nodes)
                rows_d = np.zeros((d, n_nodes))
                for corner, flat in corners:
                    wgt = 1.0
                    for k in range(d):
                        wgt *= xi[k] if corner[k] else (1.0 - xi[k])
                    row_n[flat] = wgt
                    for gd in range(d):
                        dw = 1.0
                        for k in range(d):
                            if k == gd:
                                dw *= (1.0 / block.h[k]) if corner[k] \
                                    else (-1.0 / block.h[k])
                            else:
                                dw *= xi[k] if corner[k] else (1.0 - xi[k])
                        rows_d[gd, flat] = dw
                pts.append(x)
                wts.append(w)
                n_rows.append(row_n)
                d_rows.append(rows_d)
        self.qpts = np.array(pts)                    # (nq, d)
        self.qwts = np.array(wts)                    # (nq,)
        self.N = np.array(n_rows)                    # (nq, n_nodes)
        self.D = np.stack(d_rows, axis=1)            # (d, nq, n_nodes)
        # stacked operator so one matmul yields values and all gradients
        self._op = np.concatenate([self.N[None], self.D], axis=0).reshape(
            (1 + d) * self.N.shape[0], n_nodes).T.copy()

    def _build_anchor(self, w_anchor):
        block = self.block
        pts = block.node_points()
        dists = np.linalg.norm(pts - self.anchor_coarse, axis=1)
        nearest = int(np.argmin(dists))
        scale = float(np.max(block.h))
        if dists[nearest] <= 1e-9 * scale:
            self.anchor_node = nearest
            self.w_anchor = 0.0
        else:
            self.anchor_node = None
            self.w_anchor = (w_anchor if w_anchor is not None
                             else 1e4 * block.area)
        e, xi = block.locate(self.anchor_coarse)
        row = np.zeros(block.n_nodes)
        strides = np.array([int(np.prod(block.mesh[k + 1:]))
                            for k in range(block.ndim)], dtype=int)
        for corner in itertools.product((0, 1), repeat=block.ndim):
            w = 1.0
            for k in range(block.ndim):
                w *= xi[k] if corner[k] else (1.0 - xi[k])
            flat = sum((e[k] + corner[k]) * strides[k]
                       for k in range(block.ndim))
            row[flat] = w
        self.anchor_row = row
        free = np.arange(block.n_nodes)
        if self.anchor_node is not None:
            free = free[free != self.anchor_node]
        self.free_nodes = free

    # -- dof layout ---------------------------------------------------------

    @property
    def n_free(self):
        return self.free_nodes.size

    @property
    def n_dofs(self):
        n = self.geq.n_components * self.n_free
        return 2 * n if self.mode == "complex" else n

    @property
    def area(self):
        return self.block.area

    def initial_dofs(self):
        """Constant field equal to the anchor datum (imaginary part zero)."""
        base = np.repeat(self.anchor_data, self.n_free)
        if self.mode == "complex":
            return np.concatenate([base, np.zeros_like(base)])
        return base.copy()

    def nodal_from_dofs(self, dofs, copy=False):
        """Nodal array from the dof vector.

        The no-copy path reuses one internal buffer per problem (objective
        evaluation is single threaded); pass copy=True before mutating."""
        dofs = np.asarray(dofs, dtype=float)
        ncomp = self.geq.n_components
        nn = self.block.n_nodes
        if self.mode == "complex":
            half = dofs.size // 2
            buf = self._nodal_buf
            buf[:, self.free_nodes] = dofs[:half].reshape(ncomp, self.n_free)
            buf[:, self.free_nodes] += 1j * dofs[half:].reshape(
                ncomp, self.n_free)
            nodal = buf
        elif self.anchor_node is None:
            nodal = dofs.reshape(ncomp, nn)
        else:
            nodal = self._nodal_buf
            nodal[:, self.free_nodes] = dofs.reshape(ncomp, self.n_free)
        if self.anchor_node is not None:
            nodal[:, self.anchor_node] = self.anchor_data
        return nodal.copy() if copy else nodal

    def dofs_from_nodal(self, nodal):
        ncomp = self.geq.n_components
        flat = nodal.reshape(ncomp, -1)[:, self.free_nodes]
        if self.mode == "complex":
            return np.concatenate([np.real(flat).ravel(),
                                   np.imag(flat).ravel()])
        return np.real(flat).ravel()

    # -- objective ----------------------------------------------------------

    def objective(self, dofs):
        nodal = self.nodal_from_dofs(dofs)
        nq = self.qpts.shape[0]
        d = self.block.ndim
        stacked = (nodal @ self._op).reshape(-1, 1 + d, nq)
        g = stacked[:, 0, :].T                      # (nq, ncomp)
        grads = stacked[:, 1:, :].transpose(2, 0, 1)  # (nq, ncomp, d)
        res = self.geq.residual(self.qpts, g, grads)
        if np.iscomplexobj(res):
            sq = res.real * res.real + res.imag * res.imag
        else:
            sq = res * res
        val = float(self.qwts @ sq.sum(axis=1)) if sq.shape[1] > 1 \
            else float(self.qwts @ sq[:, 0])
        extra = self.geq.consistency(self.qpts, g)
        if extra is not None:
            if np.iscomplexobj(extra):
                esq = extra.real * extra.real + extra.imag * extra.imag
            else:
                esq = extra * extra
            val += self.consistency_weight * float(self.qwts @ esq.sum(axis=1))
        if self.anchor_node is None and self.w_anchor:
            at_anchor = nodal @ self.anchor_row
            diff = at_anchor - self.anchor_data
            val += self.w_anchor * float(np.real(diff @ np.conj(diff)))
        return val


def assemble_objective(problem, dofs):
    """Quadrature-weighted squared residual plus any anchor penalty."""
    return problem.objective(dofs)


@dataclass
class SolveSettings:
    """Everything a sheet solve needs beyond the problem geometry."""

    geq: GEquation
    mode: str = "real"
    n_gauss: int | None = None
    w_anchor: float | None = None
    consistency_weight: float = 1.0
    accept_factor: float = 1e-4          # threshold = factor * block area
    accept_threshold: float | None = None
    prune_tol: float = 1e-2
    anneal: AnnealConfig = field(default_factory=AnnealConfig)
    max_attempts: int = 3
    rectify_signs: bool = True


def _neighbor_pairs(mesh):
    """Index pairs of mesh-adjacent nodes (flat C-order indexing)."""
    d = len(mesh)
    strides = [int(np.prod(mesh[k + 1:])) for k in range(d)]
    pairs = []
    for idx in itertools.product(*(range(n) for n in mesh)):
        flat = sum(idx[k] * strides[k] for k in range(d))
        for k in range(d):
            if idx[k] + 1 < mesh[k]:
                pairs.append((flat, flat + strides[k]))
    return pairs


def _rectify_signs(problem, nodal, objective_value):
    """Resolve the per-node sign ambiguity of square-law residuals.

    Some residuals depend on nodal values only through even powers, so the
    discrete objective cannot tell a smooth branch from a sign-flipped one.
    Flip any nodal sign that leaves the objective unchanged while making
    the sheet smoother (anchored node excluded); a no-op for equations
    without the symmetry."""
    pairs = _neighbor_pairs(problem.block.mesh)
    ncomp = problem.geq.n_components
    flat = nodal.reshape(ncomp, -1).copy()

    def roughness(arr):
        return sum(float(np.sum(np.abs(arr[:, i] - arr[:, j]) ** 2))
                   for i, j in pairs)

    tol = 1e-10 * (1.0 + abs(objective_value))
    current = roughness(flat)
    obj = objective_value
    for _ in range(3):
        changed = False
        for node in range(flat.shape[1]):
            if node == problem.anchor_node:
                continue
            trial = flat.copy()
            trial[:, node] = -trial[:, node]
            r = roughness(trial)
            if r < current - 1e-15:
                o = problem.objective(problem.dofs_from_nodal(
                    trial.reshape(nodal.shape)))
                if o <= obj + tol:
                    flat = trial
                    current = r
                    obj = o
                    changed = True
        if not changed:
            break
    return flat.reshape(nodal.shape), obj


def solve_sheet(problem, settings, sheet_id=-1):
    """Minimize the block objective and package the result as a Sheet.

    The anchor is exact by construction (eliminated dof) or projected onto
    the anchor constraint after the penalty solve. Complex-mode results
    are pruned before returning. Raises SolverFailedError, best sheet
    attached, when the objective stays above the acceptance threshold
    after all attempts."""
    return solve_sheet_from(problem, settings, None, sheet_id)


def solve_sheet_from(problem, settings, x0, sheet_id=-1):
    """solve_sheet with an optional warm-start dof vector for the first
    attempt (later attempts fall back to the constant anchor field)."""
    threshold = (settings.accept_threshold if settings.accept_threshold
                 is not None else settings.accept_factor * problem.area)
    best = None
    for attempt in range(max(settings.max_attempts, 1)):
        cfg = replace(settings.anneal,
                      seed=settings.anneal.seed + 7919 * attempt)
        start = x0 if (attempt == 0 and x0 is not None) \
            else problem.initial_dofs()
        result = minimize(problem.objective, start, cfg)
        if best is None or result.fun < best.fun:
            best = result
        if best.fun <= threshold:
            break
    nodal = problem.nodal_from_dofs(best.x, copy=True)
    obj = best.fun

    if problem.anchor_node is None:
        # project the element values so the anchor datum holds exactly
        row = problem.anchor_row
        sel = row > 0
        deficit = problem.anchor_data - (nodal @ row)
        nodal[:, sel] += np.outer(deficit, row[sel]) / float(row[sel] @ row[sel])
        obj = problem.objective(problem.dofs_from_nodal(nodal))

    if settings.rectify_signs:
        nodal, obj = _rectify_signs(problem, nodal, obj)

    mesh_shape = (problem.geq.n_components, *problem.block.mesh)
    sheet = Sheet(sheet_id, problem.block, problem.geq.n_components,
                  nodal.reshape(mesh_shape),
                  problem.anchor_coarse, problem.anchor_data,
                  objective_value=float(obj))
    if problem.mode == "complex":
        sheet = prune_complex(sheet, settings.prune_tol)
    else:
        sheet.nodal = np.real(sheet.nodal)
    if obj > threshold:
        raise SolverFailedError(
            f"objective {obj:.3e} above threshold {threshold:.3e} "
            f"after {settings.max_attempts} attempts", sheet=sheet)
    return sheet


def prune_complex(sheet, prune_tol):
    """Mask nodes whose imaginary part is significant; keep real parts.

    A node is excluded when any component has |imag| above prune_tol
    relative to max(1, |real|). A sheet losing every node is flagged
    degenerate but retained for diagnostics."""
    nodal = np.asarray(sheet.nodal)
    im = np.abs(np.imag(nodal))
    re = np.abs(np.real(nodal))
    with np.errstate(invalid="ignore"):
        bad = im > prune_tol * np.maximum(1.0, re)
    mask = np.any(bad, axis=0)
    out = Sheet(sheet.id, sheet.block, sheet.n_components,
                np.real(nodal).copy(), sheet.anchor_coarse,
                np.real(sheet.anchor_data), prune_mask=mask,
                objective_value=sheet.objective_value)
    if mask.all():
        out.degenerate = True
    return out
