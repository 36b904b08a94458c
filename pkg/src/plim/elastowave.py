"""1-D elastodynamics of a strongly heterogeneous bar, reduced by spatial
averaging over sub-domains.

The bar is discretized with linear hats (Galerkin), giving the fine ODE
system udot = v, vdot = beta u with beta = M^-1 K. A sub-domain's coarse
variables are the averaged displacement and velocity (ubar, vbar) with the
hat-integral weights psi; the lift map has one component per fine dof and
solves the quasilinear system tying its coarse directional derivative to
the fine rates. Manifolds are marched station-by-station along the
faster coarse direction, each slab a linear least-squares problem with
frozen advection coefficients (seeded from the previous station), the
anchor station seeded from the imposed fine initial condition.

Coupling: sub-domains tile the bar, one per Gauss point of a coarse
quadratic mesh; each coarse step selects a stored manifold per Gauss point
from boundary-acceleration estimates, lifts the averaged state to fine
displacements, and closes the momentum balance through the averaged
stress.
"""

import itertools
from dataclasses import dataclass, field

import numpy as np

from .atlas import Atlas, Block, Sheet, sheet_eval
from .core import FineSystem, ProjectionMap
from .errors import PlimError
from .gsolve import GEquation, LsfemProblem
from .numerics import gauss_rule, gauss_rule_on


@dataclass(frozen=True)
class Medium1D:
    """Sinusoidally varying modulus E(x) = e0 (2 + cos(2 pi (x+x0)/wavelength))."""

    length: float
    rho: float = 1.0
    e0: float = 1.0
    wavelength: float = 1.0
    variant: str = "cos"   # cos | sin
    x0: float = 0.0        # phase offset for sub-domain restrictions

    def modulus(self, x):
        arg = 2.0 * np.pi * (np.asarray(x, dtype=float) + self.x0) \
            / self.wavelength
        osc = np.cos(arg) if self.variant == "cos" else np.sin(arg)
        return self.e0 * (2.0 + osc)

    def mean_modulus(self):
        return 2.0 * self.e0

    def restrict(self, offset, length):
        """The medium seen by a window starting at `offset`."""
        return Medium1D(length, self.rho, self.e0, self.wavelength,
                        self.variant, self.x0 + offset)


@dataclass
class BCSpec:
    kind: str = "free"     # free | fixed | periodic | accel
    a_left: float = 0.0    # end accelerations for kind == "accel"
    a_right: float = 0.0


@dataclass
class GalerkinOps:
    """Hat-function discretization of one bar or sub-domain."""

    medium: Medium1D
    nodes: np.ndarray
    mass: np.ndarray
    stiffness: np.ndarray
    beta: np.ndarray
    bc: BCSpec
    periodic: bool = False

    @property
    def n_nodes(self):
        return self.nodes.size


def assemble_galerkin(medium, nodes_per_wavelength, bc=None):
    """Mass and stiffness of the hat discretization; beta = M^-1 K.

    The sinusoidal modulus is integrated with a 10-point Gauss rule per
    element (exact to machine precision at these element sizes). Periodic
    meshes identify the end nodes."""
    bc = bc or BCSpec()
    if nodes_per_wavelength < 4:
        raise ValueError("need at least 4 nodes per modulus wavelength")
    n_elem = int(round(medium.length / medium.wavelength
                       * nodes_per_wavelength))
    nodes = np.linspace(0.0, medium.length, n_elem + 1)
    h = nodes[1] - nodes[0]
    periodic = bc.kind == "periodic"
    n = n_elem if periodic else n_elem + 1
    M = np.zeros((n, n))
    K = np.zeros((n, n))
    me = medium.rho * h / 6.0 * np.array([[2.0, 1.0], [1.0, 2.0]])
    for e in range(n_elem):
        xq, wq = gauss_rule_on(nodes[e], nodes[e + 1], 10)
        e_int = float(wq @ medium.modulus(xq))
        ke = -(e_int / h ** 2) * np.array([[1.0, -1.0], [-1.0, 1.0]])
        idx = [e % n, (e + 1) % n]
        for a, b in itertools.product((0, 1), repeat=2):
            M[idx[a], idx[b]] += me[a, b]
            K[idx[a], idx[b]] += ke[a, b]
    beta = np.linalg.solve(M, K)
    return GalerkinOps(medium, nodes[:n] if periodic else nodes, M, K, beta,
                       bc, periodic)


def make_fine_system(gal):
    """The 2-eta first-order system with boundary rows overridden per bc."""
    eta = gal.n_nodes
    beta = gal.beta
    kind = gal.bc.kind
    a_l, a_r = gal.bc.a_left, gal.bc.a_right

    def rhs(f):
        u = f[:eta]
        v = f[eta:]
        udot = v.copy()
        vdot = beta @ u
        if kind == "fixed":
            udot[0] = udot[-1] = 0.0
            vdot[0] = vdot[-1] = 0.0
        elif kind == "accel":
            vdot[0] = a_l
            vdot[-1] = a_r
        return np.concatenate([udot, vdot])

    return FineSystem(2 * eta, rhs, "elastowave", {"bc": kind})


def averaging_weights(gal, eps):
    """psi with psi_i = integral of hat i over the window, divided by 2 eps."""
    length = gal.nodes[-1] - gal.nodes[0] if not gal.periodic \
        else gal.medium.length
    if abs(2.0 * eps - length) > 1e-9 * length:
        raise ValueError("averaging window must span the sub-domain")
    h = gal.medium.length / (gal.n_nodes if gal.periodic
                             else gal.n_nodes - 1)
    psi = np.full(gal.n_nodes, h / (2.0 * eps))
    if not gal.periodic:
        psi[0] *= 0.5
        psi[-1] *= 0.5
    return psi


def stress_weights(gal, eps):
    """s with sigma_bar = s . u: windowed average of E u_x on the hat mesh."""
    nodes = gal.nodes if not gal.periodic else np.append(
        gal.nodes, gal.medium.length)
    s = np.zeros(gal.n_nodes)
    for e in range(nodes.size - 1):
        xq, wq = gauss_rule_on(nodes[e], nodes[e + 1], 10)
        e_int = float(wq @ gal.medium.modulus(xq))
        h = nodes[e + 1] - nodes[e]
        coef = e_int / (2.0 * eps * h)
        s[e % gal.n_nodes] -= coef
        s[(e + 1) % gal.n_nodes] += coef
    return s


def averaged_stress(u, medium, x, eps):
    """Windowed average of E(y) u_y over [x - eps, x + eps].

    u holds nodal displacements on the uniform window mesh; the window
    must lie inside the medium."""
    u = np.asarray(u, dtype=float)
    if x - eps < -1e-12 or x + eps > medium.length + 1e-12:
        raise PlimError("averaging window clipped by the domain ends")
    nodes = np.linspace(x - eps, x + eps, u.size)
    total = 0.0
    for e in range(u.size - 1):
        xq, wq = gauss_rule_on(nodes[e], nodes[e + 1], 10)
        e_int = float(wq @ medium.modulus(xq))
        total += e_int * (u[e + 1] - u[e]) / (nodes[e + 1] - nodes[e])
    return total / (2.0 * eps)


# -- the lift-map equation for a sub-domain -----------------------------------

class ElastowaveGEq(GEquation):
    """2-eta component residual tying the lift's coarse derivative to the
    fine rates, plus consistency rows pinning the averages."""

    name = "elastowave"

    def __init__(self, psi, beta, bc):
        self.psi = np.asarray(psi, dtype=float)
        self.beta = np.asarray(beta, dtype=float)
        self.bc = bc
        self.eta = self.psi.size
        self.n_components = 2 * self.eta

    def rates(self, g):
        """Fine rates (udot, vdot) for batched lift values g (np, 2 eta)."""
        eta = self.eta
        u = g[:, :eta]
        v = g[:, eta:]
        udot = v.copy()
        vdot = u @ self.beta.T
        if self.bc.kind == "fixed":
            udot[:, 0] = udot[:, -1] = 0.0
            vdot[:, 0] = vdot[:, -1] = 0.0
        elif self.bc.kind == "accel":
            vdot[:, 0] = self.bc.a_left
            vdot[:, -1] = self.bc.a_right
        return udot, vdot

    def residual(self, c, g, grads):
        udot, vdot = self.rates(g)
        cdot_u = udot @ self.psi
        cdot_v = vdot @ self.psi
        rate = np.concatenate([udot, vdot], axis=1)
        return grads[:, :, 0] * cdot_u[:, None] \
            + grads[:, :, 1] * cdot_v[:, None] - rate

    def consistency(self, c, g):
        eta = self.eta
        return np.stack([g[:, :eta] @ self.psi - c[:, 0],
                         g[:, eta:] @ self.psi - c[:, 1]], axis=1)


@dataclass
class SubDomain:
    """One averaging window with its discretization and manifold store."""

    medium: Medium1D
    gal: GalerkinOps
    psi: np.ndarray
    eps: float
    stress_w: np.ndarray
    store: list = field(default_factory=list)  # (key, sheet) entries

    @property
    def eta(self):
        return self.gal.n_nodes

    def geq(self, bc=None):
        return ElastowaveGEq(self.psi, self.gal.beta, bc or self.gal.bc)

    def fine_system(self, bc=None):
        if bc is None:
            return make_fine_system(self.gal)
        g = GalerkinOps(self.gal.medium, self.gal.nodes, self.gal.mass,
                        self.gal.stiffness, self.gal.beta, bc,
                        self.gal.periodic)
        return make_fine_system(g)

    def projection(self):
        w = np.zeros((2, 2 * self.eta))
        w[0, :self.eta] = self.psi
        w[1, self.eta:] = self.psi
        return ProjectionMap(2 * self.eta, weights=w)

    def averages(self, f):
        return np.array([self.psi @ f[:self.eta], self.psi @ f[self.eta:]])


def make_subdomain(medium, nodes_per_wavelength, bc=None):
    gal = assemble_galerkin(medium, nodes_per_wavelength, bc)
    eps = 0.5 * medium.length
    return SubDomain(medium, gal, averaging_weights(gal, eps), eps,
                     stress_weights(gal, eps))


# -- slab-marched manifold solve ------------------------------------------------

@dataclass
class MarchConfig:
    """Block extent (relative to the anchor) and march resolution.

    Bounds are snapped so the anchor lands exactly on a mesh node; they
    need not be symmetric, so the block can hug the region the coarse
    trajectory actually visits."""

    half_width_u: float = 0.1
    half_width_v: float = 0.5
    lo_u: float = None          # default: -half_width_u
    hi_u: float = None
    lo_v: float = None
    hi_v: float = None
    n_u: int = 7
    n_v: int = 7
    n_sweeps: int = 1           # coefficient refreshes per slab (>= 1)
    implicit_time: bool = True  # residual rows on the new station only:
                                # damps spurious high-mode content the
                                # neutral in-slab quadrature lets ring
    consistency_weight: float = 1.0
    ridge: float = 1e-10

    def bounds_u(self):
        return (-self.half_width_u if self.lo_u is None else self.lo_u,
                self.half_width_u if self.hi_u is None else self.hi_u)

    def bounds_v(self):
        return (-self.half_width_v if self.lo_v is None else self.lo_v,
                self.half_width_v if self.hi_v is None else self.hi_v)


def _snap_axis(lo, hi, n):
    """Shift [lo, hi] minimally so 0 sits on a node of the n-node grid."""
    h = (hi - lo) / (n - 1)
    k = int(round(-lo / h))
    k = min(max(k, 0), n - 1)
    lo = -k * h
    return lo, lo + (n - 1) * h, k


def _seed_line(base, base_avg, targets):
    """Fine fields along the anchor station: amplitude scaling when the
    base average is nonzero, a uniform shift otherwise."""
    out = np.empty((targets.size, base.size))
    if abs(base_avg) > 1e-9 * (1.0 + np.max(np.abs(base))):
        for i, tv in enumerate(targets):
            out[i] = base * (tv / base_avg)
    else:
        for i, tv in enumerate(targets):
            out[i] = base + (tv - base_avg)
    return out


def solve_subdomain_manifold(sub, u_hat, v_hat, bc_accels=(0.0, 0.0),
                             march=None):
    """March the lift map over a coarse block anchored at one fine state.

    The coarse direction with the larger rate magnitude at the anchor is
    treated as time-like; the anchor station is seeded from the imposed
    initial condition (scaled or shifted to meet the station averages),
    and each slab solves the transverse least-squares problem with frozen
    advection coefficients, refreshed n_sweeps times. The stored objective
    is the full nonlinear block objective of the marched sheet."""
    march = march or MarchConfig()
    eta = sub.eta
    u_hat = np.asarray(u_hat, dtype=float)
    v_hat = np.asarray(v_hat, dtype=float)
    if u_hat.size != eta or v_hat.size != eta:
        raise ValueError("initial condition must give one value per node")
    bc = BCSpec("accel", *bc_accels)
    geq = sub.geq(bc)
    f_anchor = np.concatenate([u_hat, v_hat])
    ub0 = float(sub.psi @ u_hat)
    vb0 = float(sub.psi @ v_hat)

    lo_u, hi_u, ku = _snap_axis(*march.bounds_u(), march.n_u)
    lo_v, hi_v, kv = _snap_axis(*march.bounds_v(), march.n_v)
    block = Block((0, 0),
                  [[ub0 + lo_u, ub0 + hi_u], [vb0 + lo_v, vb0 + hi_v]],
                  (march.n_u, march.n_v))
    udot, vdot = geq.rates(f_anchor[None, :])
    rate0 = np.array([float(udot[0] @ sub.psi), float(vdot[0] @ sub.psi)])
    tdim = 0 if abs(rate0[0]) >= abs(rate0[1]) else 1
    sdim = 1 - tdim

    n_t = block.mesh[tdim]
    n_s = block.mesh[sdim]
    svals = block.axes[sdim]
    nodal = np.zeros((2 * eta, n_t, n_s))

    # anchor station: scale/shift the imposed fields to the station averages
    j0 = ku if tdim == 0 else kv
    if tdim == 0:
        u_line = _seed_line(u_hat, ub0, np.full(n_s, ub0))
        v_line = _seed_line(v_hat, vb0, svals)
    else:
        u_line = _seed_line(u_hat, ub0, svals)
        v_line = _seed_line(v_hat, vb0, np.full(n_s, vb0))
    nodal[:eta, j0, :] = u_line.T
    nodal[eta:, j0, :] = v_line.T

    for j in list(range(j0 + 1, n_t)) + list(range(j0 - 1, -1, -1)):
        j_prev = j - 1 if j > j0 else j + 1
        nodal[:, j, :] = _march_slab(sub, geq, block, tdim, nodal[:, j_prev, :],
                                     j_prev, j, march)

    if tdim == 1:
        nodal = nodal.transpose(0, 2, 1)
    nodal = nodal.reshape(2 * eta, *block.mesh)
    prob = LsfemProblem(block, geq, np.array([ub0, vb0]), f_anchor,
                        n_gauss=2,
                        consistency_weight=march.consistency_weight)
    obj = prob.objective(prob.dofs_from_nodal(nodal.reshape(2 * eta, -1)))
    return Sheet(-1, block, 2 * eta, nodal, np.array([ub0, vb0]), f_anchor,
                 objective_value=float(obj))


def _march_slab(sub, geq, block, tdim, known, j_known, j_new, march):
    """One station solve: linear least squares for the new line values.

    Rows: the lift-map residual at the slab Gauss points with advection
    coefficients frozen from the latest iterate, plus weighted consistency
    rows pinning the averages. Solved via the normal equations, whose
    Kronecker factor structure keeps assembly cheap."""
    eta = sub.eta
    psi = sub.psi
    sdim = 1 - tdim
    tvals, svals = block.axes[tdim], block.axes[sdim]
    h_t = abs(tvals[j_new] - tvals[j_known])
    h_s = block.h[sdim]
    n_s = svals.size
    gp, gw = gauss_rule(2)

    # quadrature points of the slab: (t, s) positions and interp factors
    t_lo = min(tvals[j_known], tvals[j_new])
    if march.implicit_time:
        tq = np.array([tvals[j_new]])
        tw = np.array([h_t])
        zeta = (tq - t_lo) / h_t
    else:
        tq, tw = gauss_rule_on(t_lo, t_lo + h_t, 2)
        zeta = (tq - t_lo) / h_t                 # local coord toward +t
    w_new_t = zeta if j_new > j_known else 1.0 - zeta
    d_new_t = (1.0 / h_t) if j_new > j_known else (-1.0 / h_t)

    rows_P_new, rows_P_old = [], []
    rows_Dt_new, rows_Dt_old = [], []
    rows_Ds_new, rows_Ds_old = [], []
    qw, qt, qs = [], [], []
    for es in range(n_s - 1):
        sq, sw = gauss_rule_on(svals[es], svals[es + 1], 2)
        for it in range(tq.size):
            for isq in range(2):
                s_loc = (sq[isq] - svals[es]) / h_s
                shape_s = np.zeros(n_s)
                dshape_s = np.zeros(n_s)
                shape_s[es], shape_s[es + 1] = 1.0 - s_loc, s_loc
                dshape_s[es], dshape_s[es + 1] = -1.0 / h_s, 1.0 / h_s
                wn = w_new_t[it]
                rows_P_new.append(wn * shape_s)
                rows_P_old.append((1.0 - wn) * shape_s)
                rows_Dt_new.append(d_new_t * shape_s)
                rows_Dt_old.append(-d_new_t * shape_s)
                rows_Ds_new.append(wn * dshape_s)
                rows_Ds_old.append((1.0 - wn) * dshape_s)
                qw.append(tw[it] * sw[isq])
                qt.append(tq[it])
                qs.append(sq[isq])
    P_new = np.array(rows_P_new)
    P_old = np.array(rows_P_old)
    Dt_new = np.array(rows_Dt_new)
    Dt_old = np.array(rows_Dt_old)
    Ds_new = np.array(rows_Ds_new)
    Ds_old = np.array(rows_Ds_old)
    qw = np.array(qw)
    nq = qw.size

    # coarse coordinates at the quadrature points, ordered (ubar, vbar)
    cpts = np.empty((nq, 2))
    cpts[:, tdim] = qt
    cpts[:, sdim] = qs

    # rate structure: rows k < eta take v_k, rows eta + i take beta_i . u
    S = np.zeros((2 * eta, 2 * eta))
    for k in range(eta):
        S[k, eta + k] = 1.0
    S[eta:, :eta] = geq.beta
    rconst = np.zeros(2 * eta)
    if geq.bc.kind == "fixed":
        S[0, :] = S[eta - 1, :] = 0.0
        S[eta, :] = S[2 * eta - 1, :] = 0.0
    elif geq.bc.kind == "accel":
        S[eta, :] = S[2 * eta - 1, :] = 0.0
        rconst[eta] = geq.bc.a_left
        rconst[2 * eta - 1] = geq.bc.a_right

    # consistency structure: psi-averages of the lift match the coarse point
    Psi = np.zeros((2, 2 * eta))
    Psi[0, :eta] = psi
    Psi[1, eta:] = psi
    c_targets = np.stack([cpts[:, 0], cpts[:, 1]], axis=1)

    guess = known.copy()
    new = known.copy()
    for _ in range(max(march.n_sweeps, 1)):
        # explicit coefficients from the current slab iterate
        g_q = P_old @ known.T + P_new @ guess.T      # (nq, 2 eta)
        udot, vdot = geq.rates(g_q)
        cdot = np.empty((nq, 2))
        cdot[:, 0] = udot @ psi
        cdot[:, 1] = vdot @ psi
        wg_new = cdot[:, tdim, None] * Dt_new + cdot[:, sdim, None] * Ds_new
        wg_old = cdot[:, tdim, None] * Dt_old + cdot[:, sdim, None] * Ds_old

        def wdot(a, b):
            return a.T @ (qw[:, None] * b)

        eye = np.eye(2 * eta)
        ata = (np.kron(eye, wdot(wg_new, wg_new))
               - np.kron(S.T, wdot(P_new, wg_new))
               - np.kron(S, wdot(wg_new, P_new))
               + np.kron(S.T @ S, wdot(P_new, P_new)))
        # residual of the known part: r0 = kron terms applied to known line
        r_known = (wg_old @ known.T) - (P_old @ known.T) @ S.T - rconst
        # A^T r for A = kron(I, Wg_new) - kron(S, P_new)
        atr = (wg_new.T @ (qw[:, None] * r_known)
               - P_new.T @ (qw[:, None] * (r_known @ S))).T.ravel()
        # consistency rows
        w_c = march.consistency_weight
        ata += w_c * np.kron(Psi.T @ Psi, wdot(P_new, P_new))
        r_c = (P_old @ known.T) @ Psi.T - c_targets
        atr += w_c * (P_new.T @ (qw[:, None] * (r_c @ Psi))).T.ravel()
        ata += march.ridge * np.trace(ata) / ata.shape[0] * np.eye(ata.shape[0])
        sol = np.linalg.solve(ata, -atr)
        new = sol.reshape(2 * eta, n_s)
        guess = new
    return new


def coarse_subdomain_rhs(sub, sheet, u_bar, v_bar, bc=None):
    """Closed coarse rate on a sub-domain sheet: psi-averages of the fine
    rates at the lift."""
    g = sheet_eval(sheet, np.array([u_bar, v_bar]), strict=False)
    geq = sub.geq(bc)
    udot, vdot = geq.rates(np.real(g)[None, :])
    return np.array([float(udot[0] @ sub.psi), float(vdot[0] @ sub.psi)])


def subdomain_atlas(sub, sheet):
    """Single-block atlas wrapping one sub-domain sheet so the generic
    coarse driver can evolve it."""
    atl = Atlas(sheet.block.bounds, sheet.block.bounds[:, 1]
                - sheet.block.bounds[:, 0], sheet.block.mesh,
                system="elastowave")
    sheet.id = -1
    atl.add_sheet(sheet)
    return atl


def subdomain_boundary_estimate(u_bar, v_bar, u_bar_x, v_bar_x, eps):
    """Linear end-value estimates from the averaged fields and slopes."""
    return (u_bar - u_bar_x * eps, v_bar - v_bar_x * eps,
            u_bar + u_bar_x * eps, v_bar + v_bar_x * eps)


def end_accelerations(v_o, v_l, v_o_prev, v_l_prev, dt):
    """Backward-difference end accelerations over one coarse step."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    return (v_o - v_o_prev) / dt, (v_l - v_l_prev) / dt


def _nearest_in_store(store, a_o, a_l, prev_fine):
    if not store:
        raise PlimError("empty manifold store")
    keys = np.array([entry[0] for entry in store])
    d = np.hypot(keys[:, 0] - a_o, keys[:, 1] - a_l)
    best = d.min()
    tied = [entry for entry, dd in zip(store, d) if dd <= best + 1e-12]
    if len(tied) > 1 and prev_fine is not None:
        tied.sort(key=lambda entry: float(np.linalg.norm(
            entry[1].anchor_data - prev_fine)))
    return tied[0][1]


def select_manifold_at_gauss(sub, fields, prev_fine, prev_v_ends, dt, eps):
    """Manifold for one Gauss point and coarse step.

    fields = (ubar, vbar, ubar_x, vbar_x) at the point. End velocities are
    estimated from the averaged fields and slopes; their backward
    difference against the cached previous estimates gives the
    acceleration key (zero on the first step, when no cache exists). The
    stored sheet with the nearest key wins, key ties deferring to the
    anchor fine state nearest the cached previous fine state. Returns
    (sheet, (v_o, v_l)) so the caller can roll the cache forward; no fine
    evolution happens here."""
    ub, vb, ubx, vbx = fields
    u_o, v_o, u_l, v_l = subdomain_boundary_estimate(ub, vb, ubx, vbx, eps)
    if prev_v_ends is None:
        a_o = a_l = 0.0
    else:
        a_o, a_l = end_accelerations(v_o, v_l, prev_v_ends[0],
                                     prev_v_ends[1], dt)
    return _nearest_in_store(sub.store, a_o, a_l, prev_fine), (v_o, v_l)


# -- coupled domain ---------------------------------------------------------------

def _quad_shapes(xi):
    """Quadratic shape functions and derivatives on [-1, 1]."""
    n = np.array([0.5 * xi * (xi - 1.0), 1.0 - xi * xi,
                  0.5 * xi * (xi + 1.0)])
    dn = np.array([xi - 0.5, -2.0 * xi, xi + 0.5])
    return n, dn


def add_manifold(sub, key, sheet):
    """Register a solved sheet under its (a_o, a_l) acceleration key."""
    sub.store.append((tuple(key), sheet))
    return sheet


@dataclass
class GaussSite:
    x: float
    element: int
    weight: float
    shape: np.ndarray       # quadratic shape values at the point
    dshape: np.ndarray      # d/dx values
    sub: SubDomain
    offset: float           # left end of the sub-domain tile
    fine_cache: np.ndarray = None
    v_ends_prev: tuple = None
    sheet: Sheet = None
    _v_ends_now: tuple = None


class CoupledDomain:
    """Coarse quadratic mesh whose Gauss points carry sub-domain manifolds."""

    def __init__(self, medium, n_sub, n_coarse_elems, nodes_per_wavelength,
                 bc_kind="fixed"):
        self.medium = medium
        self.n_sub = n_sub
        self.bc_kind = bc_kind
        L = medium.length
        self.tile = L / n_sub
        self.eps = 0.5 * self.tile
        self.n_elems = n_coarse_elems
        self.n_nodes = 2 * n_coarse_elems + 1
        self.nodes = np.linspace(0.0, L, self.n_nodes)
        h = L / n_coarse_elems
        # coarse mass matrix, 3-point Gauss (exact for quadratic products)
        M = np.zeros((self.n_nodes, self.n_nodes))
        gp3, gw3 = gauss_rule(3)
        for e in range(n_coarse_elems):
            idx = [2 * e, 2 * e + 1, 2 * e + 2]
            for xi, w in zip(gp3, gw3):
                n, _ = _quad_shapes(xi)
                M[np.ix_(idx, idx)] += medium.rho * w * (h / 2.0) \
                    * np.outer(n, n)
        self.mass = M
        self.mass_inv = np.linalg.inv(M)
        # one sub-domain per 2-point Gauss site (each site owns its store)
        gp2, gw2 = gauss_rule(2)
        self.sites = []
        for e in range(n_coarse_elems):
            for xi, w in zip(gp2, gw2):
                x = self.nodes[2 * e] + (xi + 1.0) / 2.0 * h
                k = min(int(x / self.tile), n_sub - 1)
                offset = k * self.tile
                sub = make_subdomain(medium.restrict(offset, self.tile),
                                     nodes_per_wavelength, BCSpec("accel"))
                n, dn = _quad_shapes(xi)
                self.sites.append(GaussSite(
                    x, e, w * h / 2.0, n, dn * 2.0 / h, sub, offset))
        self.ops = {"fine_rhs_flops": 0, "coarse_rhs_flops": 0,
                    "fine_steps": 0, "coarse_steps": 0}

    def coarse_ic(self, u_fn, v_fn):
        """Window-averaged initial fields at the coarse nodes (end nodes
        take the boundary values; interior windows never clip)."""
        ub = np.empty(self.n_nodes)
        vb = np.empty(self.n_nodes)
        for i, x in enumerate(self.nodes):
            if x - self.eps < 0.0 or x + self.eps > self.medium.length:
                ub[i] = u_fn(np.array([x]))[0]
                vb[i] = v_fn(np.array([x]))[0]
                continue
            xq, wq = gauss_rule_on(x - self.eps, x + self.eps, 20)
            ub[i] = float(wq @ u_fn(xq)) / (2.0 * self.eps)
            vb[i] = float(wq @ v_fn(xq)) / (2.0 * self.eps)
        return ub, vb

    def fields_at_site(self, site, ub, vb):
        idx = [2 * site.element, 2 * site.element + 1, 2 * site.element + 2]
        u = float(site.shape @ ub[idx])
        v = float(site.shape @ vb[idx])
        ux = float(site.dshape @ ub[idx])
        vx = float(site.dshape @ vb[idx])
        return u, v, ux, vx

    def init_caches(self, u_fn, v_fn):
        """Seed each site's fine-state cache from the fine initial fields."""
        for site in self.sites:
            local = site.sub.gal.nodes + site.offset
            site.fine_cache = np.concatenate([u_fn(local), v_fn(local)])
            site.v_ends_prev = (v_fn(np.array([site.offset]))[0],
                                v_fn(np.array([site.offset + self.tile]))[0])
            site.sheet = None

    def select_sheets(self, ub, vb, dt):
        """Step 1 of the coarse step: per-site manifold selection from the
        boundary-acceleration estimates (zero on the first step)."""
        for site in self.sites:
            fields = self.fields_at_site(site, ub, vb)
            site.sheet, site._v_ends_now = select_manifold_at_gauss(
                site.sub, fields, site.fine_cache, site.v_ends_prev, dt,
                self.eps)

    def _alpha(self, ub, vb):
        """Accelerations of the coarse nodes from the lifted stresses."""
        F = np.zeros(self.n_nodes)
        for site in self.sites:
            u, v, _, _ = self.fields_at_site(site, ub, vb)
            g = sheet_eval(site.sheet, np.array([u, v]), strict=False)
            eta = site.sub.eta
            sigma = float(site.sub.stress_w @ np.real(g[:eta]))
            idx = [2 * site.element, 2 * site.element + 1,
                   2 * site.element + 2]
            F[idx] -= site.weight * sigma * site.dshape
            self.ops["coarse_rhs_flops"] += 8 * eta + eta + 10
        alpha = self.mass_inv @ F
        self.ops["coarse_rhs_flops"] += 2 * self.n_nodes ** 2
        return alpha

    def coupled_coarse_step(self, ub, vb, dt):
        """One explicit RK4 step of the averaged momentum balance with the
        per-site sheets held fixed across the stages."""
        self.select_sheets(ub, vb, dt)

        def rate(state):
            u_, v_ = state[:self.n_nodes], state[self.n_nodes:]
            a = self._alpha(u_, v_)
            du = v_.copy()
            dv = a
            if self.bc_kind == "fixed":
                du[0] = du[-1] = 0.0
                dv[0] = dv[-1] = 0.0
            return np.concatenate([du, dv])

        from .numerics import rk4_step
        out = rk4_step(rate, np.concatenate([ub, vb]), dt)
        ub2, vb2 = out[:self.n_nodes], out[self.n_nodes:]
        for site in self.sites:
            u, v, _, _ = self.fields_at_site(site, ub2, vb2)
            g = np.real(sheet_eval(site.sheet, np.array([u, v]),
                                   strict=False))
            site.fine_cache = g.copy()
            site.v_ends_prev = site._v_ends_now
        self.ops["coarse_steps"] += 1
        return ub2, vb2

    def run(self, u_fn, v_fn, dt, n_steps):
        ub, vb = self.coarse_ic(u_fn, v_fn)
        self.init_caches(u_fn, v_fn)
        hist_t = [0.0]
        hist_u = [ub.copy()]
        hist_v = [vb.copy()]
        for k in range(n_steps):
            ub, vb = self.coupled_coarse_step(ub, vb, dt)
            hist_t.append((k + 1) * dt)
            hist_u.append(ub.copy())
            hist_v.append(vb.copy())
        return (np.array(hist_t), np.array(hist_u), np.array(hist_v))


def fine_reference(medium, nodes_per_wavelength, bc, u_fn, v_fn, dt, n_steps,
                   counters=None):
    """RK4 reference of the full fine system; counts rhs flops when asked."""
    gal = assemble_galerkin(medium, nodes_per_wavelength, bc)
    sysf = make_fine_system(gal)
    eta = gal.n_nodes
    f = np.concatenate([u_fn(gal.nodes), v_fn(gal.nodes)])
    if bc.kind == "fixed":
        f[eta] = f[2 * eta - 1] = 0.0
    from .numerics import rk4_step
    hist = [f.copy()]
    for _ in range(n_steps):
        f = rk4_step(sysf.rhs, f, dt)
        hist.append(f.copy())
        if counters is not None:
            counters["fine_rhs_flops"] += 4 * (2 * eta * eta + eta)
            counters["fine_steps"] += 1
    return gal, np.array(hist)


def _hat_window_integral(center, h, lo, hi):
    """Exact integral of the unit hat at `center` over [lo, hi]."""

    def ramp_int(a, b, x0, x1, sign):
        # integral of (1 +- (y - center)/h) over the clip of [a, b]
        a, b = max(a, x0), min(b, x1)
        if b <= a:
            return 0.0
        mid = 0.5 * (a + b)
        return (b - a) * (1.0 + sign * (mid - center) / h)

    return ramp_int(center - h, center, lo, hi, +1.0) \
        + ramp_int(center, center + h, lo, hi, -1.0)


def window_average_series(gal, history, centers, eps):
    """psi-window averages of a fine history at given window centers."""
    nodes = gal.nodes
    h = nodes[1] - nodes[0]
    out_u = np.empty((history.shape[0], len(centers)))
    out_v = np.empty_like(out_u)
    eta = gal.n_nodes
    for j, x in enumerate(centers):
        lo, hi = x - eps, x + eps
        w = np.array([_hat_window_integral(c, h, lo, hi) for c in nodes])
        w = w / (2.0 * eps)
        out_u[:, j] = history[:, :eta] @ w
        out_v[:, j] = history[:, eta:] @ w
    return out_u, out_v


def stable_dt(beta, safety=0.5):
    """RK4-stable step bound for udot = v, vdot = beta u."""
    lam = np.linalg.eigvals(beta)
    omega = np.sqrt(np.max(np.abs(lam)))
    return safety * 2.8 / omega
