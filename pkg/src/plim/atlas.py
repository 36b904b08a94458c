"""Block-partitioned sheet collections: storage, interpolation, selection,
interblock transfer, and a versioned binary persistence format.

A sheet is one finite-element representation of a coarse-to-fine lift over
one block: multilinear nodal interpolation on a tensor-product grid, an
anchor datum the solve imposed at a single point, and a per-node prune
mask marking regions where no real-valued lift exists.
"""

import hashlib
import itertools
import json
import struct
from dataclasses import dataclass

import numpy as np

from .errors import (AtlasFormatError, NoCandidateSheetError,
                     OutOfDomainError, PrunedRegionError)
from .numerics import rk4_step

_EDGE_TOL = 1e-9  # relative slack when deciding block membership


class Block:
    """Axis-aligned cell of the coarse partition with its element grid."""

    def __init__(self, block_id, bounds, mesh):
        self.id = tuple(int(i) for i in np.atleast_1d(block_id))
        self.bounds = np.asarray(bounds, dtype=float).reshape(-1, 2)
        self.mesh = tuple(int(n) for n in np.atleast_1d(mesh))
        if len(self.mesh) != self.bounds.shape[0]:
            raise ValueError("mesh and bounds dimension mismatch")
        if any(n < 2 for n in self.mesh):
            raise ValueError("need at least 2 nodes per side")
        if np.any(self.bounds[:, 1] <= self.bounds[:, 0]):
            raise ValueError("degenerate block bounds")
        self.axes = tuple(np.linspace(lo, hi, n)
                          for (lo, hi), n in zip(self.bounds, self.mesh))
        self.h = np.array([ax[1] - ax[0] for ax in self.axes])
        self.ndim = self.bounds.shape[0]
        self.n_nodes = int(np.prod(self.mesh))

    @property
    def area(self):
        return float(np.prod(self.bounds[:, 1] - self.bounds[:, 0]))

    def contains(self, c, tol=None):
        c = np.atleast_1d(np.asarray(c, dtype=float))
        slack = (self.bounds[:, 1] - self.bounds[:, 0]) * (
            _EDGE_TOL if tol is None else tol)
        return bool(np.all(c >= self.bounds[:, 0] - slack)
                    and np.all(c <= self.bounds[:, 1] + slack))

    def locate(self, c):
        """Containing element (per-dim index, clamped) and local coords."""
        c = np.atleast_1d(np.asarray(c, dtype=float))
        e = np.empty(self.ndim, dtype=int)
        xi = np.empty(self.ndim)
        for d in range(self.ndim):
            raw = int(np.floor((c[d] - self.bounds[d, 0]) / self.h[d]))
            e[d] = min(max(raw, 0), self.mesh[d] - 2)
            xi[d] = (c[d] - self.axes[d][e[d]]) / self.h[d]
        return e, xi

    def node_points(self):
        """All node coordinates as an (n_nodes, ndim) array (C order)."""
        grids = np.meshgrid(*self.axes, indexing="ij")
        return np.stack([g.ravel() for g in grids], axis=-1)


@dataclass
class Sheet:
    """One lift map over one block, in nodal form."""

    id: int
    block: Block
    n_components: int
    nodal: np.ndarray                 # (n_components, *mesh)
    anchor_coarse: np.ndarray
    anchor_data: np.ndarray           # (n_components,)
    prune_mask: np.ndarray = None     # (*mesh,) bool, True = excluded
    objective_value: float = 0.0
    degenerate: bool = False

    def __post_init__(self):
        self.nodal = np.asarray(self.nodal)
        if self.nodal.shape != (self.n_components, *self.block.mesh):
            raise ValueError("nodal array shape does not match block mesh")
        if self.prune_mask is None:
            self.prune_mask = np.zeros(self.block.mesh, dtype=bool)
        self.anchor_coarse = np.atleast_1d(
            np.asarray(self.anchor_coarse, dtype=float))
        self.anchor_data = np.atleast_1d(np.asarray(self.anchor_data))

    @property
    def block_id(self):
        return self.block.id


def _corner_weights(xi, grad_dim=None, h=None):
    """Multilinear shape weights over the 2^d element corners.

    With grad_dim set, returns the weights of the interpolant derivative
    in that direction instead (the hat factor replaced by +-1/h)."""
    d = xi.size
    out = []
    for corner in itertools.product((0, 1), repeat=d):
        w = 1.0
        for k, bit in enumerate(corner):
            if grad_dim is not None and k == grad_dim:
                w *= (1.0 / h[k]) if bit else (-1.0 / h[k])
            else:
                w *= xi[k] if bit else (1.0 - xi[k])
        out.append((corner, w))
    return out


def _element_pruned(sheet, e):
    d = sheet.block.ndim
    for corner in itertools.product((0, 1), repeat=d):
        idx = tuple(e[k] + corner[k] for k in range(d))
        if sheet.prune_mask[idx]:
            return True
    return False


def sheet_eval(sheet, c, strict=True):
    """Interpolated eliminated-coordinate values at the coarse point c.

    strict evaluation refuses points outside the block or inside a pruned
    element; strict=False extrapolates the edge element and ignores the
    mask (used by integration stages probing past a boundary)."""
    block = sheet.block
    if strict and not block.contains(c):
        raise OutOfDomainError(f"point {c} outside block {block.id}")
    e, xi = block.locate(c)
    if strict and _element_pruned(sheet, e):
        raise PrunedRegionError(f"sheet {sheet.id} pruned near {c}")
    vals = np.zeros(sheet.n_components, dtype=sheet.nodal.dtype)
    for corner, w in _corner_weights(xi):
        idx = tuple(e[k] + corner[k] for k in range(block.ndim))
        vals += w * sheet.nodal[(slice(None),) + idx]
    return vals


def sheet_grad(sheet, c, strict=True):
    """Gradient of the interpolant w.r.t. the coarse coordinates.

    Piecewise constant per direction within each element; shape
    (n_components, ndim)."""
    block = sheet.block
    if strict and not block.contains(c):
        raise OutOfDomainError(f"point {c} outside block {block.id}")
    e, xi = block.locate(c)
    if strict and _element_pruned(sheet, e):
        raise PrunedRegionError(f"sheet {sheet.id} pruned near {c}")
    out = np.zeros((sheet.n_components, block.ndim), dtype=sheet.nodal.dtype)
    for d in range(block.ndim):
        for corner, w in _corner_weights(xi, grad_dim=d, h=block.h):
            idx = tuple(e[k] + corner[k] for k in range(block.ndim))
            out[:, d] += w * sheet.nodal[(slice(None),) + idx]
    return out


def selectable_at(sheet, c):
    """True when the sheet can serve the point: not degenerate, in block,
    containing element fully unpruned."""
    if sheet.degenerate or not sheet.block.contains(c):
        return False
    e, _ = sheet.block.locate(c)
    return not _element_pruned(sheet, e)


class Atlas:
    """Sheets indexed by block over a tiled coarse domain."""

    def __init__(self, domain, block_size, mesh, system="", projection=None,
                 params=None):
        self.domain = np.asarray(domain, dtype=float).reshape(-1, 2)
        self.block_size = np.atleast_1d(np.asarray(block_size, dtype=float))
        self.mesh = tuple(int(n) for n in np.atleast_1d(mesh))
        extent = self.domain[:, 1] - self.domain[:, 0]
        counts = extent / self.block_size
        self.n_blocks = np.rint(counts).astype(int)
        if not np.allclose(counts, self.n_blocks, atol=1e-9) or np.any(
                self.n_blocks < 1):
            raise ValueError("block size must tile the domain exactly")
        self.system = system
        self.projection = projection  # descriptor dict
        self.params = dict(params or {})
        self.blocks = {}
        for idx in itertools.product(*(range(n) for n in self.n_blocks)):
            lo = self.domain[:, 0] + np.array(idx) * self.block_size
            bounds = np.stack([lo, lo + self.block_size], axis=1)
            self.blocks[idx] = Block(idx, bounds, self.mesh)
        self.sheets = {}
        self.by_block = {idx: [] for idx in self.blocks}
        self._next_id = 0

    @property
    def ndim(self):
        return self.domain.shape[0]

    def block_of(self, c):
        """Containing block; shared faces resolve to the larger lattice
        coordinate, the closed upper domain face to the last block."""
        c = np.atleast_1d(np.asarray(c, dtype=float))
        extent = self.domain[:, 1] - self.domain[:, 0]
        if np.any(c < self.domain[:, 0] - _EDGE_TOL * extent) or np.any(
                c > self.domain[:, 1] + _EDGE_TOL * extent):
            raise OutOfDomainError(f"coarse point {c} outside atlas domain")
        idx = np.floor((c - self.domain[:, 0]) / self.block_size).astype(int)
        idx = np.minimum(np.maximum(idx, 0), self.n_blocks - 1)
        return self.blocks[tuple(idx)]

    def add_sheet(self, sheet):
        if sheet.id is None or sheet.id < 0:
            sheet.id = self._next_id
        self._next_id = max(self._next_id, sheet.id) + 1
        if sheet.block.id not in self.blocks:
            raise ValueError(f"sheet block {sheet.block.id} not in atlas")
        self.sheets[sheet.id] = sheet
        self.by_block[sheet.block.id].append(sheet.id)
        return sheet

    def block_sheets(self, block):
        return [self.sheets[i] for i in self.by_block[block.id]]

    def n_sheets(self):
        return len(self.sheets)


def select_sheet(atl, block, f, proj, sys=None, vfield_hint=None,
                 tie_tol=1e-9):
    """Sheet of the block nearest the fine datum, plus that distance.

    Distance is Euclidean between the sheet evaluation at the projected
    point and the eliminated coordinates of f. Near-ties defer to the
    sheet whose coarse rate best aligns with the projected fine field
    hint; remaining ties go to the lower sheet id."""
    c = proj.apply(np.asarray(f, dtype=float))
    target = proj.eliminated_values(np.asarray(f, dtype=float))
    cands = [s for s in atl.block_sheets(block) if selectable_at(s, c)]
    if not cands:
        raise NoCandidateSheetError(
            f"no selectable sheet in block {block.id}")
    dists = np.array([float(np.linalg.norm(
        np.real(sheet_eval(s, c)) - target)) for s in cands])
    best = dists.min()
    tied = [s for s, d in zip(cands, dists) if d <= best + tie_tol]
    if len(tied) > 1 and vfield_hint is not None and sys is not None:
        ch = proj.rate(np.asarray(vfield_hint, dtype=float))
        scores = []
        for s in tied:
            g = np.real(sheet_eval(s, c))
            rate = proj.rate(sys.rhs(proj.embed(c, g)))
            scores.append(float(np.dot(rate, ch)))
        top = max(scores)
        tied = [s for s, sc in zip(tied, scores) if sc >= top - 1e-15]
    chosen = min(tied, key=lambda s: s.id)
    dist = float(dists[cands.index(chosen)])
    return chosen, dist


def ensure_sheet(atl, block, f, proj, solve_settings, threshold=0.5,
                 sys=None, vfield_hint=None, tie_tol=1e-9):
    """Existing sheet when one is close enough, else a supplemental solve
    anchored at the datum, inserted into the atlas."""
    try:
        sheet, dist = select_sheet(atl, block, f, proj, sys=sys,
                                   vfield_hint=vfield_hint, tie_tol=tie_tol)
        if dist <= threshold:
            return sheet
    except NoCandidateSheetError:
        pass
    from .gsolve import LsfemProblem, solve_sheet  # lazy: gsolve imports atlas
    if solve_settings is None:
        raise NoCandidateSheetError(
            f"no sheet within {threshold} in block {block.id} and "
            "on-demand solving is disabled")
    c = proj.apply(np.asarray(f, dtype=float))
    data = proj.eliminated_values(np.asarray(f, dtype=float))
    problem = LsfemProblem(block, solve_settings.geq, c, data,
                           mode=solve_settings.mode,
                           n_gauss=solve_settings.n_gauss,
                           w_anchor=solve_settings.w_anchor,
                           consistency_weight=solve_settings.consistency_weight)
    sheet = solve_sheet(problem, solve_settings)
    return atl.add_sheet(sheet)


def interblock_transfer(atl, sys, proj, state, dt_micro, tie_tol=1e-9,
                        supplement=False, solve_settings=None,
                        supplement_threshold=0.5, sing_tol=1e-8,
                        sing_eps=1e-4, sing_max_retries=5):
    """Move to a neighboring sheet through the fine generator.

    Lifts through the current sheet, resolves singular states by field
    perturbations, advances the fine system one micro step, and selects
    (or solves) a sheet for the delivered state. Returns the new
    EvolutionState."""
    from .core import (EvolutionState, detect_singularity,
                       resolve_singularity)
    sheet = atl.sheets[state.sheet_id]
    f = state.lift if state.lift is not None else proj.embed(
        state.coarse, sheet_eval(sheet, state.coarse, strict=False))
    f = np.asarray(f, dtype=float)
    if detect_singularity(sys, proj, f, sing_tol):
        f = resolve_singularity(sys, proj, f, sing_tol, sing_eps,
                                sing_max_retries)
    f_new = rk4_step(sys.rhs, f, dt_micro)
    c_new = proj.apply(f_new)
    block_new = atl.block_of(c_new)
    hint = sys.rhs(f_new)
    if supplement:
        new_sheet = ensure_sheet(atl, block_new, f_new, proj, solve_settings,
                                 threshold=supplement_threshold, sys=sys,
                                 vfield_hint=hint, tie_tol=tie_tol)
    else:
        new_sheet, _ = select_sheet(atl, block_new, f_new, proj, sys=sys,
                                    vfield_hint=hint, tie_tol=tie_tol)
    lift = proj.embed(c_new, np.real(sheet_eval(new_sheet, c_new,
                                                strict=False)))
    return EvolutionState(c_new, new_sheet.id, state.t + dt_micro, lift)


# ---------------------------------------------------------------------------
# persistence: magic | version | header length | header JSON | payload | sha256

_MAGIC = b"PLIM"
_VERSION = 1


def save_atlas(atl, path):
    """Write the atlas to a versioned, checksummed binary container."""
    sheets_meta = []
    payload = bytearray()
    for sid in sorted(atl.sheets):
        s = atl.sheets[sid]
        arr = np.ascontiguousarray(s.nodal)
        if np.iscomplexobj(arr):
            arr = arr.astype("<c16")
            dtype = "c16"
        else:
            arr = arr.astype("<f8")
            dtype = "f8"
        mask = np.ascontiguousarray(s.prune_mask.astype("u1"))
        off = len(payload)
        payload.extend(arr.tobytes())
        moff = len(payload)
        payload.extend(mask.tobytes())
        sheets_meta.append({
            "id": int(s.id), "block": list(s.block.id),
            "n_components": int(s.n_components), "dtype": dtype,
            "anchor_coarse": s.anchor_coarse.tolist(),
            "anchor_data": np.real(s.anchor_data).tolist(),
            "objective_value": float(s.objective_value),
            "degenerate": bool(s.degenerate),
            "offset": off, "mask_offset": moff,
        })
    header = json.dumps({
        "domain": atl.domain.tolist(),
        "block_size": atl.block_size.tolist(),
        "mesh": list(atl.mesh),
        "system": atl.system,
        "projection": atl.projection,
        "params": atl.params,
        "sheets": sheets_meta,
    }).encode()
    body = struct.pack("<I", _VERSION) + struct.pack("<Q", len(header)) \
        + header + bytes(payload)
    digest = hashlib.sha256(body).digest()
    with open(path, "wb") as fh:
        fh.write(_MAGIC + body + digest)


def load_atlas(path):
    """Read an atlas container; verifies magic, version, and checksum."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != _MAGIC:
        raise AtlasFormatError("not an atlas file (bad magic bytes)")
    body, digest = raw[4:-32], raw[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise AtlasFormatError("atlas file corrupt (checksum mismatch)")
    version = struct.unpack("<I", body[:4])[0]
    if version != _VERSION:
        raise AtlasFormatError(f"unsupported atlas version {version}")
    hlen = struct.unpack("<Q", body[4:12])[0]
    header = json.loads(body[12:12 + hlen].decode())
    payload = body[12 + hlen:]
    atl = Atlas(np.asarray(header["domain"]),
                np.asarray(header["block_size"]),
                tuple(header["mesh"]), system=header["system"],
                projection=header["projection"], params=header["params"])
    mesh = atl.mesh
    n_nodes = int(np.prod(mesh))
    for meta in header["sheets"]:
        block = atl.blocks[tuple(meta["block"])]
        ncomp = meta["n_components"]
        dtype = "<c16" if meta["dtype"] == "c16" else "<f8"
        nbytes = ncomp * n_nodes * (16 if meta["dtype"] == "c16" else 8)
        nodal = np.frombuffer(
            payload[meta["offset"]:meta["offset"] + nbytes],
            dtype=dtype).reshape((ncomp, *mesh)).copy()
        mask = np.frombuffer(
            payload[meta["mask_offset"]:meta["mask_offset"] + n_nodes],
            dtype="u1").reshape(mesh).astype(bool)
        sheet = Sheet(meta["id"], block, ncomp, nodal,
                      np.asarray(meta["anchor_coarse"]),
                      np.asarray(meta["anchor_data"]),
                      prune_mask=mask,
                      objective_value=meta["objective_value"],
                      degenerate=meta["degenerate"])
        atl.add_sheet(sheet)
    return atl


def export_text(atl, path):
    """Human-readable JSON dump for inspection only (lossy for round trips)."""
    doc = {
        "domain": atl.domain.tolist(),
        "block_size": atl.block_size.tolist(),
        "mesh": list(atl.mesh),
        "system": atl.system,
        "n_sheets": atl.n_sheets(),
        "sheets": [{
            "id": int(s.id), "block": list(s.block.id),
            "anchor_coarse": s.anchor_coarse.tolist(),
            "anchor_data": np.real(s.anchor_data).tolist(),
            "objective_value": float(s.objective_value),
            "degenerate": bool(s.degenerate),
            "pruned_nodes": int(s.prune_mask.sum()),
            "nodal_real": np.real(s.nodal).tolist(),
        } for s in atl.sheets.values()],
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1)


def atlases_equal(a, b):
    """Field-for-field equality with bit-exact nodal values."""
    if (not np.array_equal(a.domain, b.domain)
            or not np.array_equal(a.block_size, b.block_size)
            or a.mesh != b.mesh or a.system != b.system
            or sorted(a.sheets) != sorted(b.sheets)):
        return False
    for sid, sa in a.sheets.items():
        sb = b.sheets[sid]
        if (sa.block.id != sb.block.id
                or sa.n_components != sb.n_components
                or not np.array_equal(sa.nodal, sb.nodal)
                or not np.array_equal(sa.prune_mask, sb.prune_mask)
                or not np.array_equal(sa.anchor_coarse, sb.anchor_coarse)
                or not np.array_equal(np.real(sa.anchor_data),
                                      np.real(sb.anchor_data))
                or sa.objective_value != sb.objective_value
                or sa.degenerate != sb.degenerate):
            return False
    return True
