"""Discrete problem assembly tables.

Builds the per-subdomain spline spaces, global dof numbering, density-cell
layout and all geometry-dependent tables the assembly needs per optimization
iteration: unit-density cell stiffness matrices, Nitsche trace tables at
boundary/interface quadrature points, ghost-penalty face tables and load
tables.  Everything here is computed once; only the density changes between
iterations.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import geometry as geo
from .model import DensityModel, LoadSpec, MaterialParams
from .spline import SplineSpace, DensitySpace, uniform_bspline_1d


@dataclass
class SubdomainDiscretization:
    sub_id: int
    space: SplineSpace
    density: DensitySpace          # k-refined cells (design: clipped; regions: fitted)
    h_param: float                 # mesh parameter used in the Nitsche weights
    dof_offset: int = 0            # global scalar dof offset
    cell_offset: int = 0           # offset into the concatenated cell vector


@dataclass
class SparsityPattern:
    """Precomputed COO -> CSR slot mapping for repeated assembly."""

    n: int
    indptr: np.ndarray
    indices: np.ndarray
    slots: np.ndarray  # per raw COO entry, position in the CSR data array

    @classmethod
    def from_coo(cls, rows, cols, n):
        order = np.lexsort((cols, rows))
        r, c = rows[order], cols[order]
        new = np.empty(r.size, dtype=bool)
        new[0] = True
        new[1:] = (r[1:] != r[:-1]) | (c[1:] != c[:-1])
        uid = np.cumsum(new) - 1
        slots = np.empty(r.size, dtype=np.int64)
        slots[order] = uid
        ur, uc = r[new], c[new]
        indptr = np.zeros(n + 1, dtype=np.int64)
        np.add.at(indptr, ur + 1, 1)
        indptr = np.cumsum(indptr)
        return cls(n, indptr, uc.astype(np.int32), slots)

    def matrix(self, values):
        data = np.bincount(self.slots, weights=values, minlength=self.indices.size)
        return sp.csr_matrix((data, self.indices, self.indptr), shape=(self.n, self.n))


def _vector_dofs(scalar_dofs):
    """Interleave scalar dof indices into vector dof indices, (n, 2 m)."""
    n, m = scalar_dofs.shape
    out = np.empty((n, 2 * m), dtype=np.int64)
    out[:, 0::2] = 2 * scalar_dofs
    out[:, 1::2] = 2 * scalar_dofs + 1
    return out


def _strain_tables(grads, weights):
    """Per-point unit-material stiffness integrands.

    grads is (n, m, 2); returns (kmu, klam) with shape (n, 2m, 2m) where
    kmu integrates 2 eps:eps at mu = 1 and klam tr(eps) tr(eps) at lambda = 1,
    both scaled by the quadrature weights.
    """
    n, m, _ = grads.shape
    B = np.zeros((n, 3, 2 * m))
    B[:, 0, 0::2] = grads[:, :, 0]
    B[:, 1, 1::2] = grads[:, :, 1]
    B[:, 2, 0::2] = grads[:, :, 1]
    B[:, 2, 1::2] = grads[:, :, 0]
    D = np.diag([2.0, 2.0, 1.0])
    kmu = np.einsum("nri,rs,nsj->nij", B, D, B) * weights[:, None, None]
    tvec = B[:, 0, :] + B[:, 1, :]
    klam = np.einsum("ni,nj->nij", tvec, tvec) * weights[:, None, None]
    return kmu, klam


@dataclass
class BulkTables:
    """Unit-density stiffness and load tables per density cell."""

    cell_dofs: np.ndarray       # (ncells, 2 m) global vector dofs of the parent element
    kmu: np.ndarray             # (ncells, 2m, 2m)
    klam: np.ndarray
    mat_mu: np.ndarray          # (ncells,) mu_hat per cell
    mat_lam: np.ndarray
    load: np.ndarray | None     # (ncells, 2m) unit-chi body-force vector


@dataclass
class TraceTables:
    """Per-point Nitsche data for one family (one- or two-sided)."""

    n_points: int
    w: np.ndarray
    normal: np.ndarray
    # side arrays come in pairs (i, j); one-sided families have no j entries
    vals: list          # [ (n, m) basis values ]
    grads: list         # [ (n, m, 2) physical gradients ]
    dofs: list          # [ (n, 2m) global vector dofs ]
    cells: list         # [ (n,) global cell index ]
    mu_hat: list        # [ (n,) ]
    lam_hat: list
    h: list             # [ (n,) mesh parameter ]

    @property
    def two_sided(self):
        return len(self.vals) == 2


@dataclass
class GhostTables:
    dofs: np.ndarray            # (nfaces, 2 * ndof12) global vector dofs
    face_matrices: np.ndarray   # (nfaces, ndof12, ndof12) summed over derivative orders


@dataclass
class NeumannTables:
    w: np.ndarray
    vals: np.ndarray
    dofs: np.ndarray
    cells: np.ndarray
    traction: np.ndarray  # (n, 2) unscaled traction values


@dataclass
class DiscreteProblem:
    """Everything needed to assemble and differentiate the discrete system."""

    dg: geo.DiscretizedGeometry
    subs: dict
    materials: dict
    loads: LoadSpec
    density_model: DensityModel
    beta: float
    ghost_scale: float
    degree: int
    plane: str = "strain"
    n_scalar_dofs: int = 0
    n_cells: int = 0
    n_design_cells: int = 0
    bulk: BulkTables = None
    dirichlet: TraceTables = None
    interface: TraceTables = None
    neumann: NeumannTables = None
    ghost: GhostTables = None
    pattern: SparsityPattern = None
    segments: dict = field(default_factory=dict)  # name -> slice into raw value array
    revision: int = 0

    @property
    def n_dofs(self):
        return 2 * self.n_scalar_dofs

    def chi_full(self, rho_design):
        """Concatenated chi over all cells: SIMP on design, 1 elsewhere."""
        from .model import chi_from_rho

        chi = np.ones(self.n_cells)
        chi[: self.n_design_cells] = chi_from_rho(rho_design, self.density_model)
        return chi

    def cell_volumes(self):
        return np.concatenate([self.subs[i].density.volumes for i in sorted(self.subs)])

    def cell_centroids(self):
        return np.vstack([self.subs[i].density.centroids for i in sorted(self.subs)])


def build_problem(geometry: geo.Geometry2D, h: float, *, angle: float = 0.0, level: int = 1,
                  degree: int = 2, materials=None, loads: LoadSpec = None,
                  density_model: DensityModel = None, beta: float = None,
                  ghost_scale: float = 1e-4, plane: str = "strain",
                  quad_order: int = None, curve_order: int = None,
                  tol: float = 1e-12, chord: float = None) -> DiscreteProblem:
    """Discretize a geometry and precompute all assembly tables."""
    from .model import lame_from_engineering, plane_stress_lambda

    p = degree
    if beta is None:
        beta = 10.0 * p * p
    if quad_order is None:
        quad_order = 4 * p - 2
    if curve_order is None:
        curve_order = 4 * p
    if materials is None:
        materials = {}
    default_mat = materials.get("default", lame_from_engineering(1.0, 0.3))
    if loads is None:
        loads = LoadSpec()
    if density_model is None:
        density_model = DensityModel()
    dg = geo.discretize(geometry, h, angle=angle, level=level,
                        quad_order=quad_order, curve_order=curve_order, tol=tol, chord=chord)

    mats = {}
    for sid in geometry.subdomain_ids:
        m = materials.get(sid, default_mat)
        if plane == "stress":
            m = MaterialParams(m.E, m.nu, m.mu_hat, plane_stress_lambda(m.mu_hat, m.lambda_hat))
        elif plane != "strain":
            raise ValueError(f"plane must be 'strain' or 'stress', got {plane!r}")
        mats[sid] = m

    known_tags = geometry.neumann_tags()
    for tag in loads.neumann_tractions:
        if tag not in known_tags:
            raise ValueError(f"traction references unknown boundary tag {tag!r}")
    for sid in loads.body_force:
        if sid not in geometry.subdomain_ids:
            raise ValueError(f"body force references unknown subdomain {sid}")

    dp = DiscreteProblem(dg=dg, subs={}, materials=mats, loads=loads,
                         density_model=density_model, beta=beta,
                         ghost_scale=ghost_scale, degree=p, plane=plane)

    # spaces and global numbering; subdomains ordered by id
    scalar_offset = 0
    cell_offset = 0
    for sid in geometry.subdomain_ids:
        if sid == 0:
            mesh = dg.design_fe_mesh
            active = dg.design_active_elements
            space = SplineSpace(mesh, p, None, active)
            kmesh = dg.design_k_mesh
            cells = dg.design_active_cells
            vols = dg.design_cell_areas[cells]
            cents = kmesh.element_centers(cells)
            hpar = mesh.s1
            density = DensitySpace(kmesh, cells, vols, cents)
        else:
            region = geometry.region(sid)
            mesh = dg.region_fe_mesh[sid]
            space = SplineSpace(mesh, p, region, None)
            fmesh = dg.region_filter_mesh[sid]
            cells = np.arange(fmesh.n_elements)
            density = DensitySpace(fmesh, cells, dg.region_cell_volumes[sid],
                                   dg.region_cell_centroids[sid])
            hpar = dg.region_h[sid]
        sub = SubdomainDiscretization(sid, space, density, hpar, scalar_offset, cell_offset)
        dp.subs[sid] = sub
        scalar_offset += space.n_dofs
        cell_offset += density.n_cells
        if sid == 0:
            dp.n_design_cells = density.n_cells
    dp.n_scalar_dofs = scalar_offset
    dp.n_cells = cell_offset

    _build_bulk_tables(dp)
    _build_trace_tables(dp)
    _build_ghost_tables(dp)
    _build_pattern(dp)
    return dp


def _element_vector_dofs(dp, sid, fe_elems):
    sub = dp.subs[sid]
    scalar = sub.space.element_dofs(fe_elems) + sub.dof_offset
    return _vector_dofs(scalar)


def _quad_parent_data(dp, sid, vq):
    """Parent FE elements and element-local coordinates of quadrature points."""
    sub = dp.subs[sid]
    f = 2**dp.dg.level
    cell_i = vq.cell % vq.mesh.nx
    cell_j = vq.cell // vq.mesh.nx
    fe_i, fe_j = cell_i // f, cell_j // f
    fe = fe_i + sub.space.mesh.nx * fe_j
    local = np.column_stack([vq.uv[:, 0] / f - fe_i, vq.uv[:, 1] / f - fe_j])
    return fe, np.clip(local, 0.0, 1.0)


def _build_bulk_tables(dp: DiscreteProblem):
    chunks_dofs, chunks_kmu, chunks_klam = [], [], []
    chunks_mu, chunks_lam, chunks_load = [], [], []
    any_load = bool(dp.loads.body_force)
    for sid in sorted(dp.subs):
        sub = dp.subs[sid]
        vq = dp.dg.volume_quads[sid]
        fe, local = _quad_parent_data(dp, sid, vq)
        compact = sub.density.cell_map[vq.cell]
        if np.any(compact < 0):
            raise geo.GeometryError("quadrature point on inactive density cell")
        ncells = sub.density.n_cells
        m = (dp.degree + 1) ** 2
        kmu = np.zeros((ncells, 2 * m, 2 * m))
        klam = np.zeros((ncells, 2 * m, 2 * m))
        load = np.zeros((ncells, 2 * m)) if any_load else None
        fvals = dp.loads.body_force.get(sid)
        # parent element dofs per cell, straight from the nesting relation
        f = 2**dp.dg.level
        ci, cj = sub.density.mesh.ij(sub.density.active_cells)
        fe_of_cell = (ci // f) + sub.space.mesh.nx * (cj // f)
        cell_dofs = _element_vector_dofs(dp, sid, fe_of_cell)
        if vq.cell.size:
            chunk = 200_000
            for lo in range(0, vq.cell.size, chunk):
                sl = slice(lo, min(lo + chunk, vq.cell.size))
                _, grads = sub.space.eval_basis(fe[sl], local[sl], check=False)
                pk, pl = _strain_tables(grads, vq.weights[sl])
                np.add.at(kmu, compact[sl], pk)
                np.add.at(klam, compact[sl], pl)
                if fvals is not None:
                    vals, _ = sub.space.eval_basis(fe[sl], local[sl], check=False)
                    fv = np.asarray(fvals(vq.points[sl]), dtype=float)
                    lv = np.zeros((fv.shape[0], 2 * m))
                    lv[:, 0::2] = vals * fv[:, :1] * vq.weights[sl, None]
                    lv[:, 1::2] = vals * fv[:, 1:] * vq.weights[sl, None]
                    np.add.at(load, compact[sl], lv)
        mat = dp.materials[sid]
        chunks_dofs.append(cell_dofs)
        chunks_kmu.append(kmu)
        chunks_klam.append(klam)
        chunks_mu.append(np.full(ncells, mat.mu_hat))
        chunks_lam.append(np.full(ncells, mat.lambda_hat))
        if any_load:
            chunks_load.append(load)
    dp.bulk = BulkTables(
        cell_dofs=np.vstack(chunks_dofs),
        kmu=np.concatenate(chunks_kmu, axis=0),
        klam=np.concatenate(chunks_klam, axis=0),
        mat_mu=np.concatenate(chunks_mu),
        mat_lam=np.concatenate(chunks_lam),
        load=np.vstack(chunks_load) if any_load else None,
    )


def _curve_side_tables(dp, sid, cells, points):
    """Basis values/grads, dofs and global cell ids for one curve side."""
    sub = dp.subs[sid]
    f = 2**dp.dg.level
    kmesh = sub.density.mesh
    ci, cj = kmesh.ij(cells)
    fe_i, fe_j = ci // f, cj // f
    fe = fe_i + sub.space.mesh.nx * fe_j
    if sid == 0:
        uv = sub.space.mesh.to_grid(points)
    else:
        ref = geo.map_inverse(dp.dg.geometry.region(sid), points)
        uv = sub.space.mesh.to_grid(ref)
    local = np.column_stack([uv[:, 0] - fe_i, uv[:, 1] - fe_j])
    # points may sit a hair outside their clipped cell (polygonized curved
    # geometry); the spline pieces extrapolate smoothly
    local = np.clip(local, -0.25, 1.25)
    vals, grads = sub.space.eval_basis(fe, local, check=False)
    dofs = _element_vector_dofs(dp, sid, fe)
    gcells = sub.cell_offset + sub.density.cell_map[cells]
    if np.any(sub.density.cell_map[cells] < 0):
        raise geo.GeometryError("curve quadrature resolved to an inactive cell")
    mat = dp.materials[sid]
    n = points.shape[0]
    return dict(vals=vals, grads=grads, dofs=dofs, cells=gcells,
                mu=np.full(n, mat.mu_hat), lam=np.full(n, mat.lambda_hat),
                h=np.full(n, sub.h_param))


def _build_trace_tables(dp: DiscreteProblem):
    one, two, neu = [], [], []
    for cq in dp.dg.curve_quads:
        if cq.kind == "free" or cq.n_points == 0:
            continue
        side_i = _curve_side_tables(dp, cq.sub_i, cq.cell_i, cq.points)
        if cq.kind == "neumann":
            field = dp.loads.neumann_tractions.get(cq.tag)
            if field is None:
                continue
            g = np.asarray(field(cq.points), dtype=float)
            neu.append((cq, side_i, g))
        elif cq.kind == "dirichlet":
            one.append((cq, side_i))
        else:
            side_j = _curve_side_tables(dp, cq.sub_j, cq.cell_j, cq.points)
            two.append((cq, side_i, side_j))

    def pack(entries, two_sided):
        if not entries:
            return None
        w = np.concatenate([e[0].weights for e in entries])
        nrm = np.vstack([e[0].normals for e in entries])
        sides = [1] if not two_sided else [1, 2]
        tt = TraceTables(
            n_points=w.size, w=w, normal=nrm,
            vals=[np.vstack([e[k]["vals"] for e in entries]) for k in sides],
            grads=[np.concatenate([e[k]["grads"] for e in entries], axis=0) for k in sides],
            dofs=[np.vstack([e[k]["dofs"] for e in entries]) for k in sides],
            cells=[np.concatenate([e[k]["cells"] for e in entries]) for k in sides],
            mu_hat=[np.concatenate([e[k]["mu"] for e in entries]) for k in sides],
            lam_hat=[np.concatenate([e[k]["lam"] for e in entries]) for k in sides],
            h=[np.concatenate([e[k]["h"] for e in entries]) for k in sides],
        )
        return tt

    dp.dirichlet = pack(one, False)
    dp.interface = pack(two, True)
    if neu:
        dp.neumann = NeumannTables(
            w=np.concatenate([cq.weights for cq, _, _ in neu]),
            vals=np.vstack([s["vals"] for _, s, _ in neu]),
            dofs=np.vstack([s["dofs"] for _, s, _ in neu]),
            cells=np.concatenate([s["cells"] for _, s, _ in neu]),
            traction=np.vstack([g for _, _, g in neu]),
        )


def _build_ghost_tables(dp: DiscreteProblem):
    gf = dp.dg.ghost
    if gf is None or gf.n_faces == 0:
        dp.ghost = GhostTables(np.zeros((0, 0), dtype=np.int64), np.zeros((0, 0, 0)))
        return
    p = dp.degree
    sub = dp.subs[0]
    mesh = sub.space.mesh
    mat = dp.materials[0]
    nq = p + 2
    gx, gw = geo.gauss_legendre_01(nq)
    # one reference jump table per orientation; all faces of an orientation
    # share it by translation invariance of the uniform B-spline basis
    m1 = (p + 2) * (p + 1)  # scalar dofs in the two-element patch
    ref_mats = {}
    for orient, (s_n, s_t) in enumerate(((mesh.s1, mesh.s2), (mesh.s2, mesh.s1))):
        total = np.zeros((m1, m1))
        for k in range(1, p + 1):
            left = uniform_bspline_1d(p, np.array([1.0]), k)[k][:, 0]   # (p+1,)
            right = uniform_bspline_1d(p, np.array([0.0]), k)[k][:, 0]
            tang = uniform_bspline_1d(p, gx, 0)[0]                       # (p+1, nq)
            jump = np.zeros((m1, nq))
            for b in range(p + 1):
                for a in range(p + 2):
                    u = _patch_index(a, b, p, orient)
                    if a <= p:
                        jump[u] += left[a] * tang[b]
                    if a >= 1:
                        jump[u] -= right[a - 1] * tang[b]
            gamma_k = mat.mu_hat * dp.ghost_scale / math.factorial(k)
            scale = gamma_k * mesh.s1 ** (2 * k - 1) / s_n ** (2 * k) * s_t
            total += scale * np.einsum("iq,jq,q->ij", jump, jump, gw)
        ref_mats[orient] = total
    face_mats = np.stack([ref_mats[o] for o in gf.orient]) if gf.n_faces else np.zeros((0, m1, m1))
    # scalar dof ids of the two-element patch
    i0, j0 = mesh.ij(gf.elems[:, 0])
    ndx = mesh.nx + p
    dofs = np.zeros((gf.n_faces, m1), dtype=np.int64)
    for b in range(p + 1):
        for a in range(p + 2):
            u = _patch_index(a, b, p, 0)
            dx = np.where(gf.orient == 0, i0 + a, i0 + b)
            dy = np.where(gf.orient == 0, j0 + b, j0 + a)
            lattice = dx + ndx * dy
            compact = sub.space.dof_map[lattice]
            if np.any(compact < 0):
                raise geo.GeometryError("ghost face touches an inactive dof")
            dofs[:, u] = compact + sub.dof_offset
    dp.ghost = GhostTables(_vector_dofs(dofs), face_mats)


def _patch_index(a, b, p, orient):
    # local ordering of the (p+2) x (p+1) dof patch across a face
    return a * (p + 1) + b


def _block_coo(dofs):
    """Row/col arrays for dense blocks given per-block dof vectors (n, m)."""
    n, m = dofs.shape
    rows = np.repeat(dofs, m, axis=1).ravel()
    cols = np.tile(dofs, (1, m)).ravel()
    return rows, cols


def _build_pattern(dp: DiscreteProblem):
    rows, cols = [], []
    segments = {}
    pos = 0

    def add(name, dofs):
        nonlocal pos
        r, c = _block_coo(dofs)
        rows.append(r)
        cols.append(c)
        segments[name] = slice(pos, pos + r.size)
        pos += r.size

    add("bulk", dp.bulk.cell_dofs)
    if dp.dirichlet is not None:
        add("dirichlet", dp.dirichlet.dofs[0])
    if dp.interface is not None:
        add("interface", np.hstack(dp.interface.dofs))
    if dp.ghost.dofs.size:
        add("ghost", dp.ghost.dofs)
    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    dp.pattern = SparsityPattern.from_coo(rows, cols, dp.n_dofs)
    dp.segments = segments
    dp._n_values = pos
