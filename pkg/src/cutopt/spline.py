"""Tensor-product B-spline spaces on structured background grids.

The spaces use uniform (unclamped) knot vectors: every basis function on an
active element is a plain translate of the uniform B-spline, with no
boundary modification.  Dirichlet and interface conditions are imposed
weakly, so no interpolation fix-up near boundaries is needed.  Degree is a
parameter but only p in {1, 2} is exercised; p = 2 gives C^1 spaces.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import geometry as geo


def _piece_coefficients(p: int):
    """Element-local polynomial pieces of the uniform B-spline of degree p.

    Returns coefficient rows (lowest order first) of shape (p+1, p+1); row k
    is the piece of the cardinal B-spline on knot span [k, k+1] expressed in
    the local coordinate t = s - k.
    """
    pieces = [np.array([1.0])]
    for q in range(1, p + 1):
        new = []
        for k in range(q + 1):
            acc = np.zeros(q + 1)
            if k < q:
                lo = pieces[k]
                acc[: lo.size] += (k / q) * lo
                acc[1 : lo.size + 1] += lo / q
            if k >= 1:
                hi = pieces[k - 1]
                acc[: hi.size] += ((q + 1 - k) / q) * hi
                acc[1 : hi.size + 1] -= hi / q
            new.append(acc)
        pieces = new
    return np.vstack(pieces)


_PIECE_CACHE: dict = {}


def uniform_bspline_1d(p: int, t, nderiv: int = 1):
    """Nonzero uniform B-spline pieces on one element.

    For local coordinates t in [0, 1] (unit knot spacing) returns an array of
    shape (nderiv+1, p+1, n) where entry [d, a] is the d-th derivative of the
    basis function with dof offset a; dof index on element e is e + a.
    Evaluation at t = 0 and t = 1 uses this element's own piece, so one-sided
    derivative values across faces are exact.
    """
    if p not in _PIECE_CACHE:
        coeffs = _piece_coefficients(p)
        tables = [coeffs]
        for _ in range(p):
            tables.append(np.asarray([np.polynomial.polynomial.polyder(c) for c in tables[-1]]))
        _PIECE_CACHE[p] = tables
    tables = _PIECE_CACHE[p]
    t = np.atleast_1d(np.asarray(t, dtype=float))
    out = np.zeros((nderiv + 1, p + 1, t.shape[0]))
    for a in range(p + 1):
        k = p - a  # dof offset a sees piece k of the cardinal spline
        for d in range(min(nderiv, p) + 1):
            out[d, a] = np.polynomial.polynomial.polyval(t, tables[d][k])
    return out


def greville_points(p: int, dof_index):
    """Greville abscissa of a dof in grid units (support starts at dof - p)."""
    dof_index = np.asarray(dof_index, dtype=float)
    return dof_index - p + (p + 1) / 2.0


@dataclass
class SplineSpace:
    """Vector-valued tensor B-spline space on (part of) a background mesh.

    Scalar dofs live on the (nx+p) x (ny+p) lattice; element (i, j) is
    supported by dofs (i+a, j+b), a, b = 0..p.  `active_dofs` maps lattice
    indices to compact indices (-1 for inactive).  For spaces on mapped
    regions, gradients are pushed forward through the region map.
    """

    mesh: geo.BackgroundMesh
    degree: int = 2
    region: object = None  # geo.MappedRegion for fitted nondesign spaces
    active_elements: np.ndarray = None  # linear element ids, sorted
    dof_map: np.ndarray = field(init=False, default=None)  # lattice -> compact
    n_dofs: int = field(init=False, default=0)

    def __post_init__(self):
        mesh, p = self.mesh, self.degree
        if self.active_elements is None:
            self.active_elements = np.arange(mesh.nx * mesh.ny)
        self.active_elements = np.asarray(self.active_elements, dtype=int)
        ndx, ndy = mesh.nx + p, mesh.ny + p
        mask = np.zeros((ndx, ndy), dtype=bool)
        ei = self.active_elements % mesh.nx
        ej = self.active_elements // mesh.nx
        for a in range(p + 1):
            for b in range(p + 1):
                mask[ei + a, ej + b] = True
        self.dof_map = np.full(ndx * ndy, -1, dtype=int)
        flat = np.flatnonzero(mask.T.ravel())  # lattice linear index Dx + ndx*Dy
        self.dof_map[flat] = np.arange(flat.size)
        self.n_dofs = flat.size
        self._active_set = set(self.active_elements.tolist())
        self._dof_lattice = flat

    @property
    def dof_lattice_shape(self):
        return (self.mesh.nx + self.degree, self.mesh.ny + self.degree)

    def dof_grid_points(self):
        """Greville points of the active scalar dofs, physical coordinates."""
        ndx = self.mesh.nx + self.degree
        dx = self._dof_lattice % ndx
        dy = self._dof_lattice // ndx
        g = np.column_stack([greville_points(self.degree, dx), greville_points(self.degree, dy)])
        pts = self.mesh.to_phys(g)
        if self.region is not None:
            pts, _ = geo.map_eval(self.region, np.clip(pts, 0.0, 1.0))
        return pts

    def element_dofs(self, elems):
        """Compact scalar dof indices per element, shape (n, (p+1)^2)."""
        elems = np.atleast_1d(np.asarray(elems, dtype=int))
        p = self.mesh.nx
        deg = self.degree
        ei = elems % p
        ej = elems // p
        ndx = p + deg
        cols = []
        for b in range(deg + 1):
            for a in range(deg + 1):
                cols.append((ei + a) + ndx * (ej + b))
        lattice = np.stack(cols, axis=1)
        out = self.dof_map[lattice]
        if np.any(out < 0):
            raise ValueError("element references an inactive dof")
        return out

    def _check_active(self, elems):
        for e in np.atleast_1d(elems):
            if int(e) not in self._active_set:
                raise ValueError(f"element {int(e)} is not active")

    def eval_basis(self, elems, local, nderiv: int = 1, check: bool = True):
        """Basis values and physical gradients at element-local points.

        `elems` has shape (n,) (or scalar, broadcast), `local` shape (n, 2)
        with coordinates in the reference square.  Returns (values, grads)
        with shapes (n, (p+1)^2) and (n, (p+1)^2, 2); with nderiv=2 also
        returns grid-coordinate second derivatives (n, (p+1)^2, 3) ordered
        (d2/du2, d2/dudv, d2/dv2).
        """
        local = np.atleast_2d(np.asarray(local, dtype=float))
        elems = np.broadcast_to(np.atleast_1d(np.asarray(elems, dtype=int)), (local.shape[0],))
        if check:
            self._check_active(np.unique(elems))
        if np.any((local < -1e-12) | (local > 1 + 1e-12)):
            raise ValueError("local coordinates must lie in the reference square")
        p = self.degree
        bx = uniform_bspline_1d(p, local[:, 0], nderiv)  # (nd+1, p+1, n)
        by = uniform_bspline_1d(p, local[:, 1], nderiv)
        nloc = (p + 1) ** 2
        n = local.shape[0]
        vals = np.empty((n, nloc))
        gu = np.empty((n, nloc))
        gv = np.empty((n, nloc))
        idx = 0
        for b in range(p + 1):
            for a in range(p + 1):
                vals[:, idx] = bx[0, a] * by[0, b]
                gu[:, idx] = bx[1, a] * by[0, b]
                gv[:, idx] = bx[0, a] * by[1, b]
                idx += 1
        grads = self._push_gradients(elems, local, gu, gv)
        if nderiv < 2:
            return vals, grads
        d2 = np.empty((n, nloc, 3))
        idx = 0
        for b in range(p + 1):
            for a in range(p + 1):
                d2[:, idx, 0] = bx[2, a] * by[0, b]
                d2[:, idx, 1] = bx[1, a] * by[1, b]
                d2[:, idx, 2] = bx[0, a] * by[2, b]
                idx += 1
        return vals, grads, d2

    def _push_gradients(self, elems, local, gu, gv):
        mesh = self.mesh
        if self.region is None:
            # grid coords: x = origin + u e1 + v e2 with orthogonal axes
            a1 = mesh.e1 / (mesh.s1**2)
            a2 = mesh.e2 / (mesh.s2**2)
            return gu[..., None] * a1 + gv[..., None] * a2
        # mapped space: grid -> reference [0,1]^2 -> physical
        uv = mesh.element_local_to_grid(elems, local)
        ref = mesh.to_phys(uv)  # reference coordinates in [0,1]^2
        _, jac = geo.map_eval(self.region, np.clip(ref, 0.0, 1.0))
        inv = np.linalg.inv(jac)  # d ref / d phys
        # d grid / d ref = diag(nx, ny); grad_phys = inv^T @ diag @ grad_grid
        gx = gu * mesh.nx
        gy = gv * mesh.ny
        grads = np.empty(gu.shape + (2,))
        grads[..., 0] = gx * inv[:, None, 0, 0] + gy * inv[:, None, 1, 0]
        grads[..., 1] = gx * inv[:, None, 0, 1] + gy * inv[:, None, 1, 1]
        return grads

    def locate(self, points):
        """Element ids and local coordinates for physical points.

        Points must lie in active elements; raises otherwise.  For mapped
        spaces the points are first pulled back through the region map.
        """
        points = np.atleast_2d(np.asarray(points, dtype=float))
        if self.region is not None:
            ref = geo.map_inverse(self.region, points)
        else:
            ref = points
        uv = self.mesh.to_grid(ref)
        eps = 1e-12
        i = np.clip(np.floor(uv[:, 0] - eps).astype(int), 0, self.mesh.nx - 1)
        j = np.clip(np.floor(uv[:, 1] - eps).astype(int), 0, self.mesh.ny - 1)
        elems = i + self.mesh.nx * j
        for e in np.unique(elems):
            if int(e) not in self._active_set:
                raise ValueError("point lies outside the active mesh")
        local = uv - np.column_stack([i, j])
        if np.any(local < -1e-9) or np.any(local > 1 + 1e-9):
            raise ValueError("point lies outside the active mesh")
        return elems, np.clip(local, 0.0, 1.0)

    def interpolate(self, coefs, points):
        """Evaluate the vector field with coefficients `coefs` at points.

        `coefs` is the interleaved coefficient vector (2 entries per scalar
        dof).  Returns an (n, 2) array.
        """
        coefs = np.asarray(coefs, dtype=float).reshape(-1)
        elems, local = self.locate(points)
        vals, _ = self.eval_basis(elems, local)
        dofs = self.element_dofs(elems)
        cx = coefs[2 * dofs]
        cy = coefs[2 * dofs + 1]
        return np.column_stack([(vals * cx).sum(axis=1), (vals * cy).sum(axis=1)])


def strain_operator(space: SplineSpace, elems, local):
    """Symmetric-gradient matrices of the vector basis functions.

    Returns an array of shape (n, (p+1)^2, 2, 2, 2): entry [q, a, c] is the
    2x2 strain tensor of basis function a acting on displacement component c,
    eps(N e_c) = (grad N (x) e_c + e_c (x) grad N) / 2.  The stress follows
    as sigma = 2 mu eps + lambda tr(eps) I with tr(eps) = d_c N.
    """
    _, grads = space.eval_basis(elems, local)
    n, nloc, _ = grads.shape
    eps = np.zeros((n, nloc, 2, 2, 2))
    for c in range(2):
        for k in range(2):
            eps[:, :, c, c, k] += 0.5 * grads[:, :, k]
            eps[:, :, c, k, c] += 0.5 * grads[:, :, k]
    return eps


@dataclass
class DensitySpace:
    """Piecewise-constant density space on the active k-refined design mesh.

    One scalar dof per active cell; `cell_map` sends linear cell indices on
    the k-mesh to compact dof indices (-1 when inactive), `volumes` holds the
    clipped physical cell volumes |T cap Omega_0| and `centroids` the full
    cell centers used by the sensitivity filter.
    """

    mesh: geo.BackgroundMesh
    active_cells: np.ndarray
    volumes: np.ndarray
    centroids: np.ndarray
    cell_map: np.ndarray = field(init=False, default=None)

    def __post_init__(self):
        self.active_cells = np.asarray(self.active_cells, dtype=int)
        self.cell_map = np.full(self.mesh.nx * self.mesh.ny, -1, dtype=int)
        self.cell_map[self.active_cells] = np.arange(self.active_cells.size)

    @property
    def n_cells(self):
        return self.active_cells.size
