"""Linear solve and displacement postprocessing."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse.linalg as spla

from .assembly import LinearSystem

DIRECT_DOF_LIMIT = 100_000


class SolverError(RuntimeError):
    pass


class ConfigurationError(RuntimeError):
    """The assembled operator is not positive definite (beta too small)."""


@dataclass
class DisplacementField:
    """Solution coefficients plus solve diagnostics."""

    u: np.ndarray
    residual: float
    iterations: int
    method: str
    revision: int


def solve_displacement(sys: LinearSystem, tol: float = 1e-10,
                       max_iter: int = 10_000, method: str = None) -> DisplacementField:
    """Solve A u = b; sparse factorization at desk scale, Jacobi-PCG above.

    The conjugate gradient path reports negative curvature (an indefinite
    operator, i.e. the Nitsche penalty is too small) as a ConfigurationError
    and non-convergence as a SolverError carrying the final residual.
    """
    A, b = sys.A, sys.b
    bnorm = float(np.linalg.norm(b))
    if bnorm == 0.0:
        return DisplacementField(np.zeros_like(b), 0.0, 0, "trivial", sys.revision)
    if method is None:
        method = "direct" if A.shape[0] <= DIRECT_DOF_LIMIT else "cg"
    if method == "direct":
        lu = spla.splu(A.tocsc())
        u = lu.solve(b)
        res = float(np.linalg.norm(A @ u - b) / bnorm)
        if res > tol:
            u += lu.solve(b - A @ u)  # one refinement step
            res = float(np.linalg.norm(A @ u - b) / bnorm)
        if not np.isfinite(res) or res > max(tol, 1e-8):
            raise SolverError(f"direct solve residual {res:.3e} exceeds tolerance")
        return DisplacementField(u, res, 1, "direct", sys.revision)
    u, res, it = _pcg(A, b, tol, max_iter)
    return DisplacementField(u, res, it, "cg", sys.revision)


def _pcg(A, b, tol, max_iter):
    # Jacobi-preconditioned CG with explicit negative-curvature detection
    diag = A.diagonal()
    if np.any(diag <= 0):
        raise ConfigurationError("nonpositive diagonal entry; operator is not SPD")
    minv = 1.0 / diag
    bnorm = float(np.linalg.norm(b))
    u = np.zeros_like(b)
    r = b.copy()
    z = minv * r
    p = z.copy()
    rz = float(r @ z)
    for it in range(1, max_iter + 1):
        Ap = A @ p
        pAp = float(p @ Ap)
        if pAp <= 0.0:
            raise ConfigurationError(
                "negative curvature encountered; matrix is indefinite (increase beta)")
        alpha = rz / pAp
        u += alpha * p
        r -= alpha * Ap
        res = float(np.linalg.norm(r) / bnorm)
        if res <= tol:
            return u, res, it
        z = minv * r
        rz_new = float(r @ z)
        p = z + (rz_new / rz) * p
        rz = rz_new
    raise SolverError(f"CG did not converge in {max_iter} iterations; residual {res:.3e}")


def compliance(u: DisplacementField, sys: LinearSystem) -> float:
    """Work of the loads l(u) = b . u; equals A(u, u) at the solution."""
    vec = u.u if isinstance(u, DisplacementField) else np.asarray(u)
    return float(sys.b @ vec)


def von_mises(sigma, nu, plane: str = "strain"):
    """Von Mises stress from 2D stress tensors (n, 2, 2).

    Plane strain takes sigma_zz = nu (sigma_xx + sigma_yy); plane stress has
    sigma_zz = 0.
    """
    sxx, syy, sxy = sigma[:, 0, 0], sigma[:, 1, 1], sigma[:, 0, 1]
    szz = nu * (sxx + syy) if plane == "strain" else np.zeros_like(sxx)
    return np.sqrt(0.5 * ((sxx - syy) ** 2 + (syy - szz) ** 2 + (szz - sxx) ** 2)
                   + 3.0 * sxy**2)


def stress_field(dp, u, chi, points, sub_id: int = 0):
    """Stress tensor and von Mises value at sample points of one subdomain.

    Samples outside the active region are flagged invalid rather than
    evaluated.  Returns (sigma (n,2,2), vm (n,), valid (n,)).
    """
    vec = u.u if isinstance(u, DisplacementField) else np.asarray(u)
    points = np.atleast_2d(np.asarray(points, dtype=float))
    n = points.shape[0]
    sub = dp.subs[sub_id]
    sigma = np.zeros((n, 2, 2))
    vm = np.zeros(n)
    valid = np.zeros(n, dtype=bool)
    mat = dp.materials[sub_id]
    for q in range(n):
        try:
            elems, local = sub.space.locate(points[q])
        except ValueError:
            continue
        cell = _density_cell(dp, sub_id, points[q])
        if cell < 0:
            continue
        _, grads = sub.space.eval_basis(elems, local, check=False)
        dofs = 2 * (sub.space.element_dofs(elems) + sub.dof_offset)
        gx = grads[0, :, 0]
        gy = grads[0, :, 1]
        ux, uy = vec[dofs[0]], vec[dofs[0] + 1]
        exx = float(gx @ ux)
        eyy = float(gy @ uy)
        exy = 0.5 * float(gy @ ux + gx @ uy)
        c = chi[cell]
        mu, lam = c * mat.mu_hat, c * mat.lambda_hat
        tr = exx + eyy
        sigma[q] = [[2 * mu * exx + lam * tr, 2 * mu * exy],
                    [2 * mu * exy, 2 * mu * eyy + lam * tr]]
        valid[q] = True
    vm[valid] = von_mises(sigma[valid], dp.materials[sub_id].nu, dp.plane)
    return sigma, vm, valid


def _density_cell(dp, sub_id, point):
    from . import geometry as geo

    sub = dp.subs[sub_id]
    if sub_id == 0:
        mesh = sub.density.mesh
        uv = mesh.to_grid(point[None, :])[0]
        i = int(np.clip(np.floor(uv[0]), 0, mesh.nx - 1))
        j = int(np.clip(np.floor(uv[1]), 0, mesh.ny - 1))
        compact = sub.density.cell_map[mesh.index(i, j)]
    else:
        ref = geo.map_inverse(dp.dg.geometry.region(sub_id), point[None, :])[0]
        mesh = sub.density.mesh
        i = int(np.clip(ref[0] * mesh.nx, 0, mesh.nx - 1))
        j = int(np.clip(ref[1] * mesh.ny, 0, mesh.ny - 1))
        compact = sub.density.cell_map[mesh.index(i, j)]
    return -1 if compact < 0 else dp.subs[sub_id].cell_offset + compact
