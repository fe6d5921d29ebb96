"""Assembly of the stabilized Nitsche formulation.

The discrete operator is the sum of the elastic bulk form, a ghost-penalty
stabilization on faces near the cut boundary, a density-weighted penalty
term and the matching consistency terms on Dirichlet and interface curves:

    A = a + s + beta * b + c

All density dependence enters through the concatenated cell vector chi; the
geometry tables in DiscreteProblem are fixed, so repeated assembly only
recomputes value arrays and scatters them through a precomputed sparsity
pattern.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .problem import DiscreteProblem, TraceTables


################################################################################
# Jump / average algebra on two-sided traces
################################################################################

def jump(a_i, a_j=None):
    """[a] = a_i - a_j on interfaces, a_i on one-sided boundaries."""
    return np.asarray(a_i) if a_j is None else np.asarray(a_i) - np.asarray(a_j)


def arithmetic_average(a_i, a_j=None):
    """<a> = (a_i + a_j) / 2 on interfaces, a_i on one-sided boundaries."""
    return np.asarray(a_i) if a_j is None else 0.5 * (np.asarray(a_i) + np.asarray(a_j))


def weighted_average(a_i, a_j, mu_i, mu_j):
    """{a} with the opposite side's shear modulus as weight."""
    den = np.asarray(mu_i) + np.asarray(mu_j)
    return (np.asarray(mu_j) * np.asarray(a_i) + np.asarray(mu_i) * np.asarray(a_j)) / den


def conjugate_average(a_i, a_j, mu_i, mu_j):
    """[[a]], the conjugate operator to the weighted average."""
    den = np.asarray(mu_i) + np.asarray(mu_j)
    return (np.asarray(mu_j) * np.asarray(a_i) - np.asarray(mu_i) * np.asarray(a_j)) / den


def weighted_identity_check(a_i, a_j, b_i, b_j, mu_i, mu_j):
    """Residual of the product identity 2 {a b} = 2 {a} <b> + [[a]] [b].

    Returns {a b} - {a} <b> - [[a]] [b] / 2, which vanishes identically; used
    to validate the trace algebra.
    """
    lhs = weighted_average(np.asarray(a_i) * np.asarray(b_i),
                           np.asarray(a_j) * np.asarray(b_j), mu_i, mu_j)
    rhs = (weighted_average(a_i, a_j, mu_i, mu_j) * arithmetic_average(b_i, b_j)
           + 0.5 * conjugate_average(a_i, a_j, mu_i, mu_j) * jump(b_i, b_j))
    return lhs - rhs


################################################################################
# Linear system assembly
################################################################################

@dataclass
class LinearSystem:
    """Assembled symmetric system over the active displacement dofs."""

    A: sp.csr_matrix
    b: np.ndarray
    problem: DiscreteProblem
    chi: np.ndarray
    revision: int

    @property
    def n_dofs(self):
        return self.b.size


def _value_matrices(vals):
    """(n, m) basis values -> (n, 2, 2m) vector-valued evaluation matrices."""
    n, m = vals.shape
    M = np.zeros((n, 2, 2 * m))
    M[:, 0, 0::2] = vals
    M[:, 1, 1::2] = vals
    return M


def _flux_matrices(grads, normal, mu, lam):
    """(n, m, 2) gradients -> (n, 2, 2m) traction matrices sigma(phi) . n."""
    n, m, _ = grads.shape
    gn = np.einsum("nmr,nr->nm", grads, normal)
    T = np.zeros((n, 2, 2 * m))
    for r in range(2):
        for c in range(2):
            T[:, r, c::2] = mu[:, None] * grads[:, :, r] * normal[:, None, c] \
                + lam[:, None] * grads[:, :, c] * normal[:, None, r]
        T[:, r, r::2] += mu[:, None] * gn
    return T


def _trace_point_data(tt: TraceTables, chi):
    """Per-point material data and Nitsche weights for a trace family."""
    chi_i = chi[tt.cells[0]]
    mu_i = chi_i * tt.mu_hat[0]
    lam_i = chi_i * tt.lam_hat[0]
    if not tt.two_sided:
        one = np.ones_like(mu_i)
        pen_mu = 2.0 * mu_i / tt.h[0]
        pen_lam = lam_i / tt.h[0]
        return (chi_i, None), (mu_i, None), (lam_i, None), (one, None), pen_mu, pen_lam
    chi_j = chi[tt.cells[1]]
    mu_j = chi_j * tt.mu_hat[1]
    lam_j = chi_j * tt.lam_hat[1]
    den = mu_i + mu_j
    w_i = mu_j / den
    w_j = mu_i / den
    pen_mu = 2.0 * (w_i * mu_i / tt.h[0] + w_j * mu_j / tt.h[1])
    pen_lam = w_i * lam_i / tt.h[0] + w_j * lam_j / tt.h[1]
    return (chi_i, chi_j), (mu_i, mu_j), (lam_i, lam_j), (w_i, w_j), pen_mu, pen_lam


def _nitsche_values(tt: TraceTables, chi, beta, include_penalty=True, include_consistency=True):
    """Per-point dense blocks of beta*b + c for one trace family, raveled."""
    _, mus, lams, ws, pen_mu, pen_lam = _trace_point_data(tt, chi)
    M_i = _value_matrices(tt.vals[0])
    T_i = _flux_matrices(tt.grads[0], tt.normal, mus[0], lams[0])
    if tt.two_sided:
        M_j = _value_matrices(tt.vals[1])
        T_j = _flux_matrices(tt.grads[1], tt.normal, mus[1], lams[1])
        J = np.concatenate([M_i, -M_j], axis=2)
        F = np.concatenate([ws[0][:, None, None] * T_i, ws[1][:, None, None] * T_j], axis=2)
    else:
        J = M_i
        F = T_i
    out = np.zeros((tt.n_points, J.shape[2], J.shape[2]))
    if include_penalty:
        Jn = np.einsum("nc,ncm->nm", tt.normal, J)
        out += beta * (pen_mu[:, None, None] * np.einsum("ncm,ncl->nml", J, J)
                       + pen_lam[:, None, None] * Jn[:, :, None] * Jn[:, None, :])
    if include_consistency:
        FJ = np.einsum("ncm,ncl->nml", F, J)
        out -= FJ + FJ.transpose(0, 2, 1)
    return (out * tt.w[:, None, None]).ravel()


def _ghost_values(dp: DiscreteProblem):
    if getattr(dp, "_ghost_values", None) is None:
        S = dp.ghost.face_matrices
        if S.size == 0:
            dp._ghost_values = np.zeros(0)
        else:
            nf, m1, _ = S.shape
            K = np.zeros((nf, 2 * m1, 2 * m1))
            K[:, 0::2, 0::2] = S
            K[:, 1::2, 1::2] = S
            dp._ghost_values = K.ravel()
    return dp._ghost_values


def _bulk_values(dp: DiscreteProblem, chi):
    # kmu already integrates 2 eps:eps, so sigma:eps = mu * kmu + lam * klam
    bt = dp.bulk
    smu = bt.mat_mu * chi
    slam = bt.mat_lam * chi
    return (smu[:, None, None] * bt.kmu + slam[:, None, None] * bt.klam).ravel()


def _rhs(dp: DiscreteProblem, chi):
    b = np.zeros(dp.n_dofs)
    bt = dp.bulk
    if bt.load is not None:
        vals = (chi[:, None] * bt.load).ravel()
        b += np.bincount(bt.cell_dofs.ravel(), weights=vals, minlength=dp.n_dofs)
    nt = dp.neumann
    if nt is not None:
        scale = nt.w * chi[nt.cells]
        m = nt.vals.shape[1]
        contrib = np.zeros((nt.w.size, 2 * m))
        contrib[:, 0::2] = nt.vals * (scale * nt.traction[:, 0])[:, None]
        contrib[:, 1::2] = nt.vals * (scale * nt.traction[:, 1])[:, None]
        b += np.bincount(nt.dofs.ravel(), weights=contrib.ravel(), minlength=dp.n_dofs)
    return b


def assemble_system(dp: DiscreteProblem, rho=None, chi=None, beta=None,
                    ghost_scale=None) -> LinearSystem:
    """Assemble A = a + s + beta*b + c and the load vector for a density."""
    if chi is None:
        if rho is None:
            raise ValueError("pass either rho (design cells) or chi (all cells)")
        chi = dp.chi_full(np.asarray(rho, dtype=float))
    chi = np.asarray(chi, dtype=float)
    if chi.size != dp.n_cells:
        raise ValueError(f"chi has {chi.size} entries, expected {dp.n_cells}")
    if beta is None:
        beta = dp.beta
    values = np.zeros(dp._n_values)
    values[dp.segments["bulk"]] = _bulk_values(dp, chi)
    if dp.dirichlet is not None:
        values[dp.segments["dirichlet"]] = _nitsche_values(dp.dirichlet, chi, beta)
    if dp.interface is not None:
        values[dp.segments["interface"]] = _nitsche_values(dp.interface, chi, beta)
    if "ghost" in dp.segments:
        gv = _ghost_values(dp)
        if ghost_scale is not None and dp.ghost_scale != 0:
            gv = gv * (ghost_scale / dp.ghost_scale)
        elif ghost_scale is not None:
            gv = gv * 0.0
        values[dp.segments["ghost"]] = gv
    A = dp.pattern.matrix(values)
    b = _rhs(dp, chi)
    dp.revision += 1
    return LinearSystem(A, b, dp, chi, dp.revision)


def _partial_matrix(dp, name, values):
    all_values = np.zeros(dp._n_values)
    all_values[dp.segments[name]] = values
    return dp.pattern.matrix(all_values)


def assemble_bulk(dp: DiscreteProblem, chi):
    """Elastic bulk form and the chi-scaled load vector only."""
    chi = np.asarray(chi, dtype=float)
    return _partial_matrix(dp, "bulk", _bulk_values(dp, chi)), _rhs(dp, chi)


def assemble_nitsche(dp: DiscreteProblem, chi, beta=None, parts=False):
    """Penalty + consistency terms (beta*b + c) on Dirichlet and interfaces.

    With parts=True returns (B, C) where the full contribution is beta*B + C.
    """
    chi = np.asarray(chi, dtype=float)
    if beta is None:
        beta = dp.beta
    fams = [k for k in ("dirichlet", "interface") if getattr(dp, k) is not None]

    def collect(**kw):
        out = None
        for name in fams:
            m = _partial_matrix(dp, name, _nitsche_values(getattr(dp, name), chi, **kw))
            out = m if out is None else out + m
        if out is None:
            out = sp.csr_matrix((dp.n_dofs, dp.n_dofs))
        return out

    if not parts:
        return collect(beta=beta)
    B = collect(beta=1.0, include_consistency=False)
    C = collect(beta=0.0, include_penalty=False)
    return B, C


def assemble_ghost_penalty(dp: DiscreteProblem, scale=None):
    """Ghost-penalty stabilization matrix (density independent)."""
    gv = _ghost_values(dp)
    if scale is not None and dp.ghost_scale != 0:
        gv = gv * (scale / dp.ghost_scale)
    if "ghost" not in dp.segments:
        return sp.csr_matrix((dp.n_dofs, dp.n_dofs))
    return _partial_matrix(dp, "ghost", gv)


################################################################################
# Density derivatives of the discrete energy
################################################################################

def bulk_cell_energies(dp: DiscreteProblem, u):
    """Per-cell unit-chi strain energy u^T (mu_hat Kmu + lam_hat Klam) u."""
    bt = dp.bulk
    uc = u[bt.cell_dofs]
    e_mu = np.einsum("ci,cij,cj->c", uc, bt.kmu, uc)
    e_lam = np.einsum("ci,cij,cj->c", uc, bt.klam, uc)
    return bt.mat_mu * e_mu + bt.mat_lam * e_lam


def load_chi_derivative(dp: DiscreteProblem, u):
    """Per-cell derivative of the load functional w.r.t. chi."""
    out = np.zeros(dp.n_cells)
    bt = dp.bulk
    if bt.load is not None:
        out += np.einsum("ci,ci->c", bt.load, u[bt.cell_dofs])
    nt = dp.neumann
    if nt is not None:
        ux = np.einsum("nm,nm->n", nt.vals, u[nt.dofs][:, 0::2])
        uy = np.einsum("nm,nm->n", nt.vals, u[nt.dofs][:, 1::2])
        e = nt.w * (nt.traction[:, 0] * ux + nt.traction[:, 1] * uy)
        out += np.bincount(nt.cells, weights=e, minlength=dp.n_cells)
    return out


def _trace_energy(tt: TraceTables, chi, beta, u):
    """Per-point value of beta*b(u,u) + c(u,u) on one trace family."""
    _, mus, lams, ws, pen_mu, pen_lam = _trace_point_data(tt, chi)
    u_i = u[tt.dofs[0]]
    val_i = np.stack([np.einsum("nm,nm->n", tt.vals[0], u_i[:, 0::2]),
                      np.einsum("nm,nm->n", tt.vals[0], u_i[:, 1::2])], axis=1)
    T_i = _flux_matrices(tt.grads[0], tt.normal, mus[0], lams[0])
    flux_i = np.einsum("ncm,nm->nc", T_i, u_i)
    if tt.two_sided:
        u_j = u[tt.dofs[1]]
        val_j = np.stack([np.einsum("nm,nm->n", tt.vals[1], u_j[:, 0::2]),
                          np.einsum("nm,nm->n", tt.vals[1], u_j[:, 1::2])], axis=1)
        T_j = _flux_matrices(tt.grads[1], tt.normal, mus[1], lams[1])
        flux_j = np.einsum("ncm,nm->nc", T_j, u_j)
        ju = val_i - val_j
        wflux = ws[0][:, None] * flux_i + ws[1][:, None] * flux_j
    else:
        ju = val_i
        wflux = flux_i
    jun = np.einsum("nc,nc->n", ju, tt.normal)
    e = beta * (pen_mu * np.einsum("nc,nc->n", ju, ju) + pen_lam * jun**2) \
        - 2.0 * np.einsum("nc,nc->n", wflux, ju)
    return tt.w * e


def nitsche_chi_derivative(dp: DiscreteProblem, chi, u, beta=None):
    """Per-cell derivative of (beta*b + c)(u, u) w.r.t. chi.

    At each trace point the energy has the closed form chi_i chi_j Q /
    (chi_i mu_hat_i + chi_j mu_hat_j) (linear in chi on one-sided curves), so
    the derivative follows from the point energy itself.
    """
    if beta is None:
        beta = dp.beta
    out = np.zeros(dp.n_cells)
    tt = dp.dirichlet
    if tt is not None:
        e = _trace_energy(tt, chi, beta, u)
        chi_i = chi[tt.cells[0]]
        np.add.at(out, tt.cells[0], e / chi_i)
    tt = dp.interface
    if tt is not None:
        e = _trace_energy(tt, chi, beta, u)
        chi_i = chi[tt.cells[0]]
        chi_j = chi[tt.cells[1]]
        den = chi_i * tt.mu_hat[0] + chi_j * tt.mu_hat[1]
        np.add.at(out, tt.cells[0], e * chi_j * tt.mu_hat[1] / (chi_i * den))
        np.add.at(out, tt.cells[1], e * chi_i * tt.mu_hat[0] / (chi_j * den))
    return out
