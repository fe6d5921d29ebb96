"""SIMP + optimality-criteria optimization loop with a cut-aware filter.

The auxiliary density rho lives on the active k-refined design cells; the
nondesign regions contribute fixed rho = 1 "ghost" cells that participate in
the sensitivity filter so material near interfaces is not eroded.  The
volume constraint acts on the physical density chi and is tightened linearly
over the first ramp_iters iterations.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.spatial import cKDTree

from . import assembly
from .model import DensityModel, chi_from_rho, dchi_drho
from .problem import DiscreteProblem
from .solve import compliance, solve_displacement


@dataclass
class DensityField:
    """rho over all filter cells: variable on design cells, 1 elsewhere."""

    problem: DiscreteProblem
    rho_design: np.ndarray

    @property
    def rho_full(self):
        out = np.ones(self.problem.n_cells)
        out[: self.problem.n_design_cells] = self.rho_design
        return out

    @property
    def chi_full(self):
        return self.problem.chi_full(self.rho_design)


def volume_target(i: int, model: DensityModel) -> float:
    """Ramped volume fraction: delta + (1 - delta) max(0, 1 - i / RAMP)."""
    if i < 0:
        raise ValueError("iteration index must be nonnegative")
    if model.ramp_iters == 0:
        return model.delta_vol
    return model.delta_vol + (1.0 - model.delta_vol) * max(0.0, 1.0 - i / model.ramp_iters)


@dataclass
class FilterSpec:
    """Hat-weighted neighbor structure for the sensitivity filter.

    H[k, n] = max(0, r_min - dist(centroid_k, centroid_n)) over all cells
    (design and nondesign) within r_min of design cell k; every design cell
    neighbors itself with weight r_min.
    """

    r_min: float
    gamma: float
    H: sp.csr_matrix          # (n_design_cells, n_cells_total)
    Hsum: np.ndarray

    @classmethod
    def build(cls, dp: DiscreteProblem, r_min: float, gamma: float = 1e-6):
        cents = dp.cell_centroids()
        design = cents[: dp.n_design_cells]
        tree_all = cKDTree(cents)
        tree_design = cKDTree(design)
        pairs = tree_design.query_ball_tree(tree_all, r_min)
        rows = np.concatenate([np.full(len(p), k) for k, p in enumerate(pairs)])
        cols = np.concatenate([np.asarray(p, dtype=int) for p in pairs])
        d = np.linalg.norm(design[rows] - cents[cols], axis=1)
        w = r_min - d
        keep = w > 0
        H = sp.csr_matrix((w[keep], (rows[keep], cols[keep])),
                          shape=(dp.n_design_cells, dp.n_cells))
        return cls(r_min, gamma, H, np.asarray(H.sum(axis=1)).ravel())


def filter_sensitivities(raw, rho_full, spec: FilterSpec, volumes, n_design):
    """Cut-aware sensitivity filter.

    filtered_k = V_k / max(rho_k, gamma) *
                 sum_n H_kn rho_n raw_n / max(V_n, gamma) / sum_n H_kn
    """
    raw = np.asarray(raw, dtype=float)
    inner = rho_full * raw / np.maximum(volumes, spec.gamma)
    acc = spec.H @ inner
    lead = volumes[:n_design] / np.maximum(rho_full[:n_design], spec.gamma)
    return lead * acc / spec.Hsum


def compute_sensitivities(dp: DiscreteProblem, u, sys, rho_design):
    """Cell derivatives of the compliance energy and the volume constraint.

    Returns (dPi (n_cells,), dLam (n_design,)).  dPi includes the nondesign
    "ghost" derivatives used by the filter; dLam = dchi/drho * V on the
    design cells.  The displacement must match the assembled system revision.
    """
    if u.revision != sys.revision:
        raise ValueError("displacement is stale: system was reassembled after the solve")
    chi = sys.chi
    rho_full = np.ones(dp.n_cells)
    rho_full[: dp.n_design_cells] = rho_design
    dA = assembly.bulk_cell_energies(dp, u.u)
    dA += assembly.nitsche_chi_derivative(dp, chi, u.u)
    dl = assembly.load_chi_derivative(dp, u.u)
    dPi_dchi = 2.0 * dl - dA
    dPi = dchi_drho(rho_full, dp.density_model) * dPi_dchi
    vols = dp.cell_volumes()
    dLam = dchi_drho(rho_design, dp.density_model) * vols[: dp.n_design_cells]
    return dPi, dLam


def oc_update(rho, dPi_f, dLam, move: float, target: float, volumes, model: DensityModel,
              damping: float = 1.0, vol_tol: float = 1e-6, max_bisect: int = 100):
    """Optimality-criteria update with eta bisection on the chi-volume.

    Each cell moves to clamp(rho * B^damping, [max(0, rho-m), min(1, rho+m)])
    with B = (-dPi_f) / (eta dLam); eta is bisected (geometric midpoint on
    [1e-9, 1e9]) until the chi-weighted volume fraction matches `target`
    within vol_tol.  Returns (rho_new, eta).
    """
    rho = np.asarray(rho, dtype=float)
    dPi_f = np.asarray(dPi_f, dtype=float)
    dLam = np.asarray(dLam, dtype=float)
    vtot = float(volumes.sum())
    lo = np.maximum(0.0, rho - move)
    hi = np.minimum(1.0, rho + move)
    numer = np.maximum(-dPi_f, 0.0)
    movable = (rho > 0.0) & (dLam > 0.0)
    ratio = np.zeros_like(rho)
    np.divide(numer, dLam, out=ratio, where=movable)

    def step(eta):
        # rho * B^damping with B = (-dPi_f) / (eta dLam); dead cells stay put
        rb = rho * np.where(movable, (ratio / eta) ** damping, 0.0)
        return np.clip(rb, lo, hi)

    def vol(eta):
        return float(chi_from_rho(step(eta), model) @ volumes) / vtot

    eta_lo, eta_hi = 1e-9, 1e9
    v_lo, v_hi = vol(eta_lo), vol(eta_hi)
    # volume decreases with eta: v_lo is the largest reachable volume
    if not (v_hi - vol_tol <= target <= v_lo + vol_tol):
        raise RuntimeError(
            f"volume bisection bracket [{eta_lo:g}, {eta_hi:g}] gives volumes "
            f"[{v_hi:.6f}, {v_lo:.6f}] which never straddle target {target:.6f}")
    eta = eta_lo
    for _ in range(max_bisect):
        eta = np.sqrt(eta_lo * eta_hi)
        v = vol(eta)
        if abs(v - target) <= vol_tol:
            break
        if v > target:
            eta_lo = eta
        else:
            eta_hi = eta
    else:
        raise RuntimeError(
            f"volume bisection did not converge; bracket [{eta_lo:g}, {eta_hi:g}], "
            f"target {target:.6f}")
    return step(eta), float(eta)


@dataclass
class OptimizationState:
    """Loop state: current density, targets and history."""

    iteration: int
    rho: np.ndarray
    volume_target: float
    compliance_history: list = field(default_factory=list)
    history: list = field(default_factory=list)  # per-iteration record dicts
    change: float = np.inf
    eta: float = 0.0
    u: object = None
    sys: object = None


@dataclass
class OptimizationControls:
    r_min: float = None          # defaults to 1.2 h
    filter_gamma: float = 1e-6
    move: float = 0.2
    damping: float = 1.0
    solver_tol: float = 1e-10
    solver_max_iter: int = 10_000
    convergence_tol: float = 0.01
    vol_tol: float = 1e-6


def run_optimization(dp: DiscreteProblem, max_iters: int,
                     controls: OptimizationControls = None,
                     callback=None, state: OptimizationState = None) -> OptimizationState:
    """SIMP / optimality-criteria loop.

    Starts from rho = 1 everywhere (or a checkpointed state) and per
    iteration: ramp the volume target, assemble with chi(rho), solve, record
    compliance, differentiate, filter, update.  Stops at max_iters or when
    max |d rho| drops below the convergence threshold after the ramp is done.
    """
    controls = controls or OptimizationControls()
    model = dp.density_model
    r_min = controls.r_min if controls.r_min is not None else 1.2 * dp.dg.h
    spec = FilterSpec.build(dp, r_min, controls.filter_gamma)
    vols = dp.cell_volumes()
    vols_design = vols[: dp.n_design_cells]
    if state is None:
        state = OptimizationState(0, np.ones(dp.n_design_cells), volume_target(0, model))
    while state.iteration < max_iters:
        i = state.iteration + 1
        target = volume_target(i, model)
        sys = assembly.assemble_system(dp, rho=state.rho)
        u = solve_displacement(sys, tol=controls.solver_tol, max_iter=controls.solver_max_iter)
        J = compliance(u, sys)
        dPi, dLam = compute_sensitivities(dp, u, sys, state.rho)
        rho_full = np.ones(dp.n_cells)
        rho_full[: dp.n_design_cells] = state.rho
        dPi_f = filter_sensitivities(dPi, rho_full, spec, vols, dp.n_design_cells)
        rho_new, eta = oc_update(state.rho, dPi_f, dLam, controls.move, target,
                                 vols_design, model, controls.damping, controls.vol_tol)
        change = float(np.max(np.abs(rho_new - state.rho))) if rho_new.size else 0.0
        vol_actual = float(chi_from_rho(rho_new, model) @ vols_design / vols_design.sum())
        state.rho = rho_new
        state.iteration = i
        state.volume_target = target
        state.change = change
        state.eta = eta
        state.u, state.sys = u, sys
        state.compliance_history.append(J)
        state.history.append(dict(iter=i, volume_target=target, volume_actual=vol_actual,
                                  compliance=J, max_delta_rho=change, eta=eta))
        if callback is not None:
            callback(state)
        if i >= model.ramp_iters and change < controls.convergence_tol:
            break
    return state
