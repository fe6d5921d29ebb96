"""Material model, SIMP density law and load data.

Everything in here is a pure value type or a pure function.  Material
stiffness is always expressed through the Lame pair (mu_hat, lambda_hat);
the physical coefficients at a point are chi*mu_hat and chi*lambda_hat
where chi is the local material density.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class MaterialParams:
    """Isotropic linear-elastic material, nondimensional units."""

    E: float
    nu: float
    mu_hat: float
    lambda_hat: float


def lame_from_engineering(E: float, nu: float) -> MaterialParams:
    """Lame parameters from Young's modulus and Poisson's ratio.

    mu_hat = E / (2 (1 + nu)),  lambda_hat = E nu / ((1 + nu)(1 - 2 nu)).
    The incompressible limit nu -> 0.5 is rejected: the formulation assumes
    lambda_hat / mu_hat stays bounded.
    """
    if not E > 0:
        raise ValueError(f"Young's modulus must be positive, got E={E}")
    if not 0.0 <= nu < 0.5:
        raise ValueError(
            f"Poisson's ratio must satisfy 0 <= nu < 0.5 (no incompressibility), got nu={nu}"
        )
    mu = E / (2.0 * (1.0 + nu))
    lam = E * nu / ((1.0 + nu) * (1.0 - 2.0 * nu))
    return MaterialParams(E=E, nu=nu, mu_hat=mu, lambda_hat=lam)


def plane_stress_lambda(mu_hat: float, lambda_hat: float) -> float:
    """Effective lambda for a plane-stress reduction of the 3D law."""
    return 2.0 * mu_hat * lambda_hat / (lambda_hat + 2.0 * mu_hat)


@dataclass(frozen=True)
class DensityModel:
    """SIMP density law chi = chi_min + rho^q (1 - chi_min) plus run constants.

    chi_min keeps the system definite where rho = 0, q penalizes intermediate
    densities, delta_vol is the final volume fraction and ramp_iters the
    number of iterations over which the volume constraint is tightened.
    """

    chi_min: float = 1e-6
    q: float = 3.0
    delta_vol: float = 0.5
    ramp_iters: int = 100

    def __post_init__(self):
        if not 0.0 < self.chi_min < 1.0:
            raise ValueError(f"chi_min must lie in (0, 1), got {self.chi_min}")
        if self.q < 1.0:
            raise ValueError(f"SIMP exponent must satisfy q >= 1, got {self.q}")
        if not 0.0 < self.delta_vol <= 1.0:
            raise ValueError(f"delta_vol must lie in (0, 1], got {self.delta_vol}")
        if self.ramp_iters < 0:
            raise ValueError(f"ramp_iters must be >= 0, got {self.ramp_iters}")


def _check_rho(rho):
    rho = np.asarray(rho, dtype=float)
    if np.any(rho < 0.0) or np.any(rho > 1.0):
        raise ValueError("density rho must lie in [0, 1]")
    return rho


def chi_from_rho(rho, model: DensityModel):
    """Physical density chi = chi_min + rho^q (1 - chi_min), elementwise."""
    rho = _check_rho(rho)
    out = model.chi_min + rho**model.q * (1.0 - model.chi_min)
    return out if out.ndim else float(out)


def dchi_drho(rho, model: DensityModel):
    """Derivative of chi_from_rho: q rho^(q-1) (1 - chi_min), elementwise."""
    rho = _check_rho(rho)
    out = model.q * rho ** (model.q - 1.0) * (1.0 - model.chi_min)
    return out if out.ndim else float(out)


@dataclass
class LoadSpec:
    """Problem loads before density scaling.

    body_force maps subdomain id to a vector field f_hat(points) -> (n, 2),
    or None.  neumann_tractions maps a boundary tag to a traction field
    g_hat(points) -> (n, 2).  Applied loads are chi * f_hat and chi * g_hat;
    in nondesign regions chi = 1 so the scaling is a no-op there.
    """

    body_force: dict = field(default_factory=dict)
    neumann_tractions: dict = field(default_factory=dict)


def constant_field(vec) -> callable:
    """Vector field equal to `vec` everywhere; points are (n, 2)."""
    vec = np.asarray(vec, dtype=float).reshape(2)

    def f(points):
        points = np.asarray(points, dtype=float)
        return np.broadcast_to(vec, (points.shape[0], 2)).copy()

    return f


def polynomial_field(coeffs_x, coeffs_y) -> callable:
    """Vector field with polynomial components sum_k c_k x^i_k y^j_k.

    Each coefficient list holds triples (c, i, j).
    """
    cx = [(float(c), int(i), int(j)) for c, i, j in coeffs_x]
    cy = [(float(c), int(i), int(j)) for c, i, j in coeffs_y]

    def f(points):
        points = np.asarray(points, dtype=float)
        x, y = points[:, 0], points[:, 1]
        out = np.zeros((points.shape[0], 2))
        for c, i, j in cx:
            out[:, 0] += c * x**i * y**j
        for c, i, j in cy:
            out[:, 1] += c * x**i * y**j
        return out

    return f
