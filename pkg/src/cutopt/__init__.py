"""Density-based topology optimization on cut B-spline background grids."""

from .model import (
    MaterialParams, DensityModel, LoadSpec,
    lame_from_engineering, chi_from_rho, dchi_drho,
    constant_field, polynomial_field,
)
from .geometry import (
    BackgroundMesh, build_background_mesh, classify_elements,
    cut_volume_quadrature, region_volume_quadrature, ghost_faces,
    boundary_interface_quadrature, map_eval, map_inverse,
    PolarMap, BiquadraticMap, biquadratic_from_corners,
    MappedRegion, DesignGeometry, Geometry2D, Straight, MappedSide,
    discretize, GeometryError, OUTSIDE, CUT, INSIDE,
)
from .spline import SplineSpace, DensitySpace, strain_operator, uniform_bspline_1d

__version__ = "0.1.0"
