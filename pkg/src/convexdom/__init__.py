"""Convex-body sparse domination laboratory."""
from .dyadic import (
    CellMask,
    DyadicCube,
    GridSpec,
    SparseFamily,
    conditional_expectation,
    cube_triple,
    maximal_function,
    verify_sparse,
    whitney_decompose,
)
from .gridfn import GridFunction, NormTag, lp_average, pairing
from .convexbody import BodyOracle, body_dot, john_ellipsoid, reducing_transform, support
from .weights import MatrixWeight, a_r_constant, rh_ts_constant, weight_generators
from .operators import BRSFamily, SingleScaleOp, certify, decompose_multiplier
from .domination import (
    DominationCertificate,
    multiscale_dominate,
    single_scale_dominate,
    sparse_form,
)

__version__ = "0.1.0"
