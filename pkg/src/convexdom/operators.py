"""Multi-scale operators built from dilates of one compactly supported kernel.

``T_j = Dil_{2^-j} o (K *) o Dil_{2^j}``: the data are dilated onto a grid of
cells ``2^(c - j)``, refined to the kernel resolution when needed, convolved
with the unit-scale kernel, dilated back and averaged onto the data cells.
Every step is linear and exact on step functions, so each ``T_j`` is stored
as a dense matrix on the data grid; adjoints are transposes and ``L^2``
operator norms are singular values.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from math import comb

import numpy as np

from .dyadic import DyadicCube, GridSpec, _block_average
from .gridfn import (
    GridFunction,
    NormTag,
    Stencil,
    convolve,
    dilate,
    lorentz_q1_norm,
    lp_norm,
    project,
    resample,
    weak_lp_norm,
)

__all__ = [
    "SingleScaleOp",
    "BRSFamily",
    "Constants",
    "identity_kernel",
    "bump_kernel",
    "random_kernel",
    "certify",
    "fit_kappa",
    "budget",
    "regularity_decay_check",
    "young_bound",
    "MultiplierSpec",
    "decompose_multiplier",
    "psi0",
    "psi_ell",
    "theta_profile",
    "theta_hat",
    "phi0",
]


# ---------------------------------------------------------------------------
# kernels
# ---------------------------------------------------------------------------


def _kernel_grid(d: int, level: int) -> GridSpec:
    # root [-1, 1)^d at cells 2^level
    return GridSpec.centered(d, level, 1)


def _inside_ball(grid: GridSpec) -> np.ndarray:
    """Cells whose closure lies in the closed unit ball."""
    h = grid.cell_width
    far = 0.0
    for axis, c in enumerate(grid.cell_centers()):
        far = far + (np.abs(c) + h / 2) ** 2
    return far <= 1.0 + 1e-12


def identity_kernel(d: int = 1, level: int = 0, m: int = 1) -> GridFunction:
    """Mass one on the cell at the origin: unit-scale convolution is the identity."""
    grid = _kernel_grid(d, min(level, 0))
    vals = np.zeros(grid.shape + (m, m))
    idx = tuple(-o for o in grid.origin)
    vals[idx] = np.eye(m) / grid.cell_volume
    return GridFunction(grid, vals)


def bump_kernel(d: int = 1, level: int = -4, m: int = 1, radius: float = 1.0,
                normalize: bool = True) -> GridFunction:
    """``exp(-1/(1 - |x/radius|^2))`` at cell centres, restricted to cells inside the unit ball."""
    grid = _kernel_grid(d, level)
    r2 = sum(c ** 2 for c in grid.cell_centers()) / radius ** 2
    prof = np.where(r2 < 1, np.exp(-1.0 / np.maximum(1e-300, 1.0 - np.minimum(r2, 1 - 1e-15))), 0.0)
    prof = np.where(_inside_ball(grid), prof, 0.0)
    if normalize:
        prof = prof / (prof.sum() * grid.cell_volume)
    return GridFunction(grid, prof[..., None, None] * np.eye(m))


def random_kernel(d: int = 1, level: int = -2, m1: int = 1, m2: int = 1, seed: int = 0) -> GridFunction:
    rng = np.random.default_rng(seed)
    grid = _kernel_grid(d, level)
    vals = rng.standard_normal(grid.shape + (m2, m1))
    vals *= _inside_ball(grid)[..., None, None]
    return GridFunction(grid, vals)


def _matrix_opnorm(mats: np.ndarray, tag: NormTag) -> np.ndarray:
    """Operator norm ``(R^m1, tag) -> (R^m2, tag)`` of a stack of matrices."""
    if tag is NormTag.EUCLIDEAN:
        if mats.shape[-1] == 1 or mats.shape[-2] == 1:
            return np.sqrt(np.sum(mats ** 2, axis=(-2, -1)))
        return np.linalg.svd(mats, compute_uv=False)[..., 0]
    if tag is NormTag.SUM:
        return np.abs(mats).sum(axis=-2).max(axis=-1)
    return np.abs(mats).sum(axis=-1).max(axis=-1)


# ---------------------------------------------------------------------------
# single scale operators
# ---------------------------------------------------------------------------


class SingleScaleOp:
    """``T_j`` with unit-scale stencil ``stencil``."""

    def __init__(self, stencil: Stencil, j: int, tag: NormTag = NormTag.EUCLIDEAN,
                 transpose_of: "SingleScaleOp | None" = None):
        self.stencil = stencil
        self.j = int(j)
        self.tag = tag
        self._dense: dict = {}
        # on grids finer than the kernel the refined stencil does not commute with
        # reflection, so the adjoint borrows the transposed matrix of its parent
        self._parent = transpose_of

    @property
    def m1(self) -> int:
        return self.stencil.mats.shape[2]

    @property
    def m2(self) -> int:
        return self.stencil.mats.shape[1]

    def t1_ok(self) -> bool:
        return _stencil_in_ball(self.stencil)

    def dense(self, grid: GridSpec) -> np.ndarray:
        """Matrix of shape ``(N, m2, N, m1)`` acting on cell values."""
        if grid not in self._dense:
            if self._parent is not None:
                self._dense[grid] = np.ascontiguousarray(np.transpose(self._parent.dense(grid), (2, 3, 0, 1)))
            else:
                self._dense[grid] = _scale_matrix(self.stencil, self.j, grid)
        return self._dense[grid]

    def matrix(self, grid: GridSpec) -> np.ndarray:
        N = grid.n_cells
        return self.dense(grid).reshape(N * self.m2, N * self.m1)

    def apply(self, f: GridFunction) -> GridFunction:
        return _apply_dense(self.dense(f.grid), f, self.m2)

    def adjoint(self) -> "SingleScaleOp":
        if self._parent is not None:
            return self._parent
        return SingleScaleOp(self.stencil.adjoint(), self.j, self.tag.dual(), transpose_of=self)

    def adjoint_apply(self, g: GridFunction) -> GridFunction:
        T = self.dense(g.grid)
        Tt = np.transpose(T, (2, 3, 0, 1))
        return _apply_dense(Tt, g, self.m1)

    def norm22(self, grid: GridSpec) -> float:
        return float(np.linalg.norm(self.matrix(grid), 2))


def _stencil_in_ball(st: Stencil) -> bool:
    if len(st.offsets) == 0:
        return True
    # offset k is a shift by k cells in the discrete convolution; the test is
    # symmetric in k so adjoints of admissible kernels stay admissible
    h = 2.0 ** st.level
    nz = np.any(st.mats != 0, axis=(1, 2))
    off = st.offsets[nz].astype(float) * h
    return bool(np.all(np.sqrt((off ** 2).sum(axis=1)) <= 1.0 + 1e-12))


def _cell_stencil(st: Stencil, j: int, d: int, cell_level: int):
    """Response of ``T_j`` to a unit mass on the cell ``[0, h)^d``, on a local grid.

    Returns ``(S, center)`` with ``S[center + delta]`` the ``m2 x m1`` block
    coupling a cell to the cell ``delta`` cells before it.
    """
    h = 2.0 ** cell_level
    ext = (st.reach() + 2.0 ** st.level * np.sqrt(d)) * 2.0 ** j
    R = int(np.ceil(ext / h)) + 1
    n = 1 << int(np.ceil(np.log2(2 * R + 2)))
    loc = GridSpec(d, cell_level, cell_level + int(np.log2(n)), (-(n // 2),) * d)
    m1 = st.mats.shape[2]
    basis = np.zeros(loc.shape + (m1, m1))
    basis[(n // 2,) * d] = np.eye(m1)
    fd = dilate(GridFunction(loc, basis), j)
    level = min(fd.grid.cell_level, st.level)
    if level < fd.grid.cell_level:
        fd = resample(fd, fd.grid.with_cell_level(level))
    out = convolve(fd, st.refine(level))
    back = GridFunction(out.grid.rescaled(-j), out.values, out.norm)
    res = project(back, loc).values  # (..., k1, k2)
    return np.swapaxes(res, -1, -2), n // 2


def _scale_matrix(st: Stencil, j: int, grid: GridSpec) -> np.ndarray:
    """Dense ``(N, m2, N, m1)`` matrix of ``T_j`` on ``grid``.

    ``T_j`` commutes with translations by whole cells and the truncation to
    the root only discards outputs, so every entry is a value of the local
    cell stencil.
    """
    if grid.d != st.d:
        raise ValueError("kernel and grid dimensions differ")
    if j < grid.cell_level:
        raise ValueError(f"scale {j} is finer than the data cells at level {grid.cell_level}")
    d = grid.d
    S, center = _cell_stencil(st, j, d, grid.cell_level)
    n = S.shape[0]
    N = grid.n_cells
    m2, m1 = S.shape[-2], S.shape[-1]
    coords = np.indices(grid.shape).reshape(d, -1).T
    diff = coords[:, None, :] - coords[None, :, :] + center
    valid = np.all((diff >= 0) & (diff < n), axis=-1)
    T = np.zeros((N, N, m2, m1))
    T[valid] = S[tuple(diff[valid].T)]
    return np.ascontiguousarray(np.transpose(T, (0, 2, 1, 3)))


def _apply_dense(T: np.ndarray, f: GridFunction, m_out: int) -> GridFunction:
    grid = f.grid
    N = grid.n_cells
    fv = f.values.reshape(N, f.n, f.m)
    out = np.einsum("xayb,yib->xia", T, fv)
    return GridFunction(grid, out.reshape(grid.shape + (f.n, m_out)), f.norm)


# ---------------------------------------------------------------------------
# families
# ---------------------------------------------------------------------------


class BRSFamily:
    """``T = sum_{j=N1}^{N2} T_j`` sharing one unit-scale kernel."""

    def __init__(self, kernel, N1: int, N2: int, tag: NormTag | None = None):
        if N1 > N2:
            raise ValueError("need N1 <= N2")
        if isinstance(kernel, GridFunction):
            self.kernel = kernel
            st = Stencil.from_kernel(kernel)
            tag = kernel.norm if tag is None else tag
        else:
            self.kernel = None
            st = kernel
        self.stencil = st
        self.tag = tag or NormTag.EUCLIDEAN
        self.N1, self.N2 = int(N1), int(N2)
        self.ops = {j: SingleScaleOp(st, j, self.tag) for j in range(self.N1, self.N2 + 1)}
        if not self.ops[self.N1].t1_ok():
            raise ValueError("T1 violated: kernel support leaves the closed unit ball")

    @property
    def scales(self) -> range:
        return range(self.N1, self.N2 + 1)

    def t1_ok(self) -> bool:
        return all(op.t1_ok() for op in self.ops.values())

    def sub(self, N1: int, N2: int) -> "BRSFamily":
        fam = BRSFamily(self.stencil, N1, N2, self.tag)
        for j in fam.scales:
            if j in self.ops:
                fam.ops[j] = self.ops[j]
        return fam

    def adjoint(self) -> "BRSFamily":
        fam = BRSFamily(self.stencil.adjoint(), self.N1, self.N2, self.tag.dual())
        fam.ops = {j: op.adjoint() for j, op in self.ops.items()}
        return fam

    def _range(self, scales):
        if scales is None:
            return list(self.scales)
        lo, hi = scales
        return [j for j in self.scales if lo <= j <= hi]

    def dense(self, grid: GridSpec, scales=None) -> np.ndarray:
        out = None
        for j in self._range(scales):
            T = self.ops[j].dense(grid)
            out = T.copy() if out is None else out + T
        if out is None:
            N = grid.n_cells
            m1, m2 = self.stencil.mats.shape[2], self.stencil.mats.shape[1]
            out = np.zeros((N, m2, N, m1))
        return out

    def apply(self, f: GridFunction, scales=None) -> GridFunction:
        return _apply_dense(self.dense(f.grid, scales), f, self.stencil.mats.shape[1])

    def adjoint_apply(self, g: GridFunction, scales=None) -> GridFunction:
        T = np.transpose(self.dense(g.grid, scales), (2, 3, 0, 1))
        return _apply_dense(T, g, self.stencil.mats.shape[2])

    def partial_sum(self, f: GridFunction, Q: DyadicCube) -> GridFunction:
        """``S_Q f = sum_{N1 <= j <= L(Q)} T_j[f 1_Q]``."""
        fq = f.restrict(f.grid.cube_mask(Q))
        return self.apply(fq, (self.N1, Q.level))


# ---------------------------------------------------------------------------
# certification of the structural constants
# ---------------------------------------------------------------------------


@dataclass
class Constants:
    """Structural constants; ``tags`` maps each name to exact | upper-bound | empirical."""

    p: float
    q: float
    kappa: float
    A_circ: float
    A_p: float
    A_q: float
    B: float
    tags: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    @property
    def C(self) -> float:
        """``A(p) + A(q) + A_circ log(2 + B / A_circ)``."""
        if self.A_circ == 0:
            return self.A_p + self.A_q
        return self.A_p + self.A_q + self.A_circ * np.log(2.0 + self.B / self.A_circ)


def _young_exponent(p: float, q: float) -> float:
    inv = 1.0 + 1.0 / q - 1.0 / p
    if not 0 < inv <= 1:
        raise ValueError("Young exponent needs p <= q")
    return 1.0 / inv


def _kernel_ls(st: Stencil, s: float, tag: NormTag) -> float:
    vol = 2.0 ** (st.level * st.d)
    mags = _matrix_opnorm(st.mats, tag)
    if s == np.inf:
        return float(mags.max(initial=0.0))
    return float((np.sum(mags ** s) * vol) ** (1.0 / s))


def young_bound(family: BRSFamily, p: float, q: float, j: int | None = None) -> float:
    """``||k||_{L^s}`` with ``1 + 1/q = 1/s + 1/p``; at scale ``j`` times ``2^{-jd(1/p-1/q)}``."""
    b = _kernel_ls(family.stencil, _young_exponent(p, q), family.tag)
    if j is None:
        return b
    return b * 2.0 ** (-j * family.stencil.d * (1.0 / p - 1.0 / q))


def _shift_matrix(grid: GridSpec, H) -> np.ndarray:
    """Matrix of ``Delta_H`` (cell offsets) on flat cell values."""
    N = grid.n_cells
    idx = np.arange(N).reshape(grid.shape)
    D = -np.eye(N)
    src = [slice(None)] * grid.d
    dst = [slice(None)] * grid.d
    n = grid.n_per_axis
    for axis, s in enumerate(H):
        if abs(s) >= n:
            return D
        if s >= 0:
            dst[axis], src[axis] = slice(0, n - s), slice(s, n)
        else:
            dst[axis], src[axis] = slice(-s, n), slice(0, n + s)
    rows = idx[tuple(dst)].ravel()
    cols = idx[tuple(src)].ravel()
    D[rows, cols] += 1.0
    return D


def _offsets_within(d: int, radius_cells: int):
    r = radius_cells
    rng = np.arange(-r, r + 1)
    pts = np.array(np.meshgrid(*[rng] * d, indexing="ij")).reshape(d, -1).T
    nrm = np.sqrt((pts ** 2).sum(axis=1))
    return pts[(nrm > 0) & (nrm <= r)]


def _regularity_exact(family: BRSFamily, grid: GridSpec, kappa: float, adjoint: bool):
    """``sup_h |h|^-kappa sup_j ||Dil T_j o Delta_h||_{2->2}`` on data-grid offsets."""
    best, fits = 0.0, []
    for j in family.scales:
        op = family.ops[j]
        T = op.matrix(grid)
        if adjoint:
            T = T.T
        m = op.m2 if adjoint else op.m1
        radius = int(round(2.0 ** (j - grid.cell_level)))
        for H in _offsets_within(grid.d, min(radius, grid.n_per_axis - 1)):
            D = np.kron(_shift_matrix(grid, H), np.eye(m))
            h = np.linalg.norm(H) * 2.0 ** (grid.cell_level - j)
            val = np.linalg.norm(T @ D, 2)
            fits.append((h, val))
            best = max(best, h ** (-kappa) * val)
    return best, fits


def _regularity_young(family: BRSFamily, p: float, q: float, kappa: float, adjoint: bool):
    st = family.stencil.adjoint() if adjoint else family.stencil
    s = _young_exponent(p, q) if not adjoint else _young_exponent(1 / (1 - 1 / q) if q > 1 else np.inf,
                                                                   1 / (1 - 1 / p) if p > 1 else np.inf)
    tag = family.tag.dual() if adjoint else family.tag
    best = 0.0
    r = int(round(2.0 ** (-st.level)))
    lookup = {tuple(o): m for o, m in zip(st.offsets, st.mats)}
    vol = 2.0 ** (st.level * st.d)
    for H in _offsets_within(st.d, r):
        keys = set(lookup) | {tuple(np.array(o) - H) for o in lookup}
        zero = np.zeros_like(st.mats[0])
        diff = np.array([lookup.get(tuple(np.array(k) + H), zero) - lookup.get(k, zero) for k in keys])
        mags = _matrix_opnorm(diff, tag)
        val = float((np.sum(mags ** s) * vol) ** (1.0 / s)) if s != np.inf else float(mags.max())
        h = np.linalg.norm(H) * 2.0 ** st.level
        best = max(best, h ** (-kappa) * val)
    return best


def _battery(grid: GridSpec, m: int, size: int, seed: int, tag: NormTag) -> list[GridFunction]:
    rng = np.random.default_rng(seed)
    out = []
    N = grid.n_per_axis
    for k in range(size):
        kind = k % 4
        v = np.zeros(grid.shape + (1, m))
        if kind == 0:
            idx = tuple(rng.integers(0, N, grid.d))
            v[idx] = rng.standard_normal(m)
        elif kind == 1:
            lo = rng.integers(0, N, grid.d)
            hi = np.minimum(lo + rng.integers(1, max(2, N // 2), grid.d), N)
            v[tuple(slice(a, b) for a, b in zip(lo, hi))] = rng.standard_normal(m)
        elif kind == 2:
            v = rng.standard_normal(grid.shape + (1, m))
        else:
            v = rng.standard_normal(grid.shape + (1, m)) * (rng.random(grid.shape) < 0.1)[..., None, None]
        if not np.any(v):
            v[(0,) * grid.d] = 1.0
        out.append(GridFunction(grid, v, tag))
    return out


def certify(family: BRSFamily, grid: GridSpec, p: float = 2.0, q: float = 2.0,
            kappa: float = 0.5, battery: int = 24, seed: int = 0) -> Constants:
    """Certify ``A_circ``, ``B``, ``A(p)`` and ``A(q)`` on ``grid``.

    ``A_circ`` and ``B`` are exact at ``p = q = 2`` with Euclidean values
    (largest singular values of the scale matrices) and Young upper bounds
    otherwise.  ``A(p)``, ``A(q)`` are empirical maxima of weak-type and
    restricted strong-type ratios over a seeded battery, with the triangle
    bound ``sum_j ||T_j||`` recorded next to them.
    """
    if kappa <= 0:
        raise ValueError("kappa must be positive")
    if p > q:
        raise ValueError("need p <= q")
    tags, extra = {}, {}
    exact = p == 2 and q == 2 and family.tag is NormTag.EUCLIDEAN
    young = young_bound(family, p, q)
    extra["A_circ_young"] = young
    if exact:
        A_circ = max(family.ops[j].norm22(grid) for j in family.scales)
        tags["A_circ"] = "exact"
        B3, fits = _regularity_exact(family, grid, kappa, False)
        B4, _ = _regularity_exact(family, grid, kappa, True)
        B = max(B3, B4)
        tags["B"] = "exact"
        extra["T3"], extra["T4"], extra["regularity_samples"] = B3, B4, fits
    else:
        A_circ = young
        tags["A_circ"] = "upper-bound"
        B3 = _regularity_young(family, p, q, kappa, False)
        B4 = _regularity_young(family, p, q, kappa, True)
        B = max(B3, B4)
        tags["B"] = "upper-bound"
        extra["T3"], extra["T4"] = B3, B4

    # endpoint bounds for the full sum
    fam_tag = family.tag
    inputs = _battery(grid, family.stencil.mats.shape[2], battery, seed, fam_tag)
    emp_p = emp_q = 0.0
    for f in inputs:
        Tf = family.apply(f)
        emp_p = max(emp_p, weak_lp_norm(Tf, p, 0) / lp_norm(f, p, 0))
        emp_q = max(emp_q, lp_norm(Tf, q, 0) / lorentz_q1_norm(f, q, 0))
    tri_p = len(family.scales) * young_bound(family, p, p)
    tri_q = len(family.scales) * young_bound(family, q, q)
    tags["A_p"] = tags["A_q"] = "empirical"
    extra.update(A_p_empirical=emp_p, A_q_empirical=emp_q, A_p_triangle=tri_p, A_q_triangle=tri_q)
    return Constants(p, q, kappa, A_circ, emp_p, emp_q, B, tags, extra)


def fit_kappa(samples) -> float:
    """Log-log slope of the worst ``||Dil T_j o Delta_h||`` against ``|h|`` over ``|h| <= 1/2``."""
    best: dict = {}
    for h, v in samples:
        key = round(float(h), 12)
        best[key] = max(best.get(key, 0.0), v)
    hs = np.array(sorted(k for k in best if k <= 0.5 and best[k] > 0))
    if len(hs) < 2:
        return float("nan")
    return float(np.polyfit(np.log2(hs), np.log2([best[h] for h in hs]), 1)[0])


def budget(constants: Constants, n: int, upper: bool = True) -> float:
    """``C n^{3/2 + 1/p + 1/q'}``; ``upper`` uses the triangle bounds for ``A(p), A(q)``."""
    c = constants
    Ap = c.extra.get("A_p_triangle", c.A_p) if upper else c.A_p
    Aq = c.extra.get("A_q_triangle", c.A_q) if upper else c.A_q
    C = Ap + Aq + (c.A_circ * np.log(2.0 + c.B / c.A_circ) if c.A_circ > 0 else 0.0)
    qd = c.q / (c.q - 1.0)
    return C * n ** (1.5 + 1.0 / c.p + 1.0 / qd)


# ---------------------------------------------------------------------------
# regularity decay
# ---------------------------------------------------------------------------


def _expectation_matrix(grid: GridSpec, level: int) -> np.ndarray:
    N = grid.n_cells
    eye = np.eye(N).reshape(grid.shape + (N,))
    return _block_average(eye, grid, level).reshape(N, N)


def regularity_decay_check(family: BRSFamily, grid: GridSpec, j: int | None = None,
                           ks=range(1, 6), vartheta: float | None = None,
                           kappa: float = 0.5, p: float = 2.0, q: float = 2.0) -> dict:
    """``||T_j (I - E_{k-j})||_{2->2}`` for ``k`` in ``ks`` and its fitted log2 slope.

    ``E_{k-j}`` averages over cubes of side ``2^(j-k)``; when those are no
    coarser than the cells ``I - E`` vanishes, so the norm is reported as
    zero (resolution floor) and left
    out of the fit.  The assertion threshold is ``-vartheta + 0.1`` with
    ``vartheta = min(kappa, 1/p)`` by default.
    """
    if p != 2 or q != 2:
        raise ValueError("exact decay norms are available at p = q = 2")
    j = family.N1 if j is None else j
    T = family.ops[j].matrix(grid)
    m = family.ops[j].m1
    N = grid.n_cells
    norms, used = {}, []
    for k in ks:
        level = j - k
        if level <= grid.cell_level:
            norms[k] = 0.0
            continue
        P = np.kron(np.eye(N) - _expectation_matrix(grid, level), np.eye(m))
        norms[k] = float(np.linalg.norm(T @ P, 2))
        used.append(k)
    th = min(kappa, 1.0 / p) if vartheta is None else vartheta
    pos = [k for k in used if norms[k] > 0]
    slope = float(np.polyfit(pos, np.log2([norms[k] for k in pos]), 1)[0]) if len(pos) >= 2 else float("nan")
    return {
        "j": j,
        "norms": norms,
        "slope": slope,
        "threshold": -th + 0.1,
        "passed": bool(np.isfinite(slope) and slope <= -th + 0.1),
        "resolution_floor": [k for k in ks if k not in used],
    }


# ---------------------------------------------------------------------------
# Fourier multiplier demo (d = 1)
# ---------------------------------------------------------------------------


def _smoothstep(t: np.ndarray) -> np.ndarray:
    """C-infinity transition: 0 for t <= 0, 1 for t >= 1."""
    t = np.clip(t, 0.0, 1.0)
    a = np.where(t > 0, np.exp(-1.0 / np.maximum(t, 1e-300)), 0.0)
    b = np.where(t < 1, np.exp(-1.0 / np.maximum(1.0 - t, 1e-300)), 0.0)
    return a / (a + b)


def psi0(x) -> np.ndarray:
    """Smooth, equal to 1 on ``|x| <= 1/4`` and 0 on ``|x| >= 1/2``."""
    ax = np.abs(np.asarray(x, dtype=float))
    return 1.0 - _smoothstep((ax - 0.25) / 0.25)


def psi_ell(x, ell: int) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if ell == 0:
        return psi0(x)
    return psi0(2.0 ** (-ell) * x) - psi0(2.0 ** (-ell + 1) * x)


def phi0(xi) -> np.ndarray:
    """Dyadic partition profile: supported in ``1/2 < |xi| < 2``, ``sum_k phi0(2^-k xi) = 1``."""
    a = np.abs(np.asarray(xi, dtype=float))
    beta = lambda t: 1.0 - _smoothstep((t - 1.0) / 1.0)  # 1 on [0,1], 0 beyond 2
    return beta(a) - beta(2.0 * a)


_B_RADIUS = 0.2


def _bump(x):
    x = np.asarray(x, dtype=float) / _B_RADIUS
    return np.where(np.abs(x) < 1, np.exp(-1.0 / np.maximum(1e-300, 1.0 - np.minimum(x * x, 1 - 1e-15))), 0.0)


def theta_profile(x, K: int = 6, step: float = 1.0 / 12.0) -> np.ndarray:
    """``K``-th centred difference of a bump on ``|x| < 1/5``; support ``|x| < 1/5 + K step/2``."""
    x = np.asarray(x, dtype=float)
    out = np.zeros_like(x)
    for i in range(K + 1):
        out += (-1) ** i * comb(K, i) * _bump(x + (K / 2 - i) * step)
    return out


def _bump_hat(xi, samples: int = 4001):
    """Fourier transform ``int b(x) e^{-2 pi i x xi} dx`` by the trapezoid rule (b is even)."""
    xi = np.asarray(xi, dtype=float)
    x = np.linspace(-_B_RADIUS, _B_RADIUS, samples)
    w = _bump(x) * (x[1] - x[0])
    flat = xi.ravel()
    out = np.empty_like(flat)
    for start in range(0, flat.size, 4096):
        chunk = flat[start:start + 4096]
        out[start:start + 4096] = np.cos(2 * np.pi * np.outer(chunk, x)) @ w
    return out.reshape(xi.shape)


def theta_hat(xi, K: int = 6, step: float = 1.0 / 12.0) -> np.ndarray:
    """``(2 i sin(pi step xi))^K b^(xi)``, real for even ``K``."""
    xi = np.asarray(xi, dtype=float)
    if K % 2:
        raise ValueError("use an even number of differences so theta is even")
    return (-1) ** (K // 2) * (2.0 * np.sin(np.pi * step * xi)) ** K * _bump_hat(xi)


@dataclass
class MultiplierSpec:
    """Symbol ``m = sum_{k=n1}^{n2} phi0(2^-k xi)`` (or a callable) on a periodic grid."""

    n1: int = 0
    n2: int = 3
    ell_max: int = 8
    length: float = 1024.0
    dx: float = 1.0 / 64.0
    K: int = 6
    step: float = 1.0 / 12.0
    symbol: object = None

    def m(self, xi) -> np.ndarray:
        if self.symbol is not None:
            return self.symbol(np.asarray(xi, dtype=float))
        xi = np.asarray(xi, dtype=float)
        return sum(phi0(2.0 ** (-k) * xi) for k in range(self.n1, self.n2 + 1))


def _centered_axis(N: int, dx: float) -> np.ndarray:
    return (np.arange(N) - N // 2) * dx


def decompose_multiplier(spec: MultiplierSpec, tests: int = 4, seed: int = 0,
                         t_samples: int = 8, moment_check: bool = True) -> dict:
    """Multi-scale decomposition of ``T_m`` into kernels ``K^l_k`` (d = 1, p = q = 2).

    Returns the partition residual, the reconstruction error on band-limited
    inputs, the telescoping error, per-``l`` quantities ``a_circ_l = a_l``
    (equal at ``p = q = 2``) and the partial sums of both series.
    """
    N = int(round(spec.length / spec.dx))
    dx = spec.dx
    x = _centered_axis(N, dx)
    xi = np.fft.fftfreq(N, dx)
    ks = list(range(spec.n1 - 1, spec.n2 + 2))

    # partition sum_k phi(2^-k xi) theta^(2^-k xi) = 1 on the support of m
    th, phi = {}, {}
    for k in ks:
        p0 = phi0(2.0 ** (-k) * xi)
        # theta^ only matters on the support of phi0(2^-k .)
        th[k] = np.zeros(N)
        th[k][p0 > 0] = theta_hat(2.0 ** (-k) * xi[p0 > 0], spec.K, spec.step)
        safe = np.where(p0 > 0, th[k], 1.0)
        if np.any((p0 > 0) & (np.abs(th[k]) < 1e-14)):
            raise ValueError("theta^ vanishes on the support of phi0")
        phi[k] = np.where(p0 > 0, p0 / safe, 0.0)
    mvals = spec.m(xi)
    active = np.abs(mvals) > 0
    part = sum(phi[k] * th[k] for k in ks)
    resid = np.abs(part - 1.0)[active]
    worst = float(resid.max()) if resid.size else 0.0
    if worst > 1e-3:
        bad = xi[active][np.argmax(resid)]
        raise ValueError(f"partition of unity fails: residual {worst:.3e} at xi = {bad:.6g}")

    # kernels in frequency: F[ F^-1[phi(2^-k .) m] Psi_l(2^k .) ] theta^(2^-k .)
    def to_space(F):
        return np.fft.fftshift(np.fft.ifft(F)) / dx

    def to_freq(g):
        return np.fft.fft(np.fft.ifftshift(g)) * dx

    # the partition only holds where some phi0(2^-k .) lives
    total = np.zeros(N, dtype=complex)
    per_ell = {}
    for ell in range(spec.ell_max + 1):
        acc = np.zeros(N, dtype=complex)
        for k in ks:
            base = to_space(phi[k] * mvals)
            cut = psi_ell(2.0 ** k * x, ell)
            acc += to_freq(base * cut) * th[k]
        per_ell[ell] = acc
        total += acc

    # telescoping of the spatial cutoffs
    tel = 0.0
    for L in range(1, spec.ell_max + 1):
        lhs = sum(psi_ell(x, l) for l in range(1, L + 1))
        rhs = psi0(2.0 ** (-L) * x) - psi0(x)
        tel = max(tel, float(np.max(np.abs(lhs - rhs))))

    # reconstruction on band-limited inputs
    rng = np.random.default_rng(seed)
    recon = 0.0
    band = active & (np.abs(mvals - 1.0) < 1e-12) if spec.symbol is None else active
    for _ in range(tests):
        coef = np.where(band, rng.standard_normal(N) + 1j * rng.standard_normal(N), 0.0)
        coef = (coef + np.conj(coef[(-np.arange(N)) % N])) / 2  # real input
        f = np.fft.ifft(coef)
        Tm = np.fft.ifft(mvals * coef)
        Td = np.fft.ifft(total * coef)
        recon = max(recon, float(np.linalg.norm(Td - Tm) / np.linalg.norm(f)))

    a = _a_quantities(spec, t_samples)
    B_circ = np.cumsum([a[l] for l in sorted(a)])
    B_sum = np.cumsum([a[l] * (1 + l) for l in sorted(a)])
    moments = _theta_moments(spec) if moment_check else None
    return {
        "partition_residual": worst,
        "reconstruction_error": recon,
        "telescoping_error": tel,
        "a_circ": a,
        "a": dict(a),
        "B_circ_partial": B_circ.tolist(),
        "B_partial": B_sum.tolist(),
        "B_circ_tail": float(B_circ[-1] - B_circ[-2]) if len(B_circ) > 1 else 0.0,
        "theta_moments": moments,
        "moment_order": spec.K,
        "ks": ks,
        "support_radius": {l: _support_radius(per_ell[l], xi, x, dx) for l in per_ell},
    }


def _a_quantities(spec: MultiplierSpec, t_samples: int) -> dict:
    """``a_l = sup_t || F[F^-1[phi0 m(t .)] Psi_l] ||_inf`` (the ``M^{2,2}`` norm is the sup norm)."""
    L = max(2.0 ** (spec.ell_max + 2), 64.0)
    dx = 1.0 / 16.0
    N = int(round(L / dx))
    x = _centered_axis(N, dx)
    xi = np.fft.fftfreq(N, dx)
    lo, hi = spec.n1 - 2, spec.n2 + 2
    ts = 2.0 ** np.linspace(lo, hi, (hi - lo) * t_samples + 1)
    out = {}
    base_phi = phi0(xi)
    kernels = [np.fft.fftshift(np.fft.ifft(base_phi * spec.m(t * xi))) / dx for t in ts]
    for ell in range(spec.ell_max + 1):
        cut = psi_ell(x, ell)
        out[ell] = max(float(np.max(np.abs(np.fft.fft(np.fft.ifftshift(k * cut)) * dx))) for k in kernels)
    return out


def _theta_moments(spec: MultiplierSpec) -> list[float]:
    h = spec.step / 64.0
    x = np.arange(-int(0.5 / h), int(0.5 / h) + 1) * h
    th = theta_profile(x, spec.K, spec.step)
    scale = np.sum(np.abs(th)) * h
    return [float(abs(np.sum(x ** k * th) * h) / scale) for k in range(spec.K)]


def _support_radius(F: np.ndarray, xi, x, dx) -> float:
    g = np.abs(np.fft.fftshift(np.fft.ifft(F)) / dx)
    if g.max() == 0:
        return 0.0
    return float(np.max(np.abs(x[g > 1e-6 * g.max()])))
