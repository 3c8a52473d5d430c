"""Sparse domination of multi-scale operators by convex-body products.

The engine follows the stopping-time recursion: John-reduce the tuple on
``Q0``, remove the level set ``Omega`` of the maximal functions inside
``3 Q0``, split the reduced components over the Whitney cubes of ``Omega``
and recurse on those cubes with the truncated operators ``S_P``.  The cubes
visited, with witnesses ``Q \\ Omega``, form the sparse family; the
certificate compares ``|<T f, g>|`` with ``sum |3Q| <<f>>_{3Q} . <<g>>_{3Q}``.

Weighted experiments, the sparse operator ``L~_r`` and the commutator forms
live here as well.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .convexbody import BodyOracle, body_dot, reducing_transform
from .dyadic import (
    CellMask,
    DyadicCube,
    GridSpec,
    SparseFamily,
    WhitneyDecomposition,
    cube_triple,
    maximal_function,
    verify_sparse,
    whitney_decompose,
)
from .gridfn import GridFunction, dual_exponent, lp_average, pairing
from .operators import BRSFamily, Constants, SingleScaleOp, budget as constant_budget
from .weights import MatrixWeight, _opnorm, a_r_constant, conjugate, rh_ts_constant

__all__ = [
    "DominationError",
    "DominationCertificate",
    "OmegaResult",
    "CZSplit",
    "body_product",
    "single_scale_dominate",
    "build_omega",
    "cz_decompose",
    "multiscale_dominate",
    "sparse_form",
    "sparse_form_constant",
    "origin_chains",
    "sparse_operator_matrix",
    "sparse_operator_Lr",
    "sparse_operator_norm",
    "power_weight_sweep",
    "weighted_norm",
    "weighted_exponents",
    "weighted_budget",
    "majorant_check",
    "weighted_experiment",
    "commutator_apply",
    "commutator_tuples",
    "commutator_forms",
    "commutator_check",
    "bmo_norm",
    "jn_check",
    "c_qr",
    "com_numbers",
    "com_numbers_check",
    "commutator_weighted_experiment",
]


class DominationError(RuntimeError):
    """A hard assertion of the recursion failed; ``diagnostic`` says where."""

    def __init__(self, message: str, diagnostic: dict | None = None):
        super().__init__(message)
        self.diagnostic = diagnostic or {}


def _nonzero(f: GridFunction, mask: CellMask) -> bool:
    return bool(np.any(f.values[mask.membership] != 0))


def body_product(f: GridFunction, g: GridFunction, region: CellMask, p: float, qd: float,
                 seed: int = 0):
    """``<<f>>_{L^p(region)} . <<g>>_{L^qd(region)}`` (certified lower value and the raw record)."""
    if not _nonzero(f, region) or not _nonzero(g, region):
        return 0.0, None
    dot = body_dot(BodyOracle(f, region, p), BodyOracle(g, region, qd), seed=seed)
    return dot.value, dot


# ---------------------------------------------------------------------------
# certificates
# ---------------------------------------------------------------------------


@dataclass
class DominationCertificate:
    family: SparseFamily
    lhs: float
    rhs: float
    rhs_plain: float
    constant: float | None = None
    budget: float | None = None
    passed: bool | None = None
    trace: list = field(default_factory=list)
    terms: list = field(default_factory=list)
    flags: list = field(default_factory=list)

    @property
    def ratio(self) -> float:
        if self.rhs > 0:
            return self.lhs / self.rhs
        return 0.0 if self.lhs <= 1e-14 else np.inf

    @property
    def sparse_valid(self) -> bool:
        return verify_sparse(self.family).valid

    def summary(self) -> dict:
        rep = verify_sparse(self.family)
        return {
            "lhs": self.lhs,
            "rhs": self.rhs,
            "rhs_plain": self.rhs_plain,
            "ratio": self.ratio,
            "constant": self.constant,
            "budget": self.budget,
            "passed": self.passed,
            "cubes": len(self.family),
            "sparse_valid": rep.valid,
            "min_witness_ratio": rep.min_ratio,
            "depth": max((t["depth"] for t in self.trace), default=0),
            "flags": list(self.flags),
        }


def _rhs_terms(cubes, f: GridFunction, g: GridFunction, p: float, qd: float, seed: int):
    grid = f.grid
    rhs = rhs_plain = 0.0
    terms = []
    for Q in cubes:
        trip = cube_triple(Q, grid)
        v3, _ = body_product(f, g, trip, p, qd, seed)
        v1, _ = body_product(f, g, grid.cube_mask(Q), p, qd, seed)
        rhs += trip.total_measure * v3
        rhs_plain += Q.volume * v1
        terms.append({"cube": str(Q), "level": Q.level, "dot3": v3, "dot": v1})
    return rhs, rhs_plain, terms


def single_scale_dominate(op: SingleScaleOp, f: GridFunction, g: GridFunction,
                          p: float, q: float, A_circ: float, tol_body: float = 0.05,
                          gamma: float = 0.5, seed: int = 0) -> DominationCertificate:
    """``|<T_j f, g>| <= 3^{d(1/q'-1/p')} A_circ n^{3/2} (1 + tol) sum |3Q| <<f>>_{3Q} . <<g>>_{3Q}``.

    The family is the tiling by cubes of side ``2^j`` meeting the support of
    ``f``, each its own witness.  The inequality is also checked cube by cube
    (``|<T_j[f 1_Q], g>|`` against its own term), which is the sharper form.
    """
    grid = f.grid
    if op.j < grid.cell_level:
        raise ValueError(f"scale {op.j} is finer than the cells (level {grid.cell_level})")
    d, n = grid.d, f.n
    qd, pd = dual_exponent(q), dual_exponent(p)
    const = 3.0 ** (d * (1.0 / qd - 1.0 / pd)) * A_circ * n ** 1.5 * (1.0 + tol_body)
    supp = CellMask(grid, f.tuple_norm() > 0)
    tiles = [Q for Q in grid.dyadic_cubes(op.j) if np.any(supp.membership[grid.cube_slices(Q)])]
    lhs = abs(pairing(op.apply(f), g))
    rhs = rhs_plain = 0.0
    terms, per_cube_ok = [], True
    for Q in tiles:
        mask = grid.cube_mask(Q)
        trip = cube_triple(Q, grid)
        local = abs(pairing(op.apply(f.restrict(mask)), g))
        v3, _ = body_product(f, g, trip, p, qd, seed)
        v1, _ = body_product(f, g, mask, p, qd, seed)
        term = trip.total_measure * v3
        ok = local <= const * term * (1 + 1e-12) + 1e-14
        per_cube_ok &= ok
        rhs += term
        rhs_plain += Q.volume * v1
        terms.append({"cube": str(Q), "local": local, "term": term, "ok": bool(ok)})
    fam = SparseFamily(gamma, [(Q, grid.cube_mask(Q)) for Q in tiles])
    passed = lhs <= const * rhs * (1 + 1e-12) + 1e-14
    cert = DominationCertificate(fam, lhs, rhs, rhs_plain, const, None, bool(passed and per_cube_ok),
                                 [{"depth": 0, "level": op.j, "tiles": len(tiles)}], terms)
    return cert


# ---------------------------------------------------------------------------
# level sets and the Calderon-Zygmund split
# ---------------------------------------------------------------------------


@dataclass
class OmegaResult:
    omega: CellMask
    E: CellMask
    multiplier_f: float
    multiplier_g: float
    thresholds_f: np.ndarray  # multiplier * ||f_i||_{L^p(Q0)}
    thresholds_g: np.ndarray
    measures_f: list
    measures_g: list

    @property
    def measure(self) -> float:
        return self.omega.measure


def threshold_multiplier(d: int, n: int, gamma: float, p: float) -> float:
    """``(100^d n / (1 - gamma))^{1/p}``."""
    return (100.0 ** d * n / (1.0 - gamma)) ** (1.0 / p)


def build_omega(f: GridFunction, g: GridFunction, Q0: DyadicCube, p: float, q: float,
                gamma: float, n: int | None = None, check: bool = True) -> OmegaResult:
    """Union of ``{M_p f_i > c_p ||f_i||_{L^p(Q0)}}`` and ``{M_q' g_i > c_q' ||g_i||_{L^q'(3Q0)}}`` inside ``3Q0``.

    ``M`` runs over all cell-aligned cubes touching the cell.  With
    ``check`` the measure bound ``|Omega| < (1 - gamma)|Q0|`` is asserted.
    """
    grid = f.grid
    n = f.n if n is None else n
    qd = dual_exponent(q)
    trip = cube_triple(Q0, grid)
    qmask = grid.cube_mask(Q0)
    cf = threshold_multiplier(grid.d, n, gamma, p)
    cg = threshold_multiplier(grid.d, n, gamma, qd)
    member = np.zeros(grid.shape, dtype=bool)
    tf, tg, mf, mg = [], [], [], []
    for i in range(f.n):
        thr = cf * lp_average(f, qmask, p, i)
        level = (maximal_function(f, p, "all_grid_cubes", component=i) > thr) & trip.membership
        tf.append(thr)
        mf.append(float(level.sum() * grid.cell_volume))
        member |= level
    for i in range(g.n):
        thr = cg * lp_average(g, trip, qd, i)
        level = (maximal_function(g, qd, "all_grid_cubes", component=i) > thr) & trip.membership
        tg.append(thr)
        mg.append(float(level.sum() * grid.cell_volume))
        member |= level
    omega = CellMask(grid, member)
    res = OmegaResult(omega, qmask.minus(omega), cf, cg, np.array(tf), np.array(tg), mf, mg)
    if check and not omega.measure < (1.0 - gamma) * Q0.volume:
        worst_f = int(np.argmax(mf)) if mf else None
        worst_g = int(np.argmax(mg)) if mg else None
        raise DominationError(
            f"|Omega| = {omega.measure:g} is not below (1 - gamma)|Q0| = {(1 - gamma) * Q0.volume:g} "
            f"on {Q0}; largest f level set: component {worst_f} ({max(mf, default=0):g}), "
            f"largest g level set: component {worst_g} ({max(mg, default=0):g})",
            {"cube": str(Q0), "measures_f": mf, "measures_g": mg, "omega": omega.measure},
        )
    return res


@dataclass
class CZSplit:
    good: GridFunction
    bad: dict  # DyadicCube -> GridFunction
    omega: CellMask
    thresholds: np.ndarray
    dilates: dict  # DyadicCube -> (lo, hi) cell index ranges of P_D
    reconstruction_error: float
    mean_zero_error: float
    sup_checks: list  # (cube, component, lhs, bound, ok)
    unchecked: list = field(default_factory=list)

    @property
    def cubes(self) -> list:
        return list(self.bad)

    @property
    def sup_ok(self) -> bool:
        return all(c[-1] for c in self.sup_checks)


def _dilate_to_good(grid: GridSpec, P: DyadicCube, good_idx: np.ndarray):
    """Smallest symmetric cell-aligned enlargement of ``P`` whose closure touches a good cell."""
    rng = np.array(grid.cube_range(P))  # (d, 2): [start, end)
    s, e = rng[:, 0], rng[:, 1]
    need = np.maximum(0, np.maximum(s - 1 - good_idx, good_idx - e))  # (cells, d)
    r = int(need.max(axis=1).min())
    return s - r, e + r


def cz_decompose(f: GridFunction, omega: OmegaResult | CellMask, whitney: WhitneyDecomposition,
                 Q0: DyadicCube, p: float, thresholds=None) -> CZSplit:
    """``f_i = h_i + sum_P b_{i,P}`` over the Whitney cubes meeting ``Q0``.

    With an ``OmegaResult`` the per-cube bound
    ``|avg_P f_i| <= (|P_D|/|P|)^{1/p} threshold_i`` is checked, where
    ``P_D`` is the smallest concentric cell-aligned enlargement of ``P``
    touching a cell of ``3Q0 \\ Omega``.
    """
    grid = f.grid
    if isinstance(omega, OmegaResult):
        res = omega
        mask = omega.omega
        thresholds = omega.thresholds_f if thresholds is None else thresholds
    else:
        res, mask = None, omega
    vals = f.values
    good = np.where(mask.membership[(...,) + (None, None)], 0.0, vals)
    bad, dilates, checks, unchecked = {}, {}, [], []
    q_slices = grid.cube_slices(Q0)
    if res is not None:
        trip = cube_triple(Q0, grid)
        good_idx = np.argwhere(trip.membership & ~mask.membership)
    mean_err = 0.0
    for P in whitney.cubes:
        if P.level >= Q0.level and P.contains(Q0):
            raise DominationError(f"Whitney cube {P} contains {Q0}; it must be a proper subcube",
                                  {"cube": str(P)})
        if not Q0.contains(P):
            continue
        sl = grid.cube_slices(P)
        avg = vals[sl].reshape(-1, f.n, f.m).mean(axis=0)
        b = np.zeros_like(vals)
        b[sl] = vals[sl] - avg
        good[sl] = avg
        bad[P] = f.with_values(b)
        scale = max(1.0, float(np.abs(vals[sl]).max()))
        mean_err = max(mean_err, float(np.abs(b[sl].reshape(-1, f.n, f.m).mean(axis=0)).max()) / scale)
        if res is None:
            continue
        if good_idx.size == 0:
            unchecked.append(str(P))
            continue
        lo, hi = _dilate_to_good(grid, P, good_idx)
        dilates[P] = (lo, hi)
        side = int((hi - lo)[0])
        if side > grid.n_per_axis:
            unchecked.append(str(P))
            continue
        ratio = (side / (2 ** (P.level - grid.cell_level))) ** grid.d
        mags = f.norm.norm(avg)
        for i in range(f.n):
            bound = ratio ** (1.0 / p) * thresholds[i]
            ok = bool(mags[i] <= bound * (1 + 1e-12) + 1e-300)
            checks.append((str(P), i, float(mags[i]), float(bound), ok))
    # cells of Q0 inside omega are all covered by Whitney cubes inside Q0
    h = f.with_values(good)
    total = good + sum((b.values for b in bad.values()), np.zeros_like(vals))
    scale = max(1.0, float(np.abs(vals).max()))
    rec = float(np.abs(total - vals)[q_slices].max() / scale) if vals.size else 0.0
    return CZSplit(h, bad, mask, np.asarray(thresholds if thresholds is not None else []),
                   dilates, rec, mean_err, checks, unchecked)


# ---------------------------------------------------------------------------
# multi-scale recursion
# ---------------------------------------------------------------------------


def multiscale_dominate(family: BRSFamily, f: GridFunction, g: GridFunction, Q0: DyadicCube,
                        p: float = 2.0, q: float = 2.0, gamma: float = 0.5,
                        constants: Constants | None = None, tol: float = 0.02,
                        john_M: int = 2048, seed: int = 0) -> DominationCertificate:
    """Sparse family for ``T = sum_{j=N1}^{N2} T_j`` on ``f`` supported in ``Q0`` (side ``2^N2``).

    Every node reduces the tuple, builds ``Omega`` (asserting the measure
    bound), splits over Whitney cubes and recurses on those inside ``Q0``
    with scale at least ``N1``.  The node at ``L(Q) = N1`` is the
    single-scale base case.  ``lhs``, ``rhs`` and ``rhs_plain`` are evaluated
    with the original tuples.
    """
    grid = f.grid
    if Q0.level != family.N2:
        raise ValueError(f"Q0 must have side 2^{family.N2}, got 2^{Q0.level}")
    if family.N1 < grid.cell_level:
        raise ValueError("scales finer than the cells are not representable")
    q0mask = grid.cube_mask(Q0)
    if np.any(f.values[~q0mask.membership] != 0):
        raise ValueError("f must be supported in Q0")
    qd = dual_exponent(q)
    n = f.n
    trace, flags = [], []

    def node(Q: DyadicCube, fq: GridFunction, gq: GridFunction, depth: int):
        qmask = grid.cube_mask(Q)
        if Q.level < family.N1 or not _nonzero(fq, qmask):
            return []
        if Q.level == family.N1:
            trace.append({"depth": depth, "cube": str(Q), "level": Q.level, "base": True})
            return [(Q, qmask)]
        trip = cube_triple(Q, grid)
        gq = gq.restrict(trip)
        rmap, fr, gr = reducing_transform(fq, qmask, p, gq, tol=tol, M=john_M, seed=seed)
        pair_err = abs(pairing(fq, gq) - pairing(fr, gr))
        om = build_omega(fr, gr, Q, p, q, gamma, n=n)
        wd = whitney_decompose(om.omega)
        cz = cz_decompose(fr, om, wd, Q, p)
        rec = {
            "depth": depth,
            "cube": str(Q),
            "level": Q.level,
            "base": False,
            "rank": rmap.rank,
            "john_passed": rmap.certificate.passed,
            "pairing_error": pair_err,
            "omega_measure": om.measure,
            "omega_ratio": om.measure / Q.volume,
            "E_ratio": om.E.measure / Q.volume,
            "whitney": len(wd.cubes),
            "whitney_inside": len(cz.bad),
            "cz_reconstruction": cz.reconstruction_error,
            "cz_mean_zero": cz.mean_zero_error,
            "cz_sup_ok": cz.sup_ok,
            "cz_unchecked": len(cz.unchecked),
        }
        trace.append(rec)
        if cz.unchecked:
            flags.append(f"sup bound not checkable on {len(cz.unchecked)} cube(s) under {Q}")
        entries = [(Q, om.E)]
        for P in sorted(cz.bad):
            entries.extend(node(P, fr.restrict(grid.cube_mask(P)), gr, depth + 1))
        return entries

    entries = node(Q0, f, g, 0)
    fam = SparseFamily(gamma, entries)
    lhs = abs(pairing(family.apply(f), g))
    rhs, rhs_plain, terms = _rhs_terms(fam.cubes, f, g, p, qd, seed)
    bud = constant_budget(constants, n) if constants is not None else None
    cert = DominationCertificate(fam, lhs, rhs, rhs_plain, None, bud, None, trace, terms, flags)
    cert.passed = bool(verify_sparse(fam).valid and all(
        t.get("base") or (t["E_ratio"] >= gamma and t["cz_sup_ok"]) for t in trace))
    return cert


# ---------------------------------------------------------------------------
# sparse forms and the sparse operator
# ---------------------------------------------------------------------------


def sparse_form(family: SparseFamily, f: GridFunction, g: GridFunction, p: float, qd: float,
                seed: int = 0) -> float:
    """``sum_Q |Q| <<f>>_{L^p(Q)} . <<g>>_{L^qd(Q)}``."""
    total = 0.0
    for Q, _ in family:
        v, _ = body_product(f, g, f.grid.cube_mask(Q), p, qd, seed)
        total += Q.volume * v
    return total


def _tuple_lr(f: GridFunction, r: float) -> float:
    return float((np.sum(f.tuple_norm() ** r) * f.grid.cell_volume) ** (1.0 / r))


def sparse_form_constant(family: SparseFamily, pairs, p: float, qd: float, r: float) -> dict:
    """Largest ``Lambda(f, g) / (||f||_r ||g||_r')`` over the given pairs."""
    rp = conjugate(r)
    ratios = []
    for f, g in pairs:
        den = _tuple_lr(f, r) * _tuple_lr(g, rp)
        if den > 0:
            ratios.append(sparse_form(family, f, g, p, qd) / den)
    return {"C": max(ratios, default=0.0), "ratios": ratios}


def origin_chains(grid: GridSpec, gamma: float = 0.5) -> SparseFamily:
    """Dyadic cubes with a corner at the origin, witnesses ``Q`` minus the next smaller one.

    The origin must be a vertex of the grid strictly inside the root.
    """
    cells = []
    for offs in np.ndindex(*(2,) * grid.d):
        idx = []
        for axis, o in enumerate(offs):
            k = int(round(-grid.origin[axis])) - 1 + o
            if not 0 <= k < grid.n_per_axis or not np.isclose(grid.cell_anchors(axis)[k + 1 - o], 0.0):
                raise ValueError("the origin must be an interior grid vertex")
            idx.append(k)
        cells.append(grid.cell_cube(idx))
    entries = []
    for cell in cells:
        prev = None
        level = cell.level
        while True:
            Q = cell.ancestor(level)
            if not grid.contains_cube(Q) or not np.all(np.isclose(
                    np.minimum(np.abs(Q.lower), np.abs(Q.upper)), 0.0)):
                break
            mask = grid.cube_mask(Q)
            E = mask if prev is None else mask.minus(grid.cube_mask(prev))
            entries.append((Q, E))
            prev = Q
            level += 1
    return SparseFamily(gamma, entries)


def sparse_operator_matrix(family: SparseFamily, W: MatrixWeight, r: float) -> np.ndarray:
    """Kernel ``K[y, x]`` of ``L~_r`` acting on cell values (``L~_r f = K |f|``)."""
    grid = W.grid
    N = grid.n_cells
    P = W.flat_power(1.0 / r)
    Pm = W.flat_power(-1.0 / r)
    idx = np.arange(N).reshape(grid.shape)
    K = np.zeros((N, N))
    for Q, _ in family:
        cells = idx[grid.cube_slices(Q)].ravel()
        # |W^{-1/r}(x) W^{1/r}(y)|_op for x, y in Q
        O = _opnorm(np.einsum("xij,yjk->yxik", Pm[cells], P[cells]))
        K[np.ix_(cells, cells)] += O / len(cells)
    return K


def sparse_operator_Lr(family: SparseFamily, W: MatrixWeight, r: float, f) -> np.ndarray:
    """``L~_r f(y) = sum_Q 1_Q(y) avg_{x in Q} |W^{-1/r}(x) W^{1/r}(y)|_op |f(x)|``."""
    K = sparse_operator_matrix(family, W, r)
    vals = np.abs(np.asarray(f, dtype=float)).reshape(-1)
    return (K @ vals).reshape(W.grid.shape)


def sparse_operator_norm(K: np.ndarray, r: float, iters: int = 500, rtol: float = 1e-12,
                         starts: int = 4, seed: int = 0) -> dict:
    """``||K||_{l^r -> l^r}`` for a nonnegative matrix by the nonlinear power method.

    Every iterate gives an attained ratio, so the value is a lower bound; for
    nonnegative matrices the iteration increases monotonically to the norm.
    """
    if np.any(K < 0):
        raise ValueError("the power method needs a nonnegative kernel")
    rp = conjugate(r)
    rng = np.random.default_rng(seed)
    best, hist = 0.0, []
    inits = [np.ones(K.shape[1])] + [rng.random(K.shape[1]) + 1e-3 for _ in range(starts - 1)]
    for x in inits:
        x = x / np.linalg.norm(x, r)
        val = 0.0
        for _ in range(iters):
            y = K @ x
            new = float(np.linalg.norm(y, r))
            z = K.T @ (y ** (r - 1.0))
            if not np.any(z):
                break
            x = z ** (rp - 1.0)
            x /= np.linalg.norm(x, r)
            if new <= val * (1 + rtol):
                val = max(val, new)
                break
            val = new
        hist.append(val)
        best = max(best, val)
    return {"norm": best, "starts": hist}


def power_weight_sweep(grid: GridSpec, r: float = 2.0, alphas=None, n: int = 2,
                       family: SparseFamily | None = None, gamma: float = 0.5) -> dict:
    """``||L~_r||`` against ``[W]_{A_r}`` for ``W = |x|^alpha I`` and its log-log slope."""
    from .weights import weight_generators

    alphas = np.linspace(0.0, 0.9, 8) if alphas is None else np.asarray(alphas, dtype=float)
    family = origin_chains(grid, gamma) if family is None else family
    rows = []
    for a in alphas:
        W = weight_generators("scalar_power", grid, n=n, r=r, alpha=float(a))
        A = a_r_constant(W, r)
        nrm = sparse_operator_norm(sparse_operator_matrix(family, W, r), r)["norm"]
        rows.append({"alpha": float(a), "A_r": A, "norm": nrm})
    x = np.log([row["A_r"] for row in rows])
    y = np.log([row["norm"] for row in rows])
    slope = float(np.polyfit(x, y, 1)[0]) if np.ptp(x) > 0 else float("nan")
    budget_exp = 1.0 + 1.0 / (r - 1.0) - 1.0 / r
    return {"rows": rows, "slope": slope, "exponent_budget": budget_exp}


# ---------------------------------------------------------------------------
# weighted norms
# ---------------------------------------------------------------------------


def _weighted_values(f: GridFunction, W: MatrixWeight, beta: float) -> GridFunction:
    if W.grid != f.grid or W.n != f.n:
        raise ValueError("weight and tuple must share grid and size")
    return f.with_values(np.einsum("...ij,...jm->...im", W.power(beta), f.values))


def weighted_norm(f: GridFunction, W: MatrixWeight, r: float) -> float:
    """``||W^{1/r} f||_{L^r}`` with ``|.|_{B^n}`` the Euclidean sum of component norms."""
    return _tuple_lr(_weighted_values(f, W, 1.0 / r), r)


def _check_chain(p: float, q: float, r: float):
    if not (1.0 <= p < r < q <= np.inf):
        raise ValueError(f"need 1 <= p < r < q <= inf, got p={p}, r={r}, q={q}")


def weighted_exponents(p: float, q: float, r: float) -> dict:
    """``t = r/p``, ``s = (q/r)'`` and the exponents ``t'/r + s/r'``, ``1/r + s/r'``."""
    _check_chain(p, q, r)
    t = r / p
    s = 1.0 if q == np.inf else conjugate(q / r)
    rp = conjugate(r)
    return {"t": t, "s": s, "exp_A": conjugate(t) / r + s / rp, "exp_RH": 1.0 / r + s / rp}


def weighted_budget(W: MatrixWeight, p: float, q: float, r: float) -> dict:
    e = weighted_exponents(p, q, r)
    A = a_r_constant(W, e["t"])
    RH = 1.0 if e["s"] == 1.0 else rh_ts_constant(W, e["t"], e["s"])
    return dict(e, A_t=A, RH=RH, budget=A ** e["exp_A"] * RH ** e["exp_RH"])


def majorant_check(f: GridFunction, g: GridFunction, W: MatrixWeight, Q: DyadicCube,
                   p: float, qd: float, r: float, seed: int = 0) -> dict:
    """``<<W^{-1/r} f>>_p . <<W^{1/r} g>>_qd`` against the double-average majorant on ``Q``."""
    grid = f.grid
    mask = grid.cube_mask(Q)
    fm = _weighted_values(f, W, -1.0 / r)
    gp = _weighted_values(g, W, 1.0 / r)
    if _nonzero(fm, mask) and _nonzero(gp, mask):
        dot = body_dot(BodyOracle(fm, mask, p), BodyOracle(gp, mask, qd), seed=seed)
        body = dot.upper if dot.upper is not None else dot.value
    else:
        body = 0.0
    cells = mask.membership.ravel()
    Pm = W.flat_power(-1.0 / r)[cells]
    P = W.flat_power(1.0 / r)[cells]
    O = _opnorm(np.einsum("xij,yjk->yxik", Pm, P))  # [y, x]
    fx = f.tuple_norm().ravel()[cells]
    gy = g.tuple_norm().ravel()[cells]
    inner = (O ** p * fx[None, :] ** p).mean(axis=1) ** (1.0 / p)
    maj = float(np.mean(gy ** qd * inner ** qd) ** (1.0 / qd))
    return {"body": float(body), "majorant": maj, "passed": bool(body <= maj * (1 + 1e-9) + 1e-14)}


def _random_tuple(grid: GridSpec, n: int, rng, support: CellMask | None = None, m: int = 1):
    vals = rng.standard_normal(grid.shape + (n, m))
    if support is not None:
        vals = np.where(support.membership[(...,) + (None, None)], vals, 0.0)
    return GridFunction(grid, vals)


def weighted_experiment(family: BRSFamily, W: MatrixWeight, p: float, q: float, r: float,
                        battery: int = 8, seed: int = 0, majorant_cubes=None) -> dict:
    """``||T f||_{L^r(W)} / (budget ||f||_{L^r(W)})`` over a seeded battery.

    ``budget = [W]_{A_t}^{t'/r + s/r'} [W]_{RH_{t,s}}^{1/r + s/r'}``.  The
    majorant inequality is checked on ``majorant_cubes`` (default: the dyadic
    cubes two levels below the root).
    """
    b = weighted_budget(W, p, q, r)
    grid = W.grid
    rng = np.random.default_rng(seed)
    ratios, plain = [], []
    for _ in range(battery):
        f = _random_tuple(grid, W.n, rng)
        Tf = family.apply(f)
        ratios.append(weighted_norm(Tf, W, r) / (b["budget"] * weighted_norm(f, W, r)))
        plain.append(_tuple_lr(Tf, r) / _tuple_lr(f, r))
    qd = dual_exponent(q)
    cubes = majorant_cubes if majorant_cubes is not None else grid.dyadic_cubes(max(grid.level - 2, grid.cell_level))
    maj = []
    for k, Q in enumerate(cubes):
        f = _random_tuple(grid, W.n, rng)
        g = _random_tuple(grid, W.n, rng)
        maj.append(majorant_check(f, g, W, Q, p, qd, r, seed + k))
    return dict(b, max_ratio=max(ratios, default=0.0), ratios=ratios, unweighted=plain,
                majorant=maj, majorant_ok=all(m["passed"] for m in maj))


# ---------------------------------------------------------------------------
# commutators
# ---------------------------------------------------------------------------


def _apply_field(B: np.ndarray, f: GridFunction, transpose: bool = False) -> GridFunction:
    M = np.swapaxes(B, -1, -2) if transpose else B
    return f.with_values(np.einsum("...ij,...jm->...im", M, f.values))


def commutator_apply(B: np.ndarray, family: BRSFamily, f: GridFunction) -> GridFunction:
    """``[B, T] f = B T f - T[B f]`` with ``B`` a cellwise ``n x n`` field."""
    return _apply_field(B, family.apply(f)) - family.apply(_apply_field(B, f))


def commutator_tuples(B: np.ndarray, f: GridFunction, g: GridFunction):
    """``F = (f, B f)``, ``G = (B^T g, -g)`` so that ``<[B,T] f, g> = <T F, G>``."""
    F = f.with_values(np.concatenate([f.values, _apply_field(B, f).values], axis=-2))
    G = g.with_values(np.concatenate([_apply_field(B, g, True).values, -g.values], axis=-2))
    return F, G


def _oscillation(B: np.ndarray, cells: np.ndarray) -> np.ndarray:
    flat = B.reshape(-1, *B.shape[-2:])[cells]
    return _opnorm(flat - flat.mean(axis=0))


def commutator_forms(family: SparseFamily, B: np.ndarray, f: GridFunction, g: GridFunction,
                     p: float, qd: float) -> tuple[float, float]:
    """``(A, A*)``: oscillation of ``B`` weighted against ``f`` (resp. ``g``) on each cube."""
    grid = f.grid
    idx = np.arange(grid.n_cells).reshape(grid.shape)
    fx = f.tuple_norm().ravel()
    gy = g.tuple_norm().ravel()
    A = As = 0.0
    for Q, _ in family:
        cells = idx[grid.cube_slices(Q)].ravel()
        osc = _oscillation(B, cells)
        fp = np.mean(fx[cells] ** p) ** (1.0 / p)
        gq = np.mean(gy[cells] ** qd) ** (1.0 / qd)
        A += Q.volume * np.mean(osc ** p * fx[cells] ** p) ** (1.0 / p) * gq
        As += Q.volume * np.mean(osc ** qd * gy[cells] ** qd) ** (1.0 / qd) * fp
    return float(A), float(As)


def commutator_check(family: BRSFamily, B: np.ndarray, f: GridFunction, g: GridFunction,
                     Q0: DyadicCube, p: float = 2.0, q: float = 2.0, gamma: float = 0.5,
                     seed: int = 0) -> dict:
    """Dominate ``<T F, G>`` and measure ``C = |<[B,T] f, g>| / (A + A*)`` on that family."""
    lhs = pairing(commutator_apply(B, family, f), g)
    F, G = commutator_tuples(B, f, g)
    cert = multiscale_dominate(family, F, G, Q0, p, q, gamma, seed=seed)
    identity_err = abs(lhs - pairing(family.apply(F), G))
    A, As = commutator_forms(cert.family, B, f, g, p, dual_exponent(q))
    den = A + As
    if den > 0:
        C = abs(lhs) / den
    else:
        C = 0.0 if abs(lhs) <= 1e-12 else np.inf
    return {"lhs": abs(lhs), "A": A, "A_star": As, "C": C, "identity_error": identity_err,
            "sparse_valid": cert.sparse_valid, "certificate": cert}


def bmo_norm(b: np.ndarray, grid: GridSpec, cubes=None) -> float:
    """``sup_Q avg_Q |b - <b>_Q|`` over dyadic cubes; matrix fields use the operator norm."""
    b = np.asarray(b, dtype=float)
    mat = b.ndim == grid.d + 2
    field_ = b if mat else b[..., None, None]
    idx = np.arange(grid.n_cells).reshape(grid.shape)
    cubes = grid.all_dyadic_cubes() if cubes is None else cubes
    best = 0.0
    for Q in cubes:
        cells = idx[grid.cube_slices(Q)].ravel()
        best = max(best, float(_oscillation(field_, cells).mean()))
    return best


def jn_check(b: np.ndarray, grid: GridSpec, a_values=(2, 4, 8)) -> dict:
    """Measured ``C`` in ``(avg_Q |b - <b>_Q|^a)^{1/a} <= C a ||b||_BMO`` for each ``a``."""
    b = np.asarray(b, dtype=float)
    bmo = bmo_norm(b, grid)
    idx = np.arange(grid.n_cells).reshape(grid.shape)
    field_ = b if b.ndim == grid.d + 2 else b[..., None, None]
    out = {}
    for a in a_values:
        worst = 0.0
        for Q in grid.all_dyadic_cubes():
            cells = idx[grid.cube_slices(Q)].ravel()
            worst = max(worst, float(np.mean(_oscillation(field_, cells) ** a) ** (1.0 / a)))
        out[a] = worst / (a * bmo) if bmo > 0 else 0.0
    return {"bmo": bmo, "C": out, "C_max": max(out.values(), default=0.0)}


def c_qr(q: float, r: float) -> float:
    """``C_{q,r} = (q - r) / (r (q - 1) + q (r - 1))``."""
    if not 1.0 < r < q:
        raise ValueError("need 1 < r < q")
    return (q - r) / (r * (q - 1.0) + q * (r - 1.0))


def com_numbers(q: float, r: float, theta: float) -> float:
    """``r' - q' u (r s (1 + theta) / (q' u))'`` with ``s = (q/r)'``, ``u = 1 + C_{q,r} theta``."""
    if not 1.0 < r < q < np.inf:
        raise ValueError("need 1 < r < q < inf")
    s = q / (q - r)
    u = 1.0 + c_qr(q, r) * theta
    qd = conjugate(q)
    return conjugate(r) - qd * u * conjugate(r * s * (1.0 + theta) / (qd * u))


def _com_numbers_closed(q: float, r: float, theta: float) -> float:
    C = c_qr(q, r)
    u = 1.0 + C * theta
    N = theta * C * q * (r - 1.0) * (1.0 - theta)
    D = r * (q - 1.0) * (1.0 + theta) - u * (q - r)
    return conjugate(r) * N / D


def com_numbers_check(q: float = 4.0, r: float = 2.0, thetas=None) -> dict:
    """Evaluate the gap on a grid of ``theta`` in ``(0, 1/2)``; both the direct and the factored form."""
    thetas = np.linspace(0.0, 0.5, 102)[1:-1] if thetas is None else np.asarray(thetas)
    direct = np.array([com_numbers(q, r, t) for t in thetas])
    closed = np.array([_com_numbers_closed(q, r, t) for t in thetas])
    ratio = direct / thetas
    return {
        "thetas": thetas,
        "values": direct,
        "closed_form_error": float(np.max(np.abs(direct - closed))),
        "c": float(ratio.min()),
        "passed": bool(ratio.min() > 0),
    }


def commutator_weighted_experiment(family: BRSFamily, W: MatrixWeight, B: np.ndarray,
                                   p: float, q: float, r: float, battery: int = 8,
                                   seed: int = 0) -> dict:
    """``||[B,T] f||_{L^r(W)}`` against ``max ||B_ij||_BMO ([W]^s [RH]^s + [W]^{1/(t-1)})`` times the weighted budget."""
    b = weighted_budget(W, p, q, r)
    grid = W.grid
    bmo = max(bmo_norm(B[..., i, j], grid) for i in range(B.shape[-2]) for j in range(B.shape[-1]))
    A, RH, t, s = b["A_t"], b["RH"], b["t"], b["s"]
    com_budget = bmo * (A ** s * RH ** s + A ** (1.0 / (t - 1.0))) * b["budget"]
    rng = np.random.default_rng(seed)
    ratios = []
    for _ in range(battery):
        f = _random_tuple(grid, W.n, rng)
        num = weighted_norm(commutator_apply(B, family, f), W, r)
        if com_budget > 0:
            ratios.append(num / (com_budget * weighted_norm(f, W, r)))
        else:
            ratios.append(0.0 if num <= 1e-12 else np.inf)
    return dict(b, bmo=bmo, commutator_budget=com_budget, max_ratio=max(ratios, default=0.0), ratios=ratios)
