"""Matrix weights: Muckenhoupt and reverse Hoelder constants, reducing matrices.

Weights are cellwise symmetric positive definite fields.  Every constant is a
supremum over a finite cube family (all dyadic subcubes of the root by
default) and, for direction-dependent quantities, over a finite direction
grid; the latter are lower estimates of the true suprema.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .convexbody import Ellipsoid, JohnCertificate, john_ellipsoid
from .dyadic import DyadicCube, GridSpec, _block_average

__all__ = [
    "MatrixWeight",
    "cube_family",
    "direction_grid",
    "spd_power",
    "a_r_constant",
    "scalar_a_r",
    "scalar_weight",
    "scalar_sup_a_r",
    "rh_ts_constant",
    "scalar_rh",
    "scalar_a_infinity",
    "reducing_matrices",
    "reducing_reverse_holder",
    "dual_weight",
    "duality_report",
    "cordes_check",
    "weight_generators",
    "lambda_exponent",
    "delta_sigma",
    "conjugate",
]

EIG_FLOOR = 1e-12


def conjugate(r: float) -> float:
    """Hoelder conjugate ``r' = r / (r - 1)``."""
    if r == 1:
        return np.inf
    if r == np.inf:
        return 1.0
    return r / (r - 1.0)


def spd_power(M: np.ndarray, beta: float) -> np.ndarray:
    """``M^beta`` for a stack of SPD matrices via symmetric eigendecomposition."""
    M = np.asarray(M, dtype=float)
    lam, V = np.linalg.eigh((M + np.swapaxes(M, -1, -2)) / 2)
    if np.any(lam <= EIG_FLOOR):
        raise ValueError(f"matrix not positive definite (eigenvalue {lam.min():.3e})")
    return np.einsum("...ij,...j,...kj->...ik", V, lam ** beta, V)


def _opnorm(M: np.ndarray) -> np.ndarray:
    if M.shape[-1] == 1 and M.shape[-2] == 1:
        return np.abs(M[..., 0, 0])
    return np.linalg.svd(M, compute_uv=False)[..., 0]


class MatrixWeight:
    """``values`` has shape ``grid.shape + (n, n)``."""

    def __init__(self, grid: GridSpec, values):
        vals = np.array(values, dtype=float)
        if vals.shape[: grid.d] != grid.shape or vals.ndim != grid.d + 2:
            raise ValueError("weight values must have shape grid.shape + (n, n)")
        if vals.shape[-1] != vals.shape[-2]:
            raise ValueError("weight values must be square")
        if not np.allclose(vals, np.swapaxes(vals, -1, -2), atol=1e-12, rtol=1e-10):
            raise ValueError("weight values must be symmetric")
        vals = (vals + np.swapaxes(vals, -1, -2)) / 2
        lam, V = np.linalg.eigh(vals)
        if np.any(lam <= EIG_FLOOR):
            raise ValueError(
                f"weight is not positive definite (minimum eigenvalue {lam.min():.3e})"
            )
        vals.setflags(write=False)
        self.grid = grid
        self.values = vals
        self._lam, self._V = lam, V

    @property
    def n(self) -> int:
        return self.values.shape[-1]

    @classmethod
    def scalar(cls, grid: GridSpec, w) -> "MatrixWeight":
        w = np.asarray(w, dtype=float)
        return cls(grid, w[..., None, None])

    def power(self, beta: float) -> np.ndarray:
        return np.einsum("...ij,...j,...kj->...ik", self._V, self._lam ** beta, self._V)

    def flat_power(self, beta: float) -> np.ndarray:
        return self.power(beta).reshape(-1, self.n, self.n)

    def is_scalar_multiple_of_identity(self) -> bool:
        off = self.values - np.einsum("...ii->...", self.values)[..., None, None] / self.n * np.eye(self.n)
        return bool(np.allclose(off, 0.0))


# ---------------------------------------------------------------------------
# cube families and direction grids
# ---------------------------------------------------------------------------


def _flat_indices(grid: GridSpec, slices) -> np.ndarray:
    idx = np.arange(grid.n_cells).reshape(grid.shape)
    return idx[slices].ravel()


def cube_family(grid: GridSpec, cubes=None, shifted: bool = False) -> list[np.ndarray]:
    """Flat cell indices of each cube of the family.

    ``cubes`` defaults to all dyadic subcubes of the root; ``shifted`` adds
    the cubes translated by half their side (those that fit in the root).
    """
    if cubes is None:
        cubes = grid.all_dyadic_cubes()
    out = [_flat_indices(grid, grid.cube_slices(c)) for c in cubes]
    if shifted:
        n = grid.n_per_axis
        for level in range(grid.cell_level + 1, grid.level):
            w = 2 ** (level - grid.cell_level)
            starts = range(w // 2, n - w + 1, w)
            for st in itertools.product(starts, repeat=grid.d):
                out.append(_flat_indices(grid, tuple(slice(s, s + w) for s in st)))
    return out


def direction_grid(n: int, count: int | None = None, seed: int = 0) -> np.ndarray:
    """Unit directions: ``count`` half-circle angles (default 64) for ``n = 2``,
    a Fibonacci lattice (default 256) for ``n = 3``, Gaussian samples otherwise."""
    if n == 1:
        return np.ones((1, 1))
    if n == 2:
        count = count or 64
        t = np.pi * np.arange(count) / count
        return np.stack([np.cos(t), np.sin(t)], axis=1)
    count = count or 256
    if n == 3:
        k = np.arange(count) + 0.5
        z = 1.0 - 2.0 * k / count
        r = np.sqrt(1.0 - z * z)
        phi = np.pi * (1.0 + np.sqrt(5.0)) * k
        return np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((count, n))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


# ---------------------------------------------------------------------------
# Muckenhoupt constants
# ---------------------------------------------------------------------------


def a_r_constant(W: MatrixWeight, r: float, cubes=None, shifted: bool = False,
                 return_argmax: bool = False):
    """``sup_Q avg_x (avg_y |W^{1/r}(x) W^{-1/r}(y)|^{r'})^{r/r'}`` over the family."""
    if not 1.0 < r < np.inf:
        raise ValueError("r must lie in (1, inf)")
    rp = conjugate(r)
    P = W.flat_power(1.0 / r)
    Q = W.flat_power(-1.0 / r)
    fam = cube_family(W.grid, cubes, shifted)
    # all pairwise operator norms, raised to r'
    O = _opnorm(np.einsum("xij,yjk->xyik", P, Q)) ** rp
    best, arg = -np.inf, None
    for k, idx in enumerate(fam):
        inner = O[np.ix_(idx, idx)].mean(axis=1) ** (r / rp)
        val = float(inner.mean())
        if val > best:
            best, arg = val, k
    return (best, fam[arg]) if return_argmax else best


def scalar_a_r(w: np.ndarray, r: float, families: list[np.ndarray]) -> float:
    """Classical ``sup_Q avg(w) avg(w^{-1/(r-1)})^{r-1}``."""
    w = np.asarray(w, dtype=float).ravel()
    sig = w ** (-1.0 / (r - 1.0))
    return float(max(w[i].mean() * sig[i].mean() ** (r - 1.0) for i in families))


def scalar_weight(W: MatrixWeight, r: float, y) -> np.ndarray:
    """``|W^{1/r}(x) y|^r`` per cell."""
    y = np.asarray(y, dtype=float)
    if not np.any(y):
        raise ValueError("direction must be nonzero")
    return np.linalg.norm(W.power(1.0 / r) @ y, axis=-1) ** r


def scalar_sup_a_r(W: MatrixWeight, r: float, directions=None, cubes=None,
                   shifted: bool = False) -> tuple[float, np.ndarray]:
    """``sup_y [W^{Sc}_{r,y}]_{A_r}`` over a direction grid (a lower estimate)."""
    dirs = direction_grid(W.n) if directions is None else np.atleast_2d(directions)
    fam = cube_family(W.grid, cubes, shifted)
    P = W.flat_power(1.0 / r)
    vals = np.linalg.norm(np.einsum("xij,kj->kxi", P, dirs), axis=-1) ** r
    best, arg = -np.inf, None
    for k, w in enumerate(vals):
        v = scalar_a_r(w, r, fam)
        if v > best:
            best, arg = v, dirs[k]
    return best, arg


def scalar_rh(w: np.ndarray, s: float, families: list[np.ndarray]) -> float:
    """``sup_Q (avg w^s)^{1/s} / avg w``."""
    w = np.asarray(w, dtype=float).ravel()
    return float(max((w[i] ** s).mean() ** (1.0 / s) / w[i].mean() for i in families))


def rh_ts_constant(W: MatrixWeight, t: float, s: float, cubes=None, directions=None,
                   shifted: bool = False) -> float:
    """``sup_y sup_Q (avg |W^{1/t} y|^{ts})^{1/s} / avg |W^{1/t} y|^t``."""
    if t < 1 or s <= 1:
        raise ValueError("need t >= 1 and s > 1")
    dirs = direction_grid(W.n) if directions is None else np.atleast_2d(directions)
    fam = cube_family(W.grid, cubes, shifted)
    P = W.flat_power(1.0 / t)
    vals = np.linalg.norm(np.einsum("xij,kj->kxi", P, dirs), axis=-1) ** t
    return max(scalar_rh(w, s, fam) for w in vals)


def scalar_a_infinity(w: np.ndarray, grid: GridSpec) -> float:
    """Fujii-Wilson constant ``sup_Q int_Q M(w 1_Q) / w(Q)`` over dyadic cubes.

    ``M`` is the dyadic maximal operator localized to ``Q``; the maximum of
    the averages over dyadic levels up to ``level(Q)`` gives it for every
    ``Q`` at once.
    """
    w = np.asarray(w, dtype=float).reshape(grid.shape)
    running = w.copy()
    best = 1.0
    for level in range(grid.cell_level, grid.level + 1):
        if level > grid.cell_level:
            running = np.maximum(running, _block_average(w, grid, level))
        for cube in grid.dyadic_cubes(level):
            sl = grid.cube_slices(cube)
            best = max(best, float(running[sl].sum() / w[sl].sum()))
    return best


# ---------------------------------------------------------------------------
# reducing matrices
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ReducingPair:
    A: np.ndarray
    B: np.ndarray
    cert_A: JohnCertificate
    cert_B: JohnCertificate

    @property
    def product_norm(self) -> float:
        return float(np.linalg.norm(self.A @ self.B, 2))


def _cube_indices(W: MatrixWeight, Q) -> np.ndarray:
    if Q is None:
        return np.arange(W.grid.n_cells)
    if isinstance(Q, DyadicCube):
        return _flat_indices(W.grid, W.grid.cube_slices(Q))
    return np.asarray(Q)


def _average_norm(M: np.ndarray, r: float):
    """Support oracle ``x -> (avg_y |M(y) x|^r)^{1/r}``."""
    def h(X):
        X = np.atleast_2d(X)
        v = np.linalg.norm(np.einsum("yij,kj->kyi", M, X), axis=-1)
        return (v ** r).mean(axis=1) ** (1.0 / r)
    return h


def reducing_matrices(W: MatrixWeight, Q, r: float, tol: float = 0.02, M: int = 4096,
                      seed: int = 0) -> ReducingPair:
    """Reducing matrices of ``rho_A(x) = (avg_Q |W^{1/r} x|^r)^{1/r}`` and
    ``rho_B(x) = (avg_Q |W^{-1/r} x|^{r'})^{1/r'}``.

    Each is the John shape ``S`` of the body with support function ``rho``,
    so ``|S x| <= rho(x) <= sqrt(n) (1 + tol) |S x|`` on the certificate
    directions.
    """
    idx = _cube_indices(W, Q)
    rp = conjugate(r)
    hA = _average_norm(W.flat_power(1.0 / r)[idx], r)
    hB = _average_norm(W.flat_power(-1.0 / r)[idx], rp)
    EA, cA = john_ellipsoid(hA, W.n, tol=tol, M=M, seed=seed)
    EB, cB = john_ellipsoid(hB, W.n, tol=tol, M=M, seed=seed)
    return ReducingPair(EA.shape, EB.shape, cA, cB)


def reducing_reverse_holder(W: MatrixWeight, r: float, delta: float, cubes=None,
                            tol: float = 0.02) -> float:
    """``sup_Q (avg_Q |A_Q^{-1} W^{1/r}|^{r(1+delta)})^{1/(r(1+delta))}``."""
    P = W.flat_power(1.0 / r)
    e = r * (1.0 + delta)
    best = 0.0
    for cube in (W.grid.all_dyadic_cubes() if cubes is None else cubes):
        idx = _cube_indices(W, cube)
        A = reducing_matrices(W, cube, r, tol=tol, M=512).A
        ops = _opnorm(np.linalg.solve(A[None], P[idx]))
        best = max(best, float((ops ** e).mean() ** (1.0 / e)))
    return best


def dual_weight(W: MatrixWeight, r: float) -> MatrixWeight:
    """``Sigma = W^{-r'/r}``."""
    return MatrixWeight(W.grid, W.power(-conjugate(r) / r))


def duality_report(W: MatrixWeight, r: float, cubes=None) -> dict:
    """``[W]_{A_r}^{1/r}`` against ``[Sigma]_{A_{r'}}^{1/r'}``."""
    rp = conjugate(r)
    a = a_r_constant(W, r, cubes) ** (1.0 / r)
    b = a_r_constant(dual_weight(W, r), rp, cubes) ** (1.0 / rp)
    return {"W_side": a, "Sigma_side": b, "ratio": a / b}


def cordes_check(A, B, alpha: float, slack: float = 1e-9) -> dict:
    """``|A^alpha B^alpha|_op <= |AB|_op^alpha`` for SPD ``A, B``, ``0 < alpha < 1``."""
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie in (0, 1)")
    Aa, Ba = spd_power(A, alpha), spd_power(B, alpha)
    lhs = float(np.linalg.norm(Aa @ Ba, 2))
    rhs = float(np.linalg.norm(np.asarray(A) @ np.asarray(B), 2) ** alpha)
    return {"lhs": lhs, "rhs": rhs, "passed": lhs <= rhs + slack}


# ---------------------------------------------------------------------------
# fixtures
# ---------------------------------------------------------------------------


def _rotation(n: int, angle: float = np.pi / 6) -> np.ndarray:
    U = np.eye(n)
    c, s = np.cos(angle), np.sin(angle)
    U[:2, :2] = [[c, -s], [s, c]]
    return U


def weight_generators(kind: str, grid: GridSpec, n: int = 2, r: float = 2.0,
                      seed: int = 0, **params) -> MatrixWeight:
    """Weight fixtures.

    ``identity``; ``scalar_power`` (``|x - x0|^alpha I``); ``rotated_diagonal``
    (``U diag(|x - x0|^alpha, |x - x0|^{-beta}, 1, ...) U^T``); ``random``
    (cellwise ``exp`` of smoothed symmetric noise of size ``amplitude``).
    Power exponents must lie in the classical range ``(-d (r - 1), d)``.
    """
    d = grid.d
    if kind == "identity":
        return MatrixWeight(grid, np.broadcast_to(np.eye(n), grid.shape + (n, n)))
    if kind in ("scalar_power", "rotated_diagonal"):
        x0 = np.asarray(params.get("x0", np.zeros(d)), dtype=float)
        centers = grid.cell_centers()
        dist = np.sqrt(sum((c - x) ** 2 for c, x in zip(centers, x0)))
        lo, hi = -d * (r - 1.0), float(d)

        def admissible(name, a):
            if not lo < a < hi:
                raise ValueError(f"{name}={a} outside the admissible interval ({lo}, {hi})")

        if kind == "scalar_power":
            alpha = float(params.get("alpha", 0.5))
            admissible("alpha", alpha)
            return MatrixWeight(grid, dist[..., None, None] ** alpha * np.eye(n))
        alpha = float(params.get("alpha", 0.5))
        beta = float(params.get("beta", 0.5))
        admissible("alpha", alpha)
        admissible("-beta", -beta)
        U = _rotation(n, params.get("angle", np.pi / 6))
        diag = np.ones(grid.shape + (n,))
        diag[..., 0] = dist ** alpha
        if n > 1:
            diag[..., 1] = dist ** (-beta)
        vals = np.einsum("ij,...j,kj->...ik", U, diag, U)
        return MatrixWeight(grid, vals)
    if kind == "random":
        amp = float(params.get("amplitude", 1.0))
        smooth = int(params.get("smoothness", 1))
        rng = np.random.default_rng(seed)
        noise = rng.standard_normal(grid.shape + (n, n))
        noise = (noise + np.swapaxes(noise, -1, -2)) / 2
        for axis in range(d):
            for _ in range(smooth):
                noise = (noise + np.roll(noise, 1, axis=axis)) / 2
        lam, V = np.linalg.eigh(amp * noise)
        vals = np.einsum("...ij,...j,...kj->...ik", V, np.exp(lam), V)
        return MatrixWeight(grid, vals)
    raise ValueError(f"unknown weight kind {kind!r}")


# ---------------------------------------------------------------------------
# exponent arithmetic
# ---------------------------------------------------------------------------


def lambda_exponent(alpha: float, beta: float, eta: float) -> float:
    """``lambda = alpha (beta' (1 + eta))'``."""
    if alpha < 1 or beta < 1 or eta <= 0:
        raise ValueError("need alpha, beta >= 1 and eta > 0")
    inner = conjugate(beta) * (1.0 + eta)
    if inner <= 1.0:
        raise ZeroDivisionError("beta'(1 + eta) must exceed 1")
    return alpha * conjugate(inner)


def delta_sigma(W: MatrixWeight, r: float, directions=None) -> dict:
    """``delta = 1/(2^{d+1}[W]^{Sc}_{A_r} - 1)`` and ``sigma`` from the dual weight."""
    d = W.grid.d
    wsc, _ = scalar_sup_a_r(W, r, directions)
    ssc, _ = scalar_sup_a_r(dual_weight(W, r), conjugate(r), directions)
    return {
        "delta": 1.0 / (2 ** (d + 1) * wsc - 1.0),
        "sigma": 1.0 / (2 ** (d + 1) * ssc - 1.0),
        "W_scalar": wsc,
        "Sigma_scalar": ssc,
    }


def delta_from_constant(d: int, scalar_constant: float) -> float:
    return 1.0 / (2 ** (d + 1) * scalar_constant - 1.0)
