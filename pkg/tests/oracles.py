"""Independent reference implementations used by the tests.

Everything here is written from the definitions with explicit loops or
closed forms, sharing no code paths with the package beyond the basic
container types.
"""
from __future__ import annotations

import itertools

import numpy as np
from scipy.linalg import fractional_matrix_power, sqrtm
from scipy.optimize import minimize

from convexdom.dyadic import DyadicCube, GridSpec
from convexdom.gridfn import GridFunction, convolve, dilate, project, resample


# ---------------------------------------------------------------------------
# dyadic
# ---------------------------------------------------------------------------


def brute_maximal(vals: np.ndarray, grid: GridSpec, p: float) -> np.ndarray:
    """Sup over every cell-aligned cube in the root whose closure meets the closed cell."""
    n, d = grid.n_per_axis, grid.d
    power = np.abs(vals) ** p
    out = power.copy()
    for s in range(1, n + 1):
        for a in itertools.product(range(n - s + 1), repeat=d):
            cube = tuple(slice(x, x + s) for x in a)
            touch = tuple(slice(max(0, x - 1), x + s + 1) for x in a)
            out[touch] = np.maximum(out[touch], power[cube].mean())
    return out ** (1.0 / p)


def box_distance(lo1, hi1, lo2, hi2) -> float:
    gap = np.maximum(0.0, np.maximum(np.asarray(lo2) - hi1, np.asarray(lo1) - hi2))
    return float(np.sqrt((gap ** 2).sum()))


def complement_distance(cube: DyadicCube, member: np.ndarray, grid: GridSpec) -> float:
    """Distance from ``cube`` to the complement of the cell union (outside the root included)."""
    h = grid.cell_width
    lo, hi = cube.lower, cube.upper
    best = min(float(np.min(lo - grid.root_lower)), float(np.min(grid.root_upper - hi)))
    for idx in zip(*np.nonzero(~member)):
        clo = (np.array(idx) + np.array(grid.origin)) * h
        best = min(best, box_distance(lo, hi, clo, clo + h))
    return max(best, 0.0)


def brute_block_average(vals: np.ndarray, grid: GridSpec, level: int) -> np.ndarray:
    out = np.zeros_like(vals)
    for Q in grid.dyadic_cubes(level):
        sl = grid.cube_slices(Q)
        out[sl] = vals[sl].mean(axis=tuple(range(grid.d)))
    return out


# ---------------------------------------------------------------------------
# norms
# ---------------------------------------------------------------------------


def level_sets(vals: np.ndarray, cell_volume: float):
    """Distinct nonzero levels ``t_k`` and ``|{|f| >= t_k}|`` from sorted values."""
    a = np.sort(np.abs(vals).ravel())[::-1]
    a = a[a > 0]
    levels = np.unique(a)
    return levels, np.array([np.sum(a >= t) * cell_volume for t in levels])


def brute_weak(vals, cell_volume, p):
    levels, meas = level_sets(vals, cell_volume)
    return max((t * m ** (1.0 / p) for t, m in zip(levels, meas)), default=0.0)


def brute_lorentz(vals, cell_volume, q):
    """``int_0^inf lambda(t)^{1/q} dt`` as a sum over the gaps between levels."""
    levels, meas = level_sets(vals, cell_volume)
    total, prev = 0.0, 0.0
    for t, m in zip(levels, meas):
        total += (t - prev) * m ** (1.0 / q)
        prev = t
    return total


# ---------------------------------------------------------------------------
# convex bodies
# ---------------------------------------------------------------------------


def dual_ball_sup(v: np.ndarray, p: float) -> float:
    """``sup avg(v phi)`` over ``avg |phi|^{p'} <= 1`` as a constrained problem (SLSQP)."""
    pd = p / (p - 1.0)
    N = v.size
    cons = {"type": "ineq", "fun": lambda phi: 1.0 - np.mean(np.abs(phi) ** pd)}
    best = 0.0
    for start in (np.sign(v) + 1e-3, v / np.abs(v).max()):
        res = minimize(lambda phi: -np.mean(v * phi), start / max(1.0, np.mean(np.abs(start) ** pd) ** (1 / pd)),
                       constraints=[cons], method="SLSQP", options={"maxiter": 1000, "ftol": 1e-14})
        phi = res.x / max(1.0, np.mean(np.abs(res.x) ** pd) ** (1 / pd))
        best = max(best, float(np.mean(v * phi)))
    return best


def gram(f: GridFunction) -> np.ndarray:
    F = f.values.reshape(-1, f.n, f.m)
    return np.einsum("xim,xjm->ij", F, F) / F.shape[0]


def l2_body_dot(f: GridFunction, g: GridFunction) -> float:
    """For ``L^2`` averages both bodies are ellipses ``Gram^{1/2} B``; the dot is ``|G_f^{1/2} G_g^{1/2}|``."""
    a = np.real(sqrtm(gram(f)))
    b = np.real(sqrtm(gram(g)))
    return float(np.linalg.norm(a @ b, 2))


def polygon_upper(hF, hG, M: int = 4000) -> float:
    """n = 2: ``K_F`` lies in the polygon cut out by ``M`` support lines; ``sup h_G`` over its vertices."""
    t = 2 * np.pi * np.arange(M) / M
    U = np.stack([np.cos(t), np.sin(t)], axis=1)
    h = hF(U)
    verts = []
    for k in range(M):
        A = np.array([U[k], U[(k + 1) % M]])
        b = np.array([h[k], h[(k + 1) % M]])
        verts.append(np.linalg.solve(A, b))
    return float(np.max(hG(np.array(verts))))


# ---------------------------------------------------------------------------
# weights
# ---------------------------------------------------------------------------


def brute_matrix_ar(mats: np.ndarray, r: float, cubes) -> float:
    """Double average over cells with scipy fractional powers, explicit loops."""
    rp = r / (r - 1.0)
    P = [np.real(fractional_matrix_power(M, 1.0 / r)) for M in mats]
    Q = [np.real(fractional_matrix_power(M, -1.0 / r)) for M in mats]
    best = 0.0
    for idx in cubes:
        outer = 0.0
        for x in idx:
            inner = np.mean([np.linalg.norm(P[x] @ Q[y], 2) ** rp for y in idx])
            outer += inner ** (r / rp)
        best = max(best, outer / len(idx))
    return best


def brute_scalar_ar(w: np.ndarray, r: float, cubes) -> float:
    best = 0.0
    for idx in cubes:
        ww = w[idx]
        best = max(best, ww.mean() * np.mean(ww ** (-1.0 / (r - 1.0))) ** (r - 1.0))
    return best


def dyadic_index_sets(grid: GridSpec):
    idx = np.arange(grid.n_cells).reshape(grid.shape)
    return [idx[grid.cube_slices(Q)].ravel() for Q in grid.all_dyadic_cubes()]


def brute_sparse_operator(cubes, grid: GridSpec, w: np.ndarray, r: float, f: np.ndarray) -> np.ndarray:
    """Scalar ``L~_r f(y) = sum_Q 1_Q(y) avg_Q w(x)^{-1/r} w(y)^{1/r} |f(x)|``."""
    out = np.zeros(grid.n_cells)
    idx = np.arange(grid.n_cells).reshape(grid.shape)
    for Q in cubes:
        cells = idx[grid.cube_slices(Q)].ravel()
        avg = np.mean(w[cells] ** (-1.0 / r) * np.abs(f[cells]))
        out[cells] += w[cells] ** (1.0 / r) * avg
    return out


# ---------------------------------------------------------------------------
# single-scale operators
# ---------------------------------------------------------------------------


def pipeline_apply(stencil, j: int, f: GridFunction) -> GridFunction:
    """``project o Dil_{2^-j} o conv o resample o Dil_{2^j}`` with the gridfn primitives."""
    g1 = dilate(f, j)
    lev = min(g1.grid.cell_level, stencil.level)
    g2 = resample(g1, g1.grid.with_cell_level(lev))
    g3 = convolve(g2, stencil.refine(lev))
    return project(dilate(g3, -j), f.grid)


def pipeline_matrix(stencil, j: int, grid: GridSpec, m1: int = 1) -> np.ndarray:
    """Dense ``(N m2) x (N m1)`` matrix built column by column from basis inputs."""
    N = grid.n_cells
    cols = []
    for y in range(N):
        for b in range(m1):
            v = np.zeros((N, 1, m1))
            v[y, 0, b] = 1.0
            out = pipeline_apply(stencil, j, GridFunction(grid, v.reshape(grid.shape + (1, m1))))
            cols.append(out.values.reshape(N, -1).ravel())
    return np.array(cols).T


def discrete_matrix_1d(kernel: GridFunction, j: int, grid: GridSpec) -> np.ndarray:
    """Scalar d = 1 loops over fine cells in dilated coordinates.

    In the variable ``u = 2^-j x`` the grid has cells of width ``h' = 2^-j h``;
    the convolution runs on cells of width ``w = min(h', kernel cells)`` and
    is projected back: ``T[X, Y] = (w^2 / h') sum_{x' in X, y' in Y} K(x' - y')``
    with ``K(k)`` the kernel value on the kernel cell containing ``k w``.
    """
    hp = grid.cell_width * 2.0 ** (-j)
    kw = kernel.grid.cell_width
    w = min(hp, kw)
    per = int(round(hp / w))
    ratio = int(round(kw / w))
    kvals = {int(a): v for a, v in zip(kernel.grid.cell_anchors(0), kernel.values[:, 0, 0])}
    N = grid.n_cells
    T = np.zeros((N, N))
    for X in range(N):
        for Y in range(N):
            tot = 0.0
            for xs in range(per):
                for ys in range(per):
                    k = (X - Y) * per + xs - ys
                    tot += kvals.get(int(np.floor(k / ratio)), 0.0)
            T[X, Y] = tot * w * w / hp
    return T
