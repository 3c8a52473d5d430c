"""Convex bodies of vector tuples, body dot products and John ellipsoids.

A tuple ``f = (f_1, ..., f_n)`` and an averaged ``L^p`` space over a region
define a symmetric convex body in ``R^n`` whose support function is
``h(u) = || sum_i u_i f_i ||_{L^p(region)}``.  Bodies are only ever accessed
through this support function and its exposed points.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.spatial import HalfspaceIntersection

from .dyadic import CellMask
from .gridfn import GridFunction, NormTag, dual_exponent, pairing

__all__ = [
    "BodyOracle",
    "BodyDot",
    "Ellipsoid",
    "JohnCertificate",
    "ReducingMap",
    "sample_directions",
    "support",
    "body_dot",
    "john_ellipsoid",
    "reducing_transform",
    "lemma_th1_check",
    "DEGENERACY_EPS",
]

DEGENERACY_EPS = 1e-8


def sample_directions(n: int, M: int, seed: int = 0) -> np.ndarray:
    """Deterministic unit vectors, shape ``(M, n)``.

    Equally spaced half-circle angles for ``n = 2`` (bodies are symmetric),
    a Fibonacci lattice for ``n = 3`` and seeded Gaussian samples otherwise.
    """
    if n == 1:
        return np.ones((1, 1))
    if n == 2:
        t = np.pi * (np.arange(M) + 0.5) / M
        return np.stack([np.cos(t), np.sin(t)], axis=1)
    if n == 3:
        k = np.arange(M) + 0.5
        z = 1.0 - 2.0 * k / M
        r = np.sqrt(1.0 - z * z)
        phi = np.pi * (1.0 + np.sqrt(5.0)) * k
        return np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((M, n))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


class BodyOracle:
    """The body of ``f`` in ``L^p(region)`` (averaged norm)."""

    def __init__(self, f: GridFunction, region: CellMask, p: float):
        if region.grid != f.grid:
            raise ValueError("region and function live on different grids")
        if p < 1:
            raise ValueError("p must be at least 1")
        if region.total_measure <= 0:
            raise ValueError("empty region")
        self.f = f
        self.region = region
        self.p = float(p)
        self.norm = f.norm
        self.n = f.n
        self.values = f.values[region.membership]  # (cells, n, m)
        self.weight = f.grid.cell_volume / region.total_measure
        self._span = None

    # support function ------------------------------------------------------
    def _combos(self, U: np.ndarray) -> np.ndarray:
        return np.einsum("kn,cnm->kcm", U, self.values)

    def _average(self, pointwise: np.ndarray) -> np.ndarray:
        if pointwise.shape[-1] == 0:
            return np.zeros(pointwise.shape[:-1])
        if self.p == np.inf:
            return pointwise.max(axis=-1)
        return (np.sum(pointwise ** self.p, axis=-1) * self.weight) ** (1.0 / self.p)

    def support(self, u) -> float:
        return float(self.support_many(np.atleast_2d(np.asarray(u, dtype=float)))[0])

    def support_many(self, U: np.ndarray) -> np.ndarray:
        U = np.atleast_2d(np.asarray(U, dtype=float))
        return self._average(self.norm.norm(self._combos(U)))

    __call__ = support_many

    def exposed_point(self, u) -> np.ndarray:
        """A point ``a`` of the body with ``u . a = h(u)``, from the norming functional."""
        u = np.asarray(u, dtype=float)
        F = self._combos(u[None])[0]  # (cells, m)
        mag = self.norm.norm(F)
        if mag.size == 0 or mag.max() == 0:
            return np.zeros(self.n)
        w = self.norm.norming(F)
        if self.p == np.inf:
            phi = np.zeros_like(F)
            k = int(np.argmax(mag))
            phi[k] = w[k] / self.weight
        elif self.p == 1:
            phi = w
        else:
            h = self._average(mag)
            phi = w * ((mag / h) ** (self.p - 1))[:, None]
        return np.einsum("cnm,cm->n", self.values, phi) * self.weight

    # span of the body ------------------------------------------------------
    def span(self) -> np.ndarray:
        """Orthonormal basis (``n x k``) of the linear span of the body."""
        if self._span is None:
            mat = self.values.transpose(1, 0, 2).reshape(self.n, -1)
            if mat.size == 0:
                self._span = np.zeros((self.n, 0))
            else:
                U, s, _ = np.linalg.svd(mat, full_matrices=False)
                if s.size == 0 or s[0] == 0:
                    self._span = np.zeros((self.n, 0))
                else:
                    k = int(np.sum(s > DEGENERACY_EPS * s[0]))
                    self._span = U[:, :k]
        return self._span

    def restricted(self, basis: np.ndarray) -> Callable[[np.ndarray], np.ndarray]:
        """Support function of the body in coordinates of ``basis``."""
        return lambda Z: self.support_many(np.atleast_2d(Z) @ basis.T)


def support(body: BodyOracle, u) -> float:
    return body.support(u)


# ---------------------------------------------------------------------------
# body dot product
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BodyDot:
    """``value`` is the ascent lower bound; ``upper`` the outer-polytope bound."""

    value: float
    upper: float | None
    method: str
    certified: bool
    iterations: int = 0
    converged: bool = True
    witness: np.ndarray | None = None

    @property
    def gap(self) -> float:
        if self.upper is None or self.value <= 0:
            return 0.0 if self.upper in (None, 0.0) else np.inf
        return self.upper / self.value - 1.0


def _ascent(F: BodyOracle, G: BodyOracle, starts: np.ndarray, max_iter: int, rtol: float):
    best, best_a, total, conv = 0.0, None, 0, True
    for b in starts:
        val = -1.0
        ok = False
        for it in range(max_iter):
            a = F.exposed_point(b)
            b = G.exposed_point(a)
            new = float(a @ b)
            total += 1
            if new <= val * (1.0 + rtol) + 1e-300:
                ok = True
                val = max(val, new)
                break
            val = new
            if not np.any(b):
                ok = True
                break
        conv &= ok
        if val > best:
            best, best_a = val, a
    return max(best, 0.0), best_a, total, conv


def _polytope_upper(F: BodyOracle, G: BodyOracle, basis: np.ndarray, M: int) -> float:
    """Max of ``h_G`` over an outer polytope of ``F``'s body inside its span."""
    k = basis.shape[1]
    hF = F.restricted(basis)
    if k == 1:
        b = basis[:, 0]
        return float(F.support(b) * G.support(b))
    dirs = sample_directions(k, M)
    dirs = np.concatenate([dirs, -dirs]) if k == 2 else dirs
    h = hF(dirs)
    if k == 2:
        ang = np.arctan2(dirs[:, 1], dirs[:, 0])
        order = np.argsort(ang)
        D, hh = dirs[order], h[order]
        D2, h2 = np.roll(D, -1, axis=0), np.roll(hh, -1)
        det = D[:, 0] * D2[:, 1] - D[:, 1] * D2[:, 0]
        x = (hh * D2[:, 1] - h2 * D[:, 1]) / det
        y = (D[:, 0] * h2 - D2[:, 0] * hh) / det
        verts = np.stack([x, y], axis=1)
    else:
        dirs = np.concatenate([dirs, -dirs])
        h = np.concatenate([h, h])
        hs = np.concatenate([dirs, -h[:, None]], axis=1)
        verts = HalfspaceIntersection(hs, np.zeros(k)).intersections
    return float(G.support_many(verts @ basis.T).max())


def body_dot(
    F: BodyOracle,
    G: BodyOracle,
    method: str = "auto",
    starts: int = 8,
    seed: int = 0,
    max_iter: int = 200,
    rtol: float = 1e-12,
    grid_directions: int | None = None,
) -> BodyDot:
    """``sup_{a in K_F} h_G(a) = sup_{a in K_F, b in K_G} a . b``.

    The ascent alternates exposed points of the two bodies and never
    decreases the product; it returns a lower bound.  For bodies spanning at
    most three dimensions the outer-polytope oracle gives a certified upper
    bound.  ``method`` is ``"auto"``, ``"ascent"`` or ``"grid"``.
    """
    if F.n != G.n:
        raise ValueError("bodies must live in the same R^n")
    n = F.n
    basis = F.span()
    k = basis.shape[1]
    if k == 0 or not G.span().size:
        return BodyDot(0.0, 0.0, "degenerate", True)
    if k == 1:
        b = basis[:, 0]
        val = float(F.support(b) * G.support(b))
        return BodyDot(val, val, "rank-one", True, witness=b)

    rng = np.random.default_rng(seed)
    init = [basis[:, i] for i in range(k)]
    init += list(rng.standard_normal((max(starts - k, 1), n)))
    st = np.array(init[:max(starts, k)])
    lower, wit, iters, conv = _ascent(F, G, st, max_iter, rtol)

    upper, label, certified = None, "ascent", False
    if method in ("auto", "grid") and k <= 3:
        M = grid_directions or (720 if k == 2 else 2000)
        upper = max(_polytope_upper(F, G, basis, M), lower)
        label, certified = "ascent+grid", True
    elif method == "grid":
        raise ValueError("grid oracle needs a body of dimension at most 3")
    elif k > 3:
        label = "uncertified upper estimate"
    if not conv and upper is not None:
        label += " (ascent not converged, grid bound used)"
        lower = lower
    return BodyDot(lower, upper, label, certified, iters, conv, wit)


# ---------------------------------------------------------------------------
# John ellipsoid
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Ellipsoid:
    """``E = S B``: support function ``|S u|``."""

    shape: np.ndarray
    rank: int
    kernel: np.ndarray

    def support(self, U) -> np.ndarray:
        U = np.atleast_2d(U)
        return np.linalg.norm(U @ self.shape.T, axis=1)


@dataclass(frozen=True)
class JohnCertificate:
    directions: int
    inner_ratio: float  # max h_E / h  (should be <= 1 + tol)
    outer_ratio: float  # max h / (sqrt(k) h_E)  (should be <= 1 + tol)
    tol: float
    iterations: int
    khachiyan_gap: float
    rank: int

    @property
    def passed(self) -> bool:
        return self.inner_ratio <= 1.0 + self.tol and self.outer_ratio <= 1.0 + self.tol


def _centered_mvee(X: np.ndarray, eps: float, max_iter: int, w0: np.ndarray | None = None):
    """Minimum-volume centred ellipsoid ``{x : x^T A x <= 1}`` around ``+-X``.

    Khachiyan's algorithm with away steps on the weights ``w``; returns ``A``,
    the iteration count and the final gap ``max_k g_k / n - 1``.
    """
    M, n = X.shape
    w = np.full(M, 1.0 / M) if w0 is None else w0 / w0.sum()
    it = 0
    while True:
        Sig = (X * w[:, None]).T @ X
        Sinv = np.linalg.inv(Sig)
        g = np.einsum("ki,ij,kj->k", X, Sinv, X)
        for _ in range(200):
            j = int(np.argmax(g))
            gap = g[j] / n - 1.0
            if gap <= eps or it >= max_iter:
                break
            act = w > 0
            ia = int(np.flatnonzero(act)[np.argmin(g[act])])
            if g[j] - n >= n - g[ia] or w[ia] >= 1.0:
                s = (g[j] - n) / (n * (g[j] - 1.0))
                idx = j
            else:
                # away step, clipped so the weight stays nonnegative
                lo = -w[ia] / (1.0 - w[ia])
                s = max((g[ia] - n) / (n * (g[ia] - 1.0)), lo) if g[ia] > 1.0 else lo
                idx = ia
            gi = g[idx]
            Sx = Sinv @ X[idx]
            cross = X @ Sx
            denom = (1.0 - s) + s * gi
            g = (g - s * cross ** 2 / denom) / (1.0 - s)
            Sinv = (Sinv - s * np.outer(Sx, Sx) / denom) / (1.0 - s)
            w *= 1.0 - s
            w[idx] += s
            w[w < 1e-300] = 0.0
            it += 1
        else:
            continue
        break
    return Sinv / n, it, float(max(gap, 0.0)), w


def _sqrtm_psd(A: np.ndarray) -> np.ndarray:
    lam, V = np.linalg.eigh((A + A.T) / 2)
    return (V * np.sqrt(np.clip(lam, 0.0, None))) @ V.T


def _check_norm_like(h, n: int, seed: int):
    U = sample_directions(n, 16, seed + 17) if n != 2 else sample_directions(2, 16)
    a, b, c = h(U), h(-U), h(2.0 * U)
    scale = max(float(np.max(np.abs(a))), 1e-300)
    if np.max(np.abs(a - b)) > 1e-6 * scale:
        raise ValueError("support oracle is not even")
    if np.max(np.abs(c - 2.0 * a)) > 1e-6 * scale:
        raise ValueError("support oracle is not positively homogeneous")
    if np.min(a) < -1e-12 * scale:
        raise ValueError("support oracle takes negative values")


def john_ellipsoid(
    h: Callable[[np.ndarray], np.ndarray],
    n: int,
    tol: float = 0.02,
    M: int = 4096,
    seed: int = 0,
    eps: float = 1e-9,
    max_iter: int = 500,
    basis: np.ndarray | None = None,
    refine_rounds: int = 8,
    solver_points: int = 1024,
) -> tuple[Ellipsoid, JohnCertificate]:
    """Inscribed John ellipsoid of the body with support function ``h``.

    The polar body ``{h <= 1}`` is sampled at ``u_k / h(u_k)``; the minimum
    volume centred ellipsoid around those points is the polar of the John
    ellipsoid of their convex hull.  The result is shrunk until ``h_E <= h``
    on every sampled and certification direction.  ``basis`` (``n x k``,
    orthonormal) restricts the body to a known span; otherwise directions
    with ``h < eps * max h`` are projected out.
    """
    _check_norm_like(h, n, seed)
    if basis is None:
        basis = np.eye(n)
    k = basis.shape[1]
    if k == 0:
        z = np.zeros((n, n))
        return Ellipsoid(z, 0, np.eye(n)), JohnCertificate(0, 0.0, 0.0, tol, 0, 0.0, 0)
    hk = lambda Z: h(np.atleast_2d(Z) @ basis.T)
    if k == 1:
        S_k = np.array([[float(hk(np.ones((1, 1)))[0])]])
        its, kgap = 0, 0.0
        dirs = np.ones((1, 1))
        cert_dirs = dirs
    else:
        dirs = sample_directions(k, min(M, solver_points), seed)
        hv = hk(dirs)
        hmax = hv.max()
        if hmax <= 0:
            raise ValueError("body is the origin")
        if hv.min() < DEGENERACY_EPS * hmax:
            # degenerate body: find its span from the sample and restart there
            Z = dirs * hv[:, None]
            U, s, _ = np.linalg.svd(Z.T, full_matrices=False)
            keep = s > np.sqrt(DEGENERACY_EPS) * s[0]
            sub = basis @ U[:, keep]
            if sub.shape[1] == k:
                raise ValueError("support oracle vanishes on sampled directions")
            return john_ellipsoid(h, n, tol, M, seed, eps, max_iter, sub, refine_rounds, solver_points)
        X = dirs / hv[:, None]
        A, its, kgap, w = _centered_mvee(X, eps, max_iter)
        cert_dirs = sample_directions(k, M, seed + 1) if k > 3 else _offset(k, M)
        pool = np.concatenate([dirs, cert_dirs])
        hpool = hk(pool)
        rng = np.random.default_rng(seed + 2)
        # sampled polar points miss sharp corners of {h <= 1}; add the
        # directions whose polar point escapes the ellipsoid and re-solve
        for _ in range(refine_rounds):
            ratio = np.einsum("ki,ij,kj->k", pool, A, pool) / hpool ** 2
            worst = np.argsort(ratio)[::-1][:32]
            if ratio[worst[0]] <= 1.0 + 1e-9:
                break
            local = pool[worst[:4], None, :] + 0.02 * rng.standard_normal((4, 64, k))
            local = local.reshape(-1, k)
            local /= np.linalg.norm(local, axis=1, keepdims=True)
            new = np.concatenate([pool[worst], local])
            hn = hk(new)
            X = np.concatenate([X, new / hn[:, None]])
            w = np.concatenate([w, np.full(len(new), 1e-3 / len(new))])
            A, its2, kgap, w = _centered_mvee(X, eps, max_iter, w)
            its += its2
        S_k = _sqrtm_psd(A)
        # flat bodies whose null directions the sample never hit exactly
        lam, V = np.linalg.eigh(S_k)
        keep = lam > DEGENERACY_EPS * lam.max()
        if not keep.all():
            return john_ellipsoid(h, n, tol, M, seed, eps, max_iter, basis @ V[:, keep], refine_rounds,
                                  solver_points)

    # shrink so that h_E <= h on all directions tested
    all_dirs = np.concatenate([dirs, cert_dirs])
    hv_all = hk(all_dirs)
    hE = np.linalg.norm(all_dirs @ S_k.T, axis=1)
    shrink = float(np.max(hE / hv_all))
    if shrink > 1.0:
        S_k = S_k / shrink
    hc = hk(cert_dirs)
    hEc = np.linalg.norm(cert_dirs @ S_k.T, axis=1)
    inner = float(np.max(hEc / hc))
    outer = float(np.max(hc / (np.sqrt(k) * hEc)))
    S = basis @ S_k @ basis.T
    kernel = _null_basis(basis, n)
    cert = JohnCertificate(len(cert_dirs), inner, outer, tol, its, kgap, k)
    return Ellipsoid(S, k, kernel), cert


def _offset(k: int, M: int) -> np.ndarray:
    """Certification directions, disjoint from the solver directions."""
    if k == 2:
        t = np.pi * np.arange(M) / M
        return np.stack([np.cos(t), np.sin(t)], axis=1)
    rng = np.random.default_rng(12345)
    x = rng.standard_normal((M, k))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def _null_basis(basis: np.ndarray, n: int) -> np.ndarray:
    if basis.shape[1] == n:
        return np.zeros((n, 0))
    P = np.eye(n) - basis @ basis.T
    U, s, _ = np.linalg.svd(P)
    return U[:, : n - basis.shape[1]]


# ---------------------------------------------------------------------------
# reducing transform
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ReducingMap:
    """``R`` (``k x n``) maps the body onto a set between the ball and ``sqrt(k)`` ball.

    ``basis`` spans the body; ``shape_k`` is the John shape in those
    coordinates and ``dual`` (``k x n``) acts on the paired tuple so that
    ``R^T dual = basis basis^T``.
    """

    R: np.ndarray
    dual: np.ndarray
    basis: np.ndarray
    shape_k: np.ndarray
    certificate: JohnCertificate
    ellipsoid: Ellipsoid = field(repr=False)

    @property
    def rank(self) -> int:
        return self.basis.shape[1]

    @property
    def projector(self) -> np.ndarray:
        return self.basis @ self.basis.T


def _transform(A: np.ndarray, f: GridFunction) -> GridFunction:
    return f.with_values(np.einsum("kn,...nm->...km", A, f.values))


def reducing_transform(
    f: GridFunction,
    region: CellMask,
    p: float,
    g: GridFunction | None = None,
    tol: float = 0.02,
    M: int = 4096,
    seed: int = 0,
):
    """John-reduce the body of ``f`` in ``L^p(region)``.

    Returns ``(map, f_red, g_red)`` with ``f_red = R f`` and
    ``g_red = dual g``; pairings are preserved.
    """
    body = BodyOracle(f, region, p)
    basis = body.span()
    if basis.shape[1] == 0:
        raise ValueError("fully degenerate body: the tuple vanishes on the region")
    ell, cert = john_ellipsoid(body.support_many, f.n, tol=tol, M=M, seed=seed, basis=basis)
    S_k = basis.T @ ell.shape @ basis
    R = np.linalg.solve(S_k, basis.T)
    dual = S_k @ basis.T
    rmap = ReducingMap(R, dual, basis, S_k, cert, ell)
    f_red = _transform(R, f)
    g_red = None if g is None else _transform(dual, g)
    return rmap, f_red, g_red


def lemma_th1_check(
    f: GridFunction,
    g: GridFunction,
    region_f: CellMask,
    region_g: CellMask,
    p: float,
    q_dual: float,
    tol: float = 0.02,
    seed: int = 0,
) -> dict:
    """``sum_i ||f_i|| ||g_i|| <= n^{3/2} (1+tol) <<f>> . <<g>>`` after reduction."""
    from .gridfn import lp_average

    rmap, fr, gr = reducing_transform(f, region_f, p, g, tol=tol, seed=seed)
    lhs = sum(
        lp_average(fr, region_f, p, i) * lp_average(gr, region_g, q_dual, i)
        for i in range(fr.n)
    )
    dot = body_dot(BodyOracle(f, region_f, p), BodyOracle(g, region_g, q_dual), seed=seed)
    # the ascent value is a lower bound for the body product: the stricter side
    rhs = dot.value
    n = f.n
    bound = n ** 1.5 * (1.0 + tol) * rhs
    return {
        "lhs": lhs,
        "rhs": rhs,
        "rank": rmap.rank,
        "bound": bound,
        "ratio": lhs / rhs if rhs > 0 else (0.0 if lhs == 0 else np.inf),
        "passed": bool(lhs <= bound + 1e-12 * max(1.0, lhs)),
        "certificate": rmap.certificate,
        "pairing_invariance": abs(pairing(f, g) - pairing(fr, gr)) if f.norm.dual() is g.norm else None,
    }
