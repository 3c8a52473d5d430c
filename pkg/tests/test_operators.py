import numpy as np
import pytest
from hypothesis import given, strategies as st

from convexdom.dyadic import DyadicCube, GridSpec, cube_triple
from convexdom.gridfn import GridFunction, Stencil, pairing, resample
from convexdom.operators import (BRSFamily, MultiplierSpec, budget, bump_kernel, certify, decompose_multiplier,
                                 fit_kappa, identity_kernel, psi0, psi_ell, random_kernel, regularity_decay_check,
                                 theta_profile, young_bound)

from oracles import discrete_matrix_1d, pipeline_matrix

G = GridSpec.centered(1, -2, 4)
seeds = st.integers(0, 10 ** 6)


def _random(grid, rng, m=1, n=1):
    return GridFunction(grid, rng.standard_normal(grid.shape + (n, m)))


# dense matrices against two independent routes

@pytest.mark.parametrize("j", [-2, -1, 0, 1, 2])
@pytest.mark.parametrize("kernel", ["random", "bump", "coarse"])
def test_scale_matrix_matches_oracles(j, kernel):
    ker = {"random": random_kernel(1, -2, seed=3), "bump": bump_kernel(1, -4),
           "coarse": random_kernel(1, -1, seed=1)}[kernel]
    op = BRSFamily(ker, j, j).ops[j]
    D = op.dense(G).reshape(G.n_cells, G.n_cells)
    assert np.abs(D - pipeline_matrix(op.stencil, j, G)).max() <= 1e-13
    assert np.abs(D - discrete_matrix_1d(ker, j, G)).max() <= 1e-13


def test_matrix_valued_kernel_matches_pipeline():
    ker = random_kernel(1, -2, m1=2, m2=3, seed=4)
    op = BRSFamily(ker, 1, 1).ops[1]
    D = op.dense(G).reshape(G.n_cells * 3, G.n_cells * 2)
    assert np.abs(D - pipeline_matrix(op.stencil, 1, G, m1=2)).max() <= 1e-13


def test_two_dimensional_matches_pipeline():
    g = GridSpec.centered(2, -1, 2)
    ker = random_kernel(2, -1, seed=5)
    op = BRSFamily(ker, 0, 0).ops[0]
    D = op.dense(g).reshape(g.n_cells, g.n_cells)
    assert np.abs(D - pipeline_matrix(op.stencil, 0, g)).max() <= 1e-13


# apply / adjoint

def test_zero_kernel():
    ker = GridFunction.zeros(GridSpec.centered(1, -2, 1))
    fam = BRSFamily(Stencil(-2, np.zeros((0, 1), int), np.zeros((0, 1, 1))), 0, 2)
    rng = np.random.default_rng(0)
    assert not np.any(fam.apply(_random(G, rng)).values)
    assert ker.values.sum() == 0


def test_delta_input_copies_kernel():
    ker = random_kernel(1, -2, seed=1)
    fam = BRSFamily(ker, 0, 0)
    x0 = G.n_cells // 2
    v = np.zeros(G.shape + (1, 1))
    v[x0] = 1.0 / G.cell_volume
    out = fam.apply(GridFunction(G, v)).values.ravel()
    kv = dict(zip(ker.grid.cell_anchors(0), ker.values.ravel()))
    expect = np.array([kv.get(a - G.cell_anchors(0)[x0], 0.0) for a in G.cell_anchors(0)])
    assert np.allclose(out, expect, atol=1e-14)


@given(seeds, st.integers(1, 2), st.integers(1, 2), st.integers(-1, 2))
def test_adjoint_pairing(seed, m1, m2, N2):
    rng = np.random.default_rng(seed)
    fam = BRSFamily(random_kernel(1, -2, m1, m2, seed), -1, N2)
    f, g = _random(G, rng, m1, 2), _random(G, rng, m2, 2)
    a, b = pairing(fam.apply(f), g), pairing(f, fam.adjoint_apply(g))
    assert a == pytest.approx(b, abs=1e-10 * max(1.0, abs(a)))
    c = pairing(f, fam.adjoint().apply(g))
    assert c == pytest.approx(a, abs=1e-10 * max(1.0, abs(a)))


@given(seeds, st.integers(0, 2))
def test_t1_support(seed, j):
    rng = np.random.default_rng(seed)
    fam = BRSFamily(random_kernel(1, -2, seed=seed), j, j)
    v = np.zeros(G.shape + (1, 1))
    lo = int(rng.integers(16, 40))
    v[lo: lo + int(rng.integers(1, 8))] = rng.standard_normal((1, 1))
    f = GridFunction(G, v)
    out = fam.apply(f).values.ravel()
    x = G.cell_anchors(0) * G.cell_width
    sx = x[np.any(v != 0, axis=(1, 2))]
    # closed cells: dist(cell, supp f) <= 2^j
    dist = np.maximum(0, np.maximum(sx.min() - (x + G.cell_width), x - (sx.max() + G.cell_width)))
    assert np.all(out[dist > 2.0 ** j + 1e-12] == 0)
    assert fam.t1_ok()


def test_t1_violation_rejected():
    kg = GridSpec.centered(1, -2, 4)
    with pytest.raises(ValueError, match="T1"):
        BRSFamily(GridFunction.scalar(kg, np.ones(kg.n_cells)), 0, 0)


# partial sums

def test_partial_sum_ranges():
    rng = np.random.default_rng(1)
    fam = BRSFamily(bump_kernel(1, -4), 1, 2)
    f = _random(G, rng)
    small = DyadicCube(1, 0, (0,))
    assert not np.any(fam.partial_sum(f, small).values)
    big = DyadicCube(1, 2, (0,))
    full = fam.apply(f.restrict(G.cube_mask(big)))
    assert np.allclose(fam.partial_sum(f, big).values, full.values)


@given(seeds, st.integers(0, 3))
def test_partial_sum_supported_in_triple(seed, level):
    rng = np.random.default_rng(seed)
    fam = BRSFamily(random_kernel(1, -2, seed=seed), 0, 3)
    Q = DyadicCube(1, level, (int(rng.integers(-1, 1)),))
    out = fam.partial_sum(_random(G, rng), Q)
    outside = ~cube_triple(Q, G).membership
    assert not np.any(out.values.reshape(G.n_cells, -1)[outside])


# certification

def test_identity_kernel_isometry():
    c = certify(BRSFamily(identity_kernel(1, 0), 0, 0), GridSpec.centered(1, 0, 5), battery=2)
    assert c.A_circ == pytest.approx(1.0, abs=1e-12) and c.tags["A_circ"] == "exact"


@given(seeds)
def test_exact_a_circ_below_young(seed):
    fam = BRSFamily(random_kernel(1, -2, seed=seed), 0, 1)
    c = certify(fam, G, battery=4, seed=seed)
    assert c.A_circ <= c.extra["A_circ_young"] + 1e-12
    assert c.A_p <= c.extra["A_p_triangle"] + 1e-9 and c.A_q <= c.extra["A_q_triangle"] + 1e-9


@pytest.mark.parametrize("j", [-1, 0, 1])
def test_dilation_invariance(j):
    # scale j on cells 2^c is scale j+1 on cells 2^(c+1), cell for cell
    fam = BRSFamily(random_kernel(1, -2, seed=2), -1, 2)
    a = fam.ops[j].dense(GridSpec.centered(1, -3, 5))
    b = fam.ops[j + 1].dense(GridSpec.centered(1, -2, 6))
    assert np.abs(a - b).max() <= 1e-12 * np.abs(a).max()


def test_young_scaling_in_j():
    fam = BRSFamily(bump_kernel(1, -4), 0, 3)
    for j in range(3):
        assert young_bound(fam, 1.5, 3.0, j + 1) / young_bound(fam, 1.5, 3.0, j) == pytest.approx(2 ** (-(1 / 1.5 - 1 / 3)))


def test_t4_is_t3_of_adjoint():
    fam = BRSFamily(random_kernel(1, -2, seed=7), 0, 1)
    c = certify(fam, G, battery=2)
    ca = certify(fam.adjoint(), G, battery=2)
    assert c.extra["T4"] == pytest.approx(ca.extra["T3"], rel=1e-10)


def test_young_mode_tags_and_kappa_error():
    fam = BRSFamily(bump_kernel(1, -4), 0, 1)
    c = certify(fam, G, p=1.5, q=3.0, battery=2)
    assert c.tags["A_circ"] == "upper-bound" and c.tags["B"] == "upper-bound"
    with pytest.raises(ValueError):
        certify(fam, G, kappa=0.0)
    with pytest.raises(ValueError):
        certify(fam, G, p=3.0, q=2.0)


def test_budget_arithmetic():
    c = certify(BRSFamily(bump_kernel(1, -4), 0, 2), G, battery=4)
    C = c.extra["A_p_triangle"] + c.extra["A_q_triangle"] + c.A_circ * np.log(2 + c.B / c.A_circ)
    assert budget(c, 2) == pytest.approx(C * 2 ** (1.5 + 0.5 + 0.5))
    assert c.C == pytest.approx(c.A_p + c.A_q + c.A_circ * np.log(2 + c.B / c.A_circ))


def test_smooth_bump_kappa_fit():
    c = certify(BRSFamily(bump_kernel(1, -4), 0, 0), GridSpec.centered(1, -4, 3), kappa=0.5, battery=2)
    assert fit_kappa(c.extra["regularity_samples"]) >= 0.5


# regularity decay

def test_regularity_bump_slope():
    rep = regularity_decay_check(BRSFamily(bump_kernel(1, -4), 0, 0), GridSpec.centered(1, -5, 3), j=0)
    assert rep["passed"] and rep["slope"] <= -0.5 + 0.1
    assert rep["resolution_floor"] == [5] and rep["norms"][5] == 0.0


def test_regularity_resolution_floor():
    g = GridSpec.centered(1, -1, 3)
    rep = regularity_decay_check(BRSFamily(identity_kernel(1, 0), 0, 0), g, j=0, ks=range(1, 4))
    assert rep["resolution_floor"] == [1, 2, 3]
    assert all(v == 0.0 for v in rep["norms"].values())


# multiplier demo

def test_psi_profiles():
    x = np.linspace(-1, 1, 4001)
    p = psi0(x)
    assert np.all(p[np.abs(x) <= 0.25] == 1.0) and np.all(p[np.abs(x) >= 0.5] == 0.0)
    t = theta_profile(x)
    assert np.all(t[np.abs(x) >= 0.5] == 0.0)


@given(st.integers(1, 10))
def test_psi_telescoping(L):
    x = np.linspace(-3000, 3000, 60001)
    lhs = sum(psi_ell(x, l) for l in range(1, L + 1))
    assert np.abs(lhs - (psi0(2.0 ** (-L) * x) - psi0(x))).max() <= 1e-12


@pytest.fixture(scope="module")
def demo():
    return decompose_multiplier(MultiplierSpec())


def test_multiplier_identity_reconstruction(demo):
    assert demo["partition_residual"] <= 1e-3
    assert demo["reconstruction_error"] <= 1e-2
    assert demo["telescoping_error"] <= 1e-12


def test_multiplier_theta_moments(demo):
    assert demo["moment_order"] == 6
    assert max(demo["theta_moments"]) <= 1e-8


def test_multiplier_series_decay(demo):
    a = [demo["a_circ"][l] for l in sorted(demo["a_circ"])]
    assert a[-1] < 1e-3 * a[0]
    assert demo["B_circ_tail"] <= 1e-3
    assert np.all(np.diff(demo["B_circ_partial"]) >= 0)


def test_multiplier_smooth_symbol():
    spec = MultiplierSpec(symbol=lambda xi: np.exp(-xi ** 2 / 8) * (np.abs(xi) > 0.5) * (np.abs(xi) < 16)
                          * (1 - np.exp(-(np.abs(xi) - 0.5) ** 2)), ell_max=6)
    out = decompose_multiplier(spec, tests=2)
    assert out["reconstruction_error"] <= 1e-2
