import itertools

import numpy as np
import pytest
from hypothesis import given, strategies as st

from convexdom.dyadic import CellMask, DyadicCube, GridSpec
from convexdom.gridfn import (GridFunction, NormTag, Stencil, apply_matrix, convolve, dilate, dual_exponent,
                              finite_difference, lorentz_q1_norm, lp_average, lp_norm, pairing, project,
                              resample, weak_lp_norm)

from oracles import brute_lorentz, brute_weak

G8 = GridSpec.centered(1, 0, 3)
A8 = G8.cell_anchors(0)
seeds = st.integers(0, 10 ** 6)


def _random(grid, rng, n=1, m=1, sparse=0.5, norm=NormTag.EUCLIDEAN):
    v = rng.standard_normal(grid.shape + (n, m)) * (rng.random(grid.shape + (1, 1)) < sparse)
    return GridFunction(grid, v, norm)


def test_normtag_dual_involution():
    for t in NormTag:
        assert t.dual().dual() is t
    assert NormTag.SUM.dual() is NormTag.MAX


@given(seeds, st.sampled_from(list(NormTag)))
def test_norming_vectors(seed, tag):
    v = np.random.default_rng(seed).standard_normal((5, 3))
    w = tag.norming(v)
    assert np.allclose(np.sum(v * w, axis=-1), tag.norm(v))
    assert np.all(tag.dual().norm(w) <= 1 + 1e-12)


def test_dual_exponent():
    assert dual_exponent(1) == np.inf and dual_exponent(np.inf) == 1.0 and dual_exponent(3.0) == 1.5


# lp averages

@pytest.mark.parametrize("p", [1.0, 1.5, 2.0, 7.0, np.inf])
def test_lp_average_constant(p):
    f = GridFunction(G8, np.broadcast_to(np.array([[3.0, 4.0]]), (8, 1, 2)))
    assert lp_average(f, G8.full_mask(), p) == pytest.approx(5.0)


def test_lp_average_two_cells():
    f = GridFunction.scalar(G8, (A8 == 0).astype(float))
    region = G8.cube_mask(DyadicCube(1, 1, (0,)))
    assert lp_average(f, region, 2.0) == pytest.approx(0.5 ** 0.5)


def test_lp_average_empty_region_raises():
    with pytest.raises(ValueError):
        lp_average(GridFunction.zeros(G8), G8.empty_mask(), 2.0)


@given(seeds)
def test_lp_average_monotone_in_p(seed):
    rng = np.random.default_rng(seed)
    f = _random(G8, rng, m=2)
    vals = [lp_average(f, G8.full_mask(), p) for p in (1.0, 1.5, 2.0, 4.0, np.inf)]
    assert all(a <= b + 1e-12 for a, b in zip(vals, vals[1:]))


# weak and Lorentz norms

@pytest.mark.parametrize("p", [1.0, 2.0, 3.0])
def test_indicator_weak_and_lorentz(p):
    f = GridFunction.scalar(G8, ((A8 >= -2) & (A8 < 1)).astype(float))
    assert weak_lp_norm(f, p) == pytest.approx(3.0 ** (1 / p))
    assert lorentz_q1_norm(f, p) == pytest.approx(3.0 ** (1 / p))


def test_two_step_weak_norm():
    f = GridFunction.scalar(G8, 2.0 * (A8 == 0) + ((A8 >= 1) & (A8 < 3)))
    assert weak_lp_norm(f, 1.0) == 3.0


@given(seeds, st.sampled_from([1.0, 1.5, 2.0, 3.0]))
def test_weak_strong_lorentz_oracles(seed, p):
    rng = np.random.default_rng(seed)
    g = GridSpec(1, -2, 2, (0,))
    v = np.round(rng.standard_normal(g.n_cells) * 3) / 2  # repeated levels
    f = GridFunction.scalar(g, v)
    w, s, l = weak_lp_norm(f, p), lp_norm(f, p), lorentz_q1_norm(f, p)
    assert w == pytest.approx(brute_weak(v, g.cell_volume, p), rel=1e-12, abs=1e-14)
    assert l == pytest.approx(brute_lorentz(v, g.cell_volume, p), rel=1e-12, abs=1e-14)
    assert w <= s + 1e-12 and s <= l + 1e-12


# pairing

def test_pairing_examples():
    f = GridFunction.scalar(G8, (A8 == 0).astype(float))
    assert pairing(f, f) == 1.0
    assert pairing(f, GridFunction.zeros(G8)) == 0.0


def test_pairing_shape_mismatch():
    with pytest.raises(ValueError):
        pairing(GridFunction.zeros(G8, 2), GridFunction.zeros(G8, 1))
    with pytest.raises(ValueError):
        pairing(GridFunction.zeros(G8, norm=NormTag.SUM), GridFunction.zeros(G8, norm=NormTag.SUM))


@given(seeds)
def test_pairing_matrix_swap(seed):
    rng = np.random.default_rng(seed)
    f, g = _random(G8, rng, n=2, m=3), _random(G8, rng, n=2, m=3)
    A = rng.standard_normal((2, 2))
    assert pairing(apply_matrix(A, f), g) == pytest.approx(pairing(f, apply_matrix(A.T, g)), abs=1e-12)


@given(seeds, st.sampled_from(list(NormTag)), st.sampled_from([1.0, 1.5, 2.0, 3.0, np.inf]))
def test_holder_on_every_dyadic_cube(seed, tag, p):
    rng = np.random.default_rng(seed)
    g = GridSpec(1, -1, 2, (0,))
    f = _random(g, rng, m=3, sparse=0.8, norm=tag)
    h = _random(g, rng, m=3, sparse=0.8, norm=tag.dual())
    for Q in g.all_dyadic_cubes():
        M = g.cube_mask(Q)
        lhs = abs(pairing(f.restrict(M), h)) / Q.volume
        assert lhs <= lp_average(f, M, p) * lp_average(h, M, dual_exponent(p)) + 1e-12


# finite differences

def test_finite_difference_examples():
    f = GridFunction.scalar(G8, (A8 == 0).astype(float))
    assert np.array_equal(finite_difference(f, 0).values, np.zeros_like(f.values))
    out = finite_difference(f, 1).values.ravel()
    assert np.array_equal(out, (A8 == -1).astype(float) - (A8 == 0))


@given(seeds, st.integers(-9, 9), st.integers(-9, 9))
def test_finite_difference_zero_mean(seed, h1, h2):
    rng = np.random.default_rng(seed)
    g = GridSpec.centered(2, 0, 3)
    v = np.zeros(g.shape)
    v[2:6, 2:6] = rng.standard_normal((4, 4))  # compact support away from the edge
    f = GridFunction.scalar(g, v)
    D = finite_difference(f, (h1 % 3, h2 % 3))
    assert abs(D.values.sum()) < 1e-12
    x, y = 3, 4
    assert D.values[x, y, 0, 0] == pytest.approx(v[x + h1 % 3, y + h2 % 3] - v[x, y])


# dilation, resampling, projection

def test_dilate_examples():
    f = GridFunction.scalar(G8, ((A8 >= 0) & (A8 < 2)).astype(float))
    assert np.array_equal(dilate(f, 0).values, f.values) and dilate(f, 0).grid == G8
    d = dilate(f, 1)
    inside = (d.grid.cell_anchors(0) * d.grid.cell_width >= 0) & (d.grid.cell_anchors(0) * d.grid.cell_width < 1)
    assert np.array_equal(d.values.ravel(), inside.astype(float))


@given(seeds, st.integers(-3, 3), st.integers(1, 2), st.sampled_from([1.0, 2.0, 3.0]))
def test_dilation_norm_scaling(seed, j, d, p):
    rng = np.random.default_rng(seed)
    g = GridSpec.centered(d, -1, 2)
    f = _random(g, rng, m=2)
    assert lp_norm(dilate(f, j), p) ** p == pytest.approx(2.0 ** (-j * d) * lp_norm(f, p) ** p, rel=1e-12)


def test_resample_underflow_raises():
    with pytest.raises(ValueError):
        resample(GridFunction.zeros(G8), G8.with_cell_level(1))
    with pytest.raises(ValueError):
        dilate(GridFunction.zeros(G8), 1, G8)


@given(seeds, st.integers(1, 3))
def test_project_inverts_resample(seed, r):
    rng = np.random.default_rng(seed)
    f = _random(G8, rng, n=2)
    fine = resample(f, G8.with_cell_level(-r))
    assert np.allclose(project(fine, G8).values, f.values, rtol=1e-14, atol=0)
    assert lp_norm(fine, 2.0, 1) == pytest.approx(lp_norm(f, 2.0, 1))


# convolution

def test_convolve_identity_kernel():
    rng = np.random.default_rng(0)
    f = _random(G8, rng, n=2)
    delta = GridFunction.scalar(GridSpec(1, 0, 0, (0,)), [1.0 / G8.cell_volume])
    assert np.allclose(convolve(f, delta).values, f.values)


def _loop_convolve(vals, grid, offsets, mats):
    """``out[x] = vol * sum_a mats[a] f[x - a]`` with explicit cell loops."""
    out = np.zeros(vals.shape[:-1] + (mats.shape[1],))
    for x in itertools.product(*[range(s) for s in grid.shape]):
        for a, M in zip(offsets, mats):
            y = tuple(np.array(x) - a)
            if all(0 <= yi < s for yi, s in zip(y, grid.shape)):
                out[x] += vals[y] @ M.T
    return out * grid.cell_volume


@given(seeds, st.integers(1, 2))
def test_convolve_matches_loops(seed, d):
    rng = np.random.default_rng(seed)
    g = GridSpec.centered(d, -1, 2)
    f = _random(g, rng, n=2, m=2)
    offs = rng.integers(-3, 4, size=(4, d))
    mats = rng.standard_normal((4, 3, 2))
    st_ = Stencil(-1, offs, mats)
    assert np.allclose(convolve(f, st_).values, _loop_convolve(f.values, g, offs, mats), atol=1e-12)


def test_convolve_level_mismatch_raises():
    with pytest.raises(ValueError):
        convolve(GridFunction.zeros(G8), Stencil(-1, np.zeros((1, 1), int), np.ones((1, 1, 1))))


@given(seeds, st.integers(1, 3))
def test_stencil_refine_matches_resampled_kernel(seed, r):
    rng = np.random.default_rng(seed)
    kgrid = GridSpec.centered(1, 0, 2)
    K = GridFunction.scalar(kgrid, rng.standard_normal(kgrid.n_cells))
    a = Stencil.from_kernel(K).refine(-r)
    b = Stencil.from_kernel(resample(K, kgrid.with_cell_level(-r)))
    key = lambda s_: sorted(zip(s_.offsets[:, 0].tolist(), s_.mats[:, 0, 0].tolist()))
    assert key(a) == key(b)
    assert np.array_equal(a.adjoint().adjoint().offsets, a.offsets)
