import numpy as np
import pytest
from scipy.linalg import fractional_matrix_power
from hypothesis import given, strategies as st

from convexdom.cli import domination_grid, domination_inputs, level_set_split
from convexdom.convexbody import BodyOracle, body_dot
from convexdom.dyadic import CellMask, DyadicCube, GridSpec, SparseFamily, verify_sparse, whitney_decompose
from convexdom.domination import (DominationCertificate, bmo_norm, build_omega, c_qr, com_numbers_check,
                                  commutator_apply, commutator_forms, cz_decompose, jn_check, majorant_check,
                                  multiscale_dominate, single_scale_dominate, sparse_form, sparse_operator_Lr,
                                  sparse_operator_matrix, sparse_operator_norm, threshold_multiplier,
                                  weighted_budget, weighted_experiment, weighted_exponents, weighted_norm)
from convexdom.gridfn import GridFunction, lp_average, pairing
from convexdom.operators import BRSFamily, bump_kernel, certify, random_kernel
from convexdom.weights import MatrixWeight

from oracles import brute_sparse_operator


def _const(grid, vec, mask=None):
    v = np.broadcast_to(np.asarray(vec, float)[:, None], grid.shape + (len(vec), 1)).copy()
    if mask is not None:
        v *= mask.membership[..., None, None]
    return GridFunction(grid, v)


# single scale

def test_single_scale_zero_g():
    grid, Q0 = domination_grid(1, -2, 0)
    fam = BRSFamily(random_kernel(1, -2, seed=1), 0, 0)
    rng = np.random.default_rng(0)
    f, g = domination_inputs(grid, Q0, 2, rng)
    cert = single_scale_dominate(fam.ops[0], f, g.with_values(np.zeros_like(g.values)), 2, 2, 1.0)
    assert cert.lhs == 0 and cert.passed


@given(st.integers(0, 10 ** 6))
def test_single_scale_random(seed):
    grid, Q0 = domination_grid(1, -2, 0)
    fam = BRSFamily(random_kernel(1, -2, seed=seed), 0, 0)
    A = certify(fam, grid, battery=2).A_circ
    f, g = domination_inputs(grid, Q0, 2, np.random.default_rng(seed))
    cert = single_scale_dominate(fam.ops[0], f, g, 2, 2, A, seed=seed)
    assert cert.passed
    assert cert.lhs == pytest.approx(abs(pairing(fam.apply(f), g)), rel=1e-12)
    assert cert.lhs <= cert.rhs * (1 + 1e-9)


# exceptional set and CZ split

def test_threshold_multiplier_example():
    assert threshold_multiplier(1, 2, 0.5, 2.0) == pytest.approx(20.0)


def test_omega_empty_for_constants():
    grid, Q0 = domination_grid(1, -1, 2)
    f = _const(grid, [1.0, -2.0], grid.cube_mask(Q0))
    g = _const(grid, [3.0, 0.5])
    res = build_omega(f, g, Q0, 2.0, 2.0, 0.5)
    assert res.omega.is_empty() and res.E.measure == pytest.approx(grid.cube_mask(Q0).measure)


@given(st.integers(0, 10 ** 6))
def test_omega_leaves_gamma_fraction(seed):
    grid, Q0 = domination_grid(1, -2, 2)
    f, g = domination_inputs(grid, Q0, 2, np.random.default_rng(seed))
    res = build_omega(f, g, Q0, 2.0, 2.0, 0.5)
    assert res.E.measure >= 0.5 * grid.cube_mask(Q0).measure


def test_cz_empty_omega():
    grid, Q0 = domination_grid(1, -1, 2)
    rng = np.random.default_rng(2)
    f, _ = domination_inputs(grid, Q0, 2, rng)
    empty = CellMask(grid, np.zeros(grid.shape, bool))
    split = cz_decompose(f, empty, whitney_decompose(empty), Q0, 2.0)
    assert np.array_equal(split.good.values, f.values) and not split.bad


@pytest.mark.parametrize("seed", range(4))
def test_cz_split_reconstructs(seed):
    f, split = level_set_split(seed, multiplier=1.2)
    total = split.good.values.copy()
    for b in split.bad.values():
        total += b.values
    assert np.abs(total - f.values).max() <= 1e-12 * max(1.0, np.abs(f.values).max())
    assert split.reconstruction_error <= 1e-12 and split.mean_zero_error <= 1e-12
    assert all(split.sup_checks)


def test_cz_constant_on_whitney_cube_has_no_bad_part():
    grid = GridSpec.centered(1, 0, 6)
    Q0 = DyadicCube(1, 4, (0,))
    member = np.zeros(grid.shape, bool)
    member[4 - grid.origin[0]: 8 - grid.origin[0]] = True
    omega = CellMask(grid, member)
    wh = whitney_decompose(omega)
    f = _const(grid, [2.0, -1.0], grid.cube_mask(Q0))
    split = cz_decompose(f, omega, wh, Q0, 2.0)
    for b in split.bad.values():
        assert np.abs(b.values).max() <= 1e-14


# multiscale recursion

def test_multiscale_base_case_matches_single_scale():
    grid, Q0 = domination_grid(1, -2, 0)
    fam = BRSFamily(random_kernel(1, -2, seed=4), 0, 0)
    f, g = domination_inputs(grid, Q0, 2, np.random.default_rng(4))
    c = certify(fam, grid, battery=2)
    ms = multiscale_dominate(fam, f, g, Q0, constants=c)
    ss = single_scale_dominate(fam.ops[0], f, g, 2, 2, c.A_circ)
    assert ms.lhs == pytest.approx(ss.lhs) and ms.passed
    assert [q for q, _ in ms.family] == [q for q, _ in ss.family]


def test_multiscale_one_cell_input_is_chain():
    grid, Q0 = domination_grid(1, -2, 2)
    fam = BRSFamily(bump_kernel(1, -4), 0, 2)
    v = np.zeros(grid.shape + (2, 1))
    v[1 - grid.origin[0]] = [[1.0], [-2.0]]
    f = GridFunction(grid, v)
    g = domination_inputs(grid, Q0, 2, np.random.default_rng(0))[1]
    cert = multiscale_dominate(fam, f, g, Q0, john_M=512)
    assert verify_sparse(cert.family).valid
    cubes = sorted(cert.family.cubes, key=lambda q: -q.level)
    for a, b in zip(cubes, cubes[1:]):
        assert b.parent() == a or b.level == a.level
    assert cert.lhs <= cert.rhs * (1 + 1e-9)


@pytest.mark.parametrize("seed", range(3))
def test_multiscale_random_is_sparse_and_dominated(seed):
    grid, Q0 = domination_grid(1, -2, 2)
    fam = BRSFamily(bump_kernel(1, -4), 0, 2)
    f, g = domination_inputs(grid, Q0, 2, np.random.default_rng(seed))
    cert = multiscale_dominate(fam, f, g, Q0, john_M=512, seed=seed)
    rep = verify_sparse(cert.family)
    assert rep.valid and rep.min_ratio >= 0.5
    assert cert.lhs == pytest.approx(abs(pairing(fam.apply(f), g)), rel=1e-10)
    assert cert.passed and cert.lhs <= cert.rhs * (1 + 1e-9)


# sparse forms and the scalar sparse operator

def test_sparse_form_empty_and_single():
    grid = GridSpec.centered(1, -1, 2)
    rng = np.random.default_rng(0)
    f = GridFunction(grid, rng.standard_normal(grid.shape + (1, 1)))
    g = GridFunction(grid, rng.standard_normal(grid.shape + (1, 1)))
    assert sparse_form(SparseFamily(0.5, []), f, g, 2, 2) == 0
    Q = DyadicCube(1, 0, (0,))
    m = grid.cube_mask(Q)
    val = sparse_form(SparseFamily(0.5, [(Q, m)]), f, g, 1.5, 3.0)
    expect = m.measure * lp_average(f, m, 1.5, 0) * lp_average(g, m, 3.0, 0)
    assert val == pytest.approx(expect, rel=1e-10)


def _partition(grid, level):
    per = 2 ** (level - grid.cell_level)
    qs = [DyadicCube(1, level, (k,)) for k in range(grid.origin[0] // per, (grid.origin[0] + grid.n_cells) // per)]
    return SparseFamily(0.5, [(q, grid.cube_mask(q)) for q in qs])


@given(st.integers(0, 10 ** 6), st.sampled_from([1.5, 2.0, 3.0]))
def test_sparse_operator_vs_brute(seed, r):
    rng = np.random.default_rng(seed)
    grid = GridSpec.centered(1, -1, 2)
    fam = SparseFamily(0.5, [(q, grid.cube_mask(q)) for q in
                              [DyadicCube(1, 1, (-1,)), DyadicCube(1, 0, (0,)), DyadicCube(1, -1, (1,))]])
    w = rng.uniform(0.1, 10.0, grid.n_cells)
    W = MatrixWeight(grid, w[:, None, None] * np.eye(2))
    f = rng.standard_normal(grid.n_cells)
    got = sparse_operator_Lr(fam, W, r, f)
    assert np.allclose(got, brute_sparse_operator(fam.cubes, grid, w, r, f), rtol=1e-12, atol=1e-14)
    # genuinely matrix valued weight against a loop with scipy matrix powers
    B = rng.standard_normal(grid.shape + (2, 2))
    W = MatrixWeight(grid, B @ np.swapaxes(B, -1, -2) + 0.1 * np.eye(2))
    Pm = [np.real(fractional_matrix_power(M, -1 / r)) for M in W.values]
    P = [np.real(fractional_matrix_power(M, 1 / r)) for M in W.values]
    expect = np.zeros(grid.n_cells)
    for Q in fam.cubes:
        cells = np.flatnonzero(grid.cube_mask(Q).membership)
        for y in cells:
            expect[y] += np.mean([np.linalg.norm(Pm[x] @ P[y], 2) * abs(f[x]) for x in cells])
    got = sparse_operator_Lr(fam, W, r, f)
    assert np.allclose(got, expect, rtol=1e-9, atol=1e-12)
    K = sparse_operator_matrix(fam, W, r)
    assert np.allclose(K @ np.abs(f), got, rtol=1e-12, atol=1e-14)


def test_partition_is_averaging_contraction():
    grid = GridSpec.centered(1, -1, 3)
    fam = _partition(grid, 0)
    W = MatrixWeight(grid, np.broadcast_to(np.eye(2), grid.shape + (2, 2)))
    rng = np.random.default_rng(3)
    f = rng.standard_normal(grid.n_cells)
    out = sparse_operator_Lr(fam, W, 2.0, f)
    blocks = np.abs(f).reshape(-1, 2).mean(axis=1)
    assert np.allclose(out, np.repeat(blocks, 2))
    for r in (1.5, 2.0, 4.0):
        assert sparse_operator_norm(sparse_operator_matrix(fam, W, r), r)["norm"] <= 1 + 1e-9


# weights

def test_weighted_exponent_example():
    e = weighted_exponents(2.0, 6.0, 3.0)
    assert e["t"] == pytest.approx(1.5) and e["s"] == pytest.approx(2.0)
    assert e["exp_A"] == pytest.approx(7 / 3)


def test_identity_weight_budget_one():
    grid, Q0 = domination_grid(1, -2, 1)
    W = MatrixWeight(grid, np.broadcast_to(np.eye(2), grid.shape + (2, 2)))
    assert weighted_budget(W, 2.0, 6.0, 3.0)["budget"] == pytest.approx(1.0)
    fam = BRSFamily(bump_kernel(1, -4), 0, 1)
    rep = weighted_experiment(fam, W, 2.0, 6.0, 3.0, battery=3)
    assert np.allclose(rep["ratios"], rep["unweighted"], rtol=1e-10)


@given(st.integers(0, 10 ** 6))
def test_majorant_bounds_body(seed):
    rng = np.random.default_rng(seed)
    grid = GridSpec.centered(1, -1, 2)
    B = rng.standard_normal(grid.shape + (2, 2))
    W = MatrixWeight(grid, B @ np.swapaxes(B, -1, -2) + 0.2 * np.eye(2))
    f = GridFunction(grid, rng.standard_normal(grid.shape + (2, 1)))
    g = GridFunction(grid, rng.standard_normal(grid.shape + (2, 1)))
    rep = majorant_check(f, g, W, DyadicCube(1, 1, (0,)), 2.0, 2.0, 2.0, seed=seed)
    assert rep["passed"]


def test_weighted_norm_identity():
    grid = GridSpec.centered(1, -1, 2)
    W = MatrixWeight(grid, np.broadcast_to(np.eye(2), grid.shape + (2, 2)))
    f = GridFunction(grid, np.random.default_rng(0).standard_normal(grid.shape + (2, 1)))
    h = grid.cell_width
    expect = (np.sum(np.linalg.norm(f.values[..., 0], axis=-1) ** 3) * h) ** (1 / 3)
    assert weighted_norm(f, W, 3.0) == pytest.approx(expect)


# commutators

def test_commutator_constant_field_vanishes():
    grid = GridSpec.centered(1, -2, 4)
    fam = BRSFamily(random_kernel(1, -2, seed=2), 0, 1)
    B = np.broadcast_to(2.5 * np.eye(2), grid.shape + (2, 2))
    f = GridFunction(grid, np.random.default_rng(1).standard_normal(grid.shape + (2, 1)))
    assert np.abs(commutator_apply(B, fam, f).values).max() <= 1e-12


def test_commutator_forms_zero_field():
    grid = GridSpec.centered(1, -1, 2)
    rng = np.random.default_rng(0)
    f = GridFunction(grid, rng.standard_normal(grid.shape + (2, 1)))
    g = GridFunction(grid, rng.standard_normal(grid.shape + (2, 1)))
    fam = _partition(grid, 0)
    assert commutator_forms(fam, np.zeros(grid.shape + (2, 2)), f, g, 2.0, 2.0) == (0.0, 0.0)


def test_c_qr_example():
    assert c_qr(4, 2) == pytest.approx(0.2)


def test_bmo_constant_and_log():
    grid = GridSpec.centered(1, -2, 3)
    assert bmo_norm(np.full(grid.shape, 3.0), grid) == 0.0
    x = (grid.cell_anchors(0) + 0.5) * grid.cell_width
    b = np.log(np.abs(x))
    rep = jn_check(b, grid)
    assert rep["bmo"] > 0 and rep["C_max"] < 10


def test_com_numbers_positive():
    rep = com_numbers_check(thetas=np.linspace(1e-3, 0.5 - 1e-3, 100))
    assert rep["passed"] and rep["c"] > 0
    assert rep["closed_form_error"] <= 1e-12
