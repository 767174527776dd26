import time

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from pmors.pareto import (SolverInputError, combined_direction, frank_wolfe_solve, gram_matrix,
                          line_search_wstar, simplex_grid, solve_gradients, two_objective_weights)


def grid_minimum(m, step=0.01):
    pts = simplex_grid(m.shape[0], step)
    return float(np.min(np.einsum("ni,ij,nj->n", pts, m, pts)))


# --- gram_matrix -----------------------------------------------------------

def test_gram_orthonormal():
    assert np.array_equal(gram_matrix([[1, 0], [0, 1]]), np.eye(2))


def test_gram_single_vector():
    assert np.array_equal(gram_matrix([[2, 0]]), [[4.0]])


def test_gram_three_vectors_against_loop():
    g = [[1, 1], [1, -1], [2, 0]]
    expected = [[sum(a * b for a, b in zip(gi, gj)) for gj in g] for gi in g]
    assert expected == [[2, 0, 2], [0, 2, 2], [2, 2, 4]]
    assert np.array_equal(gram_matrix(g), expected)


def test_gram_rejects_ragged_and_nonfinite():
    with pytest.raises(SolverInputError):
        gram_matrix([[1, 2], [1]])
    with pytest.raises(SolverInputError):
        gram_matrix([[1.0, np.nan]])
    with pytest.raises(SolverInputError):
        gram_matrix([])


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 8)),
              elements=st.floats(-1e3, 1e3)))
def test_gram_symmetric_psd(g):
    m = gram_matrix(g)
    assert np.array_equal(m, m.T)
    assert np.all(np.diag(m) >= 0)
    eig = np.linalg.eigvalsh(m)
    assert eig.min() >= -1e-8 * max(np.abs(m).max(), 1.0)


# --- line search -----------------------------------------------------------

def test_wstar_orthogonal_equal_norm():
    assert line_search_wstar(0, np.array([0.0, 1.0]), np.eye(2)) == pytest.approx(0.5)


def test_wstar_coincident_points_returns_one():
    m = np.array([[1.0, 1.0], [1.0, 1.0]])
    assert line_search_wstar(0, np.array([0.0, 1.0]), m) == 1.0


def test_wstar_clipped_to_zero():
    # x1 = (2,0), x2 = (1,0)
    m = gram_matrix([[2, 0], [1, 0]])
    assert line_search_wstar(0, np.array([0.0, 1.0]), m) == 0.0


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_wstar_minimises_segment(seed):
    rng = np.random.default_rng(seed)
    g = rng.normal(size=(3, 4))
    m = gram_matrix(g)
    alpha = rng.dirichlet(np.ones(3))
    a = int(rng.integers(3))
    w = line_search_wstar(a, alpha, m)
    x1, x2 = g[a], alpha @ g
    ws = np.linspace(0, 1, 2001)
    vals = [np.sum((t * x1 + (1 - t) * x2) ** 2) for t in ws]
    assert np.sum((w * x1 + (1 - w) * x2) ** 2) <= min(vals) + 1e-9


# --- frank_wolfe_solve -----------------------------------------------------

def test_opposing_gradients_are_stationary():
    g = np.array([0.3, -1.2, 2.0])
    res = solve_gradients([g, -g])
    assert res.alpha == pytest.approx([0.5, 0.5])
    assert res.combined_norm_sq < 1e-12
    assert res.stationary


def test_single_objective():
    res = frank_wolfe_solve(gram_matrix([[3.0, 4.0]]))
    assert res.alpha.tolist() == [1.0]
    assert res.combined_norm_sq == pytest.approx(25.0)
    assert res.iterations == 1


def test_standard_basis():
    res = frank_wolfe_solve(np.eye(3))
    assert res.alpha == pytest.approx([1 / 3] * 3, abs=1e-9)
    assert res.combined_norm_sq == pytest.approx(1 / 3)
    assert res.combined_norm_sq <= grid_minimum(np.eye(3)) + 1e-6


def test_seeded_instance_matches_grid():
    g = np.random.default_rng(7).normal(size=(3, 20))
    m = gram_matrix(g)
    assert frank_wolfe_solve(m).combined_norm_sq <= grid_minimum(m) + 1e-6


def test_rejects_bad_inputs():
    with pytest.raises(SolverInputError):
        frank_wolfe_solve(np.zeros((0, 0)))
    with pytest.raises(SolverInputError):
        frank_wolfe_solve(np.array([[1.0, np.inf], [np.inf, 1.0]]))
    with pytest.raises(SolverInputError):
        frank_wolfe_solve(np.eye(2), max_iter=0)
    with pytest.raises(SolverInputError):
        frank_wolfe_solve(np.eye(2), init="bogus")


def test_random_init_is_seeded():
    m = gram_matrix(np.random.default_rng(1).normal(size=(4, 10)))
    a = frank_wolfe_solve(m, init="random", seed=5)
    b = frank_wolfe_solve(m, init="random", seed=5)
    assert np.array_equal(a.alpha, b.alpha)


def test_tie_break_prefers_lowest_index():
    # from the uniform start vertices 0 and 1 tie for the smallest (M alpha)_r
    m = np.diag([1.0, 1.0, 4.0])
    res = frank_wolfe_solve(m, max_iter=1, away_steps=False)
    assert res.alpha[0] > res.alpha[1] == pytest.approx(res.alpha[2])


def test_vanilla_variant_still_on_simplex():
    m = gram_matrix(np.random.default_rng(3).normal(size=(4, 6)))
    res = frank_wolfe_solve(m, away_steps=False)
    assert res.alpha.sum() == pytest.approx(1.0, abs=1e-9)
    assert np.all(res.alpha >= 0)


@settings(max_examples=80, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 4), st.integers(1, 12))
def test_result_invariants(seed, t, d):
    rng = np.random.default_rng(seed)
    m = gram_matrix(rng.normal(size=(t, d)) * rng.uniform(0.01, 10))
    res = frank_wolfe_solve(m)
    assert abs(res.alpha.sum() - 1.0) <= 1e-9
    assert np.all(res.alpha >= 0)
    assert res.combined_norm_sq == pytest.approx(float(res.alpha @ m @ res.alpha), abs=1e-9, rel=1e-9)
    assert res.stationary == (res.combined_norm_sq <= 1e-8)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(2, 4))
def test_objective_never_increases(seed, t):
    m = gram_matrix(np.random.default_rng(seed).normal(size=(t, 6)))
    prev = np.inf
    for k in range(1, 30):
        obj = frank_wolfe_solve(m, max_iter=k, conv_tol=0.0).combined_norm_sq
        assert obj <= prev + 1e-12
        prev = obj


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.01, 100.0))
def test_scaling_keeps_argmin(seed, c):
    g = np.random.default_rng(seed).normal(size=(2, 7))
    a = frank_wolfe_solve(gram_matrix(g), max_iter=1000, conv_tol=0.0)
    b = frank_wolfe_solve(gram_matrix(c * g), max_iter=1000, conv_tol=0.0)
    assert np.allclose(a.alpha, b.alpha, atol=1e-8)
    assert b.combined_norm_sq == pytest.approx(c * c * a.combined_norm_sq, rel=1e-8, abs=1e-12)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_two_objective_closed_form(seed):
    g = np.random.default_rng(seed).normal(size=(2, 9))
    m = gram_matrix(g)
    fw = frank_wolfe_solve(m, max_iter=1000, conv_tol=0.0)
    assert np.allclose(two_objective_weights(m), fw.alpha, atol=1e-8)


def test_combined_direction_examples():
    assert combined_direction([[3, 4]], [1.0]).tolist() == [3, 4]
    assert combined_direction([[1, 0], [0, 1]], [0.5, 0.5]).tolist() == [0.5, 0.5]
    assert combined_direction([[1, 2], [-1, -2]], [0.5, 0.5]).tolist() == [0, 0]


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(2, 4))
def test_min_norm_direction_is_common_descent(seed, t):
    g = np.random.default_rng(seed).normal(size=(t, 5))
    res = solve_gradients(g, max_iter=1000, conv_tol=0.0)
    d = combined_direction(g, res.alpha)
    if not res.stationary:
        assert np.all(g @ d >= -1e-8)


def test_oracle_runtime_budget():
    rng = np.random.default_rng(0)
    t0 = time.perf_counter()
    for _ in range(20):
        frank_wolfe_solve(gram_matrix(rng.normal(size=(4, 50))))
    assert time.perf_counter() - t0 < 1.0


def test_result_serialises():
    doc = frank_wolfe_solve(np.eye(2)).to_dict()
    assert set(doc) == {"alpha", "combined_norm_sq", "iterations", "stationary"}
    assert doc["alpha"] == pytest.approx([0.5, 0.5])


@pytest.mark.parametrize("m", [[[1.0, 2.0], [3.0, 4.0]], [[-1.0, 0.0], [0.0, 1.0]], [[1.0, 2.0], [2.0, 1.0]]])
def test_rejects_matrices_that_are_not_gram(m):
    with pytest.raises(SolverInputError):
        frank_wolfe_solve(np.array(m))
