import numpy as np
import pytest
from scipy import sparse

from app.exceptions import SolverError
from app.services.solver import (
    CosinePreconditioner,
    FactorizedPreconditioner,
    neumann_eigenvalues,
    solve_substep_linear,
)
from app.utils.grid_field import Grid2D, ScalarField, divergence_matrix, laplacian


def test_identity_operator_converges_at_once(grid, rng):
    rhs = ScalarField(grid, rng.standard_normal(grid.shape))
    result = solve_substep_linear(lambda v: v, rhs, tol=1e-12, maxit=5)
    assert result.iterations <= 1
    np.testing.assert_allclose(result.solution.values, rhs.values, rtol=1e-12)


def test_zero_rhs_short_circuits(grid):
    result = solve_substep_linear(lambda v: 2.0 * v, ScalarField.constant(grid, 0.0), tol=1e-10, maxit=5)
    assert result.iterations == 0
    assert np.all(result.solution.values == 0.0)


def test_diagonal_system_is_solved_to_tolerance(grid, rng):
    diagonal = 1.0 + rng.random(grid.shape)
    rhs = ScalarField(grid, rng.standard_normal(grid.shape))
    result = solve_substep_linear(lambda v: diagonal * v, rhs, tol=1e-10, maxit=50)
    assert result.residual <= 1e-10
    np.testing.assert_allclose(diagonal * result.solution.values, rhs.values, atol=1e-8)


def test_stalled_solve_raises_with_residual(grid, rng):
    diagonal = np.logspace(0, 8, grid.nx * grid.ny).reshape(grid.shape)
    rhs = ScalarField(grid, rng.standard_normal(grid.shape))
    with pytest.raises(SolverError) as info:
        solve_substep_linear(lambda v: diagonal * v, rhs, tol=1e-14, maxit=1, restart=2)
    assert info.value.residual > 1e-14
    assert info.value.iterations >= 1


def test_neumann_eigenvalues():
    lam = neumann_eigenvalues(5, 0.25)
    assert lam[0] == 0.0
    assert lam[-1] == pytest.approx(-4.0 / 0.25**2)


def test_cosine_preconditioner_inverts_constant_operator(rng):
    grid = Grid2D(17, 33, lx=1.0, ly=2.0)
    c4, c2 = 1e-3, 0.5
    u = ScalarField(grid, rng.standard_normal(grid.shape))
    lap = laplacian(u)
    applied = u.values + c4 * laplacian(lap).values - c2 * lap.values
    recovered = CosinePreconditioner(grid, c4, c2, workers=1)(applied)
    np.testing.assert_allclose(recovered, u.values, atol=1e-9)


def test_cosine_preconditioner_rejects_negative_coefficients(grid):
    with pytest.raises(ValueError):
        CosinePreconditioner(grid, c4=0.0, c2=-10.0)


def test_operator_output_is_copied_before_krylov_use(grid, rng):
    rhs = ScalarField(grid, rng.standard_normal(grid.shape))
    scratch = np.zeros(grid.shape)

    def shared_buffer(v):
        scratch[...] = 3.0 * v
        return scratch

    result = solve_substep_linear(shared_buffer, rhs, tol=1e-12, maxit=5)
    np.testing.assert_allclose(3.0 * result.solution.values, rhs.values, rtol=1e-10)


def _fourth_order_matrix(grid: Grid2D, rng) -> sparse.csr_matrix:
    """I - dt div(M grad(-c div(g grad) + k)) with rough positive coefficients."""
    size = grid.nx * grid.ny
    m = 1e-3 * (0.1 + rng.random(grid.shape))
    g = 0.5 + rng.random(grid.shape)
    k = 10.0 + rng.random(grid.shape)
    inner = sparse.diags(k.ravel()) - 0.01 * divergence_matrix(grid, g)
    return (sparse.identity(size) - 0.5 * divergence_matrix(grid, m) @ inner).tocsr()


def test_sparse_system_matches_dense_direct_solve(rng):
    grid = Grid2D(17, 17)
    matrix = _fourth_order_matrix(grid, rng)
    rhs = ScalarField(grid, rng.standard_normal(grid.shape))
    result = solve_substep_linear(matrix, rhs, tol=1e-12, maxit=50)
    expected = np.linalg.solve(matrix.toarray(), rhs.values.ravel())
    np.testing.assert_allclose(result.solution.values.ravel(), expected, rtol=1e-8, atol=1e-10)


def test_callable_and_matrix_operators_agree(rng):
    grid = Grid2D(17, 17)
    matrix = _fourth_order_matrix(grid, rng)
    rhs = ScalarField(grid, rng.standard_normal(grid.shape))
    from_matrix = solve_substep_linear(matrix, rhs, tol=1e-11, maxit=50)
    from_callable = solve_substep_linear(lambda v: (matrix @ v.ravel()).reshape(grid.shape), rhs, tol=1e-11, maxit=50)
    np.testing.assert_allclose(from_matrix.solution.values, from_callable.solution.values, rtol=1e-8, atol=1e-10)


def test_exact_factors_converge_in_one_iteration(rng):
    grid = Grid2D(17, 17)
    matrix = _fourth_order_matrix(grid, rng)
    rhs = ScalarField(grid, rng.standard_normal(grid.shape))
    preconditioner = FactorizedPreconditioner(matrix, grid.shape)
    result = solve_substep_linear(matrix, rhs, tol=1e-10, maxit=5, preconditioner=preconditioner)
    assert result.iterations <= 2
    assert result.residual <= 1e-10


def test_incomplete_factors_still_converge(rng):
    grid = Grid2D(17, 17)
    matrix = _fourth_order_matrix(grid, rng)
    rhs = ScalarField(grid, rng.standard_normal(grid.shape))
    preconditioner = FactorizedPreconditioner(matrix, grid.shape, drop_tol=1e-3)
    result = solve_substep_linear(matrix, rhs, tol=1e-10, maxit=20, preconditioner=preconditioner)
    assert result.residual <= 1e-10


def test_round_off_floor_accepts_unreachable_tolerance(rng):
    # entries near 1e12 with an O(1) right-hand side: the true residual cannot reach 1e-15
    grid = Grid2D(9, 9)
    size = grid.nx * grid.ny
    stiff = sparse.identity(size) + 1e12 * sparse.diags(rng.random(size) + 0.5)
    rhs = ScalarField(grid, rng.standard_normal(grid.shape))
    result = solve_substep_linear(stiff.tocsr(), rhs, tol=1e-18, maxit=10, restart=10)
    np.testing.assert_allclose(stiff @ result.solution.values.ravel(), rhs.values.ravel(), rtol=1e-10, atol=1e-12)
