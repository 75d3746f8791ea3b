import logging
from typing import Callable, NamedTuple

import numpy as np
from scipy import sparse
from scipy.fft import dctn, idctn
from scipy.sparse.linalg import LinearOperator, gmres, spilu, splu

from app.config import settings
from app.exceptions import SolverError
from app.utils.grid_field import Grid2D, ScalarField

logger = logging.getLogger(__name__)
logger.setLevel(logging.INFO)

GridOperator = Callable[[np.ndarray], np.ndarray]

# residuals below this multiple of machine epsilon times |A||x| + |b| are round-off
ROUNDOFF_FACTOR = 64.0 * np.finfo(np.float64).eps
ILU_DROP_TOL = 1e-5
ILU_FILL_FACTOR = 20.0


class LinearSolveResult(NamedTuple):
    solution: ScalarField
    iterations: int
    residual: float


def neumann_eigenvalues(n: int, h: float) -> np.ndarray:
    """Eigenvalues of the mirror-ghost second difference on n nodes; cosine modes diagonalise it."""
    k = np.arange(n)
    return (2.0 * np.cos(np.pi * k / (n - 1)) - 2.0) / h**2


class CosinePreconditioner:
    """
    Exact inverse of the constant-coefficient operator

        u -> u + c4 * lap(lap(u)) - c2 * lap(u)

    with Neumann mirror ghosts, applied through type-I cosine transforms.
    """

    def __init__(self, grid: Grid2D, c4: float, c2: float, workers: int | None = None):
        lam = neumann_eigenvalues(grid.nx, grid.hx)[:, None] + neumann_eigenvalues(grid.ny, grid.hy)[None, :]
        self.symbol = 1.0 + c4 * lam**2 - c2 * lam
        self.workers = workers or settings.THREADS
        if np.min(self.symbol) <= 0:
            raise ValueError("preconditioner symbol must stay positive; use c4, c2 >= 0")

    def __call__(self, values: np.ndarray) -> np.ndarray:
        spectrum = dctn(values, type=1, workers=self.workers)
        return idctn(spectrum / self.symbol, type=1, workers=self.workers)


class FactorizedPreconditioner:
    """
    Sparse LU factors of an assembled substep matrix, applied as a preconditioner.

    Exact when applied to the matrix it was built from; reused while the frozen
    coefficients drift it stays a close approximation. With `drop_tol` an incomplete
    factorisation is built instead, which trades iterations for memory on large grids.
    """

    def __init__(self, matrix: sparse.spmatrix, shape: tuple[int, int], drop_tol: float | None = None):
        csc = sparse.csc_matrix(matrix)
        if drop_tol is None:
            self.factors = splu(csc)
        else:
            self.factors = spilu(csc, drop_tol=drop_tol, fill_factor=ILU_FILL_FACTOR)
        self.shape = shape

    def __call__(self, values: np.ndarray) -> np.ndarray:
        return self.factors.solve(np.ravel(values)).reshape(self.shape)


def solve_substep_linear(
    operator: GridOperator | sparse.spmatrix,
    rhs: ScalarField,
    tol: float,
    maxit: int,
    preconditioner: GridOperator | None = None,
    restart: int = 30,
) -> LinearSolveResult:
    """
    Solve A u = rhs by restarted GMRES.

    `operator` is either an assembled sparse matrix over C-ordered nodal values or a
    callable mapping grid-shaped arrays to grid-shaped arrays. Each of the `maxit`
    cycles runs up to `restart` Krylov iterations and then checks the true residual.
    The solve is accepted once |rhs - A u| / |rhs| <= tol, or once the residual has
    reached the round-off floor of the product A u, which for a stiff fourth-order
    operator can sit above tol. SolverError is raised if neither happens.
    """
    shape = rhs.grid.shape
    size = rhs.values.size
    b = rhs.values.ravel()
    b_norm = float(np.linalg.norm(b))
    if b_norm == 0.0:
        return LinearSolveResult(ScalarField.constant(rhs.grid, 0.0), 0, 0.0)

    if sparse.issparse(operator):
        magnitude = abs(operator)

        def matvec(v: np.ndarray) -> np.ndarray:
            return np.asarray(operator @ v, dtype=np.float64)

        def product_scale(v: np.ndarray) -> float:
            return float(np.linalg.norm(magnitude @ np.abs(v)))

    else:

        def matvec(v: np.ndarray) -> np.ndarray:
            # scipy's Krylov basis must not alias the operator's output
            return np.array(operator(np.reshape(v, shape)), dtype=np.float64).ravel()

        def product_scale(v: np.ndarray) -> float:
            return float(np.linalg.norm(matvec(v)))

    linear_operator = LinearOperator((size, size), matvec=matvec, dtype=np.float64)
    inverse = None
    if preconditioner is not None:
        inverse = LinearOperator(
            (size, size),
            matvec=lambda v: np.array(preconditioner(np.reshape(v, shape)), dtype=np.float64).ravel(),
            dtype=np.float64,
        )

    iterations = 0

    def count(_):
        nonlocal iterations
        iterations += 1

    x = np.zeros(size)
    residual = 1.0
    for _ in range(maxit):
        x, info = gmres(
            linear_operator, b, x0=x, rtol=tol, atol=0.0, restart=restart, maxiter=1, M=inverse,
            callback=count, callback_type="pr_norm",
        )
        if info < 0:
            raise SolverError("Krylov breakdown", residual, iterations)
        absolute = float(np.linalg.norm(b - matvec(x)))
        residual = absolute / b_norm
        if residual <= tol:
            return LinearSolveResult(ScalarField(rhs.grid, x.reshape(shape)), iterations, residual)
        if absolute <= ROUNDOFF_FACTOR * (product_scale(x) + b_norm):
            logger.debug(f"Accepting residual {residual:.3e} at the round-off floor after {iterations} iterations")
            return LinearSolveResult(ScalarField(rhs.grid, x.reshape(shape)), iterations, residual)

    logger.error(f"Linear solve stalled at relative residual {residual:.3e} after {iterations} iterations")
    raise SolverError("linear solve did not converge", residual, iterations)
