import logging
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Literal

import numpy as np
from scipy import sparse

from app.exceptions import GridMismatchError

logger = logging.getLogger(__name__)
logger.setLevel(logging.INFO)

NormKind = Literal["l2", "linf"]


@dataclass(frozen=True)
class Grid2D:
    """
    Node-centred uniform grid on [0, lx] x [0, ly].

    Node (i, j) sits at (i * hx, j * hy); arrays on the grid have shape (nx, ny)
    and are indexed [i, j], x first.
    """

    nx: int
    ny: int
    lx: float = 1.0
    ly: float = 1.0

    def __post_init__(self):
        if self.nx < 3 or self.ny < 3:
            raise ValueError(f"grid needs at least 3 nodes per axis, got {self.nx}x{self.ny}")
        if not (self.lx > 0 and self.ly > 0):
            raise ValueError(f"domain lengths must be positive, got lx={self.lx}, ly={self.ly}")

    @property
    def hx(self) -> float:
        return self.lx / (self.nx - 1)

    @property
    def hy(self) -> float:
        return self.ly / (self.ny - 1)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.nx, self.ny)

    @property
    def area(self) -> float:
        return self.lx * self.ly

    @cached_property
    def x(self) -> np.ndarray:
        return np.linspace(0.0, self.lx, self.nx)

    @cached_property
    def y(self) -> np.ndarray:
        return np.linspace(0.0, self.ly, self.ny)

    def coordinates(self) -> tuple[np.ndarray, np.ndarray]:
        return np.meshgrid(self.x, self.y, indexing="ij")

    @cached_property
    def cell_widths(self) -> tuple[np.ndarray, np.ndarray]:
        """Control-volume widths per axis: full spacing inside, half spacing on the boundary."""
        wx = np.full(self.nx, self.hx)
        wx[[0, -1]] *= 0.5
        wy = np.full(self.ny, self.hy)
        wy[[0, -1]] *= 0.5
        return wx, wy

    @cached_property
    def weights(self) -> np.ndarray:
        wx, wy = self.cell_widths
        return np.outer(wx, wy)

    @cached_property
    def difference_matrices(self) -> tuple[sparse.csr_matrix, sparse.csr_matrix]:
        """Unscaled forward differences from nodes to x faces and to y faces, rows in face-array order."""

        def forward(n: int) -> sparse.csr_matrix:
            return sparse.diags([-np.ones(n - 1), np.ones(n - 1)], [0, 1], shape=(n - 1, n))

        dx = sparse.kron(forward(self.nx), sparse.identity(self.ny), format="csr")
        dy = sparse.kron(sparse.identity(self.nx), forward(self.ny), format="csr")
        return dx, dy

    def refined(self) -> "Grid2D":
        return Grid2D(2 * self.nx - 1, 2 * self.ny - 1, self.lx, self.ly)

    def coarsened(self) -> "Grid2D":
        if (self.nx - 1) % 2 or (self.ny - 1) % 2:
            raise GridMismatchError(f"grid {self.nx}x{self.ny} has no nested coarse grid")
        return Grid2D((self.nx - 1) // 2 + 1, (self.ny - 1) // 2 + 1, self.lx, self.ly)


@dataclass(frozen=True, eq=False)
class ScalarField:
    grid: Grid2D
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.shape != self.grid.shape:
            raise GridMismatchError(f"values of shape {values.shape} do not fit grid {self.grid.shape}")
        if not np.all(np.isfinite(values)):
            raise FloatingPointError("field contains non-finite values")
        object.__setattr__(self, "values", values)

    @classmethod
    def constant(cls, grid: Grid2D, value: float) -> "ScalarField":
        return cls(grid, np.full(grid.shape, float(value)))

    @classmethod
    def from_function(cls, grid: Grid2D, fn: Callable[[np.ndarray, np.ndarray], np.ndarray]) -> "ScalarField":
        xx, yy = grid.coordinates()
        return cls(grid, np.broadcast_to(fn(xx, yy), grid.shape).astype(np.float64))

    def with_values(self, values: np.ndarray) -> "ScalarField":
        return ScalarField(self.grid, values)

    def min(self) -> float:
        return float(self.values.min())

    def max(self) -> float:
        return float(self.values.max())


def _check_same_grid(*fields: ScalarField) -> Grid2D:
    grid = fields[0].grid
    for other in fields[1:]:
        if other.grid != grid:
            raise GridMismatchError(f"fields live on different grids: {grid} vs {other.grid}")
    return grid


def _face_means(c: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    return 0.5 * (c[1:, :] + c[:-1, :]), 0.5 * (c[:, 1:] + c[:, :-1])


def flux_divergence(
    grid: Grid2D,
    u: np.ndarray,
    face_x: np.ndarray | None = None,
    face_y: np.ndarray | None = None,
) -> np.ndarray:
    """
    Array kernel behind `laplacian` and `div_coeff_grad`.

    Face fluxes c_f * (u_R - u_L) / h are summed into the node control volumes and
    divided by their widths; no flux leaves through the boundary. Missing face
    coefficients mean unit coefficients.
    """
    wx, wy = grid.cell_widths
    flux_x = (u[1:, :] - u[:-1, :]) / grid.hx
    flux_y = (u[:, 1:] - u[:, :-1]) / grid.hy
    if face_x is not None:
        flux_x = face_x * flux_x
    if face_y is not None:
        flux_y = face_y * flux_y

    div_x = np.zeros_like(u)
    div_x[:-1, :] += flux_x
    div_x[1:, :] -= flux_x
    div_y = np.zeros_like(u)
    div_y[:, :-1] += flux_y
    div_y[:, 1:] -= flux_y
    return div_x / wx[:, None] + div_y / wy[None, :]


def coefficient_divergence(grid: Grid2D, c: np.ndarray, u: np.ndarray) -> np.ndarray:
    face_x, face_y = _face_means(c)
    return flux_divergence(grid, u, face_x, face_y)


def divergence_matrix(grid: Grid2D, c: np.ndarray) -> sparse.csr_matrix:
    """
    Sparse matrix of u -> coefficient_divergence(grid, c, u) acting on C-ordered raveled
    nodal values (node (i, j) is row i * ny + j).
    """
    wx, wy = grid.cell_widths
    dx, dy = grid.difference_matrices
    face_x, face_y = _face_means(c)
    inv_wx = sparse.diags(np.repeat(1.0 / wx, grid.ny))
    inv_wy = sparse.diags(np.tile(1.0 / wy, grid.nx))
    x_part = inv_wx @ dx.T @ sparse.diags(face_x.ravel() / grid.hx) @ dx
    y_part = inv_wy @ dy.T @ sparse.diags(face_y.ravel() / grid.hy) @ dy
    return -(x_part + y_part).tocsr()


def gradient_square(grid: Grid2D, u: np.ndarray) -> np.ndarray:
    wx, wy = grid.cell_widths
    sq_x = ((u[1:, :] - u[:-1, :]) / grid.hx) ** 2
    sq_y = ((u[:, 1:] - u[:, :-1]) / grid.hy) ** 2

    acc_x = np.zeros_like(u)
    acc_x[:-1, :] += sq_x
    acc_x[1:, :] += sq_x
    acc_y = np.zeros_like(u)
    acc_y[:, :-1] += sq_y
    acc_y[:, 1:] += sq_y
    # interior nodes average their two faces, boundary nodes take their single inward face
    return acc_x * (0.5 * grid.hx / wx)[:, None] + acc_y * (0.5 * grid.hy / wy)[None, :]


def laplacian(u: ScalarField) -> ScalarField:
    """
    Five-point Laplacian with mirror ghosts (u[-1] = u[1]) on every side.

    On the boundary this reads 2 (u[1] - u[0]) / h^2 along the normal axis, which is
    the same flux form `div_coeff_grad` uses, so the two agree bit for bit at c = 1.
    """
    return u.with_values(flux_divergence(u.grid, u.values))


def div_coeff_grad(c: ScalarField, u: ScalarField) -> ScalarField:
    """
    Conservative discretisation of div(c grad u) under homogeneous Neumann conditions.

    Face coefficients are the arithmetic mean of the two adjacent nodes. The operator
    is symmetric and negative semi-definite in the trapezoid-weighted inner product,
    and its weighted integral vanishes.
    """
    grid = _check_same_grid(c, u)
    return u.with_values(coefficient_divergence(grid, c.values, u.values))


def grad_sq(u: ScalarField) -> ScalarField:
    """
    Nodal |grad u|^2 from one-sided differences.

    Each axis contributes the mean of the squared forward and backward differences;
    boundary nodes use their inward difference. With this choice the weighted sum
    of c * grad_sq(u) / 2 has gradient -W * div_coeff_grad(c, u) exactly.

    On a linear ramp this gives the slope squared at the boundary nodes too. The
    mirror-ghost central difference would give 0 there and lose the exact
    energy/chemical-potential pairing above.
    """
    return u.with_values(gradient_square(u.grid, u.values))


def integrate(u: ScalarField) -> float:
    return float(np.sum(u.grid.weights * u.values))


def inner(u: ScalarField, v: ScalarField) -> float:
    grid = _check_same_grid(u, v)
    return float(np.sum(grid.weights * u.values * v.values))


def norm(u: ScalarField, kind: NormKind = "l2") -> float:
    if kind == "l2":
        return float(np.sqrt(np.sum(u.grid.weights * u.values**2)))
    if kind == "linf":
        return float(np.max(np.abs(u.values)))
    raise ValueError(f"unknown norm kind: {kind}")


def coarsen_compare(u_fine: ScalarField, u_coarse: ScalarField) -> ScalarField:
    """Difference between a fine solution injected onto the nested coarse grid and a coarse solution."""
    fine, coarse = u_fine.grid, u_coarse.grid
    nested = (
        fine.nx - 1 == 2 * (coarse.nx - 1)
        and fine.ny - 1 == 2 * (coarse.ny - 1)
        and fine.lx == coarse.lx
        and fine.ly == coarse.ly
    )
    if not nested:
        raise GridMismatchError(f"{fine.nx}x{fine.ny} grid is not a 2:1 refinement of {coarse.nx}x{coarse.ny}")
    return u_coarse.with_values(u_fine.values[::2, ::2] - u_coarse.values)
