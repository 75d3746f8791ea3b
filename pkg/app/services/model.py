import logging
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable

import numpy as np

from app.api.schemas import SpreadingReport
from app.exceptions import GridMismatchError
from app.services.tension import CLAMP, DEFAULT_ALPHA, GammaSet, SurfaceTensions, TensionJet, build_gamma_n
from app.utils.grid_field import Grid2D, ScalarField, coefficient_divergence, gradient_square, integrate

logger = logging.getLogger(__name__)
logger.setLevel(logging.INFO)

HEALTHY_BOUND = 1.5


@dataclass(frozen=True, eq=False)
class PhaseState:
    """Phase fields (phi_1, ..., phi_{N-1}) on one grid; for three phases psi = phi_1 and phi = phi_2."""

    fields: tuple[ScalarField, ...]
    time: float = 0.0

    def __post_init__(self):
        fields = tuple(self.fields)
        if not fields:
            raise ValueError("a phase state needs at least one field")
        for f in fields[1:]:
            if f.grid != fields[0].grid:
                raise GridMismatchError("all phase fields must share one grid")
        object.__setattr__(self, "fields", fields)

    @property
    def grid(self) -> Grid2D:
        return self.fields[0].grid

    @property
    def n_phases(self) -> int:
        return len(self.fields) + 1

    @property
    def psi(self) -> ScalarField:
        return self.fields[0]

    @property
    def phi(self) -> ScalarField:
        if len(self.fields) < 2:
            raise ValueError("phi is only defined for three or more phases")
        return self.fields[1]

    def field(self, k: int) -> ScalarField:
        return self.fields[k - 1]

    def arrays(self) -> list[np.ndarray]:
        return [f.values for f in self.fields]

    def with_field(self, k: int, new: ScalarField) -> "PhaseState":
        fields = list(self.fields)
        fields[k - 1] = new
        return PhaseState(tuple(fields), self.time)

    def with_time(self, time: float) -> "PhaseState":
        return PhaseState(self.fields, time)

    def is_healthy(self) -> bool:
        return all(np.max(np.abs(f.values)) <= HEALTHY_BOUND for f in self.fields)


@dataclass(frozen=True)
class ModelParams:
    epsilon: float
    tensions: SurfaceTensions
    gammas: GammaSet
    mobility: tuple[float, ...]
    mob_exponents: tuple[int, ...]
    alpha: float = DEFAULT_ALPHA
    epsilons: tuple[float, ...] | None = None

    def __post_init__(self):
        n_fields = self.tensions.n_phases - 1
        if not self.epsilon > 0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")
        if len(self.mobility) != n_fields or any(not m > 0 for m in self.mobility):
            raise ValueError(f"need {n_fields} positive mobility constants, got {self.mobility}")
        if len(self.mob_exponents) < max(n_fields - 1, 0) or any(
            int(a) != a or a < 1 for a in self.mob_exponents
        ):
            raise ValueError(f"mobility exponents must be integers >= 1, got {self.mob_exponents}")
        epsilons = self.epsilons or (self.epsilon,) * n_fields
        if len(epsilons) != n_fields or any(not e > 0 for e in epsilons):
            raise ValueError(f"need {n_fields} positive interface widths, got {epsilons}")
        object.__setattr__(self, "epsilons", tuple(float(e) for e in epsilons))

    @classmethod
    def create(
        cls,
        epsilon: float,
        tensions: SurfaceTensions,
        alpha: float = DEFAULT_ALPHA,
        mobility: float | tuple[float, ...] = 1e-4,
        mob_exponents: int | tuple[int, ...] = 4,
        epsilons: tuple[float, ...] | None = None,
        allow_unstable_alpha: bool = False,
    ) -> "ModelParams":
        """Build parameters and their gamma functions; scalar mobility values apply to every field."""
        n_fields = tensions.n_phases - 1
        mobility = tuple(mobility) if isinstance(mobility, (tuple, list)) else (mobility,)
        if len(mobility) == 1:
            mobility = mobility * n_fields
        mob_exponents = tuple(mob_exponents) if isinstance(mob_exponents, (tuple, list)) else (mob_exponents,)
        if len(mob_exponents) == 1:
            mob_exponents = mob_exponents * max(n_fields - 1, 1)
        gammas = build_gamma_n(tensions, alpha, allow_unstable_alpha=allow_unstable_alpha)
        return cls(epsilon, tensions, gammas, mobility, mob_exponents, alpha, epsilons)

    @property
    def n_phases(self) -> int:
        return self.tensions.n_phases

    def eps(self, i: int) -> float:
        return self.epsilons[i - 1]


def double_well(z):
    """F(z) = (z^2 - 1)^2 / 4 with f = F' and f', clamped like the tension functions."""
    z = np.asarray(z, dtype=np.float64)
    zc = np.clip(z, -CLAMP, CLAMP)
    f = zc**3 - zc
    F = 0.25 * (zc * zc - 1.0) ** 2 + f * (z - zc)
    df = np.where(z == zc, 3.0 * zc * zc - 1.0, 0.0)
    return F, f, df


@lru_cache(maxsize=None)
def lipschitz_double_well(samples: int = 2001) -> float:
    _, _, df = double_well(np.linspace(-CLAMP, CLAMP, samples))
    return float(np.max(np.abs(df)))


def _check_fields(state: PhaseState, p: ModelParams) -> None:
    if state.n_phases != p.n_phases:
        raise ValueError(f"state has {state.n_phases} phases, parameters describe {p.n_phases}")


def gamma_jets(state: PhaseState, p: ModelParams) -> list[TensionJet]:
    values = state.arrays()
    return [p.gammas.jet(i, values) for i in range(1, p.n_phases)]


def local_energy(u: ScalarField, eps: float) -> np.ndarray:
    """g(u) = eps/2 |grad u|^2 + F(u)/eps, nodewise."""
    F, _, _ = double_well(u.values)
    return 0.5 * eps * gradient_square(u.grid, u.values) + F / eps


def free_energy(state: PhaseState, p: ModelParams) -> float:
    _check_fields(state, p)
    jets = gamma_jets(state, p)
    total = 0.0
    for i, (u, jet) in enumerate(zip(state.fields, jets), start=1):
        total += integrate(u.with_values(jet.value * local_energy(u, p.eps(i))))
    return total


def chem_potentials(state: PhaseState, p: ModelParams) -> list[ScalarField]:
    """
    mu_i = -eps_i div(gamma_i grad phi_i) + gamma_i f(phi_i) / eps_i
           + sum_j d gamma_j / d phi_i * g_j(phi_j).
    """
    _check_fields(state, p)
    grid = state.grid
    jets = gamma_jets(state, p)
    energies = [local_energy(u, p.eps(j)) for j, u in enumerate(state.fields, start=1)]
    potentials = []
    for i, u in enumerate(state.fields, start=1):
        eps = p.eps(i)
        gamma = jets[i - 1].value
        _, f, _ = double_well(u.values)
        mu = -eps * coefficient_divergence(grid, gamma, u.values) + gamma * f / eps
        for j, jet in enumerate(jets):
            if j != i - 1:
                mu = mu + jet.gradient[i - 1] * energies[j]
        potentials.append(u.with_values(mu))
    return potentials


def mobility(i: int, state: PhaseState, p: ModelParams) -> ScalarField:
    """M_1 = m_1; M_i = m_i prod_{j<i} (max(1 + phi_j, 0) / 2)^(2 a_j), vanishing in the bulk of phases 1..i-1."""
    if not 1 <= i <= p.n_phases - 1:
        raise IndexError(f"mobility index {i} out of range for {p.n_phases} phases")
    values = np.full(state.grid.shape, p.mobility[i - 1])
    for j in range(1, i):
        base = np.maximum(1.0 + state.field(j).values, 0.0) / 2.0
        values = values * base ** (2 * p.mob_exponents[j - 1])
    return ScalarField(state.grid, values)


def phase_fractions(state: PhaseState) -> list[ScalarField]:
    """Nested-product concentrations c_1, ..., c_N of the N phases; they sum to one at every node."""
    fractions = []
    carry = np.ones(state.grid.shape)
    for u in state.fields:
        fractions.append(u.with_values(carry * (1.0 - u.values) / 2.0))
        carry = carry * (1.0 + u.values) / 2.0
    fractions.append(state.fields[-1].with_values(carry))
    return fractions


def volumes(state: PhaseState) -> list[float]:
    return [integrate(c) for c in phase_fractions(state)]


def spreading_coefficients(s: SurfaceTensions) -> SpreadingReport:
    """S_i = sigma_ij + sigma_ik - sigma_jk; partial spreading if every S_i > 0, total if some S_i < 0."""
    if s.n_phases != 3:
        raise ValueError("spreading coefficients are defined for three phases")
    s23, s12, s13 = s.triple
    coefficients = (s12 + s13 - s23, s12 + s23 - s13, s13 + s23 - s12)
    if all(c > 0 for c in coefficients):
        regime = "partial"
    elif any(c < 0 for c in coefficients):
        regime = "total"
    else:
        regime = "critical"
    return SpreadingReport(coefficients=coefficients, regime=regime)


def _distance(xx, yy, cx, cy, stretch=1.0):
    return np.sqrt((xx - cx) ** 2 / stretch + (yy - cy) ** 2)


def _square_cross(xx, yy, grid, eps):
    return [np.tanh((yy - 0.5 * grid.ly) / eps), np.tanh((xx - 0.5 * grid.lx) / eps)]


def _absent_phase1(xx, yy, grid, eps):
    ellipse = _distance(xx, yy, 0.5 * grid.lx, 0.5 * grid.ly, stretch=1.7)
    return [np.ones_like(xx), np.tanh((ellipse - 0.2) / eps)]


def _liquid_lens(xx, yy, grid, eps):
    r = _distance(xx, yy, 0.5 * grid.lx, 0.5 * grid.ly)
    return [np.tanh((r - 0.15) / eps), np.tanh((yy - 0.5 * grid.ly) / eps)]


def _two_droplets_psi(xx, yy, grid, eps):
    left = _distance(xx, yy, 0.35 * grid.lx, 0.5 * grid.ly)
    right = _distance(xx, yy, 0.65 * grid.lx, 0.5 * grid.ly)
    return 1.0 - np.tanh((right - 0.15) / eps) - np.tanh((left - 0.15) / eps), right


def _two_droplets_sym(xx, yy, grid, eps):
    psi, _ = _two_droplets_psi(xx, yy, grid, eps)
    return [psi, np.tanh((xx - 0.5 * grid.lx) / eps)]


def _two_droplets_right(xx, yy, grid, eps):
    psi, right = _two_droplets_psi(xx, yy, grid, eps)
    return [psi, np.tanh((0.15 - right) / eps)]


def _stacked_layers(xx, yy, grid, eps, n_fields):
    # phase k fills the k-th horizontal band from the bottom
    return [np.tanh((yy - k * grid.ly / (n_fields + 1)) / eps) for k in range(1, n_fields + 1)]


InitialCondition = Callable[[np.ndarray, np.ndarray, Grid2D, float], list[np.ndarray]]

INITIAL_PRESETS: dict[str, InitialCondition] = {
    "square_cross": _square_cross,
    "absent_phase1": _absent_phase1,
    "liquid_lens": _liquid_lens,
    "two_droplets_sym": _two_droplets_sym,
    "two_droplets_right": _two_droplets_right,
}


def init_preset(name: str, p: ModelParams, grid: Grid2D) -> PhaseState:
    xx, yy = grid.coordinates()
    if name == "stacked_layers":
        arrays = _stacked_layers(xx, yy, grid, p.epsilon, p.n_phases - 1)
    elif name in INITIAL_PRESETS:
        if p.n_phases != 3:
            raise ValueError(f"initial condition '{name}' is a three-phase configuration")
        arrays = INITIAL_PRESETS[name](xx, yy, grid, p.epsilon)
    else:
        raise KeyError(f"unknown initial condition '{name}'")
    return PhaseState(tuple(ScalarField(grid, a) for a in arrays), 0.0)
