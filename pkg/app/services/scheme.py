"""
Mobility-operator-splitting time integrator.

Each substep evolves one phase field by a linear, mass-conserving Crank-Nicolson
type solve with every other field frozen. Substeps are composed symmetrically
(Strang), the innermost one over a full step, so the composition is second order
and inherits the energy dissipation of its parts.
"""

import logging
from functools import partial
from typing import Callable, Literal, NamedTuple, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from scipy import sparse

from app.api.schemas import DiagnosticsRecord, StabilityReport, StepReport, SubstepReport
from app.exceptions import SolverError
from app.services.model import (
    ModelParams,
    PhaseState,
    double_well,
    free_energy,
    lipschitz_double_well,
    local_energy,
    mobility,
    volumes,
)
from app.services.solver import (
    ILU_DROP_TOL,
    CosinePreconditioner,
    FactorizedPreconditioner,
    LinearSolveResult,
    solve_substep_linear,
)
from app.services.tension import GammaSet
from app.utils.grid_field import Grid2D, ScalarField, coefficient_divergence, divergence_matrix, integrate

logger = logging.getLogger(__name__)
logger.setLevel(logging.INFO)

ENERGY_TOL = 1e-9
# Krylov cycles granted to reused factors before they are rebuilt
STALE_CYCLES = 3

StabilizedKind = Literal["f", "gamma1_prime", "gamma2_prime"]
PreconditionerKind = Literal["lu", "ilu", "cosine"]
Substep = Callable[..., tuple[PhaseState, SubstepReport]]
Stepper = Callable[..., tuple[PhaseState, StepReport]]


class SchemeParams(BaseModel):
    """Time step, the four stabilisers and linear-solver controls."""

    model_config = ConfigDict(frozen=True)

    tau: float = Field(gt=0, description="Time step.")
    a1: float = Field(default=100.0, ge=0)
    a2: float = Field(default=100.0, ge=0)
    b1: float = Field(default=100.0, ge=0)
    b2: float = Field(default=100.0, ge=0)
    solver_tol: float = Field(default=1e-10, gt=0, le=1e-4)
    solver_maxit: int = Field(default=200, ge=1)
    restart: int = Field(default=30, ge=1)
    preconditioner: PreconditionerKind = Field(
        default="lu", description="Exact sparse LU, incomplete LU, or the low-memory cosine-transform inverse."
    )

    def stabilizers(self, k: int) -> tuple[float, float]:
        """(A, B) for field k: the innermost field 1 uses (a2, b2), every outer field (a1, b1)."""
        return (self.a2, self.b2) if k == 1 else (self.a1, self.b1)


class SubstepWorkspace:
    """
    Preconditioner factors shared by the substeps of a run, one per (grid, field, step
    length). Factors are rebuilt when a solve with them needs more than
    `refactor_after` Krylov iterations or fails outright.
    """

    def __init__(self, refactor_after: int = 10):
        self.refactor_after = refactor_after
        self.factors: dict[tuple[Grid2D, int, float], FactorizedPreconditioner] = {}
        self.factorizations = 0

    def build(
        self, key: tuple[Grid2D, int, float], matrix: sparse.spmatrix, sp: SchemeParams
    ) -> FactorizedPreconditioner:
        grid = key[0]
        drop_tol = ILU_DROP_TOL if sp.preconditioner == "ilu" else None
        factors = FactorizedPreconditioner(matrix, grid.shape, drop_tol)
        self.factors[key] = factors
        self.factorizations += 1
        return factors


def _derivative_pair(kind: StabilizedKind, u_old: np.ndarray, gammas: GammaSet | None):
    if kind == "f":
        _, f, df = double_well(u_old)
        return f, df
    if gammas is None or gammas.n_phases != 3:
        raise ValueError(f"'{kind}' needs the three-phase gamma functions")
    if kind == "gamma1_prime":
        jet = gammas.jet(1, [0.0, u_old])
        return jet.gradient[1], jet.curvature[1]
    if kind == "gamma2_prime":
        jet = gammas.jet(2, [u_old, 0.0])
        return jet.gradient[0], jet.curvature[0]
    raise ValueError(f"unknown stabilised term '{kind}'")


def stabilized_term(
    f_kind: StabilizedKind,
    u_old: ScalarField,
    u_new: ScalarField,
    A: float,
    tau: float,
    gammas: GammaSet | None = None,
) -> ScalarField:
    """f(u_old) + (f'(u_old) / 2 + A tau) (u_new - u_old), nodewise."""
    f, df = _derivative_pair(f_kind, u_old.values, gammas)
    return u_old.with_values(f + (0.5 * df + A * tau) * (u_new.values - u_old.values))


class SubstepSystem(NamedTuple):
    """
    Frozen coefficients of one substep. The chemical potential is mu0 + L d for the
    increment d, with L d = -eps/2 div(gamma grad d) + linear * d.
    """

    grid: Grid2D
    dt: float
    eps: float
    mobility: np.ndarray
    gamma: np.ndarray
    linear: np.ndarray
    mu0: np.ndarray

    def apply_l(self, delta: np.ndarray) -> np.ndarray:
        return -0.5 * self.eps * coefficient_divergence(self.grid, self.gamma, delta) + self.linear * delta

    def rhs(self) -> ScalarField:
        return ScalarField(self.grid, self.dt * coefficient_divergence(self.grid, self.mobility, self.mu0))

    def matrix(self) -> sparse.csr_matrix:
        """Assembled I - dt div(M grad L) over C-ordered nodal values."""
        size = self.grid.nx * self.grid.ny
        l_matrix = sparse.diags(self.linear.ravel()) - 0.5 * self.eps * divergence_matrix(self.grid, self.gamma)
        coupling = divergence_matrix(self.grid, self.mobility) @ l_matrix
        return (sparse.identity(size, format="csr") - self.dt * coupling).tocsr()


def substep_system(
    state: PhaseState, k: int, dt: float, p: ModelParams, sp: SchemeParams, frozen: PhaseState | None = None
) -> SubstepSystem:
    """Linearise field k's substep about `state`, every other field taken from `frozen`."""
    frozen = frozen or state
    grid = state.grid
    u0 = state.field(k).values
    eps = p.eps(k)
    A, B = sp.stabilizers(k)

    values = frozen.arrays()
    values[k - 1] = u0
    jets = [p.gammas.jet(j, values) for j in range(1, p.n_phases)]
    gamma = jets[k - 1].value

    _, f, df = double_well(u0)
    base = gamma * f / eps
    linear = gamma * (0.5 * df + A * sp.tau) / eps
    for j, jet in enumerate(jets, start=1):
        if j == k:
            continue
        g = local_energy(frozen.field(j), p.eps(j))
        base = base + g * jet.gradient[k - 1]
        linear = linear + g * (0.5 * jet.curvature[k - 1] + B * sp.tau)
    mu0 = -eps * coefficient_divergence(grid, gamma, u0) + base
    return SubstepSystem(grid, dt, eps, mobility(k, frozen, p).values, gamma, linear, mu0)


def _solve_factored(
    matrix: sparse.csr_matrix,
    rhs: ScalarField,
    key: tuple[Grid2D, int, float],
    sp: SchemeParams,
    workspace: SubstepWorkspace | None,
) -> LinearSolveResult:
    if workspace is None:
        workspace = SubstepWorkspace()
    cached = workspace.factors.get(key)
    if cached is not None:
        try:
            result = solve_substep_linear(
                matrix, rhs, sp.solver_tol, min(STALE_CYCLES, sp.solver_maxit), cached, sp.restart
            )
        except SolverError as exc:
            logger.debug(f"Reused factors for field {key[1]} failed ({exc}), refactorising")
        else:
            if result.iterations > workspace.refactor_after:
                del workspace.factors[key]
            return result
    factors = workspace.build(key, matrix, sp)
    return solve_substep_linear(matrix, rhs, sp.solver_tol, sp.solver_maxit, factors, sp.restart)


def field_substep(
    state: PhaseState,
    k: int,
    dt: float,
    p: ModelParams,
    sp: SchemeParams,
    frozen: PhaseState | None = None,
    workspace: SubstepWorkspace | None = None,
) -> tuple[PhaseState, SubstepReport]:
    """
    Advance field k over dt with every other field taken from `frozen` (default: `state`).

    Unknown is the increment d = u_new - u_old. With mu = mu0 + L d the substep reads
    d = dt div(M grad mu), which after eliminating mu is the linear fourth-order system
    d - dt div(M grad L d) = dt div(M grad mu0). Preconditioner factors are taken from
    and stored in `workspace` when one is given.
    """
    system = substep_system(state, k, dt, p, sp, frozen)
    grid, M = state.grid, system.mobility
    rhs = system.rhs()
    if not np.any(rhs.values):
        report = SubstepReport(field_index=k, dt=dt, iterations=0, residual=0.0, dissipation=0.0)
        return state, report

    matrix = system.matrix()
    weights = grid.weights / grid.area
    if sp.preconditioner == "cosine":
        m_bar = float(np.sum(weights * M))
        preconditioner = CosinePreconditioner(
            grid,
            c4=dt * m_bar * 0.5 * system.eps * float(np.sum(weights * system.gamma)),
            c2=dt * m_bar * max(float(np.sum(weights * system.linear)), 0.0),
        )
        result = solve_substep_linear(matrix, rhs, sp.solver_tol, sp.solver_maxit, preconditioner, sp.restart)
    else:
        result = _solve_factored(matrix, rhs, (grid, k, dt), sp, workspace)

    delta = result.solution.values
    # the exact increment has zero mean; remove the solver's drift so mass is conserved to round-off
    delta = delta - float(np.sum(weights * delta))
    mu = system.mu0 + system.apply_l(delta)
    dissipation = -dt * float(np.sum(grid.weights * mu * coefficient_divergence(grid, M, mu)))

    new_state = state.with_field(k, ScalarField(grid, state.field(k).values + delta))
    report = SubstepReport(
        field_index=k, dt=dt, iterations=result.iterations, residual=result.residual, dissipation=dissipation
    )
    return new_state, report


def substep_phi(
    state: PhaseState,
    psi_frozen: ScalarField,
    half_tau: float,
    p: ModelParams,
    sp: SchemeParams,
    workspace: SubstepWorkspace | None = None,
) -> tuple[PhaseState, SubstepReport]:
    """Outer substep of the three-phase scheme: evolve phi with psi frozen at `psi_frozen`."""
    return field_substep(state, 2, half_tau, p, sp, frozen=state.with_field(1, psi_frozen), workspace=workspace)


def substep_psi(
    state: PhaseState,
    phi_half: ScalarField,
    tau: float,
    p: ModelParams,
    sp: SchemeParams,
    workspace: SubstepWorkspace | None = None,
) -> tuple[PhaseState, SubstepReport]:
    """Inner substep of the three-phase scheme: evolve psi with phi frozen at `phi_half`."""
    return field_substep(state, 1, tau, p, sp, frozen=state.with_field(2, phi_half), workspace=workspace)


def _masses(state: PhaseState) -> list[float]:
    return [integrate(u) / state.grid.area for u in state.fields]


def strang_step(
    state: PhaseState, p: ModelParams, sp: SchemeParams, workspace: SubstepWorkspace | None = None
) -> tuple[PhaseState, StepReport]:
    """phi over tau/2 with psi^n frozen, psi over tau with phi^(n+1/2), phi over tau/2 with psi^(n+1)."""
    energy_before = free_energy(state, p)
    masses_before = _masses(state)

    half, first = substep_phi(state, state.psi, 0.5 * sp.tau, p, sp, workspace)
    full, second = substep_psi(half, half.phi, sp.tau, p, sp, workspace)
    end, third = substep_phi(full, full.psi, 0.5 * sp.tau, p, sp, workspace)
    end = end.with_time(state.time + sp.tau)

    report = StepReport(
        energy_before=energy_before,
        energy_after=free_energy(end, p),
        masses_before=masses_before,
        masses_after=_masses(end),
        substeps=[first, second, third],
    )
    return end, report


def _indexed_substep(
    k: int,
    state: PhaseState,
    dt: float,
    p: ModelParams,
    sp: SchemeParams,
    workspace: SubstepWorkspace | None = None,
):
    return field_substep(state, k, dt, p, sp, workspace=workspace)


def field_substeps(n_fields: int) -> list[Substep]:
    """Substeps ordered by field index; the first entry becomes the innermost of the composition."""
    return [partial(_indexed_substep, k) for k in range(1, n_fields + 1)]


def compose_mos(substeps: Sequence[Substep]) -> Stepper:
    """
    Strang composition S_n(tau/2) ... S_2(tau/2) S_1(tau) S_2(tau/2) ... S_n(tau/2),
    applied right to left, so S_n runs first and S_1 sits in the middle. Every
    substep takes (state, dt, p, sp, workspace=...).
    """
    if not substeps:
        raise ValueError("compose_mos needs at least one substep")
    outer = list(substeps[1:])
    schedule = [(s, 0.5) for s in reversed(outer)] + [(substeps[0], 1.0)] + [(s, 0.5) for s in outer]

    def stepper(
        state: PhaseState, p: ModelParams, sp: SchemeParams, workspace: SubstepWorkspace | None = None
    ) -> tuple[PhaseState, StepReport]:
        energy_before = free_energy(state, p)
        masses_before = _masses(state)
        current = state
        reports = []
        for substep, fraction in schedule:
            current, sub = substep(current, fraction * sp.tau, p, sp, workspace=workspace)
            reports.append(sub)
        current = current.with_time(state.time + sp.tau)
        return current, StepReport(
            energy_before=energy_before,
            energy_after=free_energy(current, p),
            masses_before=masses_before,
            masses_after=_masses(current),
            substeps=reports,
        )

    return stepper


def default_stepper(p: ModelParams) -> Stepper:
    return strang_step if p.n_phases == 3 else compose_mos(field_substeps(p.n_phases - 1))


def check_stability_condition(p: ModelParams, sp: SchemeParams) -> StabilityReport:
    """
    Energy dissipation is guaranteed when A tau >= L_F and B tau >= L_gamma for every
    substep, L being the Lipschitz constants of f and of the tension derivatives.
    Violations are reported and logged, never raised.
    """
    lipschitz_f = lipschitz_double_well()
    n_fields = p.n_phases - 1
    margins, lipschitz_gamma, stabilizers = [], [], []
    for k in range(1, n_fields + 1):
        A, B = sp.stabilizers(k)
        l_gamma = max((p.gammas.lipschitz(j, k) for j in range(1, n_fields + 1) if j != k), default=0.0)
        margins.append(min(A * sp.tau - lipschitz_f, B * sp.tau - l_gamma))
        lipschitz_gamma.append(l_gamma)
        stabilizers.append((A, B))

    report = StabilityReport(
        satisfied=min(margins) >= 0,
        margin=min(margins),
        lipschitz_f=lipschitz_f,
        lipschitz_gamma=lipschitz_gamma,
        stabilizers=stabilizers,
    )
    if not report.satisfied:
        logger.warning(
            f"Stabilisers do not dominate the Lipschitz constants (margin {report.margin:.4g}); "
            f"energy decay is not guaranteed"
        )
    return report


def _append_sample(record: DiagnosticsRecord, step: int, state: PhaseState, energy: float) -> None:
    record.steps.append(step)
    record.times.append(state.time)
    record.energies.append(energy)
    record.volumes.append(volumes(state))
    record.means.append(_masses(state))
    record.minima.append([u.min() for u in state.fields])
    record.maxima.append([u.max() for u in state.fields])


def run(
    state0: PhaseState,
    p: ModelParams,
    sp: SchemeParams,
    t_end: float,
    cadence: int = 10,
    stepper: Stepper | None = None,
    on_step: Callable[[int, PhaseState, StepReport], None] | None = None,
) -> tuple[PhaseState, DiagnosticsRecord]:
    """
    Step from state0 until t_end (round(t_end / tau) steps, at least one), sampling
    diagnostics every `cadence` steps and at the end. Every step's energy change is
    checked against the dissipation law. The stepper is called as
    stepper(state, p, sp, workspace=...) so preconditioner factors persist across
    steps. A SolverError is re-raised with the partial record attached.
    """
    if not t_end > 0:
        raise ValueError(f"t_end must be positive, got {t_end}")
    stepper = stepper or default_stepper(p)
    workspace = SubstepWorkspace()
    n_steps = max(1, int(round(t_end / sp.tau)))
    record = DiagnosticsRecord()
    state = state0
    _append_sample(record, 0, state, free_energy(state, p))
    logger.info(f"Starting run: {n_steps} steps of tau={sp.tau:g} on a {state.grid.nx}x{state.grid.ny} grid")

    for step in range(1, n_steps + 1):
        try:
            state, report = stepper(state, p, sp, workspace=workspace)
        except SolverError as exc:
            record.failure = str(exc)
            exc.partial_record = record
            logger.error(f"Step {step} failed at t={state.time:g}: {exc}")
            raise

        scale = 1.0 + abs(report.energy_before)
        increase = (report.energy_after - report.energy_before) / scale
        if increase > ENERGY_TOL:
            record.energy_increases += 1
            logger.warning(f"Energy rose by {increase:.3e} (relative) at step {step}")
        record.max_energy_increase = max(record.max_energy_increase, increase)
        record.total_iterations += sum(report.iterations)
        if not state.is_healthy():
            logger.warning(f"Phase fields left [-1.5, 1.5] at step {step}")

        if on_step is not None:
            on_step(step, state, report)
        if step % cadence == 0 or step == n_steps:
            _append_sample(record, step, state, report.energy_after)
            logger.info(
                f"step {step}/{n_steps} t={state.time:.6g} W={report.energy_after:.10g} "
                f"iterations={report.iterations}"
            )
    return state, record
