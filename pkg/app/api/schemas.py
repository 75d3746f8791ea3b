from typing import Literal

from pydantic import BaseModel, ConfigDict, Field, ValidationInfo, field_validator


def _split_numbers(value, cast=float):
    if isinstance(value, str):
        parts = [p.strip() for p in value.split(",") if p.strip()]
        if not parts:
            raise ValueError("expected a comma-separated list of numbers")
        return tuple(cast(p) for p in parts)
    if isinstance(value, (int, float)):
        return (cast(value),)
    return value


class ExperimentConfig(BaseModel):
    """Validated experiment configuration; unset keys fall back to the preset's own defaults."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    preset: str = Field(default="energy_stability", description="Experiment preset to run.")
    initial: str | None = Field(default=None, description="Initial-condition preset overriding the experiment's own.")
    nx: int = Field(default=401, ge=3, description="Grid nodes along x.")
    ny: int = Field(default=401, ge=3, description="Grid nodes along y.")
    lx: float = Field(default=1.0, gt=0, description="Domain length along x.")
    ly: float = Field(default=1.0, gt=0, description="Domain length along y.")
    epsilon: float = Field(default=0.01, gt=0, description="Interface width parameter.")
    n_phases: int = Field(default=3, ge=2, description="Number of phases N.")
    sigma: tuple[float, ...] = Field(
        default=(1.0, 1.0, 1.0),
        description="Ternary (sigma23, sigma12, sigma13), or sigma12, sigma13, ..., sigma(N-1)N row-major for N != 3.",
    )
    sigma_cases: tuple[tuple[float, ...], ...] | None = Field(
        default=None, description="Several sigma tuples separated by ';' for presets that sweep tensions."
    )
    alpha: float = Field(default=3.01, gt=3, description="Stabilising exponent parameter of the gamma functions.")
    mobility: tuple[float, ...] = Field(default=(1e-4,), description="Mobility constants m_i (one value broadcasts).")
    mobility_exponents: tuple[int, ...] = Field(default=(4,), description="Degeneracy exponents a_j (one broadcasts).")
    tau: float = Field(default=0.01, gt=0, description="Time step.")
    a1: float = Field(default=100.0, ge=0, description="Double-well stabiliser of the outer substeps.")
    a2: float = Field(default=100.0, ge=0, description="Double-well stabiliser of the inner substep.")
    b1: float = Field(default=100.0, ge=0, description="Tension-derivative stabiliser of the outer substeps.")
    b2: float = Field(default=100.0, ge=0, description="Tension-derivative stabiliser of the inner substep.")
    solver_tol: float = Field(default=1e-10, gt=0, le=1e-4, description="Relative residual tolerance of linear solves.")
    solver_maxit: int = Field(default=200, ge=1, description="Restart cycles allowed per linear solve.")
    preconditioner: Literal["lu", "ilu", "cosine"] = Field(
        default="lu", description="Linear-solve preconditioner: sparse LU, incomplete LU or cosine transform."
    )
    t_end: float = Field(default=50.0, gt=0, description="Final time.")
    cadence: int = Field(default=10, ge=1, description="Record diagnostics every this many steps.")
    snapshot_every: int = Field(default=0, ge=0, description="Write a snapshot every this many steps (0: final only).")
    output_dir: str | None = Field(default=None, description="Directory receiving run artifacts.")
    seed: int = Field(default=0, description="Seed for randomised test utilities.")
    paper_scale: bool = Field(default=False, description="Use the full-size grids and times of the source runs.")

    @field_validator("sigma", "mobility", mode="before")
    @classmethod
    def _parse_float_list(cls, value):
        return _split_numbers(value)

    @field_validator("mobility_exponents", mode="before")
    @classmethod
    def _parse_int_list(cls, value):
        return _split_numbers(value, int)

    @field_validator("sigma_cases", mode="before")
    @classmethod
    def _parse_cases(cls, value):
        if isinstance(value, str):
            return tuple(_split_numbers(case) for case in value.split(";") if case.strip())
        return value

    @field_validator("sigma")
    @classmethod
    def _check_sigma(cls, value: tuple[float, ...], info: ValidationInfo):
        n = info.data.get("n_phases", 3)
        if len(value) != n * (n - 1) // 2:
            raise ValueError(f"{n} phases need {n * (n - 1) // 2} surface tensions, got {len(value)}")
        if any(v <= 0 for v in value):
            raise ValueError("surface tensions must be positive")
        return value

    @field_validator("sigma_cases")
    @classmethod
    def _check_cases(cls, value, info: ValidationInfo):
        if value is None:
            return value
        n = info.data.get("n_phases", 3)
        for case in value:
            if len(case) != n * (n - 1) // 2 or any(v <= 0 for v in case):
                raise ValueError(f"invalid surface-tension case {case}")
        return value

    @field_validator("mobility")
    @classmethod
    def _check_mobility(cls, value: tuple[float, ...]):
        if any(v <= 0 for v in value):
            raise ValueError("mobility constants must be positive")
        return value

    @field_validator("mobility_exponents")
    @classmethod
    def _check_exponents(cls, value: tuple[int, ...]):
        if any(v < 1 for v in value):
            raise ValueError("mobility exponents must be integers >= 1")
        return value


class ConsistencyReport(BaseModel):
    """Outcome of sampling the mechanic, energetic, algebraic and dynamic conditions."""

    n_phases: int = Field(description="Number of phases N.")
    alpha: float = Field(description="Alpha used to build the functions.")
    lambdas: list[float] = Field(description="Lambda_i per gamma function.")
    escalations: list[int] = Field(description="How often each Lambda_i was doubled during the build.")
    mechanic: bool
    energetic: bool
    algebraic: bool
    dynamic: bool
    mechanic_residual: float
    energetic_residual: float
    algebraic_residual: float
    min_face_curvature: float = Field(description="Smallest sampled normal curvature on an absent-phase face.")
    non_strict: list[str] = Field(default_factory=list, description="Faces whose curvature is zero, not positive.")
    dynamic_failures: list[str] = Field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.mechanic and self.energetic and self.algebraic and self.dynamic


class StabilityReport(BaseModel):
    satisfied: bool = Field(description="Whether every A*tau and B*tau dominates its Lipschitz constant.")
    margin: float = Field(description="Smallest stabiliser*tau minus Lipschitz constant; negative when violated.")
    lipschitz_f: float = Field(description="max |F''| over the clamped interval.")
    lipschitz_gamma: list[float] = Field(description="Lipschitz constant of the tension derivative, per field.")
    stabilizers: list[tuple[float, float]] = Field(description="(A, B) applied to each field's substep.")


class SubstepReport(BaseModel):
    field_index: int = Field(description="1-based index of the evolved phase field.")
    dt: float
    iterations: int
    residual: float
    dissipation: float = Field(description="dt * sum over faces of M |grad mu|^2.")


class StepReport(BaseModel):
    energy_before: float
    energy_after: float
    masses_before: list[float] = Field(description="Mean of each field before the step.")
    masses_after: list[float]
    substeps: list[SubstepReport]

    @property
    def dissipation(self) -> float:
        return sum(s.dissipation for s in self.substeps)

    @property
    def iterations(self) -> list[int]:
        return [s.iterations for s in self.substeps]

    @property
    def max_residual(self) -> float:
        return max((s.residual for s in self.substeps), default=0.0)


class AngleReport(BaseModel):
    """Apparent contact angles in degrees; theta_ik opens into the phase bounded by the other two interfaces."""

    theta23: float
    theta12: float
    theta13: float
    junction: tuple[float, float]
    fit_residuals: list[float] = Field(description="RMS orthogonal distance of each interface fit.")

    @property
    def total(self) -> float:
        return self.theta23 + self.theta12 + self.theta13


class ConvergenceReport(BaseModel):
    levels: list[float] = Field(description="Mesh sizes or time steps, coarse to fine.")
    errors: list[float] = Field(description="Norms of differences between adjacent levels.")
    orders: list[float] = Field(default_factory=list, description="Estimated orders; empty below three levels.")
    richardson: list[float] = Field(default_factory=list, description="Error estimates of the coarser level per pair.")


class SpreadingReport(BaseModel):
    coefficients: tuple[float, float, float]
    regime: str = Field(description="'partial' if every S_i > 0, 'total' if some S_i < 0, else 'critical'.")


class DiagnosticsRecord(BaseModel):
    """Time series of a run, sampled every `cadence` steps and at the end."""

    steps: list[int] = Field(default_factory=list)
    times: list[float] = Field(default_factory=list)
    energies: list[float] = Field(default_factory=list)
    volumes: list[list[float]] = Field(default_factory=list)
    means: list[list[float]] = Field(default_factory=list)
    minima: list[list[float]] = Field(default_factory=list)
    maxima: list[list[float]] = Field(default_factory=list)
    energy_increases: int = Field(default=0, description="Steps whose energy rose beyond the tolerance.")
    max_energy_increase: float = Field(default=0.0, description="Largest relative energy rise of any step.")
    total_iterations: int = 0
    failure: str | None = None

    @property
    def energy_monotone(self) -> bool:
        return self.energy_increases == 0


class PresetInfo(BaseModel):
    name: str
    reproduces: str = Field(description="Experiment of the source study the preset reproduces.")
    description: str
    defaults: dict[str, object] = Field(description="Desk-scale parameter overrides.")
    paper_defaults: dict[str, object] = Field(description="Overrides applied with --paper-scale.")
    case_initials: dict[str, str] = Field(
        default_factory=dict, description="Initial condition for specific tension cases, keyed by case label."
    )


class ExperimentSummary(BaseModel):
    preset: str
    parameters: dict[str, object]
    cases: dict[str, dict[str, object]] = Field(default_factory=dict, description="Per-case measured quantities.")
    checks: dict[str, bool] = Field(default_factory=dict, description="Acceptance checks evaluated on the results.")
    runtime_seconds: float = 0.0

    @property
    def passed(self) -> bool:
        return all(self.checks.values())
