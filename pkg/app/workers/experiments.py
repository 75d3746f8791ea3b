"""
Experiment drivers, one per preset. Each runs its cases, writes series, snapshots and
a summary through the artifact store, and evaluates the acceptance checks of the
experiment it reproduces.
"""

import logging
import time
from typing import Callable

from app.api.schemas import DiagnosticsRecord, ExperimentConfig, ExperimentSummary
from app.db import ArtifactStore, RunArtifacts
from app.exceptions import AcceptanceError, ConfigError, DBPFError, DegenerateFitError, NoJunctionError, SolverError
from app.services import diagnostics
from app.services.model import ModelParams, PhaseState, init_preset, phase_fractions, spreading_coefficients
from app.services.scheme import SchemeParams, check_stability_condition, run
from app.services.tension import SurfaceTensions
from app.utils.grid_field import Grid2D, ScalarField
from app.workers.presets import case_initial, case_label, resolve_config, sigma_cases

logger = logging.getLogger(__name__)
logger.setLevel(logging.INFO)

ORDER_BAND = (1.8, 2.2)
ANGLE_TOL = 3.0
JANUS_ANGLE_TOL = 4.0
MEAN_DRIFT_TOL = 1e-10
VOLUME_DRIFT_TOL = 0.01
# volumes below this fraction of the domain are measured against it, not against themselves
VOLUME_FLOOR = 1e-3
ISOPERIMETRIC_TOL = 0.02
ABSENT_PHASE_TOL = 1e-6
COARSEST_TAU = 1 / 64

Driver = Callable[[ExperimentConfig, RunArtifacts, ExperimentSummary], None]


def build_params(cfg: ExperimentConfig, sigma: tuple[float, ...]) -> ModelParams:
    try:
        tensions = SurfaceTensions.ternary(*sigma) if cfg.n_phases == 3 else SurfaceTensions(cfg.n_phases, sigma)
        return ModelParams.create(cfg.epsilon, tensions, cfg.alpha, cfg.mobility, cfg.mobility_exponents)
    except (TypeError, ValueError) as exc:
        raise ConfigError("sigma", str(exc)) from exc


def build_scheme(cfg: ExperimentConfig, tau: float | None = None) -> SchemeParams:
    return SchemeParams(
        tau=tau or cfg.tau,
        a1=cfg.a1,
        a2=cfg.a2,
        b1=cfg.b1,
        b2=cfg.b2,
        solver_tol=cfg.solver_tol,
        solver_maxit=cfg.solver_maxit,
        preconditioner=cfg.preconditioner,
    )


def build_grid(cfg: ExperimentConfig, nx: int | None = None, ny: int | None = None) -> Grid2D:
    return Grid2D(nx or cfg.nx, ny or cfg.ny, cfg.lx, cfg.ly)


def initial_state(cfg: ExperimentConfig, p: ModelParams, grid: Grid2D, name: str | None = None) -> PhaseState:
    name = name or cfg.initial or "liquid_lens"
    try:
        return init_preset(name, p, grid)
    except KeyError as exc:
        raise ConfigError("initial", str(exc)) from exc
    except ValueError as exc:
        raise ConfigError("initial", str(exc)) from exc


def simulate(
    cfg: ExperimentConfig,
    p: ModelParams,
    sp: SchemeParams,
    state0: PhaseState,
    artifacts: RunArtifacts,
    label: str,
    t_end: float | None = None,
    keep_steps: tuple[int, ...] = (),
) -> tuple[PhaseState, DiagnosticsRecord, dict[int, PhaseState]]:
    """
    Run one case, writing its series and final snapshot (plus periodic snapshots when
    configured). States at `keep_steps` are returned as well. On a solver failure the
    partial series is written before the error propagates.
    """
    kept: dict[int, PhaseState] = {}

    def on_step(step: int, state: PhaseState, _report) -> None:
        if step in keep_steps:
            kept[step] = state
        if cfg.snapshot_every and step % cfg.snapshot_every == 0:
            artifacts.snapshot(state, f"{label}_step{step:07d}")

    artifacts.snapshot(state0, f"{label}_initial")
    try:
        state, record = run(state0, p, sp, t_end or cfg.t_end, cfg.cadence, on_step=on_step)
    except SolverError as exc:
        if exc.partial_record is not None:
            artifacts.series(exc.partial_record, label)
        raise
    artifacts.series(record, label)
    artifacts.snapshot(state, f"{label}_final")
    return state, record, kept


def _orders_in_band(orders: list[float]) -> bool:
    low, high = ORDER_BAND
    return bool(orders) and all(low <= q <= high for q in orders)


def _record_convergence(summary: ExperimentSummary, name: str, levels, solutions: dict[str, list[ScalarField]]) -> None:
    case = {}
    for field_name, fields in solutions.items():
        for kind in ("l2", "linf"):
            report = diagnostics.convergence_report(levels, fields, kind)
            case[f"{field_name}_{kind}"] = report.model_dump()
            summary.checks[f"{name}_{field_name}_{kind}_order"] = _orders_in_band(report.orders)
    summary.cases[name] = case


def _report_steps(cfg: ExperimentConfig, tau: float) -> tuple[int, int]:
    final = max(1, int(round(cfg.t_end / tau)))
    return max(1, final // 2), final


def accuracy_space(cfg: ExperimentConfig, artifacts: RunArtifacts, summary: ExperimentSummary) -> None:
    n_levels = 4 if cfg.paper_scale else 3
    if (cfg.nx - 1) % 2 ** (n_levels - 1) or (cfg.ny - 1) % 2 ** (n_levels - 1):
        raise ConfigError("nx", f"grid must halve {n_levels - 1} times, use nx - 1 and ny - 1 divisible by {2 ** (n_levels - 1)}")
    sigma = sigma_cases(cfg)[0]
    p = build_params(cfg, sigma)
    sp = build_scheme(cfg)
    half, final = _report_steps(cfg, cfg.tau)
    snapshots: dict[int, dict[str, list[ScalarField]]] = {half: {}, final: {}}
    levels = []
    for k in reversed(range(n_levels)):
        grid = build_grid(cfg, (cfg.nx - 1) // 2**k + 1, (cfg.ny - 1) // 2**k + 1)
        levels.append(grid.hx)
        state, _, kept = simulate(cfg, p, sp, initial_state(cfg, p, grid), artifacts, f"h{grid.nx - 1}", keep_steps=(half,))
        kept[final] = state
        for step, store in snapshots.items():
            store.setdefault("psi", []).append(kept[step].psi)
            store.setdefault("phi", []).append(kept[step].phi)
    for step, store in snapshots.items():
        _record_convergence(summary, f"t={step * cfg.tau:g}", levels, store)


def accuracy_time(cfg: ExperimentConfig, artifacts: RunArtifacts, summary: ExperimentSummary) -> None:
    taus = [COARSEST_TAU]
    while taus[-1] / 2 >= cfg.tau * (1 - 1e-12):
        taus.append(taus[-1] / 2)
    if len(taus) < 3:
        raise ConfigError("tau", f"need tau <= {COARSEST_TAU / 4:g} for three levels below {COARSEST_TAU:g}")
    sigma = sigma_cases(cfg)[0]
    p = build_params(cfg, sigma)
    grid = build_grid(cfg)
    state0 = initial_state(cfg, p, grid)
    snapshots: dict[str, dict[str, list[ScalarField]]] = {"half": {}, "final": {}}
    for tau in taus:
        half, final = _report_steps(cfg, tau)
        state, _, kept = simulate(cfg, p, build_scheme(cfg, tau), state0, artifacts, f"tau{round(1 / tau)}", keep_steps=(half,))
        for key, s in (("half", kept[half]), ("final", state)):
            snapshots[key].setdefault("psi", []).append(s.psi)
            snapshots[key].setdefault("phi", []).append(s.phi)
    for key, store in snapshots.items():
        t = 0.5 * cfg.t_end if key == "half" else cfg.t_end
        _record_convergence(summary, f"t={t:g}", taus, store)


def _sweep(
    cfg: ExperimentConfig,
    artifacts: RunArtifacts,
    summary: ExperimentSummary,
    measure: Callable[[ExperimentConfig, ModelParams, PhaseState, PhaseState, DiagnosticsRecord, dict, dict], None],
) -> None:
    grid = build_grid(cfg)
    sp = build_scheme(cfg)
    for sigma in sigma_cases(cfg):
        label = case_label(sigma)
        p = build_params(cfg, sigma)
        stability = check_stability_condition(p, sp)
        state0 = initial_state(cfg, p, grid, case_initial(cfg, sigma))
        state, record, _ = simulate(cfg, p, sp, state0, artifacts, label)
        case: dict[str, object] = {
            "steps": record.steps[-1],
            "final_energy": record.energies[-1],
            "energy_monotone": record.energy_monotone,
            "stability_condition": stability.satisfied,
        }
        checks: dict[str, bool] = {}
        measure(cfg, p, state0, state, record, case, checks)
        summary.cases[label] = case
        summary.checks.update({f"{label}_{name}": ok for name, ok in checks.items()})


def _energy(cfg, p, state0, state, record, case, checks) -> None:
    case["energy_increases"] = record.energy_increases
    case["max_energy_increase"] = record.max_energy_increase
    checks["energy_monotone"] = record.energy_monotone


def _absent_phase(cfg, p, state0, state, record, case, checks) -> None:
    deviation = max(max(abs(1.0 - low[0]), abs(high[0] - 1.0)) for low, high in zip(record.minima, record.maxima))
    ratio0 = diagnostics.isoperimetric_ratio(state0.phi)
    ratio = diagnostics.isoperimetric_ratio(state.phi)
    case.update({"max_psi_deviation": deviation, "isoperimetric_initial": ratio0, "isoperimetric_final": ratio})
    checks["psi_pinned"] = deviation <= ABSENT_PHASE_TOL
    checks["phi_circular"] = abs(ratio - 1.0) <= ISOPERIMETRIC_TOL


def _drift(series: list[list[float]], k: int) -> float:
    return abs(series[-1][k] - series[0][k])


def _conservation(cfg, p, state0, state, record, case, checks) -> None:
    mean_drift = [_drift(record.means, k) / max(1.0, abs(record.means[0][k])) for k in range(len(state.fields))]
    floor = VOLUME_FLOOR * state.grid.area
    volume_drift = [_drift(record.volumes, k) / max(record.volumes[0][k], floor) for k in range(p.n_phases)]
    case.update({"mean_drift": mean_drift, "volume_drift": volume_drift})
    checks["means_conserved"] = max(mean_drift) <= MEAN_DRIFT_TOL
    checks["volumes_conserved"] = max(volume_drift) <= VOLUME_DRIFT_TOL


def _angle_errors(cfg, p, state, case, checks, tolerance) -> None:
    expected = diagnostics.theoretical_angles(p.tensions)
    try:
        report = final_state_angles(state, cfg.epsilon)
    except (NoJunctionError, DegenerateFitError) as exc:
        logger.warning(f"Angle measurement failed: {exc}")
        case["angle_error"] = str(exc)
        checks["angles"] = False
        return
    measured = (report.theta23, report.theta12, report.theta13)
    case.update({"angles": report.model_dump(), "theoretical_angles": expected})
    checks["angles"] = all(abs(a - b) <= tolerance for a, b in zip(measured, expected))


def _neumann(cfg, p, state0, state, record, case, checks) -> None:
    _angle_errors(cfg, p, state, case, checks, ANGLE_TOL)


def _has_junction(cfg: ExperimentConfig, state: PhaseState) -> bool:
    try:
        diagnostics.locate_junction(diagnostics.extract_contours(state), 4.0 * cfg.epsilon, 12.0 * cfg.epsilon)
    except (NoJunctionError, DegenerateFitError):
        return False
    return True


def _phase_region(state: PhaseState, phase: int) -> ScalarField:
    return phase_fractions(state)[phase - 1]


def _spreading_phase(p: ModelParams) -> int | None:
    spreading = spreading_coefficients(p.tensions)
    negative = [k for k, c in enumerate(spreading.coefficients, start=1) if c < 0]
    return negative[0] if negative else None


def _lens(cfg, p, state0, state, record, case, checks) -> None:
    case["regime"] = spreading_coefficients(p.tensions).regime
    spreader = _spreading_phase(p)
    if spreader is None:
        _angle_errors(cfg, p, state, case, checks, ANGLE_TOL)
        return
    checks["no_junction"] = not _has_junction(cfg, state)
    if spreader == 1:
        checks["lens_layer"] = diagnostics.spans_domain(_phase_region(state, 1), 0.5, "above", axis=0)
    else:
        lens = diagnostics.Contours.points_of(diagnostics.zero_contour(state.psi))
        line = diagnostics.Contours.points_of(diagnostics.zero_contour(state.phi))
        distance = diagnostics.set_distance(lens, line)
        case["lens_line_distance"] = distance
        checks["lens_detached"] = distance > 4.0 * cfg.epsilon


def _droplets(cfg, p, state0, state, record, case, checks) -> None:
    case["regime"] = spreading_coefficients(p.tensions).regime
    spreader = _spreading_phase(p)
    if spreader is None:
        checks["junction"] = _has_junction(cfg, state)
        _angle_errors(cfg, p, state, case, checks, JANUS_ANGLE_TOL)
        return
    checks["no_junction"] = not _has_junction(cfg, state)
    if spreader == 1:

        def separation(s: PhaseState) -> float:
            return diagnostics.centroid_distance(
                diagnostics.region_centroid(_phase_region(s, 2), 0.5, "above"),
                diagnostics.region_centroid(_phase_region(s, 3), 0.5, "above"),
            )

        components = diagnostics.count_components(state.psi, 0.0, "above")
        case.update({"droplet_components": components, "separation_initial": separation(state0), "separation_final": separation(state)})
        checks["two_droplets"] = components == 2
        checks["separating"] = case["separation_final"] > case["separation_initial"]
    else:
        holes = diagnostics.count_holes(_phase_region(state, spreader), 0.5, "above")
        case.update({"shell_phase": spreader, "shell_holes": holes})
        checks["core_shell"] = holes == 1


DRIVERS: dict[str, Driver] = {
    "accuracy_space": accuracy_space,
    "accuracy_time": accuracy_time,
    "energy_stability": lambda cfg, artifacts, summary: _sweep(cfg, artifacts, summary, _energy),
    "algebraic_consistency": lambda cfg, artifacts, summary: _sweep(cfg, artifacts, summary, _absent_phase),
    "volume_conservation": lambda cfg, artifacts, summary: _sweep(cfg, artifacts, summary, _conservation),
    "neumann_angle": lambda cfg, artifacts, summary: _sweep(cfg, artifacts, summary, _neumann),
    "liquid_lens": lambda cfg, artifacts, summary: _sweep(cfg, artifacts, summary, _lens),
    "two_droplets": lambda cfg, artifacts, summary: _sweep(cfg, artifacts, summary, _droplets),
}


def run_experiment(
    cfg: ExperimentConfig,
    store: ArtifactStore | None = None,
    paper_scale: bool | None = None,
    assert_checks: bool = False,
) -> ExperimentSummary:
    """
    Run a preset and write its artifacts. With `assert_checks`, a failed acceptance
    check raises AcceptanceError after the summary has been written.
    """
    cfg = resolve_config(cfg, paper_scale)
    store = store or ArtifactStore(cfg.output_dir)
    summary = ExperimentSummary(preset=cfg.preset, parameters=cfg.model_dump(mode="json"))
    started = time.perf_counter()
    logger.info(f"Running preset '{cfg.preset}' ({'paper' if cfg.paper_scale else 'desk'} scale)")

    with store.session(cfg.preset) as artifacts:
        try:
            DRIVERS[cfg.preset](cfg, artifacts, summary)
        except DBPFError:
            summary.runtime_seconds = time.perf_counter() - started
            artifacts.summary(summary)
            raise
        summary.runtime_seconds = time.perf_counter() - started
        artifacts.summary(summary)

    failed = [name for name, ok in summary.checks.items() if not ok]
    if failed:
        logger.warning(f"Preset '{cfg.preset}' failed checks: {', '.join(failed)}")
    if assert_checks and failed:
        raise AcceptanceError(f"acceptance checks failed: {', '.join(failed)}")
    return summary


def final_state_angles(state: PhaseState, epsilon: float):
    """Angles of a stored state, with the annulus scaled to the interface width."""
    contours = diagnostics.extract_contours(state)
    r_in, r_out = 4.0 * epsilon, 12.0 * epsilon
    junction = diagnostics.locate_junction(contours, r_in, r_out)
    return diagnostics.measure_angles(contours, junction, r_in, r_out)
