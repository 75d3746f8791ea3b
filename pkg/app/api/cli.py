import argparse
import logging
from pathlib import Path

from app.api.schemas import ExperimentConfig
from app.config import parse_config, settings
from app.db import ArtifactStore
from app.db.snapshots import read_snapshot
from app.exceptions import AcceptanceError, ConfigError, DBPFError
from app.services.tension import SurfaceTensions, build_gamma_n, verify_consistency
from app.workers.experiments import final_state_angles, run_experiment
from app.workers.presets import list_presets

logger = logging.getLogger(__name__)
logger.setLevel(logging.INFO)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dbpf", description="Multiphase Cahn-Hilliard experiments.")
    parser.add_argument("--threads", type=int, default=None, help="Worker threads for the cosine transforms.")
    commands = parser.add_subparsers(dest="command", required=True)

    run = commands.add_parser("run", help="Run an experiment preset.")
    run.add_argument("--config", type=Path, help="Flat key = value configuration file.")
    run.add_argument("--preset", help="Preset name, overrides the config file.")
    run.add_argument("--out", help="Output directory, overrides the config file.")
    run.add_argument("--paper-scale", action="store_true", help="Use full-size grids and run times.")
    run.add_argument("--assert", dest="assert_checks", action="store_true", help="Exit 4 when a check fails.")

    commands.add_parser("presets", help="List the experiment presets.")

    check = commands.add_parser("check-gamma", help="Certify the tension functions of a configuration.")
    check.add_argument("--config", type=Path)
    check.add_argument("--assert", dest="assert_checks", action="store_true")

    angles = commands.add_parser("angles", help="Measure junction angles of a stored snapshot.")
    angles.add_argument("snapshot", type=Path)
    angles.add_argument("--config", type=Path, help="Configuration supplying epsilon for the fit annulus.")
    return parser


def load_config(path: Path | None, **overrides) -> ExperimentConfig:
    text = ""
    if path is not None:
        try:
            text = path.read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError("config", f"cannot read {path}: {exc}") from exc
    cfg = parse_config(text)
    update = {key: value for key, value in overrides.items() if value is not None}
    if not update:
        return cfg
    # revalidate so the overrides count as explicitly set keys
    return ExperimentConfig.model_validate({**cfg.model_dump(exclude_unset=True), **update})


def _run(args) -> int:
    cfg = load_config(args.config, preset=args.preset, output_dir=args.out)
    summary = run_experiment(
        cfg,
        ArtifactStore(cfg.output_dir),
        paper_scale=args.paper_scale or cfg.paper_scale or settings.PAPER_SCALE,
        assert_checks=args.assert_checks,
    )
    print(summary.model_dump_json(indent=2))
    return 0


def _presets(_args) -> int:
    for info in list_presets():
        defaults = ", ".join(f"{key}={value}" for key, value in info.defaults.items())
        print(f"{info.name:<22} {info.reproduces:<32} {defaults}")
    return 0


def _tensions(cfg: ExperimentConfig) -> SurfaceTensions:
    try:
        return SurfaceTensions.ternary(*cfg.sigma) if cfg.n_phases == 3 else SurfaceTensions(cfg.n_phases, cfg.sigma)
    except (TypeError, ValueError) as exc:
        raise ConfigError("sigma", str(exc)) from exc


def _check_gamma(args) -> int:
    cfg = load_config(args.config)
    tensions = _tensions(cfg)
    report = verify_consistency(build_gamma_n(tensions, cfg.alpha), tensions)
    print(report.model_dump_json(indent=2))
    if args.assert_checks and not report.passed:
        raise AcceptanceError("tension functions failed the consistency certificate")
    return 0


def _angles(args) -> int:
    cfg = load_config(args.config)
    state = read_snapshot(args.snapshot)
    print(final_state_angles(state, cfg.epsilon).model_dump_json(indent=2))
    return 0


COMMANDS = {"run": _run, "presets": _presets, "check-gamma": _check_gamma, "angles": _angles}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    if args.threads:
        settings.THREADS = args.threads
    try:
        return COMMANDS[args.command](args)
    except DBPFError as exc:
        logger.error(f"{type(exc).__name__}: {exc}")
        return exc.exit_code
