from app.api.schemas import ExperimentConfig, PresetInfo
from app.exceptions import ConfigError

_CATALOG = [
    PresetInfo(
        name="accuracy_space",
        reproduces="spatial error table: l2/linf errors and orders of psi, phi for h = 1/64 .. 1/1024 at t = 0.5 and 1",
        description="Square-cross state on nested grids at fixed tau; orders of psi and phi in l2 and linf.",
        defaults={"initial": "square_cross", "nx": 257, "ny": 257, "epsilon": 0.03, "tau": 1e-3, "t_end": 0.5},
        paper_defaults={"nx": 513, "ny": 513, "t_end": 1.0},
    ),
    PresetInfo(
        name="accuracy_time",
        reproduces="temporal error table: l2/linf errors and orders of psi, phi for tau = 1/64 .. 1/1024 at t = 0.5 and 1",
        description="Square-cross state with tau halved from 1/64; orders of psi and phi in l2 and linf.",
        defaults={"initial": "square_cross", "nx": 129, "ny": 129, "epsilon": 0.03, "tau": 1 / 512, "t_end": 1.0},
        paper_defaults={"nx": 257, "ny": 257, "tau": 1 / 1024},
    ),
    PresetInfo(
        name="energy_stability",
        reproduces="energy-versus-time curves of the square cross for four tension triples",
        description="Square-cross state for four tension triples; every step must lower the discrete energy.",
        defaults={
            "initial": "square_cross",
            "nx": 65,
            "ny": 65,
            "epsilon": 0.03,
            "t_end": 20.0,
            "sigma_cases": ((1.0, 1.0, 1.0), (1.0, 2.0, 2.0), (0.6, 1.0, 0.6), (1.0, 0.8, 1.4)),
        },
        paper_defaults={"nx": 401, "ny": 401, "epsilon": 0.01, "t_end": 50.0},
    ),
    PresetInfo(
        name="algebraic_consistency",
        reproduces="absent-phase snapshots: elliptic phi interface relaxing to a circle with psi = 1, t = 0 .. 100",
        description="psi starts at 1 everywhere and must stay there while the elliptic phi interface relaxes to a circle.",
        defaults={"initial": "absent_phase1", "nx": 65, "ny": 65, "epsilon": 0.03, "tau": 0.02, "t_end": 100.0},
        paper_defaults={"nx": 401, "ny": 401, "epsilon": 0.01, "tau": 0.01},
    ),
    PresetInfo(
        name="volume_conservation",
        reproduces="phase-volume histories of the square cross for (1,1,1), (1,2,2), (1,0.9,1.1)",
        description="Square-cross state with degenerate mobility; field means and phase volumes are tracked over time.",
        defaults={
            "initial": "square_cross",
            "nx": 65,
            "ny": 65,
            "epsilon": 0.03,
            "tau": 0.02,
            "t_end": 50.0,
            "sigma_cases": ((1.0, 1.0, 1.0), (1.0, 2.0, 2.0), (1.0, 0.9, 1.1)),
        },
        paper_defaults={"nx": 401, "ny": 401, "epsilon": 0.01, "tau": 0.01},
    ),
    PresetInfo(
        name="neumann_angle",
        reproduces="apparent contact angle table: lens junction angles against the force triangle",
        description="Liquid lens relaxed to equilibrium; measured junction angles against the force triangle.",
        defaults={
            "initial": "liquid_lens",
            "nx": 129,
            "ny": 129,
            "epsilon": 0.015,
            "mobility": (1e-3,),
            "t_end": 20.0,
            "sigma_cases": ((1.0, 1.0, 1.0), (0.6, 1.0, 1.0), (1.0, 2.0, 2.0)),
        },
        paper_defaults={"nx": 401, "ny": 401, "epsilon": 0.01, "mobility": (1e-4,), "t_end": 100.0},
    ),
    PresetInfo(
        name="liquid_lens",
        reproduces="liquid lens between stratified layers: total spreading of each phase and partial spreading",
        description="Lens between two layers under total and partial spreading tensions.",
        defaults={
            "initial": "liquid_lens",
            "nx": 97,
            "ny": 97,
            "epsilon": 0.02,
            "mobility": (1e-3,),
            "t_end": 15.0,
            "sigma_cases": ((3.0, 1.0, 1.0), (1.0, 3.0, 1.0), (1.0, 1.0, 1.4), (1.0, 1.0, 1.0), (1.0, 1.0, 0.2)),
        },
        paper_defaults={"nx": 401, "ny": 401, "t_end": 100.0},
    ),
    PresetInfo(
        name="two_droplets",
        reproduces="two close-by droplets: Janus, multi-core and double-emulsion (core-shell) final states",
        description="Two touching droplets: separation, Janus and core-shell outcomes by tension.",
        defaults={
            "initial": "two_droplets_sym",
            "nx": 97,
            "ny": 97,
            "epsilon": 0.02,
            "mobility": (1e-3,),
            "t_end": 10.0,
            "sigma_cases": ((1.0, 100.0, 100.0), (3.0, 1.0, 1.0), (1.0, 1.0, 1.0), (1.0, 1.0, 3.0)),
        },
        paper_defaults={"nx": 401, "ny": 401, "epsilon": 0.01, "t_end": 50.0},
        case_initials={"sigma_1_1_3": "two_droplets_right"},
    ),
]

PRESETS: dict[str, PresetInfo] = {info.name: info for info in _CATALOG}


def list_presets() -> list[PresetInfo]:
    return list(_CATALOG)


def get_preset(name: str) -> PresetInfo:
    try:
        return PRESETS[name]
    except KeyError:
        raise ConfigError("preset", f"unknown preset '{name}', choose one of {', '.join(PRESETS)}") from None


def resolve_config(cfg: ExperimentConfig, paper_scale: bool | None = None) -> ExperimentConfig:
    """
    Fill the keys the user left unset with the preset's defaults (and its paper-scale
    values when requested). An explicit sigma replaces the preset's sweep of cases.
    """
    preset = get_preset(cfg.preset)
    paper_scale = cfg.paper_scale if paper_scale is None else paper_scale
    overrides = dict(preset.defaults)
    if paper_scale:
        overrides.update(preset.paper_defaults)
    if "sigma" in cfg.model_fields_set:
        overrides.pop("sigma_cases", None)
    update = {key: value for key, value in overrides.items() if key not in cfg.model_fields_set}
    update["paper_scale"] = paper_scale
    return cfg.model_copy(update=update)


def sigma_cases(cfg: ExperimentConfig) -> list[tuple[float, ...]]:
    return list(cfg.sigma_cases) if cfg.sigma_cases else [tuple(cfg.sigma)]


def case_label(sigma: tuple[float, ...]) -> str:
    return "sigma_" + "_".join(f"{s:g}" for s in sigma)


def case_initial(cfg: ExperimentConfig, sigma: tuple[float, ...]) -> str:
    """
    Initial condition for one tension case. While the preset's own initial condition is
    in use, a case listed in `case_initials` starts from its dedicated state instead.
    """
    name = cfg.initial or "liquid_lens"
    preset = get_preset(cfg.preset)
    if name != preset.defaults.get("initial"):
        return name
    return preset.case_initials.get(case_label(sigma), name)
